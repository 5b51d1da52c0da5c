//! Paraphrase generation for ground-truth narrations.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Mat;
use crate::corpus::{ClipAnnotation, Provenance};
use crate::decoding::{DecodingConfig, Strategy};
use crate::grammar::{Grammar, Vocab, PAD_ID};
use crate::narrator::{CaptionExample, LanguageModel, Narrator, NarratorConfig};
use crate::params::{Adam, AdamConfig};
use crate::Result;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RephraserConfig {
    pub max_candidates: usize,
    pub seed: u64,
}

impl Default for RephraserConfig {
    fn default() -> Self {
        Self {
            max_candidates: 3,
            seed: 0,
        }
    }
}

fn sentence_seed(seed: u64, sentence: &str) -> u64 {
    let digest = Sha256::digest(sentence.as_bytes());
    seed ^ u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Strip punctuation, drop exact duplicates, keep first occurrences.
pub fn postprocess(candidates: &[String]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for c in candidates {
        let cleaned = c
            .split_whitespace()
            .map(|w| w.chars().filter(|ch| !ch.is_ascii_punctuation()).collect::<String>())
            .filter(|w| !w.is_empty())
            .collect::<Vec<_>>()
            .join(" ");
        if !out.contains(&cleaned) {
            out.push(cleaned);
        }
    }
    out
}

/// Rule-based paraphraser: synonym swaps and clause reordering that keep the
/// parsed event intact.
#[derive(Clone, Debug)]
pub struct Rephraser {
    pub grammar: Grammar,
    pub config: RephraserConfig,
}

impl Rephraser {
    pub fn new(grammar: Grammar, config: RephraserConfig) -> Self {
        Self { grammar, config }
    }

    /// Up to `max_candidates` paraphrases, each different from the input.
    /// Unparseable input yields no candidates.
    pub fn rephrase(&self, sentence: &str) -> Vec<String> {
        let source = postprocess(&[sentence.to_string()]).remove(0);
        let Some((class, phrasing)) = self.grammar.parse_str(&source) else {
            return Vec::new();
        };
        let options: Vec<String> = self
            .grammar
            .phrasings(&class)
            .into_iter()
            .filter(|p| *p != phrasing)
            .filter_map(|p| self.grammar.realize(&class, &p).ok())
            .map(|words| words.join(" "))
            .filter(|s| *s != source)
            .collect();
        let options = postprocess(&options);
        let n = self.config.max_candidates.min(options.len());
        let mut rng = ChaCha8Rng::seed_from_u64(sentence_seed(self.config.seed, &source));
        let mut picks = sample(&mut rng, options.len(), n).into_vec();
        picks.sort_unstable();
        picks.into_iter().map(|i| options[i].clone()).collect()
    }

    /// Paraphrases of every annotation, tagged as rephrased.
    pub fn rephrase_corpus(&self, annotations: &[ClipAnnotation]) -> Vec<ClipAnnotation> {
        annotations
            .iter()
            .flat_map(|a| {
                self.rephrase(&a.narration).into_iter().map(|narration| ClipAnnotation {
                    narration,
                    provenance: Provenance::Rephrased,
                    score: None,
                    ..a.clone()
                })
            })
            .collect()
    }
}

/// Learned paraphraser: a decoder with cross-attention onto a fixed random
/// encoding of the source tokens, decoded with diverse beam search.
#[derive(Clone, Debug)]
pub struct Seq2SeqRephraser {
    pub narrator: Narrator,
    pub decoding: DecodingConfig,
    pub max_candidates: usize,
    token_table: Mat,
    pos_table: Mat,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct Seq2SeqConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for Seq2SeqConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr: 3e-3,
            seed: 0,
        }
    }
}

impl Seq2SeqRephraser {
    /// The paper's operating point: 20 groups of one beam, penalty 0.7.
    pub fn default_decoding() -> DecodingConfig {
        DecodingConfig {
            strategy: Strategy::DiverseBeam,
            beam: 20,
            groups: 20,
            diversity: 0.7,
            k: 20,
            ..Default::default()
        }
    }

    pub fn new(lm: &LanguageModel, seed: u64) -> Result<Self> {
        let width = 32;
        let config = NarratorConfig {
            visual_dim: width,
            ..Default::default()
        };
        let narrator = Narrator::new(lm, config, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let normal = rand_distr::StandardNormal;
        let token_table = Mat::from_shape_fn((lm.vocab.len(), width), |_| rng.sample::<f64, _>(normal));
        let pos_table = Mat::from_shape_fn((lm.config.max_len, width), |_| 0.5 * rng.sample::<f64, _>(normal));
        Ok(Self {
            narrator,
            decoding: Self::default_decoding(),
            max_candidates: 3,
            token_table,
            pos_table,
        })
    }

    fn vocab(&self) -> &Vocab {
        &self.narrator.vocab
    }

    /// Source encoding: one row per position, padded to the model length.
    fn encode_source(&self, ids: &[usize]) -> Mat {
        let len = self.pos_table.nrows();
        Mat::from_shape_fn((len, self.token_table.ncols()), |(i, j)| {
            let tok = ids.get(i).copied().unwrap_or(PAD_ID);
            self.token_table[[tok, j]] + self.pos_table[[i, j]]
        })
    }

    /// Fit on (source, paraphrase) pairs; returns the final epoch's mean
    /// per-token loss.
    pub fn train(&mut self, pairs: &[(String, String)], config: &Seq2SeqConfig) -> Result<f64> {
        let mut examples = Vec::with_capacity(pairs.len());
        for (src, tgt) in pairs {
            let ids = self.vocab().encode_str(src)?;
            examples.push(CaptionExample {
                feats: Arc::new(self.encode_source(&ids)),
                body: self.vocab().encode_str(tgt)?,
            });
        }
        let mut opt = Adam::new(AdamConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut last = f64::NAN;
        for _ in 0..config.epochs {
            let order = sample(&mut rng, examples.len(), examples.len()).into_vec();
            let (mut total, mut count) = (0.0, 0usize);
            for chunk in order.chunks(config.batch_size.max(1)) {
                let batch: Vec<&CaptionExample> = chunk.iter().map(|&i| &examples[i]).collect();
                let (loss, n, mut grads) = self.narrator.captioning_loss(&batch)?;
                grads.scale(1.0 / n as f64);
                opt.step(&mut self.narrator.store, &grads, config.lr);
                total += loss;
                count += n;
            }
            last = total / count.max(1) as f64;
        }
        Ok(last)
    }

    /// Paraphrase candidates via diverse beam search, post-processed and
    /// cut to `max_candidates`; the source itself is never returned.
    pub fn rephrase(&self, sentence: &str) -> Result<Vec<String>> {
        let source = postprocess(&[sentence.to_string()]).remove(0);
        let ids = self.vocab().encode_str(&source)?;
        let feats = self.encode_source(&ids);
        let mut rng = ChaCha8Rng::seed_from_u64(self.decoding.seed);
        let outs = self.narrator.narrate(&feats, &self.decoding, &mut rng)?;
        let texts: Vec<String> = outs.iter().map(|o| self.vocab().decode(o)).collect();
        Ok(postprocess(&texts)
            .into_iter()
            .filter(|t| !t.is_empty() && *t != source)
            .take(self.max_candidates)
            .collect())
    }
}
