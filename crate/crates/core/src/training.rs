//! Training loops: augmented contrastive pretraining of the dual encoder,
//! language-model and narrator fitting, and max-margin fine-tuning.
//!
//! Batches are assembled from labeled clips (ground-truth narration known)
//! and unlabeled clips. A labeled clip takes its text from the rephraser
//! with probability `rephrase_prob`, otherwise from the narrator; unlabeled
//! clips always take a narrator candidate. Each pair carries the temperature
//! of the branch that produced it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Mat};
use crate::corpus::{read_jsonl, write_jsonl, ClipAnnotation, ClipRef, Provenance};
use crate::decoding::DecodingConfig;
use crate::dual_encoder::{clip_frames, dual_temperature_loss, max_margin_loss, DualEncoder};
use crate::evaluation::relevance_matrix;
use crate::grammar::{Grammar, Vocab};
use crate::narrator::{filter_candidates, CaptionExample, FilterMode, LanguageModel, Narrator};
use crate::params::{Adam, AdamConfig};
use crate::rephraser::Rephraser;
use crate::world::VideoRecord;
use crate::{Error, Result};

pub fn clip_name(clip: &ClipRef) -> String {
    format!("{}[{},{})", clip.video_id, clip.t, clip.e)
}

/// Mix a seed with a clip's identity.
pub fn clip_seed(seed: u64, clip: &ClipRef) -> u64 {
    let digest = Sha256::digest(clip_name(clip).as_bytes());
    seed ^ u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant,
    /// Linear warmup, then cosine decay to a tenth of the peak.
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CachingMode {
    /// Candidates are generated once up front and reused.
    Cached,
    /// Candidates are generated when a batch asks for them.
    OnTheFly,
}

/// Which text sources a run draws from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Augmentation {
    /// Labeled clips may take a paraphrase of their narration.
    pub rephrase: bool,
    /// Labeled clips may take a narrator caption.
    pub recaption: bool,
    /// Unlabeled clips are captioned by the narrator.
    pub pseudo: bool,
}

impl Augmentation {
    pub const NONE: Self = Self {
        rephrase: false,
        recaption: false,
        pseudo: false,
    };
    pub const ALL: Self = Self {
        rephrase: true,
        recaption: true,
        pseudo: true,
    };

    pub fn needs_narrator(&self) -> bool {
        self.recaption || self.pseudo
    }
}

/// The four comparison arms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    Baseline,
    Rephraser,
    Recaption,
    All,
}

impl Arm {
    pub const EVERY: [Arm; 4] = [Arm::Baseline, Arm::Rephraser, Arm::Recaption, Arm::All];

    pub fn augmentation(self) -> Augmentation {
        match self {
            Arm::Baseline => Augmentation::NONE,
            Arm::Rephraser => Augmentation {
                rephrase: true,
                ..Augmentation::NONE
            },
            Arm::Recaption => Augmentation {
                recaption: true,
                ..Augmentation::NONE
            },
            Arm::All => Augmentation::ALL,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::Rephraser => "rephraser",
            Arm::Recaption => "recaption",
            Arm::All => "all",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Labeled clips per batch.
    pub batch_labeled: usize,
    /// Unlabeled clips per batch.
    pub batch_unlabeled: usize,
    pub epochs: usize,
    pub optimizer: AdamConfig,
    pub schedule: LrSchedule,
    pub warmup_steps: usize,
    /// Temperature for rephrased (and ground-truth) pairs.
    pub tau_rephrased: f64,
    /// Temperature for narrated pairs.
    pub tau_narrated: f64,
    /// Probability that a labeled clip uses the rephraser branch.
    pub rephrase_prob: f64,
    pub augmentation: Augmentation,
    pub caching: CachingMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_labeled: 16,
            batch_unlabeled: 16,
            epochs: 20,
            optimizer: AdamConfig::default(),
            schedule: LrSchedule::Cosine,
            warmup_steps: 20,
            tau_rephrased: 0.07,
            tau_narrated: 0.07,
            rephrase_prob: 0.5,
            augmentation: Augmentation::NONE,
            caching: CachingMode::Cached,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_labeled == 0 {
            return Err(Error::Config("batch_labeled must be positive".into()));
        }
        if self.augmentation.pseudo && self.batch_unlabeled == 0 {
            return Err(Error::Config("pseudo-captioning needs batch_unlabeled > 0".into()));
        }
        if !(self.tau_rephrased > 0.0 && self.tau_narrated > 0.0) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.rephrase_prob) {
            return Err(Error::Config("rephrase_prob must lie in [0, 1]".into()));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let peak = self.optimizer.lr;
        match self.schedule {
            LrSchedule::Constant => peak,
            LrSchedule::Cosine => {
                if step < self.warmup_steps {
                    return peak * (step + 1) as f64 / self.warmup_steps as f64;
                }
                let span = total.saturating_sub(self.warmup_steps).max(1) as f64;
                let x = ((step - self.warmup_steps) as f64 / span).min(1.0);
                let floor = 0.1 * peak;
                floor + 0.5 * (peak - floor) * (1.0 + (std::f64::consts::PI * x).cos())
            }
        }
    }
}

/// Patch matrices for every clip a run may touch.
#[derive(Clone, Debug, Default)]
pub struct ClipBank {
    patches: BTreeMap<ClipRef, Arc<Mat>>,
}

impl ClipBank {
    pub fn build<'a>(
        encoder: &DualEncoder,
        videos: &[VideoRecord],
        clips: impl IntoIterator<Item = &'a ClipRef>,
    ) -> Result<Self> {
        let by_id: BTreeMap<&str, &VideoRecord> = videos.iter().map(|v| (v.id.as_str(), v)).collect();
        let mut patches = BTreeMap::new();
        for clip in clips {
            if patches.contains_key(clip) {
                continue;
            }
            let video = by_id
                .get(clip.video_id.as_str())
                .ok_or_else(|| Error::Data(format!("unknown video for clip {}", clip_name(clip))))?;
            let frames = clip_frames(video, clip.t, clip.e, encoder.config.frames_per_clip)?;
            patches.insert(clip.clone(), Arc::new(encoder.patchify(&frames)?));
        }
        Ok(Self { patches })
    }

    pub fn get(&self, clip: &ClipRef) -> Result<&Arc<Mat>> {
        self.patches
            .get(clip)
            .ok_or_else(|| Error::Data(format!("clip {} has no frames in the bank", clip_name(clip))))
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn stack(&self, clips: &[&ClipRef]) -> Result<Mat> {
        let first = self.get(clips.first().ok_or_else(|| Error::Shape("no clips".into()))?)?;
        let (rows, cols) = first.dim();
        let mut out = Mat::zeros((rows * clips.len(), cols));
        for (i, c) in clips.iter().enumerate() {
            out.slice_mut(ndarray::s![i * rows..(i + 1) * rows, ..]).assign(self.get(c)?.as_ref());
        }
        Ok(out)
    }

    /// Embeddings and pre-pool features of `clips` under `encoder`.
    pub fn embed(&self, encoder: &DualEncoder, clips: &[ClipRef]) -> Result<(Mat, Vec<Mat>)> {
        let mats: Vec<Mat> = clips
            .iter()
            .map(|c| self.get(c).map(|m| m.as_ref().clone()))
            .collect::<Result<_>>()?;
        encoder.embed_clips(&mats, 32)
    }
}

/// Text candidates for a clip.
pub trait CandidateSource {
    /// An error means the clip is unknown to the source; an empty list means
    /// the source had nothing acceptable.
    fn candidates(&mut self, clip: &ClipRef) -> Result<Vec<String>>;
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct CacheRecord {
    video_id: String,
    t: usize,
    e: usize,
    candidates: Vec<String>,
}

/// Precomputed candidates keyed by clip.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CandidateCache {
    pub name: String,
    pub entries: BTreeMap<ClipRef, Vec<String>>,
}

impl CandidateCache {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            entries: BTreeMap::new(),
        }
    }

    /// Query `source` once per clip, in order.
    pub fn build<'a>(
        name: impl Into<String>,
        source: &mut dyn CandidateSource,
        clips: impl IntoIterator<Item = &'a ClipRef>,
    ) -> Result<Self> {
        let mut cache = Self::new(name);
        for clip in clips {
            if !cache.entries.contains_key(clip) {
                let c = source.candidates(clip)?;
                cache.entries.insert(clip.clone(), c);
            }
        }
        Ok(cache)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let records: Vec<CacheRecord> = self
            .entries
            .iter()
            .map(|(c, v)| CacheRecord {
                video_id: c.video_id.clone(),
                t: c.t,
                e: c.e,
                candidates: v.clone(),
            })
            .collect();
        write_jsonl(path, &records)
    }

    pub fn load(name: impl Into<String>, path: &Path) -> Result<Self> {
        let records: Vec<CacheRecord> = read_jsonl(path)?;
        let mut cache = Self::new(name);
        for r in records {
            let clip = ClipRef {
                video_id: r.video_id,
                t: r.t,
                e: r.e,
            };
            cache.entries.insert(clip, r.candidates);
        }
        Ok(cache)
    }
}

impl CandidateSource for CandidateCache {
    fn candidates(&mut self, clip: &ClipRef) -> Result<Vec<String>> {
        self.entries
            .get(clip)
            .cloned()
            .ok_or_else(|| Error::Data(format!("clip {} missing from the {} cache", clip_name(clip), self.name)))
    }
}

/// Ground truth plus rule-based paraphrases, computed on request.
pub struct RephraseSource<'a> {
    pub rephraser: &'a Rephraser,
    ground_truth: BTreeMap<ClipRef, String>,
}

impl<'a> RephraseSource<'a> {
    pub fn new(rephraser: &'a Rephraser, labeled: &[ClipAnnotation]) -> Self {
        Self {
            rephraser,
            ground_truth: labeled.iter().map(|a| (a.clip(), a.narration.clone())).collect(),
        }
    }
}

impl CandidateSource for RephraseSource<'_> {
    fn candidates(&mut self, clip: &ClipRef) -> Result<Vec<String>> {
        let gt = self
            .ground_truth
            .get(clip)
            .ok_or_else(|| Error::Data(format!("clip {} has no narration to rephrase", clip_name(clip))))?;
        let mut out = vec![gt.clone()];
        out.extend(self.rephraser.rephrase(gt));
        Ok(out)
    }
}

/// Narrator captions for a clip, filtered by the encoder that supplies the
/// visual features. Each clip decodes with its own seeded stream, so results
/// do not depend on query order.
pub struct NarrationSource<'a> {
    pub narrator: &'a Narrator,
    pub encoder: &'a DualEncoder,
    pub bank: &'a ClipBank,
    pub decoding: DecodingConfig,
    pub filter: FilterMode,
    pub seed: u64,
}

impl CandidateSource for NarrationSource<'_> {
    fn candidates(&mut self, clip: &ClipRef) -> Result<Vec<String>> {
        let (emb, feats) = self.bank.embed(self.encoder, std::slice::from_ref(clip))?;
        let mut rng = ChaCha8Rng::seed_from_u64(clip_seed(self.seed, clip));
        let bodies = self.narrator.narrate(&feats[0], &self.decoding, &mut rng)?;
        let bodies: Vec<Vec<usize>> = bodies.into_iter().filter(|b| !b.is_empty()).collect();
        let kept = filter_candidates(self.encoder, clip, &emb.row(0).to_vec(), &bodies, self.filter);
        let mut out: Vec<String> = Vec::new();
        for a in kept {
            if !out.contains(&a.narration) {
                out.push(a.narration);
            }
        }
        Ok(out)
    }
}

/// A source with nothing to offer; every clip is unknown.
pub struct NoCandidates;

impl CandidateSource for NoCandidates {
    fn candidates(&mut self, clip: &ClipRef) -> Result<Vec<String>> {
        Err(Error::Data(format!("no candidate source configured for clip {}", clip_name(clip))))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainPair {
    pub clip: ClipRef,
    pub narration: String,
    pub tau: f64,
    pub provenance: Provenance,
    /// Whether the clip came from the labeled set.
    pub labeled: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainBatch {
    pub pairs: Vec<TrainPair>,
    pub num_labeled: usize,
    pub num_unlabeled: usize,
}

/// Routing knobs for batch assembly.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchPlan {
    pub augmentation: Augmentation,
    pub rephrase_prob: f64,
    pub tau_rephrased: f64,
    pub tau_narrated: f64,
}

impl From<&TrainConfig> for BatchPlan {
    fn from(c: &TrainConfig) -> Self {
        Self {
            augmentation: c.augmentation,
            rephrase_prob: c.rephrase_prob,
            tau_rephrased: c.tau_rephrased,
            tau_narrated: c.tau_narrated,
        }
    }
}

fn pick<R: Rng>(candidates: &[String], rng: &mut R) -> String {
    candidates[rng.random_range(0..candidates.len())].clone()
}

/// Build one augmented batch.
///
/// Labeled clips: a coin with P(heads) = `rephrase_prob` picks the rephraser
/// branch (τ_r) on heads and the narrator branch (τ_n) on tails; a disabled
/// branch, or a narrator branch with no accepted caption, falls back to the
/// ground truth at τ_r. Unlabeled clips take a narrator candidate at τ_n and
/// are skipped when none was accepted. Candidates are drawn uniformly.
pub fn assemble_batch<R: Rng>(
    labeled: &[&ClipAnnotation],
    unlabeled: &[&ClipRef],
    narrations: &mut dyn CandidateSource,
    rephrasings: &mut dyn CandidateSource,
    plan: &BatchPlan,
    rng: &mut R,
) -> Result<TrainBatch> {
    let aug = plan.augmentation;
    let mut pairs = Vec::with_capacity(labeled.len() + unlabeled.len());
    for ann in labeled {
        let clip = ann.clip();
        let ground_truth = TrainPair {
            clip: clip.clone(),
            narration: ann.narration.clone(),
            tau: plan.tau_rephrased,
            provenance: Provenance::GroundTruth,
            labeled: true,
        };
        if !aug.rephrase && !aug.recaption {
            pairs.push(ground_truth);
            continue;
        }
        let heads = rng.random_bool(plan.rephrase_prob);
        let pair = if heads {
            if aug.rephrase {
                let c = rephrasings.candidates(&clip)?;
                if c.is_empty() {
                    ground_truth
                } else {
                    TrainPair {
                        narration: pick(&c, rng),
                        provenance: Provenance::Rephrased,
                        ..ground_truth
                    }
                }
            } else {
                ground_truth
            }
        } else if aug.recaption {
            let c = narrations.candidates(&clip)?;
            if c.is_empty() {
                ground_truth
            } else {
                TrainPair {
                    narration: pick(&c, rng),
                    tau: plan.tau_narrated,
                    provenance: Provenance::Narrated,
                    ..ground_truth
                }
            }
        } else {
            ground_truth
        };
        pairs.push(pair);
    }
    let num_labeled = pairs.len();
    if aug.pseudo {
        for clip in unlabeled {
            let c = narrations.candidates(clip)?;
            if c.is_empty() {
                continue;
            }
            pairs.push(TrainPair {
                clip: (*clip).clone(),
                narration: pick(&c, rng),
                tau: plan.tau_narrated,
                provenance: Provenance::Narrated,
                labeled: false,
            });
        }
    }
    let num_unlabeled = pairs.len() - num_labeled;
    Ok(TrainBatch {
        pairs,
        num_labeled,
        num_unlabeled,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Training inputs for the dual encoder.
pub struct TrainingData<'a> {
    pub labeled: &'a [ClipAnnotation],
    pub unlabeled: &'a [ClipRef],
    pub bank: &'a ClipBank,
}

/// Candidate sources for the augmented branches.
pub struct Sources<'a> {
    pub narrations: &'a mut dyn CandidateSource,
    pub rephrasings: &'a mut dyn CandidateSource,
}

/// One optimizer step on a batch. Returns the loss.
fn contrastive_step(
    encoder: &mut DualEncoder,
    opt: &mut Adam,
    bank: &ClipBank,
    batch: &TrainBatch,
    lr: f64,
    step: usize,
) -> Result<f64> {
    let clips: Vec<&ClipRef> = batch.pairs.iter().map(|p| &p.clip).collect();
    let patches = bank.stack(&clips)?;
    let bodies: Vec<Vec<usize>> = batch
        .pairs
        .iter()
        .map(|p| encoder.tokenize(&p.narration))
        .collect::<Result<_>>()?;
    let tau: Vec<f64> = batch.pairs.iter().map(|p| p.tau).collect();
    let mut g = Graph::new();
    let x = g.input(patches);
    let (_, v) = encoder.forward_video(&mut g, x);
    let text = encoder.text_batch(&bodies);
    let u = encoder.forward_text(&mut g, &text);
    let out = dual_temperature_loss(g.value(v), g.value(u), &tau)?;
    if !out.loss.is_finite() {
        return Err(Error::Divergence { step, loss: out.loss });
    }
    let grads = g.backward(&[(v, out.d_v), (u, out.d_u)]);
    opt.step(&mut encoder.store, &grads, lr);
    Ok(out.loss)
}

/// Endless shuffled cycle over `0..n`.
struct Cycle {
    n: usize,
    order: Vec<usize>,
    pos: usize,
}

impl Cycle {
    fn new(n: usize) -> Self {
        Self {
            n,
            order: Vec::new(),
            pos: 0,
        }
    }

    fn take<R: Rng>(&mut self, k: usize, rng: &mut R) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        if self.n == 0 {
            return out;
        }
        while out.len() < k.min(self.n) {
            if self.pos == self.order.len() {
                self.order = sample(rng, self.n, self.n).into_vec();
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Contrastive pretraining (Algorithm 1 when augmentation is on). One epoch
/// is one pass over the labeled clips. With `checkpoint_dir`, writes
/// `epoch-NNN.ckpt` after every epoch and `train_log.jsonl`.
pub fn pretrain_dual_encoder(
    mut encoder: DualEncoder,
    data: &TrainingData<'_>,
    sources: Sources<'_>,
    config: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<(DualEncoder, Vec<LogRecord>)> {
    config.validate()?;
    if data.labeled.is_empty() {
        return Err(Error::Data("no labeled clips to train on".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Adam::new(config.optimizer.clone());
    let plan = BatchPlan::from(config);
    let per_epoch = data.labeled.len().div_ceil(config.batch_labeled);
    let total = per_epoch * config.epochs;
    let mut unlabeled = Cycle::new(if config.augmentation.pseudo { data.unlabeled.len() } else { 0 });
    let mut log = Vec::with_capacity(total);
    let mut step = 0;
    for epoch in 0..config.epochs {
        let order = sample(&mut rng, data.labeled.len(), data.labeled.len()).into_vec();
        for chunk in order.chunks(config.batch_labeled) {
            let lab: Vec<&ClipAnnotation> = chunk.iter().map(|&i| &data.labeled[i]).collect();
            let unl: Vec<&ClipRef> = unlabeled
                .take(config.batch_unlabeled, &mut rng)
                .into_iter()
                .map(|i| &data.unlabeled[i])
                .collect();
            let batch = assemble_batch(&lab, &unl, sources.narrations, sources.rephrasings, &plan, &mut rng)?;
            let lr = config.lr_at(step, total);
            let loss = contrastive_step(&mut encoder, &mut opt, data.bank, &batch, lr, step)?;
            log.push(LogRecord { step, epoch, loss, lr });
            step += 1;
        }
        if let Some(dir) = checkpoint_dir {
            encoder.save(&dir.join(format!("epoch-{epoch:03}.ckpt")))?;
            write_jsonl(&dir.join("train_log.jsonl"), &log)?;
        }
    }
    Ok((encoder, log))
}

/// Path of the last per-epoch checkpoint in `dir`, if any.
pub fn last_checkpoint(dir: &Path) -> Option<PathBuf> {
    let mut found: Vec<PathBuf> = std::fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("epoch-") && n.ends_with(".ckpt"))
        })
        .collect();
    found.sort();
    found.pop()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            batch_size: 32,
            lr: 3e-3,
            seed: 0,
        }
    }
}

/// Every phrasing of every event class the grammar knows.
pub fn grammar_corpus(grammar: &Grammar, vocab: &Vocab) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::new();
    for class in grammar.all_classes() {
        for phrasing in grammar.phrasings(&class) {
            out.push(vocab.encode(&grammar.realize(&class, &phrasing)?)?);
        }
    }
    Ok(out)
}

/// Fit the language model on text alone. Returns the mean per-token loss of
/// each epoch.
pub fn pretrain_lm(lm: &mut LanguageModel, bodies: &[Vec<usize>], config: &LmTrainConfig) -> Result<Vec<f64>> {
    if bodies.is_empty() || config.batch_size == 0 {
        return Err(Error::Config("language model training needs text and a positive batch size".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Adam::new(AdamConfig::default());
    let mut history = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for _ in 0..config.epochs {
        let order = sample(&mut rng, bodies.len(), bodies.len()).into_vec();
        let (mut total, mut count) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Vec<usize>> = chunk.iter().map(|&i| bodies[i].clone()).collect();
            let (loss, n, mut grads) = lm.loss_and_grads(&batch);
            if !loss.is_finite() {
                return Err(Error::Divergence { step, loss });
            }
            grads.scale(1.0 / n as f64);
            opt.step(&mut lm.store, &grads, config.lr);
            total += loss;
            count += n;
            step += 1;
        }
        history.push(total / count as f64);
    }
    Ok(history)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NarratorTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for NarratorTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 16,
            lr: 3e-3,
            seed: 0,
        }
    }
}

/// Held-out statistics after an epoch; epoch 0 is the untrained narrator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NarratorEpoch {
    pub epoch: usize,
    /// Mean per-token training loss; absent before training.
    pub train_nll: Option<f64>,
    pub heldout_nll: f64,
    pub heldout_ppl: f64,
    pub heldout_acc: f64,
}

#[derive(Clone, Debug)]
pub struct NarratorRun {
    pub narrator: Narrator,
    pub history: Vec<NarratorEpoch>,
    /// Index into `history` of the kept checkpoint.
    pub selected: usize,
}

/// Captioning examples: frozen video-tower features of each clip with its
/// narration.
pub fn caption_examples(
    encoder: &DualEncoder,
    bank: &ClipBank,
    annotations: &[ClipAnnotation],
) -> Result<Vec<CaptionExample>> {
    let clips: Vec<ClipRef> = annotations.iter().map(ClipAnnotation::clip).collect();
    let (_, feats) = bank.embed(encoder, &clips)?;
    annotations
        .iter()
        .zip(feats)
        .map(|(a, f)| {
            Ok(CaptionExample {
                feats: Arc::new(f),
                body: encoder.tokenize(&a.narration)?,
            })
        })
        .collect()
}

fn heldout_stats(narrator: &Narrator, heldout: &[CaptionExample]) -> Result<(f64, f64)> {
    let (mut nll, mut n, mut hits) = (0.0, 0usize, 0usize);
    for chunk in heldout.chunks(64) {
        let refs: Vec<&CaptionExample> = chunk.iter().collect();
        let (l, c, h) = narrator.evaluate(&refs)?;
        nll += l;
        n += c;
        hits += h;
    }
    Ok((nll / n.max(1) as f64, hits as f64 / n.max(1) as f64))
}

/// Fit the cross-attention and pooling parameters by teacher-forced NLL and
/// keep the epoch with the best held-out next-token accuracy (ties: lower
/// perplexity, then earlier). The language-model parameters must come out
/// bit-identical.
pub fn train_narrator(
    mut narrator: Narrator,
    train: &[CaptionExample],
    heldout: &[CaptionExample],
    config: &NarratorTrainConfig,
) -> Result<NarratorRun> {
    if train.is_empty() || heldout.is_empty() || config.batch_size == 0 {
        return Err(Error::Config("narrator training needs train and held-out examples".into()));
    }
    let frozen_before = narrator.lm_digest();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Adam::new(AdamConfig::default());
    let (nll0, acc0) = heldout_stats(&narrator, heldout)?;
    let mut history = vec![NarratorEpoch {
        epoch: 0,
        train_nll: None,
        heldout_nll: nll0,
        heldout_ppl: nll0.exp(),
        heldout_acc: acc0,
    }];
    let mut best = (0usize, narrator.store.clone());
    let mut step = 0;
    for epoch in 1..=config.epochs {
        let order = sample(&mut rng, train.len(), train.len()).into_vec();
        let (mut total, mut count) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&CaptionExample> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, n, mut grads) = narrator.captioning_loss(&batch)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { step, loss });
            }
            grads.scale(1.0 / n as f64);
            opt.step(&mut narrator.store, &grads, config.lr);
            total += loss;
            count += n;
            step += 1;
        }
        let (nll, acc) = heldout_stats(&narrator, heldout)?;
        history.push(NarratorEpoch {
            epoch,
            train_nll: Some(total / count as f64),
            heldout_nll: nll,
            heldout_ppl: nll.exp(),
            heldout_acc: acc,
        });
        let cur = &history[best.0];
        if acc > cur.heldout_acc || (acc == cur.heldout_acc && nll < cur.heldout_nll) {
            best = (history.len() - 1, narrator.store.clone());
        }
    }
    narrator.store = best.1;
    if narrator.lm_digest() != frozen_before {
        return Err(Error::Contract("frozen language-model parameters changed during narrator training".into()));
    }
    Ok(NarratorRun {
        narrator,
        history,
        selected: best.0,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub margin: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            batch_size: 32,
            lr: 5e-4,
            margin: 0.2,
            seed: 0,
        }
    }
}

/// Multi-instance max-margin fine-tuning; in-batch relevance is narration
/// class equality.
pub fn finetune_retrieval(
    mut encoder: DualEncoder,
    annotations: &[ClipAnnotation],
    bank: &ClipBank,
    grammar: &Grammar,
    config: &FinetuneConfig,
) -> Result<(DualEncoder, Vec<LogRecord>)> {
    if config.batch_size == 0 || !(config.margin >= 0.0) {
        return Err(Error::Config("fine-tuning needs a positive batch and a non-negative margin".into()));
    }
    if config.steps == 0 {
        return Ok((encoder, Vec::new()));
    }
    if annotations.is_empty() {
        return Err(Error::Data("no clips to fine-tune on".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Adam::new(AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    });
    let mut cycle = Cycle::new(annotations.len());
    let mut log = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let idx = cycle.take(config.batch_size, &mut rng);
        let anns: Vec<&ClipAnnotation> = idx.iter().map(|&i| &annotations[i]).collect();
        let clips: Vec<ClipRef> = anns.iter().map(|a| a.clip()).collect();
        let clip_refs: Vec<&ClipRef> = clips.iter().collect();
        let narrations: Vec<&str> = anns.iter().map(|a| a.narration.as_str()).collect();
        let relevance = relevance_matrix(grammar, &narrations, &narrations);
        let bodies: Vec<Vec<usize>> = narrations.iter().map(|n| encoder.tokenize(n)).collect::<Result<_>>()?;
        let mut g = Graph::new();
        let x = g.input(bank.stack(&clip_refs)?);
        let (_, v) = encoder.forward_video(&mut g, x);
        let text = encoder.text_batch(&bodies);
        let u = encoder.forward_text(&mut g, &text);
        let (vm, um) = (g.value(v).clone(), g.value(u).clone());
        let s = vm.dot(&um.t());
        let (loss, ds) = max_margin_loss(&s, &relevance, config.margin)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        let grads = g.backward(&[(v, ds.dot(&um)), (u, ds.t().dot(&vm))]);
        opt.step(&mut encoder.store, &grads, config.lr);
        log.push(LogRecord {
            step,
            epoch: 0,
            loss,
            lr: config.lr,
        });
    }
    Ok((encoder, log))
}
