//! Config-driven experiment pipeline: world generation, baseline training,
//! narrator and rephraser caches, augmented training per arm, evaluation,
//! the annotation-budget sweep and the ablations.
//!
//! Each stage writes its artifacts under the output directory together with
//! a fingerprint of the inputs that produced them; a later run with the same
//! inputs reloads them instead of recomputing.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{
    chunk_subset, clean_narrations, ground_truth_annotations, load_corpus, load_videos,
    read_jsonl, sample_pseudo_intervals, save_corpus, save_videos, write_jsonl, ClipAnnotation, ClipRef, ClipSampler,
};
use crate::decoding::{DecodingConfig, Strategy};
use crate::dual_encoder::{DualEncoder, DualEncoderConfig};
use crate::evaluation::{build_mcq_items, evaluate_retrieval, mcq_accuracy, zero_shot_accuracy, MetricReport};
use crate::grammar::{Grammar, Vocab};
use crate::narrator::{FilterMode, LanguageModel, LmConfig, Narrator, NarratorConfig};
use crate::rephraser::{Rephraser, RephraserConfig};
use crate::training::{
    caption_examples, finetune_retrieval, grammar_corpus, FinetuneConfig, pretrain_dual_encoder, pretrain_lm, train_narrator, Arm, CachingMode,
    CandidateCache, CandidateSource, ClipBank, LmTrainConfig, NarrationSource, NarratorEpoch, NarratorTrainConfig,
    NoCandidates, RephraseSource, Sources, TrainConfig, TrainingData,
};
use crate::world::{generate_world, VideoRecord, WorldConfig};
use crate::{Error, Result};

/// Seed of a named substream of the global seed.
pub fn substream(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    /// Trailing videos held out for evaluation.
    pub test_videos: usize,
    /// Frames per chunk for the annotation-budget protocol.
    pub chunk_len: usize,
    /// Keep annotations in every N-th chunk; 1 keeps all.
    pub keep_every: usize,
    /// Fraction of labeled clips held out for narrator model selection.
    pub narrator_heldout: f64,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            test_videos: 8,
            chunk_len: 15,
            keep_every: 1,
            narrator_heldout: 0.15,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NarratorSection {
    pub model: NarratorConfig,
    pub lm: LmConfig,
    pub lm_training: LmTrainConfig,
    pub training: NarratorTrainConfig,
    pub filter: FilterMode,
}

impl Default for NarratorSection {
    fn default() -> Self {
        Self {
            model: NarratorConfig::default(),
            lm: LmConfig::default(),
            lm_training: LmTrainConfig::default(),
            training: NarratorTrainConfig::default(),
            filter: FilterMode::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    pub mcq: bool,
    pub zero_shot: bool,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            mcq: true,
            zero_shot: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Artifacts are written here when set.
    pub output_dir: Option<PathBuf>,
    pub arms: Vec<Arm>,
    pub world: WorldConfig,
    pub corpus: CorpusSection,
    pub model: DualEncoderConfig,
    pub narrator: NarratorSection,
    pub rephraser: RephraserConfig,
    pub decoding: DecodingConfig,
    pub training: TrainConfig,
    pub evaluation: EvaluationSection,
    pub finetune: FinetuneConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: None,
            arms: Arm::EVERY.to_vec(),
            world: WorldConfig {
                num_videos: 32,
                ..WorldConfig::default()
            },
            corpus: CorpusSection::default(),
            model: DualEncoderConfig::default(),
            narrator: NarratorSection::default(),
            rephraser: RephraserConfig::default(),
            decoding: DecodingConfig::default(),
            training: TrainConfig::default(),
            evaluation: EvaluationSection::default(),
            finetune: FinetuneConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.model.validate()?;
        self.decoding.validate()?;
        self.training.validate()?;
        if self.corpus.test_videos == 0 || self.corpus.test_videos >= self.world.num_videos {
            return Err(Error::Config("test_videos must leave at least one training video".into()));
        }
        if self.corpus.chunk_len == 0 || self.corpus.keep_every == 0 {
            return Err(Error::Config("chunk_len and keep_every must be positive".into()));
        }
        if !(self.corpus.narrator_heldout > 0.0 && self.corpus.narrator_heldout < 1.0) {
            return Err(Error::Config("narrator_heldout must lie in (0, 1)".into()));
        }
        if self.arms.is_empty() {
            return Err(Error::Config("no arms selected".into()));
        }
        if self.model.channels != self.world.channels() || self.model.grid_size != self.world.grid_size {
            return Err(Error::Config("model grid/channels do not match the world".into()));
        }
        if self.narrator.model.visual_dim != self.model.d_v {
            return Err(Error::Config("narrator visual_dim must equal the video feature width".into()));
        }
        Ok(())
    }

    fn needs_narrator(&self) -> bool {
        self.arms.iter().any(|a| a.augmentation().needs_narrator())
    }

    fn needs_rephraser(&self) -> bool {
        self.arms.iter().any(|a| a.augmentation().rephrase)
    }

    /// Stage names and the artifacts each writes, in execution order.
    pub fn plan(&self) -> Vec<(String, Vec<String>)> {
        let mut out = vec![
            ("world".to_string(), vec!["world/videos.jsonl".to_string()]),
            (
                "corpus".into(),
                vec![
                    "corpus/labeled.jsonl".into(),
                    "corpus/unlabeled.jsonl".into(),
                    "corpus/test.jsonl".into(),
                ],
            ),
            ("baseline".into(), vec!["baseline/encoder.ckpt".into(), "baseline/train_log.jsonl".into()]),
        ];
        if self.needs_narrator() {
            out.push(("lm".into(), vec!["lm/lm.ckpt".into()]));
            out.push(("narrator".into(), vec!["narrator/narrator.ckpt".into(), "narrator/history.jsonl".into()]));
            out.push(("narration-cache".into(), vec!["caches/narrations.jsonl".into()]));
        }
        if self.needs_rephraser() {
            out.push(("rephrase-cache".into(), vec!["caches/rephrasings.jsonl".into()]));
        }
        for arm in &self.arms {
            if *arm != Arm::Baseline {
                out.push((
                    format!("train-{}", arm.name()),
                    vec![format!("arms/{}/encoder.ckpt", arm.name()), format!("arms/{}/train_log.jsonl", arm.name())],
                ));
            }
        }
        out.push(("eval".into(), vec!["metrics/arms.csv".into(), "metrics/arms.json".into()]));
        out
    }

    pub fn plan_text(&self) -> String {
        let mut s = String::new();
        let root = self.output_dir.as_deref().map_or("<memory>".to_string(), |p| p.display().to_string());
        writeln!(s, "output: {root}").expect("string write");
        for (i, (stage, artifacts)) in self.plan().iter().enumerate() {
            writeln!(s, "{:>2}. {stage}: {}", i + 1, artifacts.join(", ")).expect("string write");
        }
        s
    }
}

fn fingerprint<T: Serialize>(parts: &T) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(parts)?)))
}

fn file_sha(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct StageRecord {
    fingerprint: String,
    artifacts: BTreeMap<String, String>,
}

/// Completed stages and the checksums of what they wrote.
#[derive(Debug, Default)]
struct StageLedger {
    root: Option<PathBuf>,
    records: BTreeMap<String, StageRecord>,
    computed: Vec<String>,
    reused: Vec<String>,
}

impl StageLedger {
    fn open(root: Option<&Path>) -> Result<Self> {
        let mut ledger = Self {
            root: root.map(Path::to_path_buf),
            ..Self::default()
        };
        if let Some(r) = root {
            let path = r.join("stages.json");
            if path.exists() {
                ledger.records = serde_json::from_str(&std::fs::read_to_string(path)?)?;
            }
        }
        Ok(ledger)
    }

    fn is_complete(&self, stage: &str, fp: &str) -> bool {
        let (Some(root), Some(rec)) = (&self.root, self.records.get(stage)) else {
            return false;
        };
        rec.fingerprint == fp
            && rec
                .artifacts
                .iter()
                .all(|(rel, sha)| file_sha(&root.join(rel)).is_ok_and(|s| &s == sha))
    }

    fn complete(&mut self, stage: &str, fp: &str, artifacts: &[String]) -> Result<()> {
        self.computed.push(stage.to_string());
        let Some(root) = self.root.clone() else {
            return Ok(());
        };
        let mut rec = StageRecord {
            fingerprint: fp.to_string(),
            artifacts: BTreeMap::new(),
        };
        for rel in artifacts {
            rec.artifacts.insert(rel.clone(), file_sha(&root.join(rel))?);
        }
        self.records.insert(stage.to_string(), rec);
        std::fs::create_dir_all(&root)?;
        let tmp = root.join("stages.json.tmp");
        std::fs::write(&tmp, serde_json::to_string_pretty(&self.records)?)?;
        std::fs::rename(tmp, root.join("stages.json"))?;
        Ok(())
    }

    /// Reuse a finished stage via `load`, or run `compute` then `save`.
    fn run<T>(
        &mut self,
        stage: &str,
        fp: &str,
        artifacts: &[String],
        load: impl FnOnce(&Path) -> Result<T>,
        compute: impl FnOnce() -> Result<T>,
        save: impl FnOnce(&T, &Path) -> Result<()>,
    ) -> Result<T> {
        let wrap = |e: Error, root: &Option<PathBuf>| Error::Stage {
            stage: stage.to_string(),
            dir: root.clone().unwrap_or_default(),
            source: Box::new(e),
        };
        if self.is_complete(stage, fp) {
            let root = self.root.clone().expect("complete stages have a root");
            let value = load(&root).map_err(|e| wrap(e, &self.root))?;
            self.reused.push(stage.to_string());
            return Ok(value);
        }
        let value = compute().map_err(|e| wrap(e, &self.root))?;
        if let Some(root) = self.root.clone() {
            save(&value, &root).map_err(|e| wrap(e, &self.root))?;
        }
        self.complete(stage, fp, artifacts).map_err(|e| wrap(e, &self.root))?;
        Ok(value)
    }
}

/// Train/test split and the labeled/unlabeled partition of the training
/// videos.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub labeled: Vec<ClipAnnotation>,
    pub unlabeled: Vec<ClipRef>,
    pub test: Vec<ClipAnnotation>,
}

/// Split videos, subset annotations by chunk, and tile the remaining gaps
/// of the training videos with pseudo-clips of the mean labeled length.
pub fn build_corpus(videos: &[VideoRecord], config: &ExperimentConfig) -> Result<CorpusSplit> {
    let grammar = Grammar::standard();
    let n_train = videos.len() - config.corpus.test_videos;
    let (train_v, test_v) = videos.split_at(n_train);
    let train_gt = clean_narrations(ground_truth_annotations(train_v, &grammar)?);
    let test = clean_narrations(ground_truth_annotations(test_v, &grammar)?);
    let (labeled, _) = chunk_subset(train_v, &train_gt, config.corpus.chunk_len, config.corpus.keep_every)?;
    let sampler = ClipSampler::from_annotations(&labeled)?;
    let mut unlabeled = Vec::new();
    for v in train_v {
        for iv in sample_pseudo_intervals(v, &labeled, &sampler) {
            unlabeled.push(ClipRef {
                video_id: v.id.clone(),
                t: iv.t,
                e: iv.e,
            });
        }
    }
    Ok(CorpusSplit {
        labeled,
        unlabeled,
        test,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub reports: Vec<(Arm, MetricReport)>,
    pub encoders: Vec<(Arm, DualEncoder)>,
    pub split: Option<CorpusSplit>,
    pub narrator_history: Vec<NarratorEpoch>,
    pub narrator_selected: Option<usize>,
    /// Narration cache statistics: (clips, clips with at least one caption, total captions).
    pub narration_stats: Option<(usize, usize, usize)>,
    /// Share of cached captions naming the true event.
    pub narration_precision: Option<f64>,
    pub checks: Vec<Check>,
    pub computed: Vec<String>,
    pub reused: Vec<String>,
}

impl PipelineOutput {
    pub fn report(&self, arm: Arm) -> Option<&MetricReport> {
        self.reports.iter().find(|(a, _)| *a == arm).map(|(_, r)| r)
    }

    pub fn map(&self, arm: Arm) -> Option<f64> {
        self.report(arm).and_then(|r| r.get("map_avg", "test"))
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Rows `arm,metric,split,value,seed` for every report.
pub fn arms_csv(reports: &[(Arm, MetricReport)]) -> String {
    let mut s = String::from("arm,metric,split,value,seed\n");
    for (arm, r) in reports {
        for line in r.csv_rows().lines() {
            writeln!(s, "{},{line}", arm.name()).expect("string write");
        }
    }
    s
}

fn load_encoder_and_log(root: &Path, dir: &str) -> Result<DualEncoder> {
    DualEncoder::load(&root.join(dir).join("encoder.ckpt"))
}

fn save_encoder(enc: &DualEncoder, log: &[crate::training::LogRecord], root: &Path, dir: &str) -> Result<()> {
    enc.save(&root.join(dir).join("encoder.ckpt"))?;
    write_jsonl(&root.join(dir).join("train_log.jsonl"), log)
}

fn evaluate_arm(
    encoder: &DualEncoder,
    bank: &ClipBank,
    test: &[ClipAnnotation],
    config: &ExperimentConfig,
) -> Result<MetricReport> {
    let grammar = Grammar::standard();
    let seed = config.seed;
    let mut report = MetricReport::new("metrics");
    report.add_retrieval("test", &evaluate_retrieval(encoder, bank, test, &grammar)?, seed);
    if config.evaluation.mcq {
        let mut rng = ChaCha8Rng::seed_from_u64(substream(seed, "mcq"));
        let items = build_mcq_items(test, &grammar, &mut rng);
        let m = mcq_accuracy(encoder, bank, &items)?;
        report.push("mcq_inter", "test", m.inter, seed);
        report.push("mcq_intra", "test", m.intra, seed);
    }
    if config.evaluation.zero_shot {
        report.push("zero_shot_acc", "test", zero_shot_accuracy(encoder, bank, test, &grammar)?, seed);
    }
    Ok(report)
}

/// Pipeline stages, in order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    World,
    Corpus,
    Baseline,
    Narrator,
    NarrationCache,
    RephraseCache,
    Train,
    Eval,
}

/// Run every stage for the configured arms.
pub fn run_pipeline(config: &ExperimentConfig) -> Result<PipelineOutput> {
    run_stages(config, Stage::Eval)
}

/// Run stages up to and including `until`.
pub fn run_stages(config: &ExperimentConfig, until: Stage) -> Result<PipelineOutput> {
    config.validate()?;
    let mut ledger = StageLedger::open(config.output_dir.as_deref())?;
    let mut narrator_history = Vec::new();
    let mut narrator_selected = None;
    let mut narration_stats = None;
    let mut narration_precision = None;
    let mut checks = Vec::new();
    let mut encoders: Vec<(Arm, DualEncoder)> = Vec::new();
    let mut split_out: Option<CorpusSplit> = None;
    macro_rules! stop_at {
        ($stage:expr) => {
            if until == $stage {
                return Ok(PipelineOutput {
                    reports: Vec::new(),
                    encoders,
                    split: split_out,
                    narrator_history,
                    narrator_selected,
                    narration_stats,
                    narration_precision,
                    checks,
                    computed: ledger.computed,
                    reused: ledger.reused,
                });
            }
        };
    }
    let seed = config.seed;
    let grammar = Grammar::standard();
    let vocab = Vocab::from_grammar(&grammar);

    let world_cfg = WorldConfig {
        seed: substream(seed, "world"),
        ..config.world.clone()
    };
    let fp_world = fingerprint(&("world", &world_cfg))?;
    let videos = ledger.run(
        "world",
        &fp_world,
        &["world/videos.jsonl".into()],
        |root| load_videos(&root.join("world/videos.jsonl")),
        || generate_world(&world_cfg),
        |v, root| save_videos(&root.join("world/videos.jsonl"), v),
    )?;

    stop_at!(Stage::World);
    let fp_corpus = fingerprint(&("corpus", &fp_world, &config.corpus))?;
    let split = ledger.run(
        "corpus",
        &fp_corpus,
        &[
            "corpus/labeled.jsonl".into(),
            "corpus/unlabeled.jsonl".into(),
            "corpus/test.jsonl".into(),
        ],
        |root| {
            Ok(CorpusSplit {
                labeled: load_corpus(&root.join("corpus/labeled.jsonl"))?,
                unlabeled: read_jsonl(&root.join("corpus/unlabeled.jsonl"))?,
                test: load_corpus(&root.join("corpus/test.jsonl"))?,
            })
        },
        || build_corpus(&videos, config),
        |s, root| {
            save_corpus(&root.join("corpus/labeled.jsonl"), &s.labeled)?;
            write_jsonl(&root.join("corpus/unlabeled.jsonl"), &s.unlabeled)?;
            save_corpus(&root.join("corpus/test.jsonl"), &s.test)
        },
    )?;

    split_out = Some(split.clone());
    stop_at!(Stage::Corpus);
    let encoder_seed = substream(seed, "encoder-init");
    let template = DualEncoder::new(config.model.clone(), vocab.clone(), encoder_seed)?;
    let all_clips: Vec<ClipRef> = split
        .labeled
        .iter()
        .map(ClipAnnotation::clip)
        .chain(split.unlabeled.iter().cloned())
        .chain(split.test.iter().map(ClipAnnotation::clip))
        .collect();
    let bank = ClipBank::build(&template, &videos, &all_clips)?;

    let train_cfg = |arm: Arm| TrainConfig {
        augmentation: arm.augmentation(),
        seed: substream(seed, "train"),
        ..config.training.clone()
    };
    let data = TrainingData {
        labeled: &split.labeled,
        unlabeled: &split.unlabeled,
        bank: &bank,
    };

    let base_cfg = train_cfg(Arm::Baseline);
    let fp_base = fingerprint(&("baseline", &fp_corpus, &config.model, &base_cfg, encoder_seed))?;
    let baseline = ledger.run(
        "baseline",
        &fp_base,
        &["baseline/encoder.ckpt".into(), "baseline/train_log.jsonl".into()],
        |root| load_encoder_and_log(root, "baseline"),
        || {
            let sources = Sources {
                narrations: &mut NoCandidates,
                rephrasings: &mut NoCandidates,
            };
            let (enc, log) = pretrain_dual_encoder(template.clone(), &data, sources, &base_cfg, None)?;
            if let Some(p) = ledger_path(config, "baseline/train_log.jsonl") {
                write_jsonl(&p, &log)?;
            }
            Ok(enc)
        },
        |enc, root| enc.save(&root.join("baseline/encoder.ckpt")),
    )?;

    stop_at!(Stage::Baseline);
    let mut narration_cache = CandidateCache::new("narration");
    let mut fp_narr_cache = String::new();
    if config.needs_narrator() {
        let ns = &config.narrator;
        let lm_seed = substream(seed, "lm");
        let fp_lm = fingerprint(&("lm", &ns.lm, &ns.lm_training, lm_seed))?;
        let lm = ledger.run(
            "lm",
            &fp_lm,
            &["lm/lm.ckpt".into()],
            |root| LanguageModel::load(&root.join("lm/lm.ckpt")),
            || {
                let mut lm = LanguageModel::new(ns.lm.clone(), vocab.clone(), lm_seed)?;
                let text = grammar_corpus(&grammar, &vocab)?;
                let cfg = LmTrainConfig {
                    seed: lm_seed,
                    ..ns.lm_training.clone()
                };
                pretrain_lm(&mut lm, &text, &cfg)?;
                Ok(lm)
            },
            |lm, root| lm.save(&root.join("lm/lm.ckpt")),
        )?;

        let narrator_seed = substream(seed, "narrator");
        let fp_narrator = fingerprint(&("narrator", &fp_base, &fp_lm, &ns.model, &ns.training, &config.corpus, narrator_seed))?;
        let (narrator, history, selected) = ledger.run(
            "narrator",
            &fp_narrator,
            &["narrator/narrator.ckpt".into(), "narrator/history.jsonl".into()],
            |root| {
                let n = Narrator::load(&root.join("narrator/narrator.ckpt"))?;
                let h: Vec<NarratorEpoch> = read_jsonl(&root.join("narrator/history.jsonl"))?;
                let sel = select_index(&h);
                Ok((n, h, sel))
            },
            || {
                let (train, heldout) = holdout_split(&split.labeled, config.corpus.narrator_heldout, narrator_seed);
                let tr = caption_examples(&baseline, &bank, &train)?;
                let ho = caption_examples(&baseline, &bank, &heldout)?;
                let narrator = Narrator::new(&lm, ns.model.clone(), narrator_seed)?;
                let cfg = NarratorTrainConfig {
                    seed: narrator_seed,
                    ..ns.training.clone()
                };
                let run = train_narrator(narrator, &tr, &ho, &cfg)?;
                Ok((run.narrator, run.history, run.selected))
            },
            |(n, h, _), root| {
                n.save(&root.join("narrator/narrator.ckpt"))?;
                write_jsonl(&root.join("narrator/history.jsonl"), h)
            },
        )?;
        let gate_zero = history[0].heldout_ppl;
        let chosen = history[selected].heldout_ppl;
        checks.push(Check {
            name: "narrator-conditioning-helps".into(),
            passed: chosen < gate_zero,
            detail: format!("held-out perplexity {chosen:.4} vs gates-at-zero {gate_zero:.4}"),
        });
        checks.push(Check {
            name: "narrator-lm-frozen".into(),
            passed: narrator.lm_digest() == lm.store.digest(|_, _| true),
            detail: "language-model digest inside the narrator equals the pretrained one".into(),
        });
        narrator_history = history;
        narrator_selected = Some(selected);

        stop_at!(Stage::Narrator);
        let decoding = DecodingConfig {
            seed: substream(seed, "narrate"),
            ..config.decoding.clone()
        };
        fp_narr_cache = fingerprint(&("narration-cache", &fp_narrator, &decoding, &ns.filter))?;
        let targets: Vec<ClipRef> = split
            .labeled
            .iter()
            .map(ClipAnnotation::clip)
            .chain(split.unlabeled.iter().cloned())
            .collect();
        narration_cache = ledger.run(
            "narration-cache",
            &fp_narr_cache,
            &["caches/narrations.jsonl".into()],
            |root| CandidateCache::load("narration", &root.join("caches/narrations.jsonl")),
            || {
                let mut source = NarrationSource {
                    narrator: &narrator,
                    encoder: &baseline,
                    bank: &bank,
                    decoding: decoding.clone(),
                    filter: ns.filter,
                    seed: decoding.seed,
                };
                CandidateCache::build("narration", &mut source, &targets)
            },
            |c, root| c.save(&root.join("caches/narrations.jsonl")),
        )?;
        let nonempty = narration_cache.entries.values().filter(|v| !v.is_empty()).count();
        let total: usize = narration_cache.entries.values().map(Vec::len).sum();
        narration_stats = Some((narration_cache.len(), nonempty, total));
        narration_precision = Some(caption_precision(&videos, &narration_cache, &grammar));
    }

    stop_at!(Stage::NarrationCache);
    let rephraser = Rephraser::new(
        grammar.clone(),
        RephraserConfig {
            seed: substream(seed, "rephrase"),
            ..config.rephraser.clone()
        },
    );
    let mut rephrase_cache = CandidateCache::new("rephrase");
    let mut fp_reph = String::new();
    if config.needs_rephraser() {
        fp_reph = fingerprint(&("rephrase-cache", &fp_corpus, &rephraser.config))?;
        rephrase_cache = ledger.run(
            "rephrase-cache",
            &fp_reph,
            &["caches/rephrasings.jsonl".into()],
            |root| CandidateCache::load("rephrase", &root.join("caches/rephrasings.jsonl")),
            || {
                let mut src = RephraseSource::new(&rephraser, &split.labeled);
                let clips: Vec<ClipRef> = split.labeled.iter().map(ClipAnnotation::clip).collect();
                CandidateCache::build("rephrase", &mut src, &clips)
            },
            |c, root| c.save(&root.join("caches/rephrasings.jsonl")),
        )?;
    }

    stop_at!(Stage::RephraseCache);
    let mut arm_fps = Vec::new();
    for &arm in &config.arms {
        if arm == Arm::Baseline {
            arm_fps.push((arm, fp_base.clone()));
            encoders.push((arm, baseline.clone()));
            continue;
        }
        let cfg = train_cfg(arm);
        let dir = format!("arms/{}", arm.name());
        let fp = fingerprint(&(
            "arm",
            arm,
            &fp_corpus,
            &config.model,
            &cfg,
            encoder_seed,
            &fp_narr_cache,
            &fp_reph,
        ))?;
        arm_fps.push((arm, fp.clone()));
        let enc = ledger.run(
            &format!("train-{}", arm.name()),
            &fp,
            &[format!("{dir}/encoder.ckpt"), format!("{dir}/train_log.jsonl")],
            |root| load_encoder_and_log(root, &dir),
            || {
                let (enc, log) = train_arm(&template, &data, &cfg, &mut narration_cache, &mut rephrase_cache)?;
                if let Some(root) = &config.output_dir {
                    save_encoder(&enc, &log, root, &dir)?;
                }
                Ok(enc)
            },
            |_, _| Ok(()),
        )?;
        encoders.push((arm, enc));
    }

    stop_at!(Stage::Train);
    let fp_eval = fingerprint(&("eval", &arm_fps, &fp_corpus, &config.evaluation, seed))?;
    let reports = ledger.run(
        "eval",
        &fp_eval,
        &["metrics/arms.csv".into(), "metrics/arms.json".into()],
        |root| {
            let mut saved: BTreeMap<String, MetricReport> =
                serde_json::from_str(&std::fs::read_to_string(root.join("metrics/arms.json"))?)?;
            encoders
                .iter()
                .map(|(arm, _)| {
                    saved
                        .remove(arm.name())
                        .map(|r| (*arm, r))
                        .ok_or_else(|| Error::Data(format!("metrics/arms.json lacks arm {}", arm.name())))
                })
                .collect::<Result<Vec<_>>>()
        },
        || {
            let mut reports = Vec::new();
            for (arm, enc) in &encoders {
                let mut r = evaluate_arm(enc, &bank, &split.test, config)?;
                r.name = arm.name().to_string();
                reports.push((*arm, r));
            }
            Ok(reports)
        },
        |reports: &Vec<(Arm, MetricReport)>, root| {
            std::fs::create_dir_all(root.join("metrics"))?;
            std::fs::write(root.join("metrics/arms.csv"), arms_csv(reports))?;
            let json: BTreeMap<&str, &MetricReport> = reports.iter().map(|(a, r)| (a.name(), r)).collect();
            std::fs::write(root.join("metrics/arms.json"), serde_json::to_string_pretty(&json)?)?;
            Ok(())
        },
    )?;
    let map_of = |arm: Arm| reports.iter().find(|(a, _)| *a == arm).and_then(|(_, r)| r.get("map_avg", "test"));
    if let (Some(b), Some(a)) = (map_of(Arm::Baseline), map_of(Arm::All)) {
        checks.push(Check {
            name: "all-arm-at-least-baseline".into(),
            passed: a >= b,
            detail: format!("mAP all {a:.4} vs baseline {b:.4}"),
        });
    }
    for (arm, r) in &reports {
        let finite = r.rows.iter().all(|row| row.value.is_finite());
        checks.push(Check {
            name: format!("{}-metrics-finite", arm.name()),
            passed: finite,
            detail: String::new(),
        });
    }
    Ok(PipelineOutput {
        reports,
        encoders,
        split: split_out,
        narrator_history,
        narrator_selected,
        narration_stats,
        narration_precision,
        checks,
        computed: ledger.computed,
        reused: ledger.reused,
    })
}

fn train_arm(
    template: &DualEncoder,
    data: &TrainingData<'_>,
    cfg: &TrainConfig,
    narrations: &mut CandidateCache,
    rephrasings: &mut CandidateCache,
) -> Result<(DualEncoder, Vec<crate::training::LogRecord>)> {
    let sources = Sources {
        narrations: narrations as &mut dyn CandidateSource,
        rephrasings: rephrasings as &mut dyn CandidateSource,
    };
    if cfg.caching == CachingMode::OnTheFly {
        return Err(Error::Config(
            "on-the-fly candidate generation is a library option; the pipeline caches".into(),
        ));
    }
    pretrain_dual_encoder(template.clone(), data, sources, cfg, None)
}

fn ledger_path(config: &ExperimentConfig, rel: &str) -> Option<PathBuf> {
    config.output_dir.as_ref().map(|r| r.join(rel))
}

fn select_index(history: &[NarratorEpoch]) -> usize {
    let mut best = 0;
    for (i, h) in history.iter().enumerate() {
        let b = &history[best];
        if h.heldout_acc > b.heldout_acc || (h.heldout_acc == b.heldout_acc && h.heldout_nll < b.heldout_nll) {
            best = i;
        }
    }
    best
}

/// Deterministic hold-out by hashing clip identity.
fn holdout_split(labeled: &[ClipAnnotation], fraction: f64, seed: u64) -> (Vec<ClipAnnotation>, Vec<ClipAnnotation>) {
    let (mut train, mut held) = (Vec::new(), Vec::new());
    for a in labeled {
        let h = crate::training::clip_seed(seed, &a.clip());
        if (h as f64 / u64::MAX as f64) < fraction {
            held.push(a.clone());
        } else {
            train.push(a.clone());
        }
    }
    if held.is_empty() && train.len() > 1 {
        held.push(train.pop().expect("non-empty"));
    }
    (train, held)
}

/// Zero-shot and fine-tuned held-out mAP of one arm's encoder. The test
/// videos are split in half: the first half fine-tunes, the second scores.
pub fn run_finetune(config: &ExperimentConfig, arm: Arm) -> Result<(f64, f64)> {
    let mut cfg = config.clone();
    if !cfg.arms.contains(&arm) {
        cfg.arms.push(arm);
    }
    let out = run_stages(&cfg, Stage::Train)?;
    let encoder = out
        .encoders
        .into_iter()
        .find(|(a, _)| *a == arm)
        .map(|(_, e)| e)
        .expect("arm trained");
    let split = out.split.expect("corpus stage ran");
    let mut ids: Vec<&str> = split.test.iter().map(|a| a.video_id.as_str()).collect();
    ids.dedup();
    let tune_ids = &ids[..ids.len() / 2];
    let (tune, score): (Vec<ClipAnnotation>, Vec<ClipAnnotation>) =
        split.test.iter().cloned().partition(|a| tune_ids.contains(&a.video_id.as_str()));
    if tune.is_empty() || score.is_empty() {
        return Err(Error::Data("need at least two held-out videos to fine-tune".into()));
    }
    let world_cfg = WorldConfig {
        seed: substream(cfg.seed, "world"),
        ..cfg.world.clone()
    };
    let videos = generate_world(&world_cfg)?;
    let clips: Vec<ClipRef> = split.test.iter().map(ClipAnnotation::clip).collect();
    let bank = ClipBank::build(&encoder, &videos, &clips)?;
    let grammar = Grammar::standard();
    let before = evaluate_retrieval(&encoder, &bank, &score, &grammar)?.map.avg;
    let ft = FinetuneConfig {
        seed: substream(cfg.seed, "finetune"),
        ..cfg.finetune.clone()
    };
    let (tuned, _) = finetune_retrieval(encoder, &tune, &bank, &grammar, &ft)?;
    let after = evaluate_retrieval(&tuned, &bank, &score, &grammar)?.map.avg;
    Ok((before, after))
}

/// Fraction of cached captions whose parsed class is the class of the
/// scripted event occupying exactly that clip. Clips that do not line up
/// with one scripted event are ignored.
pub fn caption_precision(videos: &[VideoRecord], cache: &CandidateCache, grammar: &Grammar) -> f64 {
    let mut truth = BTreeMap::new();
    for v in videos {
        for ev in v.script() {
            truth.insert((v.id.as_str(), ev.t, ev.e), ev.event.class());
        }
    }
    let (mut hits, mut n) = (0usize, 0usize);
    for (clip, cands) in &cache.entries {
        let Some(cls) = truth.get(&(clip.video_id.as_str(), clip.t, clip.e)) else {
            continue;
        };
        for c in cands {
            n += 1;
            hits += usize::from(grammar.parse_str(c).is_some_and(|(p, _)| p == *cls));
        }
    }
    if n == 0 {
        0.0
    } else {
        hits as f64 / n as f64
    }
}

/// Fraction of annotations kept at every-`n`-th-chunk subsetting.
pub fn budget_fraction(n: usize) -> f64 {
    1.0 / n as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub fraction: f64,
    pub arm: Arm,
    pub map: f64,
    pub seed: u64,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("fraction,arm,map,seed\n");
    for r in rows {
        writeln!(s, "{:.4},{},{:.6},{}", r.fraction, r.arm.name(), r.map, r.seed).expect("string write");
    }
    s
}

fn sub_config(base: &ExperimentConfig, seed: u64, tag: &str) -> ExperimentConfig {
    ExperimentConfig {
        seed,
        output_dir: base.output_dir.as_ref().map(|d| d.join(tag)),
        ..base.clone()
    }
}

/// Baseline and full-augmentation mAP for each annotation budget and seed.
pub fn run_semi_sup_sweep(base: &ExperimentConfig, budgets: &[usize], seeds: &[u64]) -> Result<Vec<SweepRow>> {
    if budgets.is_empty() || budgets.iter().any(|n| ![1, 2, 5, 10].contains(n)) {
        return Err(Error::Config("budgets must be drawn from {1, 2, 5, 10}".into()));
    }
    let mut rows = Vec::new();
    for &n in budgets {
        for &seed in seeds {
            let mut cfg = sub_config(base, seed, &format!("sweep-n{n}-s{seed}"));
            cfg.corpus.keep_every = n;
            cfg.arms = vec![Arm::Baseline, Arm::All];
            let out = run_pipeline(&cfg)?;
            for arm in [Arm::Baseline, Arm::All] {
                rows.push(SweepRow {
                    fraction: budget_fraction(n),
                    arm,
                    map: out.map(arm).expect("both arms evaluated"),
                    seed,
                });
            }
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    pub map: f64,
    pub seed: u64,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("setting,map,seed\n");
    for r in rows {
        writeln!(s, "{},{:.6},{}", r.setting, r.map, r.seed).expect("string write");
    }
    s
}

/// Full-augmentation mAP with narrator captions from nucleus sampling
/// versus beam search.
pub fn run_sampling_ablation(base: &ExperimentConfig, seeds: &[u64]) -> Result<Vec<AblationRow>> {
    let settings = [
        ("nucleus", DecodingConfig {
            strategy: Strategy::Nucleus,
            ..base.decoding.clone()
        }),
        ("beam", DecodingConfig {
            strategy: Strategy::Beam,
            beam: base.decoding.k,
            ..base.decoding.clone()
        }),
    ];
    let mut rows = Vec::new();
    for &seed in seeds {
        for (name, decoding) in &settings {
            let mut cfg = sub_config(base, seed, &format!("sampling-{name}-s{seed}"));
            cfg.decoding = decoding.clone();
            cfg.arms = vec![Arm::All];
            let out = run_pipeline(&cfg)?;
            rows.push(AblationRow {
                setting: name.to_string(),
                map: out.map(Arm::All).expect("evaluated"),
                seed,
            });
        }
    }
    Ok(rows)
}

/// Full-augmentation mAP over (τ_r, τ_n) pairs.
pub fn run_temperature_ablation(base: &ExperimentConfig, taus: &[(f64, f64)], seeds: &[u64]) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &seed in seeds {
        for &(tr, tn) in taus {
            let name = format!("tau_r={tr}/tau_n={tn}");
            let mut cfg = sub_config(base, seed, &format!("temperature-{tr}-{tn}-s{seed}"));
            cfg.training.tau_rephrased = tr;
            cfg.training.tau_narrated = tn;
            cfg.arms = vec![Arm::All];
            let out = run_pipeline(&cfg)?;
            rows.push(AblationRow {
                setting: name,
                map: out.map(Arm::All).expect("evaluated"),
                seed,
            });
        }
    }
    Ok(rows)
}

/// Mean of `map` per key, in first-seen order.
pub fn mean_by<K: PartialEq + Clone>(rows: impl IntoIterator<Item = (K, f64)>) -> Vec<(K, f64)> {
    let mut acc: Vec<(K, f64, usize)> = Vec::new();
    for (k, v) in rows {
        match acc.iter_mut().find(|(a, _, _)| *a == k) {
            Some(e) => {
                e.1 += v;
                e.2 += 1;
            }
            None => acc.push((k, v, 1)),
        }
    }
    acc.into_iter().map(|(k, s, n)| (k, s / n as f64)).collect()
}

/// A line plot of mean mAP against annotation fraction, one line per arm.
pub fn sweep_svg(rows: &[SweepRow]) -> String {
    let (w, h, pad) = (480.0, 320.0, 48.0);
    let mut s = format!(r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">"#);
    s.push_str(&format!(
        r#"<line x1="{pad}" y1="{y}" x2="{x}" y2="{y}" stroke="black"/><line x1="{pad}" y1="{pad}" x2="{pad}" y2="{y}" stroke="black"/>"#,
        y = h - pad,
        x = w - pad
    ));
    let xs = |f: f64| pad + f * (w - 2.0 * pad);
    let ys = |m: f64| h - pad - m * (h - 2.0 * pad);
    for (arm, color) in [(Arm::Baseline, "gray"), (Arm::All, "steelblue")] {
        let mut pts = mean_by(rows.iter().filter(|r| r.arm == arm).map(|r| (format!("{:.4}", r.fraction), r.map)));
        pts.sort_by(|a, b| a.0.cmp(&b.0));
        let path: Vec<String> = pts
            .iter()
            .map(|(f, m)| format!("{:.1},{:.1}", xs(f.parse().expect("formatted number")), ys(*m)))
            .collect();
        s.push_str(&format!(
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/><text x="{}" y="{}" font-size="12" fill="{color}">{}</text>"#,
            path.join(" "),
            w - pad - 60.0,
            if arm == Arm::Baseline { pad } else { pad + 16.0 },
            arm.name()
        ));
    }
    s.push_str(&format!(
        r#"<text x="{}" y="{}" font-size="12">annotation fraction</text><text x="4" y="{}" font-size="12">mAP</text></svg>"#,
        w / 2.0 - 50.0,
        h - 12.0,
        pad - 8.0
    ));
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.world.num_videos = 4;
        c.world.video_length = 48;
        c.corpus.test_videos = 1;
        c.training.epochs = 1;
        c.training.batch_labeled = 8;
        c.training.batch_unlabeled = 8;
        c.narrator.lm_training.epochs = 1;
        c.narrator.training.epochs = 1;
        c.decoding.k = 2;
        c.finetune.steps = 2;
        c
    }

    #[test]
    fn toml_round_trip() {
        for c in [ExperimentConfig::default(), tiny()] {
            let text = c.to_toml().unwrap();
            assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), c);
        }
        let partial = ExperimentConfig::from_toml("seed = 3\n[training]\nepochs = 2\n").unwrap();
        assert_eq!(partial.seed, 3);
        assert_eq!(partial.training.epochs, 2);
        assert_eq!(partial.training.batch_labeled, TrainConfig::default().batch_labeled);
    }

    #[test]
    fn bad_configs_are_rejected() {
        for text in [
            "[training]\nbogus = 1\n",
            "colour = 2\n",
            "[corpus]\ntest_videos = 32\n",
            "[model]\nchannels = 3\n",
            "[decoding]\nbeam = 3\ngroups = 2\n",
            "arms = []\n",
        ] {
            let err = ExperimentConfig::from_toml(text).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{text}: {err}");
        }
    }

    #[test]
    fn substreams_are_stable_and_distinct() {
        assert_eq!(substream(1, "world"), substream(1, "world"));
        assert_ne!(substream(1, "world"), substream(1, "train"));
        assert_ne!(substream(1, "world"), substream(2, "world"));
    }

    #[test]
    fn plan_lists_stages_without_touching_disk() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let c = ExperimentConfig {
            output_dir: Some(out.clone()),
            ..ExperimentConfig::default()
        };
        let names: Vec<String> = c.plan().into_iter().map(|(n, _)| n).collect();
        assert_eq!(
            names,
            [
                "world",
                "corpus",
                "baseline",
                "lm",
                "narrator",
                "narration-cache",
                "rephrase-cache",
                "train-rephraser",
                "train-recaption",
                "train-all",
                "eval"
            ]
        );
        let text = c.plan_text();
        assert!(text.contains("metrics/arms.csv"));
        assert!(!out.exists());
        let base_only = ExperimentConfig {
            arms: vec![Arm::Baseline],
            ..ExperimentConfig::default()
        };
        assert_eq!(base_only.plan().len(), 4);
    }

    #[test]
    fn resume_reuses_completed_stages() {
        let dir = tempfile::tempdir().unwrap();
        let c = ExperimentConfig {
            output_dir: Some(dir.path().to_path_buf()),
            ..tiny()
        };
        let first = run_pipeline(&c).unwrap();
        assert!(first.reused.is_empty());
        let csv = std::fs::read(dir.path().join("metrics/arms.csv")).unwrap();
        let second = run_pipeline(&c).unwrap();
        assert!(second.computed.is_empty(), "{:?}", second.computed);
        assert_eq!(second.reused, first.computed);
        assert_eq!(std::fs::read(dir.path().join("metrics/arms.csv")).unwrap(), csv);
        assert_eq!(second.reports, first.reports);

        // A damaged artifact invalidates only its own stage.
        std::fs::write(dir.path().join("metrics/arms.csv"), "tampered").unwrap();
        let third = run_pipeline(&c).unwrap();
        assert_eq!(third.computed, ["eval"]);
        assert_eq!(std::fs::read(dir.path().join("metrics/arms.csv")).unwrap(), csv);

        // A changed training section keeps the upstream stages.
        let mut changed = c.clone();
        changed.training.epochs = 2;
        let fourth = run_pipeline(&changed).unwrap();
        assert!(fourth.reused.iter().any(|s| s == "world"));
        assert!(fourth.reused.iter().any(|s| s == "lm"));
        assert!(fourth.computed.iter().any(|s| s == "narrator"));
        assert!(fourth.computed.iter().any(|s| s == "baseline"));
    }

    #[test]
    fn memory_and_disk_runs_agree() {
        let dir = tempfile::tempdir().unwrap();
        let disk = run_pipeline(&ExperimentConfig {
            output_dir: Some(dir.path().to_path_buf()),
            ..tiny()
        })
        .unwrap();
        let mem = run_pipeline(&tiny()).unwrap();
        assert_eq!(arms_csv(&disk.reports), arms_csv(&mem.reports));
        assert!(mem.reports.iter().all(|(_, r)| r.rows.iter().all(|row| row.value.is_finite())));
        assert_eq!(mem.reports.len(), 4);
    }

    #[test]
    fn stage_failures_name_the_stage() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("world/videos.jsonl")).unwrap();
        let c = ExperimentConfig {
            output_dir: Some(dir.path().to_path_buf()),
            ..tiny()
        };
        match run_pipeline(&c).unwrap_err() {
            Error::Stage { stage, dir: d, .. } => {
                assert_eq!(stage, "world");
                assert!(d.starts_with(dir.path()));
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn sweep_rows_and_budget_check() {
        let rows = run_semi_sup_sweep(&tiny(), &[1, 2], &[0, 1]).unwrap();
        assert_eq!(rows.len(), 2 * 2 * 2);
        assert_eq!(sweep_csv(&rows).lines().count(), 1 + 8);
        assert!(rows.iter().any(|r| r.fraction == 0.5 && r.arm == Arm::All));
        assert!(matches!(run_semi_sup_sweep(&tiny(), &[3], &[0]), Err(Error::Config(_))));
        assert!(sweep_svg(&rows).starts_with("<svg"));
    }

    #[test]
    fn precision_counts_aligned_clips_only() {
        let c = tiny();
        let mut world = c.world.clone();
        world.seed = 1;
        let videos = generate_world(&world).unwrap();
        let grammar = Grammar::standard();
        let v = &videos[0];
        let ev = v.script()[0];
        let right = grammar.realize(&ev.event.class(), &crate::grammar::Phrasing::CANONICAL).unwrap().join(" ");
        let mut cache = CandidateCache::new("n");
        let clip = ClipRef {
            video_id: v.id.clone(),
            t: ev.t,
            e: ev.e,
        };
        cache.entries.insert(clip, vec![right.clone(), "not a sentence".into()]);
        cache.entries.insert(
            ClipRef {
                video_id: v.id.clone(),
                t: ev.t + 1,
                e: ev.e + 1,
            },
            vec![right],
        );
        assert_eq!(caption_precision(&videos, &cache, &grammar), 0.5);
    }
}
