//! Visually conditioned captioner: a frozen decoder-only language model with
//! zero-gated cross-attention onto attention-pooled video features.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{causal_mask, softmax_rows, AttnSpec, Grads, Graph, Mat, Var};
use crate::checkpoint;
use crate::corpus::{ClipAnnotation, ClipRef, Provenance};
use crate::decoding::{self, DecodingConfig};
use crate::dual_encoder::DualEncoder;
use crate::grammar::{Vocab, EOS_ID, SOS_ID};
use crate::nn::{Attention, Block, LayerNorm, Linear, Mlp};
use crate::params::{Init, ParamId, ParamStore};
use crate::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Positions, including the start marker.
    pub max_len: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            width: 32,
            layers: 4,
            heads: 2,
            mlp_ratio: 2,
            max_len: 16,
        }
    }
}

#[derive(Clone, Debug)]
struct LmLayout {
    tokens: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    ln: LayerNorm,
    head: Linear,
}

impl LmLayout {
    fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, c: &LmConfig, vocab: usize) -> Self {
        Self {
            tokens: store.add("lm.tokens", (vocab, c.width), Init::Normal(0.1), true, rng),
            pos: store.add("lm.pos", (c.max_len, c.width), Init::Normal(0.02), true, rng),
            blocks: (0..c.layers)
                .map(|l| Block::new(store, rng, &format!("lm.block{l}"), c.width, c.heads, c.width * c.mlp_ratio))
                .collect(),
            ln: LayerNorm::new(store, rng, "lm.ln", c.width),
            head: Linear::new(store, rng, "lm.head", c.width, vocab, true),
        }
    }
}

/// Teacher-forced token batch: inputs are `<s> w1..wn`, targets `w1..wn </s>`.
#[derive(Clone, Debug)]
pub struct TokenBatch {
    pub inputs: Vec<usize>,
    pub targets: Vec<Option<usize>>,
    pub seq_len: usize,
}

impl TokenBatch {
    /// Bodies longer than `max_len - 1` are cut.
    pub fn new(bodies: &[Vec<usize>], max_len: usize) -> Self {
        let keep = max_len.saturating_sub(1);
        let seq_len = bodies.iter().map(|b| b.len().min(keep) + 1).max().unwrap_or(1);
        let mut inputs = Vec::with_capacity(seq_len * bodies.len());
        let mut targets = Vec::with_capacity(seq_len * bodies.len());
        for b in bodies {
            let b = &b[..b.len().min(keep)];
            inputs.push(SOS_ID);
            inputs.extend_from_slice(b);
            targets.extend(b.iter().map(|&t| Some(t)));
            targets.push(Some(EOS_ID));
            for _ in b.len() + 1..seq_len {
                inputs.push(0);
                targets.push(None);
            }
        }
        Self { inputs, targets, seq_len }
    }

    /// Prefixes to be continued: no targets.
    pub fn prefixes(prefixes: &[Vec<usize>]) -> Self {
        let seq_len = prefixes.iter().map(Vec::len).max().unwrap_or(1).max(1);
        let mut inputs = Vec::with_capacity(seq_len * prefixes.len());
        for p in prefixes {
            inputs.extend_from_slice(p);
            inputs.extend(std::iter::repeat_n(0, seq_len - p.len()));
        }
        Self {
            targets: vec![None; inputs.len()],
            inputs,
            seq_len,
        }
    }

    pub fn num_targets(&self) -> usize {
        self.targets.iter().filter(|t| t.is_some()).count()
    }
}

/// Cross-attention inputs for the decoder: pooled visual rows per sequence.
struct Conditioning<'a> {
    blocks: &'a [(usize, CrossBlock)],
    pooled: Var,
    rows_per_seq: usize,
}

fn decoder_logits(
    g: &mut Graph,
    store: &ParamStore,
    lm: &LmLayout,
    batch: &TokenBatch,
    cond: Option<Conditioning<'_>>,
) -> Var {
    let table = g.param(store, lm.tokens);
    let x = g.gather(table, batch.inputs.clone());
    let pos_table = g.param(store, lm.pos);
    let pos = g.gather(pos_table, (0..batch.seq_len).collect());
    let mut x = g.add_tiled(x, pos);
    let spec = AttnSpec::new(0, batch.seq_len, batch.seq_len).with_mask(causal_mask(batch.seq_len));
    for (l, block) in lm.blocks.iter().enumerate() {
        if let Some(c) = &cond {
            for (_, cb) in c.blocks.iter().filter(|(at, _)| *at == l) {
                x = cb.forward(g, store, x, c.pooled, batch.seq_len, c.rows_per_seq);
            }
        }
        x = block.forward(g, store, x, spec.clone());
    }
    let x = lm.ln.forward(g, store, x);
    lm.head.forward(g, store, x)
}

/// Last-position rows of a `B·L × V` logit matrix, as distributions.
fn last_position_probs(logits: &Mat, lens: &[usize], seq_len: usize) -> Vec<Vec<f64>> {
    lens.iter()
        .enumerate()
        .map(|(i, &n)| {
            let row = logits.row(i * seq_len + n - 1).to_owned().insert_axis(ndarray::Axis(0));
            softmax_rows(&row).row(0).to_vec()
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct LanguageModel {
    pub config: LmConfig,
    pub vocab: Vocab,
    pub store: ParamStore,
    pub seed: u64,
    layout: LmLayout,
}

impl LanguageModel {
    pub fn new(config: LmConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        if config.width == 0 || config.layers == 0 || config.heads == 0 || config.width % config.heads != 0 {
            return Err(Error::Config("language model widths must be positive and divisible by heads".into()));
        }
        if config.max_len < 2 {
            return Err(Error::Config("max_len must be at least 2".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let layout = LmLayout::new(&mut store, &mut rng, &config, vocab.len());
        Ok(Self {
            config,
            vocab,
            store,
            seed,
            layout,
        })
    }

    pub fn logits(&self, g: &mut Graph, batch: &TokenBatch) -> Var {
        decoder_logits(g, &self.store, &self.layout, batch, None)
    }

    /// Summed next-token NLL of the bodies and its gradients.
    pub fn loss_and_grads(&self, bodies: &[Vec<usize>]) -> (f64, usize, Grads) {
        let batch = TokenBatch::new(bodies, self.config.max_len);
        let mut g = Graph::new();
        let logits = self.logits(&mut g, &batch);
        let loss = g.cross_entropy(logits, batch.targets.clone());
        (g.scalar(loss), batch.num_targets(), g.backward_scalar(loss))
    }

    /// Next-token distribution after `prefix`, which must start with `<s>`.
    pub fn next_token_distribution(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        check_prefix(prefix, self.config.max_len)?;
        let batch = TokenBatch::prefixes(&[prefix.to_vec()]);
        let mut g = Graph::new();
        let logits = self.logits(&mut g, &batch);
        Ok(last_position_probs(g.value(logits), &[prefix.len()], batch.seq_len).remove(0))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let config = serde_json::json!({ "lm": self.config, "vocab": self.vocab });
        checkpoint::save(path, "language_model", self.seed, config, &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (manifest, store) = checkpoint::load(path)?;
        if manifest.kind != "language_model" {
            return Err(Error::Data(format!("{}: not a language model checkpoint", path.display())));
        }
        let config: LmConfig = serde_json::from_value(manifest.config["lm"].clone())?;
        let mut vocab: Vocab = serde_json::from_value(manifest.config["vocab"].clone())?;
        vocab.rebuild_index();
        let mut lm = Self::new(config, vocab, manifest.seed)?;
        checkpoint::restore_into(&mut lm.store, &store)?;
        Ok(lm)
    }
}

fn check_prefix(prefix: &[usize], max_len: usize) -> Result<()> {
    if prefix.first() != Some(&SOS_ID) {
        return Err(Error::Contract("prefix must begin with the start marker".into()));
    }
    if prefix.len() > max_len {
        return Err(Error::Contract(format!("prefix of {} exceeds {max_len} positions", prefix.len())));
    }
    Ok(())
}

/// Learnable queries attending to visual tokens: layer-normalized queries
/// and features, per-head query maps, one key/value map shared by all heads,
/// and an output map over the concatenated heads.
#[derive(Clone, Debug)]
pub struct AttentionPool {
    pub queries: ParamId,
    pub ln_q: LayerNorm,
    pub ln_v: LayerNorm,
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    pub w_o: Linear,
    pub heads: usize,
    pub num_queries: usize,
    pub visual_dim: usize,
}

impl AttentionPool {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        text_dim: usize,
        visual_dim: usize,
        num_queries: usize,
        heads: usize,
        head_dim: usize,
    ) -> Self {
        Self {
            queries: store.add(format!("{name}.queries"), (num_queries, text_dim), Init::Normal(1.0), true, rng),
            ln_q: LayerNorm::new(store, rng, &format!("{name}.ln_q"), text_dim),
            ln_v: LayerNorm::new(store, rng, &format!("{name}.ln_v"), visual_dim),
            w_q: Linear::new(store, rng, &format!("{name}.w_q"), text_dim, heads * head_dim, false),
            w_k: Linear::new(store, rng, &format!("{name}.w_k"), visual_dim, head_dim, false),
            w_v: Linear::new(store, rng, &format!("{name}.w_v"), visual_dim, head_dim, false),
            w_o: Linear::new(store, rng, &format!("{name}.w_o"), heads * head_dim, text_dim, false),
            heads,
            num_queries,
            visual_dim,
        }
    }

    /// Pool `clips` stacked blocks of `tokens` rows each into
    /// `clips · num_queries` rows. Returns (pooled, attention node).
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, feats: Var, clips: usize) -> (Var, Var) {
        let rows = g.value(feats).nrows();
        let tokens = rows / clips;
        let q = g.param(store, self.queries);
        let q = g.gather(q, (0..clips).flat_map(|_| 0..self.num_queries).collect());
        let q = self.ln_q.forward(g, store, q);
        let v = self.ln_v.forward(g, store, feats);
        let qh = self.w_q.forward(g, store, q);
        let k = self.w_k.forward(g, store, v);
        let vv = self.w_v.forward(g, store, v);
        let spec = AttnSpec::new(self.heads, self.num_queries, tokens).shared_kv();
        let att = g.attention(qh, k, vv, spec);
        (self.w_o.forward(g, store, att), att)
    }
}

/// Pre-normalized cross-attention and feed-forward branches, each scaled by
/// `tanh` of its own zero-initialized gate.
#[derive(Clone, Debug)]
pub struct CrossBlock {
    pub ln_attn: LayerNorm,
    pub attn: Attention,
    pub gate_attn: ParamId,
    pub ln_ffn: LayerNorm,
    pub ffn: Mlp,
    pub gate_ffn: ParamId,
}

impl CrossBlock {
    fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, width: usize, heads: usize, hidden: usize) -> Self {
        Self {
            ln_attn: LayerNorm::new(store, rng, &format!("{name}.ln_attn"), width),
            attn: Attention::new(store, rng, &format!("{name}.attn"), width, width, heads),
            gate_attn: store.add(format!("{name}.gate_attn"), (1, 1), Init::Zeros, true, rng),
            ln_ffn: LayerNorm::new(store, rng, &format!("{name}.ln_ffn"), width),
            ffn: Mlp::new(store, rng, &format!("{name}.ffn"), width, hidden),
            gate_ffn: store.add(format!("{name}.gate_ffn"), (1, 1), Init::Zeros, true, rng),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, pooled: Var, seq_len: usize, rows_per_seq: usize) -> Var {
        let h = self.ln_attn.forward(g, store, x);
        let a = self
            .attn
            .forward(g, store, h, pooled, AttnSpec::new(0, seq_len, rows_per_seq));
        let gate = g.param(store, self.gate_attn);
        let gate = g.tanh(gate);
        let a = g.scale_by(a, gate);
        let x = g.add(x, a);
        let h = self.ln_ffn.forward(g, store, x);
        let m = self.ffn.forward(g, store, h);
        let gate = g.param(store, self.gate_ffn);
        let gate = g.tanh(gate);
        let m = g.scale_by(m, gate);
        g.add(x, m)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct NarratorConfig {
    /// Width of the visual tokens being pooled.
    pub visual_dim: usize,
    pub num_queries: usize,
    pub pool_heads: usize,
    pub pool_head_dim: usize,
    /// One cross-attention block before every `insertion_period`-th decoder layer.
    pub insertion_period: usize,
    pub cross_heads: usize,
}

impl Default for NarratorConfig {
    fn default() -> Self {
        Self {
            visual_dim: 32,
            num_queries: 8,
            pool_heads: 2,
            pool_head_dim: 16,
            insertion_period: 2,
            cross_heads: 2,
        }
    }
}

/// A captioning example: pre-pool visual tokens and a narration body.
#[derive(Clone, Debug)]
pub struct CaptionExample {
    pub feats: std::sync::Arc<Mat>,
    pub body: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Narrator {
    pub config: NarratorConfig,
    pub lm_config: LmConfig,
    pub vocab: Vocab,
    pub store: ParamStore,
    pub seed: u64,
    lm: LmLayout,
    pool: AttentionPool,
    cross: Vec<(usize, CrossBlock)>,
}

impl Narrator {
    /// Wrap a language model, freezing all of its parameters.
    pub fn new(lm: &LanguageModel, config: NarratorConfig, seed: u64) -> Result<Self> {
        if config.insertion_period == 0 || config.num_queries == 0 || config.pool_heads == 0 || config.pool_head_dim == 0 {
            return Err(Error::Config("narrator sizes must be positive".into()));
        }
        if lm.config.width % config.cross_heads != 0 {
            return Err(Error::Config("cross-attention heads must divide the LM width".into()));
        }
        let mut store = ParamStore::new();
        for id in lm.store.ids() {
            store.insert(lm.store.name(id), lm.store.value(id).clone(), false);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = lm.config.width;
        let pool = AttentionPool::new(
            &mut store,
            &mut rng,
            "narrator.pool",
            w,
            config.visual_dim,
            config.num_queries,
            config.pool_heads,
            config.pool_head_dim,
        );
        let cross = (0..lm.config.layers)
            .filter(|l| l % config.insertion_period == 0)
            .map(|l| {
                let cb = CrossBlock::new(
                    &mut store,
                    &mut rng,
                    &format!("narrator.cross{l}"),
                    w,
                    config.cross_heads,
                    w * lm.config.mlp_ratio,
                );
                (l, cb)
            })
            .collect();
        Ok(Self {
            config,
            lm_config: lm.config.clone(),
            vocab: lm.vocab.clone(),
            store,
            seed,
            lm: lm.layout.clone(),
            pool,
            cross,
        })
    }

    pub fn num_cross_blocks(&self) -> usize {
        self.cross.len()
    }

    pub fn gate_ids(&self) -> Vec<ParamId> {
        self.cross
            .iter()
            .flat_map(|(_, c)| [c.gate_attn, c.gate_ffn])
            .collect()
    }

    /// Digest of the frozen language-model parameters.
    pub fn lm_digest(&self) -> String {
        self.store.digest(|name, _| name.starts_with("lm."))
    }

    fn check_feats(&self, feats: &Mat) -> Result<()> {
        if feats.ncols() != self.config.visual_dim || feats.nrows() == 0 {
            return Err(Error::Shape(format!(
                "visual tokens {:?}, expected width {}",
                feats.dim(),
                self.config.visual_dim
            )));
        }
        Ok(())
    }

    /// Pool visual tokens of one clip into `num_queries × width` rows.
    pub fn attention_pool(&self, feats: &Mat) -> Result<Mat> {
        self.check_feats(feats)?;
        let mut g = Graph::new();
        let x = g.input(feats.clone());
        let (p, _) = self.pool.forward(&mut g, &self.store, x, 1);
        Ok(g.value(p).clone())
    }

    /// Pool weights of one clip, one `num_queries × tokens` matrix per head.
    pub fn pool_weights(&self, feats: &Mat) -> Result<Vec<Mat>> {
        self.check_feats(feats)?;
        let mut g = Graph::new();
        let x = g.input(feats.clone());
        let (_, att) = self.pool.forward(&mut g, &self.store, x, 1);
        Ok(g.attention_weights(att).expect("attention node").to_vec())
    }

    fn logits(&self, g: &mut Graph, pooled: Var, batch: &TokenBatch) -> Var {
        let cond = Conditioning {
            blocks: &self.cross,
            pooled,
            rows_per_seq: self.config.num_queries,
        };
        decoder_logits(g, &self.store, &self.lm, batch, Some(cond))
    }

    /// Per-position logits (`len × |vocab|`) for a token sequence given
    /// pooled visual rows.
    pub fn position_logits(&self, pooled: &Mat, tokens: &[usize]) -> Result<Mat> {
        check_prefix(tokens, self.lm_config.max_len)?;
        let mut g = Graph::new();
        let p = g.input(pooled.clone());
        let batch = TokenBatch::prefixes(&[tokens.to_vec()]);
        let l = self.logits(&mut g, p, &batch);
        Ok(g.value(l).clone())
    }

    /// `p(next | prefix, visual)`; `prefix` starts with `<s>`.
    pub fn next_token_distribution(&self, pooled: &Mat, prefix: &[usize]) -> Result<Vec<f64>> {
        if prefix.is_empty() {
            return Err(Error::Contract("empty prefix".into()));
        }
        if pooled.dim() != (self.config.num_queries, self.lm_config.width) {
            return Err(Error::Shape(format!("pooled visual rows {:?}", pooled.dim())));
        }
        let logits = self.position_logits(pooled, prefix)?;
        Ok(last_position_probs(&logits, &[prefix.len()], prefix.len()).remove(0))
    }

    fn stack(&self, examples: &[&CaptionExample]) -> Result<(Mat, usize)> {
        let tokens = examples[0].feats.nrows();
        let mut stacked = Mat::zeros((examples.len() * tokens, self.config.visual_dim));
        for (i, e) in examples.iter().enumerate() {
            self.check_feats(&e.feats)?;
            if e.feats.nrows() != tokens {
                return Err(Error::Shape("clips in a batch must have equal token counts".into()));
            }
            stacked
                .slice_mut(ndarray::s![i * tokens..(i + 1) * tokens, ..])
                .assign(&e.feats);
        }
        Ok((stacked, tokens))
    }

    /// Summed captioning NLL over a batch, the number of predicted tokens,
    /// and gradients (frozen parameters receive none).
    pub fn captioning_loss(&self, examples: &[&CaptionExample]) -> Result<(f64, usize, Grads)> {
        let (g, _, loss, batch) = self.loss_graph(examples)?;
        Ok((g.scalar(loss), batch.num_targets(), g.backward_scalar(loss)))
    }

    fn loss_graph(&self, examples: &[&CaptionExample]) -> Result<(Graph, Var, Var, TokenBatch)> {
        if examples.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        let (stacked, _) = self.stack(examples)?;
        let bodies: Vec<Vec<usize>> = examples.iter().map(|e| e.body.clone()).collect();
        let batch = TokenBatch::new(&bodies, self.lm_config.max_len);
        let mut g = Graph::new();
        let x = g.input(stacked);
        let (pooled, _) = self.pool.forward(&mut g, &self.store, x, examples.len());
        let logits = self.logits(&mut g, pooled, &batch);
        let loss = g.cross_entropy(logits, batch.targets.clone());
        Ok((g, logits, loss, batch))
    }

    /// Held-out statistics: (summed NLL, predicted tokens, argmax hits).
    pub fn evaluate(&self, examples: &[&CaptionExample]) -> Result<(f64, usize, usize)> {
        let (g, logits, loss, batch) = self.loss_graph(examples)?;
        let logits = g.value(logits);
        let mut hits = 0;
        for (r, t) in batch.targets.iter().enumerate() {
            if let Some(t) = t {
                let row = logits.row(r);
                let best = (0..row.len())
                    .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
                    .expect("non-empty vocabulary");
                hits += usize::from(best == *t);
            }
        }
        Ok((g.scalar(loss), batch.num_targets(), hits))
    }

    /// `K` candidate bodies for one clip's visual tokens.
    pub fn narrate<R: Rng>(&self, feats: &Mat, config: &DecodingConfig, rng: &mut R) -> Result<Vec<Vec<usize>>> {
        let pooled = self.attention_pool(feats)?;
        let max_len = config.max_len.min(self.lm_config.max_len - 1);
        let cfg = DecodingConfig {
            max_len,
            ..config.clone()
        };
        let step = |prefixes: &[Vec<usize>]| self.step_batch(&pooled, prefixes);
        decoding::decode(step, &cfg, EOS_ID, rng)
    }

    /// Distributions for many body prefixes sharing one clip.
    fn step_batch(&self, pooled: &Mat, prefixes: &[Vec<usize>]) -> Vec<Vec<f64>> {
        let full: Vec<Vec<usize>> = prefixes
            .iter()
            .map(|p| std::iter::once(SOS_ID).chain(p.iter().copied()).collect())
            .collect();
        let batch = TokenBatch::prefixes(&full);
        let mut g = Graph::new();
        let reps: Vec<usize> = (0..full.len()).flat_map(|_| 0..pooled.nrows()).collect();
        let p = g.input(pooled.clone());
        let p = g.gather(p, reps);
        let l = self.logits(&mut g, p, &batch);
        let lens: Vec<usize> = full.iter().map(Vec::len).collect();
        last_position_probs(g.value(l), &lens, batch.seq_len)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let config = serde_json::json!({
            "narrator": self.config,
            "lm": self.lm_config,
            "vocab": self.vocab,
        });
        checkpoint::save(path, "narrator", self.seed, config, &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (manifest, store) = checkpoint::load(path)?;
        if manifest.kind != "narrator" {
            return Err(Error::Data(format!("{}: not a narrator checkpoint", path.display())));
        }
        let config: NarratorConfig = serde_json::from_value(manifest.config["narrator"].clone())?;
        let lm_config: LmConfig = serde_json::from_value(manifest.config["lm"].clone())?;
        let mut vocab: Vocab = serde_json::from_value(manifest.config["vocab"].clone())?;
        vocab.rebuild_index();
        let lm = LanguageModel::new(lm_config, vocab, 0)?;
        let mut n = Self::new(&lm, config, manifest.seed)?;
        checkpoint::restore_into(&mut n.store, &store)?;
        Ok(n)
    }
}

/// How narrated candidates are accepted.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode", content = "value")]
pub enum FilterMode {
    /// Keep scores strictly above the threshold.
    Threshold(f64),
    /// Keep the `k` best.
    TopK(usize),
}

impl Default for FilterMode {
    fn default() -> Self {
        Self::Threshold(0.5)
    }
}

/// Score candidates by cosine similarity with the clip embedding and keep
/// the accepted ones, best first.
pub fn filter_candidates(
    encoder: &DualEncoder,
    clip: &ClipRef,
    clip_embedding: &[f64],
    candidates: &[Vec<usize>],
    mode: FilterMode,
) -> Vec<ClipAnnotation> {
    if candidates.is_empty() {
        return Vec::new();
    }
    let u = encoder.embed_texts(candidates, 64);
    let mut scored: Vec<(f64, usize)> = (0..candidates.len())
        .map(|i| {
            let s: f64 = u.row(i).iter().zip(clip_embedding).map(|(a, b)| a * b).sum();
            (s, i)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let kept: Vec<(f64, usize)> = match mode {
        FilterMode::Threshold(th) => scored.into_iter().filter(|(s, _)| *s > th).collect(),
        FilterMode::TopK(k) => scored.into_iter().take(k).collect(),
    };
    kept.into_iter()
        .map(|(s, i)| ClipAnnotation {
            video_id: clip.video_id.clone(),
            t: clip.t,
            e: clip.e,
            narration: encoder.vocab.decode(&candidates[i]),
            provenance: Provenance::Narrated,
            score: Some(s),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dual_encoder::DualEncoderConfig;
    use crate::grammar::Grammar;
    use std::sync::Arc;

    fn lm(seed: u64) -> LanguageModel {
        LanguageModel::new(LmConfig::default(), Vocab::from_grammar(&Grammar::standard()), seed).unwrap()
    }

    fn random_mat(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Mat {
        Mat::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn random_prefix(rng: &mut ChaCha8Rng, vocab: usize, max: usize) -> Vec<usize> {
        let n = rng.random_range(0..max);
        std::iter::once(SOS_ID)
            .chain((0..n).map(|_| rng.random_range(3..vocab)))
            .collect()
    }

    #[test]
    fn zero_gates_reproduce_the_language_model() {
        let base = lm(1);
        let n = Narrator::new(&base, NarratorConfig::default(), 2).unwrap();
        assert_eq!(n.num_cross_blocks(), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let pooled = random_mat(&mut rng, (8, 32));
            let prefix = random_prefix(&mut rng, base.vocab.len(), 10);
            let a = n.next_token_distribution(&pooled, &prefix).unwrap();
            let b = base.next_token_distribution(&prefix).unwrap();
            for (x, y) in a.iter().zip(&b) {
                worst = worst.max((x - y).abs());
            }
        }
        assert!(worst < 1e-5, "{worst}");
    }

    #[test]
    fn distributions_are_proper_and_prefix_checked() {
        let n = Narrator::new(&lm(1), NarratorConfig::default(), 2).unwrap();
        let pooled = Mat::zeros((8, 32));
        let d = n.next_token_distribution(&pooled, &[SOS_ID, 5, 6]).unwrap();
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(d.iter().all(|p| *p >= 0.0));
        assert!(matches!(n.next_token_distribution(&pooled, &[]), Err(Error::Contract(_))));
        assert!(matches!(n.next_token_distribution(&pooled, &[5]), Err(Error::Contract(_))));
    }

    #[test]
    fn pooling_length_is_fixed() {
        let n = Narrator::new(&lm(1), NarratorConfig::default(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for tokens in [64, 256] {
            let feats = random_mat(&mut rng, (tokens, 32));
            assert_eq!(n.attention_pool(&feats).unwrap().dim(), (8, 32));
            for w in n.pool_weights(&feats).unwrap() {
                for row in w.rows() {
                    assert!((row.sum() - 1.0).abs() < 1e-6);
                }
            }
        }
        assert!(matches!(n.attention_pool(&Mat::zeros((16, 7))), Err(Error::Shape(_))));
    }

    /// Layer norm of one row with gain and bias, written out.
    fn ln_row(x: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        x.iter()
            .enumerate()
            .map(|(i, v)| (v - mean) / (var + 1e-5).sqrt() * gamma[i] + beta[i])
            .collect()
    }

    #[test]
    fn pool_matches_scalar_unroll() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let pool = AttentionPool::new(&mut store, &mut rng, "p", 2, 3, 2, 1, 2);
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.value(id).dim();
            *store.value_mut(id) = random_mat(&mut rng, shape);
        }
        let feats = random_mat(&mut rng, (3, 3));
        let mut g = Graph::new();
        let x = g.input(feats.clone());
        let (out, _) = pool.forward(&mut g, &store, x, 1);
        let got = g.value(out).clone();

        let val = |id: ParamId| store.value(id).clone();
        let row = |m: &Mat, r: usize| m.row(r).to_vec();
        let (q, gq, bq) = (val(pool.queries), val(pool.ln_q.gamma), val(pool.ln_q.beta));
        let (gv, bv) = (val(pool.ln_v.gamma), val(pool.ln_v.beta));
        let (wq, wk, wv, wo) = (val(pool.w_q.w), val(pool.w_k.w), val(pool.w_v.w), val(pool.w_o.w));
        let vn: Vec<Vec<f64>> = (0..3).map(|t| ln_row(&row(&feats, t), &row(&gv, 0), &row(&bv, 0))).collect();
        let proj = |x: &[f64], w: &Mat, j: usize| -> f64 { (0..x.len()).map(|i| x[i] * w[[i, j]]).sum() };
        for qi in 0..2 {
            let qn = ln_row(&row(&q, qi), &row(&gq, 0), &row(&bq, 0));
            let qq = [proj(&qn, &wq, 0), proj(&qn, &wq, 1)];
            let mut scores = [0.0; 3];
            for t in 0..3 {
                let k = [proj(&vn[t], &wk, 0), proj(&vn[t], &wk, 1)];
                scores[t] = (qq[0] * k[0] + qq[1] * k[1]) / 2f64.sqrt();
            }
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            let mut head = [0.0; 2];
            for t in 0..3 {
                let a = scores[t].exp() / z;
                head[0] += a * proj(&vn[t], &wv, 0);
                head[1] += a * proj(&vn[t], &wv, 1);
            }
            for j in 0..2 {
                let expect = head[0] * wo[[0, j]] + head[1] * wo[[1, j]];
                assert!((got[[qi, j]] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn logits_are_causal() {
        let mut n = Narrator::new(&lm(1), NarratorConfig::default(), 2).unwrap();
        for id in n.gate_ids() {
            n.store.value_mut(id).fill(0.7);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pooled = random_mat(&mut rng, (8, 32));
        let a = n.position_logits(&pooled, &[SOS_ID, 5, 6, 7, 8]).unwrap();
        let b = n.position_logits(&pooled, &[SOS_ID, 5, 6, 9, 10]).unwrap();
        for r in 0..3 {
            for c in 0..a.ncols() {
                assert_eq!(a[[r, c]], b[[r, c]]);
            }
        }
        assert_ne!(a.row(3), b.row(3));
    }

    fn example(rng: &mut ChaCha8Rng, n: &Narrator, words: &str) -> CaptionExample {
        CaptionExample {
            feats: Arc::new(random_mat(rng, (16, 32))),
            body: n.vocab.encode_str(words).unwrap(),
        }
    }

    #[test]
    fn uniform_logits_give_length_times_log_vocab() {
        let mut n = Narrator::new(&lm(1), NarratorConfig::default(), 2).unwrap();
        let head = n.store.find("lm.head.w").unwrap();
        n.store.value_mut(head).fill(0.0);
        let bias = n.store.find("lm.head.b").unwrap();
        n.store.value_mut(bias).fill(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ex = example(&mut rng, &n, "C moves the red square left");
        let (loss, count, _) = n.captioning_loss(&[&ex]).unwrap();
        assert_eq!(count, 7);
        assert!((loss - 7.0 * (n.vocab.len() as f64).ln()).abs() < 1e-4);
    }

    #[test]
    fn frozen_parameters_get_no_gradient() {
        let n = Narrator::new(&lm(1), NarratorConfig::default(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ex = example(&mut rng, &n, "O flashes the blue disc");
        let (_, _, grads) = n.captioning_loss(&[&ex]).unwrap();
        for (id, g) in grads.iter() {
            assert!(!n.store.name(id).starts_with("lm."), "{}", n.store.name(id));
            assert!(g.iter().all(|v| v.is_finite()));
        }
        for id in n.gate_ids() {
            assert!(grads.get(id).is_some_and(|g| g[[0, 0]] != 0.0));
        }
    }

    #[test]
    fn gate_gradients_match_finite_differences() {
        let mut n = Narrator::new(&lm(1), NarratorConfig::default(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for id in n.gate_ids() {
            n.store.value_mut(id).fill(rng.random_range(-0.5..0.5));
        }
        let exs = [
            example(&mut rng, &n, "O flashes the blue disc"),
            example(&mut rng, &n, "the green wedge is shaken by C"),
        ];
        let refs: Vec<&CaptionExample> = exs.iter().collect();
        let (_, _, grads) = n.captioning_loss(&refs).unwrap();
        let h = 1e-5;
        for id in n.gate_ids() {
            let base = n.store.value(id)[[0, 0]];
            n.store.value_mut(id)[[0, 0]] = base + h;
            let up = n.captioning_loss(&refs).unwrap().0;
            n.store.value_mut(id)[[0, 0]] = base - h;
            let down = n.captioning_loss(&refs).unwrap().0;
            n.store.value_mut(id)[[0, 0]] = base;
            let fd = (up - down) / (2.0 * h);
            let an = grads.get(id).unwrap()[[0, 0]];
            assert!((fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()), "{fd} vs {an}");
        }
    }

    #[test]
    fn narration_is_seeded_and_degenerates_to_greedy() {
        let mut n = Narrator::new(&lm(1), NarratorConfig::default(), 2).unwrap();
        for id in n.gate_ids() {
            n.store.value_mut(id).fill(0.5);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let feats = random_mat(&mut rng, (16, 32));
        let cfg = DecodingConfig::default();
        let run = |seed| n.narrate(&feats, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let a = run(1);
        assert_eq!(a.len(), 10);
        assert_eq!(a, run(1));
        assert!(a.iter().all(|s| s.len() <= n.lm_config.max_len - 1 && !s.contains(&EOS_ID)));

        let tiny = DecodingConfig { p: 1e-12, k: 3, ..cfg.clone() };
        let greedy_cfg = DecodingConfig {
            strategy: decoding::Strategy::Greedy,
            ..cfg
        };
        let g = n.narrate(&feats, &greedy_cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for s in n.narrate(&feats, &tiny, &mut ChaCha8Rng::seed_from_u64(2)).unwrap() {
            assert_eq!(s, g[0]);
        }
    }

    #[test]
    fn filter_modes() {
        let vocab = Vocab::from_grammar(&Grammar::standard());
        let enc = DualEncoder::new(DualEncoderConfig::default(), vocab.clone(), 0).unwrap();
        let clip = ClipRef {
            video_id: "v".into(),
            t: 0,
            e: 6,
        };
        let cands: Vec<Vec<usize>> = ["C moves the red square left", "O flashes the blue disc", "C grows the green wedge"]
            .iter()
            .map(|s| vocab.encode_str(s).unwrap())
            .collect();
        let emb = enc.embed_texts(&cands[..1], 4).row(0).to_vec();
        let all = filter_candidates(&enc, &clip, &emb, &cands, FilterMode::TopK(5));
        assert_eq!(all.len(), 3);
        assert!(all.windows(2).all(|w| w[0].score >= w[1].score));
        // the first candidate is the anchor itself
        assert_eq!(all[0].narration, "C moves the red square left");
        assert!((all[0].score.unwrap() - 1.0).abs() < 1e-9);
        assert!(all.iter().all(|a| a.provenance == Provenance::Narrated));
        assert!(filter_candidates(&enc, &clip, &emb, &cands, FilterMode::Threshold(1.0 + 1e-9)).is_empty());
        let kept = filter_candidates(&enc, &clip, &emb, &cands, FilterMode::Threshold(0.5));
        assert!(kept.iter().all(|a| a.score.unwrap() > 0.5));
    }

    #[test]
    fn checkpoints_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let base = lm(11);
        let p = dir.path().join("lm.ckpt");
        base.save(&p).unwrap();
        let back = LanguageModel::load(&p).unwrap();
        assert_eq!(back.store.digest(|_, _| true), base.store.digest(|_, _| true));

        let mut n = Narrator::new(&base, NarratorConfig::default(), 3).unwrap();
        n.store.value_mut(n.gate_ids()[0]).fill(0.25);
        let p = dir.path().join("n.ckpt");
        n.save(&p).unwrap();
        let back = Narrator::load(&p).unwrap();
        assert_eq!(back.store.digest(|_, _| true), n.store.digest(|_, _| true));
        assert!(!back.store.is_trainable(back.store.find("lm.tokens").unwrap()));
    }
}
