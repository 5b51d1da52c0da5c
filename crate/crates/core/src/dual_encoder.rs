//! Video and text towers projecting into a shared, unit-normalized space.

use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{causal_mask, AttnSpec, Graph, Mat, Var};
use crate::checkpoint;
use crate::grammar::{Vocab, EOS, SOS};
use crate::nn::{Block, LayerNorm, Linear};
use crate::params::{Init, ParamId, ParamStore};
use crate::world::VideoRecord;
use crate::{Error, Result};

pub use crate::losses::{dual_temperature_loss, max_margin_loss, similarity_matrix, symmetric_infonce, ContrastiveOutput};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DualEncoderConfig {
    pub grid_size: usize,
    pub channels: usize,
    pub frames_per_clip: usize,
    pub patch: usize,
    /// Video feature width.
    pub d_v: usize,
    /// Text feature width.
    pub d_t: usize,
    /// Joint embedding width.
    pub d: usize,
    pub video_layers: usize,
    pub text_layers: usize,
    pub video_heads: usize,
    pub text_heads: usize,
    pub mlp_ratio: usize,
    /// Longest token sequence, including the start and end markers.
    pub max_text_len: usize,
}

impl Default for DualEncoderConfig {
    fn default() -> Self {
        Self {
            grid_size: 8,
            channels: 8,
            frames_per_clip: 4,
            patch: 4,
            d_v: 32,
            d_t: 32,
            d: 32,
            video_layers: 2,
            text_layers: 2,
            video_heads: 2,
            text_heads: 2,
            mlp_ratio: 2,
            max_text_len: 16,
        }
    }
}

impl DualEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("grid_size", self.grid_size),
            ("channels", self.channels),
            ("frames_per_clip", self.frames_per_clip),
            ("patch", self.patch),
            ("d_v", self.d_v),
            ("d_t", self.d_t),
            ("d", self.d),
            ("video_heads", self.video_heads),
            ("text_heads", self.text_heads),
            ("mlp_ratio", self.mlp_ratio),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.grid_size % self.patch != 0 {
            return Err(Error::Config(format!(
                "patch {} does not divide grid {}",
                self.patch, self.grid_size
            )));
        }
        if self.d_v % self.video_heads != 0 || self.d_t % self.text_heads != 0 {
            return Err(Error::Config("widths must be divisible by head counts".into()));
        }
        if self.max_text_len < 3 {
            return Err(Error::Config("max_text_len must leave room for one word".into()));
        }
        Ok(())
    }

    /// Patches per frame.
    pub fn patches(&self) -> usize {
        (self.grid_size / self.patch).pow(2)
    }

    /// Visual tokens per clip.
    pub fn tokens_per_clip(&self) -> usize {
        self.frames_per_clip * self.patches()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }
}

/// Unit-normalized video and text embeddings with per-sample temperatures.
#[derive(Clone, Debug)]
pub struct EmbeddingBatch {
    pub v: Mat,
    pub u: Mat,
    pub tau: Vec<f64>,
}

impl EmbeddingBatch {
    pub fn new(v: Mat, u: Mat, tau: Vec<f64>) -> Result<Self> {
        if v.dim() != u.dim() || tau.len() != v.nrows() {
            return Err(Error::Shape(format!(
                "V {:?}, U {:?}, tau {}",
                v.dim(),
                u.dim(),
                tau.len()
            )));
        }
        Ok(Self { v, u, tau })
    }

    pub fn loss(&self) -> Result<ContrastiveOutput> {
        dual_temperature_loss(&self.v, &self.u, &self.tau)
    }
}

/// `T` evenly spaced frames of `[t, e)` as a `T×C×G×G` array.
pub fn clip_frames(video: &VideoRecord, t: usize, e: usize, frames: usize) -> Result<Array4<f64>> {
    if t >= e || e > video.num_frames() {
        return Err(Error::Shape(format!(
            "clip [{t}, {e}) outside video `{}` of {} frames",
            video.id,
            video.num_frames()
        )));
    }
    let g = video.grid_size;
    let len = e - t;
    let mut out = Array4::zeros((frames, video.channels, g, g));
    for k in 0..frames {
        let f = t + (2 * k + 1) * len / (2 * frames);
        for ((c, y, x), v) in out
            .index_axis_mut(ndarray::Axis(0), k)
            .indexed_iter_mut()
        {
            *v = video.cell(f, c, y, x) as f64;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
struct VideoTower {
    embed: Linear,
    pos: ParamId,
    /// (spatial, temporal) blocks.
    blocks: Vec<(Block, Block)>,
    ln: LayerNorm,
    proj: Linear,
}

#[derive(Clone, Debug)]
struct TextTower {
    tokens: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    ln: LayerNorm,
    proj: Linear,
}

/// Token ids of a batch of sentences, padded to a common length.
#[derive(Clone, Debug)]
pub struct TextBatch {
    pub ids: Vec<usize>,
    pub seq_len: usize,
    /// Row of each sentence's end marker within the flattened batch.
    pub eos_rows: Vec<usize>,
}

impl TextBatch {
    pub fn len(&self) -> usize {
        self.eos_rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eos_rows.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct DualEncoder {
    pub config: DualEncoderConfig,
    pub vocab: Vocab,
    pub store: ParamStore,
    pub seed: u64,
    video: VideoTower,
    text: TextTower,
    spatial_mask: Arc<Array2<bool>>,
    temporal_mask: Arc<Array2<bool>>,
}

impl DualEncoder {
    pub fn new(config: DualEncoderConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &config;
        let n_tok = c.tokens_per_clip();
        let video = VideoTower {
            embed: Linear::new(&mut store, &mut rng, "video.embed", c.patch_dim(), c.d_v, true),
            pos: store.add("video.pos", (n_tok, c.d_v), Init::Normal(0.02), true, &mut rng),
            blocks: (0..c.video_layers)
                .map(|l| {
                    (
                        Block::new(&mut store, &mut rng, &format!("video.block{l}.space"), c.d_v, c.video_heads, c.d_v * c.mlp_ratio),
                        Block::new(&mut store, &mut rng, &format!("video.block{l}.time"), c.d_v, c.video_heads, c.d_v * c.mlp_ratio),
                    )
                })
                .collect(),
            ln: LayerNorm::new(&mut store, &mut rng, "video.ln", c.d_v),
            proj: Linear::new(&mut store, &mut rng, "video.proj", c.d_v, c.d, false),
        };
        let text = TextTower {
            tokens: store.add("text.tokens", (vocab.len(), c.d_t), Init::Normal(0.1), true, &mut rng),
            pos: store.add("text.pos", (c.max_text_len, c.d_t), Init::Normal(0.02), true, &mut rng),
            blocks: (0..c.text_layers)
                .map(|l| Block::new(&mut store, &mut rng, &format!("text.block{l}"), c.d_t, c.text_heads, c.d_t * c.mlp_ratio))
                .collect(),
            ln: LayerNorm::new(&mut store, &mut rng, "text.ln", c.d_t),
            proj: Linear::new(&mut store, &mut rng, "text.proj", c.d_t, c.d, false),
        };
        let p = c.patches();
        let spatial_mask = Arc::new(Array2::from_shape_fn((n_tok, n_tok), |(i, j)| i / p == j / p));
        let temporal_mask = Arc::new(Array2::from_shape_fn((n_tok, n_tok), |(i, j)| i % p == j % p));
        Ok(Self {
            config,
            vocab,
            store,
            seed,
            video,
            text,
            spatial_mask,
            temporal_mask,
        })
    }

    /// Flatten a `T×C×G×G` clip into `T·P` patch rows (frame-major).
    pub fn patchify(&self, clip: &Array4<f64>) -> Result<Mat> {
        let c = &self.config;
        let want = (c.frames_per_clip, c.channels, c.grid_size, c.grid_size);
        if clip.dim() != want {
            return Err(Error::Shape(format!("clip shape {:?}, expected {want:?}", clip.dim())));
        }
        let side = c.grid_size / c.patch;
        let mut out = Mat::zeros((c.tokens_per_clip(), c.patch_dim()));
        for ((f, ch, y, x), &v) in clip.indexed_iter() {
            let row = f * side * side + (y / c.patch) * side + x / c.patch;
            let col = ch * c.patch * c.patch + (y % c.patch) * c.patch + x % c.patch;
            out[[row, col]] = v;
        }
        Ok(out)
    }

    /// Video tower on stacked patch rows of `B` clips. Returns the
    /// pre-pool token features (`B·T·P × d_v`) and embeddings (`B × d`).
    pub fn forward_video(&self, g: &mut Graph, patches: Var) -> (Var, Var) {
        let n_tok = self.config.tokens_per_clip();
        let s = &self.store;
        let v = &self.video;
        let x = v.embed.forward(g, s, patches);
        let pos = g.param(s, v.pos);
        let mut x = g.add_tiled(x, pos);
        let space = AttnSpec::new(0, n_tok, n_tok).with_mask(self.spatial_mask.clone());
        let time = AttnSpec::new(0, n_tok, n_tok).with_mask(self.temporal_mask.clone());
        for (sb, tb) in &v.blocks {
            x = sb.forward(g, s, x, space.clone());
            x = tb.forward(g, s, x, time.clone());
        }
        let feats = v.ln.forward(g, s, x);
        let pooled = g.block_mean(feats, n_tok);
        let emb = v.proj.forward(g, s, pooled);
        (feats, g.l2_normalize(emb))
    }

    /// Text tower; pools the end-marker position of each sentence.
    pub fn forward_text(&self, g: &mut Graph, batch: &TextBatch) -> Var {
        let s = &self.store;
        let t = &self.text;
        let table = g.param(s, t.tokens);
        let x = g.gather(table, batch.ids.clone());
        let pos_table = g.param(s, t.pos);
        let pos = g.gather(pos_table, (0..batch.seq_len).collect());
        let mut x = g.add_tiled(x, pos);
        let spec = AttnSpec::new(0, batch.seq_len, batch.seq_len).with_mask(causal_mask(batch.seq_len));
        for b in &t.blocks {
            x = b.forward(g, s, x, spec.clone());
        }
        let x = t.ln.forward(g, s, x);
        let last = g.gather(x, batch.eos_rows.clone());
        let emb = t.proj.forward(g, s, last);
        g.l2_normalize(emb)
    }

    /// Wrap a body of word ids in start/end markers, truncating to fit.
    pub fn frame_ids(&self, body: &[usize]) -> Vec<usize> {
        let keep = body.len().min(self.config.max_text_len - 2);
        let mut ids = Vec::with_capacity(keep + 2);
        ids.push(self.vocab.id(SOS).expect("start marker"));
        ids.extend_from_slice(&body[..keep]);
        ids.push(self.vocab.id(EOS).expect("end marker"));
        ids
    }

    pub fn text_batch(&self, bodies: &[Vec<usize>]) -> TextBatch {
        let framed: Vec<Vec<usize>> = bodies.iter().map(|b| self.frame_ids(b)).collect();
        let seq_len = framed.iter().map(Vec::len).max().unwrap_or(2);
        let mut ids = Vec::with_capacity(seq_len * framed.len());
        let mut eos_rows = Vec::with_capacity(framed.len());
        for (i, f) in framed.iter().enumerate() {
            eos_rows.push(i * seq_len + f.len() - 1);
            ids.extend_from_slice(f);
            ids.extend(std::iter::repeat_n(0, seq_len - f.len()));
        }
        TextBatch { ids, seq_len, eos_rows }
    }

    pub fn tokenize(&self, sentence: &str) -> Result<Vec<usize>> {
        self.vocab.encode_str(sentence)
    }

    pub fn encode_video(&self, clip: &Array4<f64>) -> Result<(Mat, Vec<f64>)> {
        let p = self.patchify(clip)?;
        let mut g = Graph::new();
        let x = g.input(p);
        let (feats, emb) = self.forward_video(&mut g, x);
        Ok((g.value(feats).clone(), g.value(emb).row(0).to_vec()))
    }

    /// Embed a sentence given as words.
    pub fn encode_text(&self, words: &[&str]) -> Result<Vec<f64>> {
        let ids = self.vocab.encode(words)?;
        let mut g = Graph::new();
        let batch = self.text_batch(&[ids]);
        let u = self.forward_text(&mut g, &batch);
        Ok(g.value(u).row(0).to_vec())
    }

    /// Embeddings and pre-pool features for many clips, in chunks.
    pub fn embed_clips(&self, clips: &[Mat], chunk: usize) -> Result<(Mat, Vec<Mat>)> {
        let c = &self.config;
        let n_tok = c.tokens_per_clip();
        let mut emb = Mat::zeros((clips.len(), c.d));
        let mut feats = Vec::with_capacity(clips.len());
        for (k, group) in clips.chunks(chunk.max(1)).enumerate() {
            let mut stacked = Mat::zeros((group.len() * n_tok, c.patch_dim()));
            for (i, p) in group.iter().enumerate() {
                if p.dim() != (n_tok, c.patch_dim()) {
                    return Err(Error::Shape(format!("patch matrix {:?}", p.dim())));
                }
                stacked.slice_mut(ndarray::s![i * n_tok..(i + 1) * n_tok, ..]).assign(p);
            }
            let mut g = Graph::new();
            let x = g.input(stacked);
            let (f, e) = self.forward_video(&mut g, x);
            let base = k * chunk.max(1);
            emb.slice_mut(ndarray::s![base..base + group.len(), ..]).assign(g.value(e));
            let fv = g.value(f);
            for i in 0..group.len() {
                feats.push(fv.slice(ndarray::s![i * n_tok..(i + 1) * n_tok, ..]).to_owned());
            }
        }
        Ok((emb, feats))
    }

    pub fn embed_texts(&self, bodies: &[Vec<usize>], chunk: usize) -> Mat {
        let mut out = Mat::zeros((bodies.len(), self.config.d));
        for (k, group) in bodies.chunks(chunk.max(1)).enumerate() {
            let mut g = Graph::new();
            let batch = self.text_batch(group);
            let u = self.forward_text(&mut g, &batch);
            let base = k * chunk.max(1);
            out.slice_mut(ndarray::s![base..base + group.len(), ..]).assign(g.value(u));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let config = serde_json::json!({
            "model": self.config,
            "vocab": self.vocab,
        });
        checkpoint::save(path, "dual_encoder", self.seed, config, &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (manifest, store) = checkpoint::load(path)?;
        if manifest.kind != "dual_encoder" {
            return Err(Error::Data(format!("{}: not a dual encoder checkpoint", path.display())));
        }
        let config: DualEncoderConfig = serde_json::from_value(manifest.config["model"].clone())?;
        let mut vocab: Vocab = serde_json::from_value(manifest.config["vocab"].clone())?;
        vocab.rebuild_index();
        let mut model = Self::new(config, vocab, manifest.seed)?;
        checkpoint::restore_into(&mut model.store, &store)?;
        Ok(model)
    }
}
