//! Small transformer building blocks over [`Graph`].

use rand::Rng;

use crate::autograd::{AttnSpec, Graph, Var};
use crate::params::{Init, ParamId, ParamStore};

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, din: usize, dout: usize, bias: bool) -> Self {
        let w = store.add(format!("{name}.w"), (din, dout), Init::FanIn, true, rng);
        let b = bias.then(|| store.add(format!("{name}.b"), (1, dout), Init::Zeros, true, rng));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add_tiled(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), (1, dim), Init::Ones, true, rng),
            beta: store.add(format!("{name}.beta"), (1, dim), Init::Zeros, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Multi-head attention with separate query and key/value inputs.
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, dq: usize, dkv: usize, heads: usize) -> Self {
        Self {
            q: Linear::new(store, rng, &format!("{name}.q"), dq, dq, false),
            k: Linear::new(store, rng, &format!("{name}.k"), dkv, dq, false),
            v: Linear::new(store, rng, &format!("{name}.v"), dkv, dq, false),
            o: Linear::new(store, rng, &format!("{name}.o"), dq, dq, true),
            heads,
        }
    }

    /// `spec.heads` is overwritten with this layer's head count.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, xq: Var, xkv: Var, mut spec: AttnSpec) -> Var {
        spec.heads = self.heads;
        let q = self.q.forward(g, store, xq);
        let k = self.k.forward(g, store, xkv);
        let v = self.v.forward(g, store, xkv);
        let a = g.attention(q, k, v, spec);
        self.o.forward(g, store, a)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, dim: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), dim, hidden, true),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, dim, true),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.fc1.forward(g, store, x);
        let h = g.gelu(h);
        self.fc2.forward(g, store, h)
    }
}

/// Pre-norm self-attention block: `x + attn(ln(x))` then `x + mlp(ln(x))`.
#[derive(Clone, Copy, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, dim: usize, heads: usize, hidden: usize) -> Self {
        Self {
            ln1: LayerNorm::new(store, rng, &format!("{name}.ln1"), dim),
            attn: Attention::new(store, rng, &format!("{name}.attn"), dim, dim, heads),
            ln2: LayerNorm::new(store, rng, &format!("{name}.ln2"), dim),
            mlp: Mlp::new(store, rng, &format!("{name}.mlp"), dim, hidden),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, spec: AttnSpec) -> Var {
        let h = self.ln1.forward(g, store, x);
        let a = self.attn.forward(g, store, h, h, spec);
        let x = g.add(x, a);
        let h = self.ln2.forward(g, store, x);
        let m = self.mlp.forward(g, store, h);
        g.add(x, m)
    }
}
