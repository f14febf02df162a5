//! Shared layers: linear maps, layer norm, MLPs and pre-norm transformer blocks.

use rand::Rng;

use crate::autograd::{AttentionSpec, Graph, Var};
use crate::error::Result;
use crate::tensor::{Module, Param};

/// Standard deviation for every weight initialisation in the crate.
pub const INIT_STD: f64 = 0.02;

/// `y = x·W + b`, `W` stored `in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            weight: Param::randn(format!("{name}.weight"), &[d_in, d_out], INIT_STD, rng),
            bias: Param::zeros(format!("{name}.bias"), &[1, d_out]),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

impl Module for Linear {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
}

impl LayerNorm {
    pub fn new(name: &str, d: usize) -> Self {
        Self {
            gamma: Param::ones(format!("{name}.gamma"), &[1, d]),
            beta: Param::zeros(format!("{name}.beta"), &[1, d]),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gamma = g.param(&self.gamma);
        let beta = g.param(&self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

impl Module for LayerNorm {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.gamma);
        f(&self.beta);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

/// Two-layer perceptron with GELU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(name: &str, d_in: usize, hidden: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            fc1: Linear::new(&format!("{name}.fc1"), d_in, hidden, rng),
            fc2: Linear::new(&format!("{name}.fc2"), hidden, d_out, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

impl Module for Mlp {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.fc1.visit_params(f);
        self.fc2.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.fc1.visit_params_mut(f);
        self.fc2.visit_params_mut(f);
    }
}

/// Learned Q/K/V/O projections around [`Graph::attention`].
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(name: &str, d: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            wq: Linear::new(&format!("{name}.q"), d, d, rng),
            wk: Linear::new(&format!("{name}.k"), d, d, rng),
            wv: Linear::new(&format!("{name}.v"), d, d, rng),
            wo: Linear::new(&format!("{name}.o"), d, d, rng),
            heads,
        }
    }

    /// Self-attention over the rows of `x`.
    pub fn self_attend(&self, g: &mut Graph, x: Var, causal: bool) -> Result<Var> {
        let n = g.shape(x)[0];
        let q = self.wq.forward(g, x)?;
        let k = self.wk.forward(g, x)?;
        let v = self.wv.forward(g, x)?;
        let spec = AttentionSpec {
            groups: 1,
            n_query: n,
            n_key: n,
            heads: self.heads,
            causal,
        };
        let a = g.attention(q, k, v, spec)?;
        self.wo.forward(g, a)
    }
}

impl Module for MultiHeadAttention {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        for l in [&self.wq, &self.wk, &self.wv, &self.wo] {
            l.visit_params(f);
        }
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for l in [&mut self.wq, &mut self.wk, &mut self.wv, &mut self.wo] {
            l.visit_params_mut(f);
        }
    }
}

/// `x + attn(ln1(x))` then `x + mlp(ln2(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
    pub causal: bool,
}

impl TransformerBlock {
    pub fn new<R: Rng + ?Sized>(name: &str, d: usize, heads: usize, causal: bool, rng: &mut R) -> Self {
        Self {
            ln1: LayerNorm::new(&format!("{name}.ln1"), d),
            attn: MultiHeadAttention::new(&format!("{name}.attn"), d, heads, rng),
            ln2: LayerNorm::new(&format!("{name}.ln2"), d),
            mlp: Mlp::new(&format!("{name}.mlp"), d, 4 * d, d, rng),
            causal,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.ln1.forward(g, x)?;
        let h = self.attn.self_attend(g, h, self.causal)?;
        let x = g.add(x, h)?;
        let h = self.ln2.forward(g, x)?;
        let h = self.mlp.forward(g, h)?;
        g.add(x, h)
    }
}

impl Module for TransformerBlock {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.ln1.visit_params(f);
        self.attn.visit_params(f);
        self.ln2.visit_params(f);
        self.mlp.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.ln1.visit_params_mut(f);
        self.attn.visit_params_mut(f);
        self.ln2.visit_params_mut(f);
        self.mlp.visit_params_mut(f);
    }
}

impl<T: Module> Module for Vec<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.iter().for_each(|m| m.visit_params(f));
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.iter_mut().for_each(|m| m.visit_params_mut(f));
    }
}
