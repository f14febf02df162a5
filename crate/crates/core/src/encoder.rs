//! Frozen, seeded EEG patch encoder.
//!
//! Each patch is embedded from its raw samples and its DFT magnitude
//! spectrum, tagged with channel and time embeddings, prefixed by a class
//! token and passed through pre-norm transformer blocks. Every weight is drawn
//! once from the seed and never trained.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, TransformerBlock, INIT_STD};
use crate::signal::PatchGrid;
use crate::tensor::{Module, Param, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_e: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub patch_len: usize,
    pub seed: u64,
    /// Sizes of the channel and time embedding tables.
    pub max_channels: usize,
    pub max_times: usize,
    /// When false the channel/time embeddings are zero.
    pub positional: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_e: 64,
            n_layers: 2,
            n_heads: 4,
            patch_len: 200,
            seed: 0,
            max_channels: 64,
            max_times: 64,
            positional: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_e == 0 || self.n_heads == 0 || !self.d_e.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "encoder width {} must be a positive multiple of {} heads",
                self.d_e, self.n_heads
            )));
        }
        if self.patch_len == 0 {
            return Err(Error::Config("patch length must be positive".into()));
        }
        Ok(())
    }

    pub fn n_freq(&self) -> usize {
        self.patch_len / 2 + 1
    }
}

/// Encoder output `E`: class token at row 0, then patch `(c, τ)` at row `1 + c·T + τ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenEmbedding {
    pub tokens: Tensor,
    pub channels: usize,
    pub times: usize,
}

impl TokenEmbedding {
    pub fn new(tokens: Tensor, channels: usize, times: usize) -> Result<Self> {
        if tokens.shape().len() != 2 || tokens.rows() != channels * times + 1 {
            return Err(Error::Shape(format!(
                "token matrix {:?} does not match C={channels}, T={times}",
                tokens.shape()
            )));
        }
        Ok(Self { tokens, channels, times })
    }

    pub fn d_e(&self) -> usize {
        self.tokens.cols()
    }

    pub fn token_index(&self, c: usize, tau: usize) -> usize {
        token_index(self.times, c, tau)
    }

    pub fn cls(&self) -> &[f64] {
        self.tokens.row(0)
    }
}

/// Row of patch `(c, τ)` in a token matrix with `times` patches per channel.
pub fn token_index(times: usize, c: usize, tau: usize) -> usize {
    1 + c * times + tau
}

/// Inverse of [`token_index`]; `None` for the class token.
pub fn token_position(times: usize, index: usize) -> Option<(usize, usize)> {
    index.checked_sub(1).map(|i| (i / times, i % times))
}

#[derive(Clone, Debug)]
pub struct EegEncoder {
    pub config: EncoderConfig,
    pub time_proj: Linear,
    /// Spectral embedding; the time projection carries the shared bias.
    pub freq_proj: Param,
    pub cls: Param,
    pub channel_emb: Param,
    pub time_emb: Param,
    pub blocks: Vec<TransformerBlock>,
    pub ln_f: LayerNorm,
    dft_cos: Tensor,
    dft_sin: Tensor,
}

impl EegEncoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_e;
        let t = config.patch_len;
        let nf = config.n_freq();
        let time_proj = Linear::new("encoder.time_proj", t, d, &mut rng);
        let freq_proj = Param::randn("encoder.freq_proj.weight", &[nf, d], INIT_STD, &mut rng);
        let cls = Param::randn("encoder.cls", &[1, d], INIT_STD, &mut rng);
        let pos_std = if config.positional { INIT_STD } else { 0.0 };
        let channel_emb = Param::randn("encoder.channel_emb", &[config.max_channels, d], pos_std, &mut rng);
        let time_emb = Param::randn("encoder.time_emb", &[config.max_times, d], pos_std, &mut rng);
        let blocks = (0..config.n_layers)
            .map(|i| TransformerBlock::new(&format!("encoder.block{i}"), d, config.n_heads, false, &mut rng))
            .collect();
        let ln_f = LayerNorm::new("encoder.ln_f", d);

        let norm = 1.0 / (t as f64).sqrt();
        let mut cos = vec![0.0; t * nf];
        let mut sin = vec![0.0; t * nf];
        for n in 0..t {
            for k in 0..nf {
                let ph = 2.0 * std::f64::consts::PI * (n * k) as f64 / t as f64;
                cos[n * nf + k] = ph.cos() * norm;
                sin[n * nf + k] = ph.sin() * norm;
            }
        }
        let mut enc = Self {
            config,
            time_proj,
            freq_proj,
            cls,
            channel_emb,
            time_emb,
            blocks,
            ln_f,
            dft_cos: Tensor::matrix(t, nf, cos)?,
            dft_sin: Tensor::matrix(t, nf, sin)?,
        };
        enc.set_trainable(false);
        Ok(enc)
    }

    fn check_grid(&self, grid: &PatchGrid) -> Result<()> {
        if grid.patch_len != self.config.patch_len {
            return Err(Error::Shape(format!(
                "patch length {} does not match encoder patch length {}",
                grid.patch_len, self.config.patch_len
            )));
        }
        if grid.channels == 0 || grid.times == 0 {
            return Err(Error::EmptySample("empty patch grid".into()));
        }
        if grid.channels > self.config.max_channels || grid.times > self.config.max_times {
            return Err(Error::Shape(format!(
                "grid {}×{} exceeds embedding tables {}×{}",
                grid.channels, grid.times, self.config.max_channels, self.config.max_times
            )));
        }
        Ok(())
    }

    /// Builds `E` inside `g`; differentiable with respect to the encoder
    /// weights when they are marked trainable.
    pub fn forward(&self, g: &mut Graph, grid: &PatchGrid) -> Result<Var> {
        self.check_grid(grid)?;
        let (c, t_n) = (grid.channels, grid.times);
        let x = g.constant(Tensor::matrix(c * t_n, grid.patch_len, grid.data.clone())?);
        let time = self.time_proj.forward(g, x)?;
        let cos = g.constant(self.dft_cos.clone());
        let sin = g.constant(self.dft_sin.clone());
        let re = g.matmul(x, cos)?;
        let im = g.matmul(x, sin)?;
        let mag = g.magnitude(re, im)?;
        let w_f = g.param(&self.freq_proj);
        let freq = g.matmul(mag, w_f)?;
        let emb = g.add(time, freq)?;
        let chan_idx: Vec<usize> = (0..c * t_n).map(|i| i / t_n).collect();
        let time_idx: Vec<usize> = (0..c * t_n).map(|i| i % t_n).collect();
        let ce = g.param(&self.channel_emb);
        let ce = g.gather_rows(ce, &chan_idx)?;
        let te = g.param(&self.time_emb);
        let te = g.gather_rows(te, &time_idx)?;
        let emb = g.add(emb, ce)?;
        let emb = g.add(emb, te)?;
        let cls = g.param(&self.cls);
        let mut h = g.concat_rows(&[cls, emb])?;
        for block in &self.blocks {
            h = block.forward(g, h)?;
        }
        self.ln_f.forward(g, h)
    }

    pub fn encode(&self, grid: &PatchGrid) -> Result<TokenEmbedding> {
        let mut g = Graph::new();
        let e = self.forward(&mut g, grid)?;
        TokenEmbedding::new(g.value(e).clone(), grid.channels, grid.times)
    }

    pub fn freeze_fingerprint(&self) -> String {
        self.fingerprint()
    }
}

impl Module for EegEncoder {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.time_proj.visit_params(f);
        f(&self.freq_proj);
        f(&self.cls);
        f(&self.channel_emb);
        f(&self.time_emb);
        self.blocks.visit_params(f);
        self.ln_f.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.time_proj.visit_params_mut(f);
        f(&mut self.freq_proj);
        f(&mut self.cls);
        f(&mut self.channel_emb);
        f(&mut self.time_emb);
        self.blocks.visit_params_mut(f);
        self.ln_f.visit_params_mut(f);
    }
}
