//! Full model: frozen encoder, query selection, connector and frozen LM.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::encoder::{EegEncoder, EncoderConfig, TokenEmbedding};
use crate::error::{Error, Result};
use crate::lm::{self, AssembledSequence, CausalLm, LmConfig};
use crate::nlc::{BranchOutput, Nlc, NlcConfig};
use crate::signal::PatchGrid;
use crate::tensor::{Module, Param, Tensor};
use crate::tqs::{RoutingDecision, Tqs, TqsConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub lm: LmConfig,
    pub tqs: TqsConfig,
    pub nlc_heads: usize,
    /// Seed for the trainable connector and query-selection weights.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            lm: LmConfig::default(),
            tqs: TqsConfig::default(),
            nlc_heads: 8,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn nlc_config(&self) -> NlcConfig {
        NlcConfig {
            n_heads: self.nlc_heads,
            ..NlcConfig::new(self.encoder.d_e, self.lm.d_l)
        }
    }

    /// Rows of `F′` for a `channels × times` grid.
    pub fn prefix_rows(&self, channels: usize, times: usize) -> usize {
        Nlc::rows(self.tqs.n_t + 1, self.tqs.n_s + 1, channels, times)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.lm.validate()?;
        self.nlc_config().validate()?;
        if self.tqs.n_t == 0 || self.tqs.n_s == 0 || self.tqs.n_t.max(self.tqs.n_s) > self.tqs.pool_size {
            return Err(Error::Config(format!(
                "query counts n_t={} n_s={} must be in 1..={}",
                self.tqs.n_t, self.tqs.n_s, self.tqs.pool_size
            )));
        }
        Ok(())
    }
}

/// Handles and routing decisions for one sample's forward pass.
pub struct SampleForward {
    pub loss: Var,
    pub logits: Var,
    pub nlc: BranchOutput,
    pub temporal: RoutingDecision,
    pub spatial: RoutingDecision,
}

/// Connector output for inference.
pub struct Prefix {
    pub f_prime: Tensor,
    pub temporal: RoutingDecision,
    pub spatial: RoutingDecision,
    /// Per-channel spatial attention mass of the adaptive queries, summing to 1.
    pub channel_mass: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct NeuroQuery {
    pub config: ModelConfig,
    pub encoder: EegEncoder,
    pub tqs: Tqs,
    pub nlc: Nlc,
    pub lm: CausalLm,
}

impl NeuroQuery {
    /// Encoder and LM come out frozen; query selection and connector trainable.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut tqs = Tqs::new(&config.tqs, config.encoder.d_e, &mut rng)?;
        let mut nlc = Nlc::new(config.nlc_config(), &mut rng)?;
        tqs.set_trainable(true);
        nlc.set_trainable(true);
        Ok(Self {
            encoder: EegEncoder::new(config.encoder.clone())?,
            lm: CausalLm::new(config.lm.clone())?,
            tqs,
            nlc,
            config,
        })
    }

    pub fn encode(&self, grid: &PatchGrid) -> Result<TokenEmbedding> {
        self.encoder.encode(grid)
    }

    fn connector(&self, g: &mut Graph, e: Var, channels: usize, times: usize) -> Result<(BranchOutput, RoutingDecision, RoutingDecision)> {
        let q = self.tqs.forward(g, e)?;
        let out = self.nlc.forward(g, e, channels, times, q.q_t, q.q_s)?;
        Ok((out, q.temporal, q.spatial))
    }

    /// Instruction loss for one sample from a token matrix already in `g`.
    pub fn forward_tokens(
        &self,
        g: &mut Graph,
        e: Var,
        channels: usize,
        times: usize,
        prompt: &str,
        answer: &str,
    ) -> Result<SampleForward> {
        let (nlc, temporal, spatial) = self.connector(g, e, channels, times)?;
        let rows = g.shape(nlc.f_prime)[0];
        let seq = AssembledSequence::new(rows, prompt, answer, self.lm.config.max_seq)?;
        let out = self.lm.forward_loss(g, nlc.f_prime, &seq)?;
        Ok(SampleForward {
            loss: out.loss,
            logits: out.logits,
            nlc,
            temporal,
            spatial,
        })
    }

    /// Loss from a cached token matrix.
    pub fn forward_cached(&self, g: &mut Graph, e: &TokenEmbedding, prompt: &str, answer: &str) -> Result<SampleForward> {
        let ev = g.constant(e.tokens.clone());
        self.forward_tokens(g, ev, e.channels, e.times, prompt, answer)
    }

    /// Loss with the encoder inside the graph.
    pub fn forward_grid(&self, g: &mut Graph, grid: &PatchGrid, prompt: &str, answer: &str) -> Result<SampleForward> {
        let e = self.encoder.forward(g, grid)?;
        self.forward_tokens(g, e, grid.channels, grid.times, prompt, answer)
    }

    pub fn prefix(&self, e: &TokenEmbedding) -> Result<Prefix> {
        let mut g = Graph::new();
        let ev = g.constant(e.tokens.clone());
        let (out, temporal, spatial) = self.connector(&mut g, ev, e.channels, e.times)?;
        let channel_mass = adaptive_channel_mass(&g, &out, self.config.tqs.n_s)?;
        Ok(Prefix {
            f_prime: g.value(out.f_prime).clone(),
            temporal,
            spatial,
            channel_mass,
        })
    }

    /// Greedy answer text for `prompt` given the connector prefix.
    pub fn decode(&self, prefix: &Tensor, prompt: &str, max_new: usize) -> Result<String> {
        let ids = self.lm.greedy_decode(prefix, &lm::tokenize(prompt), max_new)?;
        Ok(lm::detokenize(&ids))
    }

    pub fn trainable_names(&self) -> Vec<String> {
        let mut v = Vec::new();
        self.visit_params(&mut |p| {
            if p.value.requires_grad() {
                v.push(p.name.clone());
            }
        });
        v
    }
}

/// Mean spatial attention mass per channel over heads, adaptive queries and
/// time groups, renormalized to sum to 1.
pub fn adaptive_channel_mass(g: &Graph, out: &BranchOutput, n_adaptive: usize) -> Result<Vec<f64>> {
    let (spec, probs) = g
        .attention_probs(out.spatial_attn)
        .ok_or_else(|| Error::Contract("spatial attention probabilities unavailable".into()))?;
    let (groups, heads, nq, nk) = (spec.groups, spec.heads, spec.n_query, spec.n_key);
    let mut mass = vec![0.0; nk];
    for gi in 0..groups {
        for h in 0..heads {
            for i in 0..n_adaptive.min(nq) {
                let base = ((gi * heads + h) * nq + i) * nk;
                for (m, p) in mass.iter_mut().zip(&probs[base..base + nk]) {
                    *m += p;
                }
            }
        }
    }
    let total: f64 = mass.iter().sum();
    if total > 0.0 {
        mass.iter_mut().for_each(|m| *m /= total);
    }
    Ok(mass)
}

impl Module for NeuroQuery {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.encoder.visit_params(f);
        self.tqs.visit_params(f);
        self.nlc.visit_params(f);
        self.lm.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.encoder.visit_params_mut(f);
        self.tqs.visit_params_mut(f);
        self.nlc.visit_params_mut(f);
        self.lm.visit_params_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                d_e: 8,
                n_layers: 1,
                n_heads: 2,
                patch_len: 4,
                max_channels: 4,
                max_times: 4,
                ..Default::default()
            },
            lm: LmConfig {
                d_l: 8,
                n_layers: 1,
                n_heads: 2,
                max_seq: 64,
                ..Default::default()
            },
            tqs: TqsConfig {
                pool_size: 4,
                ..Default::default()
            },
            nlc_heads: 2,
            seed: 1,
        }
    }

    fn grid(c: usize, t: usize) -> PatchGrid {
        PatchGrid {
            channels: c,
            times: t,
            patch_len: 4,
            data: (0..c * t * 4).map(|i| (i as f64 * 0.37).sin()).collect(),
        }
    }

    #[test]
    fn only_connector_is_trainable() {
        let m = NeuroQuery::new(tiny()).unwrap();
        let names = m.trainable_names();
        assert!(!names.is_empty());
        assert!(names.iter().all(|n| n.starts_with("nlc.") || n.starts_with("tqs.")), "{names:?}");
    }

    #[test]
    fn cached_and_in_graph_losses_agree() {
        let m = NeuroQuery::new(tiny()).unwrap();
        let gr = grid(3, 2);
        let e = m.encode(&gr).unwrap();
        let mut g1 = Graph::new();
        let a = m.forward_cached(&mut g1, &e, "hi", "ok").unwrap();
        let mut g2 = Graph::new();
        let b = m.forward_grid(&mut g2, &gr, "hi", "ok").unwrap();
        assert_eq!(g1.scalar(a.loss), g2.scalar(b.loss));
        assert_eq!(g1.shape(a.nlc.f_prime)[0], m.config.prefix_rows(3, 2));
    }

    #[test]
    fn channel_mass_is_simplex() {
        let m = NeuroQuery::new(tiny()).unwrap();
        let p = m.prefix(&m.encode(&grid(4, 3)).unwrap()).unwrap();
        assert_eq!(p.channel_mass.len(), 4);
        assert!((p.channel_mass.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.channel_mass.iter().all(|&x| x >= 0.0));
    }
}
