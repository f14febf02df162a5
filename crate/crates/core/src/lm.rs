//! Miniature frozen causal LM over a byte vocabulary.
//!
//! A sequence is `[F′ rows; SEP; prompt bytes; answer bytes]`. The loss is the
//! mean negative log-likelihood of the answer bytes (terminated by EOS), so
//! gradients reach the prefix rows and nothing else once the LM is frozen.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, TransformerBlock, INIT_STD};
use crate::optim::{AdamWConfig, OptimizerState};
use crate::tensor::{Module, Param, Tensor};

pub const VOCAB: usize = 259;
pub const SEP: usize = 256;
pub const BOS: usize = 257;
pub const EOS: usize = 258;

pub fn tokenize(text: &str) -> Vec<usize> {
    text.bytes().map(usize::from).collect()
}

/// Bytes back to text; special ids become `<SEP>`, `<BOS>`, `<EOS>` and
/// invalid UTF-8 is replaced lossily.
pub fn detokenize(ids: &[usize]) -> String {
    let mut out = String::new();
    let mut bytes = Vec::new();
    let flush = |bytes: &mut Vec<u8>, out: &mut String| {
        out.push_str(&String::from_utf8_lossy(bytes));
        bytes.clear();
    };
    for &id in ids {
        match id {
            0..=255 => bytes.push(id as u8),
            _ => {
                flush(&mut bytes, &mut out);
                out.push_str(match id {
                    SEP => "<SEP>",
                    BOS => "<BOS>",
                    EOS => "<EOS>",
                    _ => "<UNK>",
                });
            }
        }
    }
    flush(&mut bytes, &mut out);
    out
}

/// Case-insensitive exact match after trimming.
pub fn label_match<'a>(decoded: &str, labels: &'a [String]) -> Option<&'a str> {
    let d = decoded.trim().to_lowercase();
    labels.iter().find(|l| l.trim().to_lowercase() == d).map(String::as_str)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab: usize,
    pub d_l: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            vocab: VOCAB,
            d_l: 64,
            n_layers: 2,
            n_heads: 4,
            max_seq: 512,
            seed: 0,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab != VOCAB {
            return Err(Error::Config(format!("vocabulary must be {VOCAB}, got {}", self.vocab)));
        }
        if self.n_heads == 0 || !self.d_l.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "LM width {} not divisible by {} heads",
                self.d_l, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Token layout of one training sequence; the prefix rows themselves live in the graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssembledSequence {
    pub prefix_rows: usize,
    pub prompt_ids: Vec<usize>,
    /// Answer bytes followed by EOS.
    pub answer_ids: Vec<usize>,
}

impl AssembledSequence {
    pub fn new(prefix_rows: usize, prompt: &str, answer: &str, max_seq: usize) -> Result<Self> {
        let mut answer_ids = tokenize(answer);
        answer_ids.push(EOS);
        let seq = Self {
            prefix_rows,
            prompt_ids: tokenize(prompt),
            answer_ids,
        };
        if seq.len() > max_seq {
            return Err(Error::Truncation {
                len: seq.len(),
                max: max_seq,
            });
        }
        Ok(seq)
    }

    /// Prefix + SEP + prompt + answer (with EOS).
    pub fn len(&self) -> usize {
        self.prefix_rows + 1 + self.prompt_ids.len() + self.answer_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Text ids fed as input: SEP, prompt, and the answer without its final token.
    pub fn input_ids(&self) -> Vec<usize> {
        let mut ids = Vec::with_capacity(self.len());
        ids.push(SEP);
        ids.extend(&self.prompt_ids);
        ids.extend(&self.answer_ids[..self.answer_ids.len() - 1]);
        ids
    }

    /// Input positions whose output predicts each answer token.
    pub fn answer_positions(&self) -> Vec<usize> {
        let start = self.prefix_rows + self.prompt_ids.len();
        (start..start + self.answer_ids.len()).collect()
    }

    /// Per-input-position mask: true where the next token is an answer token.
    pub fn loss_mask(&self) -> Vec<bool> {
        let n = self.len() - 1;
        let pos = self.answer_positions();
        (0..n).map(|i| pos.contains(&i)).collect()
    }
}

pub struct LmOutput {
    pub loss: Var,
    /// `answer_len × VOCAB`.
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct CausalLm {
    pub config: LmConfig,
    pub tok_emb: Param,
    pub pos_emb: Param,
    pub blocks: Vec<TransformerBlock>,
    pub ln_f: LayerNorm,
    pub head: Linear,
}

impl CausalLm {
    /// Seeded initialisation; all weights start frozen.
    pub fn new(config: LmConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_l;
        let mut lm = Self {
            tok_emb: Param::randn("lm.tok_emb", &[VOCAB, d], INIT_STD, &mut rng),
            pos_emb: Param::randn("lm.pos_emb", &[config.max_seq, d], INIT_STD, &mut rng),
            blocks: (0..config.n_layers)
                .map(|i| TransformerBlock::new(&format!("lm.block{i}"), d, config.n_heads, true, &mut rng))
                .collect(),
            ln_f: LayerNorm::new("lm.ln_f", d),
            head: Linear::new("lm.head", d, VOCAB, &mut rng),
            config,
        };
        lm.set_trainable(false);
        Ok(lm)
    }

    /// Hidden states for `[prefix; embed(ids)]`.
    fn hidden(&self, g: &mut Graph, prefix: Var, ids: &[usize]) -> Result<Var> {
        let p = g.shape(prefix)[0];
        if g.shape(prefix)[1] != self.config.d_l {
            return Err(Error::dim("lm prefix", g.shape(prefix), &[p, self.config.d_l]));
        }
        let len = p + ids.len();
        if len > self.config.max_seq {
            return Err(Error::Truncation {
                len,
                max: self.config.max_seq,
            });
        }
        let table = g.param(&self.tok_emb);
        let text = g.gather_rows(table, ids)?;
        let x = g.concat_rows(&[prefix, text])?;
        let pos = g.param(&self.pos_emb);
        let positions: Vec<usize> = (0..len).collect();
        let pos = g.gather_rows(pos, &positions)?;
        let mut h = g.add(x, pos)?;
        for b in &self.blocks {
            h = b.forward(g, h)?;
        }
        self.ln_f.forward(g, h)
    }

    /// Mean answer-token cross-entropy.
    pub fn forward_loss(&self, g: &mut Graph, prefix: Var, seq: &AssembledSequence) -> Result<LmOutput> {
        if g.shape(prefix)[0] != seq.prefix_rows {
            return Err(Error::Shape(format!(
                "sequence expects {} prefix rows, got {}",
                seq.prefix_rows,
                g.shape(prefix)[0]
            )));
        }
        if seq.len() > self.config.max_seq {
            return Err(Error::Truncation {
                len: seq.len(),
                max: self.config.max_seq,
            });
        }
        let h = self.hidden(g, prefix, &seq.input_ids())?;
        let rows = g.gather_rows(h, &seq.answer_positions())?;
        let logits = self.head.forward(g, rows)?;
        let mask = vec![true; seq.answer_ids.len()];
        let loss = g.cross_entropy(logits, &seq.answer_ids, &mask)?;
        Ok(LmOutput { loss, logits })
    }

    /// Logits for the token following `[prefix; ids]`.
    pub fn next_logits(&self, prefix: &Tensor, ids: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = g.constant(prefix.clone());
        let h = self.hidden(&mut g, p, ids)?;
        let last = g.shape(h)[0] - 1;
        let row = g.gather_rows(h, &[last])?;
        let logits = self.head.forward(&mut g, row)?;
        Ok(g.value(logits).data().to_vec())
    }

    /// Argmax decoding after `[prefix; SEP; prompt]`, lower id on ties.
    /// Stops at EOS (not returned) or after `max_new` tokens.
    pub fn greedy_decode(&self, prefix: &Tensor, prompt_ids: &[usize], max_new: usize) -> Result<Vec<usize>> {
        let mut ids = Vec::with_capacity(1 + prompt_ids.len() + max_new);
        ids.push(SEP);
        ids.extend(prompt_ids);
        let mut out = Vec::new();
        for _ in 0..max_new {
            let logits = self.next_logits(prefix, &ids)?;
            let mut best = 0;
            for (i, v) in logits.iter().enumerate() {
                if *v > logits[best] {
                    best = i;
                }
            }
            if best == EOS {
                break;
            }
            out.push(best);
            ids.push(best);
        }
        Ok(out)
    }

    /// Pre-trains every LM weight on `(prompt, label)` pairs whose prefix
    /// rows carry a fixed random code for the label plus noise, then
    /// freezes the model. Returns the loss per step.
    pub fn warm_up(&mut self, examples: &[(String, String)], prefix_rows: usize, cfg: &WarmupConfig) -> Result<Vec<f64>> {
        if cfg.steps == 0 {
            return Ok(Vec::new());
        }
        if examples.is_empty() {
            return Err(Error::Config("warm-up needs at least one example".into()));
        }
        self.set_trainable(true);
        let mut opt = OptimizerState::new(AdamWConfig::new(cfg.lr, 0.0, cfg.warmup_ratio, cfg.steps as u64)?);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut losses = Vec::with_capacity(cfg.steps);
        let result = (|| -> Result<()> {
            for _ in 0..cfg.steps {
                let mut total = 0.0;
                for _ in 0..cfg.batch {
                    let (prompt, label) = &examples[rng.random_range(0..examples.len())];
                    let code = label_code(label, self.config.d_l, cfg.seed);
                    let mut rows = Vec::with_capacity(prefix_rows * self.config.d_l);
                    for _ in 0..prefix_rows {
                        for c in &code {
                            let n: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
                            rows.push(cfg.code_scale * c + cfg.noise_scale * n);
                        }
                    }
                    let seq = AssembledSequence::new(prefix_rows, prompt, label, self.config.max_seq)?;
                    let mut g = Graph::new();
                    let p = g.constant(Tensor::matrix(prefix_rows, self.config.d_l, rows)?);
                    let out = self.forward_loss(&mut g, p, &seq)?;
                    let loss = g.scale(out.loss, 1.0 / cfg.batch as f64);
                    total += g.scalar(loss);
                    g.backward(loss)?.apply_to(self)?;
                }
                opt.step(self)?;
                losses.push(total);
            }
            Ok(())
        })();
        self.zero_grad();
        self.set_trainable(false);
        result.map(|_| losses)
    }
}

impl Module for CausalLm {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.tok_emb);
        f(&self.pos_emb);
        self.blocks.visit_params(f);
        self.ln_f.visit_params(f);
        self.head.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.tok_emb);
        f(&mut self.pos_emb);
        self.blocks.visit_params_mut(f);
        self.ln_f.visit_params_mut(f);
        self.head.visit_params_mut(f);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarmupConfig {
    pub steps: usize,
    pub lr: f64,
    pub warmup_ratio: f64,
    pub batch: usize,
    /// Scale of the per-label code vector added to every prefix row.
    pub code_scale: f64,
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            lr: 1e-3,
            warmup_ratio: 0.03,
            batch: 8,
            code_scale: 1.0,
            noise_scale: 0.5,
            seed: 0,
        }
    }
}

/// Unit-variance Gaussian code for a label, fixed by `(label, seed)`.
pub fn label_code(label: &str, d: usize, seed: u64) -> Vec<f64> {
    // FNV-1a over the label bytes, mixed with the seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(h);
    (0..d)
        .map(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng))
        .collect()
}

/// Per-answer-token `-log p` values read off `logits`.
pub fn per_position_losses(logits: &Tensor, answer_ids: &[usize]) -> Vec<f64> {
    (0..answer_ids.len())
        .map(|i| {
            let row = logits.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            lse - row[answer_ids[i]]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use proptest::prelude::*;

    fn small(seed: u64) -> CausalLm {
        CausalLm::new(LmConfig {
            d_l: 8,
            n_layers: 1,
            n_heads: 2,
            max_seq: 64,
            seed,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn tokenizer_basics() {
        assert_eq!(tokenize("A"), vec![65]);
        assert!(tokenize("").is_empty());
        assert_eq!(detokenize(&[104, 105, SEP, EOS]), "hi<SEP><EOS>");
    }

    proptest! {
        #[test]
        fn tokenizer_round_trip(s in "\\PC*") {
            prop_assert_eq!(detokenize(&tokenize(&s)), s);
        }
    }

    #[test]
    fn label_matching() {
        let set = vec!["Left hand".to_string(), "Right hand".to_string()];
        assert_eq!(label_match(" Left hand ", &set), Some("Left hand"));
        assert_eq!(label_match("left HAND", &set), Some("Left hand"));
        assert_eq!(label_match("lefthand", &set), None);
    }

    #[test]
    fn layout() {
        let s = AssembledSequence::new(3, "ab", "x", 64).unwrap();
        assert_eq!(s.len(), 3 + 1 + 2 + 2);
        assert_eq!(s.input_ids(), vec![SEP, 97, 98, 120]);
        assert_eq!(s.answer_positions(), vec![5, 6]);
        assert_eq!(s.loss_mask(), vec![false, false, false, false, false, true, true]);
        assert!(matches!(
            AssembledSequence::new(60, "abcd", "xyz", 64),
            Err(Error::Truncation { len: 69, max: 64 })
        ));
    }

    #[test]
    fn untrained_loss_in_sanity_band() {
        let lm = small(1);
        let mut g = Graph::new();
        let p = g.constant(Tensor::randn(&[4, 8], 0.1, &mut ChaCha8Rng::seed_from_u64(2)));
        let s = AssembledSequence::new(4, "prompt", "label", 64).unwrap();
        let out = lm.forward_loss(&mut g, p, &s).unwrap();
        let l = g.scalar(out.loss);
        let lnv = (VOCAB as f64).ln();
        assert!(l > 0.5 * lnv && l < 2.0 * lnv, "{l}");
    }

    #[test]
    fn loss_is_mean_of_position_terms() {
        // Oracle: per-position -log p recomputed from the logits by hand.
        let lm = small(3);
        let mut g = Graph::new();
        let p = g.constant(Tensor::randn(&[2, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(4)));
        let s = AssembledSequence::new(2, "q", "abc", 64).unwrap();
        let out = lm.forward_loss(&mut g, p, &s).unwrap();
        let terms = per_position_losses(g.value(out.logits), &s.answer_ids);
        let mean = terms.iter().sum::<f64>() / terms.len() as f64;
        assert!((mean - g.scalar(out.loss)).abs() < 1e-12);
    }

    #[test]
    fn prefix_gradient_and_frozen_weights() {
        let lm = small(5);
        let prefix = Tensor::randn(&[3, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(6));
        let s = AssembledSequence::new(3, "hi", "ok", 64).unwrap();
        let err = grad_check(|g, v| Ok(lm.forward_loss(g, v[0], &s)?.loss), std::slice::from_ref(&prefix)).unwrap();
        assert!(err < 1e-4, "{err}");
        let mut g = Graph::new();
        let p = g.leaf(&prefix.with_requires_grad(true));
        let out = lm.forward_loss(&mut g, p, &s).unwrap();
        let grads = g.backward(out.loss).unwrap();
        assert!(grads.wrt(p).is_some());
        let mut lm2 = lm.clone();
        grads.apply_to(&mut lm2).unwrap();
        assert!(!lm2.has_any_grad());
    }

    #[test]
    fn forced_argmax_decoding() {
        let mut lm = small(7);
        lm.head.weight.value = Tensor::zeros(&[8, VOCAB]);
        let mut bias = vec![0.0; VOCAB];
        bias[7] = 5.0;
        lm.head.bias.value = Tensor::matrix(1, VOCAB, bias).unwrap();
        let prefix = Tensor::zeros(&[2, 8]);
        assert_eq!(lm.greedy_decode(&prefix, &[1, 2], 6).unwrap(), vec![7; 6]);
    }

    #[test]
    fn decoding_is_deterministic_and_stops_at_eos() {
        let mut lm = small(8);
        let prefix = Tensor::randn(&[2, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(9));
        let a = lm.greedy_decode(&prefix, &[5], 5).unwrap();
        assert_eq!(a, lm.greedy_decode(&prefix, &[5], 5).unwrap());
        lm.head.weight.value = Tensor::zeros(&[8, VOCAB]);
        let mut bias = vec![0.0; VOCAB];
        bias[EOS] = 1.0;
        lm.head.bias.value = Tensor::matrix(1, VOCAB, bias).unwrap();
        assert!(lm.greedy_decode(&prefix, &[5], 5).unwrap().is_empty());
    }

    #[test]
    fn causal_positions_ignore_later_answer_tokens() {
        let lm = small(10);
        let prefix = Tensor::randn(&[3, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(11));
        let eval = |answer: &str| {
            let s = AssembledSequence::new(3, "pp", answer, 64).unwrap();
            let mut g = Graph::new();
            let p = g.constant(prefix.clone());
            let out = lm.forward_loss(&mut g, p, &s).unwrap();
            (g.value(out.logits).clone(), per_position_losses(g.value(out.logits), &s.answer_ids))
        };
        let (la, a) = eval("abcdef");
        let (lb, b) = eval("abcXYZ");
        // rows 0..=3 are computed from identical inputs; row 3's target differs
        for i in 0..4 {
            assert_eq!(la.row(i), lb.row(i));
        }
        assert_eq!(a[..3], b[..3]);
        assert_ne!(la.row(4), lb.row(4));
    }

    #[test]
    fn warm_up_learns_codes_and_refreezes() {
        let mut lm = small(12);
        let before = lm.fingerprint();
        let ex = vec![("p".to_string(), "a".to_string()), ("p".to_string(), "b".to_string())];
        let cfg = WarmupConfig {
            steps: 150,
            lr: 1e-2,
            ..Default::default()
        };
        let losses = lm.warm_up(&ex, 2, &cfg).unwrap();
        assert_ne!(before, lm.fingerprint());
        assert!(losses.last().unwrap() < &0.3, "{:?}", losses.last());
        let mut trainable = false;
        lm.visit_params(&mut |p| trainable |= p.value.requires_grad());
        assert!(!trainable);
        for l in ["a", "b"] {
            let code = label_code(l, 8, 0);
            let rows: Vec<f64> = (0..2).flat_map(|_| code.clone()).collect();
            let out = lm.greedy_decode(&Tensor::matrix(2, 8, rows).unwrap(), &tokenize("p"), 4).unwrap();
            assert_eq!(detokenize(&out), l);
        }
    }
}
