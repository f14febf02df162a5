//! Dual-branch cross-attention connector from EEG tokens to LM embeddings.
//!
//! The temporal branch lets each query attend, channel by channel, over that
//! channel's `T` time tokens; the spatial branch lets each query attend, time
//! step by time step, over the `C` channel tokens. Both outputs are
//! concatenated with the raw class token and projected to the LM width.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{AttentionSpec, Graph, Var};
use crate::encoder::token_index;
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, Mlp};
use crate::tensor::{Module, Param};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NlcConfig {
    pub d_e: usize,
    pub d_l: usize,
    pub n_heads: usize,
    pub mlp_hidden: usize,
}

impl NlcConfig {
    pub fn new(d_e: usize, d_l: usize) -> Self {
        Self {
            d_e,
            d_l,
            n_heads: 8,
            mlp_hidden: 4 * d_e,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.d_e.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "connector width {} must be divisible by {} heads",
                self.d_e, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Learned projections of one grouped cross-attention layer. Biases start at zero.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

/// Output of [`cross_attend`]: rows are query-major (`q·G + g`).
pub struct CrossAttendOutput {
    pub out: Var,
    /// The raw attention node, for reading probabilities `[g][h][q][key]`.
    pub attn: Var,
}

impl CrossAttention {
    pub fn new<R: Rng + ?Sized>(name: &str, d: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            wq: Linear::new(&format!("{name}.q"), d, d, rng),
            wk: Linear::new(&format!("{name}.k"), d, d, rng),
            wv: Linear::new(&format!("{name}.v"), d, d, rng),
            wo: Linear::new(&format!("{name}.o"), d, d, rng),
            heads,
        }
    }
}

impl Module for CrossAttention {
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

/// `q` (`n_q × D`) attends independently within each of `groups` blocks of
/// `kv` (`(G·L) × D`, group-major). Parameters are shared across groups.
pub fn cross_attend(g: &mut Graph, q: Var, kv: Var, groups: usize, params: &CrossAttention) -> Result<CrossAttendOutput> {
    let (n_q, d) = (g.shape(q)[0], g.shape(q)[1]);
    let (rows, dk) = (g.shape(kv)[0], g.shape(kv)[1]);
    if d != dk || d != params.wq.d_in() {
        return Err(Error::dim("cross_attend", g.shape(q), g.shape(kv)));
    }
    if groups == 0 || rows % groups != 0 {
        return Err(Error::Shape(format!("{rows} key rows cannot form {groups} groups")));
    }
    let len = rows / groups;
    let qp = params.wq.forward(g, q)?;
    let broadcast: Vec<usize> = (0..groups * n_q).map(|i| i % n_q).collect();
    let qp = g.gather_rows(qp, &broadcast)?;
    let k = params.wk.forward(g, kv)?;
    let v = params.wv.forward(g, kv)?;
    let spec = AttentionSpec {
        groups,
        n_query: n_q,
        n_key: len,
        heads: params.heads,
        causal: false,
    };
    let attn = g.attention(qp, k, v, spec)?;
    let o = params.wo.forward(g, attn)?;
    let query_major: Vec<usize> = (0..n_q * groups).map(|i| (i % groups) * n_q + i / groups).collect();
    let out = g.gather_rows(o, &query_major)?;
    Ok(CrossAttendOutput { out, attn })
}

/// `H = cross_attend(LN(Q), LN(KV))`, then `H + MLP(LN(H))`.
#[derive(Clone, Debug)]
pub struct Branch {
    pub ln_q: LayerNorm,
    pub ln_kv: LayerNorm,
    pub attn: CrossAttention,
    pub ln_mlp: LayerNorm,
    pub mlp: Mlp,
}

impl Branch {
    pub fn new<R: Rng + ?Sized>(name: &str, cfg: &NlcConfig, rng: &mut R) -> Self {
        Self {
            ln_q: LayerNorm::new(&format!("{name}.ln_q"), cfg.d_e),
            ln_kv: LayerNorm::new(&format!("{name}.ln_kv"), cfg.d_e),
            attn: CrossAttention::new(&format!("{name}.attn"), cfg.d_e, cfg.n_heads, rng),
            ln_mlp: LayerNorm::new(&format!("{name}.ln_mlp"), cfg.d_e),
            mlp: Mlp::new(&format!("{name}.mlp"), cfg.d_e, cfg.mlp_hidden, cfg.d_e, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, q: Var, kv: Var, groups: usize) -> Result<CrossAttendOutput> {
        let qn = self.ln_q.forward(g, q)?;
        let kvn = self.ln_kv.forward(g, kv)?;
        let CrossAttendOutput { out: h, attn } = cross_attend(g, qn, kvn, groups, &self.attn)?;
        let m = self.ln_mlp.forward(g, h)?;
        let m = self.mlp.forward(g, m)?;
        let out = g.add(h, m)?;
        Ok(CrossAttendOutput { out, attn })
    }
}

impl Module for Branch {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.ln_q.visit_params(f);
        self.ln_kv.visit_params(f);
        self.attn.visit_params(f);
        self.ln_mlp.visit_params(f);
        self.mlp.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.ln_q.visit_params_mut(f);
        self.ln_kv.visit_params_mut(f);
        self.attn.visit_params_mut(f);
        self.ln_mlp.visit_params_mut(f);
        self.mlp.visit_params_mut(f);
    }
}

/// Graph handles for one connector pass.
///
/// `f` rows are `[F_t (query, channel); F_s (query, time); F_cls]`.
#[derive(Clone, Copy, Debug)]
pub struct BranchOutput {
    pub f_t: Var,
    pub f_s: Var,
    pub f_cls: Var,
    pub f: Var,
    pub f_prime: Var,
    pub temporal_attn: Var,
    pub spatial_attn: Var,
    pub n_qt: usize,
    pub n_qs: usize,
    pub channels: usize,
    pub times: usize,
}

#[derive(Clone, Debug)]
pub struct Nlc {
    pub config: NlcConfig,
    pub temporal: Branch,
    pub spatial: Branch,
    pub proj: Linear,
}

impl Nlc {
    pub fn new<R: Rng + ?Sized>(config: NlcConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            temporal: Branch::new("nlc.temporal", &config, rng),
            spatial: Branch::new("nlc.spatial", &config, rng),
            proj: Linear::new("nlc.proj", config.d_e, config.d_l, rng),
            config,
        })
    }

    /// Expected row count of `F` and `F′`.
    pub fn rows(n_qt: usize, n_qs: usize, channels: usize, times: usize) -> usize {
        n_qt * channels + n_qs * times + 1
    }

    /// `e` is the `(C·T + 1) × D_e` token matrix.
    pub fn forward(&self, g: &mut Graph, e: Var, channels: usize, times: usize, q_t: Var, q_s: Var) -> Result<BranchOutput> {
        let (n_qt, n_qs) = (g.shape(q_t)[0], g.shape(q_s)[0]);
        if n_qt == 0 || n_qs == 0 {
            return Err(Error::Config("each branch needs at least one query".into()));
        }
        if g.shape(e)[0] != channels * times + 1 {
            return Err(Error::Shape(format!(
                "token matrix has {} rows, expected {}",
                g.shape(e)[0],
                channels * times + 1
            )));
        }
        let by_channel: Vec<usize> = (0..channels * times).map(|i| 1 + i).collect();
        let by_time: Vec<usize> = (0..channels * times)
            .map(|i| token_index(times, i % channels, i / channels))
            .collect();
        let e_t = g.gather_rows(e, &by_channel)?;
        let e_s = g.gather_rows(e, &by_time)?;
        let t_out = self.temporal.forward(g, q_t, e_t, channels)?;
        let s_out = self.spatial.forward(g, q_s, e_s, times)?;
        let f_cls = g.gather_rows(e, &[0])?;
        let f = g.concat_rows(&[t_out.out, s_out.out, f_cls])?;
        let f_prime = self.proj.forward(g, f)?;
        Ok(BranchOutput {
            f_t: t_out.out,
            f_s: s_out.out,
            f_cls,
            f,
            f_prime,
            temporal_attn: t_out.attn,
            spatial_attn: s_out.attn,
            n_qt,
            n_qs,
            channels,
            times,
        })
    }
}

impl Module for Nlc {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.temporal.visit_params(f);
        self.spatial.visit_params(f);
        self.proj.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.temporal.visit_params_mut(f);
        self.spatial.visit_params_mut(f);
        self.proj.visit_params_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, grad_check_module};
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn cfg(d_e: usize, d_l: usize, heads: usize) -> NlcConfig {
        NlcConfig {
            n_heads: heads,
            ..NlcConfig::new(d_e, d_l)
        }
    }

    fn set_identity(l: &mut Linear) {
        let d = l.d_in();
        l.weight.value = Tensor::identity(d).with_requires_grad(true);
    }

    #[test]
    fn single_key_returns_value_row() {
        let mut r = rng(0);
        let mut ca = CrossAttention::new("x", 8, 2, &mut r);
        for l in [&mut ca.wq, &mut ca.wk, &mut ca.wv, &mut ca.wo] {
            set_identity(l);
        }
        let mut g = Graph::new();
        let q = g.constant(Tensor::randn(&[3, 8], 1.0, &mut r));
        let kv_t = Tensor::randn(&[1, 8], 1.0, &mut r);
        let kv = g.constant(kv_t.clone());
        let out = cross_attend(&mut g, q, kv, 1, &ca).unwrap().out;
        for i in 0..3 {
            for (a, b) in g.value(out).row(i).iter().zip(kv_t.row(0)) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn cross_attend_shape() {
        let mut r = rng(1);
        let ca = CrossAttention::new("x", 8, 2, &mut r);
        let mut g = Graph::new();
        let q = g.constant(Tensor::randn(&[2, 8], 1.0, &mut r));
        let kv = g.constant(Tensor::randn(&[12, 8], 1.0, &mut r));
        let out = cross_attend(&mut g, q, kv, 3, &ca).unwrap().out;
        assert_eq!(g.shape(out), &[6, 8]);
        let bad = g.constant(Tensor::randn(&[12, 4], 1.0, &mut r));
        assert!(cross_attend(&mut g, q, bad, 3, &ca).is_err());
    }

    #[test]
    fn cross_attend_groups_match_separate_calls() {
        // Oracle: attend each group on its own and interleave query-major.
        let mut r = rng(2);
        let ca = CrossAttention::new("x", 8, 2, &mut r);
        let q_t = Tensor::randn(&[2, 8], 1.0, &mut r);
        let kv_t = Tensor::randn(&[12, 8], 1.0, &mut r);
        let mut g = Graph::new();
        let q = g.constant(q_t.clone());
        let kv = g.constant(kv_t.clone());
        let out = cross_attend(&mut g, q, kv, 3, &ca).unwrap().out;
        for grp in 0..3 {
            let mut h = Graph::new();
            let q1 = h.constant(q_t.clone());
            let rows: Vec<Vec<f64>> = (0..4).map(|j| kv_t.row(grp * 4 + j).to_vec()).collect();
            let kv1 = h.constant(Tensor::from_rows(&rows).unwrap());
            let o1 = cross_attend(&mut h, q1, kv1, 1, &ca).unwrap().out;
            for qi in 0..2 {
                let a = g.value(out).row(qi * 3 + grp);
                let b = h.value(o1).row(qi);
                assert!(a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-14));
            }
        }
    }

    #[test]
    fn cross_attend_gradients() {
        let mut r = rng(3);
        let mut ca = CrossAttention::new("x", 8, 2, &mut r);
        ca.set_trainable(true);
        let q = Tensor::randn(&[2, 8], 1.0, &mut r);
        let kv = Tensor::randn(&[12, 8], 1.0, &mut r);
        let w = Tensor::randn(&[6, 8], 1.0, &mut r);
        let ca2 = ca.clone();
        let err = grad_check(
            |g, v| {
                let o = cross_attend(g, v[0], v[1], 3, &ca2)?.out;
                let w = g.constant(w.clone());
                let p = g.mul(o, w)?;
                Ok(g.sum(p))
            },
            &[q.clone(), kv.clone()],
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
        let err = grad_check_module(
            &mut ca,
            |g, m| {
                let qv = g.constant(q.clone());
                let kvv = g.constant(kv.clone());
                let o = cross_attend(g, qv, kvv, 3, m)?.out;
                let w = g.constant(w.clone());
                let p = g.mul(o, w)?;
                Ok(g.sum(p))
            },
            None,
            0,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    fn run(nlc: &Nlc, e: &Tensor, c: usize, t: usize, qt: &Tensor, qs: &Tensor) -> (Graph, BranchOutput) {
        let mut g = Graph::new();
        let ev = g.constant(e.clone());
        let a = g.constant(qt.clone());
        let b = g.constant(qs.clone());
        let out = nlc.forward(&mut g, ev, c, t, a, b).unwrap();
        (g, out)
    }

    #[test]
    fn worked_row_count() {
        let mut r = rng(4);
        let nlc = Nlc::new(cfg(8, 6, 2), &mut r).unwrap();
        let e = Tensor::randn(&[13, 8], 1.0, &mut r);
        let (g, out) = run(
            &nlc,
            &e,
            4,
            3,
            &Tensor::randn(&[2, 8], 1.0, &mut r),
            &Tensor::randn(&[3, 8], 1.0, &mut r),
        );
        assert_eq!(g.shape(out.f), &[18, 8]);
        assert_eq!(g.shape(out.f_prime), &[18, 6]);
        assert_eq!(g.value(out.f).row(17), e.row(0));
    }

    #[test]
    fn zero_inputs_give_projection_bias() {
        let mut r = rng(5);
        let mut nlc = Nlc::new(cfg(8, 6, 2), &mut r).unwrap();
        nlc.proj.bias.value = Tensor::randn(&[1, 6], 1.0, &mut r);
        let (g, out) = run(
            &nlc,
            &Tensor::zeros(&[7, 8]),
            3,
            2,
            &Tensor::zeros(&[2, 8]),
            &Tensor::zeros(&[3, 8]),
        );
        let bias = nlc.proj.bias.value.data();
        let fp = g.value(out.f_prime);
        for i in 0..fp.rows() {
            assert!(fp.row(i).iter().zip(bias).all(|(a, b)| (a - b).abs() < 1e-15));
        }
    }

    #[test]
    fn rejects_empty_queries() {
        let mut r = rng(6);
        let nlc = Nlc::new(cfg(8, 6, 2), &mut r).unwrap();
        let mut g = Graph::new();
        let e = g.constant(Tensor::zeros(&[7, 8]));
        let q = g.constant(Tensor::zeros(&[0, 8]));
        let q2 = g.constant(Tensor::zeros(&[1, 8]));
        assert!(matches!(nlc.forward(&mut g, e, 3, 2, q, q2), Err(Error::Config(_))));
    }

    #[test]
    fn temporal_rows_depend_only_on_their_channel() {
        let mut r = rng(7);
        let nlc = Nlc::new(cfg(8, 6, 2), &mut r).unwrap();
        let (c, t) = (3, 2);
        let e = Tensor::randn(&[7, 8], 1.0, &mut r);
        let qt = Tensor::randn(&[2, 8], 1.0, &mut r);
        let qs = Tensor::randn(&[1, 8], 1.0, &mut r);
        let mut e2 = e.clone();
        for tau in 0..t {
            let row = token_index(t, 1, tau);
            for j in 0..8 {
                e2.data_mut()[row * 8 + j] += 0.5;
            }
        }
        let (g1, o1) = run(&nlc, &e, c, t, &qt, &qs);
        let (g2, o2) = run(&nlc, &e2, c, t, &qt, &qs);
        for q in 0..2 {
            for ch in 0..c {
                let a = g1.value(o1.f_t).row(q * c + ch);
                let b = g2.value(o2.f_t).row(q * c + ch);
                let same = a == b;
                assert_eq!(same, ch != 1, "query {q} channel {ch}");
            }
        }
    }

    #[test]
    fn temporal_branch_is_channel_equivariant() {
        let mut r = rng(8);
        let nlc = Nlc::new(cfg(8, 6, 2), &mut r).unwrap();
        let (c, t) = (3, 2);
        let e = Tensor::randn(&[7, 8], 1.0, &mut r);
        let perm = [2, 0, 1];
        let mut ep = e.clone();
        for ch in 0..c {
            for tau in 0..t {
                let src = token_index(t, perm[ch], tau);
                let dst = token_index(t, ch, tau);
                let row = e.row(src).to_vec();
                ep.data_mut()[dst * 8..dst * 8 + 8].copy_from_slice(&row);
            }
        }
        let qt = Tensor::randn(&[2, 8], 1.0, &mut r);
        let qs = Tensor::randn(&[1, 8], 1.0, &mut r);
        let (g1, o1) = run(&nlc, &e, c, t, &qt, &qs);
        let (g2, o2) = run(&nlc, &ep, c, t, &qt, &qs);
        for q in 0..2 {
            for ch in 0..c {
                let a = g2.value(o2.f_t).row(q * c + ch);
                let b = g1.value(o1.f_t).row(q * c + perm[ch]);
                assert!(a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-14));
            }
        }
    }

    #[test]
    fn full_forward_gradients_and_no_dead_params() {
        let mut r = rng(9);
        let mut nlc = Nlc::new(cfg(8, 6, 2), &mut r).unwrap();
        nlc.set_trainable(true);
        let (c, t) = (3, 2);
        let e = Tensor::randn(&[7, 8], 1.0, &mut r);
        let qt = Tensor::randn(&[2, 8], 1.0, &mut r);
        let qs = Tensor::randn(&[3, 8], 1.0, &mut r);
        let w = Tensor::randn(&[Nlc::rows(2, 3, c, t), 6], 1.0, &mut r);
        let loss = |g: &mut Graph, m: &Nlc| -> Result<Var> {
            let ev = g.constant(e.clone());
            let a = g.constant(qt.clone());
            let b = g.constant(qs.clone());
            let out = m.forward(g, ev, c, t, a, b)?;
            let wv = g.constant(w.clone());
            let sq = g.mul(out.f_prime, out.f_prime)?;
            let p = g.mul(sq, wv)?;
            Ok(g.sum(p))
        };
        let err = grad_check_module(&mut nlc, loss, Some(6), 1).unwrap();
        assert!(err < 1e-4, "{err}");

        let mut g = Graph::new();
        let out = loss(&mut g, &nlc).unwrap();
        let grads = g.backward(out).unwrap();
        nlc.visit_params(&mut |p| {
            let gp = grads.param(&p.name).unwrap_or_else(|| panic!("{} has no gradient", p.name));
            assert!(gp.iter().any(|v| *v != 0.0), "{} gradient is all zero", p.name);
        });
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn shape_law(c in 1usize..5, t in 1usize..4, n_qt in 1usize..4, n_qs in 1usize..4, seed in any::<u64>()) {
            let mut r = rng(seed);
            let nlc = Nlc::new(cfg(8, 4, 2), &mut r).unwrap();
            let e = Tensor::randn(&[c * t + 1, 8], 1.0, &mut r);
            let (g, out) = run(&nlc, &e, c, t, &Tensor::randn(&[n_qt, 8], 1.0, &mut r), &Tensor::randn(&[n_qs, 8], 1.0, &mut r));
            prop_assert_eq!(g.shape(out.f)[0], n_qt * c + n_qs * t + 1);
            prop_assert_eq!(g.shape(out.f_prime)[0], g.shape(out.f)[0]);
        }
    }
}
