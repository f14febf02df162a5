//! Task-aware query selection: per-branch query pools scored by a router,
//! TopK adaptive queries plus one static query.

use std::fmt;
use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Mlp, INIT_STD};
use crate::tensor::{Module, Param};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BranchKind {
    Temporal,
    Spatial,
}

impl fmt::Display for BranchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Temporal => "temporal",
            Self::Spatial => "spatial",
        })
    }
}

/// How selected pool rows reach the connector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RouterGrad {
    /// Rows scaled by renormalised scores, giving the router a gradient.
    Scale,
    /// Rows used verbatim; the router receives no gradient.
    None,
}

impl std::str::FromStr for RouterGrad {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scale" => Ok(Self::Scale),
            "none" => Ok(Self::None),
            _ => Err(Error::Config(format!("router gradient mode must be scale|none, got `{s}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct QueryPool {
    pub branch: BranchKind,
    pub entries: Param,
}

impl QueryPool {
    pub fn new<R: Rng + ?Sized>(branch: BranchKind, size: usize, d_e: usize, rng: &mut R) -> Self {
        Self {
            branch,
            entries: Param::randn(format!("tqs.{branch}.pool"), &[size, d_e], INIT_STD, rng),
        }
    }

    pub fn size(&self) -> usize {
        self.entries.value.rows()
    }
}

#[derive(Clone, Debug)]
pub struct Router {
    pub branch: BranchKind,
    pub mlp: Mlp,
}

impl Router {
    pub fn new<R: Rng + ?Sized>(branch: BranchKind, d_e: usize, hidden: usize, pool: usize, rng: &mut R) -> Self {
        Self {
            branch,
            mlp: Mlp::new(&format!("tqs.{branch}.router"), d_e, hidden, pool, rng),
        }
    }
}

#[derive(Clone, Debug)]
pub struct StaticQuery {
    pub q: Param,
}

/// One branch's pool, router, static query and selection count.
#[derive(Clone, Debug)]
pub struct TqsBranch {
    pub pool: QueryPool,
    pub router: Router,
    pub static_query: StaticQuery,
    pub k: usize,
}

impl TqsBranch {
    pub fn new<R: Rng + ?Sized>(branch: BranchKind, pool_size: usize, k: usize, d_e: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        if k == 0 || k > pool_size {
            return Err(Error::Config(format!("cannot select {k} of {pool_size} pool entries")));
        }
        Ok(Self {
            pool: QueryPool::new(branch, pool_size, d_e, rng),
            router: Router::new(branch, d_e, hidden, pool_size, rng),
            static_query: StaticQuery {
                q: Param::randn(format!("tqs.{branch}.static"), &[1, d_e], INIT_STD, rng),
            },
            k,
        })
    }
}

impl Module for TqsBranch {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.pool.entries);
        self.router.mlp.visit_params(f);
        f(&self.static_query.q);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.pool.entries);
        self.router.mlp.visit_params_mut(f);
        f(&mut self.static_query.q);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub branch: BranchKind,
    pub scores: Vec<f64>,
    pub selected: Vec<usize>,
    pub renorm_weights: Vec<f64>,
    pub task_id: String,
    pub sample_id: String,
    pub step: u64,
}

impl RoutingDecision {
    pub fn record(&self) -> RoutingRecord {
        RoutingRecord {
            step: self.step,
            task_id: self.task_id.clone(),
            sample_id: self.sample_id.clone(),
            branch: self.branch,
            scores: self.scores.clone(),
            selected: self.selected.clone(),
        }
    }
}

/// One line of a routing log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingRecord {
    pub step: u64,
    pub task_id: String,
    pub sample_id: String,
    pub branch: BranchKind,
    pub scores: Vec<f64>,
    pub selected: Vec<usize>,
}

/// Indices of the `k` largest scores, by descending score; equal scores
/// keep the lower index first.
pub fn top_k(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::Config(format!("cannot select {k} of {} entries", scores.len())));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// Router output for one sample: the decision plus the `K × D_e` adaptive queries.
pub struct Routed {
    pub decision: RoutingDecision,
    pub adaptive: Var,
    pub scores: Var,
}

/// Scores the pool from the mean patch token of `e` and gathers the TopK rows.
pub fn route(g: &mut Graph, e: Var, branch: &TqsBranch, mode: RouterGrad) -> Result<Routed> {
    let n = g.shape(e)[0];
    if n < 2 {
        return Err(Error::EmptySample("token matrix has no patch tokens".into()));
    }
    if branch.k > branch.pool.size() {
        return Err(Error::Config(format!(
            "cannot select {} of {} pool entries",
            branch.k,
            branch.pool.size()
        )));
    }
    let patches: Vec<usize> = (1..n).collect();
    let tokens = g.gather_rows(e, &patches)?;
    let summary = g.mean_rows(tokens)?;
    let logits = branch.router.mlp.forward(g, summary)?;
    let scores = g.softmax(logits, 1)?;
    let score_vals = g.value(scores).data().to_vec();
    let selected = top_k(&score_vals, branch.k)?;
    let total: f64 = selected.iter().map(|&i| score_vals[i]).sum();
    let renorm_weights = selected.iter().map(|&i| score_vals[i] / total).collect();
    let pool = g.param(&branch.pool.entries);
    let rows = g.gather_rows(pool, &selected)?;
    let adaptive = match mode {
        RouterGrad::Scale => {
            let w = g.gather_cols(scores, &selected)?;
            let w = g.normalize_sum(w)?;
            g.scale_rows(rows, w)?
        }
        RouterGrad::None => rows,
    };
    Ok(Routed {
        decision: RoutingDecision {
            branch: branch.pool.branch,
            scores: score_vals,
            selected,
            renorm_weights,
            task_id: String::new(),
            sample_id: String::new(),
            step: 0,
        },
        adaptive,
        scores,
    })
}

/// `[q_a; q_st]`: adaptive rows in selection order, static row last.
pub fn assemble_queries(g: &mut Graph, adaptive: Var, branch: &TqsBranch) -> Result<Var> {
    let st = g.param(&branch.static_query.q);
    g.concat_rows(&[adaptive, st])
}

/// Both branches with shared routing settings.
#[derive(Clone, Debug)]
pub struct Tqs {
    pub temporal: TqsBranch,
    pub spatial: TqsBranch,
    pub mode: RouterGrad,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TqsConfig {
    pub pool_size: usize,
    pub n_t: usize,
    pub n_s: usize,
    /// Router hidden width; `None` means `D_e`.
    #[serde(default)]
    pub router_hidden: Option<usize>,
    pub router_grad: RouterGrad,
}

impl Default for TqsConfig {
    fn default() -> Self {
        Self {
            pool_size: 16,
            n_t: 1,
            n_s: 2,
            router_hidden: None,
            router_grad: RouterGrad::Scale,
        }
    }
}

/// Graph handles for both branches' queries.
pub struct TqsOutput {
    pub q_t: Var,
    pub q_s: Var,
    pub temporal: RoutingDecision,
    pub spatial: RoutingDecision,
}

impl Tqs {
    pub fn new<R: Rng + ?Sized>(cfg: &TqsConfig, d_e: usize, rng: &mut R) -> Result<Self> {
        let hidden = cfg.router_hidden.unwrap_or(d_e);
        Ok(Self {
            temporal: TqsBranch::new(BranchKind::Temporal, cfg.pool_size, cfg.n_t, d_e, hidden, rng)?,
            spatial: TqsBranch::new(BranchKind::Spatial, cfg.pool_size, cfg.n_s, d_e, hidden, rng)?,
            mode: cfg.router_grad,
        })
    }

    pub fn forward(&self, g: &mut Graph, e: Var) -> Result<TqsOutput> {
        let t = route(g, e, &self.temporal, self.mode)?;
        let s = route(g, e, &self.spatial, self.mode)?;
        let q_t = assemble_queries(g, t.adaptive, &self.temporal)?;
        let q_s = assemble_queries(g, s.adaptive, &self.spatial)?;
        Ok(TqsOutput {
            q_t,
            q_s,
            temporal: t.decision,
            spatial: s.decision,
        })
    }
}

impl Module for Tqs {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.temporal.visit_params(f);
        self.spatial.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.temporal.visit_params_mut(f);
        self.spatial.visit_params_mut(f);
    }
}

/// Share of each pool entry among the selections recorded for `task_id`
/// on `branch`: `count / (K · samples)`.
pub fn selection_frequency(log: &[RoutingRecord], task_id: &str, branch: BranchKind) -> Result<Vec<f64>> {
    let rows: Vec<&RoutingRecord> = log.iter().filter(|r| r.task_id == task_id && r.branch == branch).collect();
    let first = rows
        .first()
        .ok_or_else(|| Error::EmptyAnalytics(format!("no {branch} routing records for task `{task_id}`")))?;
    let mut freq = vec![0.0; first.scores.len()];
    let mut total = 0usize;
    for r in &rows {
        for &i in &r.selected {
            if i >= freq.len() {
                return Err(Error::Shape(format!("selected index {i} outside pool of {}", freq.len())));
            }
            freq[i] += 1.0;
        }
        total += r.selected.len();
    }
    freq.iter_mut().for_each(|f| *f /= total as f64);
    Ok(freq)
}

/// Appends one JSON line per record and flushes.
pub fn append_routing_log<W: Write>(out: &mut W, records: &[RoutingRecord]) -> Result<()> {
    for r in records {
        let mut line = serde_json::to_vec(r)?;
        line.push(b'\n');
        out.write_all(&line)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_routing_log<R: BufRead>(input: R, path: &std::path::Path) -> Result<Vec<RoutingRecord>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn top_k_examples() {
        assert_eq!(top_k(&[0.1, 0.4, 0.3, 0.2], 2).unwrap(), vec![1, 2]);
        assert_eq!(top_k(&[0.5, 0.5], 1).unwrap(), vec![0]);
        assert!(top_k(&[0.5, 0.5], 3).is_err());
    }

    fn branch(k: usize, pool: usize, seed: u64) -> TqsBranch {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut b = TqsBranch::new(BranchKind::Spatial, pool, k, 8, 8, &mut r).unwrap();
        b.set_trainable(true);
        b
    }

    #[test]
    fn uniform_scores_full_selection() {
        let mut b = branch(4, 4, 0);
        // zero the router's output layer so logits are all equal
        b.router.mlp.fc2.weight.value = Tensor::zeros(&[8, 4]);
        let mut g = Graph::new();
        let e = g.constant(Tensor::randn(&[5, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(1)));
        let out = route(&mut g, e, &b, RouterGrad::Scale).unwrap();
        assert_eq!(out.decision.selected, vec![0, 1, 2, 3]);
        let pool = b.pool.entries.value.clone();
        for j in 0..4 {
            assert!((out.decision.renorm_weights[j] - 0.25).abs() < 1e-15);
            // renormalised weight = (1/4) / (4 · 1/4)
            let hand: Vec<f64> = pool.row(j).iter().map(|v| v * 0.25).collect();
            assert!(g.value(out.adaptive).row(j).iter().zip(&hand).all(|(a, b)| (a - b).abs() < 1e-15));
        }
    }

    #[test]
    fn assembly_order_and_static_row() {
        let mut b = branch(2, 4, 2);
        let sentinel: Vec<f64> = (0..32).map(|i| (i / 8) as f64 + 1.0).collect();
        b.pool.entries.value = Tensor::matrix(4, 8, sentinel).unwrap().with_requires_grad(true);
        let mut g = Graph::new();
        let e = g.constant(Tensor::randn(&[5, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(3)));
        let out = route(&mut g, e, &b, RouterGrad::None).unwrap();
        let q = assemble_queries(&mut g, out.adaptive, &b).unwrap();
        assert_eq!(g.shape(q), &[3, 8]);
        for (j, &sel) in out.decision.selected.iter().enumerate() {
            assert_eq!(g.value(q).row(j)[0], sel as f64 + 1.0);
        }
        assert_eq!(g.value(q).row(2), b.static_query.q.value.data());
    }

    #[test]
    fn default_query_counts() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let tqs = Tqs::new(&TqsConfig::default(), 8, &mut r).unwrap();
        let mut g = Graph::new();
        let e = g.constant(Tensor::randn(&[7, 8], 1.0, &mut r));
        let out = tqs.forward(&mut g, e).unwrap();
        assert_eq!(g.shape(out.q_t)[0], 2);
        assert_eq!(g.shape(out.q_s)[0], 3);
    }

    #[test]
    fn frequency_examples() {
        let rec = |sel: Vec<usize>, task: &str| RoutingRecord {
            step: 0,
            task_id: task.into(),
            sample_id: "0".into(),
            branch: BranchKind::Spatial,
            scores: vec![0.25; 4],
            selected: sel,
        };
        let log = vec![rec(vec![1, 2], "a"), rec(vec![0, 3], "b")];
        assert_eq!(
            selection_frequency(&log, "a", BranchKind::Spatial).unwrap(),
            vec![0.0, 0.5, 0.5, 0.0]
        );
        assert!(matches!(
            selection_frequency(&log, "c", BranchKind::Spatial),
            Err(Error::EmptyAnalytics(_))
        ));
        assert!(selection_frequency(&log, "a", BranchKind::Temporal).is_err());
    }

    #[test]
    fn routing_log_round_trip() {
        let r = RoutingRecord {
            step: 3,
            task_id: "t".into(),
            sample_id: "s".into(),
            branch: BranchKind::Temporal,
            scores: vec![0.5, 0.5],
            selected: vec![0],
        };
        let mut buf = Vec::new();
        append_routing_log(&mut buf, &[r.clone(), r.clone()]).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(r#"{"step":3,"task_id":"t","sample_id":"s","branch":"temporal","scores":[0.5,0.5],"selected":[0]}"#));
        let back = read_routing_log(&buf[..], std::path::Path::new("x")).unwrap();
        assert_eq!(back, vec![r.clone(), r]);
    }
}
