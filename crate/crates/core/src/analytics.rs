//! Post-hoc analysis of routing logs and attention traces: selection
//! frequencies, task similarity, channel attention, PCA and figure files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tqs::{read_routing_log, selection_frequency, BranchKind, RoutingRecord};
use crate::train::AttentionTrace;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityMeasure {
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub tasks: Vec<String>,
    pub values: Vec<Vec<f64>>,
    pub measure: SimilarityMeasure,
}

impl SimilarityMatrix {
    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.tasks.iter().position(|t| t == a)?;
        let j = self.tasks.iter().position(|t| t == b)?;
        Some(self.values[i][j])
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    // sqrt(fl(n·n)) rounds back to n, so identical inputs give exactly 1.
    Some((dot / (na * nb).sqrt()).clamp(-1.0, 1.0))
}

/// Pairwise cosine similarity of per-task frequency vectors.
pub fn similarity(freqs: &BTreeMap<String, Vec<f64>>) -> Result<SimilarityMatrix> {
    if freqs.len() < 2 {
        return Err(Error::EmptyAnalytics(format!(
            "similarity needs at least 2 tasks, got {}",
            freqs.len()
        )));
    }
    let tasks: Vec<String> = freqs.keys().cloned().collect();
    let vecs: Vec<&Vec<f64>> = freqs.values().collect();
    let n = vecs[0].len();
    if let Some(v) = vecs.iter().find(|v| v.len() != n) {
        return Err(Error::dim("similarity", &[n], &[v.len()]));
    }
    let mut values = vec![vec![0.0; tasks.len()]; tasks.len()];
    for i in 0..tasks.len() {
        for j in i..tasks.len() {
            let s = if i == j && vecs[i].iter().any(|x| *x != 0.0) {
                1.0
            } else {
                cosine(vecs[i], vecs[j]).ok_or_else(|| Error::UndefinedSimilarity(tasks[i].clone(), tasks[j].clone()))?
            };
            values[i][j] = s;
            values[j][i] = s;
        }
    }
    Ok(SimilarityMatrix {
        tasks,
        values,
        measure: SimilarityMeasure::Cosine,
    })
}

/// Per-task selection frequencies of one branch.
pub fn branch_frequencies(log: &[RoutingRecord], branch: BranchKind) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut tasks: Vec<&str> = log.iter().filter(|r| r.branch == branch).map(|r| r.task_id.as_str()).collect();
    tasks.sort_unstable();
    tasks.dedup();
    if tasks.is_empty() {
        return Err(Error::EmptyAnalytics(format!("no {branch} routing records")));
    }
    tasks
        .into_iter()
        .map(|t| Ok((t.to_string(), selection_frequency(log, t, branch)?)))
        .collect()
}

/// Temporal then spatial frequencies, concatenated per task.
pub fn task_frequencies(log: &[RoutingRecord]) -> Result<BTreeMap<String, Vec<f64>>> {
    let t = branch_frequencies(log, BranchKind::Temporal)?;
    let mut s = branch_frequencies(log, BranchKind::Spatial)?;
    t.into_iter()
        .map(|(k, mut v)| {
            let sp = s
                .remove(&k)
                .ok_or_else(|| Error::EmptyAnalytics(format!("no spatial routing records for task `{k}`")))?;
            v.extend(sp);
            Ok((k, v))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelAttentionMap {
    pub task_id: String,
    pub mass: Vec<f64>,
}

/// Mean per-channel attention mass over the task's traces, renormalized.
pub fn channel_attention(traces: &[AttentionTrace], task: &str) -> Result<ChannelAttentionMap> {
    let rows: Vec<&AttentionTrace> = traces.iter().filter(|t| t.task_id == task).collect();
    let first = rows
        .first()
        .ok_or_else(|| Error::EmptyAnalytics(format!("no attention traces for task `{task}`")))?;
    let c = first.channel_mass.len();
    let mut mass = vec![0.0; c];
    for r in &rows {
        if r.channel_mass.len() != c {
            return Err(Error::dim("channel_attention", &[c], &[r.channel_mass.len()]));
        }
        mass.iter_mut().zip(&r.channel_mass).for_each(|(m, x)| *m += x);
    }
    let total: f64 = mass.iter().sum();
    if !(total > 0.0) {
        return Err(Error::EmptyAnalytics(format!("attention traces for `{task}` carry no mass")));
    }
    mass.iter_mut().for_each(|m| *m /= total);
    Ok(ChannelAttentionMap {
        task_id: task.to_string(),
        mass,
    })
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues descending with eigenvectors as rows.
pub fn symmetric_eigen(a: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    let scale: f64 = m.iter().flatten().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i][j] * m[i][j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q].abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j][j].total_cmp(&m[i][i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| m[i][i]).collect();
    let vectors = order.iter().map(|&i| v.iter().map(|row| row[i]).collect()).collect();
    (values, vectors)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub mean: Vec<f64>,
    /// Unit principal axes, one per output dimension (zero rows when degenerate).
    pub components: Vec<Vec<f64>>,
    /// Sample variance along each axis.
    pub variances: Vec<f64>,
    pub coords: Vec<Vec<f64>>,
    pub degenerate: bool,
}

impl Projection {
    pub fn reconstruct(&self, coords: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (c, axis) in coords.iter().zip(&self.components) {
            out.iter_mut().zip(axis).for_each(|(o, a)| *o += c * a);
        }
        out
    }
}

/// Mean-centred projection onto the top `dims` principal axes. Each axis is
/// signed so that its largest-magnitude loading is positive. Rank below
/// `dims` logs a warning and zero-fills the missing axes.
pub fn pca_project(vectors: &[Vec<f64>], dims: usize) -> Result<Projection> {
    if vectors.len() < dims + 1 {
        return Err(Error::EmptyAnalytics(format!(
            "PCA to {dims} dims needs {} vectors, got {}",
            dims + 1,
            vectors.len()
        )));
    }
    let d = vectors[0].len();
    if let Some(v) = vectors.iter().find(|v| v.len() != d) {
        return Err(Error::dim("pca_project", &[d], &[v.len()]));
    }
    let n = vectors.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| vectors.iter().map(|v| v[j]).sum::<f64>() / n).collect();
    let centred: Vec<Vec<f64>> = vectors.iter().map(|v| v.iter().zip(&mean).map(|(x, m)| x - m).collect()).collect();
    let mut cov = vec![vec![0.0; d]; d];
    for x in &centred {
        for i in 0..d {
            for j in i..d {
                cov[i][j] += x[i] * x[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            cov[i][j] /= n - 1.0;
            cov[j][i] = cov[i][j];
        }
    }
    let (values, vectors_) = symmetric_eigen(&cov);
    let tol = 1e-12 * values.first().copied().unwrap_or(0.0).max(0.0).max(f64::MIN_POSITIVE);
    let mut degenerate = false;
    let mut components = Vec::with_capacity(dims);
    let mut variances = Vec::with_capacity(dims);
    for k in 0..dims {
        match (values.get(k), vectors_.get(k)) {
            (Some(&lam), Some(axis)) if lam > tol => {
                let big = axis
                    .iter()
                    .enumerate()
                    .fold(0, |b, (i, x)| if x.abs() > axis[b].abs() { i } else { b });
                let sign = if axis[big] < 0.0 { -1.0 } else { 1.0 };
                components.push(axis.iter().map(|x| x * sign).collect());
                variances.push(lam);
            }
            _ => {
                degenerate = true;
                components.push(vec![0.0; d]);
                variances.push(0.0);
            }
        }
    }
    if degenerate {
        log::warn!("PCA input has rank below {dims}; missing axes are zero-filled");
    }
    let coords = centred
        .iter()
        .map(|x| components.iter().map(|a| a.iter().zip(x).map(|(p, q)| p * q).sum()).collect())
        .collect();
    Ok(Projection {
        mean,
        components,
        variances,
        coords,
        degenerate,
    })
}

/// Routing-score vectors per sample: temporal scores then spatial scores.
pub fn score_vectors(log: &[RoutingRecord]) -> Vec<(String, String, Vec<f64>)> {
    let mut order: Vec<(String, String)> = Vec::new();
    let mut parts: BTreeMap<(String, String), [Option<Vec<f64>>; 2]> = BTreeMap::new();
    for r in log {
        let key = (r.task_id.clone(), r.sample_id.clone());
        let slot = parts.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            [None, None]
        });
        let i = usize::from(r.branch == BranchKind::Spatial);
        slot[i] = Some(r.scores.clone());
    }
    order
        .into_iter()
        .filter_map(|k| {
            let [t, s] = parts.remove(&k)?;
            let mut v = t?;
            v.extend(s?);
            Some((k.0, k.1, v))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Separation {
    /// Mean Euclidean distance between task centroids.
    pub inter_centroid: f64,
    /// Mean distance of points to their own task centroid.
    pub intra_spread: f64,
}

pub fn cluster_separation(coords: &[Vec<f64>], groups: &[String]) -> Result<Separation> {
    let mut by: BTreeMap<&str, Vec<&Vec<f64>>> = BTreeMap::new();
    for (c, g) in coords.iter().zip(groups) {
        by.entry(g.as_str()).or_default().push(c);
    }
    if by.len() < 2 {
        return Err(Error::EmptyAnalytics("separation needs at least 2 groups".into()));
    }
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let centroids: Vec<Vec<f64>> = by
        .values()
        .map(|pts| {
            let d = pts[0].len();
            (0..d).map(|j| pts.iter().map(|p| p[j]).sum::<f64>() / pts.len() as f64).collect()
        })
        .collect();
    let mut inter = 0.0;
    let mut pairs = 0;
    for i in 0..centroids.len() {
        for j in i + 1..centroids.len() {
            inter += dist(&centroids[i], &centroids[j]);
            pairs += 1;
        }
    }
    let mut intra = 0.0;
    let mut count = 0;
    for (pts, c) in by.values().zip(&centroids) {
        for p in pts {
            intra += dist(p, c);
            count += 1;
        }
    }
    Ok(Separation {
        inter_centroid: inter / pairs as f64,
        intra_spread: intra / count as f64,
    })
}

pub fn read_traces(path: &Path) -> Result<Vec<AttentionTrace>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn read_routing(path: &Path) -> Result<Vec<RoutingRecord>> {
    read_routing_log(BufReader::new(fs::File::open(path)?), path)
}

/// Routing logs in order of preference: all samples under the final
/// weights, the evaluated split, then the training log.
pub const ROUTING_LOGS: [&str; 3] = ["final_routing.jsonl", "eval_routing.jsonl", "routing.jsonl"];

fn routing_path(run_dir: &Path) -> Option<PathBuf> {
    ROUTING_LOGS.iter().map(|n| run_dir.join(n)).find(|p| p.exists())
}

pub fn run_routing(run_dir: &Path) -> Result<Vec<RoutingRecord>> {
    match routing_path(run_dir) {
        Some(p) => read_routing(&p),
        None => Err(Error::MissingArtifacts(vec![ROUTING_LOGS[0].into()])),
    }
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn fmt(x: f64) -> String {
    format!("{x:.12}")
}

fn csv_rows(header: &[String], rows: &[(String, Vec<f64>)]) -> String {
    let mut s = header.join(",");
    s.push('\n');
    for (name, vals) in rows {
        s.push_str(name);
        for v in vals {
            s.push(',');
            s.push_str(&fmt(*v));
        }
        s.push('\n');
    }
    s
}

fn svg_open(w: usize, h: usize) -> String {
    format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n<rect x=\"0\" y=\"0\" width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    )
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

pub fn heatmap_svg(m: &SimilarityMatrix) -> String {
    let n = m.tasks.len();
    let (cell, margin) = (40, 80);
    let mut s = svg_open(margin + n * cell + 20, margin + n * cell + 20);
    for (i, row) in m.values.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            let shade = (255.0 * (1.0 - v.clamp(0.0, 1.0))).round() as u8;
            let _ = writeln!(
                s,
                "<rect class=\"cell\" x=\"{}\" y=\"{}\" width=\"{cell}\" height=\"{cell}\" fill=\"rgb({shade},{shade},255)\"><title>{} / {}: {:.4}</title></rect>",
                margin + j * cell,
                margin + i * cell,
                escape(&m.tasks[i]),
                escape(&m.tasks[j]),
                v
            );
        }
    }
    for (i, t) in m.tasks.iter().enumerate() {
        let c = margin + i * cell + cell / 2;
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{c}\" font-size=\"11\" text-anchor=\"end\">{}</text>",
            margin - 4,
            escape(t)
        );
        let _ = writeln!(
            s,
            "<text x=\"{c}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\">{}</text>",
            margin - 6,
            escape(t)
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn bars_svg(maps: &[ChannelAttentionMap]) -> String {
    let c = maps.first().map_or(0, |m| m.mass.len());
    let (bar, gap, panel_h, left) = (14, 4, 120, 80);
    let width = left + c * (bar + gap) + 20;
    let mut s = svg_open(width, maps.len() * (panel_h + 20) + 20);
    for (k, m) in maps.iter().enumerate() {
        let base = 10 + k * (panel_h + 20) + panel_h;
        let top = m.mass.iter().copied().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"end\">{}</text>",
            left - 6,
            base - panel_h / 2,
            escape(&m.task_id)
        );
        for (i, v) in m.mass.iter().enumerate() {
            let h = (v / top * (panel_h - 10) as f64).round() as usize;
            let _ = writeln!(
                s,
                "<rect class=\"bar\" x=\"{}\" y=\"{}\" width=\"{bar}\" height=\"{h}\" fill=\"{}\"><title>ch{i}: {:.4}</title></rect>",
                left + i * (bar + gap),
                base - h,
                PALETTE[k % PALETTE.len()],
                v
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

pub fn scatter_svg(points: &[(String, Vec<f64>)]) -> String {
    let (w, h, pad) = (480.0, 480.0, 40.0);
    let xs: Vec<f64> = points.iter().map(|p| p.1[0]).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.get(1).copied().unwrap_or(0.0)).collect();
    let range = |v: &[f64]| {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            (lo, hi)
        } else {
            (lo - 1.0, lo + 1.0)
        }
    };
    let ((x0, x1), (y0, y1)) = (range(&xs), range(&ys));
    let mut groups: Vec<&str> = points.iter().map(|p| p.0.as_str()).collect();
    groups.sort_unstable();
    groups.dedup();
    let mut s = svg_open(w as usize + 120, h as usize);
    for ((g, _), (x, y)) in points.iter().zip(xs.iter().zip(&ys)) {
        let k = groups.iter().position(|t| t == g).unwrap_or(0);
        let px = pad + (x - x0) / (x1 - x0) * (w - 2.0 * pad);
        let py = h - pad - (y - y0) / (y1 - y0) * (h - 2.0 * pad);
        let _ = writeln!(
            s,
            "<circle cx=\"{px:.3}\" cy=\"{py:.3}\" r=\"3\" fill=\"{}\" fill-opacity=\"0.7\"/>",
            PALETTE[k % PALETTE.len()]
        );
    }
    for (k, g) in groups.iter().enumerate() {
        let y = 20 + 16 * k;
        let _ = writeln!(
            s,
            "<circle cx=\"{}\" cy=\"{}\" r=\"5\" fill=\"{}\"/>",
            w as usize + 10,
            y - 4,
            PALETTE[k % PALETTE.len()]
        );
        let _ = writeln!(s, "<text x=\"{}\" y=\"{y}\" font-size=\"11\">{}</text>", w as usize + 20, escape(g));
    }
    s.push_str("</svg>\n");
    s
}

/// Writes frequency, similarity, channel-attention and PCA files into
/// `run_dir` and returns their paths in write order.
pub fn emit_figures(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut gaps = Vec::new();
    let routing_path = routing_path(run_dir);
    if routing_path.is_none() {
        gaps.push(ROUTING_LOGS[0].to_string());
    }
    let traces_path = run_dir.join("attention_traces.jsonl");
    if !traces_path.exists() {
        gaps.push("attention_traces.jsonl".to_string());
    }
    if !gaps.is_empty() {
        return Err(Error::MissingArtifacts(gaps));
    }
    let log = read_routing(&routing_path.expect("checked"))?;
    let traces = read_traces(&traces_path)?;
    let mut written = Vec::new();
    let mut put = |name: &str, body: String| -> Result<()> {
        let p = run_dir.join(name);
        fs::write(&p, body)?;
        written.push(p);
        Ok(())
    };

    for (branch, name) in [
        (BranchKind::Temporal, "frequency_temporal.csv"),
        (BranchKind::Spatial, "frequency_spatial.csv"),
    ] {
        let f = branch_frequencies(&log, branch)?;
        let n = f.values().next().map_or(0, Vec::len);
        let header: Vec<String> = std::iter::once("task".to_string()).chain((0..n).map(|i| format!("e{i}"))).collect();
        put(name, csv_rows(&header, &f.into_iter().collect::<Vec<_>>()))?;
    }

    let freqs = task_frequencies(&log)?;
    if freqs.len() >= 2 {
        let sim = similarity(&freqs)?;
        let header: Vec<String> = std::iter::once("task".to_string()).chain(sim.tasks.iter().cloned()).collect();
        let rows: Vec<(String, Vec<f64>)> = sim.tasks.iter().cloned().zip(sim.values.iter().cloned()).collect();
        put("similarity.csv", csv_rows(&header, &rows))?;
        put("similarity.svg", heatmap_svg(&sim))?;
    } else {
        log::warn!("similarity skipped: only one task in the routing log");
    }

    let mut task_ids: Vec<&str> = traces.iter().map(|t| t.task_id.as_str()).collect();
    task_ids.sort_unstable();
    task_ids.dedup();
    let maps = task_ids.iter().map(|t| channel_attention(&traces, t)).collect::<Result<Vec<_>>>()?;
    let c = maps.first().map_or(0, |m| m.mass.len());
    let header: Vec<String> = std::iter::once("task".to_string())
        .chain((0..c).map(|i| format!("ch{i}")))
        .collect();
    let rows: Vec<(String, Vec<f64>)> = maps.iter().map(|m| (m.task_id.clone(), m.mass.clone())).collect();
    put("channel_attention.csv", csv_rows(&header, &rows))?;
    put("channel_attention.svg", bars_svg(&maps))?;

    let scores = score_vectors(&log);
    if scores.len() >= 3 {
        let vecs: Vec<Vec<f64>> = scores.iter().map(|s| s.2.clone()).collect();
        let proj = pca_project(&vecs, 2)?;
        let mut csv = String::from("task,sample,pc1,pc2\n");
        for ((task, sample, _), c) in scores.iter().zip(&proj.coords) {
            let _ = writeln!(csv, "{task},{sample},{},{}", fmt(c[0]), fmt(c[1]));
        }
        put("pca.csv", csv)?;
        let pts: Vec<(String, Vec<f64>)> = scores.iter().map(|s| s.0.clone()).zip(proj.coords).collect();
        put("pca.svg", scatter_svg(&pts))?;
    } else {
        log::warn!("PCA skipped: fewer than 3 routed samples");
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn freqs(v: &[(&str, Vec<f64>)]) -> BTreeMap<String, Vec<f64>> {
        v.iter().map(|(k, x)| (k.to_string(), x.clone())).collect()
    }

    #[test]
    fn similarity_examples() {
        let m = similarity(&freqs(&[
            ("a", vec![0.5, 0.5, 0.0, 0.0]),
            ("b", vec![0.5, 0.0, 0.5, 0.0]),
            ("c", vec![0.5, 0.5, 0.0, 0.0]),
        ]))
        .unwrap();
        let direct = 0.25 / (0.5f64.sqrt() * 0.5f64.sqrt());
        assert!((m.get("a", "b").unwrap() - direct).abs() < 1e-15);
        assert!((m.get("a", "b").unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(m.get("a", "c").unwrap(), 1.0);
        let o = similarity(&freqs(&[("x", vec![1.0, 0.0]), ("y", vec![0.0, 1.0])])).unwrap();
        assert_eq!(o.get("x", "y").unwrap(), 0.0);
        let z = similarity(&freqs(&[("x", vec![1.0, 0.0]), ("y", vec![0.0, 0.0])]));
        assert!(matches!(z, Err(Error::UndefinedSimilarity(..))));
        assert!(similarity(&freqs(&[("x", vec![1.0])])).is_err());
    }

    proptest! {
        #[test]
        fn similarity_symmetric_unit_diagonal(rows in proptest::collection::vec(proptest::collection::vec(0.01f64..1.0, 6), 2..6)) {
            let f: BTreeMap<String, Vec<f64>> = rows.into_iter().enumerate().map(|(i, v)| (format!("t{i}"), v)).collect();
            let m = similarity(&f).unwrap();
            for i in 0..m.tasks.len() {
                prop_assert_eq!(m.values[i][i], 1.0);
                for j in 0..m.tasks.len() {
                    prop_assert!((m.values[i][j] - m.values[j][i]).abs() < 1e-12);
                    prop_assert!((0.0..=1.0).contains(&m.values[i][j]));
                }
            }
        }
    }

    fn trace(task: &str, mass: Vec<f64>) -> AttentionTrace {
        AttentionTrace {
            task_id: task.into(),
            sample_id: "s".into(),
            channel_mass: mass,
        }
    }

    #[test]
    fn channel_attention_uniform_and_simplex() {
        let t = vec![
            trace("a", vec![0.25; 4]),
            trace("a", vec![0.25; 4]),
            trace("b", vec![1.0, 0.0, 0.0, 0.0]),
        ];
        let m = channel_attention(&t, "a").unwrap();
        assert!(m.mass.iter().all(|x| (x - 0.25).abs() < 1e-15));
        let b = channel_attention(&t, "b").unwrap();
        assert!((b.mass.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(channel_attention(&t, "zzz").is_err());
    }

    #[test]
    fn eigen_matches_known_matrix() {
        let (vals, vecs) = symmetric_eigen(&[vec![2.0, 1.0], vec![1.0, 2.0]]);
        assert!((vals[0] - 3.0).abs() < 1e-12 && (vals[1] - 1.0).abs() < 1e-12);
        let r = 0.5f64.sqrt();
        assert!((vecs[0][0].abs() - r).abs() < 1e-12 && (vecs[0][1].abs() - r).abs() < 1e-12);
    }

    fn plane_points(seed: u64, n: usize) -> Vec<Vec<f64>> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let u: Vec<f64> = (0..16).map(|_| rng.random::<f64>() - 0.5).collect();
        let w: Vec<f64> = (0..16).map(|_| rng.random::<f64>() - 0.5).collect();
        let off: Vec<f64> = (0..16).map(|_| rng.random::<f64>()).collect();
        (0..n)
            .map(|_| {
                let (a, b) = (rng.random::<f64>() * 4.0 - 2.0, rng.random::<f64>() - 0.5);
                (0..16).map(|j| off[j] + a * u[j] + b * w[j]).collect()
            })
            .collect()
    }

    #[test]
    fn pca_recovers_planar_data() {
        let pts = plane_points(3, 40);
        let p = pca_project(&pts, 2).unwrap();
        assert!(!p.degenerate);
        assert!(p.variances[0] >= p.variances[1]);
        for (x, c) in pts.iter().zip(&p.coords) {
            let r = p.reconstruct(c);
            let err = x.iter().zip(&r).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-9, "{err}");
        }
        let mut dup = pts.clone();
        dup.extend(pts.clone());
        let q = pca_project(&dup, 2).unwrap();
        assert_eq!(q.coords[0], q.coords[40]);
    }

    #[test]
    fn pca_rank_deficient_zero_fills() {
        let pts: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, 2.0 * i as f64, 0.0]).collect();
        let p = pca_project(&pts, 2).unwrap();
        assert!(p.degenerate);
        assert!(p.coords.iter().all(|c| c[1] == 0.0));
        assert!(pca_project(&pts[..2], 2).is_err());
    }

    #[test]
    fn heatmap_has_square_cell_count() {
        let m = similarity(&freqs(&[("a", vec![1.0, 0.1]), ("b", vec![0.2, 1.0]), ("c", vec![1.0, 1.0])])).unwrap();
        assert_eq!(heatmap_svg(&m).matches("class=\"cell\"").count(), 9);
    }

    #[test]
    fn missing_logs_are_enumerated() {
        let dir = tempfile::tempdir().unwrap();
        match emit_figures(dir.path()).unwrap_err() {
            Error::MissingArtifacts(g) => assert_eq!(g, vec!["final_routing.jsonl", "attention_traces.jsonl"]),
            e => panic!("{e}"),
        }
    }
}
