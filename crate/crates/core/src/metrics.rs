//! Classification metrics over a confusion matrix. Decodes that match no
//! label land in an extra column that no true class can occupy.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `counts[true][pred]`, square of side `n_classes + 1`; the last index is
/// the unmatched-decode class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub n_classes: usize,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        Self {
            n_classes,
            counts: vec![vec![0; n_classes + 1]; n_classes + 1],
        }
    }

    pub fn unmatched_index(&self) -> usize {
        self.n_classes
    }

    /// `pred = None` records an unmatched decode.
    pub fn record(&mut self, truth: usize, pred: Option<usize>) {
        assert!(truth < self.n_classes, "true class {truth} out of range");
        let p = pred.unwrap_or(self.n_classes);
        assert!(p <= self.n_classes, "predicted class {p} out of range");
        self.counts[truth][p] += 1;
    }

    pub fn from_pairs(n_classes: usize, truth: &[usize], pred: &[Option<usize>]) -> Self {
        assert_eq!(truth.len(), pred.len());
        let mut m = Self::new(n_classes);
        truth.iter().zip(pred).for_each(|(&t, &p)| m.record(t, p));
        m
    }

    /// Plain square matrix without an unmatched column.
    pub fn from_counts(counts: Vec<Vec<u64>>) -> Self {
        let k = counts.len();
        let mut m = Self::new(k);
        for (i, row) in counts.iter().enumerate() {
            assert_eq!(row.len(), k);
            m.counts[i][..k].copy_from_slice(row);
        }
        m
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn unmatched(&self) -> u64 {
        self.counts.iter().map(|r| r[self.n_classes]).sum()
    }

    fn support(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    fn predicted(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }

    /// Mean recall over classes that occur in the truth.
    pub fn balanced_accuracy(&self) -> f64 {
        let recalls: Vec<f64> = (0..self.n_classes)
            .filter(|&c| self.support(c) > 0)
            .map(|c| self.counts[c][c] as f64 / self.support(c) as f64)
            .collect();
        if recalls.is_empty() {
            return 0.0;
        }
        recalls.iter().sum::<f64>() / recalls.len() as f64
    }

    pub fn cohen_kappa(&self) -> f64 {
        let n = self.total() as f64;
        if n == 0.0 {
            return 0.0;
        }
        let side = self.n_classes + 1;
        let p_o = (0..side).map(|c| self.counts[c][c]).sum::<u64>() as f64 / n;
        let p_e = (0..side).map(|c| self.support(c) as f64 * self.predicted(c) as f64).sum::<f64>() / (n * n);
        if p_e == 1.0 {
            return if p_o == 1.0 { 1.0 } else { 0.0 };
        }
        (p_o - p_e) / (1.0 - p_e)
    }

    /// Per-class F1 weighted by true-class support.
    pub fn weighted_f1(&self) -> f64 {
        let n = self.total() as f64;
        if n == 0.0 {
            return 0.0;
        }
        (0..self.n_classes)
            .map(|c| {
                let tp = self.counts[c][c] as f64;
                let denom = (self.support(c) + self.predicted(c)) as f64;
                let f1 = if denom == 0.0 { 0.0 } else { 2.0 * tp / denom };
                f1 * self.support(c) as f64 / n
            })
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub balanced_accuracy: f64,
    pub cohen_kappa: f64,
    pub weighted_f1: f64,
    pub n_samples: u64,
    pub unmatched_decodes: u64,
}

impl TaskMetrics {
    pub fn from_confusion(m: &ConfusionMatrix) -> Self {
        Self {
            balanced_accuracy: m.balanced_accuracy(),
            cohen_kappa: m.cohen_kappa(),
            weighted_f1: m.weighted_f1(),
            n_samples: m.total(),
            unmatched_decodes: m.unmatched(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacroAverage {
    pub balanced_accuracy: f64,
    pub cohen_kappa: f64,
    pub weighted_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub tasks: BTreeMap<String, TaskMetrics>,
    pub macro_average: MacroAverage,
}

impl MetricReport {
    pub fn from_confusions(per_task: &BTreeMap<String, ConfusionMatrix>) -> Result<Self> {
        if per_task.is_empty() || per_task.values().any(|m| m.total() == 0) {
            return Err(Error::EmptySample("evaluation split has no samples".into()));
        }
        let tasks: BTreeMap<String, TaskMetrics> = per_task.iter().map(|(k, m)| (k.clone(), TaskMetrics::from_confusion(m))).collect();
        let n = tasks.len() as f64;
        let avg = |f: fn(&TaskMetrics) -> f64| tasks.values().map(f).sum::<f64>() / n;
        let macro_average = MacroAverage {
            balanced_accuracy: avg(|t| t.balanced_accuracy),
            cohen_kappa: avg(|t| t.cohen_kappa),
            weighted_f1: avg(|t| t.weighted_f1),
        };
        Ok(Self { tasks, macro_average })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = self.tasks.keys().map(String::len).max().unwrap_or(4).max(5);
        writeln!(
            f,
            "{:<w$}  {:>7}  {:>7}  {:>7}  {:>6}  {:>9}",
            "task", "B-Acc", "kappa", "F1w", "n", "unmatched"
        )?;
        for (k, t) in &self.tasks {
            writeln!(
                f,
                "{k:<w$}  {:>7.4}  {:>7.4}  {:>7.4}  {:>6}  {:>9}",
                t.balanced_accuracy, t.cohen_kappa, t.weighted_f1, t.n_samples, t.unmatched_decodes
            )?;
        }
        let m = &self.macro_average;
        writeln!(
            f,
            "{:<w$}  {:>7.4}  {:>7.4}  {:>7.4}",
            "macro", m.balanced_accuracy, m.cohen_kappa, m.weighted_f1
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn worked_example() {
        let m = ConfusionMatrix::from_pairs(2, &[0, 0, 1, 1], &[Some(0), Some(1), Some(1), Some(1)]);
        assert!((m.balanced_accuracy() - 0.75).abs() < 1e-15);
        assert!((m.cohen_kappa() - 0.5).abs() < 1e-15);
        assert!((m.weighted_f1() - 0.5 * (2.0 / 3.0 + 0.8)).abs() < 1e-15);
    }

    #[test]
    fn perfect_predictions() {
        let m = ConfusionMatrix::from_pairs(3, &[0, 1, 2, 2], &[Some(0), Some(1), Some(2), Some(2)]);
        assert_eq!(m.balanced_accuracy(), 1.0);
        assert_eq!(m.cohen_kappa(), 1.0);
        assert_eq!(m.weighted_f1(), 1.0);
        let single = ConfusionMatrix::from_pairs(2, &[1, 1], &[Some(1), Some(1)]);
        assert_eq!(single.cohen_kappa(), 1.0);
    }

    #[test]
    fn unmatched_is_wrong() {
        let m = ConfusionMatrix::from_pairs(2, &[0, 1], &[None, Some(1)]);
        assert_eq!(m.unmatched(), 1);
        assert_eq!(m.balanced_accuracy(), 0.5);
        let r = MetricReport::from_confusions(&BTreeMap::from([("t".to_string(), m)])).unwrap();
        assert_eq!(r.tasks["t"].unmatched_decodes, 1);
        assert!(r.to_string().contains("macro"));
    }

    #[test]
    fn empty_report_errors() {
        let e = BTreeMap::from([("t".to_string(), ConfusionMatrix::new(2))]);
        assert!(MetricReport::from_confusions(&e).is_err());
    }

    proptest! {
        #[test]
        fn bounded(cells in proptest::collection::vec(0u64..20, 9)) {
            let counts: Vec<Vec<u64>> = cells.chunks(3).map(|c| c.to_vec()).collect();
            let m = ConfusionMatrix::from_counts(counts);
            prop_assume!(m.total() > 0);
            prop_assert!((0.0..=1.0).contains(&m.balanced_accuracy()));
            prop_assert!((0.0..=1.0 + 1e-12).contains(&m.weighted_f1()));
            prop_assert!((-1.0..=1.0 + 1e-12).contains(&m.cohen_kappa()));
        }
    }
}
