//! Train/validation/test partitioning.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::recording::EegRecording;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitStrategy {
    /// Whole subjects go to one split; subjects shuffled by seed.
    BySubjectRatio,
    /// Samples ordered by trial number and cut into contiguous blocks.
    ByTrialChrono,
    /// Whole sessions go to one split; sessions shuffled by seed.
    BySessionRatio,
    /// Individual samples shuffled by seed.
    RandomRatio,
}

impl std::str::FromStr for SplitStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "by_subject_ratio" => Ok(Self::BySubjectRatio),
            "by_trial_chrono" => Ok(Self::ByTrialChrono),
            "by_session_ratio" => Ok(Self::BySessionRatio),
            "random_ratio" => Ok(Self::RandomRatio),
            _ => Err(Error::Config(format!("unknown split strategy `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub strategy: SplitStrategy,
    /// `(train, val, test)`, summing to 1.
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl SplitPlan {
    pub fn new(strategy: SplitStrategy, ratios: [f64; 3], seed: u64) -> Result<Self> {
        let plan = Self { strategy, ratios, seed };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.ratios.iter().sum();
        if self.ratios.iter().any(|r| !(*r >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split ratios {:?} must be nonnegative and sum to 1",
                self.ratios
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn get(&self, name: &str) -> Option<&[usize]> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

/// Largest-remainder apportionment of `n` groups, then at least one group
/// for every split with a nonzero ratio (taken from the currently largest).
fn allocate(n: usize, ratios: &[f64; 3]) -> Result<[usize; 3]> {
    let needed = ratios.iter().filter(|r| **r > 0.0).count();
    if n < needed {
        return Err(Error::Planning(format!("{n} groups cannot fill {needed} nonempty splits")));
    }
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts = [0usize; 3];
    for i in 0..3 {
        counts[i] = exact[i].floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        (exact[b] - exact[b].floor())
            .total_cmp(&(exact[a] - exact[a].floor()))
            .then(a.cmp(&b))
    });
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if ratios[i] > 0.0 {
            counts[i] += 1;
            left -= 1;
        }
    }
    for i in 0..3 {
        if ratios[i] > 0.0 && counts[i] == 0 {
            let donor = (0..3).max_by_key(|&j| (counts[j], std::cmp::Reverse(j))).expect("three splits");
            counts[donor] -= 1;
            counts[i] = 1;
        }
    }
    Ok(counts)
}

/// Deterministic partition of `samples` into train/val/test index lists.
pub fn plan_splits(samples: &[EegRecording], plan: &SplitPlan) -> Result<Splits> {
    plan.validate()?;
    let key = |i: usize, r: &EegRecording| -> Result<String> {
        let v = match plan.strategy {
            SplitStrategy::BySubjectRatio => r.subject_id.clone(),
            SplitStrategy::BySessionRatio => r.session_id.clone(),
            SplitStrategy::ByTrialChrono | SplitStrategy::RandomRatio => Some(i.to_string()),
        };
        v.ok_or_else(|| Error::Planning(format!("sample {i} has no grouping key for {:?}", plan.strategy)))
    };
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, r) in samples.iter().enumerate() {
        groups.entry(key(i, r)?).or_default().push(i);
    }
    let mut groups: Vec<Vec<usize>> = groups.into_values().collect();
    match plan.strategy {
        SplitStrategy::ByTrialChrono => {
            groups.sort_by_key(|g| (samples[g[0]].trial.map_or(g[0] as u64, u64::from), g[0]));
        }
        _ => {
            groups.sort_by_key(|g| g[0]);
            groups.shuffle(&mut ChaCha8Rng::seed_from_u64(plan.seed));
        }
    }
    let counts = allocate(groups.len(), &plan.ratios)?;
    let mut out = Splits::default();
    let mut it = groups.into_iter();
    for (dest, n) in [&mut out.train, &mut out.val, &mut out.test].into_iter().zip(counts) {
        for g in it.by_ref().take(n) {
            dest.extend(g);
        }
        dest.sort_unstable();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn samples(n: usize, subjects: usize) -> Vec<EegRecording> {
        (0..n)
            .map(|i| {
                let mut r = EegRecording::new(1.0, vec![vec![0.0]], "d", "l").unwrap();
                r.subject_id = Some(format!("s{}", i % subjects));
                r.session_id = Some(format!("x{}", i % 3));
                r.trial = Some((n - i) as u32);
                r
            })
            .collect()
    }

    #[test]
    fn ten_subjects_eight_one_one() {
        let data = samples(50, 10);
        let plan = SplitPlan::new(SplitStrategy::BySubjectRatio, [0.8, 0.1, 0.1], 7).unwrap();
        let s = plan_splits(&data, &plan).unwrap();
        let subj = |idx: &[usize]| idx.iter().map(|&i| data[i].subject_id.clone().unwrap()).collect::<BTreeSet<_>>();
        assert_eq!(subj(&s.train).len(), 8);
        assert_eq!(subj(&s.val).len(), 1);
        assert_eq!(subj(&s.test).len(), 1);
        assert!(subj(&s.train).is_disjoint(&subj(&s.test)));
    }

    #[test]
    fn all_train() {
        let data = samples(5, 5);
        let plan = SplitPlan::new(SplitStrategy::RandomRatio, [1.0, 0.0, 0.0], 0).unwrap();
        let s = plan_splits(&data, &plan).unwrap();
        assert_eq!(s.train, vec![0, 1, 2, 3, 4]);
        assert!(s.val.is_empty() && s.test.is_empty());
    }

    #[test]
    fn chrono_follows_trial_order() {
        let data = samples(10, 2);
        let plan = SplitPlan::new(SplitStrategy::ByTrialChrono, [0.6, 0.2, 0.2], 0).unwrap();
        let s = plan_splits(&data, &plan).unwrap();
        // trial numbers run backwards, so the latest indices train
        assert_eq!(s.train, vec![4, 5, 6, 7, 8, 9]);
        assert_eq!(s.val, vec![2, 3]);
        assert_eq!(s.test, vec![0, 1]);
    }

    #[test]
    fn too_few_groups() {
        let data = samples(10, 2);
        let plan = SplitPlan::new(SplitStrategy::BySubjectRatio, [0.8, 0.1, 0.1], 0).unwrap();
        assert!(matches!(plan_splits(&data, &plan), Err(Error::Planning(_))));
    }

    #[test]
    fn bad_ratios() {
        assert!(SplitPlan::new(SplitStrategy::RandomRatio, [0.5, 0.5, 0.5], 0).is_err());
    }

    proptest! {
        #[test]
        fn partition_property(n in 3usize..60, subjects in 3usize..12, seed in any::<u64>(), strat in 0usize..4) {
            let strategy = [SplitStrategy::BySubjectRatio, SplitStrategy::ByTrialChrono, SplitStrategy::BySessionRatio, SplitStrategy::RandomRatio][strat];
            let data = samples(n, subjects.min(n));
            let plan = SplitPlan::new(strategy, [0.8, 0.1, 0.1], seed).unwrap();
            let s = plan_splits(&data, &plan).unwrap();
            let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            prop_assert_eq!(&s, &plan_splits(&data, &plan).unwrap());
            if strategy == SplitStrategy::BySubjectRatio {
                for a in [&s.train, &s.val, &s.test] {
                    for b in [&s.train, &s.val, &s.test] {
                        if !std::ptr::eq(a, b) {
                            for &i in a.iter() {
                                for &j in b.iter() {
                                    prop_assert_ne!(&data[i].subject_id, &data[j].subject_id);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}
