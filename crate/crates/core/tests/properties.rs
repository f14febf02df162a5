//! End-to-end behaviour of trained runs. Each test trains real models, so
//! runs are shared through `OnceLock` where the config is the same.

use std::fs;
use std::sync::OnceLock;

use neuroquery::analytics::{channel_attention, cluster_separation, emit_figures, pca_project, score_vectors};
use neuroquery::train::{joint_vs_individual, RunArtifacts, TaskSpec};
use neuroquery::{SynthFamily, TrainConfig, Trainer};

fn default_run() -> &'static RunArtifacts {
    static RUN: OnceLock<RunArtifacts> = OnceLock::new();
    RUN.get_or_init(|| Trainer::new(TrainConfig::default(), None).unwrap().run().unwrap())
}

/// Two families on disjoint channel pairs, trained hard enough for the
/// connector's spatial attention to settle.
fn two_family_config() -> TrainConfig {
    TrainConfig {
        base_lr: 3e-3,
        epochs: 20,
        tasks: vec![
            TaskSpec::synthetic("a1", SynthFamily::A, 2, 400, 1),
            TaskSpec::synthetic("b1", SynthFamily::B, 2, 400, 2),
        ],
        ..Default::default()
    }
}

fn two_family_run() -> &'static (tempfile::TempDir, RunArtifacts) {
    static RUN: OnceLock<(tempfile::TempDir, RunArtifacts)> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let art = Trainer::new(two_family_config(), Some(dir.path())).unwrap().run().unwrap();
        (dir, art)
    })
}

fn moving_average(xs: &[f64], w: usize) -> Vec<f64> {
    xs.windows(w).map(|s| s.iter().sum::<f64>() / w as f64).collect()
}

#[test]
fn loss_moving_average_falls_over_first_200_steps() {
    let losses = &default_run().losses;
    assert!(losses.len() >= 200, "{} steps", losses.len());
    let ma = moving_average(&losses[..200], 20);
    let first = ma[0];
    let last = *ma.last().unwrap();
    assert!(last < first, "20-step mean {first:.4} -> {last:.4}");
    for (i, chunk) in ma.chunks(ma.len() / 4).collect::<Vec<_>>().windows(2).enumerate() {
        let a = chunk[0].iter().sum::<f64>() / chunk[0].len() as f64;
        let b = chunk[1].iter().sum::<f64>() / chunk[1].len() as f64;
        assert!(b < a, "quarter {i}: {a:.4} -> {b:.4}");
    }
}

#[test]
fn decodes_stay_in_label_vocabulary() {
    let report = &default_run().test.report;
    let (n, unmatched) = report
        .tasks
        .values()
        .fold((0, 0), |(n, u), t| (n + t.n_samples, u + t.unmatched_decodes));
    let rate = 1.0 - unmatched as f64 / n as f64;
    assert!(rate >= 0.95, "{unmatched} of {n} decodes outside the label set");
}

#[test]
fn spatial_attention_prefers_driven_channels() {
    let (_, art) = two_family_run();
    for (task, fam) in [("a1", SynthFamily::A), ("b1", SynthFamily::B)] {
        let map = channel_attention(&art.test.traces, task).unwrap();
        let c = map.mass.len();
        let driven: f64 = fam.active_channels().iter().map(|&i| map.mass[i]).sum();
        assert!(
            driven > 2.0 / c as f64,
            "{task}: {driven:.3} on driven channels, map {:?}",
            map.mass
        );
    }
}

#[test]
fn routing_scores_separate_families_in_pca() {
    let (_, art) = two_family_run();
    let vectors = score_vectors(&art.routing);
    let data: Vec<Vec<f64>> = vectors.iter().map(|v| v.2.clone()).collect();
    let groups: Vec<String> = vectors.iter().map(|v| v.0.clone()).collect();
    let proj = pca_project(&data, 2).unwrap();
    assert!(!proj.degenerate);
    let sep = cluster_separation(&proj.coords, &groups).unwrap();
    assert!(
        sep.inter_centroid > sep.intra_spread,
        "centroids {:.4} apart, spread {:.4}",
        sep.inter_centroid,
        sep.intra_spread
    );
}

#[test]
fn figures_are_deterministic() {
    let (dir, _) = two_family_run();
    let first: Vec<(std::path::PathBuf, Vec<u8>)> = emit_figures(dir.path())
        .unwrap()
        .into_iter()
        .map(|p| {
            let bytes = fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect();
    assert!(first.iter().any(|(p, _)| p.extension().is_some_and(|e| e == "svg")));
    for (p, bytes) in &first {
        fs::remove_file(p).unwrap();
        assert!(!bytes.is_empty(), "{}", p.display());
    }
    let second = emit_figures(dir.path()).unwrap();
    assert_eq!(second, first.iter().map(|f| f.0.clone()).collect::<Vec<_>>());
    for (p, bytes) in &first {
        assert_eq!(&fs::read(p).unwrap(), bytes, "{}", p.display());
    }
}

#[test]
fn joint_training_on_identical_tasks_costs_nothing() {
    let cfg = TrainConfig {
        tasks: vec![
            TaskSpec::synthetic("x", SynthFamily::A, 2, 200, 5),
            TaskSpec::synthetic("y", SynthFamily::A, 2, 200, 5),
        ],
        ..Default::default()
    };
    let rep = joint_vs_individual(&cfg, "x", "y").unwrap();
    for t in ["x", "y"] {
        assert!(rep.deltas[t] >= -0.02, "{t}: joint minus individual {:+.4}", rep.deltas[t]);
    }
}
