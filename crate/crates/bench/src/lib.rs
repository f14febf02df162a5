//! Shared fixtures for the pipeline benchmarks.

use neuroquery::signal::{preprocess_to_patches, synth_task, SynthSpec};
use neuroquery::{EegRecording, NeuroQuery, PatchGrid, SynthFamily, TokenEmbedding, TrainConfig};

pub fn recording(channels: usize, samples: usize, rate: f64) -> EegRecording {
    let spec = SynthSpec::new(SynthFamily::A, 2, channels, samples, rate, 1, 7);
    synth_task(&spec, "bench").expect("synthetic task").remove(0)
}

/// Default-config model plus one preprocessed, encoded sample.
pub fn model_and_tokens() -> (TrainConfig, NeuroQuery, PatchGrid, TokenEmbedding) {
    let cfg = TrainConfig::default();
    let model = NeuroQuery::new(cfg.model_config()).expect("model");
    let d = &cfg.data;
    let grid = preprocess_to_patches(&recording(d.channels, d.samples, d.rate), &d.preprocess, d.patch_len).expect("patches");
    let tokens = model.encode(&grid).expect("encode");
    (cfg, model, grid, tokens)
}
