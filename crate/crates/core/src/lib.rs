//! Query-based EEG-to-language decoding on a small, fully differentiable
//! stack: a frozen patch encoder, task-aware query selection, a dual-branch
//! cross-attention connector and a frozen byte-level causal LM, with
//! instruction-corpus tooling, multi-task training, metrics and routing
//! analytics.

// Numeric kernels index several buffers in lockstep, and `!(x > 0.0)`
// deliberately rejects NaN.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod analytics;
pub mod autograd;
pub mod checkpoint;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod instruct;
pub mod lm;
pub mod metrics;
pub mod model;
pub mod nlc;
pub mod nn;
pub mod optim;
pub mod signal;
pub mod tensor;
pub mod tqs;
pub mod train;

pub use analytics::{ChannelAttentionMap, Projection, SimilarityMatrix};
pub use checkpoint::Checkpoint;
pub use encoder::{EegEncoder, EncoderConfig, TokenEmbedding};
pub use error::{Error, Result};
pub use instruct::{InstructionSample, TemplateRegistry};
pub use lm::{CausalLm, LmConfig, WarmupConfig};
pub use metrics::{ConfusionMatrix, MetricReport, TaskMetrics};
pub use model::{ModelConfig, NeuroQuery};
pub use nlc::{Nlc, NlcConfig};
pub use optim::{AdamWConfig, OptimizerState};
pub use signal::{EegRecording, PatchGrid, PreprocessSpec, SynthFamily};
pub use tensor::{Module, Param, Tensor};
pub use tqs::{RouterGrad, RoutingDecision, RoutingRecord, Tqs, TqsConfig};
pub use train::{Evaluation, JointReport, RunArtifacts, Split, TaskSpec, TrainConfig, Trainer};
