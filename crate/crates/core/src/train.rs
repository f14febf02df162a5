//! Multi-task instruction training, evaluation and the joint-vs-individual
//! harness.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::checkpoint::Checkpoint;
use crate::encoder::{EegEncoder, EncoderConfig, TokenEmbedding};
use crate::error::{Error, Result};
use crate::instruct::{self, CorpusEntry, TemplateRegistry};
use crate::lm::{label_match, CausalLm, LmConfig, WarmupConfig};
use crate::metrics::{ConfusionMatrix, MetricReport, TaskMetrics};
use crate::model::{ModelConfig, NeuroQuery};
use crate::optim::{AdamWConfig, OptimizerState};
use crate::signal::{
    plan_splits, preprocess_to_patches, synth_task, EegRecording, LineFreq, NormMode, PatchGrid, PreprocessSpec, SplitPlan, SplitStrategy,
    SynthFamily, SynthSpec,
};
use crate::tensor::Module;
use crate::tqs::{append_routing_log, RoutingRecord, TqsConfig};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeSet {
    pub encoder: bool,
    pub lm: bool,
}

impl Default for FreezeSet {
    fn default() -> Self {
        Self { encoder: true, lm: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum TaskSource {
    Synthetic {
        family: SynthFamily,
        n_classes: usize,
        n_samples: usize,
        seed: u64,
        #[serde(default = "one")]
        amplitude: f64,
    },
    /// Instruction JSONL whose `eeg` fields point at `.eegb` files.
    Corpus {
        path: PathBuf,
        /// Class names; defaults to the built-in registry entry for the task id.
        #[serde(default)]
        labels: Option<Vec<String>>,
    },
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: String,
    #[serde(flatten)]
    pub source: TaskSource,
}

impl TaskSpec {
    pub fn synthetic(id: &str, family: SynthFamily, n_classes: usize, n_samples: usize, seed: u64) -> Self {
        Self {
            id: id.into(),
            source: TaskSource::Synthetic {
                family,
                n_classes,
                n_samples,
                seed,
                amplitude: 1.0,
            },
        }
    }
}

/// Widths and depths of the stand-in encoder and LM.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelDims {
    pub d_e: usize,
    pub d_l: usize,
    pub encoder_layers: usize,
    pub lm_layers: usize,
    pub heads: usize,
    pub nlc_heads: usize,
    pub max_seq: usize,
    pub encoder_seed: u64,
    pub lm_seed: u64,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            d_e: 64,
            d_l: 64,
            encoder_layers: 2,
            lm_layers: 2,
            heads: 4,
            nlc_heads: 8,
            max_seq: 256,
            encoder_seed: 7,
            lm_seed: 11,
        }
    }
}

/// Shape of the synthetic recordings and how every recording is prepared.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub channels: usize,
    pub samples: usize,
    pub rate: f64,
    pub patch_len: usize,
    pub preprocess: PreprocessSpec,
    pub split: SplitPlan,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            channels: 8,
            samples: 200,
            rate: 100.0,
            patch_len: 50,
            preprocess: PreprocessSpec {
                band_low: 0.5,
                band_high: 45.0,
                line_freq: LineFreq::Off,
                target_rate: 100.0,
                norm: NormMode::Zscore,
            },
            split: SplitPlan {
                strategy: SplitStrategy::RandomRatio,
                ratios: [0.6, 0.2, 0.2],
                seed: 0,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub seed: u64,
    pub tasks: Vec<TaskSpec>,
    pub freeze_set: FreezeSet,
    pub tqs: TqsConfig,
    pub model: ModelDims,
    pub data: DataConfig,
    pub lm_warmup: WarmupConfig,
    /// Write per-step routing decisions to `routing.jsonl`.
    pub log_routing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            base_lr: 4e-5,
            weight_decay: 0.01,
            warmup_ratio: 0.03,
            seed: 0,
            tasks: vec![
                TaskSpec::synthetic("a1", SynthFamily::A, 2, 400, 1),
                TaskSpec::synthetic("a2", SynthFamily::A, 2, 400, 2),
            ],
            freeze_set: FreezeSet::default(),
            tqs: TqsConfig::default(),
            model: ModelDims::default(),
            data: DataConfig::default(),
            lm_warmup: WarmupConfig::default(),
            log_routing: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config(format!("warmup_ratio {} outside [0, 1]", self.warmup_ratio)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if self.tasks.is_empty() {
            return Err(Error::Config("no tasks configured".into()));
        }
        let mut ids = HashSet::new();
        for t in &self.tasks {
            if !ids.insert(&t.id) {
                return Err(Error::Config(format!("duplicate task id `{}`", t.id)));
            }
        }
        self.data.split.validate()?;
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            encoder: EncoderConfig {
                d_e: m.d_e,
                n_layers: m.encoder_layers,
                n_heads: m.heads,
                patch_len: self.data.patch_len,
                seed: m.encoder_seed,
                ..Default::default()
            },
            lm: LmConfig {
                d_l: m.d_l,
                n_layers: m.lm_layers,
                n_heads: m.heads,
                max_seq: m.max_seq,
                seed: m.lm_seed,
                ..Default::default()
            },
            tqs: self.tqs.clone(),
            nlc_heads: m.nlc_heads,
            seed: self.seed,
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Same run restricted to the listed tasks.
    pub fn with_tasks(&self, ids: &[&str]) -> Result<Self> {
        let tasks = ids
            .iter()
            .map(|id| {
                self.tasks
                    .iter()
                    .find(|t| t.id == *id)
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("unknown task `{id}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { tasks, ..self.clone() })
    }
}

/// One prepared sample: prompt, answer, patches and cached encoder tokens.
#[derive(Clone, Debug)]
pub struct Example {
    pub id: String,
    pub task: String,
    pub label: String,
    pub prompt: String,
    pub grid: PatchGrid,
    pub tokens: TokenEmbedding,
}

#[derive(Clone, Debug)]
pub struct TaskData {
    pub id: String,
    pub labels: Vec<String>,
    pub prompts: Vec<String>,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

impl TaskData {
    pub fn split(&self, split: Split) -> &[Example] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            _ => Err(Error::Config(format!("unknown split `{s}`"))),
        }
    }
}

/// FNV-1a of `s`, mixed into `seed`; gives each task its own stream.
fn mix_seed(seed: u64, s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

struct RawTask {
    recordings: Vec<EegRecording>,
    prompts: Vec<String>,
    labels: Vec<String>,
    templates: Vec<String>,
}

fn load_raw(cfg: &TrainConfig, spec: &TaskSpec) -> Result<RawTask> {
    match &spec.source {
        TaskSource::Synthetic {
            family,
            n_classes,
            n_samples,
            seed,
            amplitude,
        } => {
            let d = &cfg.data;
            let s = SynthSpec {
                amplitude: *amplitude,
                ..SynthSpec::new(*family, *n_classes, d.channels, d.samples, d.rate, *n_samples, *seed)
            };
            let recordings = synth_task(&s, &spec.id)?;
            let labels: Vec<&str> = family.labels()[..*n_classes].to_vec();
            let mut reg = TemplateRegistry::new();
            reg.add_synthetic(&spec.id, &labels)?;
            let entries: Vec<CorpusEntry> = recordings
                .iter()
                .enumerate()
                .map(|(i, r)| CorpusEntry {
                    task: spec.id.clone(),
                    label: r.label.clone(),
                    eeg: format!("{}-{i}", spec.id),
                })
                .collect();
            let corpus = instruct::build_corpus(&entries, &reg, mix_seed(cfg.seed, &spec.id))?;
            let t = reg.get(&spec.id).expect("just registered");
            Ok(RawTask {
                recordings,
                prompts: corpus.iter().map(|s| s.prompt().to_string()).collect(),
                labels: t.labels.clone(),
                templates: t.templates.iter().map(|t| t.text.clone()).collect(),
            })
        }
        TaskSource::Corpus { path, labels } => {
            let samples = instruct::read_corpus(path)?;
            let base = path.parent().unwrap_or(Path::new("."));
            let builtin = TemplateRegistry::builtin();
            let labels = match labels {
                Some(l) => l.clone(),
                None => builtin
                    .labels(&spec.id)
                    .ok_or_else(|| Error::Config(format!("task `{}` needs explicit labels", spec.id)))?
                    .to_vec(),
            };
            let mut recordings = Vec::new();
            let mut prompts = Vec::new();
            for s in samples.iter().filter(|s| s.task == spec.id) {
                let p = Path::new(&s.eeg);
                let p = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
                let mut rec = EegRecording::read_eegb(&p)?;
                rec.label = s.label.clone();
                recordings.push(rec);
                prompts.push(s.prompt().to_string());
            }
            if recordings.is_empty() {
                return Err(Error::EmptySample(format!(
                    "corpus {} has no samples for `{}`",
                    path.display(),
                    spec.id
                )));
            }
            let mut templates: Vec<String> = match builtin.get(&spec.id) {
                Some(t) => t.templates.iter().map(|t| t.text.clone()).collect(),
                None => prompts.clone(),
            };
            templates.sort();
            templates.dedup();
            Ok(RawTask {
                recordings,
                prompts,
                labels,
                templates,
            })
        }
    }
}

/// Generates or loads, preprocesses, splits and encodes every task.
pub fn prepare_tasks(cfg: &TrainConfig, encoder: &EegEncoder) -> Result<Vec<TaskData>> {
    cfg.tasks
        .iter()
        .map(|spec| {
            let raw = load_raw(cfg, spec)?;
            let plan = SplitPlan {
                seed: mix_seed(cfg.data.split.seed, &spec.id),
                ..cfg.data.split.clone()
            };
            let splits = plan_splits(&raw.recordings, &plan)?;
            let make = |idx: &[usize]| -> Result<Vec<Example>> {
                idx.iter()
                    .map(|&i| {
                        let rec = &raw.recordings[i];
                        if !raw.labels.contains(&rec.label) {
                            return Err(Error::Config(format!("label `{}` not in task `{}`", rec.label, spec.id)));
                        }
                        let grid = preprocess_to_patches(rec, &cfg.data.preprocess, cfg.data.patch_len)?;
                        let tokens = encoder.encode(&grid)?;
                        Ok(Example {
                            id: format!("{}-{i:05}", spec.id),
                            task: spec.id.clone(),
                            label: rec.label.clone(),
                            prompt: raw.prompts[i].clone(),
                            grid,
                            tokens,
                        })
                    })
                    .collect()
            };
            Ok(TaskData {
                id: spec.id.clone(),
                labels: raw.labels.clone(),
                prompts: raw.templates.clone(),
                train: make(&splits.train)?,
                val: make(&splits.val)?,
                test: make(&splits.test)?,
            })
        })
        .collect()
}

/// Every `(template, label)` pair of the given tasks.
pub fn warmup_examples(tasks: &[TaskData]) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for t in tasks {
        for p in &t.prompts {
            for l in &t.labels {
                out.push((p.clone(), l.clone()));
            }
        }
    }
    out
}

/// Scheduler and progress state carried by checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub step: u64,
    /// Remaining train indices per task for the current epoch.
    pub queues: Vec<Vec<usize>>,
    /// ChaCha word position, decimal.
    pub rng_word_pos: String,
    pub losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub step: u64,
    pub task: String,
    pub samples: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub task_id: String,
    pub sample_id: String,
    pub channel_mass: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub task: String,
    pub label: String,
    pub decoded: String,
    pub matched: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub split: Split,
    pub report: MetricReport,
    pub routing: Vec<RoutingRecord>,
    pub traces: Vec<AttentionTrace>,
    pub predictions: Vec<Prediction>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fingerprints {
    pub encoder_before: String,
    pub encoder_after: String,
    pub lm_before: String,
    pub lm_after: String,
}

#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub run_dir: Option<PathBuf>,
    pub losses: Vec<f64>,
    pub total_steps: u64,
    pub fingerprints: Fingerprints,
    pub batches: Vec<BatchRecord>,
    pub checkpoints: Vec<PathBuf>,
    pub test: Evaluation,
    /// Routing of every sample in every split under the final weights.
    pub routing: Vec<RoutingRecord>,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: NeuroQuery,
    pub tasks: Vec<TaskData>,
    pub optimizer: OptimizerState,
    pub state: TrainState,
    pub batches: Vec<BatchRecord>,
    pub checkpoints: Vec<PathBuf>,
    fingerprints: (String, String),
    rng: ChaCha8Rng,
    run_dir: Option<PathBuf>,
    routing_log: Option<BufWriter<File>>,
}

pub fn total_steps(cfg: &TrainConfig, tasks: &[TaskData]) -> u64 {
    let per_epoch: u64 = tasks.iter().map(|t| t.train.len().div_ceil(cfg.batch_size) as u64).sum();
    per_epoch * cfg.epochs as u64
}

/// Warms a fresh LM on the templates and labels of `tasks`.
pub fn warmed_lm(cfg: &TrainConfig, tasks: &[TaskData]) -> Result<CausalLm> {
    let mc = cfg.model_config();
    let mut lm = CausalLm::new(mc.lm.clone())?;
    let (c, t) = tasks
        .iter()
        .flat_map(|t| t.train.first())
        .map(|e| (e.tokens.channels, e.tokens.times))
        .next()
        .ok_or_else(|| Error::EmptySample("no training samples".into()))?;
    let wcfg = WarmupConfig {
        seed: cfg.model.lm_seed,
        ..cfg.lm_warmup.clone()
    };
    lm.warm_up(&warmup_examples(tasks), mc.prefix_rows(c, t), &wcfg)?;
    Ok(lm)
}

impl Trainer {
    /// Builds data and model and warms the LM on this run's tasks.
    pub fn new(cfg: TrainConfig, run_dir: Option<&Path>) -> Result<Self> {
        Self::with_lm(cfg, None, run_dir)
    }

    /// As [`Trainer::new`] with an already warmed LM.
    pub fn with_lm(cfg: TrainConfig, lm: Option<CausalLm>, run_dir: Option<&Path>) -> Result<Self> {
        cfg.validate()?;
        let mut model = NeuroQuery::new(cfg.model_config())?;
        let tasks = prepare_tasks(&cfg, &model.encoder)?;
        model.lm = match lm {
            Some(lm) => lm,
            None => warmed_lm(&cfg, &tasks)?,
        };
        model.lm.set_trainable(false);
        apply_freeze(&mut model, &cfg.freeze_set);
        let total = total_steps(&cfg, &tasks);
        let optimizer = OptimizerState::new(AdamWConfig::new(cfg.base_lr, cfg.weight_decay, cfg.warmup_ratio, total)?);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let queues = tasks.iter().map(|t| shuffled(t.train.len(), &mut rng)).collect();
        let state = TrainState {
            epoch: 0,
            step: 0,
            queues,
            rng_word_pos: String::new(),
            losses: Vec::new(),
        };
        Self::assemble(cfg, model, tasks, optimizer, state, rng, run_dir, false)
    }

    /// Continues a run from a checkpoint; data is regenerated from the
    /// stored config and every weight is restored.
    pub fn resume(ckpt: &Path, run_dir: Option<&Path>) -> Result<Self> {
        let ck = Checkpoint::load(ckpt)?;
        let extra: CheckpointExtra = serde_json::from_value(ck.header.extra.clone())?;
        let cfg = extra.config;
        cfg.validate()?;
        let mut model = NeuroQuery::new(cfg.model_config())?;
        ck.restore_params(&mut model)?;
        apply_freeze(&mut model, &cfg.freeze_set);
        let tasks = prepare_tasks(&cfg, &model.encoder)?;
        let optimizer = ck.optimizer()?.ok_or_else(|| Error::Checkpoint("no optimizer state".into()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let pos: u128 = extra
            .state
            .rng_word_pos
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad RNG position `{}`", extra.state.rng_word_pos)))?;
        rng.set_word_pos(pos);
        if extra.state.queues.len() != tasks.len() {
            return Err(Error::Checkpoint("task count differs from checkpoint".into()));
        }
        let mut t = Self::assemble(cfg, model, tasks, optimizer, extra.state, rng, run_dir, true)?;
        t.fingerprints = extra.fingerprints_before;
        Ok(t)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        config: TrainConfig,
        model: NeuroQuery,
        tasks: Vec<TaskData>,
        optimizer: OptimizerState,
        state: TrainState,
        rng: ChaCha8Rng,
        run_dir: Option<&Path>,
        append: bool,
    ) -> Result<Self> {
        let routing_log = match run_dir {
            Some(d) => {
                fs::create_dir_all(d.join("checkpoints"))?;
                fs::write(d.join("config.json"), serde_json::to_string_pretty(&config)?)?;
                if config.log_routing {
                    let f = OpenOptions::new()
                        .create(true)
                        .append(append)
                        .write(true)
                        .truncate(!append)
                        .open(d.join("routing.jsonl"))?;
                    Some(BufWriter::new(f))
                } else {
                    None
                }
            }
            None => None,
        };
        let fingerprints = (model.encoder.fingerprint(), model.lm.fingerprint());
        Ok(Self {
            config,
            model,
            tasks,
            optimizer,
            state,
            batches: Vec::new(),
            checkpoints: Vec::new(),
            fingerprints,
            rng,
            run_dir: run_dir.map(Path::to_path_buf),
            routing_log,
        })
    }

    pub fn total_steps(&self) -> u64 {
        self.optimizer.config.total_steps
    }

    pub fn is_done(&self) -> bool {
        self.state.queues.iter().all(Vec::is_empty) && self.state.epoch + 1 >= self.config.epochs
    }

    fn next_batch(&mut self) -> Option<(usize, Vec<usize>)> {
        if self.state.queues.iter().all(Vec::is_empty) {
            if self.state.epoch + 1 >= self.config.epochs {
                return None;
            }
            self.state.epoch += 1;
            for (q, t) in self.state.queues.iter_mut().zip(&self.tasks) {
                *q = shuffled(t.train.len(), &mut self.rng);
            }
        }
        let total: usize = self.state.queues.iter().map(Vec::len).sum();
        let mut r = self.rng.random_range(0..total);
        let task = self
            .state
            .queues
            .iter()
            .position(|q| {
                if r < q.len() {
                    true
                } else {
                    r -= q.len();
                    false
                }
            })
            .expect("r < total");
        let n = self.config.batch_size.min(self.state.queues[task].len());
        Some((task, self.state.queues[task].drain(..n).collect()))
    }

    /// One optimizer update on a single-task batch; `None` once finished.
    pub fn step(&mut self) -> Result<Option<f64>> {
        let Some((task, idx)) = self.next_batch() else { return Ok(None) };
        let step = self.state.step;
        let scale = 1.0 / idx.len() as f64;
        let cached = self.config.freeze_set.encoder;
        let mut total = 0.0;
        let mut records = Vec::with_capacity(2 * idx.len());
        let data = &self.tasks[task];
        for &i in &idx {
            let ex = &data.train[i];
            let mut g = Graph::new();
            let fwd = if cached {
                self.model.forward_cached(&mut g, &ex.tokens, &ex.prompt, &ex.label)?
            } else {
                self.model.forward_grid(&mut g, &ex.grid, &ex.prompt, &ex.label)?
            };
            let value = g.scalar(fwd.loss);
            if !value.is_finite() {
                self.model.zero_grad();
                return Err(Error::NonFiniteLoss { step, value });
            }
            total += value * scale;
            let loss = g.scale(fwd.loss, scale);
            g.backward(loss)?.apply_to(&mut self.model)?;
            for mut d in [fwd.temporal, fwd.spatial] {
                d.task_id = data.id.clone();
                d.sample_id = ex.id.clone();
                d.step = step;
                records.push(d.record());
            }
        }
        if let Err(e) = self.optimizer.step(&mut self.model) {
            self.model.zero_grad();
            return Err(e);
        }
        self.batches.push(BatchRecord {
            step,
            task: data.id.clone(),
            samples: idx.iter().map(|&i| data.train[i].id.clone()).collect(),
        });
        self.state.step += 1;
        self.state.losses.push(total);
        if let Some(w) = &mut self.routing_log {
            append_routing_log(w, &records)?;
        }
        if self.state.queues.iter().all(Vec::is_empty) {
            if let Some(dir) = self.run_dir.clone() {
                let path = dir.join("checkpoints").join(format!("epoch_{:03}.nqck", self.state.epoch + 1));
                self.save_checkpoint(&path)?;
                self.checkpoints.push(path);
            }
        }
        Ok(Some(total))
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut state = self.state.clone();
        state.rng_word_pos = self.rng.get_word_pos().to_string();
        let extra = CheckpointExtra {
            config: self.config.clone(),
            state,
            fingerprints_before: self.fingerprints.clone(),
        };
        Ok(Checkpoint::capture(
            &self.model,
            Some(&self.optimizer),
            serde_json::to_value(extra)?,
        ))
    }

    pub fn save_checkpoint(&mut self, path: &Path) -> Result<()> {
        if let Some(w) = &mut self.routing_log {
            w.flush()?;
        }
        self.checkpoint()?.save(path)
    }

    pub fn evaluate(&self, split: Split) -> Result<Evaluation> {
        evaluate_model(&self.model, &self.tasks, split, self.state.step)
    }

    /// Trains to completion, evaluates the test split and writes artifacts.
    pub fn run(&mut self) -> Result<RunArtifacts> {
        while self.step()?.is_some() {}
        if let Some(w) = &mut self.routing_log {
            w.flush()?;
        }
        let test = self.evaluate(Split::Test)?;
        let routing = final_routing(&self.model, &self.tasks, self.state.step)?;
        let fingerprints = Fingerprints {
            encoder_before: self.fingerprints.0.clone(),
            encoder_after: self.model.encoder.fingerprint(),
            lm_before: self.fingerprints.1.clone(),
            lm_after: self.model.lm.fingerprint(),
        };
        let art = RunArtifacts {
            run_dir: self.run_dir.clone(),
            losses: self.state.losses.clone(),
            total_steps: self.total_steps(),
            fingerprints,
            batches: self.batches.clone(),
            checkpoints: self.checkpoints.clone(),
            test,
            routing,
        };
        if let Some(dir) = &self.run_dir {
            write_artifacts(dir, &art, &self.optimizer.config)?;
        }
        Ok(art)
    }
}

/// Run config and model weights stored in a training checkpoint.
pub fn load_model(ckpt: &Path) -> Result<(TrainConfig, NeuroQuery)> {
    let ck = Checkpoint::load(ckpt)?;
    let extra: CheckpointExtra = serde_json::from_value(ck.header.extra.clone())?;
    let cfg = extra.config;
    cfg.validate()?;
    let mut model = NeuroQuery::new(cfg.model_config())?;
    ck.restore_params(&mut model)?;
    apply_freeze(&mut model, &cfg.freeze_set);
    Ok((cfg, model))
}

/// Regenerates the run's data and scores `split` with the stored weights.
pub fn evaluate_checkpoint(ckpt: &Path, split: Split) -> Result<Evaluation> {
    let (cfg, model) = load_model(ckpt)?;
    let tasks = prepare_tasks(&cfg, &model.encoder)?;
    let step = Checkpoint::load(ckpt)?.optimizer()?.map_or(0, |o| o.step);
    evaluate_model(&model, &tasks, split, step)
}

/// One recording through the run's preprocessing, patching and encoder.
pub fn encode_recording(cfg: &TrainConfig, model: &NeuroQuery, rec: &EegRecording) -> Result<TokenEmbedding> {
    let grid = preprocess_to_patches(rec, &cfg.data.preprocess, cfg.data.patch_len)?;
    model.encode(&grid)
}

#[derive(Serialize, Deserialize)]
struct CheckpointExtra {
    config: TrainConfig,
    state: TrainState,
    fingerprints_before: (String, String),
}

fn apply_freeze(model: &mut NeuroQuery, freeze: &FreezeSet) {
    model.encoder.set_trainable(!freeze.encoder);
    model.lm.set_trainable(!freeze.lm);
}

fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(rng);
    v
}

/// Greedy decoding of every sample in `split`, scored per task.
pub fn evaluate_model(model: &NeuroQuery, tasks: &[TaskData], split: Split, step: u64) -> Result<Evaluation> {
    let mut confusions = BTreeMap::new();
    let mut routing = Vec::new();
    let mut traces = Vec::new();
    let mut predictions = Vec::new();
    for t in tasks {
        let samples = t.split(split);
        if samples.is_empty() {
            return Err(Error::EmptySample(format!("task `{}` has an empty {split:?} split", t.id)));
        }
        let max_new = t.labels.iter().map(String::len).max().unwrap_or(1) + 1;
        let mut cm = ConfusionMatrix::new(t.labels.len());
        for ex in samples {
            let p = model.prefix(&ex.tokens)?;
            let decoded = model.decode(&p.f_prime, &ex.prompt, max_new)?;
            let matched = label_match(&decoded, &t.labels).map(str::to_string);
            let truth = t.labels.iter().position(|l| *l == ex.label).expect("validated label");
            cm.record(truth, matched.as_ref().and_then(|m| t.labels.iter().position(|l| l == m)));
            for mut d in [p.temporal, p.spatial] {
                d.task_id = t.id.clone();
                d.sample_id = ex.id.clone();
                d.step = step;
                routing.push(d.record());
            }
            traces.push(AttentionTrace {
                task_id: t.id.clone(),
                sample_id: ex.id.clone(),
                channel_mass: p.channel_mass,
            });
            predictions.push(Prediction {
                id: ex.id.clone(),
                task: t.id.clone(),
                label: ex.label.clone(),
                decoded,
                matched,
            });
        }
        confusions.insert(t.id.clone(), cm);
    }
    Ok(Evaluation {
        split,
        report: MetricReport::from_confusions(&confusions)?,
        routing,
        traces,
        predictions,
    })
}

/// Routing decisions for every sample of every split, without decoding.
pub fn final_routing(model: &NeuroQuery, tasks: &[TaskData], step: u64) -> Result<Vec<RoutingRecord>> {
    let mut out = Vec::new();
    for t in tasks {
        for split in [Split::Train, Split::Val, Split::Test] {
            for ex in t.split(split) {
                let p = model.prefix(&ex.tokens)?;
                for mut d in [p.temporal, p.spatial] {
                    d.task_id = t.id.clone();
                    d.sample_id = ex.id.clone();
                    d.step = step;
                    out.push(d.record());
                }
            }
        }
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_evaluation(dir: &Path, eval: &Evaluation) -> Result<()> {
    fs::write(dir.join("metrics.json"), eval.report.to_json()?)?;
    fs::write(dir.join("metrics.txt"), eval.report.to_string())?;
    let mut w = BufWriter::new(File::create(dir.join("eval_routing.jsonl"))?);
    append_routing_log(&mut w, &eval.routing)?;
    w.flush()?;
    write_jsonl(&dir.join("attention_traces.jsonl"), &eval.traces)?;
    write_jsonl(&dir.join("predictions.jsonl"), &eval.predictions)
}

fn write_artifacts(dir: &Path, art: &RunArtifacts, opt: &AdamWConfig) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.join("losses.csv"))?;
    w.write_record(["step", "loss", "lr"])?;
    for (i, l) in art.losses.iter().enumerate() {
        w.write_record([i.to_string(), format!("{l:.17e}"), format!("{:.17e}", opt.lr_at(i as u64))])?;
    }
    w.flush()?;
    write_jsonl(&dir.join("batches.jsonl"), &art.batches)?;
    fs::write(dir.join("fingerprints.json"), serde_json::to_string_pretty(&art.fingerprints)?)?;
    let mut w = BufWriter::new(File::create(dir.join("final_routing.jsonl"))?);
    append_routing_log(&mut w, &art.routing)?;
    w.flush()?;
    write_evaluation(dir, &art.test)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub tasks: BTreeMap<String, TaskMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointReport {
    pub tasks: [String; 2],
    pub runs: Vec<RunSummary>,
    /// Joint minus individual balanced accuracy, per task.
    pub deltas: BTreeMap<String, f64>,
}

/// Trains A alone, B alone and A+B jointly on identical per-task data and
/// a shared warmed LM, and compares test balanced accuracy.
pub fn joint_vs_individual(cfg: &TrainConfig, a: &str, b: &str) -> Result<JointReport> {
    if a == b {
        return Err(Error::Config("joint comparison needs two distinct task ids".into()));
    }
    let joint = cfg.with_tasks(&[a, b])?;
    joint.validate()?;
    let encoder = EegEncoder::new(joint.model_config().encoder)?;
    let lm = warmed_lm(&joint, &prepare_tasks(&joint, &encoder)?)?;
    let mut runs = Vec::new();
    for (name, ids) in [(a, vec![a]), (b, vec![b]), ("joint", vec![a, b])] {
        let c = cfg.with_tasks(&ids)?;
        let art = Trainer::with_lm(c, Some(lm.clone()), None)?.run()?;
        runs.push(RunSummary {
            name: name.to_string(),
            tasks: art.test.report.tasks,
        });
    }
    let bacc = |run: usize, t: &str| runs[run].tasks[t].balanced_accuracy;
    let deltas = BTreeMap::from([(a.to_string(), bacc(2, a) - bacc(0, a)), (b.to_string(), bacc(2, b) - bacc(1, b))]);
    Ok(JointReport {
        tasks: [a.to_string(), b.to_string()],
        runs,
        deltas,
    })
}
