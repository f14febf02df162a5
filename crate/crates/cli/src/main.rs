use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use neuroquery::analytics::{
    branch_frequencies, channel_attention, cluster_separation, emit_figures, pca_project, read_traces, run_routing, score_vectors,
    similarity,
};
use neuroquery::instruct::{self, bracket_labels, CorpusEntry, TemplateRegistry};
use neuroquery::lm::label_match;
use neuroquery::signal::{import_csv, preprocess, synth_task, LineFreq, NormMode, SynthSpec};
use neuroquery::tqs::{BranchKind, RouterGrad};
use neuroquery::train::{self, evaluate_checkpoint, joint_vs_individual, write_evaluation};
use neuroquery::{EegRecording, PreprocessSpec, Split, SynthFamily, TrainConfig, Trainer};

#[derive(Parser)]
#[command(name = "neuroquery", version, about = "EEG-to-language decoding with task-aware query routing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Band-pass, notch, resample and normalise every recording in a directory
    /// (.eegb files, and .csv files with a .json sidecar).
    Preprocess(PreprocessArgs),
    /// Write a seeded synthetic task as .eegb files plus a manifest.
    Synth(SynthArgs),
    /// Build or validate an instruction corpus.
    #[command(subcommand)]
    Corpus(CorpusCommand),
    /// Print the default training config as JSON.
    Config,
    /// Train on the tasks of a JSON config.
    Train(TrainArgs),
    /// Score a checkpoint on one split.
    Eval(EvalArgs),
    /// Individual versus joint training on a task pair.
    Pairs(PairsArgs),
    /// Decode one recording with a trained checkpoint.
    Infer(InferArgs),
    /// Routing and attention analytics for a run directory.
    Analyze(AnalyzeArgs),
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Pass band as LOW:HIGH in Hz.
    #[arg(long, default_value = "0.1:75")]
    band: String,
    /// auto, 50, 60 or off.
    #[arg(long, default_value = "auto")]
    line: LineFreq,
    #[arg(long, default_value_t = 200.0)]
    rate: f64,
    /// zscore or pct95.
    #[arg(long, default_value = "zscore")]
    norm: NormMode,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    task: String,
    /// a, b, c or d.
    #[arg(long)]
    family: SynthFamily,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, default_value_t = 40)]
    n: usize,
    #[arg(long, default_value_t = 8)]
    channels: usize,
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[arg(long, default_value_t = 100.0)]
    rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum CorpusCommand {
    /// Pair each manifest row (task,label,eeg) with a random template.
    Build {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Check schema, labels, templates and file references.
    Validate {
        #[arg(long)]
        corpus: PathBuf,
        /// Registry JSON; defaults to the one written next to the corpus,
        /// then to the built-in templates.
        #[arg(long)]
        registry: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "run")]
    run_dir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// LM warm-up steps before freezing.
    #[arg(long)]
    warm_lm: Option<usize>,
    /// scale or none.
    #[arg(long)]
    router_grad: Option<RouterGrad>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Directory for metrics and logs; printed only when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PairsArgs {
    /// Two task ids from the config, comma separated.
    #[arg(long)]
    tasks: String,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Recording in .eegb or .csv (with JSON sidecar) form.
    #[arg(long)]
    sample: PathBuf,
    #[arg(long)]
    prompt: String,
    #[arg(long, default_value_t = 24)]
    max_new: usize,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    similarity: bool,
    #[arg(long)]
    channels: bool,
    #[arg(long)]
    pca: bool,
    #[arg(long)]
    figures: bool,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Preprocess(a) => cmd_preprocess(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Corpus(c) => cmd_corpus(c),
        Command::Config => {
            println!("{}", serde_json::to_string_pretty(&TrainConfig::default())?);
            Ok(())
        }
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Pairs(a) => cmd_pairs(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Analyze(a) => cmd_analyze(a),
    }
}

fn parse_band(s: &str) -> Result<(f64, f64)> {
    let (lo, hi) = s.split_once(':').context("band must be LOW:HIGH")?;
    Ok((lo.trim().parse()?, hi.trim().parse()?))
}

fn read_recording(path: &Path) -> Result<EegRecording> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("eegb") => Ok(EegRecording::read_eegb(path)?),
        Some("csv") => Ok(import_csv(path)?),
        _ => bail!("{}: expected a .eegb or .csv recording", path.display()),
    }
}

fn cmd_preprocess(a: PreprocessArgs) -> Result<()> {
    let (band_low, band_high) = parse_band(&a.band)?;
    let spec = PreprocessSpec {
        band_low,
        band_high,
        line_freq: a.line,
        target_rate: a.rate,
        norm: a.norm,
    };
    spec.validate()?;
    fs::create_dir_all(&a.out)?;
    let mut inputs: Vec<PathBuf> = fs::read_dir(&a.input)
        .with_context(|| format!("reading {}", a.input.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| match p.extension().and_then(|e| e.to_str()) {
            Some("eegb") => true,
            Some("csv") => p.with_extension("json").exists(),
            _ => false,
        })
        .collect();
    inputs.sort();
    if inputs.is_empty() {
        bail!("no .eegb files or sidecar-backed .csv files in {}", a.input.display());
    }
    for p in &inputs {
        let rec = read_recording(p)?;
        let (out, report) = preprocess(&rec, &spec).with_context(|| format!("preprocessing {}", p.display()))?;
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("recording");
        let dest = a.out.join(format!("{stem}.eegb"));
        out.write_eegb(&dest)?;
        let notch = report.notch_hz.map_or("none".to_string(), |f| format!("{f} Hz"));
        println!("{} -> {} (notch {notch}, {} Hz)", p.display(), dest.display(), out.sample_rate);
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let spec = SynthSpec::new(a.family, a.classes, a.channels, a.samples, a.rate, a.n, a.seed);
    let recs = synth_task(&spec, &a.task)?;
    fs::create_dir_all(&a.out)?;
    let manifest = a.out.join("manifest.csv");
    let mut w = csv::Writer::from_path(&manifest)?;
    w.write_record(["task", "label", "eeg"])?;
    for (i, r) in recs.iter().enumerate() {
        let name = format!("{}-{i:05}.eegb", a.task);
        r.write_eegb(&a.out.join(&name))?;
        w.write_record([a.task.as_str(), r.label.as_str(), name.as_str()])?;
    }
    w.flush()?;
    println!("{} recordings and {}", recs.len(), manifest.display());
    Ok(())
}

fn registry_path(corpus: &Path) -> PathBuf {
    corpus.with_extension("registry.json")
}

fn cmd_corpus(c: CorpusCommand) -> Result<()> {
    match c {
        CorpusCommand::Build { manifest, out, seed } => {
            let mut rd = csv::Reader::from_path(&manifest).with_context(|| format!("reading {}", manifest.display()))?;
            let mut entries = Vec::new();
            for row in rd.records() {
                let row = row?;
                let field = |name: &str, i: usize| -> Result<String> {
                    row.get(i)
                        .map(str::to_string)
                        .with_context(|| format!("manifest row without `{name}`"))
                };
                entries.push(CorpusEntry {
                    task: field("task", 0)?,
                    label: field("label", 1)?,
                    eeg: field("eeg", 2)?,
                });
            }
            let mut registry = TemplateRegistry::builtin();
            let mut unknown: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
            for e in &entries {
                if registry.get(&e.task).is_none() {
                    let labels = unknown.entry(&e.task).or_default();
                    if !labels.contains(&e.label.as_str()) {
                        labels.push(&e.label);
                    }
                }
            }
            for (task, labels) in &unknown {
                registry.add_synthetic(task, labels)?;
            }
            let samples = instruct::build_corpus(&entries, &registry, seed)?;
            instruct::write_corpus(&out, &samples)?;
            fs::write(registry_path(&out), serde_json::to_string_pretty(&registry)?)?;
            println!("{} samples -> {}", samples.len(), out.display());
            Ok(())
        }
        CorpusCommand::Validate { corpus, registry } => {
            let reg_path = registry.or_else(|| Some(registry_path(&corpus)).filter(|p| p.exists()));
            let reg = match reg_path {
                Some(p) => serde_json::from_slice(&fs::read(&p).with_context(|| format!("reading {}", p.display()))?)?,
                None => TemplateRegistry::builtin(),
            };
            let report = instruct::validate_corpus(&corpus, &reg)?;
            for (task, n) in &report.counts {
                println!("{task}: {n}");
            }
            for v in &report.violations {
                println!("line {}: {}", v.line, v.message);
            }
            if !report.violations.is_empty() {
                bail!("{} violation(s)", report.violations.len());
            }
            println!("ok");
            Ok(())
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::from_json_file(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(TrainConfig::default()),
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.warm_lm {
        cfg.lm_warmup.steps = n;
    }
    if let Some(m) = a.router_grad {
        cfg.tqs.router_grad = m;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    let mut trainer = Trainer::new(cfg, Some(&a.run_dir))?;
    log::info!("{} optimizer steps", trainer.total_steps());
    let art = trainer.run()?;
    print!("{}", art.test.report);
    if art.fingerprints.encoder_before != art.fingerprints.encoder_after || art.fingerprints.lm_before != art.fingerprints.lm_after {
        bail!("frozen weights changed during training");
    }
    println!("artifacts in {}", a.run_dir.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let eval = evaluate_checkpoint(&a.ckpt, a.split)?;
    print!("{}", eval.report);
    if let Some(dir) = a.out {
        fs::create_dir_all(&dir)?;
        write_evaluation(&dir, &eval)?;
    }
    Ok(())
}

fn cmd_pairs(a: PairsArgs) -> Result<()> {
    let ids: Vec<&str> = a.tasks.split(',').map(str::trim).collect();
    let [x, y] = ids[..] else {
        bail!("--tasks takes exactly two ids, got `{}`", a.tasks)
    };
    let cfg = load_config(a.config.as_deref())?;
    let rep = joint_vs_individual(&cfg, x, y)?;
    println!("{:<8}  {:>10}  {:>10}  {:>8}", "task", "individual", "joint", "delta");
    for (i, t) in rep.tasks.iter().enumerate() {
        let ind = rep.runs[i].tasks[t].balanced_accuracy;
        let joint = rep.runs[2].tasks[t].balanced_accuracy;
        println!("{t:<8}  {ind:>10.4}  {joint:>10.4}  {:>+8.4}", rep.deltas[t]);
    }
    if let Some(out) = a.out {
        fs::write(&out, serde_json::to_string_pretty(&rep)?)?;
    }
    Ok(())
}

fn cmd_infer(a: InferArgs) -> Result<()> {
    let (cfg, model) = train::load_model(&a.ckpt)?;
    let rec = read_recording(&a.sample)?;
    let tokens = train::encode_recording(&cfg, &model, &rec)?;
    let prefix = model.prefix(&tokens)?;
    let decoded = model.decode(&prefix.f_prime, &a.prompt, a.max_new)?;
    println!("{decoded}");
    if let Some(labels) = bracket_labels(&a.prompt) {
        match label_match(&decoded, &labels) {
            Some(l) => log::info!("matched label `{l}`"),
            None => log::warn!("answer matches none of {labels:?}"),
        }
    }
    log::info!(
        "temporal queries {:?}, spatial queries {:?}",
        prefix.temporal.selected,
        prefix.spatial.selected
    );
    Ok(())
}

fn cmd_analyze(a: AnalyzeArgs) -> Result<()> {
    let all = !(a.similarity || a.channels || a.pca || a.figures);
    let run = &a.run;
    if all || a.similarity {
        let log = run_routing(run)?;
        for branch in [BranchKind::Temporal, BranchKind::Spatial] {
            let freqs = branch_frequencies(&log, branch)?;
            if freqs.len() < 2 {
                println!("{branch} similarity: needs at least two tasks");
                continue;
            }
            let m = similarity(&freqs)?;
            println!("{branch} query-frequency similarity");
            print!("{:<8}", "");
            for t in &m.tasks {
                print!("  {t:>8}");
            }
            println!();
            for (t, row) in m.tasks.iter().zip(&m.values) {
                print!("{t:<8}");
                for v in row {
                    print!("  {v:>8.4}");
                }
                println!();
            }
        }
    }
    if all || a.channels {
        let traces = read_traces(&run.join("attention_traces.jsonl"))?;
        let mut tasks: Vec<&str> = traces.iter().map(|t| t.task_id.as_str()).collect();
        tasks.dedup();
        tasks.sort_unstable();
        tasks.dedup();
        for t in tasks {
            let m = channel_attention(&traces, t)?;
            let cells: Vec<String> = m.mass.iter().map(|x| format!("{x:.3}")).collect();
            println!("channels {t}: {}", cells.join(" "));
        }
    }
    if all || a.pca {
        let vectors = score_vectors(&run_routing(run)?);
        let proj = pca_project(&vectors.iter().map(|v| v.2.clone()).collect::<Vec<_>>(), 2)?;
        let groups: Vec<String> = vectors.iter().map(|v| v.0.clone()).collect();
        let sep = cluster_separation(&proj.coords, &groups)?;
        println!(
            "pca: variances {:.4} {:.4}; inter-centroid {:.4}, intra-spread {:.4}",
            proj.variances[0], proj.variances[1], sep.inter_centroid, sep.intra_spread
        );
    }
    if all || a.figures {
        for p in emit_figures(run)? {
            println!("wrote {}", p.display());
        }
    }
    Ok(())
}
