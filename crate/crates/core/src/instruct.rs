//! Instruction corpora: per-task prompt templates, deterministic
//! sample/template pairing and the JSONL conversation format.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TEMPLATES_PER_TASK: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub text: String,
    /// True for paraphrases written for this crate; false for the reference
    /// prompts shipped as data.
    pub composed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskTemplates {
    pub labels: Vec<String>,
    pub templates: Vec<Template>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TemplateRegistry {
    pub tasks: BTreeMap<String, TaskTemplates>,
}

/// Parses a trailing `[a, b, or c]` option list.
pub fn bracket_labels(prompt: &str) -> Option<Vec<String>> {
    let t = prompt.trim_end();
    let inner = t.strip_suffix(']')?;
    let open = inner.rfind('[')?;
    Some(
        inner[open + 1..]
            .split(',')
            .map(|s| s.trim().trim_start_matches("or ").trim().to_string())
            .filter(|s| !s.is_empty())
            .collect(),
    )
}

impl TemplateRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, task: &str, labels: Vec<String>, templates: Vec<Template>) -> Result<()> {
        let entry = TaskTemplates { labels, templates };
        validate_task(task, &entry)?;
        self.tasks.insert(task.to_string(), entry);
        Ok(())
    }

    pub fn get(&self, task: &str) -> Option<&TaskTemplates> {
        self.tasks.get(task)
    }

    pub fn labels(&self, task: &str) -> Option<&[String]> {
        self.tasks.get(task).map(|t| t.labels.as_slice())
    }

    pub fn validate(&self) -> Result<()> {
        self.tasks.iter().try_for_each(|(k, v)| validate_task(k, v))
    }

    /// Ten EEG benchmark tasks with their class names.
    pub fn builtin() -> Self {
        let mut reg = Self::new();
        for (task, labels, shown, composed) in builtin_tables() {
            let labels: Vec<String> = labels.iter().map(|s| s.to_string()).collect();
            let templates = shown
                .iter()
                .map(|t| Template {
                    text: t.to_string(),
                    composed: false,
                })
                .chain(composed.iter().map(|t| Template {
                    text: t.to_string(),
                    composed: true,
                }))
                .collect();
            reg.insert(task, labels, templates).expect("built-in templates are valid");
        }
        reg
    }

    /// Ten short prompts for a synthetic task, each ending with its label list.
    pub fn add_synthetic(&mut self, task: &str, labels: &[&str]) -> Result<()> {
        let suffix = format!("[{}]", labels.join(", "));
        let stems = [
            "Which class?", "Name the class.", "Label this EEG.", "Classify it.", "What state?", "Pick one:", "Decode this.", "Which one?",
            "Choose a label:", "Identify it.",
        ];
        let templates = stems
            .iter()
            .map(|s| Template {
                text: format!("{s} {suffix}"),
                composed: true,
            })
            .collect();
        self.insert(task, labels.iter().map(|s| s.to_string()).collect(), templates)
    }
}

fn validate_task(task: &str, t: &TaskTemplates) -> Result<()> {
    if t.templates.len() != TEMPLATES_PER_TASK {
        return Err(Error::Config(format!(
            "task `{task}` has {} templates, expected {TEMPLATES_PER_TASK}",
            t.templates.len()
        )));
    }
    if t.labels.len() < 2 {
        return Err(Error::Config(format!("task `{task}` needs at least two labels")));
    }
    for tpl in &t.templates {
        if let Some(shown) = bracket_labels(&tpl.text) {
            if shown != t.labels {
                return Err(Error::Config(format!(
                    "task `{task}`: template options {shown:?} differ from labels {:?}",
                    t.labels
                )));
            }
        }
    }
    Ok(())
}

type Table = (&'static str, &'static [&'static str], [&'static str; 3], [&'static str; 7]);

fn builtin_tables() -> Vec<Table> {
    const SHU: [&str; 2] = ["Left hand", "Right hand"];
    const SEED: [&str; 3] = ["positive", "negative", "neutral"];
    const SEED_IV: [&str; 4] = ["neutral", "sad", "fear", "happy"];
    const TUAB: [&str; 2] = ["Normal", "Abnormal"];
    const TUEV: [&str; 6] = ["spsw", "gped", "pled", "eyem", "artf", "bckg"];
    const TUSL: [&str; 3] = ["bckg", "seiz", "slow"];
    const SLEEP: [&str; 5] = [
        "Sleep stage W", "Sleep stage N1", "Sleep stage N2", "Sleep stage N3", "Sleep stage R",
    ];
    const WORKLOAD: [&str; 2] = ["high", "low"];

    let shu = [
        "This segment of EEG signal can reflect the subject's behavioral actions. Please determine the type of action based on the provided EEG signal? [Left hand, Right hand]",
        "The given EEG signal is indicative of the subject's movements. Can you identify the action type from the EEG data? [Left hand, Right hand]",
        "Analyze this EEG signal to discern the subject's physical actions. What is the action type shown? [Left hand, Right hand]",
    ];
    let shu_c = [
        "Which hand movement is the subject imagining in this EEG recording? [Left hand, Right hand]",
        "Decode the imagined movement from this EEG segment. Which hand is it? [Left hand, Right hand]",
        "Based on this brain signal, which hand does the subject intend to move? [Left hand, Right hand]",
        "This EEG was recorded during motor imagery. Name the imagined action. [Left hand, Right hand]",
        "Classify the motor imagery shown in this EEG signal. [Left hand, Right hand]",
        "From the EEG data provided, decide which hand the movement concerns. [Left hand, Right hand]",
        "Inspect this EEG signal and report the imagined hand movement. [Left hand, Right hand]",
    ];
    let seed = [
        "Given this EEG signal, which emotion does it reflect? [positive, negative, or neutral]",
        "Based on this EEG signal, please identify the emotion it represents. [positive, negative, or neutral]",
        "From this EEG signal, can you determine which emotion it corresponds to? [positive, negative, or neutral]",
    ];
    let seed_c = [
        "What emotional state does this EEG recording show? [positive, negative, or neutral]",
        "Classify the emotion expressed in this brain signal. [positive, negative, or neutral]",
        "Decode the subject's feeling from the EEG segment. [positive, negative, or neutral]",
        "Which affective state best matches this EEG signal? [positive, negative, or neutral]",
        "Read this EEG and name the emotion being experienced. [positive, negative, or neutral]",
        "Identify the emotional category of the following EEG data. [positive, negative, or neutral]",
        "Judging from this EEG signal, what is the subject's emotion? [positive, negative, or neutral]",
    ];
    let seed_iv = [
        "Given this EEG signal, which emotion does it reflect? [neutral, sad, fear, happy]",
        "Based on this EEG signal, please identify the emotion it represents. [neutral, sad, fear, happy]",
        "From this EEG signal, can you determine which emotion it corresponds to? [neutral, sad, fear, happy]",
    ];
    let seed_iv_c = [
        "What emotional state does this EEG recording show? [neutral, sad, fear, happy]",
        "Classify the emotion expressed in this brain signal. [neutral, sad, fear, happy]",
        "Decode the subject's feeling from the EEG segment. [neutral, sad, fear, happy]",
        "Which affective state best matches this EEG signal? [neutral, sad, fear, happy]",
        "Read this EEG and name the emotion being experienced. [neutral, sad, fear, happy]",
        "Identify the emotional category of the following EEG data. [neutral, sad, fear, happy]",
        "Judging from this EEG signal, what is the subject's emotion? [neutral, sad, fear, happy]",
    ];
    let tuab = [
        "This EEG signal may indicate abnormal conditions. Based on this signal, determine if there is an abnormality. Choose one: [Normal, Abnormal]",
        "Analyze this EEG signal to assess whether it reflects an abnormal condition. Please select one: [Normal, Abnormal]",
        "This EEG signal could suggest abnormal brain activity. Determine if the signal is normal or abnormal: [Normal, Abnormal]",
    ];
    let tuab_c = [
        "Is this clinical EEG recording normal or abnormal? [Normal, Abnormal]",
        "Screen this EEG segment for pathology and give your verdict. [Normal, Abnormal]",
        "Review the EEG signal and state whether it is within normal limits. [Normal, Abnormal]",
        "Does this brain recording show abnormal activity? Answer with one option: [Normal, Abnormal]",
        "Classify this EEG as normal or abnormal. [Normal, Abnormal]",
        "Assess the following EEG for abnormal patterns. Pick one: [Normal, Abnormal]",
        "Decide whether this EEG signal reflects a healthy or an abnormal state. [Normal, Abnormal]",
    ];
    let tuev = [
        "This EEG signal reflects epileptic events. Please determine the epileptic state based on this signal.",
        "Analyze this EEG signal to classify the epileptic state.",
        "This EEG signal may indicate epileptic activity. Based on the signal, identify the epileptic state.",
    ];
    let tuev_c = [
        "Which clinical event type is present in this EEG segment?",
        "Identify the event category shown by this EEG recording.",
        "Classify the epileptiform or artifact event in this EEG signal.",
        "Read this EEG and name the type of event it contains.",
        "Determine the event class reflected in the following EEG data.",
        "What kind of clinical EEG event does this segment show?",
        "Label the event visible in this EEG signal.",
    ];
    let tusl = [
        "This EEG signal reflects a slow event. Based on this signal, please determine the state. Choose one: [bckg, seiz, slow]",
        "Analyze this EEG signal to classify the state it indicates. Select one: [bckg, seiz, slow]",
        "This EEG signal may suggest a slow event. Determine the corresponding state from the options: [bckg, seiz, slow]",
    ];
    let tusl_c = [
        "Is this EEG segment background, seizure, or slowing? [bckg, seiz, slow]",
        "Classify the activity in this EEG recording. [bckg, seiz, slow]",
        "Which state does this EEG signal show? Pick one: [bckg, seiz, slow]",
        "Identify the EEG state of this segment. [bckg, seiz, slow]",
        "Decode the activity type from the following EEG. [bckg, seiz, slow]",
        "Review this EEG and report the state it reflects. [bckg, seiz, slow]",
        "Determine the category of this EEG activity. Select one: [bckg, seiz, slow]",
    ];
    let sleep = [
        "The EEG signal provides insights into sleep stages. Which sleep phase does it most likely correspond to? Choose one: [Sleep stage W, Sleep stage N1, Sleep stage N2, Sleep stage N3, Sleep stage R]",
        "Sleep phases can be inferred from EEG signals. Given the signal, which phase is it most likely indicating? Pick one: [Sleep stage W, Sleep stage N1, Sleep stage N2, Sleep stage N3, Sleep stage R]",
        "This EEG signal reflects brain activity during sleep. Which sleep stage does it most likely represent? Select one: [Sleep stage W, Sleep stage N1, Sleep stage N2, Sleep stage N3, Sleep stage R]",
    ];
    let sleep_c = [
        "Score the sleep stage of this EEG epoch. [Sleep stage W, Sleep stage N1, Sleep stage N2, Sleep stage N3, Sleep stage R]",
        "Which stage of sleep is the subject in during this EEG segment? [Sleep stage W, Sleep stage N1, Sleep stage N2, Sleep stage N3, Sleep stage R]",
        "Classify this polysomnography EEG epoch into a sleep stage. [Sleep stage W, Sleep stage N1, Sleep stage N2, Sleep stage N3, Sleep stage R]",
        "Identify the sleep phase reflected by this brain signal. [Sleep stage W, Sleep stage N1, Sleep stage N2, Sleep stage N3, Sleep stage R]",
        "Read this overnight EEG segment and give its sleep stage. [Sleep stage W, Sleep stage N1, Sleep stage N2, Sleep stage N3, Sleep stage R]",
        "Determine the sleep stage for the following EEG. Choose one: [Sleep stage W, Sleep stage N1, Sleep stage N2, Sleep stage N3, Sleep stage R]",
        "What sleep stage does this EEG epoch belong to? [Sleep stage W, Sleep stage N1, Sleep stage N2, Sleep stage N3, Sleep stage R]",
    ];
    let workload = [
        "This is an EEG signal. Is this brainwave showing high workload or low workload? [high, low]",
        "Here's an EEG signal. Does it represent a high workload or a low workload on the brain? [high, low]",
        "This EEG signal is given. Is the workload indicated here high or low? [high, low]",
    ];
    let workload_c = [
        "Estimate the mental workload from this EEG recording. [high, low]",
        "Is the subject under heavy or light cognitive load in this EEG? [high, low]",
        "Classify the cognitive workload shown by this brain signal. [high, low]",
        "Judging from the EEG, how demanding is the current task? [high, low]",
        "Decode the workload level from the following EEG segment. [high, low]",
        "What level of mental effort does this EEG reflect? [high, low]",
        "Read this EEG signal and report the workload level. [high, low]",
    ];
    vec![
        ("shu", &SHU, shu, shu_c),
        ("seed", &SEED, seed, seed_c),
        ("seed_iv", &SEED_IV, seed_iv, seed_iv_c),
        ("tuab", &TUAB, tuab, tuab_c),
        ("tuev", &TUEV, tuev, tuev_c),
        ("tusl", &TUSL, tusl, tusl_c),
        ("shhs", &SLEEP, sleep, sleep_c),
        ("sleepedf", &SLEEP, sleep, sleep_c),
        ("hmc", &SLEEP, sleep, sleep_c),
        ("workload", &WORKLOAD, workload, workload_c),
    ]
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub from: String,
    pub value: String,
}

/// One JSONL line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionSample {
    pub id: String,
    pub task: String,
    pub label: String,
    pub eeg: String,
    pub conversations: Vec<Turn>,
}

impl InstructionSample {
    pub fn prompt(&self) -> &str {
        self.conversations.first().map_or("", |t| t.value.as_str())
    }

    pub fn answer(&self) -> &str {
        self.conversations.get(1).map_or("", |t| t.value.as_str())
    }
}

/// Builder input: one recording reference.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub task: String,
    pub label: String,
    pub eeg: String,
}

/// Pairs every entry with a template drawn from a seeded RNG.
pub fn build_corpus(entries: &[CorpusEntry], registry: &TemplateRegistry, seed: u64) -> Result<Vec<InstructionSample>> {
    let mut missing: Vec<&str> = entries
        .iter()
        .filter(|e| registry.get(&e.task).is_none())
        .map(|e| e.task.as_str())
        .collect();
    missing.sort_unstable();
    missing.dedup();
    if !missing.is_empty() {
        return Err(Error::Config(format!("no templates registered for tasks: {}", missing.join(", "))));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counters: BTreeMap<&str, usize> = BTreeMap::new();
    entries
        .iter()
        .map(|e| {
            let t = registry.get(&e.task).expect("checked above");
            if !t.labels.contains(&e.label) {
                return Err(Error::Config(format!("label `{}` not in task `{}`", e.label, e.task)));
            }
            let idx = rng.random_range(0..t.templates.len());
            let n = counters.entry(&e.task).or_default();
            let id = format!("{}-{:06}", e.task, n);
            *n += 1;
            Ok(InstructionSample {
                id,
                task: e.task.clone(),
                label: e.label.clone(),
                eeg: e.eeg.clone(),
                conversations: vec![
                    Turn {
                        from: "human".into(),
                        value: t.templates[idx].text.clone(),
                    },
                    Turn {
                        from: "gpt".into(),
                        value: e.label.clone(),
                    },
                ],
            })
        })
        .collect()
}

pub fn write_corpus(path: &Path, samples: &[InstructionSample]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Vec<InstructionSample>> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
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

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub line: usize,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusReport {
    pub counts: BTreeMap<String, usize>,
    pub violations: Vec<Violation>,
}

/// Checks every line of a corpus file against `registry`. EEG paths are
/// resolved relative to the corpus file's directory. Lines that are not
/// valid JSON records abort with a parse error.
pub fn validate_corpus(path: &Path, registry: &TemplateRegistry) -> Result<CorpusReport> {
    let base = path.parent().unwrap_or(Path::new("."));
    let samples = read_corpus_lines(path)?;
    let mut report = CorpusReport::default();
    let mut ids = HashSet::new();
    for (line, s) in samples {
        let mut bad = |m: String| report.violations.push(Violation { line, message: m });
        if !ids.insert(s.id.clone()) {
            bad(format!("duplicate id `{}`", s.id));
        }
        let roles: Vec<&str> = s.conversations.iter().map(|t| t.from.as_str()).collect();
        if roles != ["human", "gpt"] {
            bad(format!("conversation roles {roles:?}, expected [human, gpt]"));
        }
        match registry.get(&s.task) {
            None => bad(format!("unknown task `{}`", s.task)),
            Some(t) => {
                if !t.labels.contains(&s.label) {
                    bad(format!("label `{}` not in task `{}`", s.label, s.task));
                }
                if !t.templates.iter().any(|tpl| tpl.text == s.prompt()) {
                    bad("prompt is not a registered template".into());
                }
            }
        }
        if s.answer() != s.label {
            bad(format!("answer `{}` differs from label `{}`", s.answer(), s.label));
        }
        let eeg = Path::new(&s.eeg);
        let resolved = if eeg.is_absolute() { eeg.to_path_buf() } else { base.join(eeg) };
        if !resolved.exists() {
            bad(format!("EEG file `{}` not found", s.eeg));
        }
        *report.counts.entry(s.task.clone()).or_default() += 1;
    }
    Ok(report)
}

fn read_corpus_lines(path: &Path) -> Result<Vec<(usize, InstructionSample)>> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((i + 1, s));
    }
    Ok(out)
}
