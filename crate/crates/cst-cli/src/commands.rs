//! The five pipeline stages behind the subcommands. Each function returns
//! the process exit code: 0 for success, 2 for partial success (some inputs
//! failed but a usable artifact was written); hard failures return an error
//! and the binary exits 1.
//!
//! Artifacts are written through a `.partial` rename: a file appears under
//! its final name only once it is complete, and an interrupted or failed
//! stage leaves at most a `.partial` file behind for inspection.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _};

use cst_core::critique::{
    synthesize_dataset, PromptTemplates, RemoteGenerator, SynthOutcome, ToyGenerator, ToyStyle,
};
use cst_core::data::{
    cst_augment, dpo_only_view, load_jsonl, load_pairs_jsonl, save_jsonl, save_pairs_jsonl,
    validate,
};
use cst_core::eval::{render_report, score_model, RemoteJudge, RuleJudge, ScoreReport};
use cst_core::model::{TinyLM, Vocabulary};
use cst_core::train::{lm_warmup, train_with_logs, TrainError};

use crate::config::{RunConfig, Task};

pub const EXIT_OK: i32 = 0;
pub const EXIT_PARTIAL: i32 = 2;

impl Task {
    fn toy_style(self) -> ToyStyle {
        match self {
            Task::Safety => ToyStyle::Safety,
            Task::Persona => ToyStyle::Persona,
        }
    }
}

#[derive(Debug, clap::Args)]
pub struct SynthArgs {
    /// Prompts file, one per line.
    #[arg(long)]
    pub prompts: PathBuf,
    /// Output pair JSONL [default: <data_dir>/pairs.jsonl].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Which task's system prompts and markers drive synthesis.
    #[arg(long, value_enum, default_value = "safety")]
    pub task: Task,
    /// Use the configured remote generation endpoint instead of the
    /// deterministic built-in generator.
    #[arg(long)]
    pub remote: bool,
    /// Write whatever succeeded and exit 2 when some prompts fail, instead
    /// of failing the whole stage.
    #[arg(long)]
    pub allow_partial: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum AugmentMode {
    /// Two tuples per pair: each side chosen under its own system prompt.
    Cst,
    /// One tuple per pair, all under the restrictive system prompt.
    DpoOnly,
}

#[derive(Debug, clap::Args)]
pub struct AugmentArgs {
    /// Input pair JSONL [default: <data_dir>/pairs.jsonl].
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    /// Output tuple JSONL [default: <data_dir>/tuples.jsonl].
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: AugmentMode,
    /// Which task's system prompts condition the tuples.
    #[arg(long, value_enum, default_value = "safety")]
    pub task: Task,
}

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    /// Training tuples JSONL [default: <data_dir>/tuples.jsonl].
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct EvalArgs {
    /// Model checkpoint to score [default: <out_dir>/model.json].
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Held-out prompts file, one per line.
    #[arg(long)]
    pub prompts: PathBuf,
    /// Which task's system prompts and labels to score under.
    #[arg(long, value_enum, default_value = "safety")]
    pub task: Task,
    /// Name for this model in score artifacts and reports.
    #[arg(long, default_value = "model")]
    pub model_id: String,
    /// Completion length cap during generation.
    #[arg(long, default_value_t = 16)]
    pub max_len: usize,
    /// Judge with the configured remote endpoint instead of the built-in
    /// marker rules.
    #[arg(long)]
    pub remote: bool,
    /// Directory for verdicts.jsonl and scores.json [default: <out_dir>].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct ReportArgs {
    /// scores.json files to tabulate, one per evaluated model/task; repeat
    /// the flag for multiple. Entries naming the same model are merged.
    #[arg(long = "scores", required = true)]
    pub scores: Vec<PathBuf>,
    /// Directory for report.md and report.csv [default: <out_dir>].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn ensure_file(path: &Path) -> anyhow::Result<()> {
    if !path.is_file() {
        bail!("no such file: {}", path.display());
    }
    Ok(())
}

/// Non-blank trimmed lines of a prompts file.
fn read_prompt_lines(path: &Path) -> anyhow::Result<Vec<String>> {
    ensure_file(path)?;
    let text =
        fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let prompts: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect();
    if prompts.is_empty() {
        bail!("{} contains no prompts", path.display());
    }
    Ok(prompts)
}

fn partial_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".partial");
    PathBuf::from(name)
}

/// Write through `<path>.partial`, renaming onto `path` only on success.
fn commit(path: &Path, write: impl FnOnce(&Path) -> anyhow::Result<()>) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    let partial = partial_path(path);
    write(&partial)?;
    fs::rename(&partial, path)
        .with_context(|| format!("cannot finalize {}", path.display()))?;
    Ok(())
}

pub fn run_synth(cfg: &RunConfig, args: &SynthArgs) -> anyhow::Result<i32> {
    let prompts = read_prompt_lines(&args.prompts)?;
    let sp = cfg.system_pair(args.task)?;
    let templates = PromptTemplates::default();
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| cfg.paths.data_dir.join("pairs.jsonl"));

    // Failures are always collected rather than aborting the sweep; whether
    // they fail the stage is decided below, so partial output can be kept.
    let outcome: SynthOutcome = if args.remote {
        let url = cfg
            .remote
            .generator_url
            .as_deref()
            .context("--remote requires remote.generator_url in the config")?;
        let generator = RemoteGenerator::new(url, cfg.remote.timeout_secs, cfg.remote.retries);
        synthesize_dataset(&generator, &prompts, &sp, &templates, "remote", true)?
    } else {
        let generator = ToyGenerator::new(cfg.train.seed, sp.clone(), args.task.toy_style());
        synthesize_dataset(&generator, &prompts, &sp, &templates, "toy", true)?
    };

    for failure in &outcome.failures {
        eprintln!("prompt {}: {}", failure.index, failure.error);
    }
    if outcome.failures.is_empty() || args.allow_partial {
        commit(&out, |p| Ok(save_pairs_jsonl(&outcome.pairs, p)?))?;
        println!("wrote {} pairs to {}", outcome.pairs.len(), out.display());
        if outcome.failures.is_empty() {
            Ok(EXIT_OK)
        } else {
            Ok(EXIT_PARTIAL)
        }
    } else {
        let partial = partial_path(&out);
        if let Some(dir) = partial.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        save_pairs_jsonl(&outcome.pairs, &partial)?;
        bail!(
            "{} of {} prompts failed; successful pairs retained at {}",
            outcome.failures.len(),
            prompts.len(),
            partial.display()
        );
    }
}

pub fn run_augment(cfg: &RunConfig, args: &AugmentArgs) -> anyhow::Result<i32> {
    let input = args
        .input
        .clone()
        .unwrap_or_else(|| cfg.paths.data_dir.join("pairs.jsonl"));
    ensure_file(&input)?;
    let pairs = load_pairs_jsonl(&input)?;
    let sp = cfg.system_pair(args.task)?;
    let dataset = match args.mode {
        AugmentMode::Cst => cst_augment(&pairs, &sp)?,
        AugmentMode::DpoOnly => dpo_only_view(&pairs, &sp)?,
    };
    let violations = validate(&dataset);
    if !violations.is_empty() {
        for violation in &violations {
            eprintln!("{violation}");
        }
        bail!("augmented dataset failed validation with {} violation(s)", violations.len());
    }
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| cfg.paths.data_dir.join("tuples.jsonl"));
    commit(&out, |p| Ok(save_jsonl(&dataset, p)?))?;
    println!("wrote {} tuples to {}", dataset.len(), out.display());
    Ok(EXIT_OK)
}

pub fn run_train(cfg: &RunConfig, args: &TrainArgs) -> anyhow::Result<i32> {
    let data = args
        .data
        .clone()
        .unwrap_or_else(|| cfg.paths.data_dir.join("tuples.jsonl"));
    ensure_file(&data)?;
    let dataset = load_jsonl(&data)?;
    let vocab = Vocabulary::build(&dataset.text_fields())?;
    let out_dir = &cfg.paths.out_dir;
    fs::create_dir_all(out_dir)
        .with_context(|| format!("cannot create {}", out_dir.display()))?;

    let mut model = TinyLM::new(
        vocab,
        cfg.model.k,
        cfg.model.e,
        cfg.model.h,
        cfg.train.seed,
    );
    let run = |model: &mut TinyLM| -> Result<(), TrainError> {
        if cfg.train.warmup_epochs > 0 {
            lm_warmup(model, &dataset, &cfg.warmup_config())?;
        }
        train_with_logs(model, &dataset, &cfg.preference_config(), out_dir)?;
        Ok(())
    };
    let model_path = out_dir.join("model.json");
    match run(&mut model) {
        Ok(()) => {
            commit(&model_path, |p| Ok(model.save(p)?))?;
            println!(
                "trained on {} tuples; model at {}",
                dataset.len(),
                model_path.display()
            );
            Ok(EXIT_OK)
        }
        Err(err @ TrainError::Divergence { .. }) => {
            // The model rolled back to its last finite parameters; keep them
            // inspectable without masquerading as a finished run.
            let partial = partial_path(&model_path);
            model.save(&partial)?;
            Err(anyhow::Error::new(err).context(format!(
                "training aborted; rolled-back model retained at {}",
                partial.display()
            )))
        }
        Err(err) => Err(err.into()),
    }
}

pub fn run_eval(cfg: &RunConfig, args: &EvalArgs) -> anyhow::Result<i32> {
    let model_path = args
        .model
        .clone()
        .unwrap_or_else(|| cfg.paths.out_dir.join("model.json"));
    ensure_file(&model_path)?;
    let model = TinyLM::load(&model_path)?;
    let prompts = read_prompt_lines(&args.prompts)?;
    let sp = cfg.system_pair(args.task)?;

    let report = if args.remote {
        let url = cfg
            .remote
            .judge_url
            .as_deref()
            .context("--remote requires remote.judge_url in the config")?;
        let judge = RemoteJudge::new(
            url,
            cfg.remote.timeout_secs,
            cfg.remote.retries,
            cfg.remote.max_inflight,
            cfg.remote.judge_template.clone(),
        );
        score_model(&args.model_id, &model, &prompts, &sp, &judge, args.max_len)?
    } else {
        score_model(&args.model_id, &model, &prompts, &sp, &RuleJudge, args.max_len)?
    };

    let out_dir = args.out.clone().unwrap_or_else(|| cfg.paths.out_dir.clone());
    commit(&out_dir.join("verdicts.jsonl"), |p| {
        let mut text = String::new();
        for example in &report.examples {
            text.push_str(&serde_json::to_string(example)?);
            text.push('\n');
        }
        Ok(fs::write(p, text)?)
    })?;
    commit(&out_dir.join("scores.json"), |p| {
        let mut text = serde_json::to_string_pretty(&report)?;
        text.push('\n');
        Ok(fs::write(p, text)?)
    })?;

    let excluded: usize = report.examples.iter().filter(|e| e.error.is_some()).count();
    for example in report.examples.iter().filter(|e| e.error.is_some()) {
        eprintln!(
            "{} {:?}: {}",
            example.label,
            example.prompt,
            example.error.as_deref().unwrap_or("unknown")
        );
    }
    for (label, score) in &report.labels {
        println!("{label}: {:.4} over {} examples", score.mean, score.count);
    }
    if excluded > 0 {
        eprintln!("{excluded} example(s) excluded from the means");
        Ok(EXIT_PARTIAL)
    } else {
        Ok(EXIT_OK)
    }
}

pub fn run_report(cfg: &RunConfig, args: &ReportArgs) -> anyhow::Result<i32> {
    // Reports for the same model merge into one row; a label scored twice
    // for one model is ambiguous and refused.
    let mut merged: Vec<ScoreReport> = Vec::new();
    for path in &args.scores {
        ensure_file(path)?;
        let text = fs::read_to_string(path)?;
        let report: ScoreReport = serde_json::from_str(&text)
            .with_context(|| format!("invalid score report {}", path.display()))?;
        match merged.iter_mut().find(|r| r.model == report.model) {
            None => merged.push(report),
            Some(existing) => {
                for label in report.labels.keys() {
                    if existing.labels.contains_key(label) {
                        bail!(
                            "label {label:?} for model {:?} appears in multiple score files",
                            report.model
                        );
                    }
                }
                existing.labels.extend(report.labels);
                existing.examples.extend(report.examples);
            }
        }
    }
    let rendered = render_report(&merged);
    let out_dir = args.out.clone().unwrap_or_else(|| cfg.paths.out_dir.clone());
    commit(&out_dir.join("report.md"), |p| Ok(fs::write(p, &rendered.markdown)?))?;
    commit(&out_dir.join("report.csv"), |p| Ok(fs::write(p, &rendered.csv)?))?;
    print!("{}", rendered.markdown);
    Ok(EXIT_OK)
}
