//! `fliplearn`: train, score, evaluate and compare Direct, Channel and
//! Flipped models on prompted tasks.

mod plot;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use fliplearn_core::config::{stamp, RunConfig};
use fliplearn_core::eval::{
    compare_runs, evaluate, generate_synthetic, label_sweep_eval, score_instances, EvalReport,
    Metric, RuleFamily, SyntheticTaskSpec,
};
use fliplearn_core::inference::ModelScorer;
use fliplearn_core::objectives::train;
use fliplearn_core::rendering::{render_all_options, RenderMode};
use fliplearn_core::seq_model::{
    load_checkpoint, save_checkpoint, Model, SequenceScorer, Vocabulary,
};
use fliplearn_core::task_schema::{
    builtin_variants_for, load_taskset, load_variant_table, save_taskset, TaskKind, TaskSet,
    Verbalizer,
};

#[derive(Parser)]
#[command(
    name = "fliplearn",
    version,
    about = "Flipped, Direct and Channel meta-training on prompted tasks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from scratch on one or more task manifests.
    Train(Box<TrainArgs>),
    /// Score every instance of a task and emit one JSON record per line.
    Score(ScoreArgs),
    /// Evaluate a checkpoint on task manifests and write reports.
    Evaluate(EvalArgs),
    /// Evaluate a checkpoint across label-surface variants.
    SweepLabels(SweepArgs),
    /// Print the rendered (source, target) pairs of a task.
    Render(RenderArgs),
    /// Write synthetic training and held-out task manifests.
    GenerateSynthetic(GenerateArgs),
    /// Tabulate reports against a baseline row.
    Compare(CompareArgs),
    /// Draw metric-per-variant (or per-template) charts as SVG.
    Plot(PlotArgs),
}

/// Run configuration. Precedence: defaults, then `--config`, then
/// `FLIPLEARN_<KEY>` environment variables, then these flags.
#[derive(Args, Default)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mode: Option<RenderMode>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    ul_enabled: Option<bool>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    negative_sampling: Option<String>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    adam_eps: Option<f64>,
    /// A number, or `none` to disable clipping.
    #[arg(long)]
    grad_clip: Option<String>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    encoder_layers: Option<usize>,
    #[arg(long)]
    decoder_layers: Option<usize>,
    #[arg(long)]
    max_source_len: Option<usize>,
    #[arg(long)]
    max_target_len: Option<usize>,
    #[arg(long)]
    tie_embeddings: Option<bool>,
    #[arg(long)]
    length_normalize: Option<bool>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        cfg.apply_process_env()?;
        let flags: [(&str, Option<String>); 21] = [
            ("mode", self.mode.map(|m| m.to_string())),
            ("lambda", self.lambda.map(|v| v.to_string())),
            ("ul_enabled", self.ul_enabled.map(|v| v.to_string())),
            ("steps", self.steps.map(|v| v.to_string())),
            ("batch_size", self.batch_size.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("negative_sampling", self.negative_sampling.clone()),
            ("learning_rate", self.learning_rate.map(|v| v.to_string())),
            ("beta1", self.beta1.map(|v| v.to_string())),
            ("beta2", self.beta2.map(|v| v.to_string())),
            ("adam_eps", self.adam_eps.map(|v| v.to_string())),
            ("grad_clip", self.grad_clip.clone()),
            ("d_model", self.d_model.map(|v| v.to_string())),
            ("n_heads", self.n_heads.map(|v| v.to_string())),
            ("d_ff", self.d_ff.map(|v| v.to_string())),
            ("encoder_layers", self.encoder_layers.map(|v| v.to_string())),
            ("decoder_layers", self.decoder_layers.map(|v| v.to_string())),
            ("max_source_len", self.max_source_len.map(|v| v.to_string())),
            ("max_target_len", self.max_target_len.map(|v| v.to_string())),
            ("tie_embeddings", self.tie_embeddings.map(|v| v.to_string())),
            (
                "length_normalize",
                self.length_normalize.map(|v| v.to_string()),
            ),
        ];
        for (key, value) in flags {
            if let Some(value) = value {
                cfg.set(key, &value)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Task manifests to meta-train on.
    #[arg(long, required = true, num_args = 1..)]
    tasks: Vec<PathBuf>,
    /// Further manifests whose words join the vocabulary (e.g. held-out
    /// evaluation tasks), without being trained on.
    #[arg(long, num_args = 1..)]
    vocab_tasks: Vec<PathBuf>,
    /// Root under which the `train-<hash>` run directory is created.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Name carried into evaluation reports.
    #[arg(long)]
    label: Option<String>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Scoring rule; defaults to the mode the checkpoint was trained in.
    #[arg(long)]
    mode: Option<RenderMode>,
    /// Subtract content-free scores (Direct only).
    #[arg(long)]
    calibrated: bool,
    /// Divide Direct scores by label length.
    #[arg(long)]
    length_normalize: bool,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    tasks: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    /// Output file; stdout if absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, required = true, num_args = 1..)]
    tasks: Vec<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    /// Defaults to macro-F1 for classification, accuracy for multi-choice.
    #[arg(long)]
    metric: Option<Metric>,
    /// Row label in comparison tables.
    #[arg(long)]
    label: Option<String>,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    eval: EvalArgs,
    /// Tab-separated label variants; the built-in pairs or triples if absent.
    #[arg(long)]
    variants: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    tasks: PathBuf,
    #[arg(long)]
    mode: RenderMode,
    /// Only this template.
    #[arg(long)]
    template: Option<String>,
    /// Verbalizer name; the task's first if absent.
    #[arg(long)]
    verbalizer: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON task spec; the built-in keyword spec if absent.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    family: Option<String>,
    #[arg(long)]
    train_tasks: Option<usize>,
    #[arg(long)]
    eval_tasks: Option<usize>,
    #[arg(long)]
    instances: Option<usize>,
    #[arg(long)]
    eval_instances: Option<usize>,
    #[arg(long)]
    nonce_pairs: Option<usize>,
}

#[derive(Args)]
struct CompareArgs {
    /// Report files, or directories of reports.
    #[arg(required = true, num_args = 1..)]
    reports: Vec<PathBuf>,
    /// Index of the baseline row within each task.
    #[arg(long, default_value_t = 0)]
    baseline: usize,
    /// Also write the tables as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlotArgs {
    /// Report files, or directories of reports; one series each.
    #[arg(required = true, num_args = 1..)]
    reports: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(*a),
        Command::Score(a) => cmd_score(a),
        Command::Evaluate(a) => cmd_evaluate(a, None),
        Command::SweepLabels(a) => cmd_evaluate(a.eval, Some(a.variants)),
        Command::Render(a) => cmd_render(a),
        Command::GenerateSynthetic(a) => cmd_generate(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Plot(a) => plot::plot_reports(&load_reports(&a.reports)?, &a.out),
    }
}

fn load_tasks(paths: &[PathBuf]) -> Result<Vec<TaskSet>> {
    paths
        .iter()
        .map(|p| load_taskset(p).with_context(|| format!("loading {}", p.display())))
        .collect()
}

/// Built-in label variants of every classification task's arity, so that
/// label sweeps never meet out-of-vocabulary surfaces.
fn sweep_surfaces(tasks: &[TaskSet]) -> Vec<Verbalizer> {
    tasks
        .iter()
        .filter(|t| t.kind == TaskKind::Classification)
        .filter_map(|t| builtin_variants_for(t).ok())
        .flatten()
        .collect()
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => {
            Box::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?)
        }
        None => Box::new(std::io::stdout().lock()),
    })
}

fn write_jsonl<T: Serialize>(path: Option<&Path>, records: &[T]) -> Result<()> {
    let mut out = output(path)?;
    for r in records {
        writeln!(out, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    checkpoint_id: &'a str,
    config_hash: &'a str,
    tasks: Vec<&'a str>,
    vocab_size: usize,
    parameters: usize,
    steps: usize,
    final_total: Option<f64>,
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = a.config.resolve()?;
    let tasks = load_tasks(&a.tasks)?;
    let vocab_only = load_tasks(&a.vocab_tasks)?;
    let all: Vec<TaskSet> = tasks.iter().chain(&vocab_only).cloned().collect();
    let vocab = Vocabulary::for_tasks(&all, &sweep_surfaces(&all))?;
    let mut model = Model::new(cfg.model.clone(), vocab, cfg.train.seed)?;

    let task_ids: Vec<&str> = tasks.iter().map(|t| t.task_id.as_str()).collect();
    let config_hash = cfg.hash();
    let mut stamp_parts = vec![config_hash.as_str()];
    stamp_parts.extend(&task_ids);
    let dir = a.out.join(format!("train-{}", stamp(&stamp_parts)));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;

    let log = train(&mut model, &tasks, &cfg.train)?;
    let log_path = dir.join("train_log.jsonl");
    write_file(&log_path, &log.to_jsonl()?)?;
    write_file(&dir.join("config.txt"), &cfg.to_text())?;

    let mut meta = BTreeMap::new();
    meta.insert("mode".to_string(), cfg.train.mode.to_string());
    meta.insert("ul_enabled".to_string(), cfg.train.ul_enabled.to_string());
    meta.insert("lambda".to_string(), cfg.train.lambda.to_string());
    meta.insert("seed".to_string(), cfg.train.seed.to_string());
    meta.insert("config_hash".to_string(), config_hash.clone());
    meta.insert("tasks".to_string(), task_ids.join(","));
    meta.insert(
        "run_label".to_string(),
        a.label.unwrap_or_else(|| default_label(&cfg)),
    );
    let checkpoint_id = save_checkpoint(&model, &meta, &dir.join("checkpoint.json"))?;

    let summary = TrainSummary {
        checkpoint_id: &checkpoint_id,
        config_hash: &config_hash,
        tasks: task_ids,
        vocab_size: model.vocab().len(),
        parameters: model.parameter_count(),
        steps: log.records.len(),
        final_total: log.records.last().map(|r| r.total),
    };
    write_file(
        &dir.join("summary.json"),
        &(serde_json::to_string_pretty(&summary)? + "\n"),
    )?;
    println!("{}", dir.display());
    Ok(())
}

fn default_label(cfg: &RunConfig) -> String {
    let mode = cfg.train.mode.to_string();
    if cfg.train.ul_enabled && cfg.train.lambda > 0.0 {
        format!("{mode}+ul")
    } else {
        mode
    }
}

struct Loaded {
    model: Model,
    meta: BTreeMap<String, String>,
    id: String,
    mode: RenderMode,
}

fn load_model(a: &ModelArgs) -> Result<Loaded> {
    let (model, meta, id) = load_checkpoint(&a.checkpoint)
        .with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let mode = match (a.mode, meta.get("mode")) {
        (Some(m), _) => m,
        (None, Some(m)) => m.parse()?,
        (None, None) => bail!("checkpoint records no mode; pass --mode"),
    };
    if a.calibrated && mode != RenderMode::Direct {
        bail!("calibration applies to direct scoring only");
    }
    Ok(Loaded {
        model,
        meta,
        id,
        mode,
    })
}

fn scorer<'a>(loaded: &'a Loaded, a: &ModelArgs) -> ModelScorer<'a, Model> {
    let mut s = ModelScorer::new(&loaded.model);
    s.options.length_normalize = a.length_normalize;
    s
}

fn cmd_score(a: ScoreArgs) -> Result<()> {
    let task = load_taskset(&a.tasks)?;
    let loaded = load_model(&a.model)?;
    let records = score_instances(
        &scorer(&loaded, &a.model),
        &task,
        loaded.mode,
        a.model.calibrated,
    )?;
    write_jsonl(a.out.as_deref(), &records)
}

fn cmd_evaluate(a: EvalArgs, sweep: Option<Option<PathBuf>>) -> Result<()> {
    let tasks = load_tasks(&a.tasks)?;
    let loaded = load_model(&a.model)?;
    let scorer = scorer(&loaded, &a.model);
    let table = match &sweep {
        Some(Some(path)) => Some(load_variant_table(path)?),
        _ => None,
    };

    let mut reports = Vec::with_capacity(tasks.len());
    for task in &tasks {
        let metric = a.metric.unwrap_or_else(|| Metric::for_kind(task.kind));
        let mut report = match &sweep {
            None => evaluate(&scorer, task, loaded.mode, metric, a.model.calibrated)?,
            Some(_) => {
                let variants = match &table {
                    Some(rows) => rows
                        .iter()
                        .map(|v| v.to_verbalizer(&task.labels))
                        .collect::<fliplearn_core::Result<Vec<_>>>()?,
                    None => builtin_variants_for(task)?,
                };
                label_sweep_eval(
                    &scorer,
                    task,
                    loaded.mode,
                    metric,
                    a.model.calibrated,
                    &variants,
                )?
            }
        };
        let m = &mut report.metadata;
        m.run_label = a
            .label
            .clone()
            .or_else(|| report_label(&loaded, a.model.calibrated));
        m.seed = loaded.meta.get("seed").and_then(|s| s.parse().ok());
        m.checkpoint_id = Some(loaded.id.clone());
        m.config_hash = loaded.meta.get("config_hash").cloned();
        reports.push(report);
    }

    let kind = if sweep.is_some() { "sweep" } else { "eval" };
    let mut parts = vec![
        loaded.id.clone(),
        loaded.mode.to_string(),
        a.model.calibrated.to_string(),
        a.model.length_normalize.to_string(),
        format!("{:?}", a.metric),
        format!("{:?}", a.label),
    ];
    parts.extend(tasks.iter().map(|t| t.task_id.clone()));
    if let Some(Some(path)) = &sweep {
        parts.push(fs::read_to_string(path)?);
    }
    let part_refs: Vec<&str> = parts.iter().map(String::as_str).collect();
    let dir = a.out.join(format!("{kind}-{}", stamp(&part_refs)));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut text = String::new();
    for report in &reports {
        report.save(&dir.join(format!("{}.json", report.task_id)))?;
        text.push_str(&report.to_text());
    }
    write_file(&dir.join("report.txt"), &text)?;
    print!("{text}");
    println!("{}", dir.display());
    Ok(())
}

/// The checkpoint's run label, qualified when scoring differs from how the
/// checkpoint was trained.
fn report_label(loaded: &Loaded, calibrated: bool) -> Option<String> {
    let base = loaded.meta.get("run_label")?;
    let trained = loaded
        .meta
        .get("mode")
        .and_then(|m| m.parse::<RenderMode>().ok());
    if trained == Some(loaded.mode) && !calibrated {
        return Some(base.clone());
    }
    let cal = if calibrated { "+cal" } else { "" };
    Some(format!("{base}/{}{cal}", loaded.mode))
}

#[derive(Serialize)]
struct RenderRecord<'a> {
    task_id: &'a str,
    template_id: &'a str,
    instance: usize,
    label_index: Option<usize>,
    source: String,
    target: String,
}

fn cmd_render(a: RenderArgs) -> Result<()> {
    let task = load_taskset(&a.tasks)?;
    let verbalizer = match &a.verbalizer {
        None => task.primary_verbalizer(),
        Some(name) => task
            .verbalizers
            .iter()
            .find(|v| &v.name == name)
            .with_context(|| format!("task {} has no verbalizer `{name}`", task.task_id))?,
    };
    let templates: Vec<_> = task
        .templates
        .iter()
        .filter(|t| a.template.as_ref().is_none_or(|id| &t.id == id))
        .collect();
    if templates.is_empty() {
        bail!(
            "task {} has no template `{}`",
            task.task_id,
            a.template.unwrap_or_default()
        );
    }
    let mut records = Vec::new();
    for template in templates {
        for (i, inst) in task.instances.iter().enumerate() {
            for r in render_all_options(a.mode, template, inst, verbalizer)? {
                records.push(RenderRecord {
                    task_id: &task.task_id,
                    template_id: &template.id,
                    instance: i,
                    label_index: r.label_index,
                    source: r.source_text,
                    target: r.target_text,
                });
            }
        }
    }
    write_jsonl(a.out.as_deref(), &records)
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(path) => serde_json::from_str(&fs::read_to_string(path)?)
            .with_context(|| format!("parsing {}", path.display()))?,
        None => SyntheticTaskSpec::default(),
    };
    if let Some(f) = &a.family {
        spec.family = match f.as_str() {
            "keyword_presence" | "keyword-presence" => RuleFamily::KeywordPresence,
            "pairwise_count" | "pairwise-count" => RuleFamily::PairwiseCount,
            other => bail!("unknown family `{other}`"),
        };
    }
    if let Some(n) = a.train_tasks {
        spec.train_tasks = n;
    }
    if let Some(n) = a.eval_tasks {
        spec.eval_tasks = n;
    }
    if let Some(n) = a.instances {
        spec.instances_per_task = n;
    }
    if let Some(n) = a.eval_instances {
        spec.eval_instances_per_task = n;
    }
    if let Some(n) = a.nonce_pairs {
        spec.nonce_train_pairs = n;
    }
    let (train_tasks, eval_tasks) = generate_synthetic(&spec, a.seed)?;
    for (sub, tasks) in [("train", &train_tasks), ("eval", &eval_tasks)] {
        let dir = a.out.join(sub);
        fs::create_dir_all(&dir)?;
        for task in tasks {
            println!("{}", save_taskset(task, &dir)?.display());
        }
    }
    write_file(
        &a.out.join("spec.json"),
        &(serde_json::to_string_pretty(&spec)? + "\n"),
    )?;
    Ok(())
}

/// Reports from files and from the `*.json` files of directories, in order.
fn load_reports(paths: &[PathBuf]) -> Result<Vec<EvalReport>> {
    let mut reports = Vec::new();
    for path in paths {
        if path.is_dir() {
            let mut files: Vec<PathBuf> = fs::read_dir(path)?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<_>>()?;
            files.retain(|p| p.extension().is_some_and(|e| e == "json"));
            files.sort();
            for f in files {
                reports.push(
                    EvalReport::load(&f).with_context(|| format!("loading {}", f.display()))?,
                );
            }
        } else {
            reports.push(
                EvalReport::load(path).with_context(|| format!("loading {}", path.display()))?,
            );
        }
    }
    if reports.is_empty() {
        bail!("no reports found");
    }
    Ok(reports)
}

fn cmd_compare(a: CompareArgs) -> Result<()> {
    let reports = load_reports(&a.reports)?;
    let mut by_task: Vec<(String, Vec<EvalReport>)> = Vec::new();
    for r in reports {
        match by_task.iter_mut().find(|(id, _)| *id == r.task_id) {
            Some((_, group)) => group.push(r),
            None => by_task.push((r.task_id.clone(), vec![r])),
        }
    }
    let mut tables = Vec::with_capacity(by_task.len());
    for (_, group) in &by_task {
        let table = compare_runs(group, a.baseline)?;
        print!("{}", table.to_text());
        tables.push(table);
    }
    if let Some(path) = &a.out {
        write_file(path, &(serde_json::to_string_pretty(&tables)? + "\n"))?;
    }
    Ok(())
}
