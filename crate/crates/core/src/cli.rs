//! Command-line front end: `generate`, `train`, `eval`, `cv`, `gradcheck`, `plot`.
//!
//! Settings are layered: config file, then `CMIL_SEED`/`CMIL_JOBS`, then
//! positional `key=value` overrides, then flags. Keys are dotted paths into
//! [`RunConfig`] such as `train.epochs` or `cohort.n_slides`; values are
//! parsed as JSON and fall back to plain strings.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::audit::{gradient_audit, Scale, GRADIENT_TOLERANCE};
use crate::checkpoint::Checkpoint;
use crate::cohort::{generate_synthetic_cohort, load_cohort, save_cohort, Cohort, CohortConfig};
use crate::error::Error;
use crate::plot::{
    self, history_charts, history_to_jsonl, km_chart, km_from_csv, km_to_csv, node_map,
};
use crate::report::{emit_report, ClustersExport, NodeProbSlide, NodeProbsExport, TrainMetrics};
use crate::survival::km_curve;
use crate::trainer::{
    cluster_assignments, cross_validate, evaluate, split_validation, train, EpochRecord,
    EvalResult, Precision, TrainConfig,
};

/// Everything a command can be configured with; the config file holds this object.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides `train.seed` and seeds cohort generation.
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    /// Overrides `train.precision`.
    pub precision: Option<Precision>,
    pub out: Option<PathBuf>,
    pub cohort_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
    pub km: Option<PathBuf>,
    pub scale: Option<Scale>,
    pub cohort: CohortConfig,
    pub train: TrainConfig,
}

#[derive(Parser, Debug)]
#[command(
    name = "cmil",
    version,
    about = "Causal multiple-instance survival modelling on synthetic slide graphs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic cohort directory.
    Generate(Common),
    /// Train one model with a validation split.
    Train(Common),
    /// Evaluate a checkpoint on a cohort.
    Eval(Common),
    /// K-fold cross-validation.
    Cv(Common),
    /// Finite-difference audit of every module's gradients.
    Gradcheck(Common),
    /// Draw SVG charts from a metric history and/or KM curves.
    Plot(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; nothing is written elsewhere.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Concurrent folds for `cv`.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long, value_parser = ["f32", "f64"])]
    precision: Option<String>,
    /// Cohort directory.
    #[arg(long)]
    cohort: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Metric history (JSON lines).
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Kaplan-Meier CSV.
    #[arg(long)]
    km: Option<PathBuf>,
    /// Gradient audit size: tiny or small.
    #[arg(long)]
    scale: Option<String>,
    /// `key=value` overrides, e.g. `train.epochs=20`.
    overrides: Vec<String>,
}

#[derive(Debug)]
enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn validation(msg: impl Into<String>) -> Failure {
    Failure::Validation(msg.into())
}

/// Reading caller-supplied inputs: any failure is the caller's.
fn input<T>(r: crate::Result<T>) -> CliResult<T> {
    r.map_err(|e| Failure::Validation(e.to_string()))
}

/// Run the CLI with `argv` (including the program name) and return the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let first = e.to_string();
            let first = first
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ")
                .to_string();
            eprintln!("cmil-error[validation]: {first}");
            return 1;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(Failure::Validation(m)) => {
            eprintln!("cmil-error[validation]: {}", one_line(&m));
            1
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("cmil-error[runtime]: {}", one_line(&m));
            2
        }
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::Generate(c) => cmd_generate(&resolve(&c, Some("cohort"))?),
        Command::Train(c) => cmd_train(&resolve(&c, Some("train"))?),
        Command::Eval(c) => cmd_eval(&resolve(&c, None)?),
        Command::Cv(c) => cmd_cv(&resolve(&c, Some("train"))?),
        Command::Gradcheck(c) => cmd_gradcheck(&resolve(&c, None)?),
        Command::Plot(c) => cmd_plot(&resolve(&c, None)?),
    }
}

/// Dotted paths of every settable leaf.
pub fn valid_keys() -> Vec<String> {
    let mut keys = Vec::new();
    let v = serde_json::to_value(RunConfig::default()).expect("default config serializes");
    collect_keys(&v, "", &mut keys);
    keys
}

fn collect_keys(v: &Value, prefix: &str, out: &mut Vec<String>) {
    match v {
        Value::Object(m) if prefix.is_empty() || matches!(prefix, "cohort" | "train") => {
            for (k, sub) in m {
                let path = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                collect_keys(sub, &path, out);
            }
        }
        _ => out.push(prefix.to_string()),
    }
}

fn unknown_key(key: &str) -> Failure {
    validation(format!(
        "unknown key `{key}`; valid keys: {}",
        valid_keys().join(", ")
    ))
}

fn set_key(root: &mut Value, key: &str, value: Value, valid: &[String]) -> CliResult<()> {
    if !valid.iter().any(|k| k == key) {
        return Err(unknown_key(key));
    }
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for p in &parts[..parts.len() - 1] {
        cur = cur
            .as_object_mut()
            .and_then(|m| m.get_mut(*p))
            .ok_or_else(|| unknown_key(key))?;
    }
    cur.as_object_mut()
        .ok_or_else(|| unknown_key(key))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn merge_file(
    root: &mut Value,
    file: &Map<String, Value>,
    prefix: &str,
    valid: &[String],
) -> CliResult<()> {
    for (k, v) in file {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            Value::Object(m) if prefix.is_empty() && matches!(k.as_str(), "cohort" | "train") => {
                merge_file(root, m, &path, valid)?
            }
            _ => set_key(root, &path, v.clone(), valid)?,
        }
    }
    Ok(())
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn resolve(c: &Common, section: Option<&str>) -> CliResult<RunConfig> {
    let valid = valid_keys();
    let mut root = serde_json::to_value(RunConfig::default()).expect("default config serializes");
    if let Some(path) = &c.config {
        let text = input(plot::read_text(path))?;
        let v: Value = serde_json::from_str(&text)
            .map_err(|e| validation(format!("config {}: {e}", path.display())))?;
        let Value::Object(mut m) = v else {
            return Err(validation(format!(
                "config {}: expected a JSON object",
                path.display()
            )));
        };
        // a bare section object (e.g. only cohort settings for `generate`)
        if let Some(sec) = section {
            let bare = !m.is_empty()
                && m.keys()
                    .all(|k| valid.iter().any(|v| v == &format!("{sec}.{k}")))
                && m.keys().any(|k| !valid.contains(k));
            if bare {
                let inner = std::mem::take(&mut m);
                m.insert(sec.to_string(), Value::Object(inner));
            }
        }
        merge_file(&mut root, &m, "", &valid)?;
    }
    for (var, key) in [("CMIL_SEED", "seed"), ("CMIL_JOBS", "jobs")] {
        if let Ok(raw) = std::env::var(var) {
            let n: u64 = raw.trim().parse().map_err(|_| {
                validation(format!("{var} must be a non-negative integer, got `{raw}`"))
            })?;
            set_key(&mut root, key, Value::from(n), &valid)?;
        }
    }
    for o in &c.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| validation(format!("expected key=value, got `{o}`")))?;
        set_key(&mut root, k.trim(), parse_value(v.trim()), &valid)?;
    }
    let path = |p: &Option<PathBuf>| p.as_ref().map(|p| Value::String(p.display().to_string()));
    let flags = [
        ("seed", c.seed.map(Value::from)),
        ("jobs", c.jobs.map(Value::from)),
        ("precision", c.precision.clone().map(Value::String)),
        ("out", path(&c.out)),
        ("cohort_dir", path(&c.cohort)),
        ("checkpoint", path(&c.checkpoint)),
        ("metrics", path(&c.metrics)),
        ("km", path(&c.km)),
        ("scale", c.scale.clone().map(Value::String)),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            set_key(&mut root, k, v, &valid)?;
        }
    }
    let mut cfg: RunConfig =
        serde_json::from_value(root).map_err(|e| validation(format!("config: {e}")))?;
    if let Some(s) = cfg.seed {
        cfg.train.seed = s;
    }
    if let Some(p) = cfg.precision {
        cfg.train.precision = p;
    }
    if cfg.jobs == Some(0) {
        return Err(validation("jobs must be at least 1"));
    }
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> CliResult<&Path> {
    let out = cfg
        .out
        .as_deref()
        .ok_or_else(|| validation("--out is required"))?;
    fs::create_dir_all(out)
        .map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", out.display())))?;
    Ok(out)
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    Ok(plot::write_text(path, text)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    write(path, &(text + "\n"))
}

/// The echo leaves out `out` itself so identical runs into different
/// directories produce identical files.
fn echo_config(out: &Path, cfg: &RunConfig) -> CliResult<()> {
    let echoed = RunConfig {
        out: None,
        ..cfg.clone()
    };
    write_json(&out.join("effective_config.json"), &echoed)
}

fn load_input_cohort(cfg: &RunConfig) -> CliResult<Cohort> {
    let dir = cfg
        .cohort_dir
        .as_ref()
        .ok_or_else(|| validation("--cohort is required"))?;
    input(load_cohort(dir))
}

fn cmd_generate(cfg: &RunConfig) -> CliResult<()> {
    let out = out_dir(cfg)?;
    let cohort = generate_synthetic_cohort(&cfg.cohort, cfg.seed.unwrap_or(cfg.train.seed))?;
    save_cohort(&cohort, out)?;
    echo_config(out, cfg)?;
    println!("generated {} slides in {}", cohort.len(), out.display());
    Ok(())
}

fn write_history(dir: &Path, history: &[EpochRecord]) -> CliResult<()> {
    write(&dir.join("history.jsonl"), &history_to_jsonl(history)?)?;
    for (name, svg) in history_charts(history) {
        write(&dir.join(name), &svg)?;
    }
    Ok(())
}

/// KM curves, node probabilities and their charts for one evaluation.
fn write_eval_exports(dir: &Path, cohort: &Cohort, eval: &EvalResult) -> CliResult<()> {
    if let Some(high) = &eval.high_risk {
        let groups: Vec<usize> = high.iter().map(|&h| h as usize).collect();
        let curves = km_curve(&eval.labels, &groups)?;
        write(&dir.join("km.csv"), &km_to_csv(&curves))?;
        write(&dir.join("km.svg"), &km_chart(&curves))?;
    }
    let slides: Vec<NodeProbSlide> = cohort
        .slides
        .iter()
        .zip(&eval.node_probs)
        .map(|(s, p)| NodeProbSlide {
            id: s.id.clone(),
            coords: s.patch_coords.clone(),
            probs: p.clone(),
            causal_mask: s.planted_causal_mask.clone(),
        })
        .collect();
    for (i, s) in slides.iter().take(4).enumerate() {
        let svg = node_map(&s.id, &s.coords, &s.probs, s.causal_mask.as_deref());
        write(&dir.join(format!("node_map_{i}.svg")), &svg)?;
    }
    write_json(&dir.join("node_probs.json"), &NodeProbsExport { slides })
}

fn write_clusters(
    dir: &Path,
    mut export: ClustersExport,
    ckpt: &Checkpoint,
    cohort: &Cohort,
) -> CliResult<()> {
    export.ids = cohort.slides.iter().map(|s| s.id.clone()).collect();
    export.institutions = cohort
        .slides
        .iter()
        .map(|s| s.planted_institution)
        .collect();
    export.clusters = cluster_assignments(ckpt, cohort)?;
    write_json(&dir.join("clusters.json"), &export)
}

fn write_report(dir: &Path) -> CliResult<()> {
    let report = emit_report(dir);
    for m in &report.missing {
        log::warn!("report: missing {m}");
    }
    write(&dir.join("report.md"), &report.markdown)
}

fn cmd_train(cfg: &RunConfig) -> CliResult<()> {
    let cohort = load_input_cohort(cfg)?;
    cfg.train.validate()?;
    let out = out_dir(cfg)?;
    echo_config(out, cfg)?;
    let tc = &cfg.train;
    let (pool, ood): (Vec<usize>, Vec<usize>) = match tc.held_out_institution {
        Some(inst) => {
            if !cohort
                .slides
                .iter()
                .any(|s| s.planted_institution == Some(inst))
            {
                return Err(validation(format!(
                    "institution {inst} does not occur in the cohort"
                )));
            }
            (0..cohort.len()).partition(|&i| cohort.slides[i].planted_institution != Some(inst))
        }
        None => ((0..cohort.len()).collect(), Vec::new()),
    };
    let (tr, va) = split_validation(&pool, tc.validation_fraction, tc.seed, 0);
    let train_c = cohort.subset(&tr)?;
    let val_c = if va.is_empty() {
        None
    } else {
        Some(cohort.subset(&va)?)
    };
    let outcome = train(&train_c, val_c.as_ref(), tc)?;
    outcome.checkpoint.save(out.join("checkpoint.bin"))?;
    outcome.last.save(out.join("last.bin"))?;
    write_history(out, &outcome.history)?;

    let val_eval = val_c
        .as_ref()
        .map(|v| evaluate(&outcome.checkpoint, v))
        .transpose()?;
    let ood_c = if ood.is_empty() {
        None
    } else {
        Some(cohort.subset(&ood)?)
    };
    let ood_eval = ood_c
        .as_ref()
        .map(|c| evaluate(&outcome.checkpoint, c))
        .transpose()?;
    let metrics = TrainMetrics {
        best_epoch: outcome.best_epoch,
        n_train: tr.len(),
        n_val: va.len(),
        n_ood: ood.len(),
        train_c_index: outcome.train_eval.c_index,
        val_c_index: val_eval.as_ref().and_then(|e| e.c_index),
        val_log_rank: val_eval.as_ref().and_then(|e| e.log_rank),
        ood_c_index: ood_eval.as_ref().and_then(|e| e.c_index),
    };
    write_json(&out.join("metrics.json"), &metrics)?;
    match (&val_c, &val_eval) {
        (Some(c), Some(e)) => write_eval_exports(out, c, e)?,
        _ => write_eval_exports(out, &train_c, &outcome.train_eval)?,
    }
    let train_ids = train_c.slides.iter().map(|s| s.id.clone()).collect();
    write_clusters(
        out,
        ClustersExport::from_history(&outcome.history, train_ids),
        &outcome.checkpoint,
        &cohort,
    )?;
    write_report(out)?;
    println!(
        "best epoch {} train C-index {} validation C-index {}",
        metrics.best_epoch,
        fmt(metrics.train_c_index),
        fmt(metrics.val_c_index)
    );
    Ok(())
}

fn fmt(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |x| format!("{x:.4}"))
}

fn cmd_eval(cfg: &RunConfig) -> CliResult<()> {
    let path = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| validation("--checkpoint is required"))?;
    let ckpt = input(Checkpoint::load(path))?;
    let cohort = load_input_cohort(cfg)?;
    let out = out_dir(cfg)?;
    echo_config(out, cfg)?;
    let eval = evaluate(&ckpt, &cohort)?;
    write_json(&out.join("eval.json"), &eval)?;
    write_eval_exports(out, &cohort, &eval)?;
    write_clusters(out, ClustersExport::default(), &ckpt, &cohort)?;
    write_report(out)?;
    println!("C-index {} on {} slides", fmt(eval.c_index), eval.ids.len());
    Ok(())
}

fn cmd_cv(cfg: &RunConfig) -> CliResult<()> {
    let cohort = load_input_cohort(cfg)?;
    cfg.train.validate()?;
    let out = out_dir(cfg)?;
    echo_config(out, cfg)?;
    let (summary, runs) = cross_validate(&cohort, &cfg.train, cfg.jobs.unwrap_or(1))?;
    for run in &runs {
        let dir = out.join(format!("fold{}", run.result.fold));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        run.outcome.checkpoint.save(dir.join("checkpoint.bin"))?;
        write_history(&dir, &run.outcome.history)?;
        write_json(&dir.join("eval.json"), &run.test_eval)?;
        let idx: Vec<usize> = (0..cohort.len())
            .filter(|&i| run.result.test_ids.contains(&cohort.slides[i].id))
            .collect();
        let test_c = cohort.subset(&idx)?;
        write_eval_exports(&dir, &test_c, &run.test_eval)?;
        write_clusters(
            &dir,
            ClustersExport::from_history(&run.outcome.history, run.result.train_ids.clone()),
            &run.outcome.checkpoint,
            &test_c,
        )?;
    }
    write_json(&out.join("cv_summary.json"), &summary)?;
    write_report(out)?;
    for f in &summary.folds {
        println!("fold {} C-index {}", f.fold, fmt(f.test_c_index));
    }
    println!(
        "mean C-index {} ± {}",
        fmt(summary.mean_c_index),
        fmt(summary.std_c_index)
    );
    Ok(())
}

fn cmd_gradcheck(cfg: &RunConfig) -> CliResult<()> {
    let scale = cfg.scale.unwrap_or(Scale::Tiny);
    let checks = gradient_audit(scale, cfg.seed.unwrap_or(cfg.train.seed))?;
    let mut failed = Vec::new();
    for c in &checks {
        let status = if c.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<18} max_rel_error {:.3e} coordinates {:>5} {status}",
            c.module, c.max_rel_error, c.coordinates
        );
        if !c.passed() {
            failed.push(c.module.clone());
        }
    }
    if cfg.out.is_some() {
        let out = out_dir(cfg)?;
        echo_config(out, cfg)?;
        write_json(&out.join("gradcheck.json"), &checks)?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(validation(format!(
            "gradient check exceeds {GRADIENT_TOLERANCE:e} for: {}",
            failed.join(", ")
        )))
    }
}

fn cmd_plot(cfg: &RunConfig) -> CliResult<()> {
    if cfg.metrics.is_none() && cfg.km.is_none() {
        return Err(validation("plot needs --metrics and/or --km"));
    }
    let history = match &cfg.metrics {
        Some(p) => {
            let text = input(plot::read_text(p))?;
            Some(input(plot::history_from_jsonl(
                &text,
                &p.display().to_string(),
            ))?)
        }
        None => None,
    };
    let curves = match &cfg.km {
        Some(p) => {
            let text = input(plot::read_text(p))?;
            Some(input(km_from_csv(&text, &p.display().to_string()))?)
        }
        None => None,
    };
    let out = out_dir(cfg)?;
    echo_config(out, cfg)?;
    if let Some(h) = history {
        for (name, svg) in history_charts(&h) {
            write(&out.join(name), &svg)?;
            println!("wrote {}", out.join(name).display());
        }
    }
    if let Some(c) = curves {
        write(&out.join("km.svg"), &km_chart(&c))?;
        println!("wrote {}", out.join("km.svg").display());
    }
    Ok(())
}
