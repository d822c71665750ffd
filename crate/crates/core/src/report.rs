//! Run-directory exports and the markdown summary built from them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::Result;
use crate::plot::{history_from_jsonl, km_from_csv, read_text};
use crate::survival::{auroc, LogRank};
use crate::trainer::{CvSummary, EpochRecord};

/// Per-node inclusion probabilities of one slide.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeProbSlide {
    pub id: String,
    pub coords: Vec<(i32, i32)>,
    pub probs: Vec<f64>,
    pub causal_mask: Option<Vec<bool>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeProbsExport {
    pub slides: Vec<NodeProbSlide>,
}

impl NodeProbsExport {
    /// Pooled AUROC of node probabilities against planted causal masks.
    pub fn causal_auroc(&self) -> Option<f64> {
        let (mut scores, mut labels) = (Vec::new(), Vec::new());
        for s in &self.slides {
            let mask = s.causal_mask.as_ref()?;
            scores.extend_from_slice(&s.probs);
            labels.extend_from_slice(mask);
        }
        auroc(&scores, &labels)
    }
}

/// Cluster state over training plus the final assignment of the exported slides.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClustersExport {
    pub k_effective_history: Vec<Option<usize>>,
    pub train_ids: Vec<String>,
    /// Per epoch, nearest center of each training slide.
    pub epoch_assignments: Vec<Option<Vec<usize>>>,
    pub ids: Vec<String>,
    pub institutions: Vec<Option<usize>>,
    pub clusters: Option<Vec<usize>>,
}

impl ClustersExport {
    pub fn from_history(history: &[EpochRecord], train_ids: Vec<String>) -> Self {
        Self {
            k_effective_history: history.iter().map(|r| r.k_effective).collect(),
            train_ids,
            epoch_assignments: history
                .iter()
                .map(|r| r.cluster_assignments.clone())
                .collect(),
            ..Self::default()
        }
    }
}

/// Summary of a single training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub best_epoch: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_ood: usize,
    pub train_c_index: Option<f64>,
    pub val_c_index: Option<f64>,
    pub val_log_rank: Option<LogRank>,
    pub ood_c_index: Option<f64>,
}

pub const SECTIONS: [&str; 6] = [
    "configuration",
    "c-index",
    "training history",
    "clusters",
    "kaplan-meier",
    "node probabilities",
];

#[derive(Clone, Debug)]
pub struct Report {
    pub markdown: String,
    /// Sections whose artifacts were missing or unreadable.
    pub missing: Vec<String>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |x| format!("{x:.4}"))
}

fn load<T>(
    dir: &Path,
    name: &str,
    parse: impl FnOnce(&str, &str) -> Result<T>,
) -> std::result::Result<T, String> {
    let path = dir.join(name);
    if !path.exists() {
        return Err(format!("{name} not found"));
    }
    let text = read_text(&path).map_err(|e| e.to_string())?;
    parse(&text, &path.display().to_string()).map_err(|e| e.to_string())
}

fn json<T: for<'de> Deserialize<'de>>(text: &str, _ctx: &str) -> Result<T> {
    Ok(serde_json::from_str(text)?)
}

/// Build the markdown summary of a run directory. Missing or unreadable
/// artifacts are listed rather than treated as errors. For cross-validation
/// runs the per-run artifacts are read from `fold0/`.
pub fn emit_report(run_dir: &Path) -> Report {
    let mut md = String::from("# Run report\n\n");
    let _ = writeln!(md, "Run directory: `{}`\n", run_dir.display());
    let mut missing = Vec::new();
    let cv: Option<CvSummary> = load(run_dir, "cv_summary.json", json).ok();
    let detail_dir = if cv.is_some() && run_dir.join("fold0").is_dir() {
        run_dir.join("fold0")
    } else {
        run_dir.to_path_buf()
    };
    let detail = detail_dir.as_path();
    let rel = if detail == run_dir { "" } else { "fold0/" };
    if !rel.is_empty() {
        md.push_str("Per-run sections below show fold 0.\n\n");
    }

    md.push_str("## Configuration\n\n");
    match load(run_dir, "effective_config.json", json::<Value>) {
        Ok(v) => {
            let pretty = serde_json::to_string_pretty(&v).unwrap_or_default();
            let _ = writeln!(md, "```json\n{pretty}\n```\n");
        }
        Err(e) => {
            let _ = writeln!(md, "_missing: {e}_\n");
            missing.push("configuration".into());
        }
    }

    md.push_str("## C-index\n\n");
    if let Some(cv) = &cv {
        c_index_table(&mut md, cv);
    } else if let Ok(m) = load(run_dir, "metrics.json", json::<TrainMetrics>) {
        md.push_str("| split | slides | C-index |\n|---|---|---|\n");
        let _ = writeln!(
            md,
            "| train | {} | {} |",
            m.n_train,
            fmt_opt(m.train_c_index)
        );
        let _ = writeln!(
            md,
            "| validation | {} | {} |",
            m.n_val,
            fmt_opt(m.val_c_index)
        );
        if m.n_ood > 0 {
            let _ = writeln!(
                md,
                "| held-out institution | {} | {} |",
                m.n_ood,
                fmt_opt(m.ood_c_index)
            );
        }
        let _ = writeln!(md, "\nBest epoch: {}\n", m.best_epoch);
    } else if let Ok(v) = load(run_dir, "eval.json", json::<Value>) {
        let c = v.get("c_index").and_then(Value::as_f64);
        let n = v.get("ids").and_then(Value::as_array).map_or(0, Vec::len);
        let _ = writeln!(
            md,
            "| split | slides | C-index |\n|---|---|---|\n| evaluation | {n} | {} |\n",
            fmt_opt(c)
        );
    } else {
        md.push_str("_missing: none of cv_summary.json, metrics.json or eval.json found_\n\n");
        missing.push("c-index".into());
    }

    md.push_str("## Training history\n\n");
    match load(detail, "history.jsonl", history_from_jsonl) {
        Ok(h) if !h.is_empty() => history_table(&mut md, &h),
        Ok(_) => {
            md.push_str("_missing: history.jsonl is empty_\n\n");
            missing.push("training history".into());
        }
        Err(e) => {
            let _ = writeln!(md, "_missing: {e}_\n");
            missing.push("training history".into());
        }
    }

    md.push_str("## Clusters\n\n");
    match load(detail, "clusters.json", json::<ClustersExport>) {
        Ok(c) => clusters_section(&mut md, &c),
        Err(e) => {
            let _ = writeln!(md, "_missing: {e}_\n");
            missing.push("clusters".into());
        }
    }

    md.push_str("## Kaplan-Meier\n\n");
    match load(detail, "km.csv", km_from_csv) {
        Ok(curves) if !curves.is_empty() => {
            md.push_str("| group | event times | final survival |\n|---|---|---|\n");
            for c in &curves {
                let _ = writeln!(
                    md,
                    "| {} | {} | {:.4} |",
                    crate::plot::group_name(c.group),
                    c.times.len(),
                    c.survival.last().copied().unwrap_or(1.0)
                );
            }
            if detail.join("km.svg").exists() {
                let _ = writeln!(md, "\n![Kaplan-Meier]({rel}km.svg)");
            }
            md.push('\n');
        }
        Ok(_) => {
            md.push_str("_missing: km.csv has no curves_\n\n");
            missing.push("kaplan-meier".into());
        }
        Err(e) => {
            let _ = writeln!(md, "_missing: {e}_\n");
            missing.push("kaplan-meier".into());
        }
    }

    md.push_str("## Node probabilities\n\n");
    match load(detail, "node_probs.json", json::<NodeProbsExport>) {
        Ok(np) => {
            let mean = |f: &dyn Fn(&NodeProbSlide) -> Option<f64>| {
                let v: Vec<f64> = np.slides.iter().filter_map(f).collect();
                (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
            };
            let _ = writeln!(md, "Slides: {}\n", np.slides.len());
            let _ = writeln!(
                md,
                "Mean node probability: {}\n",
                fmt_opt(mean(&|s| (!s.probs.is_empty()).then(|| s
                    .probs
                    .iter()
                    .sum::<f64>()
                    / s.probs.len() as f64)))
            );
            if let Some(a) = np.causal_auroc() {
                let _ = writeln!(md, "AUROC against planted causal nodes: {a:.4}\n");
            }
            let maps: Vec<_> = (0..np.slides.len().min(4))
                .map(|i| format!("node_map_{i}.svg"))
                .filter(|f| detail.join(f).exists())
                .collect();
            for f in maps {
                let _ = writeln!(md, "![node map]({rel}{f})");
            }
            md.push('\n');
        }
        Err(e) => {
            let _ = writeln!(md, "_missing: {e}_\n");
            missing.push("node probabilities".into());
        }
    }

    if !missing.is_empty() {
        md.push_str("## Missing sections\n\n");
        for m in &missing {
            let _ = writeln!(md, "- {m}");
        }
    }
    Report {
        markdown: md,
        missing,
    }
}

fn c_index_table(md: &mut String, cv: &CvSummary) {
    let ood = cv.folds.iter().any(|f| !f.ood_ids.is_empty());
    md.push_str("Averaged over cross-validation folds.\n\n");
    if ood {
        md.push_str("| fold | test slides | best epoch | C-index | held-out C-index |\n|---|---|---|---|---|\n");
    } else {
        md.push_str("| fold | test slides | best epoch | C-index |\n|---|---|---|---|\n");
    }
    for f in &cv.folds {
        let _ = write!(
            md,
            "| {} | {} | {} | {} |",
            f.fold,
            f.test_ids.len(),
            f.best_epoch,
            fmt_opt(f.test_c_index)
        );
        if ood {
            let _ = write!(md, " {} |", fmt_opt(f.ood_c_index));
        }
        md.push('\n');
    }
    let pm = |m: Option<f64>, s: Option<f64>| match (m, s) {
        (Some(m), Some(s)) => format!("{m:.4} ± {s:.4}"),
        _ => "n/a".into(),
    };
    let _ = write!(
        md,
        "| mean ± std | | | {} |",
        pm(cv.mean_c_index, cv.std_c_index)
    );
    if ood {
        let _ = write!(md, " {} |", pm(cv.mean_ood_c_index, cv.std_ood_c_index));
    }
    md.push_str("\n\n");
}

fn history_table(md: &mut String, h: &[EpochRecord]) {
    md.push_str(
        "| epoch | phase | loss | cox (causal) | contrastive | val C-index | K effective |\n",
    );
    md.push_str("|---|---|---|---|---|---|---|\n");
    for r in h {
        let phase = if r.phase.warm_up { "warm-up" } else { "joint" };
        let _ = writeln!(
            md,
            "| {} | {} | {:.4} | {:.4} | {:.4} | {} | {} |",
            r.epoch,
            phase,
            r.loss,
            r.cox_causal,
            r.contrastive,
            fmt_opt(r.val_c_index),
            r.k_effective.map_or("n/a".into(), |k| k.to_string())
        );
    }
    md.push('\n');
}

fn clusters_section(md: &mut String, c: &ClustersExport) {
    let ks: Vec<String> = c
        .k_effective_history
        .iter()
        .map(|k| k.map_or("-".into(), |k| k.to_string()))
        .collect();
    let _ = writeln!(md, "K effective per epoch: {}\n", ks.join(" "));
    let Some(clusters) = &c.clusters else {
        md.push_str("No frozen cluster assignment (disentangling inactive).\n\n");
        return;
    };
    let mut table: BTreeMap<usize, BTreeMap<String, usize>> = BTreeMap::new();
    let mut columns: Vec<String> = Vec::new();
    for (k, inst) in clusters.iter().zip(&c.institutions) {
        let col = inst.map_or("unknown".into(), |i| format!("institution {i}"));
        if !columns.contains(&col) {
            columns.push(col.clone());
        }
        *table.entry(*k).or_default().entry(col).or_default() += 1;
    }
    columns.sort();
    let _ = writeln!(md, "| cluster | {} |", columns.join(" | "));
    let _ = writeln!(md, "|---|{}", "---|".repeat(columns.len()));
    for (k, row) in &table {
        let cells: Vec<String> = columns
            .iter()
            .map(|col| row.get(col).copied().unwrap_or(0).to_string())
            .collect();
        let _ = writeln!(md, "| {k} | {} |", cells.join(" | "));
    }
    md.push('\n');
}
