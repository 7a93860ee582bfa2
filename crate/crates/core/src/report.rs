//! Run-directory layout and result tabulation.
//!
//! A run directory is a self-describing record: the resolved configuration
//! snapshot plus whatever artifacts its subcommands have produced so far.
//! The report scans a root of such directories and renders two tables — one
//! comparing criteria in the fixed order random / weight_sum / delta_loss /
//! kl, one listing each run — in both aligned text and JSON. Scanning is
//! read-only and sorted, so regenerating a report over unchanged runs
//! reproduces it byte for byte.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::prune::Criterion;
use crate::train::read_metrics;

// Artifact names inside a run directory.
pub const CONFIG_FILE: &str = "config.toml";
pub const TEACHER_CKPT: &str = "teacher.ckpt";
pub const TEACHER_METRICS: &str = "teacher-metrics.jsonl";
pub const PLAN_FILE: &str = "plan.txt";
pub const PRUNED_CKPT: &str = "pruned.ckpt";
pub const MACS_FILE: &str = "macs.json";
pub const STUDENT_CKPT: &str = "student.ckpt";
pub const FINETUNE_METRICS: &str = "finetune-metrics.jsonl";
pub const LOGIT_STORE: &str = "teacher.logits";
pub const EXPANDED_IMAGES: &str = "expanded-images.idx";
pub const EXPANDED_LABELS: &str = "expanded-labels.idx";
pub const PROVENANCE_FILE: &str = "provenance.txt";
pub const EVAL_FILE: &str = "eval.json";
// Report outputs, written into the scanned root itself.
pub const REPORT_TEXT: &str = "report.txt";
pub const REPORT_JSON: &str = "report.json";

/// Cost accounting written by the pruning pass as `macs.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MacsReport {
    pub criterion: String,
    pub target: String,
    pub macs_before: u64,
    pub macs_after: u64,
    pub params_before: u64,
    pub params_after: u64,
    pub macs_ratio: f64,
    pub removed_groups: usize,
    /// Held-out accuracy of the carved network before any fine-tuning.
    pub pruned_accuracy: f64,
    /// Present when the target could not be reached under the width floors.
    pub shortfall: Option<String>,
}

impl MacsReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Internal(format!("macs report serialization: {e}")))?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Everything the report knows about one run directory. Absent artifacts
/// stay `None` and render as "no data".
#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub name: String,
    pub criterion: Option<String>,
    pub teacher_accuracy: Option<f64>,
    pub finetuned_accuracy: Option<f64>,
    #[serde(flatten)]
    pub macs: Option<MacsReport>,
}

/// Final eval-record accuracy in a metrics file, if the file exists and
/// holds one.
fn metrics_accuracy(path: &Path) -> Option<f64> {
    if !path.exists() {
        return None;
    }
    match read_metrics(path) {
        Ok(records) => records.iter().rev().find_map(|r| r.accuracy),
        Err(e) => {
            log::warn!("skipping unreadable metrics {}: {e}", path.display());
            None
        }
    }
}

fn summarize_run(dir: &Path, name: &str) -> Option<RunSummary> {
    let cfg = match RunConfig::load(&dir.join(CONFIG_FILE)) {
        Ok(cfg) => cfg,
        Err(e) => {
            log::warn!("skipping {}: {e}", dir.display());
            return None;
        }
    };
    let macs_path = dir.join(MACS_FILE);
    let macs = if macs_path.exists() {
        match MacsReport::load(&macs_path) {
            Ok(m) => Some(m),
            Err(e) => {
                log::warn!("ignoring unreadable {}: {e}", macs_path.display());
                None
            }
        }
    } else {
        None
    };
    Some(RunSummary {
        name: name.to_string(),
        criterion: macs
            .as_ref()
            .map(|m| m.criterion.clone())
            .or(Some(cfg.criterion)),
        teacher_accuracy: metrics_accuracy(&dir.join(TEACHER_METRICS)),
        finetuned_accuracy: metrics_accuracy(&dir.join(FINETUNE_METRICS)),
        macs,
    })
}

/// Scans `root` for run directories (anything holding a config snapshot),
/// sorted by name.
pub fn scan_runs(root: &Path) -> Result<Vec<RunSummary>> {
    let mut names = Vec::new();
    let entries =
        std::fs::read_dir(root).map_err(|e| Error::io(root.display().to_string(), e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root.display().to_string(), e))?;
        let path = entry.path();
        if path.is_dir() && path.join(CONFIG_FILE).exists() {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    Ok(names
        .iter()
        .filter_map(|name| summarize_run(&root.join(name), name))
        .collect())
}

const NO_DATA: &str = "no data";

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.4}"),
        None => NO_DATA.into(),
    }
}

fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Left-aligns the first column, right-aligns the rest, two spaces between.
fn render_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in rows {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let mut out = String::new();
    let mut put_row = |cells: &[String]| {
        for (i, cell) in cells.iter().enumerate() {
            if i > 0 {
                out.push_str("  ");
            }
            if i == 0 {
                out.push_str(&format!("{cell:<width$}", width = widths[i]));
            } else {
                out.push_str(&format!("{cell:>width$}", width = widths[i]));
            }
        }
        while out.ends_with(' ') {
            out.pop();
        }
        out.push('\n');
    };
    put_row(&headers.iter().map(|h| h.to_string()).collect::<Vec<_>>());
    for row in rows {
        put_row(row);
    }
    out
}

/// Per-criterion aggregate used by both renderings of the comparison table.
#[derive(Serialize)]
struct CriterionColumn {
    criterion: String,
    runs: usize,
    teacher_accuracy: Option<f64>,
    pruned_accuracy: Option<f64>,
    finetuned_accuracy: Option<f64>,
    macs_ratio: Option<f64>,
}

fn criterion_columns(runs: &[RunSummary]) -> Vec<CriterionColumn> {
    Criterion::ALL
        .iter()
        .map(|c| {
            let name = c.to_string();
            let mine: Vec<&RunSummary> =
                runs.iter().filter(|r| r.criterion.as_deref() == Some(name.as_str())).collect();
            let collect = |f: &dyn Fn(&RunSummary) -> Option<f64>| {
                mean(&mine.iter().filter_map(|r| f(r)).collect::<Vec<_>>())
            };
            CriterionColumn {
                criterion: name,
                runs: mine.len(),
                teacher_accuracy: collect(&|r| r.teacher_accuracy),
                pruned_accuracy: collect(&|r| r.macs.as_ref().map(|m| m.pruned_accuracy)),
                finetuned_accuracy: collect(&|r| r.finetuned_accuracy),
                macs_ratio: collect(&|r| r.macs.as_ref().map(|m| m.macs_ratio)),
            }
        })
        .collect()
}

/// Criterion comparison: criteria as columns in the fixed order, one row
/// per metric, cells averaged over that criterion's runs.
pub fn criterion_table(runs: &[RunSummary]) -> String {
    let cols = criterion_columns(runs);
    let headers: Vec<&str> = std::iter::once("metric")
        .chain(cols.iter().map(|c| c.criterion.as_str()))
        .collect();
    let row = |label: &str, get: &dyn Fn(&CriterionColumn) -> String| {
        std::iter::once(label.to_string()).chain(cols.iter().map(get)).collect::<Vec<_>>()
    };
    let rows = vec![
        row("runs", &|c| c.runs.to_string()),
        row("teacher accuracy", &|c| fmt_opt(c.teacher_accuracy)),
        row("pruned accuracy", &|c| fmt_opt(c.pruned_accuracy)),
        row("finetuned accuracy", &|c| fmt_opt(c.finetuned_accuracy)),
        row("macs ratio", &|c| fmt_opt(c.macs_ratio)),
    ];
    render_table(&headers, &rows)
}

/// Per-run cost table: one row per run directory, sorted by name.
pub fn runs_table(runs: &[RunSummary]) -> String {
    if runs.is_empty() {
        return "(no runs)\n".into();
    }
    let headers = [
        "run", "criterion", "macs before", "macs after", "macs ratio", "params before",
        "params after", "finetuned",
    ];
    let rows: Vec<Vec<String>> = runs
        .iter()
        .map(|r| {
            let m = r.macs.as_ref();
            vec![
                r.name.clone(),
                r.criterion.clone().unwrap_or_else(|| NO_DATA.into()),
                m.map(|m| m.macs_before.to_string()).unwrap_or_else(|| NO_DATA.into()),
                m.map(|m| m.macs_after.to_string()).unwrap_or_else(|| NO_DATA.into()),
                fmt_opt(m.map(|m| m.macs_ratio)),
                m.map(|m| m.params_before.to_string()).unwrap_or_else(|| NO_DATA.into()),
                m.map(|m| m.params_after.to_string()).unwrap_or_else(|| NO_DATA.into()),
                fmt_opt(r.finetuned_accuracy),
            ]
        })
        .collect();
    render_table(&headers, &rows)
}

/// Both tables under plain headings.
pub fn render_report(runs: &[RunSummary]) -> String {
    format!(
        "criterion comparison\n\n{}\nruns\n\n{}",
        criterion_table(runs),
        runs_table(runs)
    )
}

/// The same content as JSON: fixed-order criterion aggregates plus the
/// name-sorted run list.
pub fn report_json(runs: &[RunSummary]) -> Result<String> {
    let value = serde_json::json!({
        "criteria": criterion_columns(runs),
        "runs": runs,
    });
    let mut text = serde_json::to_string_pretty(&value)
        .map_err(|e| Error::Internal(format!("report serialization: {e}")))?;
    text.push('\n');
    Ok(text)
}

/// Scans `root`, writes `report.txt` and `report.json` into it, and returns
/// the text rendering. Pure function of the run artifacts, so regenerating
/// is idempotent.
pub fn write_report(root: &Path) -> Result<String> {
    let runs = scan_runs(root)?;
    let text = render_report(&runs);
    std::fs::write(root.join(REPORT_TEXT), &text)
        .map_err(|e| Error::io(root.join(REPORT_TEXT).display().to_string(), e))?;
    std::fs::write(root.join(REPORT_JSON), report_json(&runs)?)
        .map_err(|e| Error::io(root.join(REPORT_JSON).display().to_string(), e))?;
    Ok(text)
}
