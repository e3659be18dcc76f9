//! Report files: `summary.json` plus plot-ready CSV tables.
//!
//! Every CSV starts with a `#` comment line naming the tool version, the
//! random stream algorithm and the master seed, followed by a header row.

use std::fmt::Write as _;
use std::path::Path;

use super::{CampaignError, CampaignResult, TargetInfo};

pub const REPORT_FILES: [&str; 5] = ["summary.json", "accuracy.csv", "cma.csv", "records.csv", "layers.csv"];

fn comment(result: &CampaignResult) -> String {
    format!(
        "# {}; rng {}; seed {}\n",
        result.header.tool, result.header.rng, result.header.seed
    )
}

fn write(dir: &Path, name: &str, contents: &[u8]) -> Result<(), CampaignError> {
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|source| CampaignError::Io { path, source })
}

fn check_trials(result: &CampaignResult) -> Result<(), CampaignError> {
    match result.cells.iter().find(|c| c.accuracies.is_empty()) {
        Some(c) => Err(CampaignError::EmptyTrials {
            target: c.label.clone(),
            probability: c.probability,
        }),
        None => Ok(()),
    }
}

fn per_trial_csv(result: &CampaignResult, column: &str, values: impl Fn(&super::Cell) -> &[f64]) -> String {
    let mut out = comment(result);
    let _ = writeln!(out, "target,probability,trial,{column}");
    for cell in &result.cells {
        for (t, v) in values(cell).iter().enumerate() {
            let _ = writeln!(out, "{},{},{t},{v}", cell.label, cell.probability);
        }
    }
    out
}

fn layers_csv(result: &CampaignResult) -> String {
    let mut out = comment(result);
    out.push_str("target,layer,name,kind,probability,mean,std,min,max,converged\n");
    for cell in &result.cells {
        let (layer, name, kind) = match &result.targets[cell.target] {
            TargetInfo::Layer {
                index,
                name,
                layer_kind,
                ..
            } => (index.to_string(), name.clone(), layer_kind.clone()),
            TargetInfo::Ops { .. } => (String::new(), cell.label.clone(), "ops".into()),
        };
        let _ = writeln!(
            out,
            "{},{layer},{name},{kind},{},{},{},{},{},{}",
            cell.label, cell.probability, cell.mean, cell.std, cell.min, cell.max, cell.convergence.converged
        );
    }
    out
}

fn records_csv(result: &CampaignResult) -> String {
    let mut out = comment(result);
    out.push_str("target,probability,trial,sample,site,element,bit,original_hex,corrupted_hex\n");
    for r in &result.records {
        let row = r.record.csv_row();
        // Replace the stream trial id with the trial index within its cell.
        let rest = row.split_once(',').map_or("", |(_, rest)| rest);
        let label = result.targets[r.target].label();
        let p = result.header.probabilities[r.probability_index];
        let _ = writeln!(out, "{label},{p},{},{rest}", r.trial);
    }
    out
}

/// Writes `summary.json`, `accuracy.csv`, `cma.csv` and `layers.csv`.
pub fn emit_tables(result: &CampaignResult, out_dir: impl AsRef<Path>) -> Result<(), CampaignError> {
    let dir = out_dir.as_ref();
    check_trials(result)?;
    std::fs::create_dir_all(dir).map_err(|source| CampaignError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut summary = serde_json::to_vec_pretty(result).expect("result serializes");
    summary.push(b'\n');
    write(dir, "summary.json", &summary)?;
    write(dir, "accuracy.csv", per_trial_csv(result, "accuracy", |c| &c.accuracies).as_bytes())?;
    write(dir, "cma.csv", per_trial_csv(result, "cma", |c| &c.cma).as_bytes())?;
    write(dir, "layers.csv", layers_csv(result).as_bytes())
}

/// Writes every report file, `records.csv` included.
pub fn emit_report(result: &CampaignResult, out_dir: impl AsRef<Path>) -> Result<(), CampaignError> {
    emit_tables(result, &out_dir)?;
    write(out_dir.as_ref(), "records.csv", records_csv(result).as_bytes())
}

/// Reads a `summary.json`. The injection records are not part of it.
pub fn load_summary(path: impl AsRef<Path>) -> Result<CampaignResult, CampaignError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| CampaignError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_slice(&bytes).map_err(|e| CampaignError::Summary {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Console table: one row per cell with its statistics and convergence verdict.
pub fn summary_table(result: &CampaignResult) -> String {
    let width = result.cells.iter().map(|c| c.label.len()).max().unwrap_or(6).max(6);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$}  {:>6}  {:>8}  {:>8}  {:>8}  {:>8}  convergence",
        "target", "p", "mean", "std", "min", "max"
    );
    for c in &result.cells {
        let verdict = match (&c.convergence.note, c.convergence.converged) {
            (Some(note), _) => format!("not converged ({note})"),
            (None, true) => "converged".into(),
            (None, false) => "not converged".into(),
        };
        let _ = writeln!(
            out,
            "{:<width$}  {:>6.3}  {:>8.4}  {:>8.4}  {:>8.4}  {:>8.4}  {verdict}",
            c.label, c.probability, c.mean, c.std, c.min, c.max
        );
    }
    let _ = write!(
        out,
        "reference accuracy {:.4} ({:?}), window {}, epsilon {}",
        result.reference_accuracy, result.header.metric, result.header.convergence_window, result.header.convergence_epsilon
    );
    out
}
