use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde_json::json;

use crate::error::{Error, Result};
use crate::verify::mean_stderr;

use super::config::ExperimentConfig;
use super::run::{GateSnapshot, RunRecord};

pub const OUTPUT_FORMAT_VERSION: u32 = 1;

/// `steps,metric_mean,metric_stderr` rows. Several records are averaged per
/// evaluation point, with the standard error taken across records; a single
/// record uses the spread of its own test episodes.
pub fn curve_csv(records: &[RunRecord]) -> Result<String> {
    let mut out = String::from("steps,metric_mean,metric_stderr\n");
    let first = records.first().ok_or_else(|| Error::BadConfig("no trials to write".into()))?;
    for (k, row) in first.curve.iter().enumerate() {
        let (mean, se) = if records.len() == 1 {
            mean_stderr(&row.episode_lengths)
        } else {
            let means: Vec<f64> = records
                .iter()
                .map(|r| {
                    r.curve
                        .get(k)
                        .filter(|x| x.steps == row.steps)
                        .map(|x| x.mean())
                        .ok_or_else(|| Error::BadConfig("trials disagree on evaluation points".into()))
                })
                .collect::<Result<_>>()?;
            mean_stderr(&means)
        };
        writeln!(out, "{},{},{}", row.steps, mean, se).expect("write to string");
    }
    Ok(out)
}

/// `checkpoint,state_repr,a_1..a_n` rows, averaging gates across records.
/// `None` when no snapshots were taken.
pub fn gate_csv(records: &[RunRecord]) -> Option<String> {
    let first: &Vec<GateSnapshot> = &records.first()?.snapshots;
    let n = first.first()?.rows.first()?.1.len();
    let mut out = String::from("checkpoint,state_repr");
    for i in 1..=n {
        write!(out, ",a_{i}").expect("write to string");
    }
    out.push('\n');
    for (k, snap) in first.iter().enumerate() {
        for (j, (label, _)) in snap.rows.iter().enumerate() {
            write!(out, "{},{}", snap.checkpoint, label).expect("write to string");
            for i in 0..n {
                let mean = records.iter().map(|r| r.snapshots[k].rows[j].1[i]).sum::<f64>()
                    / records.len() as f64;
                write!(out, ",{mean}").expect("write to string");
            }
            out.push('\n');
        }
    }
    Some(out)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes the aggregated `curve.csv`, `gate_snapshots.csv` (when gates were
/// recorded) and `meta.json` to `dir`, plus the same files for every trial under
/// `dir/trial_<k>/`.
pub fn emit_outputs(cfg: &ExperimentConfig, records: &[RunRecord], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(&dir.join("curve.csv"), &curve_csv(records)?)?;
    if let Some(g) = gate_csv(records) {
        write(&dir.join("gate_snapshots.csv"), &g)?;
    }
    let meta = json!({
        "config": cfg,
        "seed": cfg.seed,
        "trial_seeds": records.iter().map(|r| r.seed).collect::<Vec<_>>(),
        "zero_evidence": records.iter().map(|r| r.zero_evidence).collect::<Vec<_>>(),
        "episodes": records.iter().map(|r| r.episodes).collect::<Vec<_>>(),
        "versions": {
            "ctxfer": env!("CARGO_PKG_VERSION"),
            "output_format": OUTPUT_FORMAT_VERSION,
        },
    });
    write(&dir.join("meta.json"), &serde_json::to_string_pretty(&meta)?)?;
    for r in records {
        let sub = dir.join(format!("trial_{}", r.trial_index));
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        let one = std::slice::from_ref(r);
        write(&sub.join("curve.csv"), &curve_csv(one)?)?;
        if let Some(g) = gate_csv(one) {
            write(&sub.join("gate_snapshots.csv"), &g)?;
        }
    }
    Ok(())
}
