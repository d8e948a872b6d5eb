//! Cross-run summary of evaluation reports.

use std::path::{Path, PathBuf};

use ablate_core::eval::{EvalReport, EvalRole};
use anyhow::Context as _;

use crate::error::{usage, Result};

pub const SUMMARY_HEADER: &str = "report,target,target_accuracy,pretrained_target_accuracy,anchor_accuracy,\
min_surrounding_accuracy,max_surrounding_mmd2_over_null95,surrounding_within_band,memorization_rate";

/// One row per report; empty cells where a metric does not apply.
pub fn summary_csv(reports: &[(String, EvalReport)]) -> String {
    let mut s = format!("{SUMMARY_HEADER}\n");
    for (name, r) in reports {
        let first = |role| r.by_role(role).next();
        let acc = |role| first(role).map_or(String::new(), |c| format!("{:?}", c.accuracy));
        let pre = first(EvalRole::Target).map_or(String::new(), |c| format!("{:?}", c.pretrained_accuracy));
        let sur: Vec<_> = r.by_role(EvalRole::Surrounding).collect();
        let min_acc = sur.iter().map(|c| c.accuracy).reduce(f64::min);
        let ratio = sur.iter().map(|c| c.mmd2 / c.mmd2_null95).reduce(f64::max);
        let band = sur.iter().all(|c| c.mmd_within_band());
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:?}"));
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            name,
            r.task.target(),
            acc(EvalRole::Target),
            pre,
            acc(EvalRole::Anchor),
            opt(min_acc),
            opt(ratio),
            if sur.is_empty() { String::new() } else { band.to_string() },
            opt(r.memorization.as_ref().map(|m| m.rate)),
        ));
    }
    s
}

/// Files named `*report.json` under `dir`, sorted by path.
fn find_reports(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            find_reports(&p, out)?;
        } else if p.file_name().is_some_and(|n| n.to_string_lossy().ends_with("report.json")) {
            out.push(p);
        }
    }
    Ok(())
}

/// Reports named by `inputs`: files as given, directories searched recursively.
pub fn collect(inputs: &[PathBuf]) -> Result<Vec<(String, EvalReport)>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            find_reports(p, &mut files)?;
        } else if p.is_file() {
            files.push(p.clone());
        } else {
            return Err(usage(format!("{} does not exist", p.display())));
        }
    }
    if files.is_empty() {
        return Err(usage("no reports found"));
    }
    files
        .into_iter()
        .map(|f| {
            let text = std::fs::read_to_string(&f).with_context(|| format!("reading {}", f.display()))?;
            let r = EvalReport::from_json(&text).map_err(|e| usage(format!("report {}: {e}", f.display())))?;
            Ok((f.display().to_string(), r))
        })
        .collect()
}
