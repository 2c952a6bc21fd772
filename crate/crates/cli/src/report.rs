//! Markdown rendering of an evaluation summary.

use std::fmt::Write;

use marrowcast_core::eval::{all_regions, EvalResult, FoldStatus, Metric};
use marrowcast_core::{Error, Result};

pub const REPORT_NAME: &str = "report.md";

fn metric(m: Metric) -> String {
    match m.value() {
        Some(v) => format!("{v:.4}"),
        None => "undefined".into(),
    }
}

pub fn render_markdown(result: &EvalResult) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# Leave-one-out evaluation\n");
    let ok = result.folds.len() - result.failed_folds;
    let _ = writeln!(s, "{} folds, {ok} completed, {} failed.\n", result.folds.len(), result.failed_folds);
    let _ = writeln!(s, "| region | mean AUC | constant-risk AUC | defined | undefined |");
    let _ = writeln!(s, "|---|---|---|---|---|");
    for region in all_regions() {
        let (Some(m), Some(b)) = (result.mean_auc.get(region), result.mean_baseline_auc.get(region)) else {
            continue;
        };
        let _ = writeln!(
            s,
            "| {region} | {} | {} | {} | {} |",
            metric(m.mean),
            metric(b.mean),
            m.defined,
            m.undefined
        );
    }
    let _ = writeln!(s, "\n## Folds\n");
    let mut header = String::from("| fold | test patient | status |");
    let mut rule = String::from("|---|---|---|");
    for region in all_regions() {
        let _ = write!(header, " {region} |");
        rule.push_str("---|");
    }
    let _ = writeln!(s, "{header}\n{rule}");
    for f in &result.folds {
        let status = match f.status {
            FoldStatus::Ok => "ok".to_string(),
            FoldStatus::Failed => format!("failed ({})", f.failure.as_ref().map_or("unknown", |x| x.kind.as_str())),
        };
        let _ = write!(s, "| {} | {} | {status} |", f.fold.index, f.fold.test_patient);
        for region in all_regions() {
            let cell = f
                .eval
                .as_ref()
                .and_then(|e| e.regions.get(region))
                .map_or_else(|| "n/a".to_string(), |r| metric(r.auc));
            let _ = write!(s, " {cell} |");
        }
        let _ = writeln!(s);
    }
    let _ = writeln!(s, "\n## Plots\n");
    for region in all_regions() {
        let _ = writeln!(s, "- {region}: `roc_{region}.svg` (`roc_{region}.csv`)");
    }
    let _ = writeln!(s, "\n## Notes\n");
    for note in &result.notes {
        let _ = writeln!(s, "- {note}");
    }
    s
}

/// Inverse of [`marrowcast_core::eval::roc_csv`]; `None` for a header-only file.
pub fn parse_roc_csv(text: &str) -> Result<Option<Vec<(f64, f64)>>> {
    let mut lines = text.lines();
    if lines.next() != Some("fpr,tpr") {
        return Err(Error::Format("ROC CSV must start with `fpr,tpr`".into()));
    }
    let points = lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let bad = || Error::Format(format!("bad ROC row `{l}`"));
            let (a, b) = l.split_once(',').ok_or_else(bad)?;
            Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((!points.is_empty()).then_some(points))
}
