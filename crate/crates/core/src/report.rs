//! Post-hoc summaries of run directories: a text digest, a sparsity-vs-loss
//! CSV and a side-by-side comparison of two runs.

use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::harness::Metrics;
use crate::pipeline::{PruneRecord, RunReport, PRUNE_LOG_FILE, REPORT_FILE, TIMELINE_FILE};

pub const SPARSITY_LOSS_FILE: &str = "sparsity_vs_loss.csv";

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub text: String,
    /// Problems found while reading the run directory.
    pub warnings: Vec<String>,
}

#[derive(Serialize)]
struct SparsityLossRow {
    step: usize,
    achieved_sparsity: f64,
    predicted_loss_increase: Option<f64>,
    measured_loss_increase: f64,
    measured_loss_after: f64,
}

fn read_prune_log(dir: &Path) -> Result<Vec<PruneRecord>> {
    let mut rows = Vec::new();
    for rec in csv::Reader::from_path(dir.join(PRUNE_LOG_FILE))?.deserialize() {
        rows.push(rec?);
    }
    Ok(rows)
}

fn metrics(m: Option<Metrics>) -> String {
    m.map_or_else(|| "n/a".into(), |m| format!("loss {:.6}  accuracy {:.4}", m.loss, m.accuracy))
}

/// Summarizes the run in `dir` and writes `sparsity_vs_loss.csv` next to it.
/// Missing or unreadable pieces become warnings; only a missing report is an
/// error.
pub fn summarize(dir: &Path) -> Result<Summary> {
    let report = RunReport::read(dir)?;
    let mut warnings = report.warnings.clone();
    if !report.completed {
        warnings.push(format!("run did not complete: {}", report.error.as_deref().unwrap_or("unknown error")));
    }
    let log = match read_prune_log(dir) {
        Ok(rows) => rows,
        Err(e) => {
            warnings.push(format!("{PRUNE_LOG_FILE} unreadable ({e}); using the log embedded in {REPORT_FILE}"));
            report.prune_log.clone()
        }
    };
    if !dir.join(TIMELINE_FILE).exists() {
        warnings.push(format!("{TIMELINE_FILE} missing"));
    }
    if log.len() != report.timeline_prune_events && report.completed {
        warnings.push(format!("{} prune events logged, timeline scheduled {}", log.len(), report.timeline_prune_events));
    }

    let mut out = csv::Writer::from_writer(BufWriter::new(File::create(dir.join(SPARSITY_LOSS_FILE))?));
    for r in &log {
        out.serialize(SparsityLossRow {
            step: r.step,
            achieved_sparsity: r.achieved_sparsity,
            predicted_loss_increase: r.predicted_loss_increase,
            measured_loss_increase: r.measured_loss_after - r.measured_loss_before,
            measured_loss_after: r.measured_loss_after,
        })?;
    }
    out.flush()?;

    let mut text = String::new();
    let method = report.method.map_or("none".to_string(), |m| format!("{m:?}"));
    writeln!(text, "recipe {}  seed {}  method {method}  group size {}", report.recipe_id, report.seed, report.group_size).ok();
    writeln!(text, "completed        {}", report.completed).ok();
    writeln!(text, "sparsity         {:.6} (target {})", report.final_sparsity, report.target_sparsity).ok();
    writeln!(text, "dense held-out   {}", metrics(report.dense_test)).ok();
    writeln!(text, "final train      {}", metrics(report.final_train)).ok();
    writeln!(text, "final held-out   {}", metrics(report.final_test)).ok();
    if let Some(e) = &report.estimator {
        writeln!(text, "estimator        {} blocks of {}, m = {}, {} bytes", e.n_blocks, e.block_size, e.num_grads, e.bytes).ok();
    }
    for p in &report.phase_seconds {
        writeln!(text, "phase {:<10} {:.2}s", p.phase, p.seconds).ok();
    }
    if !log.is_empty() {
        writeln!(text, "{:>8} {:>10} {:>12} {:>12}", "step", "sparsity", "predicted", "measured").ok();
        for r in &log {
            let predicted = r.predicted_loss_increase.map_or_else(|| "-".into(), |p| format!("{p:.4e}"));
            writeln!(
                text,
                "{:>8} {:>10.6} {:>12} {:>12.4e}",
                r.step,
                r.achieved_sparsity,
                predicted,
                r.measured_loss_after - r.measured_loss_before
            )
            .ok();
        }
    }
    for w in &warnings {
        writeln!(text, "warning: {w}").ok();
    }
    Ok(Summary { text, warnings })
}

/// Side-by-side final metrics of two runs.
pub fn compare(a: &Path, b: &Path) -> Result<String> {
    let (ra, rb) = (RunReport::read(a)?, RunReport::read(b)?);
    let mut text = String::new();
    let row = |text: &mut String, label: &str, x: String, y: String| {
        writeln!(text, "{label:<16} {x:>24} {y:>24}").ok();
    };
    row(&mut text, "", ra.recipe_id.clone(), rb.recipe_id.clone());
    row(&mut text, "seed", ra.seed.to_string(), rb.seed.to_string());
    row(&mut text, "completed", ra.completed.to_string(), rb.completed.to_string());
    row(&mut text, "sparsity", format!("{:.6}", ra.final_sparsity), format!("{:.6}", rb.final_sparsity));
    let loss = |r: &RunReport| r.final_test.map_or("n/a".into(), |m| format!("{:.6}", m.loss));
    let acc = |r: &RunReport| r.final_test.map_or("n/a".into(), |m| format!("{:.4}", m.accuracy));
    row(&mut text, "held-out loss", loss(&ra), loss(&rb));
    row(&mut text, "held-out acc", acc(&ra), acc(&rb));
    if let (Some(x), Some(y)) = (ra.final_test, rb.final_test) {
        writeln!(text, "lower held-out loss: {}", if x.loss <= y.loss { &ra.recipe_id } else { &rb.recipe_id }).ok();
    }
    Ok(text)
}
