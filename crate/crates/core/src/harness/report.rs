//! CSV reports: per-case metrics, per-slot log and the scheme summary.

use std::fs::{self, File};
use std::io::Write;
use std::path::Path;

use super::{CaseResult, HarnessError, Prepared, Scenario};
use crate::scheduler::Scheme;

pub const SLOT_LOG_COLUMNS: [&str; 14] = [
    "case",
    "scheme",
    "slot",
    "slice",
    "demand",
    "accepted",
    "in_A",
    "in_B",
    "in_AR",
    "residual_grant",
    "deficit",
    "tested",
    "rejected",
    "anomalous",
];

/// Slack for comparing acceptance ratios against SLA targets.
const SLA_SLACK: f64 = 1e-12;

fn fmt(x: f64) -> String {
    format!("{x:.6}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt).unwrap_or_else(|| "-".into())
}

fn flag(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

pub fn write_report<W: Write>(w: W, results: &[CaseResult], slices: usize) -> Result<(), HarnessError> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["case".to_string(), "scheme".into(), "prbs".into()];
    for prefix in ["a", "rc", "rw"] {
        header.extend((0..slices).map(|i| format!("{prefix}_{i}")));
    }
    out.write_record(&header)?;
    for r in results {
        for run in &r.runs {
            let mut row = vec![r.case.label.clone(), run.scheme.to_string(), run.prbs.to_string()];
            row.extend(run.metrics.a.iter().map(|&a| fmt(a)));
            row.extend(run.metrics.rc.iter().map(|&x| fmt_opt(x)));
            row.extend(run.metrics.rw.iter().map(|&x| fmt_opt(x)));
            out.write_record(&row)?;
        }
    }
    out.flush().map_err(|e| HarnessError::Csv(e.into()))?;
    Ok(())
}

pub fn write_slots<W: Write>(w: W, results: &[CaseResult]) -> Result<(), HarnessError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(SLOT_LOG_COLUMNS)?;
    for r in results {
        for run in &r.runs {
            let scheme = run.scheme.to_string();
            for l in &run.logs {
                out.write_record([
                    r.case.label.as_str(),
                    scheme.as_str(),
                    &l.slot.to_string(),
                    &l.slice.to_string(),
                    &l.demand.to_string(),
                    flag(l.accepted),
                    flag(l.in_a),
                    flag(l.in_b),
                    flag(l.in_a_r),
                    &l.residual_grant.to_string(),
                    &fmt(l.deficit),
                    flag(l.tested),
                    flag(l.rejected),
                    flag(l.anomalous),
                ])?;
            }
        }
    }
    out.flush().map_err(|e| HarnessError::Csv(e.into()))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub scheme: Scheme,
    /// PRB reduction against no sharing, percent.
    pub prb_savings_pct: f64,
    /// Share of anomalous cases in which every other slice met its SLA,
    /// percent; `None` without anomalous cases.
    pub isolation_pct: Option<f64>,
    pub micros_per_slot: f64,
}

pub fn summarize(results: &[CaseResult], prep: &Prepared) -> Vec<SummaryRow> {
    let plan = &prep.outcome.plan;
    let nosh = f64::from(Scheme::NoSh.capacity(plan));
    let Some(first) = results.first() else {
        return Vec::new();
    };
    first
        .runs
        .iter()
        .enumerate()
        .map(|(k, run)| {
            let mut anomalous = 0usize;
            let mut isolated = 0usize;
            let mut micros = 0.0;
            for r in results {
                let a = &r.runs[k].metrics.a;
                micros += r.runs[k].micros_per_slot;
                if let Some(bad) = r.anomalous_slice {
                    anomalous += 1;
                    let ok = (0..a.len())
                        .filter(|&i| i != bad)
                        .all(|i| a[i] + SLA_SLACK >= plan.p_h[i]);
                    isolated += usize::from(ok);
                }
            }
            SummaryRow {
                scheme: run.scheme,
                prb_savings_pct: if nosh > 0.0 {
                    100.0 * (nosh - f64::from(run.prbs)) / nosh
                } else {
                    0.0
                },
                isolation_pct: (anomalous > 0).then(|| 100.0 * isolated as f64 / anomalous as f64),
                micros_per_slot: micros / results.len() as f64,
            }
        })
        .collect()
}

pub fn write_summary<W: Write>(w: W, rows: &[SummaryRow], timing: bool) -> Result<(), HarnessError> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["scheme", "prb_savings_pct", "isolation_pct"];
    if timing {
        header.push("micros_per_slot");
    }
    out.write_record(&header)?;
    for r in rows {
        let mut row = vec![r.scheme.to_string(), fmt(r.prb_savings_pct), fmt_opt(r.isolation_pct)];
        if timing {
            row.push(format!("{:.3}", r.micros_per_slot));
        }
        out.write_record(&row)?;
    }
    out.flush().map_err(|e| HarnessError::Csv(e.into()))?;
    Ok(())
}

fn create(dir: &Path, name: &str) -> Result<File, HarnessError> {
    let path = dir.join(name);
    File::create(&path).map_err(|e| HarnessError::io(&path, e))
}

/// Writes `report.csv`, `slots.csv`, `summary.csv` and `plan.json` into
/// `dir`, replacing earlier files.
pub fn write_outputs(
    dir: &Path,
    scenario: &Scenario,
    prep: &Prepared,
    results: &[CaseResult],
) -> Result<Vec<SummaryRow>, HarnessError> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let slices = prep.regular.len();
    write_report(create(dir, "report.csv")?, results, slices)?;
    write_slots(std::io::BufWriter::new(create(dir, "slots.csv")?), results)?;
    let rows = summarize(results, prep);
    write_summary(create(dir, "summary.csv")?, &rows, scenario.report_timing)?;
    let plan = serde_json::to_string_pretty(&prep.outcome.plan).expect("plan serializes");
    let path = dir.join("plan.json");
    fs::write(&path, plan + "\n").map_err(|e| HarnessError::io(&path, e))?;
    Ok(rows)
}
