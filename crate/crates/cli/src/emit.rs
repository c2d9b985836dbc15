//! Artifact writers. Every CSV starts with a `# schema:` line so downstream
//! tooling can refuse files it does not understand; the JSON summary carries
//! the same tag in its `schema` field. Floats go through Rust's shortest
//! round-trip formatting, so identical runs produce identical bytes.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use lagsim_core::engine::{CommLedger, Trace, TraceRow};
use serde::Serialize;

pub const TRACE_SCHEMA: &str = "lag-trace v1";
pub const LEDGER_SCHEMA: &str = "lag-ledger v1";
pub const EVENTS_SCHEMA: &str = "lag-events v1";
pub const SUMMARY_SCHEMA: &str = "lag-summary v1";

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// Per-iteration objective error, gradient norm, cumulative uploads, and
/// (when tracked) the Lyapunov value.
pub fn write_trace(path: &Path, trace: &Trace) -> Result<()> {
    let mut file = BufWriter::new(File::create(path)?);
    writeln!(file, "# schema: {TRACE_SCHEMA}")?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["iteration", "objective_error", "grad_sq_norm", "cum_uploads", "lyapunov"])?;
    for row in &trace.rows {
        w.write_record([
            row.iteration.to_string(),
            fmt_f64(row.objective_error),
            fmt_f64(row.grad_sq_norm),
            row.cum_uploads.to_string(),
            row.lyapunov.map(fmt_f64).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Dense per-iteration, per-worker 0/1 flags for uploads, downloads, and
/// gradient evaluations; iteration 0 is the initialization broadcast.
pub fn write_ledger(path: &Path, ledger: &CommLedger, workers: usize) -> Result<()> {
    let mut file = BufWriter::new(File::create(path)?);
    writeln!(file, "# schema: {LEDGER_SCHEMA}")?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["iteration", "worker", "uploaded", "downloaded", "evaluated"])?;
    for entry in ledger.entries() {
        for id in 1..=workers {
            let flag = |ids: &[usize]| if ids.contains(&id) { "1" } else { "0" };
            w.write_record([
                entry.iteration.to_string(),
                id.to_string(),
                flag(&entry.uploads).to_string(),
                flag(&entry.downloads).to_string(),
                flag(&entry.grad_evals).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Sparse upload log: one row per (iteration, worker) upload event.
pub fn write_events(path: &Path, ledger: &CommLedger) -> Result<()> {
    let mut file = BufWriter::new(File::create(path)?);
    writeln!(file, "# schema: {EVENTS_SCHEMA}")?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["iteration", "worker"])?;
    for entry in ledger.entries() {
        for id in &entry.uploads {
            w.write_record([entry.iteration.to_string(), id.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct Summary {
    pub schema: &'static str,
    pub method: &'static str,
    pub converged: bool,
    pub diverged: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub violation: Option<String>,
    /// Update rounds performed (the initialization round is not one).
    pub iterations: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_error: Option<f64>,
    pub headline_uploads: usize,
    pub headline_includes_init: bool,
    pub uploads_total: usize,
    pub uploads_without_init: usize,
    pub downloads_total: usize,
    pub grad_evals_total: usize,
    pub per_worker_uploads: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iterations_to_target: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub uploads_to_target: Option<usize>,
    pub decades: Vec<DecadeRow>,
    pub problem: ProblemReport,
    pub trigger: TriggerReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bounds: Option<BoundsReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_time_ms: Option<u128>,
}

#[derive(Debug, Serialize)]
pub struct DecadeRow {
    pub threshold: f64,
    pub iteration: usize,
    pub uploads: usize,
}

#[derive(Debug, Serialize)]
pub struct ProblemReport {
    pub loss: &'static str,
    pub workers: usize,
    pub dim: usize,
    pub l_global: f64,
    pub per_worker_l: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    pub reference_optimum: f64,
    pub reference_grad_norm: f64,
}

#[derive(Debug, Serialize)]
pub struct TriggerReport {
    pub alpha: f64,
    pub depth: usize,
    pub xi: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<Vec<f64>>,
}

#[derive(Debug, Serialize)]
pub struct BoundsReport {
    pub delta_c: f64,
    pub comm_bound_measured: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iteration_bound: Option<f64>,
}

pub fn write_summary(path: &Path, summary: &Summary) -> Result<()> {
    let mut file = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut file, summary)?;
    writeln!(file)?;
    Ok(())
}

/// Reads a trace back, refusing files with a missing or newer schema tag.
pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let mut reader = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    let mut first = String::new();
    reader.read_line(&mut first)?;
    let tag = first.trim_start_matches('#').trim();
    let Some(version) = tag.strip_prefix("schema:").map(str::trim) else {
        bail!("{} has no schema line", path.display());
    };
    if version != TRACE_SCHEMA {
        bail!("{} is {version:?}, this reader understands {TRACE_SCHEMA:?}", path.display());
    }
    let mut rows = Vec::new();
    let mut csv_reader = csv::Reader::from_reader(reader);
    for record in csv_reader.records() {
        let record = record?;
        let field = |i: usize| record.get(i).unwrap_or_default();
        rows.push(TraceRow {
            iteration: field(0).parse()?,
            objective_error: field(1).parse()?,
            grad_sq_norm: field(2).parse()?,
            cum_uploads: field(3).parse()?,
            lyapunov: if field(4).is_empty() { None } else { Some(field(4).parse()?) },
        });
    }
    Ok(rows)
}
