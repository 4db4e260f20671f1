//! Report files.
//!
//! Run CSV: `seed,round,virtual_ms,wall_ms,accuracy,cum_bytes`. Times are whole
//! milliseconds, accuracy has four decimals, `cum_bytes` is the largest
//! per-worker cumulative total, and `wall_ms` is empty when host time was not
//! recorded.
//!
//! Summary CSV: `E,B,K,scheme,mean_round,min_round,max_round,mean_ms,min_ms,max_ms,converged_runs`,
//! with empty cells when no run converged.
//!
//! JSON files hold `{"kind": ..., "rows": [...]}` with the same field names.

use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fedavg::{ConvergenceLog, FedConfig};
use crate::metrics::{LatencySample, Phase, Summary};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub seed: u64,
    pub round: u32,
    pub virtual_ms: u64,
    pub wall_ms: Option<u64>,
    pub accuracy: f64,
    pub cum_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    #[serde(rename = "E")]
    pub e: usize,
    #[serde(rename = "B")]
    pub b: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub scheme: String,
    pub mean_round: Option<u32>,
    pub min_round: Option<u32>,
    pub max_round: Option<u32>,
    pub mean_ms: Option<u64>,
    pub min_ms: Option<u64>,
    pub max_ms: Option<u64>,
    pub converged_runs: usize,
}

/// One phase of one worker (or the server) in one round, virtual time only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRow {
    pub seed: u64,
    pub round: u32,
    pub worker: Option<u32>,
    pub phase: Phase,
    pub virtual_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "rows", rename_all = "lowercase")]
pub enum Report {
    Runs(Vec<RunRow>),
    Summary(Vec<SummaryRow>),
    Phases(Vec<PhaseRow>),
}

fn ms(v: f64) -> u64 {
    v.round().max(0.0) as u64
}

/// Flattens logs into run rows; `with_wall` keeps host wall-clock times.
pub fn run_rows(logs: &[ConvergenceLog], with_wall: bool) -> Vec<RunRow> {
    logs.iter()
        .flat_map(|log| {
            log.records.iter().map(move |r| RunRow {
                seed: log.seed,
                round: r.round,
                virtual_ms: ms(r.virtual_ms),
                wall_ms: with_wall.then(|| ms(r.wall_ms)),
                accuracy: r.accuracy,
                cum_bytes: r.cum_bytes.iter().copied().max().unwrap_or(0),
            })
        })
        .collect()
}

pub fn summary_row(cfg: &FedConfig, s: &Summary) -> SummaryRow {
    SummaryRow {
        e: cfg.e,
        b: cfg.b,
        k: cfg.k,
        scheme: cfg.partition.name().to_string(),
        mean_round: s.mean_round,
        min_round: s.min_round,
        max_round: s.max_round,
        mean_ms: s.mean_ms.map(ms),
        min_ms: s.min_ms.map(ms),
        max_ms: s.max_ms.map(ms),
        converged_runs: s.converged_runs,
    }
}

/// Worker phases only; server evaluation is host time and would break
/// reproducibility.
pub fn phase_rows(logs: &[ConvergenceLog]) -> Vec<PhaseRow> {
    logs.iter()
        .flat_map(|log| {
            log.records.iter().flat_map(move |r| {
                r.phases
                    .iter()
                    .filter(|p| p.worker.is_some())
                    .map(move |p| PhaseRow {
                        seed: log.seed,
                        round: r.round,
                        worker: p.worker,
                        phase: p.phase,
                        virtual_ms: p.virtual_ms,
                    })
            })
        })
        .collect()
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn csv_bytes(header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let wrap = |e: csv::Error| Error::io("<csv buffer>", io::Error::other(e));
    w.write_record(header).map_err(wrap)?;
    for row in rows {
        w.write_record(&row).map_err(wrap)?;
    }
    w.into_inner()
        .map_err(|e| Error::io("<csv buffer>", io::Error::other(e.to_string())))
}

fn render_csv(report: &Report) -> Result<Vec<u8>> {
    match report {
        Report::Runs(rows) => csv_bytes(
            &[
                "seed",
                "round",
                "virtual_ms",
                "wall_ms",
                "accuracy",
                "cum_bytes",
            ],
            rows.iter().map(|r| {
                vec![
                    r.seed.to_string(),
                    r.round.to_string(),
                    r.virtual_ms.to_string(),
                    opt(r.wall_ms),
                    format!("{:.4}", r.accuracy),
                    r.cum_bytes.to_string(),
                ]
            }),
        ),
        Report::Summary(rows) => csv_bytes(
            &[
                "E",
                "B",
                "K",
                "scheme",
                "mean_round",
                "min_round",
                "max_round",
                "mean_ms",
                "min_ms",
                "max_ms",
                "converged_runs",
            ],
            rows.iter().map(|r| {
                vec![
                    r.e.to_string(),
                    r.b.to_string(),
                    r.k.to_string(),
                    r.scheme.clone(),
                    opt(r.mean_round),
                    opt(r.min_round),
                    opt(r.max_round),
                    opt(r.mean_ms),
                    opt(r.min_ms),
                    opt(r.max_ms),
                    r.converged_runs.to_string(),
                ]
            }),
        ),
        Report::Phases(rows) => csv_bytes(
            &["seed", "round", "worker", "phase", "virtual_ms"],
            rows.iter().map(|r| {
                vec![
                    r.seed.to_string(),
                    r.round.to_string(),
                    opt(r.worker),
                    r.phase.as_str().to_string(),
                    format!("{:.3}", r.virtual_ms),
                ]
            }),
        ),
    }
}

pub fn write_report(report: &Report, path: impl AsRef<Path>, format: Format) -> Result<()> {
    let path = path.as_ref();
    let bytes = match format {
        Format::Csv => render_csv(report)?,
        Format::Json => {
            let mut b = serde_json::to_vec_pretty(report)
                .map_err(|e| Error::io(path, io::Error::other(e)))?;
            b.push(b'\n');
            b
        }
    };
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_report_json(path: impl AsRef<Path>) -> Result<Report> {
    let path = path.as_ref();
    let text = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&text)
        .map_err(|e| Error::io(path, io::Error::new(io::ErrorKind::InvalidData, e)))
}

pub fn write_phase_csv(logs: &[ConvergenceLog], path: impl AsRef<Path>) -> Result<()> {
    write_report(&Report::Phases(phase_rows(logs)), path, Format::Csv)
}

/// `model,direction,batch,runs,mean_ms,min_ms,max_ms,std_ms` with
/// microsecond resolution.
pub fn write_latency_csv(samples: &[LatencySample], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = csv_bytes(
        &[
            "model",
            "direction",
            "batch",
            "runs",
            "mean_ms",
            "min_ms",
            "max_ms",
            "std_ms",
        ],
        samples.iter().map(|s| {
            let st = s.stats();
            vec![
                s.model.as_str().to_string(),
                s.direction.as_str().to_string(),
                s.batch.to_string(),
                s.runs.len().to_string(),
                format!("{:.3}", st.mean),
                format!("{:.3}", st.min),
                format!("{:.3}", st.max),
                format!("{:.3}", st.std),
            ]
        }),
    )?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
