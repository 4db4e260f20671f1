//! Phase timings, first-hit detection, multi-run summaries, latency
//! benchmarks and report files.

mod bench;
mod report;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fedavg::{ConvergenceLog, FirstHit};

pub use bench::{bench_latency, spearman, Direction, LatencySample, LatencyStats, DEFAULT_RUNS};
pub use report::{
    phase_rows, read_report_json, run_rows, summary_row, write_latency_csv, write_phase_csv,
    write_report, Format, PhaseRow, Report, RunRow, SummaryRow,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Compute,
    Send,
    Receive,
    Idle,
    Eval,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Compute => "compute",
            Phase::Send => "send",
            Phase::Receive => "receive",
            Phase::Idle => "idle",
            Phase::Eval => "eval",
        }
    }
}

/// One phase of one round; `worker` is `None` for server-side phases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub worker: Option<u32>,
    pub round: u32,
    pub phase: Phase,
    pub virtual_ms: f64,
    pub host_ms: Option<f64>,
}

/// Earliest round whose accuracy reaches `target`, sustained or not.
pub fn first_hit(log: &ConvergenceLog, target: f64) -> Option<FirstHit> {
    log.records
        .iter()
        .find(|r| r.accuracy >= target)
        .map(|r| FirstHit {
            round: r.round,
            virtual_ms: r.virtual_ms,
        })
}

/// Mean of `per_worker[phase]` over rounds, per worker.
pub fn mean_phase_ms(log: &ConvergenceLog, phase: Phase, workers: usize) -> Vec<f64> {
    let mut sum = vec![0.0; workers];
    let mut count = vec![0usize; workers];
    for p in log.records.iter().flat_map(|r| &r.phases) {
        if let Some(w) = p.worker.filter(|_| p.phase == phase).map(|w| w as usize) {
            if w < workers {
                sum[w] += p.virtual_ms;
                count[w] += 1;
            }
        }
    }
    sum.iter()
        .zip(&count)
        .map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub target: f64,
    pub runs: usize,
    pub converged_runs: usize,
    /// Mean first-hit round, rounded half up.
    pub mean_round: Option<u32>,
    pub min_round: Option<u32>,
    pub max_round: Option<u32>,
    pub mean_ms: Option<f64>,
    pub min_ms: Option<f64>,
    pub max_ms: Option<f64>,
    /// Per-round mean accuracy across runs, truncated at the shortest log.
    pub accuracy_mean: Vec<f64>,
    /// Population variance matching `accuracy_mean`.
    pub accuracy_variance: Vec<f64>,
}

/// Aggregates first hits over runs. Runs that never reach `target` are
/// counted in `runs` but excluded from every statistic.
pub fn summarize(logs: &[ConvergenceLog], target: f64) -> Result<Summary> {
    if logs.is_empty() {
        return Err(Error::validation("cannot summarize zero runs"));
    }
    let hits: Vec<FirstHit> = logs.iter().filter_map(|l| first_hit(l, target)).collect();
    let rounds: Vec<u32> = hits.iter().map(|h| h.round).collect();
    let times: Vec<f64> = hits.iter().map(|h| h.virtual_ms).collect();
    let mean_round = (!rounds.is_empty()).then(|| {
        let sum: u64 = rounds.iter().map(|&r| u64::from(r)).sum();
        let n = rounds.len() as u64;
        // floor(sum / n + 1/2) in integers.
        ((2 * sum + n) / (2 * n)) as u32
    });
    let shortest = logs.iter().map(|l| l.records.len()).min().unwrap_or(0);
    let mut accuracy_mean = Vec::with_capacity(shortest);
    let mut accuracy_variance = Vec::with_capacity(shortest);
    for i in 0..shortest {
        // Shifted by the first run so identical runs give exactly zero.
        let n = logs.len() as f64;
        let base = logs[0].records[i].accuracy;
        let shift = logs
            .iter()
            .map(|l| l.records[i].accuracy - base)
            .sum::<f64>()
            / n;
        let var = logs
            .iter()
            .map(|l| (l.records[i].accuracy - base - shift).powi(2))
            .sum::<f64>()
            / n;
        accuracy_mean.push(base + shift);
        accuracy_variance.push(var);
    }
    Ok(Summary {
        target,
        runs: logs.len(),
        converged_runs: hits.len(),
        mean_round,
        min_round: rounds.iter().copied().min(),
        max_round: rounds.iter().copied().max(),
        mean_ms: (!times.is_empty()).then(|| times.iter().sum::<f64>() / times.len() as f64),
        min_ms: times.iter().copied().reduce(f64::min),
        max_ms: times.iter().copied().reduce(f64::max),
        accuracy_mean,
        accuracy_variance,
    })
}

/// Median of a list, averaging the middle pair for even lengths.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2.0
    })
}
