use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::synthetic_batch;
use crate::error::{Error, Result};
use crate::models::{Model, ModelKind, ModelSpec};

pub const DEFAULT_RUNS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Forward => "forward",
            Direction::Backward => "backward",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyStats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    /// Population standard deviation.
    pub std: f64,
}

/// Host milliseconds of every timed run in one (model, direction, batch) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencySample {
    pub model: ModelKind,
    pub direction: Direction,
    pub batch: usize,
    pub runs: Vec<f64>,
}

impl LatencySample {
    pub fn stats(&self) -> LatencyStats {
        let n = self.runs.len().max(1) as f64;
        let mean = self.runs.iter().sum::<f64>() / n;
        let var = self.runs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        LatencyStats {
            mean,
            min: self.runs.iter().copied().fold(f64::INFINITY, f64::min),
            max: self.runs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            std: var.sqrt(),
        }
    }
}

fn elapsed_ms(started: Instant) -> f64 {
    started.elapsed().as_secs_f64() * 1e3
}

/// Times `runs` forward passes and `runs` forward+backward passes per batch
/// size on synthetic input, alternating between the two. Backward runs are
/// each forward+backward time minus the mean forward time, floored at zero.
/// One untimed warm-up of each precedes the series.
pub fn bench_latency(
    kind: ModelKind,
    batch_sizes: &[usize],
    runs: usize,
    seed: u64,
) -> Result<Vec<LatencySample>> {
    if runs == 0 {
        return Err(Error::validation("runs must be at least 1"));
    }
    if let Some(&b) = batch_sizes.iter().find(|&&b| b == 0) {
        return Err(Error::validation(format!(
            "batch size {b} must be at least 1"
        )));
    }
    let mut out = Vec::with_capacity(2 * batch_sizes.len());
    for &b in batch_sizes {
        let mut model: Model = Model::build(ModelSpec::standard(kind), seed);
        let x = synthetic_batch(kind, b, seed)?;
        let labels = vec![0usize; b];

        model.forward(&x)?;
        model.loss_and_grad(&x, &labels)?;
        model.params_mut().zero_grad();
        // Alternate the two measurements so drift in machine load hits both.
        let mut forward = Vec::with_capacity(runs);
        let mut both = Vec::with_capacity(runs);
        for _ in 0..runs {
            let started = Instant::now();
            let y = model.forward(&x)?;
            forward.push(elapsed_ms(started));
            drop(y);

            let started = Instant::now();
            model.loss_and_grad(&x, &labels)?;
            both.push(elapsed_ms(started));
            model.params_mut().zero_grad();
        }

        let fwd = LatencySample {
            model: kind,
            direction: Direction::Forward,
            batch: b,
            runs: forward,
        };
        let mean_fwd = fwd.stats().mean;
        out.push(fwd);
        out.push(LatencySample {
            model: kind,
            direction: Direction::Backward,
            batch: b,
            runs: both.iter().map(|t| (t - mean_fwd).max(0.0)).collect(),
        });
    }
    Ok(out)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        // Ties share the average of their 1-based ranks.
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties. `None` when either
/// side is constant or the lengths differ or are below 2.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx).powi(2);
        vy += (b - my).powi(2);
    }
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx * vy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_cases() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(spearman(&x, &[10.0, 20.0, 30.0, 40.0]), Some(1.0));
        assert_eq!(spearman(&x, &[4.0, 3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&x, &[1.0, 1.0, 1.0, 1.0]), None);
        let tied = spearman(&x, &[1.0, 2.0, 2.0, 3.0]).unwrap();
        assert!(tied > 0.9 && tied < 1.0);
    }

    #[test]
    fn stats_of_known_runs() {
        let s = LatencySample {
            model: ModelKind::Cnn,
            direction: Direction::Forward,
            batch: 1,
            runs: vec![1.0, 3.0],
        };
        let st = s.stats();
        assert_eq!((st.mean, st.min, st.max, st.std), (2.0, 1.0, 3.0, 1.0));
    }

    #[test]
    fn single_cell_table() {
        let table = bench_latency(ModelKind::Cnn, &[1], DEFAULT_RUNS, 0).unwrap();
        assert_eq!(table.len(), 2);
        assert_eq!(table[0].runs.len(), DEFAULT_RUNS);
        assert!(table[0].runs.iter().all(|&t| t > 0.0));
        assert!(bench_latency(ModelKind::Cnn, &[0], 1, 0).is_err());
    }
}
