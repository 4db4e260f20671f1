//! Synchronous federated averaging: run configuration, round messages,
//! worker-side local training, weighted aggregation and the server loop.

mod server;
mod worker;

use serde::{Deserialize, Serialize};

use crate::data::PartitionScheme;
use crate::error::{Error, Result};
use crate::models::ModelKind;
use crate::nn::ParameterSet;

pub(crate) use server::check_dataset;
pub use server::{
    init_global, run_repeats, run_until, ConvergenceLog, FirstHit, RepeatOutcome, RoundRecord,
    RunFailure, Server,
};
pub use worker::{local_update, spawn_workers, worker_for, LocalModel, Worker};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedConfig {
    #[serde(default = "default_model")]
    pub model: ModelKind,
    pub k: usize,
    pub e: usize,
    pub b: usize,
    pub lr: f32,
    pub target_accuracy: f64,
    pub max_rounds: u32,
    pub seeds: Vec<u64>,
    #[serde(default = "default_partition")]
    pub partition: PartitionScheme,
    /// Stop a run at the first round that reaches the target.
    #[serde(default = "default_stop")]
    pub stop_at_target: bool,
}

fn default_model() -> ModelKind {
    ModelKind::Cnn
}

fn default_partition() -> PartitionScheme {
    PartitionScheme::Iid
}

fn default_stop() -> bool {
    true
}

impl Default for FedConfig {
    fn default() -> Self {
        FedConfig {
            model: ModelKind::Cnn,
            k: 5,
            e: 10,
            b: 16,
            lr: 0.05,
            target_accuracy: 0.95,
            max_rounds: 50,
            seeds: vec![1],
            partition: PartitionScheme::Iid,
            stop_at_target: true,
        }
    }
}

impl FedConfig {
    /// Checks every field. A learning rate of exactly zero is allowed here
    /// (workers then return the broadcast weights unchanged), as is a target
    /// of zero.
    pub fn validate(&self) -> Result<()> {
        let positive = [("k", self.k), ("e", self.e), ("b", self.b)];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::validation(format!("{name} must be at least 1")));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::validation(format!(
                "lr must be finite and non-negative, got {}",
                self.lr
            )));
        }
        if !(0.0..=1.0).contains(&self.target_accuracy) {
            return Err(Error::validation(format!(
                "target_accuracy must lie in [0, 1], got {}",
                self.target_accuracy
            )));
        }
        if self.max_rounds == 0 {
            return Err(Error::validation("max_rounds must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(Error::validation("at least one seed is required"));
        }
        if u32::try_from(self.e * self.b).is_err() {
            return Err(Error::validation(
                "e * b does not fit a 32-bit sample count",
            ));
        }
        if u32::try_from(self.k).is_err() {
            return Err(Error::validation("too many workers"));
        }
        if let PartitionScheme::LabelPairs { pairs } = &self.partition {
            if pairs.len() != self.k {
                return Err(Error::validation(format!(
                    "{} label pairs given for k = {}",
                    pairs.len(),
                    self.k
                )));
            }
        }
        Ok(())
    }

    pub fn sample_count(&self) -> u32 {
        (self.e * self.b) as u32
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalModelMsg {
    pub round: u32,
    pub weights: ParameterSet,
}

/// Worker-reported durations in whole milliseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateTiming {
    pub compute_ms: u32,
    pub recv_ms: u32,
    /// Duration of the worker's previous upload (0 in round 1).
    pub send_ms: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdateMsg {
    pub round: u32,
    pub weights: ParameterSet,
    pub sample_count: u32,
    pub timing: UpdateTiming,
}

/// Sample-weighted elementwise mean. `updates[i]` is taken to come from
/// worker `i`, and summation runs in that order in double precision.
pub fn aggregate(updates: &[LocalUpdateMsg]) -> Result<ParameterSet> {
    let Some(first) = updates.first() else {
        return Err(Error::validation("cannot aggregate zero updates"));
    };
    for (i, u) in updates.iter().enumerate().skip(1) {
        if u.round != first.round {
            return Err(Error::protocol(
                Some(i as u32),
                format!(
                    "update for round {} mixed with round {}",
                    u.round, first.round
                ),
            ));
        }
        if let Err(e) = first.weights.check_layout(&u.weights) {
            return Err(Error::protocol(
                Some(i as u32),
                format!("incompatible weights: {e}"),
            ));
        }
    }
    let total: f64 = updates.iter().map(|u| f64::from(u.sample_count)).sum();
    if total == 0.0 {
        return Err(Error::protocol(None, "all updates report zero samples"));
    }
    let mut out = first.weights.values();
    let mut acc = Vec::new();
    for (p, slot) in out.iter_mut().enumerate() {
        acc.clear();
        // -0.0 is the additive identity; +0.0 would turn an all -0.0 input positive.
        acc.resize(slot.numel(), -0.0f64);
        // Integer counts times f32 values are exact in f64, so identical
        // inputs come back bit-identical.
        for u in updates {
            let count = f64::from(u.sample_count);
            for (a, &v) in acc.iter_mut().zip(u.weights[p].value.data()) {
                *a += count * f64::from(v);
            }
        }
        for (v, a) in slot.value.data_mut().iter_mut().zip(&acc) {
            *v = (a / total) as f32;
        }
    }
    Ok(out)
}
