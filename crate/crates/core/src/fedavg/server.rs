use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fedavg::{aggregate, FedConfig, GlobalModelMsg};
use crate::metrics::{self, Phase, PhaseRecord, Summary};
use crate::models::{evaluate, Model, ModelKind, ModelSpec};
use crate::nn::ParameterSet;
use crate::transport::Transport;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    /// Virtual time at the end of the round's barrier, since run start.
    /// Server evaluation takes no virtual time.
    pub virtual_ms: f64,
    /// Host time since run start, evaluation included.
    pub wall_ms: f64,
    pub accuracy: f64,
    /// Per-worker bytes since run start.
    pub cum_bytes: Vec<u64>,
    pub round_bytes: Vec<u64>,
    pub phases: Vec<PhaseRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FirstHit {
    pub round: u32,
    pub virtual_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceLog {
    pub seed: u64,
    pub target: f64,
    pub records: Vec<RoundRecord>,
    pub first_hit: Option<FirstHit>,
    pub converged: bool,
}

impl ConvergenceLog {
    pub fn new(seed: u64, target: f64) -> Self {
        ConvergenceLog {
            seed,
            target,
            records: Vec::new(),
            first_hit: None,
            converged: false,
        }
    }

    pub fn accuracies(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.accuracy).collect()
    }
}

/// A run that stopped on an error, with whatever was logged before it.
#[derive(Debug, thiserror::Error)]
#[error("{error}")]
pub struct RunFailure {
    pub logs: Vec<ConvergenceLog>,
    #[source]
    pub error: Error,
}

/// Starting weights for a run: a freshly built model of `kind`.
pub fn init_global(kind: ModelKind, seed: u64) -> ParameterSet {
    let model: Model = Model::build(ModelSpec::standard(kind), seed);
    model.params().values()
}

pub(crate) fn check_dataset(spec: &ModelSpec, ds: &Dataset, what: &str) -> Result<()> {
    let want = spec.input_shape();
    let got = &ds.images().shape()[1..];
    if got != want.as_slice() {
        return Err(Error::validation(format!(
            "{what} samples have shape {got:?} but the {} model expects {want:?}",
            spec.kind()
        )));
    }
    Ok(())
}

/// Holds the global model and the test set; drives rounds over a transport.
pub struct Server {
    model: Model,
    test: Arc<Dataset>,
    round: u32,
    virtual_ms: f64,
    wall_ms: f64,
    cum_bytes: Vec<u64>,
}

impl Server {
    pub fn new(kind: ModelKind, seed: u64, test: Arc<Dataset>) -> Result<Self> {
        let spec = ModelSpec::standard(kind);
        check_dataset(&spec, &test, "test")?;
        Ok(Server {
            model: Model::build(spec, seed),
            test,
            round: 0,
            virtual_ms: 0.0,
            wall_ms: 0.0,
            cum_bytes: Vec::new(),
        })
    }

    pub fn global(&self) -> ParameterSet {
        self.model.params().values()
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    /// Broadcast, barrier on all updates, aggregate, evaluate. On error the
    /// global model and round counter are left untouched.
    pub fn run_round(&mut self, transport: &mut dyn Transport) -> Result<RoundRecord> {
        let started = Instant::now();
        let round = self.round + 1;
        let global = self.global();
        let ex = transport.exchange(&GlobalModelMsg {
            round,
            weights: global.clone(),
        })?;
        let k = transport.workers();
        if ex.updates.len() != k {
            return Err(Error::protocol(
                None,
                format!("{} updates for {k} workers", ex.updates.len()),
            ));
        }
        for (w, u) in ex.updates.iter().enumerate() {
            if u.round != round {
                return Err(Error::protocol(
                    Some(w as u32),
                    format!("update for round {} during round {round}", u.round),
                ));
            }
            global.check_layout(&u.weights).map_err(|e| {
                Error::protocol(Some(w as u32), format!("incompatible weights: {e}"))
            })?;
        }
        let next = aggregate(&ex.updates)?;
        self.model.load_weights(&next)?;

        let eval_started = Instant::now();
        let accuracy = evaluate(&self.model, &self.test)?;
        let eval_ms = eval_started.elapsed().as_secs_f64() * 1e3;

        self.round = round;
        self.virtual_ms += ex.span_ms;
        self.wall_ms += started.elapsed().as_secs_f64() * 1e3;
        self.cum_bytes.resize(ex.round_bytes.len(), 0);
        for (c, r) in self.cum_bytes.iter_mut().zip(&ex.round_bytes) {
            *c += r;
        }
        let mut phases = ex.phases;
        phases.push(PhaseRecord {
            worker: None,
            round,
            phase: Phase::Eval,
            virtual_ms: 0.0,
            host_ms: Some(eval_ms),
        });
        Ok(RoundRecord {
            round,
            virtual_ms: self.virtual_ms,
            wall_ms: self.wall_ms,
            accuracy,
            cum_bytes: self.cum_bytes.clone(),
            round_bytes: ex.round_bytes,
            phases,
        })
    }
}

/// Runs repeat `run` (seeded by `cfg.seeds[run]`) until the target is first
/// reached (when `stop_at_target`) or `max_rounds` have elapsed.
pub fn run_until(
    cfg: &FedConfig,
    run: usize,
    test: &Arc<Dataset>,
    transport: &mut dyn Transport,
) -> Result<ConvergenceLog, RunFailure> {
    let seed = cfg.seeds.get(run).copied().unwrap_or_default();
    let mut log = ConvergenceLog::new(seed, cfg.target_accuracy);
    let mut attempt = || -> Result<()> {
        cfg.validate()?;
        if run >= cfg.seeds.len() {
            return Err(Error::validation(format!(
                "run {run} but only {} seeds",
                cfg.seeds.len()
            )));
        }
        if transport.workers() != cfg.k {
            return Err(Error::validation(format!(
                "transport has {} workers, config expects {}",
                transport.workers(),
                cfg.k
            )));
        }
        let mut server = Server::new(cfg.model, seed, Arc::clone(test))?;
        transport.begin_run(run as u32, seed)?;
        for _ in 0..cfg.max_rounds {
            let record = server.run_round(transport)?;
            if log.first_hit.is_none() && record.accuracy >= cfg.target_accuracy {
                log.first_hit = Some(FirstHit {
                    round: record.round,
                    virtual_ms: record.virtual_ms,
                });
            }
            log.records.push(record);
            if log.first_hit.is_some() && cfg.stop_at_target {
                break;
            }
        }
        Ok(())
    };
    let outcome = attempt();
    log.converged = log.first_hit.is_some();
    match outcome {
        Ok(()) => Ok(log),
        Err(error) => Err(RunFailure {
            logs: vec![log],
            error,
        }),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepeatOutcome {
    pub logs: Vec<ConvergenceLog>,
    pub summary: Summary,
}

impl RepeatOutcome {
    pub fn unconverged(&self) -> usize {
        self.summary.runs - self.summary.converged_runs
    }
}

/// One independent run per configured seed, then a first-hit summary.
pub fn run_repeats(
    cfg: &FedConfig,
    test: &Arc<Dataset>,
    transport: &mut dyn Transport,
) -> Result<RepeatOutcome, RunFailure> {
    let mut logs = Vec::with_capacity(cfg.seeds.len());
    for run in 0..cfg.seeds.len().max(1) {
        match run_until(cfg, run, test, transport) {
            Ok(log) => logs.push(log),
            Err(mut failure) => {
                logs.append(&mut failure.logs);
                return Err(RunFailure {
                    logs,
                    error: failure.error,
                });
            }
        }
    }
    let summary = metrics::summarize(&logs, cfg.target_accuracy).map_err(|error| RunFailure {
        logs: logs.clone(),
        error,
    })?;
    Ok(RepeatOutcome { logs, summary })
}
