use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fedavg::{
    check_dataset, spawn_workers, FedConfig, GlobalModelMsg, LocalUpdateMsg, Worker,
};
use crate::metrics::{Phase, PhaseRecord};
use crate::models::ModelSpec;
use crate::rng;
use crate::transport::{codec, Exchange, TrafficMeter, Transport, WireMessage};

/// Network and compute model of the simulated fleet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkModel {
    pub base_latency_ms: f64,
    pub bandwidth_bytes_per_ms: f64,
    /// Transfer times are scaled by `1 + jitter * u`, `u` uniform in `[-1, 1)`.
    pub jitter: f64,
    /// Modeled compute cost. `None` uses the measured host time instead,
    /// which makes virtual times non-reproducible.
    pub compute_ms_per_sample: Option<f64>,
    /// Per-worker slowdown; workers past the end of the list use 1.0.
    pub compute_multipliers: Vec<f64>,
    pub compute_jitter: f64,
}

impl Default for LinkModel {
    fn default() -> Self {
        LinkModel {
            base_latency_ms: 5.0,
            bandwidth_bytes_per_ms: 3_750.0,
            jitter: 0.05,
            compute_ms_per_sample: Some(20.0),
            compute_multipliers: Vec::new(),
            compute_jitter: 0.05,
        }
    }
}

impl LinkModel {
    /// No latency, near-infinite bandwidth, no jitter.
    pub fn ideal() -> Self {
        LinkModel {
            base_latency_ms: 0.0,
            bandwidth_bytes_per_ms: f64::MAX,
            jitter: 0.0,
            compute_jitter: 0.0,
            ..LinkModel::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth_bytes_per_ms > 0.0) {
            return Err(Error::validation("bandwidth_bytes_per_ms must be positive"));
        }
        if !(self.base_latency_ms >= 0.0 && self.base_latency_ms.is_finite()) {
            return Err(Error::validation(
                "base_latency_ms must be finite and non-negative",
            ));
        }
        for (name, j) in [
            ("jitter", self.jitter),
            ("compute_jitter", self.compute_jitter),
        ] {
            if !(0.0..1.0).contains(&j) {
                return Err(Error::validation(format!(
                    "{name} must lie in [0, 1), got {j}"
                )));
            }
        }
        if let Some(ms) = self.compute_ms_per_sample {
            if !(ms >= 0.0 && ms.is_finite()) {
                return Err(Error::validation(
                    "compute_ms_per_sample must be finite and non-negative",
                ));
            }
        }
        if let Some((w, m)) = self
            .compute_multipliers
            .iter()
            .enumerate()
            .find(|(_, m)| !(**m > 0.0 && m.is_finite()))
        {
            return Err(Error::validation(format!(
                "compute multiplier {m} for worker {w} must be positive"
            )));
        }
        Ok(())
    }

    pub fn multiplier(&self, worker: u32) -> f64 {
        self.compute_multipliers
            .get(worker as usize)
            .copied()
            .unwrap_or(1.0)
    }
}

fn jitter_factor(fraction: f64, rng: &mut impl Rng) -> f64 {
    if fraction == 0.0 {
        1.0
    } else {
        1.0 + fraction * (2.0 * rng.random::<f64>() - 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Delivery {
    pub depart_ms: f64,
    pub arrival_ms: f64,
    pub bytes: usize,
}

/// `arrival = now + (base + bytes / bandwidth) * jitter`.
pub fn sim_send(bytes: usize, link: &LinkModel, now_ms: f64, rng: &mut impl Rng) -> Delivery {
    let transfer = link.base_latency_ms + bytes as f64 / link.bandwidth_bytes_per_ms;
    Delivery {
        depart_ms: now_ms,
        arrival_ms: now_ms + transfer * jitter_factor(link.jitter, rng),
        bytes,
    }
}

/// Scales a base compute time by the worker's multiplier and compute jitter.
pub fn sim_compute_time(
    worker: u32,
    base_ms: f64,
    link: &LinkModel,
    rng: &mut impl Rng,
) -> Result<f64> {
    let m = link.multiplier(worker);
    if !(m > 0.0 && m.is_finite()) {
        return Err(Error::validation(format!(
            "compute multiplier {m} for worker {worker} must be positive"
        )));
    }
    Ok(base_ms * m * jitter_factor(link.compute_jitter, rng))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TraceKind {
    Broadcast,
    GlobalDelivered,
    ComputeDone,
    UpdateDelivered,
    Barrier,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub at_ms: f64,
    pub round: u32,
    pub worker: Option<u32>,
    pub kind: TraceKind,
    pub bytes: usize,
}

struct Pending {
    at: f64,
    seq: u64,
    worker: usize,
    kind: TraceKind,
}

impl PartialEq for Pending {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Pending {}

impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Pending {
    // Reversed: BinaryHeap pops the earliest event, insertion order on ties.
    fn cmp(&self, other: &Self) -> Ordering {
        other.at.total_cmp(&self.at).then(other.seq.cmp(&self.seq))
    }
}

#[derive(Default, Clone)]
struct Slot {
    received_at: f64,
    compute_ms: f64,
    host_ms: f64,
    computed_at: f64,
    arrived_at: f64,
    payload: Vec<u8>,
    update: Option<LocalUpdateMsg>,
}

/// In-process fleet driven by a deterministic event queue and a virtual
/// clock. Messages still go through the codec, so metered bytes are the
/// exact wire sizes.
pub struct SimTransport {
    cfg: FedConfig,
    train: Arc<Dataset>,
    link: LinkModel,
    workers: Vec<Worker>,
    clock_ms: f64,
    meter: TrafficMeter,
    trace: Vec<TraceEvent>,
    rng: ChaCha8Rng,
    last_send_ms: Vec<f64>,
}

impl SimTransport {
    pub fn new(cfg: &FedConfig, train: Arc<Dataset>, link: LinkModel) -> Result<Self> {
        cfg.validate()?;
        link.validate()?;
        check_dataset(&ModelSpec::standard(cfg.model), &train, "training")?;
        Ok(SimTransport {
            cfg: cfg.clone(),
            train,
            link,
            workers: Vec::new(),
            clock_ms: 0.0,
            meter: TrafficMeter::new(cfg.k),
            trace: Vec::new(),
            rng: rng::stream(0, "link", 0),
            last_send_ms: vec![0.0; cfg.k],
        })
    }

    pub fn link(&self) -> &LinkModel {
        &self.link
    }

    pub fn clock_ms(&self) -> f64 {
        self.clock_ms
    }

    pub fn meter(&self) -> &TrafficMeter {
        &self.meter
    }

    /// Every event of the current run, in processing order.
    pub fn trace(&self) -> &[TraceEvent] {
        &self.trace
    }
}

impl Transport for SimTransport {
    fn workers(&self) -> usize {
        self.cfg.k
    }

    fn begin_run(&mut self, _run: u32, seed: u64) -> Result<()> {
        self.workers = spawn_workers(&self.cfg, &self.train, seed)?;
        self.clock_ms = 0.0;
        self.meter = TrafficMeter::new(self.cfg.k);
        self.trace.clear();
        self.rng = rng::stream(seed, "link", 0);
        self.last_send_ms = vec![0.0; self.cfg.k];
        Ok(())
    }

    fn exchange(&mut self, global: &GlobalModelMsg) -> Result<Exchange> {
        if self.workers.is_empty() {
            return Err(Error::State(
                "begin_run must be called before exchange".into(),
            ));
        }
        let k = self.workers.len();
        let round = global.round;
        let start = self.clock_ms;
        let broadcast = codec::encode(&WireMessage::Global(global.clone()))?;
        let mut queue = BinaryHeap::new();
        let mut seq = 0u64;
        let mut push = |queue: &mut BinaryHeap<Pending>, at, worker, kind| {
            queue.push(Pending {
                at,
                seq,
                worker,
                kind,
            });
            seq += 1;
        };
        for w in 0..k {
            let d = sim_send(broadcast.len(), &self.link, start, &mut self.rng);
            self.meter.record_received(w, d.bytes);
            self.trace.push(TraceEvent {
                at_ms: start,
                round,
                worker: Some(w as u32),
                kind: TraceKind::Broadcast,
                bytes: d.bytes,
            });
            push(&mut queue, d.arrival_ms, w, TraceKind::GlobalDelivered);
        }

        let mut slots = vec![Slot::default(); k];
        while let Some(ev) = queue.pop() {
            let (w, at) = (ev.worker, ev.at);
            let slot = &mut slots[w];
            let mut bytes = 0;
            match ev.kind {
                TraceKind::GlobalDelivered => {
                    let WireMessage::Global(msg) = codec::decode(&broadcast)? else {
                        unreachable!("broadcast encodes a global model");
                    };
                    let (mut update, host_ms) = self.workers[w].handle(&msg)?;
                    let base = match self.link.compute_ms_per_sample {
                        Some(per) => per * f64::from(update.sample_count),
                        None => host_ms,
                    };
                    let compute = sim_compute_time(w as u32, base, &self.link, &mut self.rng)?;
                    update.timing.compute_ms = whole_ms(compute);
                    update.timing.recv_ms = whole_ms(at - start);
                    update.timing.send_ms = whole_ms(self.last_send_ms[w]);
                    *slot = Slot {
                        received_at: at,
                        compute_ms: compute,
                        host_ms,
                        computed_at: at + compute,
                        payload: codec::encode(&WireMessage::Update(update))?,
                        ..Slot::default()
                    };
                    push(&mut queue, at + compute, w, TraceKind::ComputeDone);
                }
                TraceKind::ComputeDone => {
                    let d = sim_send(slot.payload.len(), &self.link, at, &mut self.rng);
                    self.meter.record_sent(w, d.bytes);
                    self.last_send_ms[w] = d.arrival_ms - at;
                    push(&mut queue, d.arrival_ms, w, TraceKind::UpdateDelivered);
                }
                TraceKind::UpdateDelivered => {
                    bytes = slot.payload.len();
                    let WireMessage::Update(update) =
                        codec::decode(&std::mem::take(&mut slot.payload))?
                    else {
                        unreachable!("worker payload encodes an update");
                    };
                    slot.arrived_at = at;
                    slot.update = Some(update);
                }
                TraceKind::Broadcast | TraceKind::Barrier => unreachable!("never queued"),
            }
            self.trace.push(TraceEvent {
                at_ms: at,
                round,
                worker: Some(w as u32),
                kind: ev.kind,
                bytes,
            });
        }

        let end = slots.iter().map(|s| s.arrived_at).fold(start, f64::max);
        self.trace.push(TraceEvent {
            at_ms: end,
            round,
            worker: None,
            kind: TraceKind::Barrier,
            bytes: 0,
        });
        self.clock_ms = end;

        let mut phases = Vec::with_capacity(4 * k);
        let mut updates = Vec::with_capacity(k);
        for (w, slot) in slots.into_iter().enumerate() {
            let worker = Some(w as u32);
            let record = |phase, virtual_ms, host_ms| PhaseRecord {
                worker,
                round,
                phase,
                virtual_ms,
                host_ms,
            };
            phases.push(record(Phase::Receive, slot.received_at - start, None));
            phases.push(record(Phase::Compute, slot.compute_ms, Some(slot.host_ms)));
            phases.push(record(
                Phase::Send,
                slot.arrived_at - slot.computed_at,
                None,
            ));
            phases.push(record(Phase::Idle, end - slot.arrived_at, None));
            updates.push(
                slot.update
                    .expect("every worker delivers before the queue drains"),
            );
        }
        Ok(Exchange {
            updates,
            span_ms: end - start,
            phases,
            round_bytes: self.meter.close_round(),
        })
    }
}

fn whole_ms(ms: f64) -> u32 {
    ms.round().clamp(0.0, f64::from(u32::MAX)) as u32
}
