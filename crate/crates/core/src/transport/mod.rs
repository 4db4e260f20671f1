//! Moving round messages between server and workers: the wire codec, an
//! event-driven simulated network, and a TCP transport.

pub mod codec;
mod meter;
mod sim;
pub mod tcp;

use crate::error::Result;
use crate::fedavg::{GlobalModelMsg, LocalUpdateMsg};
use crate::metrics::PhaseRecord;

pub use codec::{decode, encode, encoded_len, Control, WireMessage};
pub use meter::TrafficMeter;
pub use sim::{
    sim_compute_time, sim_send, Delivery, LinkModel, SimTransport, TraceEvent, TraceKind,
};

/// Outcome of one broadcast/collect cycle.
#[derive(Debug, Clone)]
pub struct Exchange {
    /// One update per worker, in worker-id order.
    pub updates: Vec<LocalUpdateMsg>,
    /// Round duration: virtual in simulation, host wall clock over TCP.
    pub span_ms: f64,
    pub phases: Vec<PhaseRecord>,
    /// Bytes sent plus received by each worker during this round.
    pub round_bytes: Vec<u64>,
}

/// Server-side view of the worker fleet.
pub trait Transport {
    fn workers(&self) -> usize;

    /// Prepares repeat run `run` seeded by `seed`.
    fn begin_run(&mut self, run: u32, seed: u64) -> Result<()>;

    /// Broadcasts `global` and blocks until every worker has answered.
    fn exchange(&mut self, global: &GlobalModelMsg) -> Result<Exchange>;

    /// Tells workers the experiment is over.
    fn shutdown(&mut self) -> Result<()> {
        Ok(())
    }
}
