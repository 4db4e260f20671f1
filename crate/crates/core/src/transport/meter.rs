/// Exact per-worker byte counts, seen from the worker side: `sent` is upload
/// to the server, `received` is download from it.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrafficMeter {
    sent: Vec<u64>,
    received: Vec<u64>,
    open: Vec<(u64, u64)>,
    rounds: Vec<Vec<(u64, u64)>>,
}

impl TrafficMeter {
    pub fn new(workers: usize) -> Self {
        TrafficMeter {
            sent: vec![0; workers],
            received: vec![0; workers],
            open: vec![(0, 0); workers],
            rounds: Vec::new(),
        }
    }

    pub fn workers(&self) -> usize {
        self.sent.len()
    }

    pub fn record_sent(&mut self, worker: usize, bytes: usize) {
        self.sent[worker] += bytes as u64;
        self.open[worker].0 += bytes as u64;
    }

    pub fn record_received(&mut self, worker: usize, bytes: usize) {
        self.received[worker] += bytes as u64;
        self.open[worker].1 += bytes as u64;
    }

    /// Seals the current round and returns each worker's `sent + received`
    /// for it.
    pub fn close_round(&mut self) -> Vec<u64> {
        let deltas = std::mem::replace(&mut self.open, vec![(0, 0); self.sent.len()]);
        let totals = deltas.iter().map(|(s, r)| s + r).collect();
        self.rounds.push(deltas);
        totals
    }

    pub fn sent(&self, worker: usize) -> u64 {
        self.sent[worker]
    }

    pub fn received(&self, worker: usize) -> u64 {
        self.received[worker]
    }

    pub fn cumulative(&self, worker: usize) -> u64 {
        self.sent[worker] + self.received[worker]
    }

    /// `(sent, received)` per worker for every closed round.
    pub fn rounds(&self) -> &[Vec<(u64, u64)>] {
        &self.rounds
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deltas_sum_to_cumulative() {
        let mut m = TrafficMeter::new(2);
        m.record_received(0, 100);
        m.record_sent(0, 120);
        m.record_sent(1, 5);
        assert_eq!(m.close_round(), vec![220, 5]);
        m.record_sent(1, 7);
        assert_eq!(m.close_round(), vec![0, 7]);
        let total: u64 = m.rounds().iter().map(|r| r[1].0 + r[1].1).sum();
        assert_eq!(total, m.cumulative(1));
        assert_eq!(m.cumulative(0), 220);
    }
}
