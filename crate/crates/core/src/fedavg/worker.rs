use std::sync::Arc;
use std::time::Instant;

use crate::data::{Batch, BatchStream, Dataset, Shard};
use crate::error::{Error, Result};
use crate::fedavg::{FedConfig, GlobalModelMsg, LocalUpdateMsg, UpdateTiming};
use crate::models::{Model, ModelSpec};
use crate::nn::ParameterSet;
use crate::rng;

/// What a worker needs from the model it trains.
pub trait LocalModel {
    fn load(&mut self, weights: &ParameterSet) -> Result<()>;

    /// One SGD step on `batch`, returning the pre-step loss. With `lr == 0`
    /// the gradient is computed and discarded.
    fn step(&mut self, batch: &Batch, lr: f32) -> Result<f32>;

    fn weights(&self) -> ParameterSet;
}

impl LocalModel for Model {
    fn load(&mut self, weights: &ParameterSet) -> Result<()> {
        self.load_weights(weights)
    }

    fn step(&mut self, batch: &Batch, lr: f32) -> Result<f32> {
        if lr == 0.0 {
            let loss = self.loss_and_grad(&batch.inputs, &batch.labels)?;
            self.params_mut().zero_grad();
            Ok(loss)
        } else {
            self.train_step(&batch.inputs, &batch.labels, lr)
        }
    }

    fn weights(&self) -> ParameterSet {
        self.params().values()
    }
}

/// Resets `model` to the broadcast weights and runs `e` SGD steps on the next
/// `e` batches of `stream`. Only `timing.compute_ms` is filled in.
pub fn local_update<M: LocalModel>(
    model: &mut M,
    global: &GlobalModelMsg,
    stream: &mut BatchStream,
    e: usize,
    lr: f32,
) -> Result<LocalUpdateMsg> {
    if e == 0 {
        return Err(Error::validation("e must be at least 1"));
    }
    let started = Instant::now();
    model.load(&global.weights)?;
    for _ in 0..e {
        let batch = stream.next_batch()?;
        model.step(&batch, lr)?;
    }
    Ok(LocalUpdateMsg {
        round: global.round,
        weights: model.weights(),
        sample_count: (e * stream.batch_size()) as u32,
        timing: UpdateTiming {
            compute_ms: started.elapsed().as_millis().min(u128::from(u32::MAX)) as u32,
            ..UpdateTiming::default()
        },
    })
}

/// One client: a model, the persistent batch stream over its shard, and the
/// last round it served.
#[derive(Debug)]
pub struct Worker<M = Model> {
    id: u32,
    model: M,
    stream: BatchStream,
    e: usize,
    lr: f32,
    last_round: u32,
}

impl<M: LocalModel> Worker<M> {
    pub fn new(
        id: u32,
        model: M,
        shard: &Shard,
        cfg: &FedConfig,
        stream_seed: u64,
    ) -> Result<Self> {
        let stream = BatchStream::new(shard, cfg.b, stream_seed)?;
        Ok(Worker {
            id,
            model,
            stream,
            e: cfg.e,
            lr: cfg.lr,
            last_round: 0,
        })
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    /// Trains on a broadcast. Returns the update and the host time spent, in
    /// fractional milliseconds.
    pub fn handle(&mut self, msg: &GlobalModelMsg) -> Result<(LocalUpdateMsg, f64)> {
        if msg.round <= self.last_round {
            return Err(Error::protocol(
                Some(self.id),
                format!(
                    "round {} received after round {}",
                    msg.round, self.last_round
                ),
            ));
        }
        let started = Instant::now();
        let update = local_update(&mut self.model, msg, &mut self.stream, self.e, self.lr)?;
        self.last_round = msg.round;
        Ok((update, started.elapsed().as_secs_f64() * 1e3))
    }
}

/// Partitions `train` for the run seeded by `run_seed` and builds every worker.
pub fn spawn_workers(cfg: &FedConfig, train: &Arc<Dataset>, run_seed: u64) -> Result<Vec<Worker>> {
    let shards = cfg
        .partition
        .split(train, cfg.k, rng::derive_seed(run_seed, "partition", 0))?;
    shards
        .iter()
        .map(|s| make_worker(cfg, s, run_seed))
        .collect()
}

/// The single worker `id` of [`spawn_workers`], for out-of-process clients.
pub fn worker_for(cfg: &FedConfig, train: &Arc<Dataset>, run_seed: u64, id: u32) -> Result<Worker> {
    if id as usize >= cfg.k {
        return Err(Error::validation(format!(
            "worker id {id} outside 0..{}",
            cfg.k
        )));
    }
    let mut shards =
        cfg.partition
            .split(train, cfg.k, rng::derive_seed(run_seed, "partition", 0))?;
    make_worker(cfg, &shards.swap_remove(id as usize), run_seed)
}

fn make_worker(cfg: &FedConfig, shard: &Shard, run_seed: u64) -> Result<Worker> {
    let id = shard.worker_id();
    // Weights are replaced on every broadcast; the build seed is irrelevant.
    let model = Model::build(ModelSpec::standard(cfg.model), run_seed);
    Worker::new(
        id,
        model,
        shard,
        cfg,
        rng::derive_seed(run_seed, "worker", u64::from(id)),
    )
}
