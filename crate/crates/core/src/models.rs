//! The three fixed architectures: a small CNN, a two-layer LSTM and an MLP.
//!
//! | kind | stack | input | params |
//! |------|-------|-------|--------|
//! | CNN  | Conv5x5(16) ReLU Conv5x5(32) ReLU MaxPool2 FC(10) | 1x28x28 | 45,258 |
//! | LSTM | LSTM(128) LSTM(64) FC(8) on the last timestep | 8x1024 | 640,264 |
//! | MLP  | FC(512) ReLU FC(256) ReLU FC(10) | 3072 | 1,707,274 |

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::gradcheck::{self, GradCheck};
use crate::nn::{self, ArgMax, LstmStepCache, Parameter, ParameterSet, Scalar};
use crate::tensor::Tensor;

pub const CNN_PARAMS: usize = 45_258;
pub const LSTM_PARAMS: usize = 640_264;
pub const MLP_PARAMS: usize = 1_707_274;

/// Batch size used by [`evaluate`]. It does not affect the result.
pub const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Cnn,
    Lstm,
    Mlp,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Cnn, ModelKind::Lstm, ModelKind::Mlp];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Cnn => "cnn",
            ModelKind::Lstm => "lstm",
            ModelKind::Mlp => "mlp",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::validation(format!(
                    "unknown model kind {s:?}; valid kinds: cnn, lstm, mlp"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Dims {
    Cnn {
        side: usize,
        conv1: usize,
        conv2: usize,
        kernel: usize,
        classes: usize,
    },
    Lstm {
        timesteps: usize,
        features: usize,
        hidden1: usize,
        hidden2: usize,
        classes: usize,
    },
    Mlp {
        features: usize,
        hidden1: usize,
        hidden2: usize,
        classes: usize,
    },
}

/// Architecture description. The kind fixes the layer stack; only the
/// standard sizes and a reduced variant (for gradient checks) exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelSpec {
    kind: ModelKind,
    dims: Dims,
}

impl ModelSpec {
    pub fn standard(kind: ModelKind) -> Self {
        let dims = match kind {
            ModelKind::Cnn => Dims::Cnn {
                side: 28,
                conv1: 16,
                conv2: 32,
                kernel: 5,
                classes: 10,
            },
            ModelKind::Lstm => Dims::Lstm {
                timesteps: 8,
                features: 1024,
                hidden1: 128,
                hidden2: 64,
                classes: 8,
            },
            ModelKind::Mlp => Dims::Mlp {
                features: 3 * 32 * 32,
                hidden1: 512,
                hidden2: 256,
                classes: 10,
            },
        };
        ModelSpec { kind, dims }
    }

    /// Same layer stack at toy widths: 8x8 images with 3x3 kernels, two
    /// timesteps, a handful of units.
    pub fn reduced(kind: ModelKind) -> Self {
        let dims = match kind {
            ModelKind::Cnn => Dims::Cnn {
                side: 8,
                conv1: 2,
                conv2: 3,
                kernel: 3,
                classes: 4,
            },
            ModelKind::Lstm => Dims::Lstm {
                timesteps: 2,
                features: 5,
                hidden1: 4,
                hidden2: 3,
                classes: 3,
            },
            ModelKind::Mlp => Dims::Mlp {
                features: 6,
                hidden1: 5,
                hidden2: 4,
                classes: 3,
            },
        };
        ModelSpec { kind, dims }
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    /// Per-sample input shape (without the batch axis).
    pub fn input_shape(&self) -> Vec<usize> {
        match self.dims {
            Dims::Cnn { side, .. } => vec![1, side, side],
            Dims::Lstm {
                timesteps,
                features,
                ..
            } => vec![timesteps, features],
            Dims::Mlp { features, .. } => vec![features],
        }
    }

    pub fn classes(&self) -> usize {
        match self.dims {
            Dims::Cnn { classes, .. } | Dims::Lstm { classes, .. } | Dims::Mlp { classes, .. } => {
                classes
            }
        }
    }

    /// Parameter count implied by the layer sizes.
    pub fn param_count(&self) -> usize {
        let fc = |i: usize, o: usize| i * o + o;
        let lstm = |i: usize, h: usize| 4 * ((i + h) * h + h);
        match self.dims {
            Dims::Cnn {
                side,
                conv1,
                conv2,
                kernel,
                classes,
            } => {
                let k2 = kernel * kernel;
                let pooled = (side - 2 * (kernel - 1)) / 2;
                (k2 + 1) * conv1 + (conv1 * k2 + 1) * conv2 + fc(conv2 * pooled * pooled, classes)
            }
            Dims::Lstm {
                features,
                hidden1,
                hidden2,
                classes,
                ..
            } => lstm(features, hidden1) + lstm(hidden1, hidden2) + fc(hidden2, classes),
            Dims::Mlp {
                features,
                hidden1,
                hidden2,
                classes,
            } => fc(features, hidden1) + fc(hidden1, hidden2) + fc(hidden2, classes),
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Layer {
    Conv {
        w: usize,
        b: usize,
    },
    Relu,
    MaxPool,
    Flatten,
    Fc {
        w: usize,
        b: usize,
    },
    Lstm {
        w_ih: usize,
        w_hh: usize,
        b: usize,
        last_only: bool,
    },
}

#[derive(Debug)]
enum LayerCache<T> {
    Conv {
        x: Tensor<T>,
    },
    Relu {
        y: Tensor<T>,
    },
    MaxPool {
        argmax: ArgMax,
        in_shape: Vec<usize>,
    },
    Flatten {
        in_shape: Vec<usize>,
    },
    Fc {
        x: Tensor<T>,
    },
    Lstm {
        x: Tensor<T>,
        steps: Vec<LstmStepCache<T>>,
    },
}

/// Intermediates saved by [`Model::forward_train`]; consumed by exactly one
/// [`Model::backward`] on the same, unmodified model.
#[derive(Debug)]
pub struct ForwardCache<T = f32> {
    model_id: u64,
    stamp: u64,
    layers: Vec<LayerCache<T>>,
}

static NEXT_MODEL_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_MODEL_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug)]
pub struct Model<T = f32> {
    spec: ModelSpec,
    params: ParameterSet<T>,
    layers: Vec<Layer>,
    seed: u64,
    id: u64,
    /// Bumped whenever parameters may have changed; invalidates caches.
    stamp: u64,
}

impl<T: Scalar> Clone for Model<T> {
    fn clone(&self) -> Self {
        Model {
            spec: self.spec,
            params: self.params.clone(),
            layers: self.layers.clone(),
            seed: self.seed,
            id: next_id(),
            stamp: 0,
        }
    }
}

struct Init<'a> {
    rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    fn uniform<T: Scalar>(&mut self, shape: Vec<usize>, fan_in: usize) -> Tensor<T> {
        let bound = (1.0 / fan_in as f64).sqrt();
        Tensor::from_fn(shape, |_| {
            T::lift((self.rng.random::<f64>() * 2.0 - 1.0) * bound)
        })
    }
}

pub fn build_cnn(seed: u64) -> Model {
    Model::build(ModelSpec::standard(ModelKind::Cnn), seed)
}

pub fn build_lstm(seed: u64) -> Model {
    Model::build(ModelSpec::standard(ModelKind::Lstm), seed)
}

pub fn build_mlp(seed: u64) -> Model {
    Model::build(ModelSpec::standard(ModelKind::Mlp), seed)
}

impl<T: Scalar> Model<T> {
    /// Builds the stack for `spec` with weights uniform in `±sqrt(1/fan_in)`.
    pub fn build(spec: ModelSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { rng: &mut rng };
        let mut params = ParameterSet::new();
        let mut layers = Vec::new();
        let mut add = |name: String, value: Tensor<T>| {
            params
                .push(Parameter::new(name, value).expect("valid parameter"))
                .expect("unique parameter names")
        };
        match spec.dims {
            Dims::Cnn {
                side,
                conv1,
                conv2,
                kernel,
                classes,
            } => {
                let k2 = kernel * kernel;
                let w = add(
                    "conv1.weight".into(),
                    init.uniform(vec![conv1, 1, kernel, kernel], k2),
                );
                let b = add("conv1.bias".into(), init.uniform(vec![conv1], k2));
                layers.extend([Layer::Conv { w, b }, Layer::Relu]);
                let fan = conv1 * k2;
                let w = add(
                    "conv2.weight".into(),
                    init.uniform(vec![conv2, conv1, kernel, kernel], fan),
                );
                let b = add("conv2.bias".into(), init.uniform(vec![conv2], fan));
                layers.extend([
                    Layer::Conv { w, b },
                    Layer::Relu,
                    Layer::MaxPool,
                    Layer::Flatten,
                ]);
                let pooled = (side - 2 * (kernel - 1)) / 2;
                let flat = conv2 * pooled * pooled;
                let w = add("fc.weight".into(), init.uniform(vec![flat, classes], flat));
                let b = add("fc.bias".into(), init.uniform(vec![classes], flat));
                layers.push(Layer::Fc { w, b });
            }
            Dims::Lstm {
                features,
                hidden1,
                hidden2,
                classes,
                ..
            } => {
                for (name, input, hidden, last_only) in [
                    ("lstm1", features, hidden1, false),
                    ("lstm2", hidden1, hidden2, true),
                ] {
                    let fan = input + hidden;
                    let w_ih = add(
                        format!("{name}.w_ih"),
                        init.uniform(vec![input, 4 * hidden], fan),
                    );
                    let w_hh = add(
                        format!("{name}.w_hh"),
                        init.uniform(vec![hidden, 4 * hidden], fan),
                    );
                    let b = add(format!("{name}.bias"), init.uniform(vec![4 * hidden], fan));
                    layers.push(Layer::Lstm {
                        w_ih,
                        w_hh,
                        b,
                        last_only,
                    });
                }
                let w = add(
                    "fc.weight".into(),
                    init.uniform(vec![hidden2, classes], hidden2),
                );
                let b = add("fc.bias".into(), init.uniform(vec![classes], hidden2));
                layers.push(Layer::Fc { w, b });
            }
            Dims::Mlp {
                features,
                hidden1,
                hidden2,
                classes,
            } => {
                let sizes = [features, hidden1, hidden2, classes];
                for (i, pair) in sizes.windows(2).enumerate() {
                    let w = add(
                        format!("fc{}.weight", i + 1),
                        init.uniform(vec![pair[0], pair[1]], pair[0]),
                    );
                    let b = add(
                        format!("fc{}.bias", i + 1),
                        init.uniform(vec![pair[1]], pair[0]),
                    );
                    layers.push(Layer::Fc { w, b });
                    if i + 2 < sizes.len() {
                        layers.push(Layer::Relu);
                    }
                }
            }
        }
        let model = Model {
            spec,
            params,
            layers,
            seed,
            id: next_id(),
            stamp: 0,
        };
        debug_assert_eq!(model.param_count(), spec.param_count());
        model
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn kind(&self) -> ModelKind {
        self.spec.kind
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    pub fn params(&self) -> &ParameterSet<T> {
        &self.params
    }

    /// Mutable access; invalidates outstanding forward caches.
    pub fn params_mut(&mut self) -> &mut ParameterSet<T> {
        self.stamp += 1;
        &mut self.params
    }

    /// Replaces all weights; `weights` must match this model's layout.
    pub fn load_weights(&mut self, weights: &ParameterSet<T>) -> Result<()> {
        self.params_mut().copy_values_from(weights)
    }

    /// Same architecture and weights in another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            spec: self.spec,
            params: self.params.cast(),
            layers: self.layers.clone(),
            seed: self.seed,
            id: next_id(),
            stamp: 0,
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let expected = self.spec.input_shape();
        if x.rank() != expected.len() + 1 {
            return Err(Error::dim(
                "model_forward",
                "rank",
                expected.len() + 1,
                x.rank(),
            ));
        }
        for (axis, (&got, &want)) in x.shape()[1..].iter().zip(&expected).enumerate() {
            if got != want {
                return Err(Error::dim(
                    "model_forward",
                    format!("input axis {}", axis + 1),
                    want,
                    got,
                ));
            }
        }
        Ok(())
    }

    /// Inference forward pass returning logits `B x classes`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        self.run(x.clone(), None)
    }

    /// Forward pass that records what [`Model::backward`] needs.
    pub fn forward_train(&self, x: &Tensor<T>) -> Result<(Tensor<T>, ForwardCache<T>)> {
        self.check_input(x)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let logits = self.run(x.clone(), Some(&mut caches))?;
        Ok((
            logits,
            ForwardCache {
                model_id: self.id,
                stamp: self.stamp,
                layers: caches,
            },
        ))
    }

    fn run(&self, x: Tensor<T>, caches: Option<&mut Vec<LayerCache<T>>>) -> Result<Tensor<T>> {
        run_layers(&self.layers, &self.params, x, caches)
    }

    /// Backpropagates `grad_output` (gradient of the loss w.r.t. the logits),
    /// accumulating into every parameter's `grad`.
    pub fn backward(&mut self, cache: ForwardCache<T>, grad_output: &Tensor<T>) -> Result<()> {
        if cache.model_id != self.id || cache.stamp != self.stamp {
            return Err(Error::State(
                "forward cache is stale or belongs to another model; run forward_train first"
                    .into(),
            ));
        }
        if cache.layers.len() != self.layers.len() {
            return Err(Error::State("forward cache is incomplete".into()));
        }
        let mut grad = grad_output.clone();
        for (index, (layer, lc)) in self.layers.iter().zip(cache.layers).enumerate().rev() {
            // The network input needs no gradient.
            let need_dx = index > 0;
            let p = &mut self.params;
            grad = match (*layer, lc) {
                (Layer::Conv { w, b }, LayerCache::Conv { x }) => {
                    let (mut gw, mut gb) = (take_grad(p, w), take_grad(p, b));
                    let dx = nn::conv2d_backward(&x, &p[w].value, &grad, &mut gw, &mut gb, need_dx);
                    put_grad(p, w, gw);
                    put_grad(p, b, gb);
                    match dx? {
                        Some(dx) => dx,
                        None => break,
                    }
                }
                (Layer::Relu, LayerCache::Relu { y }) => nn::relu_backward(&y, &grad),
                (Layer::MaxPool, LayerCache::MaxPool { argmax, in_shape }) => {
                    nn::maxpool2_backward(&grad, &argmax, &in_shape)?
                }
                (Layer::Flatten, LayerCache::Flatten { in_shape }) => grad.reshape(in_shape)?,
                (Layer::Fc { w, b }, LayerCache::Fc { x }) => {
                    let (mut gw, mut gb) = (take_grad(p, w), take_grad(p, b));
                    let dx = nn::fc_backward(&x, &p[w].value, &grad, &mut gw, &mut gb, need_dx);
                    put_grad(p, w, gw);
                    put_grad(p, b, gb);
                    match dx? {
                        Some(dx) => dx,
                        None => break,
                    }
                }
                (
                    Layer::Lstm {
                        w_ih,
                        w_hh,
                        b,
                        last_only,
                    },
                    LayerCache::Lstm { x, steps },
                ) => {
                    let (mut g_ih, mut g_hh, mut gb) =
                        (take_grad(p, w_ih), take_grad(p, w_hh), take_grad(p, b));
                    let dx = lstm_sequence_backward(
                        &x,
                        &steps,
                        &p[w_ih].value,
                        &p[w_hh].value,
                        &grad,
                        last_only,
                        (&mut g_ih, &mut g_hh, &mut gb),
                        need_dx,
                    );
                    put_grad(p, w_ih, g_ih);
                    put_grad(p, w_hh, g_hh);
                    put_grad(p, b, gb);
                    match dx? {
                        Some(dx) => dx,
                        None => break,
                    }
                }
                _ => {
                    return Err(Error::State(
                        "forward cache does not match the layer stack".into(),
                    ))
                }
            };
        }
        Ok(())
    }

    /// Mean cross-entropy of a batch without touching gradients.
    pub fn loss(&self, x: &Tensor<T>, labels: &[usize]) -> Result<T> {
        let logits = self.forward(x)?;
        Ok(nn::softmax_cross_entropy(&logits, labels)?.loss)
    }

    /// Forward, loss and backward; gradients are accumulated, not applied.
    pub fn loss_and_grad(&mut self, x: &Tensor<T>, labels: &[usize]) -> Result<T> {
        let (logits, cache) = self.forward_train(x)?;
        let out = nn::softmax_cross_entropy(&logits, labels)?;
        self.backward(cache, &out.grad_logits)?;
        Ok(out.loss)
    }

    /// One SGD step on a batch; returns the pre-step loss.
    pub fn train_step(&mut self, x: &Tensor<T>, labels: &[usize], lr: T) -> Result<T> {
        let loss = self.loss_and_grad(x, labels)?;
        nn::sgd_step(self.params_mut(), lr)?;
        Ok(loss)
    }

    /// Argmax class per sample; ties resolve to the lowest class index.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        let logits = self.forward(x)?;
        Ok(argmax_rows(&logits))
    }
}

impl Model<f64> {
    /// Analytic gradients of every parameter against central differences on
    /// one random batch. Elements whose probe flips a ReLU or pooling choice
    /// are skipped and counted.
    pub fn check_gradients(&mut self, batch: usize, seed: u64) -> Result<Vec<GradCheck>> {
        let mut rng = crate::rng::stream(seed, "gradcheck-model", 0);
        let mut shape = vec![batch];
        shape.extend(self.spec.input_shape());
        let x = Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0));
        let classes = self.spec.classes();
        let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..classes)).collect();
        self.params.zero_grad();
        self.loss_and_grad(&x, &labels)?;
        let analytic: Vec<Tensor<f64>> = self.params.iter().map(|p| p.grad.clone()).collect();
        let layers = self.layers.clone();
        let mut out = Vec::with_capacity(analytic.len());
        for (i, a) in analytic.iter().enumerate() {
            let numeric =
                nn::finite_diff_grad_with(self.params_mut(), i, gradcheck::DEFAULT_STEP, |p| {
                    let mut caches = Vec::with_capacity(layers.len());
                    let logits = run_layers(&layers, p, x.clone(), Some(&mut caches))?;
                    let loss = nn::softmax_cross_entropy(&logits, &labels)?.loss;
                    Ok((loss, kink_signature(&caches)))
                })?;
            out.push(GradCheck::new(
                format!("{}.{}", self.kind(), self.params[i].name()),
                a,
                &numeric,
            ));
        }
        Ok(out)
    }

    /// Numeric gradient of the batch loss w.r.t. parameter `index`.
    pub fn finite_diff_grad(
        &mut self,
        x: &Tensor<f64>,
        labels: &[usize],
        index: usize,
        h: f64,
    ) -> Result<Tensor<f64>> {
        self.check_input(x)?;
        let layers = self.layers.clone();
        nn::finite_diff_grad(self.params_mut(), index, h, |p| {
            let logits = run_layers(&layers, p, x.clone(), None)?;
            Ok(nn::softmax_cross_entropy(&logits, labels)?.loss)
        })
    }
}

/// ReLU masks and pooling argmax of a forward pass; the loss is smooth
/// between changes of this signature.
fn kink_signature<T: Scalar>(caches: &[LayerCache<T>]) -> Vec<usize> {
    let mut sig = Vec::new();
    for c in caches {
        match c {
            LayerCache::Relu { y } => {
                sig.extend(y.data().iter().map(|&v| usize::from(v > T::zero())))
            }
            LayerCache::MaxPool { argmax, .. } => sig.extend_from_slice(argmax),
            _ => {}
        }
    }
    sig
}

fn run_layers<T: Scalar>(
    layers: &[Layer],
    p: &ParameterSet<T>,
    mut x: Tensor<T>,
    mut caches: Option<&mut Vec<LayerCache<T>>>,
) -> Result<Tensor<T>> {
    for layer in layers {
        let (y, cache) = match *layer {
            Layer::Conv { w, b } => {
                let y = nn::conv2d_forward(&x, &p[w].value, &p[b].value)?;
                (y, caches.is_some().then_some(LayerCache::Conv { x }))
            }
            Layer::Relu => {
                let y = nn::relu_forward(&x);
                let cache = caches.is_some().then(|| LayerCache::Relu { y: y.clone() });
                (y, cache)
            }
            Layer::MaxPool => {
                let (y, argmax) = nn::maxpool2_forward(&x)?;
                let in_shape = x.shape().to_vec();
                (
                    y,
                    caches
                        .is_some()
                        .then_some(LayerCache::MaxPool { argmax, in_shape }),
                )
            }
            Layer::Flatten => {
                let in_shape = x.shape().to_vec();
                let batch = in_shape[0];
                let width = x.numel() / batch;
                let y = x.reshape(vec![batch, width])?;
                (
                    y,
                    caches.is_some().then_some(LayerCache::Flatten { in_shape }),
                )
            }
            Layer::Fc { w, b } => {
                let y = nn::fc_forward(&x, &p[w].value, &p[b].value)?;
                (y, caches.is_some().then_some(LayerCache::Fc { x }))
            }
            Layer::Lstm {
                w_ih,
                w_hh,
                b,
                last_only,
            } => {
                let (y, steps) = lstm_sequence_forward(
                    &x,
                    &p[w_ih].value,
                    &p[w_hh].value,
                    &p[b].value,
                    last_only,
                )?;
                (y, caches.is_some().then_some(LayerCache::Lstm { x, steps }))
            }
        };
        if let (Some(list), Some(cache)) = (caches.as_deref_mut(), cache) {
            list.push(cache);
        }
        x = y;
    }
    Ok(x)
}

fn take_grad<T: Scalar>(p: &mut ParameterSet<T>, index: usize) -> Tensor<T> {
    std::mem::replace(&mut p[index].grad, Tensor::zeros(vec![1]))
}

fn put_grad<T: Scalar>(p: &mut ParameterSet<T>, index: usize, grad: Tensor<T>) {
    p[index].grad = grad;
}

fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let classes = logits.dim(1);
    logits
        .data()
        .chunks_exact(classes)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Runs an LSTM layer over `x: B x T x I`. Returns `B x T x H`, or `B x H`
/// (final timestep) when `last_only`.
fn lstm_sequence_forward<T: Scalar>(
    x: &Tensor<T>,
    w_ih: &Tensor<T>,
    w_hh: &Tensor<T>,
    bias: &Tensor<T>,
    last_only: bool,
) -> Result<(Tensor<T>, Vec<LstmStepCache<T>>)> {
    x.expect_rank("lstm_forward", 3)?;
    let (batch, steps, input) = (x.dim(0), x.dim(1), x.dim(2));
    if w_ih.dim(0) != input {
        return Err(Error::dim(
            "lstm_forward",
            "input axis 2 (features)",
            w_ih.dim(0),
            input,
        ));
    }
    let hidden = w_hh.dim(0);
    let width = 4 * hidden;
    // Input projections for every (sample, timestep) row at once.
    let mut proj = vec![T::zero(); batch * steps * width];
    T::gemm(
        batch * steps,
        input,
        width,
        x.data(),
        false,
        w_ih.data(),
        false,
        &mut proj,
        T::zero(),
    );
    let mut h = vec![T::zero(); batch * hidden];
    let mut c = vec![T::zero(); batch * hidden];
    let mut out = if last_only {
        Vec::new()
    } else {
        vec![T::zero(); batch * steps * hidden]
    };
    let mut caches = Vec::with_capacity(steps);
    for t in 0..steps {
        let mut step_proj = Vec::with_capacity(batch * width);
        for n in 0..batch {
            let row = n * steps + t;
            step_proj.extend_from_slice(&proj[row * width..(row + 1) * width]);
        }
        let (h_t, c_t, cache) = nn::lstm_step_from_projection(step_proj, &h, &c, w_hh, bias, batch);
        if !last_only {
            for n in 0..batch {
                let row = n * steps + t;
                out[row * hidden..(row + 1) * hidden]
                    .copy_from_slice(&h_t[n * hidden..(n + 1) * hidden]);
            }
        }
        h = h_t;
        c = c_t;
        caches.push(cache);
    }
    let y = if last_only {
        Tensor::new(vec![batch, hidden], h)?
    } else {
        Tensor::new(vec![batch, steps, hidden], out)?
    };
    Ok((y, caches))
}

/// Backpropagation through time for [`lstm_sequence_forward`].
#[allow(clippy::too_many_arguments)]
fn lstm_sequence_backward<T: Scalar>(
    x: &Tensor<T>,
    caches: &[LstmStepCache<T>],
    w_ih: &Tensor<T>,
    w_hh: &Tensor<T>,
    grad_y: &Tensor<T>,
    last_only: bool,
    grads: (&mut Tensor<T>, &mut Tensor<T>, &mut Tensor<T>),
    need_dx: bool,
) -> Result<Option<Tensor<T>>> {
    let (batch, steps, input) = (x.dim(0), x.dim(1), x.dim(2));
    let hidden = w_hh.dim(0);
    let width = 4 * hidden;
    let expected: Vec<usize> = if last_only {
        vec![batch, hidden]
    } else {
        vec![batch, steps, hidden]
    };
    if grad_y.shape() != expected.as_slice() {
        return Err(Error::dim(
            "lstm_backward",
            "grad_output",
            format!("{expected:?}"),
            format!("{:?}", grad_y.shape()),
        ));
    }
    let (g_ih, g_hh, g_b) = grads;
    let mut dgates_all = vec![T::zero(); batch * steps * width];
    let mut dh = vec![T::zero(); batch * hidden];
    let mut dc = vec![T::zero(); batch * hidden];
    for t in (0..steps).rev() {
        if last_only {
            if t == steps - 1 {
                for (d, &g) in dh.iter_mut().zip(grad_y.data()) {
                    *d = *d + g;
                }
            }
        } else {
            for n in 0..batch {
                let row = n * steps + t;
                let src = &grad_y.data()[row * hidden..(row + 1) * hidden];
                for (d, &g) in dh[n * hidden..(n + 1) * hidden].iter_mut().zip(src) {
                    *d = *d + g;
                }
            }
        }
        let (dgates, dh_prev, dc_prev) =
            nn::lstm_step_backward(&caches[t], &dh, &dc, w_hh, g_hh, g_b, batch);
        for n in 0..batch {
            let row = n * steps + t;
            dgates_all[row * width..(row + 1) * width]
                .copy_from_slice(&dgates[n * width..(n + 1) * width]);
        }
        dh = dh_prev;
        dc = dc_prev;
    }
    T::gemm(
        input,
        batch * steps,
        width,
        x.data(),
        true,
        &dgates_all,
        false,
        g_ih.data_mut(),
        T::one(),
    );
    if !need_dx {
        return Ok(None);
    }
    let mut dx = vec![T::zero(); batch * steps * input];
    T::gemm(
        batch * steps,
        width,
        input,
        &dgates_all,
        false,
        w_ih.data(),
        true,
        &mut dx,
        T::zero(),
    );
    Ok(Some(Tensor::new(vec![batch, steps, input], dx)?))
}

/// Fraction of samples whose predicted class equals the label.
pub fn evaluate(model: &Model, dataset: &Dataset) -> Result<f64> {
    evaluate_batched(model, dataset, EVAL_BATCH)
}

pub fn evaluate_batched(model: &Model, dataset: &Dataset, batch: usize) -> Result<f64> {
    let n = dataset.len();
    if n == 0 {
        return Err(Error::validation("cannot evaluate on an empty dataset"));
    }
    if batch == 0 {
        return Err(Error::validation("evaluation batch size must be positive"));
    }
    let classes = model.spec().classes();
    if let Some(&bad) = dataset
        .labels()
        .iter()
        .find(|&&l| usize::from(l) >= classes)
    {
        return Err(Error::validation(format!(
            "label {bad} exceeds the model's {classes} classes"
        )));
    }
    let images = dataset.images();
    let mut correct = 0usize;
    let mut start = 0;
    while start < n {
        let len = batch.min(n - start);
        let x = images.slice_rows(start, len)?;
        let predicted = model.predict(&x)?;
        correct += predicted
            .iter()
            .zip(&dataset.labels()[start..start + len])
            .filter(|(&p, &l)| p == usize::from(l))
            .count();
        start += len;
    }
    Ok(correct as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_counts() {
        assert_eq!(
            ModelSpec::standard(ModelKind::Cnn).param_count(),
            CNN_PARAMS
        );
        assert_eq!(
            ModelSpec::standard(ModelKind::Lstm).param_count(),
            LSTM_PARAMS
        );
        assert_eq!(
            ModelSpec::standard(ModelKind::Mlp).param_count(),
            MLP_PARAMS
        );
    }

    #[test]
    fn reduced_models_pass_gradient_check() {
        for kind in ModelKind::ALL {
            let mut m = Model::<f64>::build(ModelSpec::reduced(kind), 3);
            for c in m.check_gradients(3, 11).unwrap() {
                assert!(c.max_rel_error < 1e-4, "{c:?}");
            }
        }
    }

    #[test]
    fn parse_kind() {
        assert_eq!("CNN".parse::<ModelKind>().unwrap(), ModelKind::Cnn);
        let err = "bogus".parse::<ModelKind>().unwrap_err().to_string();
        assert!(err.contains("cnn, lstm, mlp"), "{err}");
    }

    #[test]
    fn stale_cache_rejected() {
        let mut model = Model::<f64>::build(ModelSpec::reduced(ModelKind::Mlp), 1);
        let x = Tensor::full(vec![2, 6], 0.5);
        let (logits, cache) = model.forward_train(&x).unwrap();
        model.params_mut();
        let err = model.backward(cache, &logits).unwrap_err();
        assert!(matches!(err, Error::State(_)));

        let other = Model::<f64>::build(ModelSpec::reduced(ModelKind::Mlp), 1);
        let (logits, cache) = other.forward_train(&x).unwrap();
        assert!(matches!(
            model.backward(cache, &logits),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn wrong_input_shape() {
        let model = build_cnn(0);
        let err = model
            .forward(&Tensor::zeros(vec![1, 1, 28, 27]))
            .unwrap_err();
        assert!(err.to_string().contains("input axis 3"), "{err}");
    }

    #[test]
    fn argmax_ties_go_low() {
        let t = Tensor::<f32>::new(vec![2, 3], vec![1., 1., 0., 0., 2., 2.]).unwrap();
        assert_eq!(argmax_rows(&t), vec![0, 1]);
    }
}
