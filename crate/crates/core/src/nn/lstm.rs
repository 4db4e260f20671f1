//! Standard LSTM cell with input, forget, cell and output gates.
//!
//! Weights are packed gate-major along the last axis in the order
//! `[input | forget | cell | output]`: `w_ih` is `I x 4H`, `w_hh` is `H x 4H`
//! and `bias` is `4H` (one bias per gate).

use crate::error::{Error, Result};
use crate::nn::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct LstmWeights<'a, T> {
    pub w_ih: &'a Tensor<T>,
    pub w_hh: &'a Tensor<T>,
    pub bias: &'a Tensor<T>,
}

impl<T: Scalar> LstmWeights<'_, T> {
    pub fn input_size(&self) -> usize {
        self.w_ih.dim(0)
    }

    pub fn hidden_size(&self) -> usize {
        self.w_hh.dim(0)
    }

    fn validate(&self) -> Result<()> {
        self.w_ih.expect_rank("lstm", 2)?;
        self.w_hh.expect_rank("lstm", 2)?;
        self.bias.expect_rank("lstm", 1)?;
        let h = self.hidden_size();
        if self.w_hh.dim(1) != 4 * h {
            return Err(Error::dim(
                "lstm",
                "w_hh axis 1 (4*hidden)",
                4 * h,
                self.w_hh.dim(1),
            ));
        }
        if self.w_ih.dim(1) != 4 * h {
            return Err(Error::dim(
                "lstm",
                "w_ih axis 1 (4*hidden)",
                4 * h,
                self.w_ih.dim(1),
            ));
        }
        if self.bias.dim(0) != 4 * h {
            return Err(Error::dim(
                "lstm",
                "bias axis 0 (4*hidden)",
                4 * h,
                self.bias.dim(0),
            ));
        }
        Ok(())
    }
}

/// Gradient accumulators matching [`LstmWeights`].
pub struct LstmGrads<'a, T> {
    pub w_ih: &'a mut Tensor<T>,
    pub w_hh: &'a mut Tensor<T>,
    pub bias: &'a mut Tensor<T>,
}

/// Intermediates of one timestep needed by the backward pass.
#[derive(Debug, Clone)]
pub struct LstmStepCache<T> {
    /// Activated gates, `B x 4H`.
    gates: Vec<T>,
    h_prev: Vec<T>,
    c_prev: Vec<T>,
    tanh_c: Vec<T>,
}

fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// Completes a step given the input projection `x_t W_ih` (overwritten with
/// the activated gates). Returns `(h_t, c_t, cache)`.
pub(crate) fn step_from_projection<T: Scalar>(
    mut proj: Vec<T>,
    h_prev: &[T],
    c_prev: &[T],
    w_hh: &Tensor<T>,
    bias: &Tensor<T>,
    batch: usize,
) -> (Vec<T>, Vec<T>, LstmStepCache<T>) {
    let hidden = w_hh.dim(0);
    let width = 4 * hidden;
    T::gemm(
        batch,
        hidden,
        width,
        h_prev,
        false,
        w_hh.data(),
        false,
        &mut proj,
        T::one(),
    );
    let mut h = vec![T::zero(); batch * hidden];
    let mut c = vec![T::zero(); batch * hidden];
    let mut tanh_c = vec![T::zero(); batch * hidden];
    for n in 0..batch {
        let row = &mut proj[n * width..(n + 1) * width];
        for (v, &b) in row.iter_mut().zip(bias.data()) {
            *v = *v + b;
        }
        let (ig, rest) = row.split_at_mut(hidden);
        let (fg, rest) = rest.split_at_mut(hidden);
        let (gg, og) = rest.split_at_mut(hidden);
        for j in 0..hidden {
            ig[j] = sigmoid(ig[j]);
            fg[j] = sigmoid(fg[j]);
            gg[j] = gg[j].tanh();
            og[j] = sigmoid(og[j]);
            let at = n * hidden + j;
            c[at] = fg[j] * c_prev[at] + ig[j] * gg[j];
            tanh_c[at] = c[at].tanh();
            h[at] = og[j] * tanh_c[at];
        }
    }
    let cache = LstmStepCache {
        gates: proj,
        h_prev: h_prev.to_vec(),
        c_prev: c_prev.to_vec(),
        tanh_c,
    };
    (h, c, cache)
}

/// Backward through one step. Accumulates `w_hh` and bias gradients and
/// returns `(grad_preactivations B x 4H, grad_h_prev, grad_c_prev)`; the
/// caller owns the `w_ih` / input side.
pub(crate) fn step_backward<T: Scalar>(
    cache: &LstmStepCache<T>,
    grad_h: &[T],
    grad_c: &[T],
    w_hh: &Tensor<T>,
    grad_w_hh: &mut Tensor<T>,
    grad_bias: &mut Tensor<T>,
    batch: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let hidden = w_hh.dim(0);
    let width = 4 * hidden;
    let one = T::one();
    let mut dgates = vec![T::zero(); batch * width];
    let mut dc_prev = vec![T::zero(); batch * hidden];
    for n in 0..batch {
        let gates = &cache.gates[n * width..(n + 1) * width];
        let dg = &mut dgates[n * width..(n + 1) * width];
        for j in 0..hidden {
            let at = n * hidden + j;
            let (i, f, g, o) = (
                gates[j],
                gates[hidden + j],
                gates[2 * hidden + j],
                gates[3 * hidden + j],
            );
            let tc = cache.tanh_c[at];
            let dh = grad_h[at];
            let dc = grad_c[at] + dh * o * (one - tc * tc);
            dg[j] = dc * g * i * (one - i);
            dg[hidden + j] = dc * cache.c_prev[at] * f * (one - f);
            dg[2 * hidden + j] = dc * i * (one - g * g);
            dg[3 * hidden + j] = dh * tc * o * (one - o);
            dc_prev[at] = dc * f;
        }
    }
    T::gemm(
        hidden,
        batch,
        width,
        &cache.h_prev,
        true,
        &dgates,
        false,
        grad_w_hh.data_mut(),
        one,
    );
    for row in dgates.chunks_exact(width) {
        for (b, &v) in grad_bias.data_mut().iter_mut().zip(row) {
            *b = *b + v;
        }
    }
    let mut dh_prev = vec![T::zero(); batch * hidden];
    T::gemm(
        batch,
        width,
        hidden,
        &dgates,
        false,
        w_hh.data(),
        true,
        &mut dh_prev,
        T::zero(),
    );
    (dgates, dh_prev, dc_prev)
}

/// One LSTM step: `c_t = f*c_prev + i*g`, `h_t = o*tanh(c_t)`.
pub fn lstm_cell_forward<T: Scalar>(
    x_t: &Tensor<T>,
    h_prev: &Tensor<T>,
    c_prev: &Tensor<T>,
    weights: LstmWeights<'_, T>,
) -> Result<(Tensor<T>, Tensor<T>, LstmStepCache<T>)> {
    weights.validate()?;
    x_t.expect_rank("lstm_cell_forward", 2)?;
    let (batch, hidden) = (x_t.dim(0), weights.hidden_size());
    if x_t.dim(1) != weights.input_size() {
        return Err(Error::dim(
            "lstm_cell_forward",
            "x axis 1 (inputs)",
            weights.input_size(),
            x_t.dim(1),
        ));
    }
    for (name, s) in [("h_prev", h_prev), ("c_prev", c_prev)] {
        if s.shape() != [batch, hidden] {
            return Err(Error::dim(
                "lstm_cell_forward",
                name,
                format!("{:?}", [batch, hidden]),
                format!("{:?}", s.shape()),
            ));
        }
    }
    let mut proj = vec![T::zero(); batch * 4 * hidden];
    T::gemm(
        batch,
        weights.input_size(),
        4 * hidden,
        x_t.data(),
        false,
        weights.w_ih.data(),
        false,
        &mut proj,
        T::zero(),
    );
    let (h, c, cache) = step_from_projection(
        proj,
        h_prev.data(),
        c_prev.data(),
        weights.w_hh,
        weights.bias,
        batch,
    );
    Ok((
        Tensor::new(vec![batch, hidden], h)?,
        Tensor::new(vec![batch, hidden], c)?,
        cache,
    ))
}

/// Backward through [`lstm_cell_forward`]. Accumulates into `grads` and returns
/// `(grad_x, grad_h_prev, grad_c_prev)`.
pub fn lstm_cell_backward<T: Scalar>(
    x_t: &Tensor<T>,
    cache: &LstmStepCache<T>,
    weights: LstmWeights<'_, T>,
    grad_h: &Tensor<T>,
    grad_c: &Tensor<T>,
    grads: LstmGrads<'_, T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    weights.validate()?;
    let (batch, input, hidden) = (x_t.dim(0), weights.input_size(), weights.hidden_size());
    if grad_h.shape() != [batch, hidden] || grad_c.shape() != [batch, hidden] {
        return Err(Error::dim(
            "lstm_cell_backward",
            "grad_h/grad_c",
            format!("{:?}", [batch, hidden]),
            format!("{:?} / {:?}", grad_h.shape(), grad_c.shape()),
        ));
    }
    let (dgates, dh_prev, dc_prev) = step_backward(
        cache,
        grad_h.data(),
        grad_c.data(),
        weights.w_hh,
        grads.w_hh,
        grads.bias,
        batch,
    );
    T::gemm(
        input,
        batch,
        4 * hidden,
        x_t.data(),
        true,
        &dgates,
        false,
        grads.w_ih.data_mut(),
        T::one(),
    );
    let mut dx = vec![T::zero(); batch * input];
    T::gemm(
        batch,
        4 * hidden,
        input,
        &dgates,
        false,
        weights.w_ih.data(),
        true,
        &mut dx,
        T::zero(),
    );
    Ok((
        Tensor::new(vec![batch, input], dx)?,
        Tensor::new(vec![batch, hidden], dh_prev)?,
        Tensor::new(vec![batch, hidden], dc_prev)?,
    ))
}
