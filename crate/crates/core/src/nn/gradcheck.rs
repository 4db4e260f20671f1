//! Central finite differences, used as the oracle for analytic gradients.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{self, LstmGrads, LstmWeights, ParameterSet};
use crate::rng;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-4;

/// `(L(theta + h) - L(theta - h)) / 2h` for every element of parameter `index`.
/// The parameter is restored exactly afterwards.
pub fn finite_diff_grad<F>(
    params: &mut ParameterSet<f64>,
    index: usize,
    h: f64,
    mut loss: F,
) -> Result<Tensor<f64>>
where
    F: FnMut(&ParameterSet<f64>) -> Result<f64>,
{
    finite_diff_grad_with(params, index, h, |p| Ok((loss(p)?, ())))
}

/// Like [`finite_diff_grad`], but `eval` also returns a signature of the
/// piecewise choices made (ReLU masks, pooling argmax). When a probe changes
/// the signature it straddles a kink, and that element comes back as NaN so
/// [`max_relative_error`] skips it.
pub fn finite_diff_grad_with<F, S>(
    params: &mut ParameterSet<f64>,
    index: usize,
    h: f64,
    mut eval: F,
) -> Result<Tensor<f64>>
where
    F: FnMut(&ParameterSet<f64>) -> Result<(f64, S)>,
    S: PartialEq,
{
    if index >= params.len() {
        return Err(Error::dim(
            "finite_diff_grad",
            "param-index",
            format!("< {}", params.len()),
            index,
        ));
    }
    if !(h > 0.0) {
        return Err(Error::validation(format!("step must be positive, got {h}")));
    }
    let (_, base) = eval(params)?;
    let shape = params[index].value.shape().to_vec();
    let mut grad = Tensor::zeros(shape);
    for i in 0..grad.numel() {
        let original = params[index].value.data()[i];
        params[index].value.data_mut()[i] = original + h;
        let (up, up_sig) = eval(params)?;
        params[index].value.data_mut()[i] = original - h;
        let (down, down_sig) = eval(params)?;
        params[index].value.data_mut()[i] = original;
        grad.data_mut()[i] = if up_sig == base && down_sig == base {
            (up - down) / (2.0 * h)
        } else {
            f64::NAN
        };
    }
    Ok(grad)
}

/// Largest elementwise relative error `|a - n| / max(|a|, |n|)` over elements
/// whose numeric gradient exceeds `floor` in magnitude. NaN numerics are
/// ignored.
pub fn max_relative_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>, floor: f64) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .filter(|(_, n)| n.abs() > floor)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()))
        .fold(0.0, f64::max)
}

/// Elements with a smaller numeric gradient are skipped by the relative check.
pub const DEFAULT_FLOOR: f64 = 1e-8;

/// Worst relative error for one tensor of one check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_error: f64,
    /// Elements left out because a probe straddled a kink.
    pub skipped: usize,
}

impl GradCheck {
    pub fn new(name: String, analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> Self {
        GradCheck {
            name,
            max_rel_error: max_relative_error(analytic, numeric, DEFAULT_FLOOR),
            skipped: numeric.data().iter().filter(|v| v.is_nan()).count(),
        }
    }
}

fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Compares `analytic[i]` against central differences of `loss` for every
/// tensor in `params`, naming each result `{layer}.{tensor}`.
fn compare<F>(
    layer: &str,
    params: &mut ParameterSet<f64>,
    analytic: &[Tensor<f64>],
    mut loss: F,
) -> Result<Vec<GradCheck>>
where
    F: FnMut(&ParameterSet<f64>) -> Result<f64>,
{
    compare_with(layer, params, analytic, |p| Ok((loss(p)?, ())))
}

/// [`compare`] for layers with kinks; see [`finite_diff_grad_with`].
fn compare_with<F, S>(
    layer: &str,
    params: &mut ParameterSet<f64>,
    analytic: &[Tensor<f64>],
    mut eval: F,
) -> Result<Vec<GradCheck>>
where
    F: FnMut(&ParameterSet<f64>) -> Result<(f64, S)>,
    S: PartialEq,
{
    let mut out = Vec::new();
    for (i, a) in analytic.iter().enumerate() {
        let numeric = finite_diff_grad_with(params, i, DEFAULT_STEP, &mut eval)?;
        out.push(GradCheck::new(
            format!("{layer}.{}", params[i].name()),
            a,
            &numeric,
        ));
    }
    Ok(out)
}

/// Finite-difference checks of every layer's backward pass in double
/// precision, including input gradients. Each layer is probed through the
/// scalar loss `sum(y * r)` for a fixed random `r`.
pub fn check_layers(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = rng::stream(seed, "gradcheck", 0);
    let mut out = Vec::new();

    // fc: x 3x5, w 5x4
    let mut p = ParameterSet::from_tensors([
        ("x", random(&[3, 5], &mut rng)),
        ("w", random(&[5, 4], &mut rng)),
        ("b", random(&[4], &mut rng)),
    ])?;
    let r = random(&[3, 4], &mut rng);
    let (mut gw, mut gb) = (Tensor::zeros(vec![5, 4]), Tensor::zeros(vec![4]));
    let gx = nn::fc_backward(&p[0].value, &p[1].value, &r, &mut gw, &mut gb, true)?
        .expect("input gradient requested");
    out.extend(compare("fc", &mut p, &[gx, gw, gb], |p| {
        Ok(dot(
            &nn::fc_forward(&p[0].value, &p[1].value, &p[2].value)?,
            &r,
        ))
    })?);

    // conv: x 2x2x6x5, k 3x2x3x2
    let mut p = ParameterSet::from_tensors([
        ("x", random(&[2, 2, 6, 5], &mut rng)),
        ("k", random(&[3, 2, 3, 2], &mut rng)),
        ("b", random(&[3], &mut rng)),
    ])?;
    let r = random(&[2, 3, 4, 4], &mut rng);
    let (mut gk, mut gb) = (Tensor::zeros(vec![3, 2, 3, 2]), Tensor::zeros(vec![3]));
    let gx = nn::conv2d_backward(&p[0].value, &p[1].value, &r, &mut gk, &mut gb, true)?
        .expect("input gradient requested");
    out.extend(compare("conv2d", &mut p, &[gx, gk, gb], |p| {
        Ok(dot(
            &nn::conv2d_forward(&p[0].value, &p[1].value, &p[2].value)?,
            &r,
        ))
    })?);

    let mut p = ParameterSet::from_tensors([("x", random(&[2, 3, 4, 6], &mut rng))])?;
    let r = random(&[2, 3, 2, 3], &mut rng);
    let (_, argmax) = nn::maxpool2_forward(&p[0].value)?;
    let gx = nn::maxpool2_backward(&r, &argmax, p[0].value.shape())?;
    out.extend(compare_with("maxpool2", &mut p, &[gx], |p| {
        let (y, argmax) = nn::maxpool2_forward(&p[0].value)?;
        Ok((dot(&y, &r), argmax))
    })?);

    let mut p = ParameterSet::from_tensors([("x", random(&[4, 7], &mut rng))])?;
    let r = random(&[4, 7], &mut rng);
    let gx = nn::relu_backward(&nn::relu_forward(&p[0].value), &r);
    out.extend(compare_with("relu", &mut p, &[gx], |p| {
        let mask: Vec<bool> = p[0].value.data().iter().map(|&v| v > 0.0).collect();
        Ok((dot(&nn::relu_forward(&p[0].value), &r), mask))
    })?);

    let mut p = ParameterSet::from_tensors([("logits", random(&[4, 5], &mut rng))])?;
    let labels = [0, 3, 4, 1];
    let g = nn::softmax_cross_entropy(&p[0].value, &labels)?.grad_logits;
    out.extend(compare("softmax_xent", &mut p, &[g], |p| {
        Ok(nn::softmax_cross_entropy(&p[0].value, &labels)?.loss)
    })?);

    // lstm cell: batch 2, input 3, hidden 4; loss touches both h and c.
    let (b, i, h) = (2, 3, 4);
    let mut p = ParameterSet::from_tensors([
        ("x", random(&[b, i], &mut rng)),
        ("h_prev", random(&[b, h], &mut rng)),
        ("c_prev", random(&[b, h], &mut rng)),
        ("w_ih", random(&[i, 4 * h], &mut rng)),
        ("w_hh", random(&[h, 4 * h], &mut rng)),
        ("bias", random(&[4 * h], &mut rng)),
    ])?;
    let (rh, rc) = (random(&[b, h], &mut rng), random(&[b, h], &mut rng));
    let weights = |p: &ParameterSet<f64>| -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
        (p[3].value.clone(), p[4].value.clone(), p[5].value.clone())
    };
    let (w_ih, w_hh, bias) = weights(&p);
    let lw = LstmWeights {
        w_ih: &w_ih,
        w_hh: &w_hh,
        bias: &bias,
    };
    let (_, _, cache) = nn::lstm_cell_forward(&p[0].value, &p[1].value, &p[2].value, lw)?;
    let (mut g_ih, mut g_hh, mut g_b) = (
        Tensor::zeros(vec![i, 4 * h]),
        Tensor::zeros(vec![h, 4 * h]),
        Tensor::zeros(vec![4 * h]),
    );
    let grads = LstmGrads {
        w_ih: &mut g_ih,
        w_hh: &mut g_hh,
        bias: &mut g_b,
    };
    let (gx, gh, gc) = nn::lstm_cell_backward(&p[0].value, &cache, lw, &rh, &rc, grads)?;
    out.extend(compare(
        "lstm_cell",
        &mut p,
        &[gx, gh, gc, g_ih, g_hh, g_b],
        |p| {
            let (w_ih, w_hh, bias) = weights(p);
            let lw = LstmWeights {
                w_ih: &w_ih,
                w_hh: &w_hh,
                bias: &bias,
            };
            let (h, c, _) = nn::lstm_cell_forward(&p[0].value, &p[1].value, &p[2].value, lw)?;
            Ok(dot(&h, &rh) + dot(&c, &rc))
        },
    )?);
    Ok(out)
}
