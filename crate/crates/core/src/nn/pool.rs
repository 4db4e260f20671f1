//! Non-overlapping 2x2 max pooling and ReLU.

use crate::error::{Error, Result};
use crate::nn::Scalar;
use crate::tensor::Tensor;

/// Flat input index of each window's maximum; ties go to the first element
/// in row-major window order.
pub type ArgMax = Vec<usize>;

pub fn maxpool2_forward<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, ArgMax)> {
    x.expect_rank("maxpool2_forward", 4)?;
    let (batch, channels, height, width) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    if height % 2 != 0 {
        return Err(Error::dim(
            "maxpool2_forward",
            "input axis 2 (height)",
            "even",
            height,
        ));
    }
    if width % 2 != 0 {
        return Err(Error::dim(
            "maxpool2_forward",
            "input axis 3 (width)",
            "even",
            width,
        ));
    }
    let (oh, ow) = (height / 2, width / 2);
    let data = x.data();
    let mut y = Vec::with_capacity(batch * channels * oh * ow);
    let mut argmax = Vec::with_capacity(y.capacity());
    for plane in 0..batch * channels {
        let base = plane * height * width;
        for oy in 0..oh {
            for ox in 0..ow {
                let top = base + 2 * oy * width + 2 * ox;
                let mut best = top;
                for idx in [top + 1, top + width, top + width + 1] {
                    if data[idx] > data[best] {
                        best = idx;
                    }
                }
                y.push(data[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![batch, channels, oh, ow], y)?, argmax))
}

/// Routes each window's upstream gradient to its recorded maximum.
pub fn maxpool2_backward<T: Scalar>(
    grad_y: &Tensor<T>,
    argmax: &[usize],
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    if grad_y.numel() != argmax.len() {
        return Err(Error::dim(
            "maxpool2_backward",
            "grad_output",
            argmax.len(),
            grad_y.numel(),
        ));
    }
    let mut dx = Tensor::zeros(input_shape.to_vec());
    let out = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_y.data()) {
        out[idx] = out[idx] + g;
    }
    Ok(dx)
}

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero()));
    y
}

/// Uses the layer output as the mask: gradient passes where `y > 0`.
pub fn relu_backward<T: Scalar>(y: &Tensor<T>, grad_y: &Tensor<T>) -> Tensor<T> {
    let mut dx = grad_y.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(y.data()) {
        if v <= T::zero() {
            *d = T::zero();
        }
    }
    dx
}
