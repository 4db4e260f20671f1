//! Fully connected layer, `y = x W + b` with `W` stored `in x out`.

use crate::error::{Error, Result};
use crate::nn::Scalar;
use crate::tensor::Tensor;

fn check<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize, usize)> {
    x.expect_rank("fc_forward", 2)?;
    w.expect_rank("fc_forward", 2)?;
    b.expect_rank("fc_forward", 1)?;
    let (batch, input) = (x.dim(0), x.dim(1));
    if w.dim(0) != input {
        return Err(Error::dim(
            "fc_forward",
            "weight axis 0 (inputs)",
            input,
            w.dim(0),
        ));
    }
    let out = w.dim(1);
    if b.dim(0) != out {
        return Err(Error::dim(
            "fc_forward",
            "bias axis 0 (outputs)",
            out,
            b.dim(0),
        ));
    }
    Ok((batch, input, out))
}

pub fn fc_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (batch, input, out) = check(x, w, b)?;
    let mut y = Vec::with_capacity(batch * out);
    for _ in 0..batch {
        y.extend_from_slice(b.data());
    }
    T::gemm(
        batch,
        input,
        out,
        x.data(),
        false,
        w.data(),
        false,
        &mut y,
        T::one(),
    );
    Tensor::new(vec![batch, out], y)
}

/// Accumulates weight and bias gradients; returns the input gradient when
/// `need_input_grad` is set.
pub fn fc_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_y: &Tensor<T>,
    grad_w: &mut Tensor<T>,
    grad_b: &mut Tensor<T>,
    need_input_grad: bool,
) -> Result<Option<Tensor<T>>> {
    let (batch, input, out) = (x.dim(0), x.dim(1), w.dim(1));
    if grad_y.shape() != [batch, out] {
        return Err(Error::dim(
            "fc_backward",
            "grad_output",
            format!("{:?}", [batch, out]),
            format!("{:?}", grad_y.shape()),
        ));
    }
    T::gemm(
        input,
        batch,
        out,
        x.data(),
        true,
        grad_y.data(),
        false,
        grad_w.data_mut(),
        T::one(),
    );
    let gb = grad_b.data_mut();
    for row in grad_y.data().chunks_exact(out) {
        for (g, &v) in gb.iter_mut().zip(row) {
            *g = *g + v;
        }
    }
    if !need_input_grad {
        return Ok(None);
    }
    let mut dx = vec![T::zero(); batch * input];
    T::gemm(
        batch,
        out,
        input,
        grad_y.data(),
        false,
        w.data(),
        true,
        &mut dx,
        T::zero(),
    );
    Ok(Some(Tensor::new(vec![batch, input], dx)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_weights() {
        let y = fc_forward(
            &t(&[1, 2], &[1., 2.]),
            &t(&[2, 2], &[1., 0., 0., 1.]),
            &t(&[2], &[0., 0.]),
        )
        .unwrap();
        assert_eq!(y.data(), &[1., 2.]);
    }

    #[test]
    fn hand_arithmetic() {
        let y = fc_forward(
            &t(&[1, 2], &[1., 1.]),
            &t(&[2, 1], &[1., 1.]),
            &t(&[1], &[1.]),
        )
        .unwrap();
        assert_eq!(y.data(), &[3.]);
    }

    #[test]
    fn shape_errors_name_the_axis() {
        let err = fc_forward(
            &t(&[1, 3], &[0.; 3]),
            &t(&[2, 1], &[0.; 2]),
            &t(&[1], &[0.]),
        )
        .unwrap_err();
        assert!(err.to_string().contains("weight axis 0"), "{err}");
        let err = fc_forward(
            &t(&[1, 2], &[0.; 2]),
            &t(&[2, 1], &[0.; 2]),
            &t(&[2], &[0.; 2]),
        )
        .unwrap_err();
        assert!(err.to_string().contains("bias axis 0"), "{err}");
    }

    #[test]
    fn quadratic_loss_single_weight() {
        // L = (w x - target)^2 with x = 2, w = 3, target = 0: dL/dw = 2 (6) 2 = 24.
        let x = t(&[1, 1], &[2.]);
        let w = t(&[1, 1], &[3.]);
        let b = t(&[1], &[0.]);
        let y = fc_forward(&x, &w, &b).unwrap();
        let grad_y = t(&[1, 1], &[2.0 * (y.data()[0] - 0.0)]);
        let mut gw = Tensor::zeros(vec![1, 1]);
        let mut gb = Tensor::zeros(vec![1]);
        let dx = fc_backward(&x, &w, &grad_y, &mut gw, &mut gb, true)
            .unwrap()
            .unwrap();
        assert_eq!(gw.data(), &[24.]);
        assert_eq!(gb.data(), &[12.]);
        assert_eq!(dx.data(), &[36.]);
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_grads() {
        let x = t(&[2, 3], &[1., -2., 3., 0.5, 0.1, -1.]);
        let w = t(&[3, 2], &[0.3; 6]);
        let mut gw = Tensor::zeros(vec![3, 2]);
        let mut gb = Tensor::zeros(vec![2]);
        fc_backward(&x, &w, &Tensor::zeros(vec![2, 2]), &mut gw, &mut gb, false).unwrap();
        assert!(gw.data().iter().chain(gb.data()).all(|&v| v == 0.0));
    }
}
