//! Valid 2-D cross-correlation, stride 1, no padding, lowered to GEMM via im2col.

use crate::error::{Error, Result};
use crate::nn::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
struct Geometry {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    filters: usize,
    kh: usize,
    kw: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn patch(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

fn geometry<T: Scalar>(x: &Tensor<T>, k: &Tensor<T>, b: &Tensor<T>) -> Result<Geometry> {
    x.expect_rank("conv2d_forward", 4)?;
    k.expect_rank("conv2d_forward", 4)?;
    b.expect_rank("conv2d_forward", 1)?;
    let (batch, channels, height, width) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (filters, kc, kh, kw) = (k.dim(0), k.dim(1), k.dim(2), k.dim(3));
    if kc != channels {
        return Err(Error::dim(
            "conv2d_forward",
            "kernel axis 1 (channels)",
            channels,
            kc,
        ));
    }
    if b.dim(0) != filters {
        return Err(Error::dim(
            "conv2d_forward",
            "bias axis 0 (filters)",
            filters,
            b.dim(0),
        ));
    }
    if kh > height {
        return Err(Error::dim(
            "conv2d_forward",
            "input axis 2 (height)",
            format!(">= {kh}"),
            height,
        ));
    }
    if kw > width {
        return Err(Error::dim(
            "conv2d_forward",
            "input axis 3 (width)",
            format!(">= {kw}"),
            width,
        ));
    }
    Ok(Geometry {
        batch,
        channels,
        height,
        width,
        filters,
        kh,
        kw,
        out_h: height - kh + 1,
        out_w: width - kw + 1,
    })
}

/// Unfolds one sample (`C x H x W`) into a `(C*kh*kw) x (out_h*out_w)` matrix.
fn im2col<T: Scalar>(g: &Geometry, sample: &[T], col: &mut [T]) {
    let positions = g.positions();
    for c in 0..g.channels {
        let plane = &sample[c * g.height * g.width..(c + 1) * g.height * g.width];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((c * g.kh + i) * g.kw + j) * positions;
                for oy in 0..g.out_h {
                    let src = &plane[(oy + i) * g.width + j..(oy + i) * g.width + j + g.out_w];
                    col[row + oy * g.out_w..row + (oy + 1) * g.out_w].copy_from_slice(src);
                }
            }
        }
    }
}

/// Inverse of [`im2col`], accumulating overlapping contributions.
fn col2im<T: Scalar>(g: &Geometry, col: &[T], sample: &mut [T]) {
    let positions = g.positions();
    for c in 0..g.channels {
        let plane = &mut sample[c * g.height * g.width..(c + 1) * g.height * g.width];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((c * g.kh + i) * g.kw + j) * positions;
                for oy in 0..g.out_h {
                    let dst = &mut plane[(oy + i) * g.width + j..(oy + i) * g.width + j + g.out_w];
                    let src = &col[row + oy * g.out_w..row + (oy + 1) * g.out_w];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = *d + s;
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(x: &Tensor<T>, k: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let g = geometry(x, k, b)?;
    let (patch, positions) = (g.patch(), g.positions());
    let in_stride = g.channels * g.height * g.width;
    let out_stride = g.filters * positions;
    let mut col = vec![T::zero(); patch * positions];
    let mut y = vec![T::zero(); g.batch * out_stride];
    for n in 0..g.batch {
        im2col(&g, &x.data()[n * in_stride..(n + 1) * in_stride], &mut col);
        let out = &mut y[n * out_stride..(n + 1) * out_stride];
        for (f, plane) in out.chunks_exact_mut(positions).enumerate() {
            plane.fill(b.data()[f]);
        }
        T::gemm(
            g.filters,
            patch,
            positions,
            k.data(),
            false,
            &col,
            false,
            out,
            T::one(),
        );
    }
    Tensor::new(vec![g.batch, g.filters, g.out_h, g.out_w], y)
}

/// Accumulates kernel and bias gradients; returns the input gradient when
/// `need_input_grad` is set.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    grad_y: &Tensor<T>,
    grad_k: &mut Tensor<T>,
    grad_b: &mut Tensor<T>,
    need_input_grad: bool,
) -> Result<Option<Tensor<T>>> {
    let g = geometry(x, k, grad_b)?;
    let expected = [g.batch, g.filters, g.out_h, g.out_w];
    if grad_y.shape() != expected {
        return Err(Error::dim(
            "conv2d_backward",
            "grad_output",
            format!("{expected:?}"),
            format!("{:?}", grad_y.shape()),
        ));
    }
    let (patch, positions) = (g.patch(), g.positions());
    let in_stride = g.channels * g.height * g.width;
    let out_stride = g.filters * positions;
    let mut col = vec![T::zero(); patch * positions];
    let mut dcol = vec![
        T::zero();
        if need_input_grad {
            patch * positions
        } else {
            0
        }
    ];
    let mut dx = vec![T::zero(); if need_input_grad { x.numel() } else { 0 }];
    for n in 0..g.batch {
        let gy = &grad_y.data()[n * out_stride..(n + 1) * out_stride];
        im2col(&g, &x.data()[n * in_stride..(n + 1) * in_stride], &mut col);
        T::gemm(
            g.filters,
            positions,
            patch,
            gy,
            false,
            &col,
            true,
            grad_k.data_mut(),
            T::one(),
        );
        for (gb, plane) in grad_b.data_mut().iter_mut().zip(gy.chunks_exact(positions)) {
            *gb = plane.iter().fold(*gb, |acc, &v| acc + v);
        }
        if need_input_grad {
            T::gemm(
                patch,
                g.filters,
                positions,
                k.data(),
                true,
                gy,
                false,
                &mut dcol,
                T::zero(),
            );
            col2im(&g, &dcol, &mut dx[n * in_stride..(n + 1) * in_stride]);
        }
    }
    if need_input_grad {
        Ok(Some(Tensor::new(x.shape().to_vec(), dx)?))
    } else {
        Ok(None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_ones() {
        let x = Tensor::<f32>::full(vec![1, 1, 3, 3], 1.0);
        let k = Tensor::<f32>::full(vec![1, 1, 3, 3], 1.0);
        let y = conv2d_forward(&x, &k, &Tensor::zeros(vec![1])).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn delta_kernel_crops() {
        // Kernel with a single 1 at (1, 2) selects x[oy + 1][ox + 2].
        let x = Tensor::<f32>::from_fn(vec![1, 1, 5, 6], |i| i as f32);
        let mut k = Tensor::<f32>::zeros(vec![1, 1, 3, 3]);
        k.data_mut()[3 + 2] = 1.0;
        let y = conv2d_forward(&x, &k, &Tensor::zeros(vec![1])).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 4]);
        for oy in 0..3 {
            for ox in 0..4 {
                assert_eq!(y.data()[oy * 4 + ox], x.data()[(oy + 1) * 6 + ox + 2]);
            }
        }
    }

    #[test]
    fn kernel_larger_than_input() {
        let x = Tensor::<f32>::zeros(vec![1, 1, 2, 5]);
        let k = Tensor::<f32>::zeros(vec![1, 1, 3, 3]);
        let err = conv2d_forward(&x, &k, &Tensor::zeros(vec![1])).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }), "{err}");
        assert!(err.to_string().contains("height"));
    }

    #[test]
    fn channel_mismatch() {
        let x = Tensor::<f32>::zeros(vec![1, 2, 4, 4]);
        let k = Tensor::<f32>::zeros(vec![1, 3, 3, 3]);
        assert!(conv2d_forward(&x, &k, &Tensor::zeros(vec![1])).is_err());
    }
}
