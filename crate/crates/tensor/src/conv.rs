//! 3x3x3 convolutions with zero "same" padding, lowered to GEMM via im2col.
//!
//! Convolution here is cross-correlation (no kernel flip):
//! `out[o, p] = bias[o] + sum_{i, k} w[o, i, k] * x[i, p * stride + k - 1]`.

use rayon::prelude::*;

use crate::{Result, Scalar, Shape5, Tensor5, TensorError};

/// Taps per 3x3x3 kernel.
pub const KERNEL_TAPS: usize = 27;

/// Samples per work unit in backward passes. Weight gradients are summed
/// within a unit, then across units in order, so results do not depend on
/// the rayon thread count.
const GRAD_CHUNK: usize = 4;

/// Weights and bias of one 3x3x3 convolution layer.
///
/// For [`conv3d`] the weight layout is `(c_out, c_in, 3, 3, 3)`. For
/// [`conv_transpose3d`] it is `(c_in, c_out, 3, 3, 3)`, i.e. the weight of the
/// strided convolution whose adjoint it is.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T> {
    pub c_in: usize,
    pub c_out: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> ConvParams<T> {
    pub fn zeros(c_in: usize, c_out: usize) -> Self {
        ConvParams {
            c_in,
            c_out,
            weight: vec![T::ZERO; c_in * c_out * KERNEL_TAPS],
            bias: vec![T::ZERO; c_out],
        }
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn validate(&self, op: &'static str) -> Result<()> {
        if self.weight.len() != self.c_in * self.c_out * KERNEL_TAPS {
            return Err(TensorError::shape(
                op,
                self.c_in * self.c_out * KERNEL_TAPS,
                self.weight.len(),
            ));
        }
        if self.bias.len() != self.c_out {
            return Err(TensorError::shape(op, self.c_out, self.bias.len()));
        }
        Ok(())
    }

    /// Accumulates `other` into `self` elementwise.
    pub fn add_assign(&mut self, other: &ConvParams<T>) {
        for (a, &b) in self.weight.iter_mut().zip(&other.weight) {
            *a += b;
        }
        for (a, &b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
    }

    pub fn cast<U: Scalar>(&self) -> ConvParams<U> {
        ConvParams {
            c_in: self.c_in,
            c_out: self.c_out,
            weight: self.weight.iter().map(|v| U::from_f64(v.to_f64())).collect(),
            bias: self.bias.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

/// Index mapping between a "large" input grid and the output grid of a
/// strided 3x3x3 convolution with one voxel of zero padding.
#[derive(Clone, Copy, Debug)]
struct Geometry {
    input: [usize; 3],
    output: [usize; 3],
    stride: usize,
}

impl Geometry {
    fn new(d: usize, h: usize, w: usize, stride: usize) -> Self {
        let out = |x: usize| if x == 0 { 0 } else { (x - 1) / stride + 1 };
        Geometry {
            input: [d, h, w],
            output: [out(d), out(h), out(w)],
            stride,
        }
    }

    fn in_len(&self) -> usize {
        self.input.iter().product()
    }

    fn out_len(&self) -> usize {
        self.output.iter().product()
    }

    #[inline]
    fn source(&self, o: usize, k: usize, axis: usize) -> Option<usize> {
        let i = (o * self.stride + k) as isize - 1;
        (i >= 0 && (i as usize) < self.input[axis]).then_some(i as usize)
    }
}

/// Unfolds `src` (`channels x in_len`) into `cols` (`channels*27 x out_len`).
fn im2col<T: Scalar>(src: &[T], channels: usize, g: &Geometry, cols: &mut [T]) {
    let [_, ih, iw] = g.input;
    let [od, oh, ow] = g.output;
    let in_len = g.in_len();
    let out_len = g.out_len();
    for ci in 0..channels {
        let plane = &src[ci * in_len..(ci + 1) * in_len];
        for kd in 0..3 {
            for kh in 0..3 {
                for kw in 0..3 {
                    let row = (ci * KERNEL_TAPS + kd * 9 + kh * 3 + kw) * out_len;
                    let dst = &mut cols[row..row + out_len];
                    for z in 0..od {
                        let sz = g.source(z, kd, 0);
                        for y in 0..oh {
                            let drow = &mut dst[(z * oh + y) * ow..(z * oh + y + 1) * ow];
                            let (Some(sz), Some(sy)) = (sz, g.source(y, kh, 1)) else {
                                drow.fill(T::ZERO);
                                continue;
                            };
                            let srow = &plane[(sz * ih + sy) * iw..(sz * ih + sy + 1) * iw];
                            if g.stride == 1 {
                                match kw {
                                    0 => {
                                        drow[0] = T::ZERO;
                                        drow[1..].copy_from_slice(&srow[..iw - 1]);
                                    }
                                    1 => drow.copy_from_slice(srow),
                                    _ => {
                                        drow[..ow - 1].copy_from_slice(&srow[1..]);
                                        drow[ow - 1] = T::ZERO;
                                    }
                                }
                            } else {
                                for (x, d) in drow.iter_mut().enumerate() {
                                    *d = match g.source(x, kw, 2) {
                                        Some(sx) => srow[sx],
                                        None => T::ZERO,
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `cols` back, accumulating into `dst`
/// (`channels x in_len`, zeroed first).
fn col2im<T: Scalar>(cols: &[T], channels: usize, g: &Geometry, dst: &mut [T]) {
    let [_, ih, iw] = g.input;
    let [od, oh, ow] = g.output;
    let in_len = g.in_len();
    let out_len = g.out_len();
    dst.fill(T::ZERO);
    for ci in 0..channels {
        let plane = &mut dst[ci * in_len..(ci + 1) * in_len];
        for kd in 0..3 {
            for kh in 0..3 {
                for kw in 0..3 {
                    let row = (ci * KERNEL_TAPS + kd * 9 + kh * 3 + kw) * out_len;
                    let src = &cols[row..row + out_len];
                    for z in 0..od {
                        let Some(sz) = g.source(z, kd, 0) else { continue };
                        for y in 0..oh {
                            let Some(sy) = g.source(y, kh, 1) else { continue };
                            let crow = &src[(z * oh + y) * ow..(z * oh + y + 1) * ow];
                            let prow = &mut plane[(sz * ih + sy) * iw..(sz * ih + sy + 1) * iw];
                            if g.stride == 1 {
                                match kw {
                                    0 => {
                                        for (p, &c) in prow[..iw - 1].iter_mut().zip(&crow[1..]) {
                                            *p += c;
                                        }
                                    }
                                    1 => {
                                        for (p, &c) in prow.iter_mut().zip(crow) {
                                            *p += c;
                                        }
                                    }
                                    _ => {
                                        for (p, &c) in prow[1..].iter_mut().zip(&crow[..ow - 1]) {
                                            *p += c;
                                        }
                                    }
                                }
                            } else {
                                for (x, &c) in crow.iter().enumerate() {
                                    if let Some(sx) = g.source(x, kw, 2) {
                                        prow[sx] += c;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn check_input<T: Scalar>(op: &'static str, x: &Tensor5<T>, p: &ConvParams<T>) -> Result<()> {
    p.validate(op)?;
    let s = x.shape();
    if s.c != p.c_in {
        return Err(TensorError::shape(op, format!("{} input channels", p.c_in), s));
    }
    if s.d == 0 || s.h == 0 || s.w == 0 {
        return Err(TensorError::shape(op, "non-empty spatial dims", s));
    }
    Ok(())
}

/// Same-padded stride-1 convolution.
pub fn conv3d<T: Scalar>(x: &Tensor5<T>, p: &ConvParams<T>) -> Result<Tensor5<T>> {
    conv3d_strided(x, p, 1)
}

/// Gradients of `sum(grad_out * conv3d(x, p))` with respect to `x` and `p`.
pub fn conv3d_backward<T: Scalar>(
    x: &Tensor5<T>,
    p: &ConvParams<T>,
    grad_out: &Tensor5<T>,
) -> Result<(Tensor5<T>, ConvParams<T>)> {
    conv3d_strided_backward(x, p, 1, grad_out)
}

/// Strided convolution; output spatial size is `(dim - 1) / stride + 1`.
pub fn conv3d_strided<T: Scalar>(
    x: &Tensor5<T>,
    p: &ConvParams<T>,
    stride: usize,
) -> Result<Tensor5<T>> {
    check_input("conv3d", x, p)?;
    let s = x.shape();
    let g = Geometry::new(s.d, s.h, s.w, stride);
    let [od, oh, ow] = g.output;
    let out_shape = Shape5::new(s.n, p.c_out, od, oh, ow);
    let mut out = Tensor5::zeros(out_shape);
    let k = p.c_in * KERNEL_TAPS;
    let out_len = g.out_len();
    let in_sample = s.sample_len();
    if out_shape.is_empty() {
        return Ok(out);
    }
    out.data_mut()
        .par_chunks_mut(out_shape.sample_len())
        .enumerate()
        .for_each(|(n, y)| {
            let mut cols = vec![T::ZERO; k * out_len];
            im2col(&x.data()[n * in_sample..(n + 1) * in_sample], p.c_in, &g, &mut cols);
            for (row, &b) in y.chunks_mut(out_len).zip(&p.bias) {
                row.fill(b);
            }
            T::gemm(
                p.c_out, k, out_len, T::ONE, &p.weight, k as isize, 1, &cols, out_len as isize,
                1, T::ONE, y, out_len as isize, 1,
            );
        });
    Ok(out)
}

pub fn conv3d_strided_backward<T: Scalar>(
    x: &Tensor5<T>,
    p: &ConvParams<T>,
    stride: usize,
    grad_out: &Tensor5<T>,
) -> Result<(Tensor5<T>, ConvParams<T>)> {
    check_input("conv3d_backward", x, p)?;
    let s = x.shape();
    let g = Geometry::new(s.d, s.h, s.w, stride);
    let [od, oh, ow] = g.output;
    let out_shape = Shape5::new(s.n, p.c_out, od, oh, ow);
    if grad_out.shape() != out_shape {
        return Err(TensorError::shape("conv3d_backward", out_shape, grad_out.shape()));
    }
    let k = p.c_in * KERNEL_TAPS;
    let out_len = g.out_len();
    let in_sample = s.sample_len();
    let out_sample = out_shape.sample_len();
    let mut grad_x = Tensor5::zeros(s);
    if s.is_empty() {
        return Ok((grad_x, ConvParams::zeros(p.c_in, p.c_out)));
    }

    let partials: Vec<ConvParams<T>> = grad_x
        .data_mut()
        .par_chunks_mut(in_sample * GRAD_CHUNK)
        .enumerate()
        .map(|(chunk, gx_chunk)| {
            let mut acc = ConvParams::zeros(p.c_in, p.c_out);
            let mut cols = vec![T::ZERO; k * out_len];
            for (j, gx) in gx_chunk.chunks_mut(in_sample).enumerate() {
                let n = chunk * GRAD_CHUNK + j;
                let xs = &x.data()[n * in_sample..(n + 1) * in_sample];
                let gy = &grad_out.data()[n * out_sample..(n + 1) * out_sample];
                im2col(xs, p.c_in, &g, &mut cols);
                // dW += gy @ cols^T
                T::gemm(
                    p.c_out, out_len, k, T::ONE, gy, out_len as isize, 1, &cols, 1,
                    out_len as isize, T::ONE, &mut acc.weight, k as isize, 1,
                );
                for (b, row) in acc.bias.iter_mut().zip(gy.chunks(out_len)) {
                    *b += row.iter().copied().sum::<T>();
                }
                // dcols = W^T @ gy
                T::gemm(
                    k, p.c_out, out_len, T::ONE, &p.weight, 1, k as isize, gy, out_len as isize,
                    1, T::ZERO, &mut cols, out_len as isize, 1,
                );
                col2im(&cols, p.c_in, &g, gx);
            }
            acc
        })
        .collect();

    let mut grad_p = ConvParams::zeros(p.c_in, p.c_out);
    for part in &partials {
        grad_p.add_assign(part);
    }
    Ok((grad_x, grad_p))
}

/// Stride-2 transposed convolution doubling each spatial dim; the adjoint
/// of a stride-2 [`conv3d_strided`] plus a bias.
pub fn conv_transpose3d<T: Scalar>(x: &Tensor5<T>, p: &ConvParams<T>) -> Result<Tensor5<T>> {
    check_input("conv_transpose3d", x, p)?;
    let s = x.shape();
    let g = Geometry::new(2 * s.d, 2 * s.h, 2 * s.w, 2);
    let out_shape = Shape5::new(s.n, p.c_out, 2 * s.d, 2 * s.h, 2 * s.w);
    let mut out = Tensor5::zeros(out_shape);
    let k = p.c_out * KERNEL_TAPS;
    let small = g.out_len();
    let big = g.in_len();
    let in_sample = s.sample_len();
    out.data_mut()
        .par_chunks_mut(out_shape.sample_len())
        .enumerate()
        .for_each(|(n, y)| {
            let mut cols = vec![T::ZERO; k * small];
            let xs = &x.data()[n * in_sample..(n + 1) * in_sample];
            // cols = W^T @ x, W viewed as (c_in, c_out*27)
            T::gemm(
                k, p.c_in, small, T::ONE, &p.weight, 1, k as isize, xs, small as isize, 1,
                T::ZERO, &mut cols, small as isize, 1,
            );
            col2im(&cols, p.c_out, &g, y);
            for (row, &b) in y.chunks_mut(big).zip(&p.bias) {
                for v in row {
                    *v += b;
                }
            }
        });
    Ok(out)
}

pub fn conv_transpose3d_backward<T: Scalar>(
    x: &Tensor5<T>,
    p: &ConvParams<T>,
    grad_out: &Tensor5<T>,
) -> Result<(Tensor5<T>, ConvParams<T>)> {
    check_input("conv_transpose3d_backward", x, p)?;
    let s = x.shape();
    let g = Geometry::new(2 * s.d, 2 * s.h, 2 * s.w, 2);
    let out_shape = Shape5::new(s.n, p.c_out, 2 * s.d, 2 * s.h, 2 * s.w);
    if grad_out.shape() != out_shape {
        return Err(TensorError::shape(
            "conv_transpose3d_backward",
            out_shape,
            grad_out.shape(),
        ));
    }
    let k = p.c_out * KERNEL_TAPS;
    let small = g.out_len();
    let big = g.in_len();
    let in_sample = s.sample_len();
    let out_sample = out_shape.sample_len();
    let mut grad_x = Tensor5::zeros(s);

    let partials: Vec<ConvParams<T>> = grad_x
        .data_mut()
        .par_chunks_mut(in_sample * GRAD_CHUNK)
        .enumerate()
        .map(|(chunk, gx_chunk)| {
            let mut acc = ConvParams::zeros(p.c_in, p.c_out);
            let mut cols = vec![T::ZERO; k * small];
            for (j, gx) in gx_chunk.chunks_mut(in_sample).enumerate() {
                let n = chunk * GRAD_CHUNK + j;
                let xs = &x.data()[n * in_sample..(n + 1) * in_sample];
                let gy = &grad_out.data()[n * out_sample..(n + 1) * out_sample];
                im2col(gy, p.c_out, &g, &mut cols);
                // dx = W @ cols
                T::gemm(
                    p.c_in, k, small, T::ONE, &p.weight, k as isize, 1, &cols, small as isize, 1,
                    T::ZERO, gx, small as isize, 1,
                );
                // dW += x @ cols^T
                T::gemm(
                    p.c_in, small, k, T::ONE, xs, small as isize, 1, &cols, 1, small as isize,
                    T::ONE, &mut acc.weight, k as isize, 1,
                );
                for (b, row) in acc.bias.iter_mut().zip(gy.chunks(big)) {
                    *b += row.iter().copied().sum::<T>();
                }
            }
            acc
        })
        .collect();

    let mut grad_p = ConvParams::zeros(p.c_in, p.c_out);
    for part in &partials {
        grad_p.add_assign(part);
    }
    Ok((grad_x, grad_p))
}
