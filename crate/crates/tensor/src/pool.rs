use crate::{Result, Scalar, Shape5, Tensor5, TensorError};

/// Winning input index (flat, into the pooled tensor) for every output element.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolIndices {
    input_shape: Shape5,
    argmax: Vec<usize>,
}

impl PoolIndices {
    pub fn input_shape(&self) -> Shape5 {
        self.input_shape
    }

    pub fn argmax(&self) -> &[usize] {
        &self.argmax
    }
}

/// Non-overlapping 2x2x2 max pooling. Ties go to the first element in scan
/// order (d, then h, then w).
pub fn maxpool3d<T: Scalar>(x: &Tensor5<T>) -> Result<(Tensor5<T>, PoolIndices)> {
    let s = x.shape();
    if s.d % 2 != 0 || s.h % 2 != 0 || s.w % 2 != 0 {
        return Err(TensorError::OddSpatialDim {
            op: "maxpool3d",
            shape: s,
        });
    }
    let out_shape = Shape5::new(s.n, s.c, s.d / 2, s.h / 2, s.w / 2);
    let mut out = Vec::with_capacity(out_shape.len());
    let mut argmax = Vec::with_capacity(out_shape.len());
    let data = x.data();
    for nc in 0..s.n * s.c {
        let base = nc * s.spatial();
        for z in 0..out_shape.d {
            for y in 0..out_shape.h {
                for xo in 0..out_shape.w {
                    let mut best_i = base + ((2 * z) * s.h + 2 * y) * s.w + 2 * xo;
                    let mut best = data[best_i];
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let i = base + ((2 * z + dz) * s.h + 2 * y + dy) * s.w + 2 * xo + dx;
                                if data[i] > best {
                                    best = data[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_i);
                }
            }
        }
    }
    Ok((
        Tensor5::from_vec(out_shape, out)?,
        PoolIndices {
            input_shape: s,
            argmax,
        },
    ))
}

pub fn maxpool3d_backward<T: Scalar>(
    indices: &PoolIndices,
    grad_out: &Tensor5<T>,
) -> Result<Tensor5<T>> {
    if grad_out.len() != indices.argmax.len() {
        return Err(TensorError::shape(
            "maxpool3d_backward",
            indices.argmax.len(),
            grad_out.len(),
        ));
    }
    let mut grad = Tensor5::zeros(indices.input_shape);
    let g = grad.data_mut();
    for (&i, &v) in indices.argmax.iter().zip(grad_out.data()) {
        g[i] += v;
    }
    Ok(grad)
}

/// Nearest-neighbour x2 upsampling along every spatial axis.
pub fn upsample3<T: Scalar>(x: &Tensor5<T>) -> Tensor5<T> {
    let s = x.shape();
    let out_shape = Shape5::new(s.n, s.c, 2 * s.d, 2 * s.h, 2 * s.w);
    let mut out = Vec::with_capacity(out_shape.len());
    let data = x.data();
    for nc in 0..s.n * s.c {
        let base = nc * s.spatial();
        for z in 0..out_shape.d {
            for y in 0..out_shape.h {
                let row = &data[base + ((z / 2) * s.h + y / 2) * s.w..][..s.w];
                for &v in row {
                    out.push(v);
                    out.push(v);
                }
            }
        }
    }
    Tensor5::from_vec(out_shape, out).expect("upsample shape")
}

/// Sums each 2x2x2 block of `grad_out` back onto its source voxel.
pub fn upsample3_backward<T: Scalar>(grad_out: &Tensor5<T>) -> Result<Tensor5<T>> {
    let s = grad_out.shape();
    if s.d % 2 != 0 || s.h % 2 != 0 || s.w % 2 != 0 {
        return Err(TensorError::OddSpatialDim {
            op: "upsample3_backward",
            shape: s,
        });
    }
    let in_shape = Shape5::new(s.n, s.c, s.d / 2, s.h / 2, s.w / 2);
    let mut grad = Tensor5::zeros(in_shape);
    let g = grad.data_mut();
    let data = grad_out.data();
    for nc in 0..s.n * s.c {
        let src = nc * s.spatial();
        let dst = nc * in_shape.spatial();
        for z in 0..s.d {
            for y in 0..s.h {
                let row = &data[src + (z * s.h + y) * s.w..][..s.w];
                let out_row = dst + ((z / 2) * in_shape.h + y / 2) * in_shape.w;
                for (x, &v) in row.iter().enumerate() {
                    g[out_row + x / 2] += v;
                }
            }
        }
    }
    Ok(grad)
}

/// Concatenates along the channel axis: `[a channels | b channels]`.
pub fn concat_channels<T: Scalar>(a: &Tensor5<T>, b: &Tensor5<T>) -> Result<Tensor5<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.n != sb.n || !sa.same_spatial(&sb) {
        return Err(TensorError::shape("concat_channels", sa, sb));
    }
    let out_shape = sa.with_channels(sa.c + sb.c);
    let mut out = Vec::with_capacity(out_shape.len());
    for n in 0..sa.n {
        out.extend_from_slice(a.sample(n));
        out.extend_from_slice(b.sample(n));
    }
    Tensor5::from_vec(out_shape, out)
}

/// Inverse of [`concat_channels`]: splits off the first `c_a` channels.
pub fn split_channels<T: Scalar>(x: &Tensor5<T>, c_a: usize) -> Result<(Tensor5<T>, Tensor5<T>)> {
    let s = x.shape();
    if c_a > s.c {
        return Err(TensorError::shape(
            "split_channels",
            format!("at most {} channels", s.c),
            c_a,
        ));
    }
    let sa = s.with_channels(c_a);
    let sb = s.with_channels(s.c - c_a);
    let mut a = Vec::with_capacity(sa.len());
    let mut b = Vec::with_capacity(sb.len());
    for n in 0..s.n {
        let (left, right) = x.sample(n).split_at(sa.sample_len());
        a.extend_from_slice(left);
        b.extend_from_slice(right);
    }
    Ok((Tensor5::from_vec(sa, a)?, Tensor5::from_vec(sb, b)?))
}
