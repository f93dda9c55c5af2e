//! Dense kernels with hand-written backward passes.
//!
//! All tensors are `C × H × W` in standard (row-major) layout. Convolutions go
//! through im2col + GEMM; the column matrix is kept in the cache for the
//! weight gradient.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, ArrayViewMut1, ArrayViewMut2, Axis, Zip};

/// Spatial output size of a `k`-wide window with `stride` and symmetric `pad`.
pub fn conv_out_size(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Unfolds `x` into a `(C·k·k) × (Ho·Wo)` matrix; row index is `(c·k + ky)·k + kx`.
pub fn im2col(x: ArrayView3<'_, f64>, k: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let ho = conv_out_size(h, k, stride, pad);
    let wo = conv_out_size(w, k, stride, pad);
    let mut cols = Array2::<f64>::zeros((c * k * k, ho * wo));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let mut dst = cols.row_mut(row);
                let dst = dst.as_slice_mut().expect("standard layout");
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * wo + ox] = x[[ci, iy as usize, ix as usize]];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters columns back onto a `C × H × W` tensor.
pub fn col2im(cols: ArrayView2<'_, f64>, dims: (usize, usize, usize), k: usize, stride: usize, pad: usize) -> Array3<f64> {
    let (c, h, w) = dims;
    let ho = conv_out_size(h, k, stride, pad);
    let wo = conv_out_size(w, k, stride, pad);
    let mut x = Array3::<f64>::zeros(dims);
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let src = cols.row((ci * k + ky) * k + kx);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            x[[ci, iy as usize, ix as usize]] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Geometry of one convolution call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Saved state for [`conv_backward`].
#[derive(Debug, Clone)]
pub struct ConvCache {
    cols: Array2<f64>,
    in_dims: (usize, usize, usize),
    out_hw: (usize, usize),
}

/// `y = W · im2col(x) + b`, with `weights` as an `out × (C·k·k)` matrix.
pub fn conv_forward(
    x: ArrayView3<'_, f64>,
    weights: ArrayView2<'_, f64>,
    bias: &[f64],
    geo: ConvGeometry,
) -> (Array3<f64>, ConvCache) {
    let (c, h, w) = x.dim();
    assert_eq!(
        weights.ncols(),
        c * geo.kernel * geo.kernel,
        "weight matrix does not match {c} input channels"
    );
    let ho = conv_out_size(h, geo.kernel, geo.stride, geo.pad);
    let wo = conv_out_size(w, geo.kernel, geo.stride, geo.pad);
    let cols = im2col(x, geo.kernel, geo.stride, geo.pad);
    let mut out = Array2::<f64>::zeros((weights.nrows(), ho * wo));
    for (mut row, b) in out.outer_iter_mut().zip(bias) {
        row.fill(*b);
    }
    general_mat_mul(1.0, &weights, &cols, 1.0, &mut out);
    let out = out.into_shape_with_order((weights.nrows(), ho, wo)).expect("contiguous");
    (
        out,
        ConvCache {
            cols,
            in_dims: (c, h, w),
            out_hw: (ho, wo),
        },
    )
}

/// Accumulates weight and bias gradients; returns the input gradient when
/// `need_input_grad` is set.
pub fn conv_backward(
    cache: &ConvCache,
    weights: ArrayView2<'_, f64>,
    dout: ArrayView3<'_, f64>,
    mut dweights: ArrayViewMut2<'_, f64>,
    mut dbias: ArrayViewMut1<'_, f64>,
    geo: ConvGeometry,
    need_input_grad: bool,
) -> Option<Array3<f64>> {
    let (ho, wo) = cache.out_hw;
    let dout = dout.to_shape((dout.dim().0, ho * wo)).expect("output shape");
    general_mat_mul(1.0, &dout, &cache.cols.t(), 1.0, &mut dweights);
    Zip::from(&mut dbias).and(dout.rows()).for_each(|db, row| *db += row.sum());
    if !need_input_grad {
        return None;
    }
    let dcols = weights.t().dot(&dout);
    Some(col2im(dcols.view(), cache.in_dims, geo.kernel, geo.stride, geo.pad))
}

pub fn relu_inplace(x: &mut Array3<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Zeroes `grad` wherever the ReLU output was not positive.
pub fn relu_backward_inplace(grad: &mut Array3<f64>, output: &Array3<f64>) {
    Zip::from(grad).and(output).for_each(|g, &o| {
        if o <= 0.0 {
            *g = 0.0;
        }
    });
}

pub fn upsample_nearest(x: ArrayView3<'_, f64>, factor: usize) -> Array3<f64> {
    if factor == 1 {
        return x.to_owned();
    }
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, h * factor, w * factor), |(ci, y, xx)| x[[ci, y / factor, xx / factor]])
}

/// Adjoint of [`upsample_nearest`]: sums each `factor × factor` block.
pub fn upsample_nearest_backward(grad: ArrayView3<'_, f64>, factor: usize) -> Array3<f64> {
    if factor == 1 {
        return grad.to_owned();
    }
    let (c, h, w) = grad.dim();
    let mut out = Array3::<f64>::zeros((c, h / factor, w / factor));
    for ((ci, y, x), g) in grad.indexed_iter() {
        out[[ci, y / factor, x / factor]] += g;
    }
    out
}

/// Concatenates along channels.
pub fn concat_channels(a: ArrayView3<'_, f64>, b: ArrayView3<'_, f64>) -> Array3<f64> {
    ndarray::concatenate(Axis(0), &[a, b]).expect("spatial dims agree")
}

/// Splits a channel-concatenated gradient at channel `at`.
pub fn split_channels(x: ArrayView3<'_, f64>, at: usize) -> (Array3<f64>, Array3<f64>) {
    (x.slice(s![..at, .., ..]).to_owned(), x.slice(s![at.., .., ..]).to_owned())
}

/// `k × k` box mean with zero padding; the divisor is always `k²`.
pub fn box_mean(x: ArrayView3<'_, f64>, k: usize) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let r = (k / 2) as isize;
    let norm = 1.0 / (k * k) as f64;
    Array3::from_shape_fn((c, h, w), |(ci, y, xx)| {
        let mut acc = 0.0;
        for dy in -r..=r {
            for dx in -r..=r {
                let (yy, xq) = (y as isize + dy, xx as isize + dx);
                if yy >= 0 && yy < h as isize && xq >= 0 && xq < w as isize {
                    acc += x[[ci, yy as usize, xq as usize]];
                }
            }
        }
        acc * norm
    })
}

/// The symmetric zero-padded box filter is self-adjoint.
pub fn box_mean_backward(grad: ArrayView3<'_, f64>, k: usize) -> Array3<f64> {
    box_mean(grad, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random3(rng: &mut ChaCha8Rng, d: (usize, usize, usize)) -> Array3<f64> {
        Array3::from_shape_fn(d, |_| rng.random_range(-1.0..1.0))
    }

    /// Straight nested-loop convolution.
    fn naive_conv(x: &Array3<f64>, w: &Array4<f64>, b: &[f64], stride: usize, pad: usize) -> Array3<f64> {
        let (c, h, wd) = x.dim();
        let (o, _, k, _) = w.dim();
        let ho = conv_out_size(h, k, stride, pad);
        let wo = conv_out_size(wd, k, stride, pad);
        Array3::from_shape_fn((o, ho, wo), |(oc, oy, ox)| {
            let mut acc = b[oc];
            for ci in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy >= 0 && iy < h as isize && ix >= 0 && ix < wd as isize {
                            acc += w[[oc, ci, ky, kx]] * x[[ci, iy as usize, ix as usize]];
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn gemm_conv_matches_nested_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(k, stride) in &[(1, 1), (3, 1), (3, 2), (5, 1)] {
            let pad = k / 2;
            let x = random3(&mut rng, (4, 8, 10));
            let w = Array4::from_shape_fn((5, 4, k, k), |_| rng.random_range(-1.0..1.0));
            let b: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let wm = w.view().into_shape_with_order((5, 4 * k * k)).unwrap();
            let (y, _) = conv_forward(x.view(), wm, &b, ConvGeometry { kernel: k, stride, pad });
            let oracle = naive_conv(&x, &w, &b, stride, pad);
            let err = (&y - &oracle).mapv(f64::abs).fold(0.0f64, |a, &v| a.max(v));
            assert!(err < 1e-12, "k={k} stride={stride}: {err}");
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random3(&mut rng, (3, 7, 6));
        let cols = im2col(x.view(), 3, 2, 1);
        let c = Array2::from_shape_fn(cols.dim(), |_| rng.random_range(-1.0..1.0));
        let lhs = (&cols * &c).sum();
        let rhs = (&x * &col2im(c.view(), x.dim(), 3, 2, 1)).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random3(&mut rng, (2, 3, 4));
        let g = random3(&mut rng, (2, 6, 8));
        let lhs = (&upsample_nearest(x.view(), 2) * &g).sum();
        let rhs = (&x * &upsample_nearest_backward(g.view(), 2)).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn box_mean_counts_padded_zeros() {
        let x = Array3::from_elem((1, 3, 3), 1.0);
        let y = box_mean(x.view(), 3);
        assert!((y[[0, 1, 1]] - 1.0).abs() < 1e-15);
        assert!((y[[0, 0, 0]] - 4.0 / 9.0).abs() < 1e-15);
        assert!((y[[0, 0, 1]] - 6.0 / 9.0).abs() < 1e-15);
    }
}
