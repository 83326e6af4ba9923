//! 2-D convolution (NHWC) via im2col + GEMM, plus the strided 1x1 fast path
//! used by adapters.
//!
//! Index convention for an `[L, L, C_in, C_out]` filter bank applied with
//! stride `s` and symmetric zero padding `p`:
//!
//! ```text
//! y[n, i, j, d] = sum_{v,u,c} f[v, u, c, d] * x[n, i*s + v - p, j*s + u - p, c]
//! ```
//!
//! with out-of-range input taps reading as zero. Output extent is
//! `floor((H + 2p - L)/s) + 1` per spatial axis.
//!
//! Backward is the exact adjoint of that linear map: the filter gradient is
//! `patchesᵀ · dY` and the input gradient scatters `dY · filterᵀ` back
//! through the patch extraction (`col2im`).

use crate::error::{MdError, Result};
use crate::ops::matmul::{matmul, matmul_a_bt, matmul_at_b};
use crate::tensor::{FilterBank, Scalar, Tensor};

/// Output spatial extent `floor((size + 2*pad - l)/stride) + 1`, or an error
/// when the kernel does not fit even once.
pub fn conv_out_dim(size: usize, l: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(MdError::Config("convolution stride must be >= 1".into()));
    }
    let padded = size + 2 * pad;
    if padded < l {
        return Err(MdError::shape(
            "conv2d",
            format!("kernel {l} exceeds padded input extent {padded}"),
        ));
    }
    Ok((padded - l) / stride + 1)
}

/// Extracts convolution patches: one row per output pixel (n-major, then
/// i, then j), each row laid out `(v, u, c)` to match the filter layout.
/// Returns `(buffer, rows, patch_len)`.
pub fn im2col<S: Scalar>(
    x: &Tensor<S>,
    l: usize,
    stride: usize,
    pad: usize,
) -> Result<(Vec<S>, usize, usize)> {
    if x.rank() != 4 {
        return Err(MdError::shape(
            "im2col",
            format!("expected NHWC input, got {:?}", x.dims()),
        ));
    }
    let (nb, h, w, c) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let h_out = conv_out_dim(h, l, stride, pad)?;
    let w_out = conv_out_dim(w, l, stride, pad)?;
    let patch = l * l * c;
    let rows = nb * h_out * w_out;
    let mut cols = vec![S::ZERO; rows * patch];
    let xd = x.data();
    let mut row = 0usize;
    for n in 0..nb {
        for oi in 0..h_out {
            for oj in 0..w_out {
                let base = row * patch;
                row += 1;
                for v in 0..l {
                    let si = (oi * stride + v) as isize - pad as isize;
                    if si < 0 || si >= h as isize {
                        continue; // padded region: row stays zero
                    }
                    for u in 0..l {
                        let sj = (oj * stride + u) as isize - pad as isize;
                        if sj < 0 || sj >= w as isize {
                            continue;
                        }
                        let src = ((n * h + si as usize) * w + sj as usize) * c;
                        let dst = base + (v * l + u) * c;
                        cols[dst..dst + c].copy_from_slice(&xd[src..src + c]);
                    }
                }
            }
        }
    }
    Ok((cols, rows, patch))
}

/// Adjoint of [`im2col`]: scatter-adds patch rows back into input layout.
fn col2im<S: Scalar>(
    cols: &[S],
    x_dims: &[usize],
    l: usize,
    stride: usize,
    pad: usize,
) -> Result<Tensor<S>> {
    let (nb, h, w, c) = (x_dims[0], x_dims[1], x_dims[2], x_dims[3]);
    let h_out = conv_out_dim(h, l, stride, pad)?;
    let w_out = conv_out_dim(w, l, stride, pad)?;
    let patch = l * l * c;
    let mut dx = Tensor::zeros(x_dims);
    let out = dx.data_mut();
    let mut row = 0usize;
    for n in 0..nb {
        for oi in 0..h_out {
            for oj in 0..w_out {
                let base = row * patch;
                row += 1;
                for v in 0..l {
                    let si = (oi * stride + v) as isize - pad as isize;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    for u in 0..l {
                        let sj = (oj * stride + u) as isize - pad as isize;
                        if sj < 0 || sj >= w as isize {
                            continue;
                        }
                        let dst = ((n * h + si as usize) * w + sj as usize) * c;
                        let src = base + (v * l + u) * c;
                        for k in 0..c {
                            out[dst + k] += cols[src + k];
                        }
                    }
                }
            }
        }
    }
    Ok(dx)
}

fn check_channels<S: Scalar>(x: &Tensor<S>, f: &FilterBank<S>, op: &'static str) -> Result<()> {
    if x.rank() != 4 {
        return Err(MdError::shape(op, format!("expected NHWC input, got {:?}", x.dims())));
    }
    if x.dim(3) != f.c_in() {
        return Err(MdError::shape(
            op,
            format!("input channels {} != filter channels {}", x.dim(3), f.c_in()),
        ));
    }
    Ok(())
}

/// Forward convolution; `x` is NHWC, `f` is `[L, L, C_in, C_out]`.
pub fn conv2d<S: Scalar>(
    x: &Tensor<S>,
    f: &FilterBank<S>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<S>> {
    check_channels(x, f, "conv2d")?;
    let (nb, h, w) = (x.dim(0), x.dim(1), x.dim(2));
    let l = f.l();
    let h_out = conv_out_dim(h, l, stride, pad)?;
    let w_out = conv_out_dim(w, l, stride, pad)?;
    let (cols, rows, patch) = im2col(x, l, stride, pad)?;
    let y = matmul(&cols, f.tensor().data(), rows, patch, f.c_out());
    Tensor::new(&[nb, h_out, w_out, f.c_out()], y)
}

/// Gradients of [`conv2d`] w.r.t. both input and filter.
///
/// Patches are recomputed here rather than cached by the forward pass:
/// the im2col buffer is the largest allocation in the whole pipeline and
/// recomputing it costs far less than a GEMM.
pub fn conv2d_backward<S: Scalar>(
    x: &Tensor<S>,
    f: &FilterBank<S>,
    stride: usize,
    pad: usize,
    dy: &Tensor<S>,
) -> Result<(Tensor<S>, FilterBank<S>)> {
    let df = conv2d_backward_filter(x, f.l(), f.c_out(), stride, pad, dy)?;
    let dx = conv2d_backward_input(x.dims(), f, stride, pad, dy)?;
    Ok((dx, df))
}

/// Input gradient only (used when the filter is frozen).
pub fn conv2d_backward_input<S: Scalar>(
    x_dims: &[usize],
    f: &FilterBank<S>,
    stride: usize,
    pad: usize,
    dy: &Tensor<S>,
) -> Result<Tensor<S>> {
    expect_dy_shape(x_dims, f.l(), f.c_out(), stride, pad, dy, "conv2d_backward_input")?;
    let rows = dy.dim(0) * dy.dim(1) * dy.dim(2);
    let patch = f.l() * f.l() * f.c_in();
    // dCols (rows x patch) = dY (rows x C_out) · Fᵀ (C_out x patch)
    let dcols = matmul_a_bt(dy.data(), f.tensor().data(), rows, f.c_out(), patch);
    col2im(&dcols, x_dims, f.l(), stride, pad)
}

/// Filter gradient only.
pub fn conv2d_backward_filter<S: Scalar>(
    x: &Tensor<S>,
    l: usize,
    c_out: usize,
    stride: usize,
    pad: usize,
    dy: &Tensor<S>,
) -> Result<FilterBank<S>> {
    expect_dy_shape(x.dims(), l, c_out, stride, pad, dy, "conv2d_backward_filter")?;
    let (cols, rows, patch) = im2col(x, l, stride, pad)?;
    // dF (patch x C_out) = Colsᵀ · dY
    let df = matmul_at_b(&cols, dy.data(), rows, patch, c_out);
    FilterBank::new(Tensor::new(&[l, l, x.dim(3), c_out], df)?)
}

fn expect_dy_shape<S: Scalar>(
    x_dims: &[usize],
    l: usize,
    c_out: usize,
    stride: usize,
    pad: usize,
    dy: &Tensor<S>,
    op: &'static str,
) -> Result<()> {
    let h_out = conv_out_dim(x_dims[1], l, stride, pad)?;
    let w_out = conv_out_dim(x_dims[2], l, stride, pad)?;
    let want = [x_dims[0], h_out, w_out, c_out];
    if dy.dims() != want {
        return Err(MdError::shape(
            op,
            format!("cotangent dims {:?}, expected {:?}", dy.dims(), want),
        ));
    }
    Ok(())
}

/// Pointwise (1x1) convolution with stride: `y[n,i,j,d] = Σ_c a[c,d] ·
/// x[n, i*s, j*s, c]`, no padding. With stride 1 this is a single GEMM over
/// all pixels; with stride `s` the sampled pixels are gathered first.
pub fn conv1x1<S: Scalar>(x: &Tensor<S>, a: &Tensor<S>, stride: usize) -> Result<Tensor<S>> {
    check_1x1(x, a, "conv1x1")?;
    let (nb, h, w, c) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let c_out = a.dim(1);
    if stride == 1 {
        let rows = nb * h * w;
        let y = matmul(x.data(), a.data(), rows, c, c_out);
        return Tensor::new(&[nb, h, w, c_out], y);
    }
    let h_out = conv_out_dim(h, 1, stride, 0)?;
    let w_out = conv_out_dim(w, 1, stride, 0)?;
    let gathered = gather_strided(x, stride, h_out, w_out);
    let y = matmul(&gathered, a.data(), nb * h_out * w_out, c, c_out);
    Tensor::new(&[nb, h_out, w_out, c_out], y)
}

/// Gradients of [`conv1x1`] w.r.t. input and matrix.
pub fn conv1x1_backward<S: Scalar>(
    x: &Tensor<S>,
    a: &Tensor<S>,
    stride: usize,
    dy: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    check_1x1(x, a, "conv1x1_backward")?;
    let (nb, h, w, c) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let c_out = a.dim(1);
    let h_out = conv_out_dim(h, 1, stride, 0)?;
    let w_out = conv_out_dim(w, 1, stride, 0)?;
    let want = [nb, h_out, w_out, c_out];
    if dy.dims() != want {
        return Err(MdError::shape(
            "conv1x1_backward",
            format!("cotangent dims {:?}, expected {:?}", dy.dims(), want),
        ));
    }
    let rows = nb * h_out * w_out;
    if stride == 1 {
        let da_flat = matmul_at_b(x.data(), dy.data(), rows, c, c_out);
        let dx_flat = matmul_a_bt(dy.data(), a.data(), rows, c_out, c);
        let da = Tensor::new(&[c, c_out], da_flat)?;
        let dx = Tensor::new(x.dims(), dx_flat)?;
        return Ok((dx, da));
    }
    let gathered = gather_strided(x, stride, h_out, w_out);
    let da_flat = matmul_at_b(&gathered, dy.data(), rows, c, c_out);
    let dxg = matmul_a_bt(dy.data(), a.data(), rows, c_out, c);
    // scatter gathered-pixel gradients back; skipped pixels get zero
    let mut dx = Tensor::zeros(x.dims());
    let out = dx.data_mut();
    let mut row = 0usize;
    for n in 0..nb {
        for oi in 0..h_out {
            for oj in 0..w_out {
                let dst = ((n * h + oi * stride) * w + oj * stride) * c;
                out[dst..dst + c].copy_from_slice(&dxg[row * c..(row + 1) * c]);
                row += 1;
            }
        }
    }
    Ok((dx, Tensor::new(&[c, c_out], da_flat)?))
}

fn gather_strided<S: Scalar>(x: &Tensor<S>, stride: usize, h_out: usize, w_out: usize) -> Vec<S> {
    let (nb, h, w, c) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let xd = x.data();
    let mut g = Vec::with_capacity(nb * h_out * w_out * c);
    for n in 0..nb {
        for oi in 0..h_out {
            for oj in 0..w_out {
                let src = ((n * h + oi * stride) * w + oj * stride) * c;
                g.extend_from_slice(&xd[src..src + c]);
            }
        }
    }
    g
}

fn check_1x1<S: Scalar>(x: &Tensor<S>, a: &Tensor<S>, op: &'static str) -> Result<()> {
    if x.rank() != 4 {
        return Err(MdError::shape(op, format!("expected NHWC input, got {:?}", x.dims())));
    }
    if a.rank() != 2 {
        return Err(MdError::shape(op, format!("expected rank-2 matrix, got {:?}", a.dims())));
    }
    if x.dim(3) != a.dim(0) {
        return Err(MdError::shape(
            op,
            format!("input channels {} != matrix rows {}", x.dim(3), a.dim(0)),
        ));
    }
    Ok(())
}
