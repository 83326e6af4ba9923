//! Residual adapters: small per-domain 1x1 convolutions attached to the
//! shared (universal) convolutions, plus the fusion algebra that collapses
//! an adapter into its host filter bank for deployment.
//!
//! Two attachment topologies:
//!
//! - **series**: the adapter transforms the host conv's *output* and is
//!   added back through a skip: `y = z + conv1x1(z, alpha)` with
//!   `z = conv(x, f)`. `alpha` is `C_out x C_out`. Algebraically
//!   `y = conv(x, f · (I + alpha))`, so fusion multiplies the filter bank
//!   by `I + alpha` along its output-channel axis.
//! - **parallel**: the adapter reads the host conv's *input* through a
//!   strided 1x1 path: `y = conv(x, f) + conv1x1(x, alpha, stride)`.
//!   `alpha` is `C_in x C_out`. Since a 1x1 kernel is an L x L kernel that
//!   is zero everywhere but the center tap, fusion adds `alpha` into the
//!   center tap of `f`.
//!
//! Either way `alpha = 0` makes the adapter vanish *exactly* — the adapted
//! network computes bit-for-bit the base network — and weight decay on
//! `alpha` therefore shrinks the adapted model toward the base model, not
//! toward a degenerate one.

use crate::error::{MdError, Result};
use crate::ops::conv::{conv1x1, conv1x1_backward, conv2d};
use crate::ops::matmul::matmul;
use crate::tensor::{FilterBank, Scalar, Tensor};

/// Adapter parameters: a dense `rows x cols` matrix.
///
/// For a parallel adapter `rows = C_in`, `cols = C_out` of the host conv;
/// for a series adapter both equal the host's `C_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterMatrix<S> {
    t: Tensor<S>,
}

impl<S: Scalar> AdapterMatrix<S> {
    pub fn new(t: Tensor<S>) -> Result<Self> {
        if t.rank() != 2 {
            return Err(MdError::shape(
                "adapter_matrix",
                format!("expected rank 2, got {:?}", t.dims()),
            ));
        }
        Ok(AdapterMatrix { t })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        AdapterMatrix {
            t: Tensor::zeros(&[rows, cols]),
        }
    }

    pub fn rows(&self) -> usize {
        self.t.dim(0)
    }

    pub fn cols(&self) -> usize {
        self.t.dim(1)
    }

    pub fn tensor(&self) -> &Tensor<S> {
        &self.t
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor<S> {
        &mut self.t
    }

    pub fn into_tensor(self) -> Tensor<S> {
        self.t
    }

    pub fn param_count(&self) -> usize {
        self.t.len()
    }
}

/// Attachment topology of an adapter to its host convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Topology {
    Series,
    Parallel,
}

impl Topology {
    pub fn as_str(self) -> &'static str {
        match self {
            Topology::Series => "series",
            Topology::Parallel => "parallel",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "series" => Ok(Topology::Series),
            "parallel" => Ok(Topology::Parallel),
            other => Err(MdError::Config(format!(
                "unknown adapter topology '{other}' (expected 'series' or 'parallel')"
            ))),
        }
    }
}

/// Places a `C_in x C_out` matrix as the center tap of an otherwise-zero
/// `L x L` filter bank: `out[v,u,c,d] = a[c,d]` if `(v,u)` is the center,
/// else 0. L must be odd.
pub fn embed_diag<S: Scalar>(a: &Tensor<S>, l: usize) -> Result<FilterBank<S>> {
    if a.rank() != 2 {
        return Err(MdError::shape(
            "embed_diag",
            format!("expected rank-2 matrix, got {:?}", a.dims()),
        ));
    }
    if l % 2 == 0 {
        return Err(MdError::Config(format!(
            "embed_diag needs an odd kernel size, got {l}"
        )));
    }
    let (ci, co) = (a.dim(0), a.dim(1));
    let mut f = FilterBank::zeros(l, ci, co);
    let ctr = (l - 1) / 2;
    let base = ((ctr * l + ctr) * ci) * co;
    f.tensor_mut().data_mut()[base..base + ci * co].copy_from_slice(a.data());
    Ok(f)
}

/// Reads back the center tap of a filter bank as a `C_in x C_out` matrix
/// (left inverse of [`embed_diag`]).
pub fn extract_center<S: Scalar>(f: &FilterBank<S>) -> Tensor<S> {
    let (l, ci, co) = (f.l(), f.c_in(), f.c_out());
    let ctr = (l - 1) / 2;
    let base = ((ctr * l + ctr) * ci) * co;
    Tensor::new(&[ci, co], f.tensor().data()[base..base + ci * co].to_vec())
        .expect("center tap slice")
}

/// Series adapter applied to a host conv output `z`:
/// `y = z + conv1x1(z, alpha)`. `alpha` must be square `C x C` with
/// `C = z`'s channel count.
pub fn series_apply<S: Scalar>(z: &Tensor<S>, alpha: &AdapterMatrix<S>) -> Result<Tensor<S>> {
    if alpha.rows() != alpha.cols() {
        return Err(MdError::shape(
            "series_apply",
            format!("series adapter must be square, got {:?}", alpha.t.dims()),
        ));
    }
    let branch = conv1x1(z, alpha.tensor(), 1)?;
    z.add(&branch)
}

/// Gradients of [`series_apply`]: returns `(dz, dalpha)`.
pub fn series_apply_backward<S: Scalar>(
    z: &Tensor<S>,
    alpha: &AdapterMatrix<S>,
    dy: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let (dz_branch, dalpha) = conv1x1_backward(z, alpha.tensor(), 1, dy)?;
    let dz = dy.add(&dz_branch)?;
    Ok((dz, dalpha))
}

/// Whole series-adapted convolution (adapter BN bypassed):
/// `conv(x, f)` followed by [`series_apply`].
pub fn series_forward<S: Scalar>(
    x: &Tensor<S>,
    f: &FilterBank<S>,
    alpha: &AdapterMatrix<S>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<S>> {
    let z = conv2d(x, f, stride, pad)?;
    series_apply(&z, alpha)
}

/// Whole parallel-adapted convolution:
/// `conv(x, f, stride, pad) + conv1x1(x, alpha, stride)`.
///
/// The identity with the fused filter bank requires the host padding to
/// center the kernel ("same" padding, `pad = (L-1)/2`), which is how every
/// convolution in the network is configured; other paddings are rejected
/// rather than silently computing a misaligned sum.
pub fn parallel_forward<S: Scalar>(
    x: &Tensor<S>,
    f: &FilterBank<S>,
    alpha: &AdapterMatrix<S>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<S>> {
    if pad != (f.l() - 1) / 2 {
        return Err(MdError::Config(format!(
            "parallel adapters require centered padding (L-1)/2 = {}, got {pad}",
            (f.l() - 1) / 2
        )));
    }
    if alpha.rows() != f.c_in() || alpha.cols() != f.c_out() {
        return Err(MdError::shape(
            "parallel_forward",
            format!(
                "adapter {}x{} does not match host {}->{}",
                alpha.rows(),
                alpha.cols(),
                f.c_in(),
                f.c_out()
            ),
        ));
    }
    let main = conv2d(x, f, stride, pad)?;
    let branch = conv1x1(x, alpha.tensor(), stride)?;
    main.add(&branch)
}

/// Fuses a series adapter into its host filter bank:
/// `g[v,u,c,d] = sum_e f[v,u,c,e] * (I + alpha)[e,d]`.
pub fn fuse_series<S: Scalar>(
    f: &FilterBank<S>,
    alpha: &AdapterMatrix<S>,
) -> Result<FilterBank<S>> {
    let co = f.c_out();
    if alpha.rows() != co || alpha.cols() != co {
        return Err(MdError::shape(
            "fuse_series",
            format!(
                "series adapter must be {co}x{co} for this host, got {}x{}",
                alpha.rows(),
                alpha.cols()
            ),
        ));
    }
    // I + alpha
    let mut m = alpha.tensor().clone();
    for e in 0..co {
        let v = m.at2(e, e);
        m.set2(e, e, v + S::ONE);
    }
    // one GEMM: (L*L*C_in) x C_out times C_out x C_out
    let rows = f.l() * f.l() * f.c_in();
    let g = matmul(f.tensor().data(), m.data(), rows, co, co);
    FilterBank::new(Tensor::new(
        &[f.l(), f.l(), f.c_in(), f.c_out()],
        g,
    )?)
}

/// Fuses a parallel adapter into its host filter bank by adding `alpha`
/// into the center tap. Off-center taps are copied untouched.
pub fn fuse_parallel<S: Scalar>(
    f: &FilterBank<S>,
    alpha: &AdapterMatrix<S>,
) -> Result<FilterBank<S>> {
    if alpha.rows() != f.c_in() || alpha.cols() != f.c_out() {
        return Err(MdError::shape(
            "fuse_parallel",
            format!(
                "adapter {}x{} does not match host {}->{}",
                alpha.rows(),
                alpha.cols(),
                f.c_in(),
                f.c_out()
            ),
        ));
    }
    let mut g = f.clone();
    let (l, ci, co) = (f.l(), f.c_in(), f.c_out());
    let ctr = (l - 1) / 2;
    let base = ((ctr * l + ctr) * ci) * co;
    let gd = g.tensor_mut().data_mut();
    for (i, &a) in alpha.tensor().data().iter().enumerate() {
        gd[base + i] += a;
    }
    Ok(g)
}

/// Inverse of [`fuse_parallel`]: subtracts `alpha` from the center tap.
///
/// This is the exact algebraic inverse; in floating point `(x + a) - a`
/// can still round, so recovery is bitwise only when the additions were
/// exact (e.g. values on a shared dyadic grid) and within 1 ulp otherwise.
/// Checkpoint-level fusion keeps the original bank alongside the fused one
/// precisely so that unfusing a file is unconditionally bitwise.
pub fn unfuse_parallel<S: Scalar>(
    g: &FilterBank<S>,
    alpha: &AdapterMatrix<S>,
) -> Result<FilterBank<S>> {
    if alpha.rows() != g.c_in() || alpha.cols() != g.c_out() {
        return Err(MdError::shape(
            "unfuse_parallel",
            format!(
                "adapter {}x{} does not match host {}->{}",
                alpha.rows(),
                alpha.cols(),
                g.c_in(),
                g.c_out()
            ),
        ));
    }
    let mut f = g.clone();
    let (l, ci, co) = (g.l(), g.c_in(), g.c_out());
    let ctr = (l - 1) / 2;
    let base = ((ctr * l + ctr) * ci) * co;
    let fd = f.tensor_mut().data_mut();
    for (i, &a) in alpha.tensor().data().iter().enumerate() {
        fd[base + i] -= a;
    }
    Ok(f)
}

/// Inverse of [`fuse_series`] where it exists: `f = g · (I + alpha)^-1`.
///
/// `I + alpha` can be singular (take `alpha = -I`), in which case the host
/// filters are unrecoverable from the fused bank and this returns a numeric
/// error. The inversion runs in f64; recovery is approximate (relative
/// error at the level of the inverse's conditioning), not bitwise.
pub fn unfuse_series<S: Scalar>(
    g: &FilterBank<S>,
    alpha: &AdapterMatrix<S>,
) -> Result<FilterBank<S>> {
    let co = g.c_out();
    if alpha.rows() != co || alpha.cols() != co {
        return Err(MdError::shape(
            "unfuse_series",
            format!(
                "series adapter must be {co}x{co} for this host, got {}x{}",
                alpha.rows(),
                alpha.cols()
            ),
        ));
    }
    // Build I + alpha in f64 and invert by Gauss-Jordan with partial
    // pivoting; co is a channel count (tens), so this is cheap.
    let mut m = vec![0.0f64; co * co];
    for e in 0..co {
        for d in 0..co {
            m[e * co + d] = alpha.tensor().at2(e, d).to_f64();
        }
        m[e * co + e] += 1.0;
    }
    let inv = invert_f64(&mut m, co).ok_or_else(|| MdError::Numeric {
        op: "unfuse_series",
        detail: "I + alpha is singular; host filters are unrecoverable".into(),
    })?;
    let rows = g.l() * g.l() * g.c_in();
    let gf: Vec<f64> = g.tensor().data().iter().map(|v| v.to_f64()).collect();
    let f64_out = matmul(&gf, &inv, rows, co, co);
    let data: Vec<S> = f64_out.into_iter().map(S::from_f64).collect();
    FilterBank::new(Tensor::new(&[g.l(), g.l(), g.c_in(), g.c_out()], data)?)
}

/// Gauss-Jordan inversion with partial pivoting; returns None when a pivot
/// collapses (singular to working precision).
pub(crate) fn invert_f64(m: &mut [f64], n: usize) -> Option<Vec<f64>> {
    let mut inv = vec![0.0f64; n * n];
    for i in 0..n {
        inv[i * n + i] = 1.0;
    }
    for col in 0..n {
        // pivot: largest magnitude in this column at or below the diagonal
        let mut piv = col;
        let mut best = m[col * n + col].abs();
        for r in col + 1..n {
            let v = m[r * n + col].abs();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best < 1e-12 {
            return None;
        }
        if piv != col {
            for j in 0..n {
                m.swap(col * n + j, piv * n + j);
                inv.swap(col * n + j, piv * n + j);
            }
        }
        let d = m[col * n + col];
        for j in 0..n {
            m[col * n + j] /= d;
            inv[col * n + j] /= d;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let factor = m[r * n + col];
            if factor == 0.0 {
                continue;
            }
            for j in 0..n {
                m[r * n + j] -= factor * m[col * n + j];
                inv[r * n + j] -= factor * inv[col * n + j];
            }
        }
    }
    Some(inv)
}

/// Fraction of a host convolution's parameter count that its adapter adds:
/// `|alpha| / |f|`. For parallel adapters this is exactly `1 / L^2`
/// regardless of channel counts; for series adapters it is
/// `C_out / (L^2 * C_in)`, which reduces to `1 / L^2` on square layers.
pub fn adapter_param_fraction(
    l: usize,
    c_in: usize,
    c_out: usize,
    topology: Topology,
) -> f64 {
    let host = (l * l * c_in * c_out) as f64;
    let adapter = match topology {
        Topology::Parallel => (c_in * c_out) as f64,
        Topology::Series => (c_out * c_out) as f64,
    };
    adapter / host
}
