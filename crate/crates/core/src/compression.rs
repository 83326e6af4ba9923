//! Joint cross-domain low-rank compression of adapter banks.
//!
//! All domains adapt the *same* host convolution, so their adapter matrices
//! can be compressed together: stack `[alpha_1 ... alpha_T]` horizontally
//! into a `C_in x (T*C_out)` matrix, take its thin SVD `U S V^T`, and keep
//! rank `K`:
//!
//! ```text
//! beta      = U_K * diag(s_1..s_K)        (C_in x K, shared)
//! gamma_t   = t-th C_out-row block of V_K (C_out x K, per domain)
//! alpha_t  ~= beta * gamma_t^T
//! ```
//!
//! Storage drops from `T*C_in*C_out` to `T*C_out*K + C_in*K`. At
//! construction the blocks satisfy `sum_t gamma_t^T gamma_t = I_K` (that is
//! just `V^T V`); once a domain fine-tunes its `gamma_t` the identity is
//! deliberately *not* re-imposed — `beta` stays frozen and only the
//! per-domain factors move.
//!
//! Everything here computes in f64 regardless of the network precision;
//! factorizing a few hundred columns is nowhere near the training budget.
//! The SVD is one-sided Jacobi (Hestenes) with a fixed cyclic order, a
//! relative off-diagonal threshold of 1e-12 and a hard cap of 100 sweeps:
//! simple, deterministic, and accurate to working precision for matrices
//! of this size.

use crate::error::{MdError, Result};
use crate::tensor::Tensor;

/// Hard cap on Jacobi sweeps before declaring non-convergence.
pub const MAX_SWEEPS: usize = 100;

/// Relative off-diagonal threshold: columns p, q count as orthogonal when
/// `|<a_p, a_q>| <= TOL * ||a_p|| * ||a_q||`.
pub const JACOBI_TOL: f64 = 1e-12;

/// Thin singular value decomposition `A = U diag(s) V^T`.
///
/// `u` is `m x r` and `v` is `n x r` (row-major) with `r = min(m, n)`;
/// `s` is descending and non-negative. Sign convention: the
/// largest-magnitude entry of each `u` column is positive, making the
/// decomposition unique (hence byte-reproducible) for simple spectra.
#[derive(Clone, Debug)]
pub struct Svd {
    pub m: usize,
    pub n: usize,
    pub r: usize,
    pub u: Vec<f64>,
    pub s: Vec<f64>,
    pub v: Vec<f64>,
}

/// One-sided Jacobi SVD of a row-major `m x n` matrix.
pub fn svd(a: &[f64], m: usize, n: usize) -> Result<Svd> {
    if a.len() != m * n || m == 0 || n == 0 {
        return Err(MdError::shape(
            "svd",
            format!("matrix {}x{} with {} elements", m, n, a.len()),
        ));
    }
    if !a.iter().all(|x| x.is_finite()) {
        return Err(MdError::Numeric {
            op: "svd",
            detail: "non-finite input".into(),
        });
    }
    if m >= n {
        svd_tall(a, m, n)
    } else {
        // A = (A^T)^T: factor the tall transpose and swap the factors.
        let mut at = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                at[j * m + i] = a[i * n + j];
            }
        }
        let f = svd_tall(&at, n, m)?;
        Ok(Svd {
            m,
            n,
            r: f.r,
            u: f.v,
            s: f.s,
            v: f.u,
        })
    }
}

/// Jacobi on a tall (or square) matrix: rotates column pairs of a working
/// copy until all pairs are orthogonal, accumulating rotations into V.
fn svd_tall(a: &[f64], m: usize, n: usize) -> Result<Svd> {
    debug_assert!(m >= n);
    // column-major working copy for contiguous column access
    let mut w = vec![0.0f64; m * n];
    for i in 0..m {
        for j in 0..n {
            w[j * m + i] = a[i * n + j];
        }
    }
    // V accumulates rotations, column-major n x n identity
    let mut v = vec![0.0f64; n * n];
    for j in 0..n {
        v[j * n + j] = 1.0;
    }

    let mut converged = false;
    for _sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (head, tail) = w.split_at_mut(q * m);
                let col_p = &mut head[p * m..p * m + m];
                let col_q = &mut tail[..m];
                let mut app = 0.0;
                let mut aqq = 0.0;
                let mut apq = 0.0;
                for i in 0..m {
                    app += col_p[i] * col_p[i];
                    aqq += col_q[i] * col_q[i];
                    apq += col_p[i] * col_q[i];
                }
                if app == 0.0 || aqq == 0.0 {
                    continue; // an exactly-zero column is orthogonal to all
                }
                if apq.abs() <= JACOBI_TOL * (app * aqq).sqrt() {
                    continue;
                }
                rotated = true;
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let wp = col_p[i];
                    let wq = col_q[i];
                    col_p[i] = c * wp - s * wq;
                    col_q[i] = s * wp + c * wq;
                }
                let (vhead, vtail) = v.split_at_mut(q * n);
                let vp = &mut vhead[p * n..p * n + n];
                let vq = &mut vtail[..n];
                for i in 0..n {
                    let xp = vp[i];
                    let xq = vq[i];
                    vp[i] = c * xp - s * xq;
                    vq[i] = s * xp + c * xq;
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(MdError::Numeric {
            op: "svd",
            detail: format!("one-sided Jacobi did not converge in {MAX_SWEEPS} sweeps"),
        });
    }

    // singular values = column norms; sort descending (stable on ties)
    let mut s: Vec<f64> = (0..n)
        .map(|j| {
            let col = &w[j * m..(j + 1) * m];
            col.iter().map(|x| x * x).sum::<f64>().sqrt()
        })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| s[j].partial_cmp(&s[i]).expect("finite singular values"));

    let mut u = vec![0.0f64; m * n]; // row-major m x n
    let mut vr = vec![0.0f64; n * n]; // row-major n x n
    let mut s_sorted = vec![0.0f64; n];
    for (dst, &src) in order.iter().enumerate() {
        s_sorted[dst] = s[src];
        let col = &w[src * m..(src + 1) * m];
        if s[src] > 0.0 {
            let inv = 1.0 / s[src];
            for i in 0..m {
                u[i * n + dst] = col[i] * inv;
            }
        }
        // else: leave the U column zero for now; completed below
        let vcol = &v[src * n..(src + 1) * n];
        for i in 0..n {
            vr[i * n + dst] = vcol[i];
        }
    }
    s = s_sorted;

    complete_zero_columns(&mut u, m, n, &s);
    apply_sign_convention(&mut u, &mut vr, m, n);

    Ok(Svd {
        m,
        n,
        r: n,
        u,
        s,
        v: vr,
    })
}

/// Replaces U columns belonging to exactly-zero singular values with a
/// deterministic orthonormal completion (Gram-Schmidt over canonical basis
/// vectors), so U^T U = I holds even for rank-deficient inputs.
fn complete_zero_columns(u: &mut [f64], m: usize, n: usize, s: &[f64]) {
    for j in 0..n {
        if s[j] > 0.0 {
            continue;
        }
        'candidates: for e in 0..m {
            // candidate = e_i minus projections onto existing columns
            let mut cand = vec![0.0f64; m];
            cand[e] = 1.0;
            for k in 0..n {
                if k == j && s[k] == 0.0 {
                    continue;
                }
                if k != j && s[k] == 0.0 && k > j {
                    continue; // not yet filled
                }
                if k == j {
                    continue;
                }
                let mut proj = 0.0;
                for i in 0..m {
                    proj += cand[i] * u[i * n + k];
                }
                for i in 0..m {
                    cand[i] -= proj * u[i * n + k];
                }
            }
            let norm = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                for i in 0..m {
                    u[i * n + j] = cand[i] / norm;
                }
                break 'candidates;
            }
        }
    }
}

/// Flips column pairs so the largest-magnitude entry of each U column is
/// positive (V flips along to keep the product unchanged).
fn apply_sign_convention(u: &mut [f64], v: &mut [f64], m: usize, n: usize) {
    for j in 0..n {
        let mut best = 0.0f64;
        let mut best_val = 0.0f64;
        for i in 0..m {
            let val = u[i * n + j];
            if val.abs() > best {
                best = val.abs();
                best_val = val;
            }
        }
        if best_val < 0.0 {
            for i in 0..m {
                u[i * n + j] = -u[i * n + j];
            }
            for i in 0..n {
                v[i * n + j] = -v[i * n + j];
            }
        }
    }
}

/// Shared left factor and per-domain right factors for one adapted layer.
#[derive(Clone, Debug, PartialEq)]
pub struct JointFactorization {
    /// Kept rank.
    pub k: usize,
    /// `C_in x K`, shared across domains (`U_K diag(s)`).
    pub beta: Tensor<f64>,
    /// One `C_out x K` factor per domain.
    pub gammas: Vec<Tensor<f64>>,
}

impl JointFactorization {
    /// Reconstructs domain `t`'s adapter, `beta * gamma_t^T` (`C_in x C_out`).
    pub fn reconstruct(&self, t: usize) -> Result<Tensor<f64>> {
        let gamma = self
            .gammas
            .get(t)
            .ok_or(MdError::UnknownDomain(t))?;
        let (ci, k) = (self.beta.dim(0), self.k);
        let co = gamma.dim(0);
        let mut out = vec![0.0f64; ci * co];
        let b = self.beta.data();
        let g = gamma.data();
        for i in 0..ci {
            for j in 0..co {
                let mut acc = 0.0;
                for x in 0..k {
                    acc += b[i * k + x] * g[j * k + x];
                }
                out[i * co + j] = acc;
            }
        }
        Tensor::new(&[ci, co], out)
    }

    /// Total stored elements: `T*C_out*K + C_in*K`.
    pub fn stored_elements(&self) -> usize {
        self.beta.len() + self.gammas.iter().map(|g| g.len()).sum::<usize>()
    }
}

/// Factorizes the horizontal stack of same-shaped adapter matrices at rank
/// `k`. `1 <= k <= min(C_in, T*C_out)`.
pub fn joint_factorize(alphas: &[&Tensor<f64>], k: usize) -> Result<JointFactorization> {
    if alphas.is_empty() {
        return Err(MdError::Config("joint_factorize needs at least one domain".into()));
    }
    let (ci, co) = (alphas[0].dim(0), alphas[0].dim(1));
    for (t, a) in alphas.iter().enumerate() {
        if a.rank() != 2 || a.dims() != [ci, co] {
            return Err(MdError::shape(
                "joint_factorize",
                format!("domain {t} adapter {:?}, expected {:?}", a.dims(), [ci, co]),
            ));
        }
    }
    let t_count = alphas.len();
    let n = t_count * co;
    let r_max = ci.min(n);
    if k == 0 || k > r_max {
        return Err(MdError::Config(format!(
            "rank k = {k} out of range 1..={r_max} for a {ci}x{n} stack"
        )));
    }

    // stack = [alpha_1 .. alpha_T], row-major C_in x (T*C_out)
    let mut stack = vec![0.0f64; ci * n];
    for (t, a) in alphas.iter().enumerate() {
        for i in 0..ci {
            let src = &a.data()[i * co..(i + 1) * co];
            let dst = i * n + t * co;
            stack[dst..dst + co].copy_from_slice(src);
        }
    }

    let f = svd(&stack, ci, n)?;
    // beta = U_K diag(s_K): C_in x K
    let mut beta = vec![0.0f64; ci * k];
    for i in 0..ci {
        for j in 0..k {
            beta[i * k + j] = f.u[i * f.r + j] * f.s[j];
        }
    }
    // gamma_t = rows [t*C_out, (t+1)*C_out) of V_K: C_out x K
    let mut gammas = Vec::with_capacity(t_count);
    for t in 0..t_count {
        let mut g = vec![0.0f64; co * k];
        for i in 0..co {
            let vrow = (t * co + i) * f.r;
            g[i * k..(i + 1) * k].copy_from_slice(&f.v[vrow..vrow + k]);
        }
        gammas.push(Tensor::new(&[co, k], g)?);
    }
    Ok(JointFactorization {
        k,
        beta: Tensor::new(&[ci, k], beta)?,
        gammas,
    })
}

/// Best rank-`k` factors of a single matrix (`beta`, `gamma`) with
/// `a ~= beta * gamma^T`; same shapes and conventions as the joint case
/// with `T = 1`.
pub fn lowrank_single(a: &Tensor<f64>, k: usize) -> Result<(Tensor<f64>, Tensor<f64>)> {
    let f = joint_factorize(&[a], k)?;
    let mut it = f.gammas.into_iter();
    Ok((f.beta, it.next().expect("one gamma for one domain")))
}

/// Storage ratio of the factorized representation relative to raw
/// adapters: `(T*C*K + C*K) / (T*C*C)`. Approaches `K/C` as the domain
/// count grows.
pub fn compression_ratio(t: usize, c: usize, k: usize) -> f64 {
    ((t * c * k + c * k) as f64) / ((t * c * c) as f64)
}
