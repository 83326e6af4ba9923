//! Classifier head: affine map plus softmax cross-entropy.

use crate::error::{MdError, Result};
use crate::ops::matmul::{matmul, matmul_a_bt, matmul_at_b};
use crate::tensor::{Scalar, Tensor};

/// `y = x·w + b` with `x: [N, C]`, `w: [C, K]`, `b: [K]`.
pub fn linear_forward<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, b: &[S]) -> Result<Tensor<S>> {
    if x.rank() != 2 || w.rank() != 2 {
        return Err(MdError::shape(
            "linear_forward",
            format!("expected matrices, got {:?} and {:?}", x.dims(), w.dims()),
        ));
    }
    let (n, c) = (x.dim(0), x.dim(1));
    let (wc, k) = (w.dim(0), w.dim(1));
    if c != wc || b.len() != k {
        return Err(MdError::shape(
            "linear_forward",
            format!("x {:?}, w {:?}, b[{}]", x.dims(), w.dims(), b.len()),
        ));
    }
    let mut y = matmul(x.data(), w.data(), n, c, k);
    for row in y.chunks_exact_mut(k) {
        for (v, &bias) in row.iter_mut().zip(b) {
            *v += bias;
        }
    }
    Tensor::new(&[n, k], y)
}

/// Gradients of [`linear_forward`]: returns `(dx, dw, db)`.
pub fn linear_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    dy: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Vec<S>)> {
    let (n, c) = (x.dim(0), x.dim(1));
    let k = w.dim(1);
    if dy.dims() != [n, k] {
        return Err(MdError::shape(
            "linear_backward",
            format!("cotangent dims {:?}, expected {:?}", dy.dims(), [n, k]),
        ));
    }
    let dx = matmul_a_bt(dy.data(), w.data(), n, k, c);
    let dw = matmul_at_b(x.data(), dy.data(), n, c, k);
    let mut db = vec![S::ZERO; k];
    for row in dy.data().chunks_exact(k) {
        for (acc, &g) in db.iter_mut().zip(row) {
            *acc += g;
        }
    }
    Ok((
        Tensor::new(&[n, c], dx)?,
        Tensor::new(&[c, k], dw)?,
        db,
    ))
}

/// Mean softmax cross-entropy over a batch of logits `[N, K]` with integer
/// labels. Returns `(mean_loss, dlogits, correct)` where `dlogits` already
/// includes the 1/N factor of the mean and `correct` counts argmax hits
/// (ties resolve to the lowest class index).
///
/// The loss is computed with the max-subtraction trick and, notably, is
/// exactly `ln K` for all-zero logits.
pub fn softmax_cross_entropy<S: Scalar>(
    logits: &Tensor<S>,
    labels: &[u32],
) -> Result<(f64, Tensor<S>, usize)> {
    if logits.rank() != 2 {
        return Err(MdError::shape(
            "softmax_cross_entropy",
            format!("expected [N, K] logits, got {:?}", logits.dims()),
        ));
    }
    let (n, k) = (logits.dim(0), logits.dim(1));
    if labels.len() != n {
        return Err(MdError::shape(
            "softmax_cross_entropy",
            format!("{n} logit rows vs {} labels", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= k) {
        return Err(MdError::Config(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let mut dlogits = vec![S::ZERO; n * k];
    let mut loss_sum = 0.0f64;
    let mut correct = 0usize;
    let inv_n = 1.0 / n as f64;
    for (row_i, row) in logits.data().chunks_exact(k).enumerate() {
        let mut max = f64::NEG_INFINITY;
        let mut argmax = 0usize;
        for (j, &v) in row.iter().enumerate() {
            let vf = v.to_f64();
            if vf > max {
                max = vf;
                argmax = j;
            }
        }
        let label = labels[row_i] as usize;
        if argmax == label {
            correct += 1;
        }
        let mut z = 0.0f64;
        for &v in row {
            z += (v.to_f64() - max).exp();
        }
        let log_z = z.ln();
        loss_sum += -(row[label].to_f64() - max - log_z);
        for (j, &v) in row.iter().enumerate() {
            let p = (v.to_f64() - max).exp() / z;
            let delta = if j == label { 1.0 } else { 0.0 };
            dlogits[row_i * k + j] = S::from_f64((p - delta) * inv_n);
        }
    }
    Ok((loss_sum * inv_n, Tensor::new(&[n, k], dlogits)?, correct))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;

    #[test]
    fn linear_known_values() {
        let x = Tensor::<f64>::new(&[1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::<f64>::new(&[2, 3], vec![1.0, 0.0, -1.0, 0.5, 2.0, 0.0]).unwrap();
        let y = linear_forward(&x, &w, &[10.0, 20.0, 30.0]).unwrap();
        assert_eq!(y.data(), &[12.0, 24.0, 29.0]);
    }

    #[test]
    fn linear_backward_adjoint() {
        let mut rng = CounterRng::new(41);
        let x = Tensor::<f64>::from_fn(&[4, 3], |_| rng.normal());
        let w = Tensor::<f64>::from_fn(&[3, 5], |_| rng.normal());
        let b = vec![0.1, -0.2, 0.3, 0.0, 1.0];
        let y = linear_forward(&x, &w, &b).unwrap();
        let dy = Tensor::<f64>::from_fn(y.dims(), |_| rng.normal());
        let (dx, dw, db) = linear_backward(&x, &w, &dy).unwrap();
        // bias contribution must be removed from the pairing with y
        let y_nob = linear_forward(&x, &w, &vec![0.0; 5]).unwrap();
        let lhs: f64 = dy.data().iter().zip(y_nob.data()).map(|(&a, &b)| a * b).sum();
        let px: f64 = dx.data().iter().zip(x.data()).map(|(&a, &b)| a * b).sum();
        let pw: f64 = dw.data().iter().zip(w.data()).map(|(&a, &b)| a * b).sum();
        assert!((lhs - px).abs() < 1e-10 * lhs.abs().max(1.0));
        assert!((lhs - pw).abs() < 1e-10 * lhs.abs().max(1.0));
        // db is the column sum of dy
        for j in 0..5 {
            let want: f64 = (0..4).map(|i| dy.at2(i, j)).sum();
            assert!((db[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_logits_loss_is_ln_k() {
        for k in [2usize, 5, 10] {
            let logits = Tensor::<f64>::zeros(&[4, k]);
            let labels: Vec<u32> = (0..4).map(|i| (i % k) as u32).collect();
            let (loss, _, _) = softmax_cross_entropy(&logits, &labels).unwrap();
            assert_eq!(loss, (k as f64).ln(), "k = {k}");
        }
    }

    #[test]
    fn perfect_logits_drive_loss_down() {
        let mut logits = Tensor::<f64>::zeros(&[3, 4]);
        let labels = [0u32, 2, 3];
        for (i, &l) in labels.iter().enumerate() {
            logits.set2(i, l as usize, 50.0);
        }
        let (loss, _, correct) = softmax_cross_entropy(&logits, &labels).unwrap();
        assert!(loss < 1e-9);
        assert_eq!(correct, 3);
    }

    #[test]
    fn gradient_rows_sum_to_zero() {
        // softmax gradient (p - onehot) sums to zero per row
        let mut rng = CounterRng::new(42);
        let logits = Tensor::<f64>::from_fn(&[6, 5], |_| rng.normal() * 3.0);
        let labels = [0u32, 1, 2, 3, 4, 0];
        let (_, dl, _) = softmax_cross_entropy(&logits, &labels).unwrap();
        for row in dl.data().chunks_exact(5) {
            let s: f64 = row.iter().sum();
            assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn invariant_to_per_row_shift() {
        let mut rng = CounterRng::new(43);
        let logits = Tensor::<f64>::from_fn(&[3, 4], |_| rng.normal());
        let shifted = logits.map(|v| v + 100.0);
        let labels = [1u32, 0, 3];
        let (l1, d1, _) = softmax_cross_entropy(&logits, &labels).unwrap();
        let (l2, d2, _) = softmax_cross_entropy(&shifted, &labels).unwrap();
        assert!((l1 - l2).abs() < 1e-9);
        for (a, b) in d1.data().iter().zip(d2.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let logits = Tensor::<f64>::new(&[1, 3], vec![1e4, -1e4, 0.0]).unwrap();
        let (loss, dl, _) = softmax_cross_entropy(&logits, &[1]).unwrap();
        assert!(loss.is_finite());
        assert!(dl.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn label_out_of_range_rejected() {
        let logits = Tensor::<f64>::zeros(&[2, 3]);
        assert!(softmax_cross_entropy(&logits, &[0, 3]).is_err());
        assert!(softmax_cross_entropy(&logits, &[0]).is_err());
    }
}
