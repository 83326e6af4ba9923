//! Average pooling: the fixed 2x2/stride-2 spatial halving used at
//! macro-block boundaries, and the global pool feeding the classifier.

use crate::error::{MdError, Result};
use crate::tensor::{Scalar, Tensor};

/// 2x2 average pooling with stride 2. Spatial dims must be even — the
/// network only ever halves even extents, and silently dropping a border
/// row would make fusion identities approximate.
pub fn avg_pool2x2<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    if x.rank() != 4 {
        return Err(MdError::shape("avg_pool2x2", format!("expected NHWC, got {:?}", x.dims())));
    }
    let (nb, h, w, c) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    if h % 2 != 0 || w % 2 != 0 {
        return Err(MdError::shape(
            "avg_pool2x2",
            format!("spatial dims must be even, got {h}x{w}"),
        ));
    }
    let (ho, wo) = (h / 2, w / 2);
    let quarter = S::from_f64(0.25);
    let mut y = Tensor::zeros(&[nb, ho, wo, c]);
    let xd = x.data();
    let yd = y.data_mut();
    for n in 0..nb {
        for i in 0..ho {
            for j in 0..wo {
                let y0 = ((n * ho + i) * wo + j) * c;
                let x00 = ((n * h + 2 * i) * w + 2 * j) * c;
                let x01 = x00 + c;
                let x10 = ((n * h + 2 * i + 1) * w + 2 * j) * c;
                let x11 = x10 + c;
                for k in 0..c {
                    yd[y0 + k] =
                        (xd[x00 + k] + xd[x01 + k] + xd[x10 + k] + xd[x11 + k]) * quarter;
                }
            }
        }
    }
    Ok(y)
}

/// Adjoint of [`avg_pool2x2`]: spreads each output cotangent equally
/// (x 1/4) over its 2x2 window.
pub fn avg_pool2x2_backward<S: Scalar>(dy: &Tensor<S>, x_dims: &[usize]) -> Result<Tensor<S>> {
    let (nb, h, w, c) = (x_dims[0], x_dims[1], x_dims[2], x_dims[3]);
    let (ho, wo) = (h / 2, w / 2);
    if dy.dims() != [nb, ho, wo, c] {
        return Err(MdError::shape(
            "avg_pool2x2_backward",
            format!("cotangent dims {:?}, expected {:?}", dy.dims(), [nb, ho, wo, c]),
        ));
    }
    let quarter = S::from_f64(0.25);
    let mut dx = Tensor::zeros(x_dims);
    let dxd = dx.data_mut();
    let dyd = dy.data();
    for n in 0..nb {
        for i in 0..ho {
            for j in 0..wo {
                let y0 = ((n * ho + i) * wo + j) * c;
                let x00 = ((n * h + 2 * i) * w + 2 * j) * c;
                let x01 = x00 + c;
                let x10 = ((n * h + 2 * i + 1) * w + 2 * j) * c;
                let x11 = x10 + c;
                for k in 0..c {
                    let g = dyd[y0 + k] * quarter;
                    dxd[x00 + k] = g;
                    dxd[x01 + k] = g;
                    dxd[x10 + k] = g;
                    dxd[x11 + k] = g;
                }
            }
        }
    }
    Ok(dx)
}

/// Mean over all spatial positions: NHWC -> `[N, C]`.
pub fn global_avg_pool<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    if x.rank() != 4 {
        return Err(MdError::shape("global_avg_pool", format!("expected NHWC, got {:?}", x.dims())));
    }
    let (nb, h, w, c) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let inv = 1.0 / (h * w) as f64;
    let mut y = Tensor::zeros(&[nb, c]);
    let yd = y.data_mut();
    let xd = x.data();
    for n in 0..nb {
        let mut acc = vec![0.0f64; c];
        let base = n * h * w * c;
        for row in xd[base..base + h * w * c].chunks_exact(c) {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += v.to_f64();
            }
        }
        for k in 0..c {
            yd[n * c + k] = S::from_f64(acc[k] * inv);
        }
    }
    Ok(y)
}

/// Adjoint of [`global_avg_pool`]: broadcasts `dy/(H*W)` over space.
pub fn global_avg_pool_backward<S: Scalar>(dy: &Tensor<S>, x_dims: &[usize]) -> Result<Tensor<S>> {
    let (nb, h, w, c) = (x_dims[0], x_dims[1], x_dims[2], x_dims[3]);
    if dy.dims() != [nb, c] {
        return Err(MdError::shape(
            "global_avg_pool_backward",
            format!("cotangent dims {:?}, expected {:?}", dy.dims(), [nb, c]),
        ));
    }
    let inv = S::from_f64(1.0 / (h * w) as f64);
    let mut dx = Tensor::zeros(x_dims);
    let dxd = dx.data_mut();
    let dyd = dy.data();
    for n in 0..nb {
        for pos in 0..h * w {
            let base = (n * h * w + pos) * c;
            for k in 0..c {
                dxd[base + k] = dyd[n * c + k] * inv;
            }
        }
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;

    #[test]
    fn pool_known_values() {
        // one channel, 2x2 image: mean of the four entries
        let x = Tensor::<f64>::new(&[1, 2, 2, 1], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        let y = avg_pool2x2(&x).unwrap();
        assert_eq!(y.dims(), &[1, 1, 1, 1]);
        assert_eq!(y.data()[0], 3.0);
    }

    #[test]
    fn pool_rejects_odd_extent() {
        let x = Tensor::<f64>::zeros(&[1, 3, 4, 1]);
        assert!(avg_pool2x2(&x).is_err());
    }

    #[test]
    fn pool_of_constant_is_constant() {
        let x = Tensor::<f32>::full(&[2, 4, 6, 3], 7.5);
        let y = avg_pool2x2(&x).unwrap();
        assert_eq!(y.dims(), &[2, 2, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 7.5));
    }

    #[test]
    fn pool_backward_is_adjoint() {
        let mut rng = CounterRng::new(31);
        let x = Tensor::<f64>::from_fn(&[2, 4, 4, 3], |_| rng.normal());
        let y = avg_pool2x2(&x).unwrap();
        let dy = Tensor::<f64>::from_fn(y.dims(), |_| rng.normal());
        let dx = avg_pool2x2_backward(&dy, x.dims()).unwrap();
        let lhs: f64 = dy.data().iter().zip(y.data()).map(|(&a, &b)| a * b).sum();
        let rhs: f64 = dx.data().iter().zip(x.data()).map(|(&a, &b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn global_pool_means() {
        let x = Tensor::<f64>::from_fn(&[1, 2, 2, 2], |i| i as f64);
        // channel 0 entries: 0,2,4,6 -> 3; channel 1: 1,3,5,7 -> 4
        let y = global_avg_pool(&x).unwrap();
        assert_eq!(y.dims(), &[1, 2]);
        assert_eq!(y.data(), &[3.0, 4.0]);
    }

    #[test]
    fn global_pool_backward_is_adjoint() {
        let mut rng = CounterRng::new(32);
        let x = Tensor::<f64>::from_fn(&[3, 4, 5, 2], |_| rng.normal());
        let y = global_avg_pool(&x).unwrap();
        let dy = Tensor::<f64>::from_fn(y.dims(), |_| rng.normal());
        let dx = global_avg_pool_backward(&dy, x.dims()).unwrap();
        let lhs: f64 = dy.data().iter().zip(y.data()).map(|(&a, &b)| a * b).sum();
        let rhs: f64 = dx.data().iter().zip(x.data()).map(|(&a, &b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }
}
