//! Stochastic gradient descent with classical momentum and decoupled-by-
//! group weight decay (decay is added to the gradient, i.e. L2
//! regularization, with the coefficient chosen per parameter group).

use crate::tensor::Scalar;
use std::collections::HashMap;

/// One momentum-SGD update:
/// `v <- momentum*v + g + wd*p;  p <- p - lr*v`.
pub fn sgd_step<S: Scalar>(
    p: &mut [S],
    v: &mut [S],
    g: &[S],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    assert_eq!(p.len(), g.len(), "param/grad length");
    assert_eq!(p.len(), v.len(), "param/velocity length");
    let mu = S::from_f64(momentum);
    let wd = S::from_f64(weight_decay);
    let step = S::from_f64(lr);
    for ((pv, vv), &gv) in p.iter_mut().zip(v.iter_mut()).zip(g) {
        *vv = mu * *vv + gv + wd * *pv;
        *pv -= step * *vv;
    }
}

/// Named velocity buffers plus the current schedule values.
///
/// Buffers are keyed by canonical parameter names (the same names used in
/// checkpoints) and created lazily at first update, zero-initialized.
#[derive(Clone, Debug)]
pub struct OptimizerState<S> {
    pub lr: f64,
    pub momentum: f64,
    velocities: HashMap<String, Vec<S>>,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(lr: f64, momentum: f64) -> Self {
        OptimizerState {
            lr,
            momentum,
            velocities: HashMap::new(),
        }
    }

    /// Applies one update to a named parameter with its group's decay.
    pub fn step(&mut self, name: &str, p: &mut [S], g: &[S], weight_decay: f64) {
        let v = self
            .velocities
            .entry(name.to_string())
            .or_insert_with(|| vec![S::ZERO; p.len()]);
        assert_eq!(v.len(), p.len(), "parameter {name} changed size");
        sgd_step(p, v, g, self.lr, self.momentum, weight_decay);
    }

    #[cfg(test)]
    pub fn velocity(&self, name: &str) -> Option<&[S]> {
        self.velocities.get(name).map(|v| v.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_gradient_step_without_momentum() {
        let mut p = vec![1.0f64, -2.0];
        let mut v = vec![0.0f64; 2];
        sgd_step(&mut p, &mut v, &[0.5, -0.5], 0.1, 0.0, 0.0);
        assert_eq!(p, vec![0.95, -1.95]);
    }

    #[test]
    fn momentum_accumulates() {
        // constant gradient 1, mu=0.9: v_t = 1 + 0.9 + 0.81 ... -> geometric
        let mut p = vec![0.0f64];
        let mut v = vec![0.0f64];
        for _ in 0..3 {
            sgd_step(&mut p, &mut v, &[1.0], 1.0, 0.9, 0.0);
        }
        assert!((v[0] - (1.0 + 0.9 + 0.81)).abs() < 1e-12);
        assert!((p[0] + (1.0 + 1.9 + 2.71)).abs() < 1e-12);
    }

    #[test]
    fn weight_decay_pulls_toward_zero() {
        let mut p = vec![10.0f64];
        let mut v = vec![0.0f64];
        sgd_step(&mut p, &mut v, &[0.0], 0.1, 0.0, 0.01);
        // v = wd*p = 0.1; p = 10 - 0.1*0.1 = 9.99
        assert!((p[0] - 9.99).abs() < 1e-12);
    }

    #[test]
    fn decay_of_zero_leaves_zero_params_fixed() {
        let mut p = vec![0.0f64; 4];
        let mut v = vec![0.0f64; 4];
        sgd_step(&mut p, &mut v, &[0.0; 4], 0.5, 0.9, 0.1);
        assert!(p.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn state_tracks_buffers_per_name() {
        let mut opt = OptimizerState::<f32>::new(0.1, 0.9);
        let mut a = vec![1.0f32; 3];
        let mut b = vec![1.0f32; 2];
        opt.step("layer/0", &mut a, &[1.0; 3], 0.0);
        opt.step("layer/1", &mut b, &[2.0; 2], 0.0);
        assert_eq!(opt.velocity("layer/0").unwrap().len(), 3);
        assert_eq!(opt.velocity("layer/1").unwrap().len(), 2);
        assert!(opt.velocity("layer/2").is_none());
        // second step uses the stored velocity
        opt.step("layer/0", &mut a, &[1.0; 3], 0.0);
        // v1 = 1, v2 = 0.9 + 1 = 1.9; p = 1 - 0.1*1 - 0.1*1.9 = 0.71
        assert!((a[0] - 0.71).abs() < 1e-6);
    }

    #[test]
    fn f32_and_f64_agree_to_single_precision() {
        let g = [0.25, -0.75, 0.5];
        let mut p32 = vec![1.0f32, 2.0, -3.0];
        let mut v32 = vec![0.0f32; 3];
        let mut p64 = vec![1.0f64, 2.0, -3.0];
        let mut v64 = vec![0.0f64; 3];
        for _ in 0..10 {
            let g32: Vec<f32> = g.iter().map(|&x| x as f32).collect();
            sgd_step(&mut p32, &mut v32, &g32, 0.05, 0.9, 0.001);
            sgd_step(&mut p64, &mut v64, &g, 0.05, 0.9, 0.001);
        }
        for (a, b) in p32.iter().zip(&p64) {
            assert!((*a as f64 - b).abs() < 1e-5);
        }
    }
}
