//! Central finite-difference validation of every hand-written backward
//! pass.
//!
//! Each check builds a scalar probe `phi(theta) = <u, F(theta)>` with a
//! fixed random cotangent `u`, computes the analytic gradient via the op's
//! backward, and compares against central differences
//! `(phi(x + h e_i) - phi(x - h e_i)) / 2h` in double precision.
//!
//! The relative error of a coordinate is `|a - n| / max(|a|, |n|)` with an
//! absolute floor: coordinates where both values are below 1e-9 count as
//! exact (this covers gradients that are legitimately zero, e.g. behind a
//! ReLU cut). The suite tolerance is [`SUITE_TOL`]; inputs near ReLU kinks
//! are nudged away from zero so the probe stays differentiable within the
//! step.

use crate::adapters::{
    parallel_forward, series_apply, series_apply_backward, series_forward, AdapterMatrix, Topology,
};
use crate::network::{
    backward, DropoutSetting, GradScope, MultiDomainNet, NetworkConfig, PlacementConfig,
    WithinBlock,
};
use crate::ops::conv::{conv1x1, conv1x1_backward, conv2d, conv2d_backward};
use crate::ops::head::{linear_backward, linear_forward, softmax_cross_entropy};
use crate::ops::norm::{batch_norm_backward, batch_norm_train, BatchNormState};
use crate::ops::pointwise::{dropout_backward, dropout_forward, relu, relu_backward};
use crate::ops::pool::{
    avg_pool2x2, avg_pool2x2_backward, global_avg_pool, global_avg_pool_backward,
};
use crate::rng::CounterRng;
use crate::tensor::{FilterBank, Tensor};

/// Pass/fail threshold on the max relative error of a check.
pub const SUITE_TOL: f64 = 1e-6;

/// Central-difference step (f64 probes).
pub const FD_STEP: f64 = 1e-5;

/// Outcome of one finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// What was checked, e.g. `conv2d/s2p1/filter`.
    pub name: String,
    /// Number of coordinates probed numerically.
    pub coords: usize,
    /// Worst relative error across probed coordinates.
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= SUITE_TOL
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<34} {:>5} coords  max rel err {:.3e}  {}",
            self.name,
            self.coords,
            self.max_rel_err,
            if self.passed() { "ok" } else { "FAIL" }
        )
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    let num = (a - n).abs();
    if num <= 1e-9 {
        return 0.0;
    }
    num / a.abs().max(n.abs()).max(1e-12)
}

/// Compares an analytic gradient to central differences on the given
/// coordinate subset.
pub fn check_coords(
    name: impl Into<String>,
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    coords: &[usize],
) -> GradCheckReport {
    assert_eq!(x.len(), analytic.len(), "gradient length mismatch");
    let mut xs = x.to_vec();
    let mut max_rel = 0.0f64;
    for &i in coords {
        let orig = xs[i];
        xs[i] = orig + FD_STEP;
        let fp = f(&xs);
        xs[i] = orig - FD_STEP;
        let fm = f(&xs);
        xs[i] = orig;
        let numeric = (fp - fm) / (2.0 * FD_STEP);
        max_rel = max_rel.max(rel_err(analytic[i], numeric));
    }
    GradCheckReport {
        name: name.into(),
        coords: coords.len(),
        max_rel_err: max_rel,
    }
}

/// Compares on every coordinate.
pub fn check_all(
    name: impl Into<String>,
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
) -> GradCheckReport {
    let coords: Vec<usize> = (0..x.len()).collect();
    check_coords(name, f, x, analytic, &coords)
}

fn rand_vec(rng: &mut CounterRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

/// Normal samples pushed away from zero (for inputs feeding a ReLU, so a
/// +-FD_STEP probe cannot cross the kink).
fn rand_vec_off_kink(rng: &mut CounterRng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v = rng.normal();
            if v.abs() < 0.05 {
                if v < 0.0 {
                    v - 0.1
                } else {
                    v + 0.1
                }
            } else {
                v
            }
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// The standard per-op suite: every differentiable kernel across several
/// randomized geometries. Returns one report per (op, geometry, argument).
pub fn run_op_suite(seed: u64) -> Vec<GradCheckReport> {
    let mut reports = Vec::new();
    let mut stream = 0u64;
    let mut next_rng = || {
        stream += 1;
        CounterRng::stream(seed, stream)
    };

    // conv2d: three geometries, gradients w.r.t. input and filter
    for (gi, &(h, w, ci, co, l, s, p)) in [
        (5usize, 5usize, 3usize, 4usize, 3usize, 1usize, 1usize),
        (6, 6, 2, 3, 3, 2, 1),
        (5, 4, 2, 2, 1, 1, 0),
        (7, 7, 2, 3, 5, 2, 2),
    ]
    .iter()
    .enumerate()
    {
        let mut rng = next_rng();
        let x = Tensor::new(&[2, h, w, ci], rand_vec(&mut rng, 2 * h * w * ci)).unwrap();
        let f = FilterBank::new(
            Tensor::new(&[l, l, ci, co], rand_vec(&mut rng, l * l * ci * co)).unwrap(),
        )
        .unwrap();
        let y = conv2d(&x, &f, s, p).unwrap();
        let u = Tensor::new(y.dims(), rand_vec(&mut rng, y.len())).unwrap();
        let (dx, df) = conv2d_backward(&x, &f, s, p, &u).unwrap();

        let (fc, xc) = (f.clone(), x.clone());
        let uc = u.clone();
        reports.push(check_all(
            format!("conv2d/g{gi}/input"),
            &mut |v: &[f64]| {
                let xt = Tensor::new(xc.dims(), v.to_vec()).unwrap();
                dot(conv2d(&xt, &fc, s, p).unwrap().data(), uc.data())
            },
            x.data(),
            dx.data(),
        ));
        let (fc, xc, uc) = (f.clone(), x.clone(), u.clone());
        reports.push(check_all(
            format!("conv2d/g{gi}/filter"),
            &mut |v: &[f64]| {
                let ft =
                    FilterBank::new(Tensor::new(fc.tensor().dims(), v.to_vec()).unwrap()).unwrap();
                dot(conv2d(&xc, &ft, s, p).unwrap().data(), uc.data())
            },
            f.tensor().data(),
            df.tensor().data(),
        ));
    }

    // conv1x1 at strides 1 and 2, w.r.t. input and matrix
    for (gi, &stride) in [1usize, 2].iter().enumerate() {
        let mut rng = next_rng();
        let x = Tensor::new(&[2, 5, 5, 3], rand_vec(&mut rng, 150)).unwrap();
        let a = Tensor::new(&[3, 4], rand_vec(&mut rng, 12)).unwrap();
        let y = conv1x1(&x, &a, stride).unwrap();
        let u = Tensor::new(y.dims(), rand_vec(&mut rng, y.len())).unwrap();
        let (dx, da) = conv1x1_backward(&x, &a, stride, &u).unwrap();
        let (ac, xc, uc) = (a.clone(), x.clone(), u.clone());
        reports.push(check_all(
            format!("conv1x1/g{gi}/input"),
            &mut |v| {
                let xt = Tensor::new(xc.dims(), v.to_vec()).unwrap();
                dot(conv1x1(&xt, &ac, stride).unwrap().data(), uc.data())
            },
            x.data(),
            dx.data(),
        ));
        let (ac, xc, uc) = (a.clone(), x.clone(), u.clone());
        reports.push(check_all(
            format!("conv1x1/g{gi}/matrix"),
            &mut |v| {
                let at = Tensor::new(ac.dims(), v.to_vec()).unwrap();
                dot(conv1x1(&xc, &at, stride).unwrap().data(), uc.data())
            },
            a.data(),
            da.data(),
        ));
    }

    // batch norm (train mode): w.r.t. input, gamma, beta, two shapes
    for (gi, &(n, h, w, c)) in [(2usize, 3usize, 3usize, 4usize), (4, 2, 2, 3)].iter().enumerate() {
        let mut rng = next_rng();
        let x = Tensor::new(&[n, h, w, c], rand_vec(&mut rng, n * h * w * c)).unwrap();
        let gamma = rand_vec(&mut rng, c);
        let beta = rand_vec(&mut rng, c);
        let mk_state = |gamma: &[f64], beta: &[f64]| BatchNormState::<f64> {
            gamma: gamma.to_vec(),
            beta: beta.to_vec(),
            running_mean: vec![0.0; c],
            running_var: vec![1.0; c],
        };
        let mut st = mk_state(&gamma, &beta);
        let (y, cache) = batch_norm_train(&x, &mut st).unwrap();
        let u = Tensor::new(y.dims(), rand_vec(&mut rng, y.len())).unwrap();
        let st_frozen = mk_state(&gamma, &beta);
        let (dx, dgamma, dbeta) = batch_norm_backward(&u, &cache, &st_frozen).unwrap();

        let (xc, uc, g2, b2) = (x.clone(), u.clone(), gamma.clone(), beta.clone());
        reports.push(check_all(
            format!("batch_norm/g{gi}/input"),
            &mut |v| {
                let xt = Tensor::new(xc.dims(), v.to_vec()).unwrap();
                let mut s = mk_state(&g2, &b2);
                dot(batch_norm_train(&xt, &mut s).unwrap().0.data(), uc.data())
            },
            x.data(),
            dx.data(),
        ));
        let (xc, uc, b2) = (x.clone(), u.clone(), beta.clone());
        reports.push(check_all(
            format!("batch_norm/g{gi}/gamma"),
            &mut |v| {
                let mut s = mk_state(v, &b2);
                dot(batch_norm_train(&xc, &mut s).unwrap().0.data(), uc.data())
            },
            &gamma,
            &dgamma,
        ));
        let (xc, uc, g2) = (x.clone(), u.clone(), gamma.clone());
        reports.push(check_all(
            format!("batch_norm/g{gi}/beta"),
            &mut |v| {
                let mut s = mk_state(&g2, v);
                dot(batch_norm_train(&xc, &mut s).unwrap().0.data(), uc.data())
            },
            &beta,
            &dbeta,
        ));
    }

    // relu: two shapes, inputs held off the kink
    for (gi, &len) in [48usize, 100].iter().enumerate() {
        let mut rng = next_rng();
        let x = Tensor::new(&[len], rand_vec_off_kink(&mut rng, len)).unwrap();
        let u = Tensor::new(&[len], rand_vec(&mut rng, len)).unwrap();
        let dx = relu_backward(&u, &x).unwrap();
        let uc = u.clone();
        reports.push(check_all(
            format!("relu/g{gi}/input"),
            &mut |v| {
                let xt = Tensor::new(&[len], v.to_vec()).unwrap();
                dot(relu(&xt).data(), uc.data())
            },
            x.data(),
            dx.data(),
        ));
    }

    // dropout with a fixed mask (the mask is a function of the rng stream,
    // not of x, so the map is linear and differentiable)
    {
        let mut rng = next_rng();
        let x = Tensor::new(&[2, 4, 4, 2], rand_vec(&mut rng, 64)).unwrap();
        let p = 0.4;
        let mask_seed = rng.next_u64();
        let (y, mask) = dropout_forward(&x, p, &mut CounterRng::new(mask_seed)).unwrap();
        let u = Tensor::new(y.dims(), rand_vec(&mut rng, y.len())).unwrap();
        let dx = dropout_backward(&u, &mask, p).unwrap();
        let uc = u.clone();
        let xdims = x.dims().to_vec();
        reports.push(check_all(
            "dropout/fixed_mask/input",
            &mut |v| {
                let xt = Tensor::new(&xdims, v.to_vec()).unwrap();
                let (yt, _) = dropout_forward(&xt, p, &mut CounterRng::new(mask_seed)).unwrap();
                dot(yt.data(), uc.data())
            },
            x.data(),
            dx.data(),
        ));
    }

    // average pooling ops
    {
        let mut rng = next_rng();
        let x = Tensor::new(&[2, 4, 6, 3], rand_vec(&mut rng, 144)).unwrap();
        let y = avg_pool2x2(&x).unwrap();
        let u = Tensor::new(y.dims(), rand_vec(&mut rng, y.len())).unwrap();
        let dx = avg_pool2x2_backward(&u, x.dims()).unwrap();
        let (uc, xdims) = (u.clone(), x.dims().to_vec());
        reports.push(check_all(
            "avg_pool2x2/input",
            &mut |v| {
                let xt = Tensor::new(&xdims, v.to_vec()).unwrap();
                dot(avg_pool2x2(&xt).unwrap().data(), uc.data())
            },
            x.data(),
            dx.data(),
        ));

        let x = Tensor::new(&[3, 3, 5, 4], rand_vec(&mut rng, 180)).unwrap();
        let y = global_avg_pool(&x).unwrap();
        let u = Tensor::new(y.dims(), rand_vec(&mut rng, y.len())).unwrap();
        let dx = global_avg_pool_backward(&u, x.dims()).unwrap();
        let (uc, xdims) = (u.clone(), x.dims().to_vec());
        reports.push(check_all(
            "global_avg_pool/input",
            &mut |v| {
                let xt = Tensor::new(&xdims, v.to_vec()).unwrap();
                dot(global_avg_pool(&xt).unwrap().data(), uc.data())
            },
            x.data(),
            dx.data(),
        ));
    }

    // linear head: w.r.t. input, weights, bias
    for (gi, &(n, c, k)) in [(3usize, 5usize, 4usize), (6, 2, 7)].iter().enumerate() {
        let mut rng = next_rng();
        let x = Tensor::new(&[n, c], rand_vec(&mut rng, n * c)).unwrap();
        let w = Tensor::new(&[c, k], rand_vec(&mut rng, c * k)).unwrap();
        let b = rand_vec(&mut rng, k);
        let y = linear_forward(&x, &w, &b).unwrap();
        let u = Tensor::new(y.dims(), rand_vec(&mut rng, y.len())).unwrap();
        let (dx, dw, db) = linear_backward(&x, &w, &u).unwrap();
        let (wc, bc, uc, xc) = (w.clone(), b.clone(), u.clone(), x.clone());
        reports.push(check_all(
            format!("linear/g{gi}/input"),
            &mut |v| {
                let xt = Tensor::new(&[n, c], v.to_vec()).unwrap();
                dot(linear_forward(&xt, &wc, &bc).unwrap().data(), uc.data())
            },
            x.data(),
            dx.data(),
        ));
        let (bc, uc, xc2) = (b.clone(), u.clone(), xc.clone());
        reports.push(check_all(
            format!("linear/g{gi}/weight"),
            &mut |v| {
                let wt = Tensor::new(&[c, k], v.to_vec()).unwrap();
                dot(linear_forward(&xc2, &wt, &bc).unwrap().data(), uc.data())
            },
            w.data(),
            dw.data(),
        ));
        let (wc2, uc) = (w.clone(), u.clone());
        reports.push(check_all(
            format!("linear/g{gi}/bias"),
            &mut |v| dot(linear_forward(&xc, &wc2, v).unwrap().data(), uc.data()),
            &b,
            &db,
        ));
    }

    // softmax cross-entropy: loss is already scalar, no cotangent needed
    for (gi, &(n, k)) in [(4usize, 5usize), (7, 3)].iter().enumerate() {
        let mut rng = next_rng();
        let logits = Tensor::new(&[n, k], rand_vec(&mut rng, n * k)).unwrap();
        let labels: Vec<u32> = (0..n).map(|_| rng.below(k as u64) as u32).collect();
        let (_, dl, _) = softmax_cross_entropy(&logits, &labels).unwrap();
        let lc = labels.clone();
        reports.push(check_all(
            format!("softmax_xent/g{gi}/logits"),
            &mut |v| {
                let lt = Tensor::new(&[n, k], v.to_vec()).unwrap();
                softmax_cross_entropy(&lt, &lc).unwrap().0
            },
            logits.data(),
            dl.data(),
        ));
    }

    // series adapter applied to an activation: w.r.t. z and alpha
    {
        let mut rng = next_rng();
        let z = Tensor::new(&[2, 3, 3, 4], rand_vec(&mut rng, 72)).unwrap();
        let alpha = AdapterMatrix::new(Tensor::new(&[4, 4], rand_vec(&mut rng, 16)).unwrap()).unwrap();
        let y = series_apply(&z, &alpha).unwrap();
        let u = Tensor::new(y.dims(), rand_vec(&mut rng, y.len())).unwrap();
        let (dz, dalpha) = series_apply_backward(&z, &alpha, &u).unwrap();
        let (ac, uc, zdims) = (alpha.clone(), u.clone(), z.dims().to_vec());
        reports.push(check_all(
            "series_adapter/z",
            &mut |v| {
                let zt = Tensor::new(&zdims, v.to_vec()).unwrap();
                dot(series_apply(&zt, &ac).unwrap().data(), uc.data())
            },
            z.data(),
            dz.data(),
        ));
        let (zc, uc) = (z.clone(), u.clone());
        reports.push(check_all(
            "series_adapter/alpha",
            &mut |v| {
                let at = AdapterMatrix::new(Tensor::new(&[4, 4], v.to_vec()).unwrap()).unwrap();
                dot(series_apply(&zc, &at).unwrap().data(), uc.data())
            },
            alpha.tensor().data(),
            dalpha.data(),
        ));
    }

    // adapted convolutions end to end w.r.t. alpha (series and parallel)
    for &stride in &[1usize, 2] {
        let mut rng = next_rng();
        let x = Tensor::new(&[2, 6, 6, 3], rand_vec(&mut rng, 216)).unwrap();
        let f = FilterBank::new(Tensor::new(&[3, 3, 3, 4], rand_vec(&mut rng, 108)).unwrap())
            .unwrap();
        let a_par = Tensor::new(&[3, 4], rand_vec(&mut rng, 12)).unwrap();
        let a_ser = Tensor::new(&[4, 4], rand_vec(&mut rng, 16)).unwrap();

        // parallel: y = conv(x,f) + conv1x1(x, a); d/d a via conv1x1 backward
        let ap = AdapterMatrix::new(a_par.clone()).unwrap();
        let y = parallel_forward(&x, &f, &ap, stride, 1).unwrap();
        let u = Tensor::new(y.dims(), rand_vec(&mut rng, y.len())).unwrap();
        let (_, da) = conv1x1_backward(&x, &a_par, stride, &u).unwrap();
        let (xc, fc, uc) = (x.clone(), f.clone(), u.clone());
        reports.push(check_all(
            format!("parallel_adapter/s{stride}/alpha"),
            &mut |v| {
                let at = AdapterMatrix::new(Tensor::new(&[3, 4], v.to_vec()).unwrap()).unwrap();
                dot(
                    parallel_forward(&xc, &fc, &at, stride, 1).unwrap().data(),
                    uc.data(),
                )
            },
            a_par.data(),
            da.data(),
        ));

        // series: y = z + z·alpha with z = conv(x,f); d/d alpha = z^T u
        let asr = AdapterMatrix::new(a_ser.clone()).unwrap();
        let y = series_forward(&x, &f, &asr, stride, 1).unwrap();
        let u = Tensor::new(y.dims(), rand_vec(&mut rng, y.len())).unwrap();
        let z = conv2d(&x, &f, stride, 1).unwrap();
        let (_, da) = series_apply_backward(&z, &asr, &u).unwrap();
        let (xc, fc, uc) = (x.clone(), f.clone(), u.clone());
        reports.push(check_all(
            format!("series_adapter_conv/s{stride}/alpha"),
            &mut |v| {
                let at = AdapterMatrix::new(Tensor::new(&[4, 4], v.to_vec()).unwrap()).unwrap();
                dot(
                    series_forward(&xc, &fc, &at, stride, 1).unwrap().data(),
                    uc.data(),
                )
            },
            a_ser.data(),
            da.data(),
        ));
    }

    reports
}

/// Whole-network checks: the training loss differentiated through stem,
/// body, projection, adapter, batch-norm, and head parameters, for every
/// placement topology. Complements [`run_op_suite`], which exercises each
/// kernel in isolation.
pub fn run_network_suite(seed: u64) -> Vec<GradCheckReport> {
    let configs: [(&str, PlacementConfig); 4] = [
        ("series", PlacementConfig::default()),
        (
            "parallel",
            PlacementConfig {
                topology: Topology::Parallel,
                ..Default::default()
            },
        ),
        (
            "series_drop",
            PlacementConfig {
                dropout: DropoutSetting::BeforeSecondAdapter(0.3),
                ..Default::default()
            },
        ),
        (
            "second_only",
            PlacementConfig {
                within_block: WithinBlock::SecondOnly,
                topology: Topology::Parallel,
                ..Default::default()
            },
        ),
    ];

    let mut reports = Vec::new();
    for (ci, (label, placement)) in configs.iter().enumerate() {
        let cfg = NetworkConfig {
            input_channels: 2,
            macro_widths: [3, 4, 5],
            blocks_per_macro: 1,
            filter_size: 3,
            class_counts: vec![4],
        };
        let mut net = MultiDomainNet::<f64>::build(cfg, *placement, seed ^ (ci as u64)).unwrap();
        let mut rng = CounterRng::stream(seed, 7000 + ci as u64);
        for a in net.domains[0].adapters.values_mut() {
            for v in a.tensor_mut().data_mut() {
                *v = rng.normal() * 0.05;
            }
        }
        // Adapters and heads build at zero; both need signal or upstream
        // gradients vanish behind constant logits.
        for v in net.domains[0].head_w.data_mut() {
            *v = rng.normal() * 0.3;
        }
        for v in net.domains[0].head_b.iter_mut() {
            *v = rng.normal() * 0.1;
        }
        let x = Tensor::from_fn(&[2, 8, 8, 2], |_| rng.normal() * 0.6 + 0.1);
        let labels: Vec<u32> = (0..2).map(|_| rng.below(4) as u32).collect();
        let mask_seed = rng.next_u64();

        // BN statistics mutate in forward_train, so each probe clones the
        // net; the fixed mask seed reproduces identical dropout draws.
        let loss_at = |net: &MultiDomainNet<f64>| -> f64 {
            let mut work = net.clone();
            let mut r = CounterRng::new(mask_seed);
            let (logits, _) = work.forward_train(&x, 0, &mut r).unwrap();
            softmax_cross_entropy(&logits, &labels).unwrap().0
        };
        let grads = {
            let mut work = net.clone();
            let mut r = CounterRng::new(mask_seed);
            let (logits, tape) = work.forward_train(&x, 0, &mut r).unwrap();
            let (_, dlogits, _) = softmax_cross_entropy(&logits, &labels).unwrap();
            backward(&work, &tape, &dlogits, GradScope::all()).unwrap()
        };

        let mut probes: Vec<String> = vec![
            "universal/layer/0/filter".into(),
            "universal/layer/2/filter".into(),
            "universal/layer/5/filter".into(),
            "universal/proj/1/filter".into(),
            "universal/proj/2/filter".into(),
            "domain/0/bn/0/gamma".into(),
            "domain/0/bn/4/beta".into(),
            "domain/0/head/weight".into(),
            "domain/0/head/bias".into(),
        ];
        for layer in net.adapted_layers() {
            probes.push(format!("domain/0/layer/{layer}/alpha"));
        }

        for name in probes {
            let base = net.param(&name).unwrap().to_vec();
            let analytic = grads.get(&name).unwrap().to_vec();
            let coords: Vec<usize> = if base.len() <= 4 {
                (0..base.len()).collect()
            } else {
                vec![0, base.len() / 3, base.len() - 1]
            };
            let net_ref = &net;
            let probe_name = name.clone();
            reports.push(check_coords(
                format!("network/{label}/{name}"),
                &mut |v: &[f64]| {
                    let mut work = net_ref.clone();
                    work.param_mut(&probe_name).unwrap().copy_from_slice(v);
                    loss_at(&work)
                },
                &base,
                &analytic,
                &coords,
            ));
        }
    }
    reports
}

/// Both suites back to back: the full gradient validation battery.
pub fn run_full_suite(seed: u64) -> Vec<GradCheckReport> {
    let mut reports = run_op_suite(seed);
    reports.extend(run_network_suite(seed));
    reports
}
