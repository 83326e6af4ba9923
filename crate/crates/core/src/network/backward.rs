//! Reverse-mode differentiation over a training tape.
//!
//! Gradients come back keyed by the same canonical parameter names the
//! checkpoint format uses, filtered by a [`GradScope`] so frozen parameter
//! groups cost neither time nor memory.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::ops::{
    avg_pool2x2_backward, batch_norm_backward, conv1x1_backward, conv2d_backward_filter,
    conv2d_backward_input, dropout_backward, global_avg_pool_backward, linear_backward,
    relu_backward,
};
use crate::tensor::{FilterBank, Scalar, Tensor};

use super::forward::{Tape, TapeSite};
use super::{MultiDomainNet, Regime};

/// Which parameter groups receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradScope {
    pub universal: bool,
    pub adapters: bool,
    pub bn: bool,
    pub head: bool,
}

impl GradScope {
    pub fn all() -> Self {
        GradScope {
            universal: true,
            adapters: true,
            bn: true,
            head: true,
        }
    }

    pub fn for_regime(regime: Regime) -> Self {
        match regime {
            Regime::FinetuneAll => GradScope::all(),
            Regime::AdaptersOnly => GradScope {
                universal: false,
                ..GradScope::all()
            },
            Regime::HeadOnly => GradScope {
                universal: false,
                adapters: false,
                bn: false,
                head: true,
            },
        }
    }
}

/// Flat gradients keyed by canonical parameter name.
#[derive(Debug, Clone, Default)]
pub struct Gradients<S>(pub BTreeMap<String, Vec<S>>);

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, name: &str) -> Option<&[S]> {
        self.0.get(name).map(|v| v.as_slice())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn insert(&mut self, name: String, data: Vec<S>) {
        self.0.insert(name, data);
    }
}

/// Propagate `dlogits` back through `tape`, returning gradients for every
/// parameter group enabled in `scope`. Each parameter is used exactly once
/// per forward pass, so entries are written, never accumulated.
pub fn backward<S: Scalar>(
    net: &MultiDomainNet<S>,
    tape: &Tape<S>,
    dlogits: &Tensor<S>,
    scope: GradScope,
) -> Result<Gradients<S>> {
    let dom = net.domain(tape.domain)?;
    let d = tape.domain;
    let pad = (net.cfg.filter_size - 1) / 2;
    let mut grads = Gradients::default();

    let (dfeats, dw, db) = linear_backward(&tape.feats, &dom.head_w, dlogits)?;
    if scope.head {
        grads.insert(format!("domain/{d}/head/weight"), dw.data().to_vec());
        grads.insert(format!("domain/{d}/head/bias"), db);
    }

    let duf = global_avg_pool_backward(&dfeats, &tape.final_u_dims)?;
    let dyf = relu_backward(&duf, &tape.final_y)?;
    let last_bn = dom.bns.len() - 1;
    let (mut dz, dgamma, dbeta) =
        batch_norm_backward(&dyf, &tape.final_cache, &dom.bns[last_bn])?;
    if scope.bn {
        grads.insert(format!("domain/{d}/bn/{last_bn}/gamma"), dgamma);
        grads.insert(format!("domain/{d}/bn/{last_bn}/beta"), dbeta);
    }

    for bt in tape.blocks.iter().rev() {
        let plan = &bt.plan;

        // Second conv site: block output = skip + site2(u2).
        let du2 = site_backward(
            net,
            &mut grads,
            scope,
            d,
            plan.layer2,
            &bt.u2,
            &bt.site2,
            bt.drop2.as_ref(),
            &dz,
            pad,
        )?;
        let dy2 = relu_backward(&du2, &bt.y2)?;
        let (dout1, dgamma, dbeta) = batch_norm_backward(&dy2, &bt.cache2, &dom.bns[plan.bn2])?;
        if scope.bn {
            grads.insert(format!("domain/{}/bn/{}/gamma", d, plan.bn2), dgamma);
            grads.insert(format!("domain/{}/bn/{}/beta", d, plan.bn2), dbeta);
        }

        let du1 = site_backward(
            net,
            &mut grads,
            scope,
            d,
            plan.layer1,
            &bt.u1,
            &bt.site1,
            None,
            &dout1,
            pad,
        )?;
        let dy1 = relu_backward(&du1, &bt.y1)?;
        let (mut dzin, dgamma, dbeta) =
            batch_norm_backward(&dy1, &bt.cache1, &dom.bns[plan.bn1])?;
        if scope.bn {
            grads.insert(format!("domain/{}/bn/{}/gamma", d, plan.bn1), dgamma);
            grads.insert(format!("domain/{}/bn/{}/beta", d, plan.bn1), dbeta);
        }

        // Skip path carries dz into the block input as well.
        if plan.transition {
            let proj = &net.universal.projections[plan.macro_idx - 1];
            let (dskip, dproj) = conv1x1_backward(&bt.zin, proj, 1, &dz)?;
            if scope.universal {
                grads.insert(
                    format!("universal/proj/{}/filter", plan.macro_idx),
                    dproj.data().to_vec(),
                );
            }
            dzin.add_assign(&dskip)?;
            let pre = bt.pre_pool_dims.as_ref().expect("transition tape");
            dz = avg_pool2x2_backward(&dzin, pre)?;
        } else {
            dzin.add_assign(&dz)?;
            dz = dzin;
        }
    }

    if scope.universal {
        let stem = &net.universal.stem;
        let dstem = conv2d_backward_filter(&tape.input, stem.l(), stem.c_out(), 1, pad, &dz)?;
        grads.insert(
            "universal/layer/0/filter".into(),
            dstem.tensor().data().to_vec(),
        );
    }
    Ok(grads)
}

/// Backward through one conv site: returns the gradient w.r.t. the site
/// input `u`, recording filter/adapter gradients as scope allows.
#[allow(clippy::too_many_arguments)]
fn site_backward<S: Scalar>(
    net: &MultiDomainNet<S>,
    grads: &mut Gradients<S>,
    scope: GradScope,
    domain: usize,
    layer: usize,
    u: &Tensor<S>,
    site: &TapeSite<S>,
    drop: Option<&(Vec<u8>, f64)>,
    dy: &Tensor<S>,
    pad: usize,
) -> Result<Tensor<S>> {
    let bank = &net.universal.body[layer - 1];
    let record_filter = |grads: &mut Gradients<S>, df: FilterBank<S>| {
        grads.insert(
            format!("universal/layer/{layer}/filter"),
            df.tensor().data().to_vec(),
        );
    };
    match site {
        TapeSite::Plain => {
            let du = conv2d_backward_input(u.dims(), bank, 1, pad, dy)?;
            if scope.universal {
                let df = conv2d_backward_filter(u, bank.l(), bank.c_out(), 1, pad, dy)?;
                record_filter(grads, df);
            }
            Ok(du)
        }
        TapeSite::Series { z, branch_in } => {
            // out = z + conv1x1(branch_in | z, alpha); dz gets dy from both
            // the identity path and (through dropout, if any) the branch.
            let alpha = net.domains[domain].adapters[&layer].tensor();
            let bin = branch_in.as_ref().unwrap_or(z);
            let (dbin, dalpha) = conv1x1_backward(bin, alpha, 1, dy)?;
            if scope.adapters {
                grads.insert(
                    format!("domain/{domain}/layer/{layer}/alpha"),
                    dalpha.data().to_vec(),
                );
            }
            let dbranch_z = match drop {
                Some((mask, p)) => dropout_backward(&dbin, mask, *p)?,
                None => dbin,
            };
            let dzc = dy.add(&dbranch_z)?;
            let du = conv2d_backward_input(u.dims(), bank, 1, pad, &dzc)?;
            if scope.universal {
                let df = conv2d_backward_filter(u, bank.l(), bank.c_out(), 1, pad, &dzc)?;
                record_filter(grads, df);
            }
            Ok(du)
        }
        TapeSite::Parallel { branch_in } => {
            // out = conv(u, f) + conv1x1(branch_in | u, alpha).
            let alpha = net.domains[domain].adapters[&layer].tensor();
            let bin = branch_in.as_ref().unwrap_or(u);
            let (dbin, dalpha) = conv1x1_backward(bin, alpha, 1, dy)?;
            if scope.adapters {
                grads.insert(
                    format!("domain/{domain}/layer/{layer}/alpha"),
                    dalpha.data().to_vec(),
                );
            }
            let du_branch = match drop {
                Some((mask, p)) => dropout_backward(&dbin, mask, *p)?,
                None => dbin,
            };
            let mut du = conv2d_backward_input(u.dims(), bank, 1, pad, dy)?;
            du.add_assign(&du_branch)?;
            if scope.universal {
                let df = conv2d_backward_filter(u, bank.l(), bank.c_out(), 1, pad, dy)?;
                record_filter(grads, df);
            }
            Ok(du)
        }
    }
}
