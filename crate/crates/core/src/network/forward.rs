//! Forward passes: evaluation (frozen BN statistics, no dropout) and
//! training (batch statistics, dropout on the second adapter branch, and a
//! tape of every intermediate the backward pass needs).

use crate::adapters::Topology;
use crate::error::{MdError, Result};
use crate::ops::{
    avg_pool2x2, batch_norm_eval, batch_norm_train, conv1x1, conv2d, dropout_forward,
    global_avg_pool, linear_forward, relu, BatchNormCache,
};
use crate::rng::CounterRng;
use crate::tensor::{Scalar, Tensor};

use super::{block_plans, BlockPlan, DropoutSetting, MultiDomainNet};

/// Cached values for one adapted (or plain) convolution site.
#[derive(Debug, Clone)]
pub(crate) enum TapeSite<S> {
    /// No adapter: the conv input is the block tape's `u`.
    Plain,
    /// Series adapter: `z` is the host conv output; `branch_in` is the
    /// dropped copy of `z` feeding the adapter (None when no dropout).
    Series {
        z: Tensor<S>,
        branch_in: Option<Tensor<S>>,
    },
    /// Parallel adapter: `branch_in` is the dropped copy of the conv input
    /// feeding the adapter (None when no dropout).
    Parallel { branch_in: Option<Tensor<S>> },
}

#[derive(Debug, Clone)]
pub(crate) struct BlockTape<S> {
    pub plan: BlockPlan,
    /// Input dims before the 2x2 average pool (transition blocks only).
    pub pre_pool_dims: Option<Vec<usize>>,
    /// Block input after pooling: feeds BN1 and the skip path.
    pub zin: Tensor<S>,
    pub cache1: BatchNormCache<S>,
    /// BN1 output (pre-ReLU) and ReLU output (conv1 input).
    pub y1: Tensor<S>,
    pub u1: Tensor<S>,
    pub site1: TapeSite<S>,
    pub cache2: BatchNormCache<S>,
    pub y2: Tensor<S>,
    pub u2: Tensor<S>,
    /// Keep-mask and probability of the dropout applied to the second
    /// adapter's branch input.
    pub drop2: Option<(Vec<u8>, f64)>,
    pub site2: TapeSite<S>,
}

/// Everything the backward pass needs from one training forward pass.
#[derive(Debug, Clone)]
pub struct Tape<S> {
    pub domain: usize,
    pub(crate) input: Tensor<S>,
    pub(crate) blocks: Vec<BlockTape<S>>,
    pub(crate) final_cache: BatchNormCache<S>,
    pub(crate) final_y: Tensor<S>,
    pub(crate) final_u_dims: Vec<usize>,
    /// Global-average-pooled features, the head input.
    pub feats: Tensor<S>,
}

fn check_input<S: Scalar>(net: &MultiDomainNet<S>, x: &Tensor<S>) -> Result<()> {
    if x.rank() != 4 || x.dim(3) != net.cfg.input_channels {
        return Err(MdError::shape(
            "network_forward",
            format!(
                "input must be [N,H,W,{}], got {:?}",
                net.cfg.input_channels,
                x.dims()
            ),
        ));
    }
    Ok(())
}

impl<S: Scalar> MultiDomainNet<S> {
    fn pad(&self) -> usize {
        (self.cfg.filter_size - 1) / 2
    }

    /// Eval-mode logits for one domain: frozen BN statistics, no dropout.
    pub fn forward_eval(&self, x: &Tensor<S>, domain: usize) -> Result<Tensor<S>> {
        Ok(self.run_eval(x, domain, false)?.0)
    }

    /// Eval-mode head input (global-average-pooled features).
    pub fn eval_features(&self, x: &Tensor<S>, domain: usize) -> Result<Tensor<S>> {
        Ok(self.run_eval(x, domain, false)?.1)
    }

    /// Eval-mode feature maps: stem output, every residual-block output in
    /// order, and the pooled feature vector last.
    pub fn eval_block_features(&self, x: &Tensor<S>, domain: usize) -> Result<Vec<Tensor<S>>> {
        Ok(self.run_eval(x, domain, true)?.2)
    }

    fn run_eval(
        &self,
        x: &Tensor<S>,
        domain: usize,
        collect: bool,
    ) -> Result<(Tensor<S>, Tensor<S>, Vec<Tensor<S>>)> {
        check_input(self, x)?;
        let dom = self.domain(domain)?;
        let pad = self.pad();
        let mut trace = Vec::new();

        let mut z = conv2d(x, &self.universal.stem, 1, pad)?;
        if collect {
            trace.push(z.clone());
        }
        for plan in block_plans(&self.cfg) {
            let zin = if plan.transition {
                avg_pool2x2(&z)?
            } else {
                z
            };
            let skip = if plan.transition {
                conv1x1(&zin, &self.universal.projections[plan.macro_idx - 1], 1)?
            } else {
                zin.clone()
            };
            let u1 = relu(&batch_norm_eval(&zin, &dom.bns[plan.bn1])?);
            let out1 = self.site_eval(&u1, plan.layer1, domain, pad)?;
            let u2 = relu(&batch_norm_eval(&out1, &dom.bns[plan.bn2])?);
            let out2 = self.site_eval(&u2, plan.layer2, domain, pad)?;
            z = skip.add(&out2)?;
            if collect {
                trace.push(z.clone());
            }
        }
        let last_bn = dom.bns.len() - 1;
        let uf = relu(&batch_norm_eval(&z, &dom.bns[last_bn])?);
        let feats = global_avg_pool(&uf)?;
        if collect {
            trace.push(feats.clone());
        }
        let logits = linear_forward(&feats, &dom.head_w, &dom.head_b)?;
        Ok((logits, feats, trace))
    }

    fn site_eval(
        &self,
        u: &Tensor<S>,
        layer: usize,
        domain: usize,
        pad: usize,
    ) -> Result<Tensor<S>> {
        let bank = &self.universal.body[layer - 1];
        match self.domains[domain].adapters.get(&layer) {
            None => conv2d(u, bank, 1, pad),
            Some(alpha) => match self.placement.topology {
                Topology::Series => {
                    let z = conv2d(u, bank, 1, pad)?;
                    let branch = conv1x1(&z, alpha.tensor(), 1)?;
                    z.add(&branch)
                }
                Topology::Parallel => {
                    let main = conv2d(u, bank, 1, pad)?;
                    let branch = conv1x1(u, alpha.tensor(), 1)?;
                    main.add(&branch)
                }
            },
        }
    }

    /// Training forward pass: batch statistics update the domain's running
    /// BN state in place, dropout (if configured) masks the second
    /// adapter's branch input, and the returned tape carries every
    /// intermediate needed by [`super::backward`].
    pub fn forward_train(
        &mut self,
        x: &Tensor<S>,
        domain: usize,
        rng: &mut CounterRng,
    ) -> Result<(Tensor<S>, Tape<S>)> {
        check_input(self, x)?;
        if domain >= self.domains.len() {
            return Err(MdError::UnknownDomain(domain));
        }
        let pad = self.pad();
        let plans = block_plans(&self.cfg);
        let placement = self.placement;
        let universal = &self.universal;
        let dom = &mut self.domains[domain];

        let mut blocks = Vec::with_capacity(plans.len());
        let mut z = conv2d(x, &universal.stem, 1, pad)?;
        for plan in plans {
            let (pre_pool_dims, zin) = if plan.transition {
                let dims = z.dims().to_vec();
                (Some(dims), avg_pool2x2(&z)?)
            } else {
                (None, z)
            };
            let skip = if plan.transition {
                conv1x1(&zin, &universal.projections[plan.macro_idx - 1], 1)?
            } else {
                zin.clone()
            };

            let (y1, cache1) = batch_norm_train(&zin, &mut dom.bns[plan.bn1])?;
            let u1 = relu(&y1);
            let alpha1 = dom.adapters.get(&plan.layer1);
            let bank1 = &universal.body[plan.layer1 - 1];
            let (out1, site1, _) = site_train(
                &u1,
                bank1,
                alpha1.map(|a| a.tensor()),
                placement.topology,
                pad,
                None,
                rng,
            )?;

            let (y2, cache2) = batch_norm_train(&out1, &mut dom.bns[plan.bn2])?;
            let u2 = relu(&y2);
            let alpha2 = dom.adapters.get(&plan.layer2);
            // Dropout acts on the second adapter's branch input only, and
            // only when that site actually has an adapter.
            let drop_p = match placement.dropout {
                DropoutSetting::BeforeSecondAdapter(p) if alpha2.is_some() => Some(p),
                _ => None,
            };
            let (out2, site2, drop2) = site_train(
                &u2,
                &universal.body[plan.layer2 - 1],
                alpha2.map(|a| a.tensor()),
                placement.topology,
                pad,
                drop_p,
                rng,
            )?;

            z = skip.add(&out2)?;
            blocks.push(BlockTape {
                plan,
                pre_pool_dims,
                zin,
                cache1,
                y1,
                u1,
                site1,
                cache2,
                y2,
                u2,
                drop2,
                site2,
            });
        }

        let last_bn = dom.bns.len() - 1;
        let (final_y, final_cache) = batch_norm_train(&z, &mut dom.bns[last_bn])?;
        let uf = relu(&final_y);
        let feats = global_avg_pool(&uf)?;
        let logits = linear_forward(&feats, &dom.head_w, &dom.head_b)?;
        let tape = Tape {
            domain,
            input: x.clone(),
            blocks,
            final_cache,
            final_y,
            final_u_dims: uf.dims().to_vec(),
            feats,
        };
        Ok((logits, tape))
    }
}

/// One conv site in train mode. Returns the site output, the tape entry,
/// and the dropout mask (when `drop_p` is set).
#[allow(clippy::type_complexity)]
fn site_train<S: Scalar>(
    u: &Tensor<S>,
    bank: &crate::tensor::FilterBank<S>,
    alpha: Option<&Tensor<S>>,
    topology: Topology,
    pad: usize,
    drop_p: Option<f64>,
    rng: &mut CounterRng,
) -> Result<(Tensor<S>, TapeSite<S>, Option<(Vec<u8>, f64)>)> {
    let Some(alpha) = alpha else {
        return Ok((conv2d(u, bank, 1, pad)?, TapeSite::Plain, None));
    };
    match topology {
        Topology::Series => {
            let z = conv2d(u, bank, 1, pad)?;
            let (branch_in, drop) = match drop_p {
                Some(p) => {
                    let (zd, mask) = dropout_forward(&z, p, rng)?;
                    (Some(zd), Some((mask, p)))
                }
                None => (None, None),
            };
            let branch = conv1x1(branch_in.as_ref().unwrap_or(&z), alpha, 1)?;
            let out = z.add(&branch)?;
            Ok((out, TapeSite::Series { z, branch_in }, drop))
        }
        Topology::Parallel => {
            let (branch_in, drop) = match drop_p {
                Some(p) => {
                    let (ud, mask) = dropout_forward(u, p, rng)?;
                    (Some(ud), Some((mask, p)))
                }
                None => (None, None),
            };
            let main = conv2d(u, bank, 1, pad)?;
            let branch = conv1x1(branch_in.as_ref().unwrap_or(u), alpha, 1)?;
            let out = main.add(&branch)?;
            Ok((out, TapeSite::Parallel { branch_in }, drop))
        }
    }
}
