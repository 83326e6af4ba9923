//! The multi-domain convolutional network.
//!
//! Structure: a 3x3 stride-1 stem convolution, three macro-blocks of
//! pre-activation residual blocks (BN -> ReLU -> conv, twice, plus a skip),
//! a final BN -> ReLU -> global average pool, and one classifier head per
//! domain. At the boundary into macro 1 and macro 2 the feature map is
//! halved by 2x2 average pooling and the skip path uses a universal 1x1
//! projection; everywhere else the skip is the identity.
//!
//! Parameters split into two stores. *Universal*: stem, body and projection
//! filter banks, shared by every domain and untouched by domain training.
//! *Per-domain*: low-rank 1x1 adapters on selected body convolutions, every
//! BN state, and the classifier head. Adapters attach only to residual-block
//! convolutions — never the stem, projections, or head.
//!
//! Parameter names ("universal/layer/3/filter", "domain/1/bn/0/gamma", ...)
//! are the single vocabulary used by checkpoints, gradients, the optimizer,
//! and the parameter-budget report.

mod backward;
mod forward;

pub use backward::{backward, GradScope, Gradients};
pub use forward::Tape;

use std::collections::BTreeMap;

use crate::adapters::{AdapterMatrix, Topology};
use crate::error::{MdError, Result};
use crate::io::Checkpoint;
use crate::ops::BatchNormState;
use crate::rng::CounterRng;
use crate::tensor::{FilterBank, Scalar, Tensor};

/// Which macro-blocks receive adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MacroSelection {
    pub early: bool,
    pub mid: bool,
    pub late: bool,
}

impl MacroSelection {
    pub fn all() -> Self {
        MacroSelection {
            early: true,
            mid: true,
            late: true,
        }
    }

    pub fn none() -> Self {
        MacroSelection {
            early: false,
            mid: false,
            late: false,
        }
    }

    pub fn selects(&self, macro_idx: usize) -> bool {
        match macro_idx {
            0 => self.early,
            1 => self.mid,
            2 => self.late,
            _ => false,
        }
    }

    pub fn count(&self) -> usize {
        usize::from(self.early) + usize::from(self.mid) + usize::from(self.late)
    }

    /// Accepts `all`, `none`, or a comma list of `early`/`mid`/`late`.
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "all" => return Ok(Self::all()),
            "none" => return Ok(Self::none()),
            _ => {}
        }
        let mut sel = Self::none();
        for part in s.split(',') {
            match part.trim() {
                "early" => sel.early = true,
                "mid" => sel.mid = true,
                "late" => sel.late = true,
                other => {
                    return Err(MdError::Config(format!(
                        "unknown macro selection '{other}' (expected all, none, early, mid, late)"
                    )));
                }
            }
        }
        Ok(sel)
    }
}

impl std::fmt::Display for MacroSelection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.count() == 3 {
            return write!(f, "all");
        }
        if self.count() == 0 {
            return write!(f, "none");
        }
        let mut parts = Vec::new();
        if self.early {
            parts.push("early");
        }
        if self.mid {
            parts.push("mid");
        }
        if self.late {
            parts.push("late");
        }
        write!(f, "{}", parts.join(","))
    }
}

/// Which of a residual block's two convolutions carry an adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WithinBlock {
    BothConvs,
    SecondOnly,
}

impl WithinBlock {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "both" => Ok(WithinBlock::BothConvs),
            "second" => Ok(WithinBlock::SecondOnly),
            other => Err(MdError::Config(format!(
                "unknown within-block setting '{other}' (expected both or second)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            WithinBlock::BothConvs => "both",
            WithinBlock::SecondOnly => "second",
        }
    }
}

/// Dropout applies to the input of the second adapter in each residual
/// block, in train mode only. The convolution's main path is never dropped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DropoutSetting {
    Off,
    BeforeSecondAdapter(f64),
}

impl DropoutSetting {
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "off" {
            return Ok(DropoutSetting::Off);
        }
        let p: f64 = s
            .parse()
            .map_err(|_| MdError::Config(format!("dropout must be 'off' or a probability, got '{s}'")))?;
        if !(0.0..1.0).contains(&p) {
            return Err(MdError::Config(format!(
                "dropout probability must be in [0, 1), got {p}"
            )));
        }
        if p == 0.0 {
            Ok(DropoutSetting::Off)
        } else {
            Ok(DropoutSetting::BeforeSecondAdapter(p))
        }
    }

    pub fn prob(&self) -> f64 {
        match self {
            DropoutSetting::Off => 0.0,
            DropoutSetting::BeforeSecondAdapter(p) => *p,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlacementConfig {
    pub macros: MacroSelection,
    pub within_block: WithinBlock,
    pub topology: Topology,
    pub dropout: DropoutSetting,
}

impl Default for PlacementConfig {
    fn default() -> Self {
        PlacementConfig {
            macros: MacroSelection::all(),
            within_block: WithinBlock::BothConvs,
            topology: Topology::Series,
            dropout: DropoutSetting::Off,
        }
    }
}

impl PlacementConfig {
    /// Placement with no adapters anywhere: the plain universal network.
    pub fn bare() -> Self {
        PlacementConfig {
            macros: MacroSelection::none(),
            ..Default::default()
        }
    }

    /// Does the given conv site carry an adapter? `conv_idx` is 0 for the
    /// first convolution of a residual block, 1 for the second.
    pub fn adapts(&self, macro_idx: usize, conv_idx: usize) -> bool {
        self.macros.selects(macro_idx)
            && (conv_idx == 1 || self.within_block == WithinBlock::BothConvs)
    }

    fn validate(&self) -> Result<()> {
        if let DropoutSetting::BeforeSecondAdapter(p) = self.dropout {
            if !(0.0..1.0).contains(&p) || p == 0.0 {
                return Err(MdError::Config(format!(
                    "dropout probability must be in (0, 1), got {p}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub input_channels: usize,
    pub macro_widths: [usize; 3],
    pub blocks_per_macro: usize,
    pub filter_size: usize,
    /// Classifier size per registered domain; domain 0 is the base.
    pub class_counts: Vec<usize>,
}

impl NetworkConfig {
    /// Reference configuration: 26 weight layers (widths 64/128/256).
    pub fn reference(base_classes: usize) -> Self {
        NetworkConfig {
            input_channels: 3,
            macro_widths: [64, 128, 256],
            blocks_per_macro: 4,
            filter_size: 3,
            class_counts: vec![base_classes],
        }
    }

    /// Desk-scale configuration for fast experiments.
    pub fn desk(base_classes: usize) -> Self {
        NetworkConfig {
            input_channels: 3,
            macro_widths: [16, 32, 64],
            blocks_per_macro: 2,
            filter_size: 3,
            class_counts: vec![base_classes],
        }
    }

    pub fn num_domains(&self) -> usize {
        self.class_counts.len()
    }

    pub fn num_blocks(&self) -> usize {
        3 * self.blocks_per_macro
    }

    /// Body convolutions (two per residual block).
    pub fn num_body_layers(&self) -> usize {
        2 * self.num_blocks()
    }

    /// Weight layers in the counting convention of the architecture name:
    /// stem + body convolutions + classifier. Projections are not counted.
    pub fn weight_layers(&self) -> usize {
        self.num_body_layers() + 2
    }

    /// BN states per domain: two per block plus the final one.
    pub fn num_bns(&self) -> usize {
        self.num_body_layers() + 1
    }

    fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.macro_widths.iter().any(|&w| w == 0) {
            return Err(MdError::Config("channel counts must be positive".into()));
        }
        if self.blocks_per_macro == 0 {
            return Err(MdError::Config("blocks_per_macro must be positive".into()));
        }
        if self.filter_size == 0 || self.filter_size % 2 == 0 {
            return Err(MdError::Config(format!(
                "filter size must be odd, got {}",
                self.filter_size
            )));
        }
        if self.class_counts.is_empty() {
            return Err(MdError::Config("at least one domain is required".into()));
        }
        if let Some(&k) = self.class_counts.iter().find(|&&k| k < 2) {
            return Err(MdError::Config(format!(
                "every domain needs at least 2 classes, got {k}"
            )));
        }
        Ok(())
    }
}

/// Static geometry of one residual block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct BlockPlan {
    pub macro_idx: usize,
    /// Input channels to the block (pre-projection on transitions).
    pub in_ch: usize,
    /// Output width of the block (the macro width).
    pub width: usize,
    /// True for the first block of macros 1 and 2: pool + projection skip.
    pub transition: bool,
    /// Universal layer indices of the two convolutions.
    pub layer1: usize,
    pub layer2: usize,
    /// BN indices of the two batch norms.
    pub bn1: usize,
    pub bn2: usize,
}

pub(crate) fn block_plans(cfg: &NetworkConfig) -> Vec<BlockPlan> {
    let b = cfg.blocks_per_macro;
    let mut plans = Vec::with_capacity(3 * b);
    for m in 0..3 {
        for blk in 0..b {
            let g = m * b + blk;
            let transition = m > 0 && blk == 0;
            let in_ch = if transition {
                cfg.macro_widths[m - 1]
            } else {
                cfg.macro_widths[m]
            };
            plans.push(BlockPlan {
                macro_idx: m,
                in_ch,
                width: cfg.macro_widths[m],
                transition,
                layer1: 1 + 2 * g,
                layer2: 2 + 2 * g,
                bn1: 2 * g,
                bn2: 2 * g + 1,
            });
        }
    }
    plans
}

/// Adapter shape at a conv site: series adapters act on the output
/// (C_out x C_out), parallel adapters bridge input to output (C_in x C_out).
pub(crate) fn adapter_shape(topology: Topology, in_ch: usize, out_ch: usize) -> (usize, usize) {
    match topology {
        Topology::Series => (out_ch, out_ch),
        Topology::Parallel => (in_ch, out_ch),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UniversalParams<S> {
    pub stem: FilterBank<S>,
    /// Residual-block convolutions in forward order; index = layer - 1.
    pub body: Vec<FilterBank<S>>,
    /// 1x1 skip projections into macro 1 and macro 2, as C_in x C_out.
    pub projections: Vec<Tensor<S>>,
}

impl<S: Scalar> UniversalParams<S> {
    pub fn param_count(&self) -> usize {
        self.stem.param_count()
            + self.body.iter().map(|f| f.param_count()).sum::<usize>()
            + self.projections.iter().map(|p| p.len()).sum::<usize>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainParams<S> {
    pub class_count: usize,
    /// Keyed by the universal layer index of the adapted convolution.
    pub adapters: BTreeMap<usize, AdapterMatrix<S>>,
    /// All batch-norm states in forward order; the last is the final BN.
    pub bns: Vec<BatchNormState<S>>,
    pub head_w: Tensor<S>,
    pub head_b: Vec<S>,
}

impl<S: Scalar> DomainParams<S> {
    pub fn adapter_param_count(&self) -> usize {
        self.adapters.values().map(|a| a.param_count()).sum()
    }

    /// Trainable BN parameters (gamma and beta; running stats excluded).
    pub fn bn_param_count(&self) -> usize {
        self.bns.iter().map(|b| b.param_count()).sum()
    }

    pub fn head_param_count(&self) -> usize {
        self.head_w.len() + self.head_b.len()
    }

    pub fn param_count(&self) -> usize {
        self.adapter_param_count() + self.bn_param_count() + self.head_param_count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiDomainNet<S> {
    pub cfg: NetworkConfig,
    pub placement: PlacementConfig,
    pub universal: UniversalParams<S>,
    pub domains: Vec<DomainParams<S>>,
}

fn gaussian_tensor<S: Scalar>(dims: &[usize], std: f64, rng: &mut CounterRng) -> Tensor<S> {
    Tensor::from_fn(dims, |_| S::from_f64(rng.normal() * std))
}

fn gaussian_bank<S: Scalar>(
    l: usize,
    c_in: usize,
    c_out: usize,
    rng: &mut CounterRng,
) -> FilterBank<S> {
    // He initialization: each conv follows a ReLU in the pre-activation
    // ordering, so variance 2/fan_in keeps activations scaled.
    let std = (2.0 / (l * l * c_in) as f64).sqrt();
    FilterBank::new(gaussian_tensor(&[l, l, c_in, c_out], std, rng)).expect("bank dims")
}

impl<S: Scalar> MultiDomainNet<S> {
    /// Build a network with freshly initialized universal parameters and
    /// one parameter store per configured domain. Adapters and heads start
    /// at zero and BN states at identity, so every domain initially
    /// computes the plain universal feature path with all-zero logits (the
    /// cross-entropy of a fresh domain is exactly ln K).
    pub fn build(cfg: NetworkConfig, placement: PlacementConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        placement.validate()?;
        let l = cfg.filter_size;

        let stem = gaussian_bank(
            l,
            cfg.input_channels,
            cfg.macro_widths[0],
            &mut CounterRng::stream(seed, 0),
        );
        let plans = block_plans(&cfg);
        let mut body = Vec::with_capacity(cfg.num_body_layers());
        for p in &plans {
            body.push(gaussian_bank(
                l,
                p.in_ch,
                p.width,
                &mut CounterRng::stream(seed, p.layer1 as u64),
            ));
            body.push(gaussian_bank(
                l,
                p.width,
                p.width,
                &mut CounterRng::stream(seed, p.layer2 as u64),
            ));
        }
        let mut projections = Vec::new();
        for m in 1..3 {
            let (c_in, c_out) = (cfg.macro_widths[m - 1], cfg.macro_widths[m]);
            let std = (1.0 / c_in as f64).sqrt();
            projections.push(gaussian_tensor(
                &[c_in, c_out],
                std,
                &mut CounterRng::stream(seed, 1_000 + m as u64),
            ));
        }

        let mut net = MultiDomainNet {
            cfg: cfg.clone(),
            placement,
            universal: UniversalParams {
                stem,
                body,
                projections,
            },
            domains: Vec::new(),
        };
        for d in 0..cfg.num_domains() {
            net.domains.push(net.fresh_domain(cfg.class_counts[d]));
        }
        Ok(net)
    }

    fn fresh_domain(&self, classes: usize) -> DomainParams<S> {
        let mut adapters = BTreeMap::new();
        for p in block_plans(&self.cfg) {
            for (conv_idx, (in_ch, layer)) in
                [(p.in_ch, p.layer1), (p.width, p.layer2)].into_iter().enumerate()
            {
                if self.placement.adapts(p.macro_idx, conv_idx) {
                    let (r, c) = adapter_shape(self.placement.topology, in_ch, p.width);
                    adapters.insert(layer, AdapterMatrix::zeros(r, c));
                }
            }
        }
        let bns = if self.domains.is_empty() {
            let mut v = Vec::new();
            for p in block_plans(&self.cfg) {
                v.push(BatchNormState::identity(p.in_ch));
                v.push(BatchNormState::identity(p.width));
            }
            v.push(BatchNormState::identity(self.cfg.macro_widths[2]));
            v
        } else {
            // New domains start from the base domain's normalization so the
            // zero-adapter network reproduces the base function exactly.
            self.domains[0].bns.clone()
        };
        let c_final = self.cfg.macro_widths[2];
        DomainParams {
            class_count: classes,
            adapters,
            bns,
            head_w: Tensor::zeros(&[c_final, classes]),
            head_b: vec![S::ZERO; classes],
        }
    }

    /// Register a new domain: zero adapters, BN cloned from the base
    /// domain, zero head. Returns its id.
    pub fn add_domain(&mut self, classes: usize) -> Result<usize> {
        if classes < 2 {
            return Err(MdError::Config(format!(
                "a domain needs at least 2 classes, got {classes}"
            )));
        }
        let id = self.domains.len();
        let d = self.fresh_domain(classes);
        self.domains.push(d);
        self.cfg.class_counts.push(classes);
        Ok(id)
    }

    pub fn domain(&self, id: usize) -> Result<&DomainParams<S>> {
        self.domains.get(id).ok_or(MdError::UnknownDomain(id))
    }

    pub fn domain_mut(&mut self, id: usize) -> Result<&mut DomainParams<S>> {
        self.domains.get_mut(id).ok_or(MdError::UnknownDomain(id))
    }

    /// Universal layer indices where the current placement attaches
    /// adapters, in forward order. Individual domains may carry fewer
    /// (a base domain registered under a bare placement carries none).
    pub fn adapted_layers(&self) -> Vec<usize> {
        let mut layers = Vec::new();
        for p in block_plans(&self.cfg) {
            if self.placement.adapts(p.macro_idx, 0) {
                layers.push(p.layer1);
            }
            if self.placement.adapts(p.macro_idx, 1) {
                layers.push(p.layer2);
            }
        }
        layers
    }
}

// ---------------------------------------------------------------------------
// Name-keyed parameter access.
// ---------------------------------------------------------------------------

fn parse_index(s: &str, what: &str) -> Result<usize> {
    s.parse()
        .map_err(|_| MdError::Config(format!("bad {what} index '{s}' in parameter name")))
}

impl<S: Scalar> MultiDomainNet<S> {
    /// Canonical names of every parameter tensor, universal first, then
    /// each domain in forward order. These names are shared by
    /// checkpoints, gradients, and the optimizer.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec!["universal/layer/0/filter".to_string()];
        for i in 1..=self.cfg.num_body_layers() {
            names.push(format!("universal/layer/{i}/filter"));
        }
        for m in 1..3 {
            names.push(format!("universal/proj/{m}/filter"));
        }
        for (d, dom) in self.domains.iter().enumerate() {
            for &layer in dom.adapters.keys() {
                names.push(format!("domain/{d}/layer/{layer}/alpha"));
            }
            for j in 0..dom.bns.len() {
                names.push(format!("domain/{d}/bn/{j}/gamma"));
                names.push(format!("domain/{d}/bn/{j}/beta"));
            }
            names.push(format!("domain/{d}/head/weight"));
            names.push(format!("domain/{d}/head/bias"));
        }
        names
    }

    /// Mutable view of the parameter slice behind a canonical name.
    /// BN running statistics are state, not parameters, and have no name
    /// here; they are serialized by checkpoints all the same.
    pub fn param_mut(&mut self, name: &str) -> Result<&mut [S]> {
        let parts: Vec<&str> = name.split('/').collect();
        let bad = || MdError::Config(format!("unknown parameter name '{name}'"));
        match parts.as_slice() {
            ["universal", "layer", i, "filter"] => {
                let i = parse_index(i, "layer")?;
                if i == 0 {
                    Ok(self.universal.stem.tensor_mut().data_mut())
                } else {
                    let n = self.universal.body.len();
                    self.universal
                        .body
                        .get_mut(i - 1)
                        .map(|f| f.tensor_mut().data_mut())
                        .ok_or_else(|| {
                            MdError::Config(format!(
                                "layer {i} out of range (body has {n} layers)"
                            ))
                        })
                }
            }
            ["universal", "proj", m, "filter"] => {
                let m = parse_index(m, "projection")?;
                self.universal
                    .projections
                    .get_mut(m.wrapping_sub(1))
                    .map(|p| p.data_mut())
                    .ok_or_else(bad)
            }
            ["domain", d, rest @ ..] => {
                let d = parse_index(d, "domain")?;
                let dom = self
                    .domains
                    .get_mut(d)
                    .ok_or(MdError::UnknownDomain(d))?;
                match rest {
                    ["layer", i, "alpha"] => {
                        let i = parse_index(i, "layer")?;
                        dom.adapters
                            .get_mut(&i)
                            .map(|a| a.tensor_mut().data_mut())
                            .ok_or_else(bad)
                    }
                    ["bn", j, field] => {
                        let j = parse_index(j, "bn")?;
                        let bn = dom.bns.get_mut(j).ok_or_else(bad)?;
                        match *field {
                            "gamma" => Ok(bn.gamma.as_mut_slice()),
                            "beta" => Ok(bn.beta.as_mut_slice()),
                            _ => Err(bad()),
                        }
                    }
                    ["head", "weight"] => Ok(dom.head_w.data_mut()),
                    ["head", "bias"] => Ok(dom.head_b.as_mut_slice()),
                    _ => Err(bad()),
                }
            }
            _ => Err(bad()),
        }
    }

    /// Immutable counterpart of [`param_mut`].
    pub fn param(&self, name: &str) -> Result<&[S]> {
        let parts: Vec<&str> = name.split('/').collect();
        let bad = || MdError::Config(format!("unknown parameter name '{name}'"));
        match parts.as_slice() {
            ["universal", "layer", i, "filter"] => {
                let i = parse_index(i, "layer")?;
                if i == 0 {
                    Ok(self.universal.stem.tensor().data())
                } else {
                    self.universal
                        .body
                        .get(i - 1)
                        .map(|f| f.tensor().data())
                        .ok_or_else(bad)
                }
            }
            ["universal", "proj", m, "filter"] => {
                let m = parse_index(m, "projection")?;
                self.universal
                    .projections
                    .get(m.wrapping_sub(1))
                    .map(|p| p.data())
                    .ok_or_else(bad)
            }
            ["domain", d, rest @ ..] => {
                let d = parse_index(d, "domain")?;
                let dom = self.domains.get(d).ok_or(MdError::UnknownDomain(d))?;
                match rest {
                    ["layer", i, "alpha"] => {
                        let i = parse_index(i, "layer")?;
                        dom.adapters
                            .get(&i)
                            .map(|a| a.tensor().data())
                            .ok_or_else(bad)
                    }
                    ["bn", j, field] => {
                        let j = parse_index(j, "bn")?;
                        let bn = dom.bns.get(j).ok_or_else(bad)?;
                        match *field {
                            "gamma" => Ok(bn.gamma.as_slice()),
                            "beta" => Ok(bn.beta.as_slice()),
                            _ => Err(bad()),
                        }
                    }
                    ["head", "weight"] => Ok(dom.head_w.data()),
                    ["head", "bias"] => Ok(dom.head_b.as_slice()),
                    _ => Err(bad()),
                }
            }
            _ => Err(bad()),
        }
    }
}

// ---------------------------------------------------------------------------
// Training-regime partition and budget accounting.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    FinetuneAll,
    AdaptersOnly,
    HeadOnly,
}

impl Regime {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "finetune_all" => Ok(Regime::FinetuneAll),
            "adapters_only" => Ok(Regime::AdaptersOnly),
            "head_only" => Ok(Regime::HeadOnly),
            other => Err(MdError::Config(format!(
                "unknown regime '{other}' (expected finetune_all, adapters_only, head_only)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::FinetuneAll => "finetune_all",
            Regime::AdaptersOnly => "adapters_only",
            Regime::HeadOnly => "head_only",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamPartition {
    pub trainable: Vec<String>,
    pub frozen: Vec<String>,
    pub trainable_count: usize,
    pub frozen_count: usize,
}

impl<S: Scalar> MultiDomainNet<S> {
    /// Split parameter names into trainable and frozen sets for training
    /// `domain` under `regime`. Other domains' parameters are always
    /// frozen (and listed as such).
    pub fn partition_params(&self, domain: usize, regime: Regime) -> Result<ParamPartition> {
        self.domain(domain)?;
        let domain_prefix = format!("domain/{domain}/");
        let mut trainable = Vec::new();
        let mut frozen = Vec::new();
        for name in self.param_names() {
            let of_domain = name.starts_with(&domain_prefix);
            let is_universal = name.starts_with("universal/");
            let on = match regime {
                Regime::FinetuneAll => is_universal || of_domain,
                Regime::AdaptersOnly => of_domain,
                Regime::HeadOnly => {
                    of_domain
                        && (name.ends_with("/head/weight") || name.ends_with("/head/bias"))
                }
            };
            if on {
                trainable.push(name);
            } else {
                frozen.push(name);
            }
        }
        let count = |names: &[String]| -> usize {
            names.iter().map(|n| self.param(n).map(|s| s.len()).unwrap_or(0)).sum()
        };
        Ok(ParamPartition {
            trainable_count: count(&trainable),
            frozen_count: count(&frozen),
            trainable,
            frozen,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainBudget {
    pub domain: usize,
    pub adapters: usize,
    pub bn: usize,
    pub head: usize,
}

impl DomainBudget {
    pub fn total(&self) -> usize {
        self.adapters + self.bn + self.head
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BudgetReport {
    pub universal: usize,
    pub domains: Vec<DomainBudget>,
    pub adapted_layer_count: usize,
    /// 1 + sum over domains of domain_total / universal.
    pub budget_factor: f64,
}

impl<S: Scalar> MultiDomainNet<S> {
    pub fn count_params(&self) -> BudgetReport {
        let universal = self.universal.param_count();
        let domains: Vec<DomainBudget> = self
            .domains
            .iter()
            .enumerate()
            .map(|(d, dom)| DomainBudget {
                domain: d,
                adapters: dom.adapter_param_count(),
                bn: dom.bn_param_count(),
                head: dom.head_param_count(),
            })
            .collect();
        let extra: usize = domains.iter().map(|d| d.total()).sum();
        BudgetReport {
            universal,
            adapted_layer_count: self.adapted_layers().len(),
            budget_factor: 1.0 + extra as f64 / universal as f64,
            domains,
        }
    }
}

impl std::fmt::Display for BudgetReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "universal parameters: {}", self.universal)?;
        writeln!(f, "adapted conv layers:  {}", self.adapted_layer_count)?;
        for d in &self.domains {
            writeln!(
                f,
                "domain {}: adapters {} + bn {} + head {} = {}",
                d.domain,
                d.adapters,
                d.bn,
                d.head,
                d.total()
            )?;
        }
        write!(f, "budget factor: {:.4}", self.budget_factor)
    }
}

// ---------------------------------------------------------------------------
// Checkpoint serialization.
// ---------------------------------------------------------------------------

const META_ARCH: &str = "meta/arch";
const META_CLASSES: &str = "meta/classes";
const META_PLACEMENT: &str = "meta/placement";
const META_DROPOUT: &str = "meta/dropout_p";

impl<S: Scalar> MultiDomainNet<S> {
    /// Serialize every parameter and BN state into a checkpoint. Entries
    /// follow the canonical naming convention plus `meta/...` records that
    /// pin the architecture and placement.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        let c = &self.cfg;
        ck.insert_u32(
            META_ARCH,
            &[
                c.input_channels as u32,
                c.macro_widths[0] as u32,
                c.macro_widths[1] as u32,
                c.macro_widths[2] as u32,
                c.blocks_per_macro as u32,
                c.filter_size as u32,
            ],
        )?;
        let classes: Vec<u32> = c.class_counts.iter().map(|&k| k as u32).collect();
        ck.insert_u32(META_CLASSES, &classes)?;
        let p = &self.placement;
        let macro_bits = u32::from(p.macros.early)
            | u32::from(p.macros.mid) << 1
            | u32::from(p.macros.late) << 2;
        let within = match p.within_block {
            WithinBlock::BothConvs => 0u32,
            WithinBlock::SecondOnly => 1,
        };
        let topology = match p.topology {
            Topology::Series => 0u32,
            Topology::Parallel => 1,
        };
        let dropout_on = u32::from(p.dropout.prob() > 0.0);
        ck.insert_u32(META_PLACEMENT, &[macro_bits, within, topology, dropout_on])?;
        ck.insert_tensor(
            META_DROPOUT,
            &Tensor::<f64>::new(&[1], vec![p.dropout.prob()])?,
        )?;

        ck.insert_tensor("universal/layer/0/filter", self.universal.stem.tensor())?;
        for (i, bank) in self.universal.body.iter().enumerate() {
            ck.insert_tensor(&format!("universal/layer/{}/filter", i + 1), bank.tensor())?;
        }
        for (m, proj) in self.universal.projections.iter().enumerate() {
            ck.insert_tensor(&format!("universal/proj/{}/filter", m + 1), proj)?;
        }
        for (d, dom) in self.domains.iter().enumerate() {
            for (&layer, a) in &dom.adapters {
                ck.insert_tensor(&format!("domain/{d}/layer/{layer}/alpha"), a.tensor())?;
            }
            for (j, bn) in dom.bns.iter().enumerate() {
                let vecs = [
                    ("gamma", &bn.gamma),
                    ("beta", &bn.beta),
                    ("running_mean", &bn.running_mean),
                    ("running_var", &bn.running_var),
                ];
                for (field, v) in vecs {
                    ck.insert_tensor(
                        &format!("domain/{d}/bn/{j}/{field}"),
                        &Tensor::new(&[v.len()], v.clone())?,
                    )?;
                }
            }
            ck.insert_tensor(&format!("domain/{d}/head/weight"), &dom.head_w)?;
            ck.insert_tensor(
                &format!("domain/{d}/head/bias"),
                &Tensor::new(&[dom.head_b.len()], dom.head_b.clone())?,
            )?;
        }
        Ok(ck)
    }

    /// Rebuild a network from a checkpoint produced by [`to_checkpoint`].
    /// Unknown extra entries (fusion stashes, factorization products) are
    /// ignored; missing parameter entries are integrity errors.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let arch = ck.u32s(META_ARCH)?;
        if arch.len() != 6 {
            return Err(MdError::Integrity(format!(
                "meta/arch must hold 6 values, got {}",
                arch.len()
            )));
        }
        let classes = ck.u32s(META_CLASSES)?;
        let cfg = NetworkConfig {
            input_channels: arch[0] as usize,
            macro_widths: [arch[1] as usize, arch[2] as usize, arch[3] as usize],
            blocks_per_macro: arch[4] as usize,
            filter_size: arch[5] as usize,
            class_counts: classes.iter().map(|&k| k as usize).collect(),
        };
        let pl = ck.u32s(META_PLACEMENT)?;
        if pl.len() != 4 {
            return Err(MdError::Integrity("meta/placement must hold 4 values".into()));
        }
        let dropout_p = ck.tensor::<f64>(META_DROPOUT)?.data()[0];
        let placement = PlacementConfig {
            macros: MacroSelection {
                early: pl[0] & 1 != 0,
                mid: pl[0] & 2 != 0,
                late: pl[0] & 4 != 0,
            },
            within_block: if pl[1] == 0 {
                WithinBlock::BothConvs
            } else {
                WithinBlock::SecondOnly
            },
            topology: if pl[2] == 0 {
                Topology::Series
            } else {
                Topology::Parallel
            },
            dropout: if pl[3] == 0 {
                DropoutSetting::Off
            } else {
                DropoutSetting::BeforeSecondAdapter(dropout_p)
            },
        };

        let mut net = MultiDomainNet::<S>::build(cfg, placement, 0)?;
        // Each domain carries exactly the adapters the checkpoint holds
        // for it: a base domain trained before adapters were placed has
        // none, while domains registered afterwards carry the placement's
        // full set.
        let mut site_dims: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
        for p in block_plans(&net.cfg) {
            site_dims.insert(p.layer1, (p.in_ch, p.width));
            site_dims.insert(p.layer2, (p.width, p.width));
        }
        for d in 0..net.domains.len() {
            let prefix = format!("domain/{d}/layer/");
            let mut adapters = BTreeMap::new();
            for name in ck.names() {
                let Some(rest) = name.strip_prefix(&prefix) else {
                    continue;
                };
                let Some(layer_s) = rest.strip_suffix("/alpha") else {
                    continue;
                };
                let layer = parse_index(layer_s, "layer")?;
                let &(in_ch, width) = site_dims.get(&layer).ok_or_else(|| {
                    MdError::Integrity(format!("adapter entry '{name}' names no body layer"))
                })?;
                let want = adapter_shape(net.placement.topology, in_ch, width);
                let t = ck.tensor::<S>(name)?;
                if t.dims() != [want.0, want.1] {
                    return Err(MdError::Integrity(format!(
                        "adapter entry '{name}' is {:?}, expected {:?}",
                        t.dims(),
                        [want.0, want.1]
                    )));
                }
                adapters.insert(layer, AdapterMatrix::new(t)?);
            }
            net.domains[d].adapters = adapters;
        }
        // Overwrite every parameter from the checkpoint.
        for name in net.param_names() {
            let stored = ck.tensor::<S>(&name)?;
            let dst = net.param_mut(&name)?;
            if stored.len() != dst.len() {
                return Err(MdError::Integrity(format!(
                    "checkpoint entry '{name}' has {} values, expected {}",
                    stored.len(),
                    dst.len()
                )));
            }
            dst.copy_from_slice(stored.data());
        }
        // BN running statistics ride along outside the parameter list.
        for (d, dom) in net.domains.iter_mut().enumerate() {
            for (j, bn) in dom.bns.iter_mut().enumerate() {
                for (field, v) in [
                    ("running_mean", &mut bn.running_mean),
                    ("running_var", &mut bn.running_var),
                ] {
                    let t = ck.tensor::<S>(&format!("domain/{d}/bn/{j}/{field}"))?;
                    if t.len() != v.len() {
                        return Err(MdError::Integrity(format!(
                            "domain/{d}/bn/{j}/{field} has {} values, expected {}",
                            t.len(),
                            v.len()
                        )));
                    }
                    v.copy_from_slice(t.data());
                }
            }
        }
        Ok(net)
    }
}

/// Digest of the universal parameter store inside a checkpoint.
pub fn universal_digest(ck: &Checkpoint) -> String {
    ck.digest("universal/")
}

// ---------------------------------------------------------------------------
// Checkpoint-level fusion.
// ---------------------------------------------------------------------------

/// Fold one domain's adapters into the universal filters, producing a
/// deployment checkpoint for that domain: its adapted layers run as plain
/// convolutions with zero adapter overhead.
///
/// The original filter and adapter records are stashed bitwise under
/// `fuse/layer/<i>/...` so that [`unfuse_checkpoint`] restores the input
/// exactly, independent of floating-point rounding in the fused filters.
/// Other domains' entries ride along untouched; they are only meaningful
/// again after unfusing.
pub fn fuse_checkpoint<S: Scalar>(ck: &Checkpoint, domain: usize) -> Result<Checkpoint> {
    if ck.names().any(|n| n.starts_with("fuse/")) {
        return Err(MdError::Config(
            "checkpoint is already fused; unfuse it first".into(),
        ));
    }
    let net = MultiDomainNet::<S>::from_checkpoint(ck)?;
    let dom = net.domain(domain)?;
    if dom.adapters.is_empty() {
        return Err(MdError::Config(format!(
            "domain {domain} has no adapters to fuse"
        )));
    }
    let mut out = ck.clone();
    for (&layer, alpha) in &dom.adapters {
        let host = &net.universal.body[layer - 1];
        let fused = match net.placement.topology {
            Topology::Series => crate::adapters::fuse_series(host, alpha)?,
            Topology::Parallel => crate::adapters::fuse_parallel(host, alpha)?,
        };
        let filter_name = format!("universal/layer/{layer}/filter");
        let orig = out
            .get(&filter_name)
            .ok_or_else(|| MdError::Integrity(format!("'{filter_name}' is missing")))?
            .clone();
        out.insert(&format!("fuse/layer/{layer}/orig"), orig)?;
        out.insert_tensor(&filter_name, fused.tensor())?;
        let alpha_name = format!("domain/{domain}/layer/{layer}/alpha");
        let alpha_rec = out.remove(&alpha_name).ok_or_else(|| {
            MdError::Integrity(format!("'{alpha_name}' is missing"))
        })?;
        out.insert(&format!("fuse/layer/{layer}/alpha"), alpha_rec)?;
    }
    out.insert_u32("fuse/domain", &[domain as u32])?;
    Ok(out)
}

/// Exact inverse of [`fuse_checkpoint`]: restores the stashed filter and
/// adapter records and drops the stash. The result is bitwise identical
/// to the checkpoint that was fused.
pub fn unfuse_checkpoint(ck: &Checkpoint) -> Result<Checkpoint> {
    if !ck.contains("fuse/domain") {
        return Err(MdError::Config("checkpoint is not fused".into()));
    }
    let domain = ck.u32s("fuse/domain")?[0] as usize;
    let mut out = ck.clone();
    out.remove("fuse/domain");
    let stashed: Vec<String> = ck
        .names()
        .filter(|n| n.starts_with("fuse/layer/"))
        .map(str::to_string)
        .collect();
    for name in stashed {
        let rest = name.strip_prefix("fuse/layer/").expect("filtered");
        let rec = out.remove(&name).expect("listed from this checkpoint");
        if let Some(layer) = rest.strip_suffix("/orig") {
            parse_index(layer, "layer")?;
            out.insert(&format!("universal/layer/{layer}/filter"), rec)?;
        } else if let Some(layer) = rest.strip_suffix("/alpha") {
            parse_index(layer, "layer")?;
            out.insert(&format!("domain/{domain}/layer/{layer}/alpha"), rec)?;
        } else {
            return Err(MdError::Integrity(format!(
                "unrecognized fuse stash entry '{name}'"
            )));
        }
    }
    Ok(out)
}
