//! Command-line workflow: synthetic data generation, base training,
//! per-domain adaptation, fusion, joint compression, γ fine-tuning,
//! evaluation, parameter budgets, and the gradient-check suite.
//!
//! Every tunable resolves with the precedence command-line flag > config
//! file (`--config`, one `key = value` per line) > built-in default, and
//! the fully resolved configuration is echoed at the start of the run and
//! recorded in `manifest.txt` together with digests of every input file.
//! All artifacts land under `--out` with fixed names; nothing is written
//! elsewhere.
//!
//! Exit codes: 0 success, 1 usage error (flags, config, file formats),
//! 2 runtime failure (numeric, divergence, integrity, I/O).

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::adapters::{adapter_param_fraction, Topology};
use crate::config::Settings;
use crate::error::{MdError, Result};
use crate::gradcheck::run_full_suite;
use crate::io::tensor_file::atomic_write;
use crate::io::{generate_domain, Checkpoint, Dataset, SyntheticDomainSpec};
use crate::network::{
    fuse_checkpoint, unfuse_checkpoint, DropoutSetting, MacroSelection,
    MultiDomainNet, NetworkConfig, PlacementConfig, Regime, WithinBlock,
};
use crate::tensor::{Dtype, Tensor};
use crate::trainer::{
    self, eval_metrics, factorize_adapters, network_from_checkpoint, store_factorization,
    RankSpec, RunReport, TrainConfig, WeightDecayPolicy,
};

#[derive(Parser, Debug)]
#[command(
    name = "mdnet",
    version,
    about = "Multi-domain convolutional network toolkit",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic grating-classification domain under --out
    /// (train/ and val/ dataset directories).
    GenData(GenDataArgs),
    /// Train the universal network plus domain 0 from scratch.
    TrainBase(TrainBaseArgs),
    /// Adapt a trained base checkpoint to a domain.
    TrainDomain(TrainDomainArgs),
    /// Evaluate a checkpoint's domain on a dataset.
    Eval(EvalArgs),
    /// Fold one domain's adapters into the filters (deployment artifact).
    Fuse(FuseArgs),
    /// Bitwise-exact inverse of fuse.
    Unfuse(UnfuseArgs),
    /// Jointly factorize several domains' adapters to low rank.
    Compress(CompressArgs),
    /// Fine-tune the per-domain factors of a compressed checkpoint.
    FinetuneGamma(FinetuneGammaArgs),
    /// Report parameter budgets and adapter storage for a checkpoint.
    ReportParams(ReportParamsArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

/// Flags shared by every command.
#[derive(Args, Debug, Default)]
struct Shared {
    /// Key=value config file consulted between flags and defaults.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for every pseudo-random draw in the run.
    #[arg(long)]
    seed: Option<u64>,
    /// Numeric precision of the run.
    #[arg(long, value_name = "single|double")]
    precision: Option<String>,
    /// Directory receiving every artifact of the run.
    #[arg(long, value_name = "DIR")]
    out: Option<String>,
}

impl Shared {
    fn settings(&self) -> Result<Settings> {
        let mut s = Settings::new();
        if let Some(path) = &self.config {
            s.load_file(path)?;
        }
        if let Some(v) = self.seed {
            s.set_flag("seed", v.to_string());
        }
        if let Some(v) = &self.precision {
            s.set_flag("precision", v.clone());
        }
        if let Some(v) = &self.out {
            s.set_flag("out", v.clone());
        }
        Ok(s)
    }
}

/// Optimization knobs shared by the training commands.
#[derive(Args, Debug, Default)]
struct TrainKnobs {
    /// Training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Mini-batch size.
    #[arg(long)]
    batch: Option<usize>,
    /// Initial learning rate; steps down 10x at each decay point.
    #[arg(long)]
    lr: Option<f64>,
    /// Epoch fractions where the rate decays (comma separated).
    #[arg(long, value_name = "F,F,..")]
    lr_decays: Option<String>,
    /// SGD momentum.
    #[arg(long)]
    momentum: Option<f64>,
    /// Weight decay: a value, or 'auto' for the size-tiered policy.
    #[arg(long, value_name = "VALUE|auto")]
    wd: Option<String>,
}

impl TrainKnobs {
    fn apply(&self, s: &mut Settings) {
        if let Some(v) = self.epochs {
            s.set_flag("epochs", v.to_string());
        }
        if let Some(v) = self.batch {
            s.set_flag("batch", v.to_string());
        }
        if let Some(v) = self.lr {
            s.set_flag("lr", v.to_string());
        }
        if let Some(v) = &self.lr_decays {
            s.set_flag("lr_decays", v.clone());
        }
        if let Some(v) = self.momentum {
            s.set_flag("momentum", v.to_string());
        }
        if let Some(v) = &self.wd {
            s.set_flag("wd", v.clone());
        }
    }
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[command(flatten)]
    shared: Shared,
    /// Number of classes.
    #[arg(long)]
    classes: Option<usize>,
    /// Training images per class.
    #[arg(long)]
    per_class: Option<usize>,
    /// Validation images per class.
    #[arg(long)]
    val_per_class: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    /// Rotates grating orientations and the channel palette (radians).
    #[arg(long)]
    palette_rotation: Option<f64>,
    /// Grating frequency in cycles across the image.
    #[arg(long)]
    texture_frequency: Option<f64>,
    /// Standard deviation of the additive pixel noise.
    #[arg(long)]
    noise_sigma: Option<f64>,
    /// Dataset name recorded in meta.txt (weight-decay overrides key on it).
    #[arg(long)]
    name: Option<String>,
}

#[derive(Args, Debug)]
struct TrainBaseArgs {
    #[command(flatten)]
    shared: Shared,
    #[command(flatten)]
    knobs: TrainKnobs,
    /// Dataset directory holding train/ and val/ subdirectories.
    #[arg(long, value_name = "DIR")]
    data: Option<String>,
    /// Macro widths, e.g. 64,128,256.
    #[arg(long, value_name = "W,W,W")]
    widths: Option<String>,
    /// Residual blocks per macro.
    #[arg(long)]
    blocks: Option<usize>,
    /// Convolution filter size (odd).
    #[arg(long)]
    filter: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainDomainArgs {
    #[command(flatten)]
    shared: Shared,
    #[command(flatten)]
    knobs: TrainKnobs,
    /// Base (or previously adapted) checkpoint to extend.
    #[arg(long, value_name = "CKPT")]
    base: Option<String>,
    /// Dataset directory holding train/ and val/ subdirectories.
    #[arg(long, value_name = "DIR")]
    data: Option<String>,
    /// Domain id: the next unused id registers a new domain.
    #[arg(long)]
    domain: Option<usize>,
    /// Training regime: adapters_only, head_only, or finetune_all.
    #[arg(long)]
    regime: Option<String>,
    /// Adapter topology for newly registered domains.
    #[arg(long, value_name = "series|parallel")]
    topology: Option<String>,
    /// Macro groups that receive adapters (all, or a list of early,mid,late).
    #[arg(long, value_name = "all|early|mid|late")]
    placement: Option<String>,
    /// Adapt both convolutions of each block, or only the second.
    #[arg(long, value_name = "both|second")]
    within: Option<String>,
    /// Adapter-branch dropout probability, or 'off'.
    #[arg(long, value_name = "P|off")]
    dropout: Option<String>,
    /// Stratified fraction of the training set to use, in (0,1].
    #[arg(long)]
    fraction: Option<f64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    shared: Shared,
    #[arg(long, value_name = "CKPT")]
    ckpt: Option<String>,
    /// Dataset directory (a split directory, or a parent with --split).
    #[arg(long, value_name = "DIR")]
    data: Option<String>,
    #[arg(long)]
    domain: Option<usize>,
    /// Which split of --data to evaluate when it has subdirectories.
    #[arg(long, value_name = "train|val")]
    split: Option<String>,
}

#[derive(Args, Debug)]
struct FuseArgs {
    #[command(flatten)]
    shared: Shared,
    #[arg(long, value_name = "CKPT")]
    ckpt: Option<String>,
    /// Domain whose adapters are folded in.
    #[arg(long)]
    domain: Option<usize>,
}

#[derive(Args, Debug)]
struct UnfuseArgs {
    #[command(flatten)]
    shared: Shared,
    #[arg(long, value_name = "CKPT")]
    ckpt: Option<String>,
}

#[derive(Args, Debug)]
struct CompressArgs {
    #[command(flatten)]
    shared: Shared,
    #[arg(long, value_name = "CKPT")]
    ckpt: Option<String>,
    /// Domains to factorize jointly, ascending (e.g. 1,2,3).
    #[arg(long, value_name = "D,D,..")]
    domains: Option<String>,
    /// Kept rank: an integer, or 'half' for C/2 per layer.
    #[arg(long, value_name = "K|half")]
    rank: Option<String>,
}

#[derive(Args, Debug)]
struct FinetuneGammaArgs {
    #[command(flatten)]
    shared: Shared,
    #[command(flatten)]
    knobs: TrainKnobs,
    /// Compressed checkpoint produced by `compress`.
    #[arg(long, value_name = "CKPT")]
    fact: Option<String>,
    /// Dataset directories, one per covered domain in ascending order.
    #[arg(long, value_name = "DIR", action = clap::ArgAction::Append)]
    data: Vec<String>,
}

#[derive(Args, Debug)]
struct ReportParamsArgs {
    #[command(flatten)]
    shared: Shared,
    #[arg(long, value_name = "CKPT")]
    ckpt: Option<String>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[command(flatten)]
    shared: Shared,
    /// Maximum allowed relative error.
    #[arg(long)]
    tolerance: Option<f64>,
}

/// Entry point used by the binary and by tests. Parses `argv`, runs the
/// command, and maps the outcome to an exit code; everything the command
/// prints goes to `out`.
pub fn run<I, T>(argv: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = write!(out, "{e}");
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match dispatch(&cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(out, "error: {e}");
            if e.is_usage() {
                1
            } else {
                2
            }
        }
    }
}

fn dispatch(command: &Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::GenData(a) => cmd_gen_data(a, out),
        Command::TrainBase(a) => cmd_train_base(a, out),
        Command::TrainDomain(a) => cmd_train_domain(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Fuse(a) => cmd_fuse(a, out),
        Command::Unfuse(a) => cmd_unfuse(a, out),
        Command::Compress(a) => cmd_compress(a, out),
        Command::FinetuneGamma(a) => cmd_finetune_gamma(a, out),
        Command::ReportParams(a) => cmd_report_params(a, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, out),
    }
}

/// Runs `body` with the scalar type selected by a precision string.
macro_rules! with_scalar {
    ($dtype:expr, $S:ident => $body:expr) => {
        match $dtype {
            Dtype::Double => {
                type $S = f64;
                $body
            }
            _ => {
                type $S = f32;
                $body
            }
        }
    };
}

// ---------------------------------------------------------------------------
// Shared resolution helpers.
// ---------------------------------------------------------------------------

fn require(s: &mut Settings, key: &str) -> Result<String> {
    let v = s.get(key, "");
    if v.is_empty() {
        Err(MdError::Config(format!("missing required --{key}")))
    } else {
        Ok(v)
    }
}

fn resolve_out(s: &mut Settings) -> Result<PathBuf> {
    let dir = PathBuf::from(s.get("out", "out"));
    fs::create_dir_all(&dir).map_err(|e| MdError::io(dir.display().to_string(), e))?;
    Ok(dir)
}

/// Resolve `precision`. Commands operating on an existing checkpoint pass
/// its stored dtype so the default matches the file; an explicit flag or
/// config value still wins (and a mismatch fails when entries are read).
fn resolve_precision(s: &mut Settings, inferred: Option<Dtype>) -> Result<Dtype> {
    let default = match inferred {
        Some(Dtype::Double) => "double",
        _ => "single",
    };
    Ok(
        match s.get_choice("precision", default, &["single", "double"])?.as_str() {
            "double" => Dtype::Double,
            _ => Dtype::Single,
        },
    )
}

fn resolve_train(s: &mut Settings, regime: Regime, dropout: DropoutSetting) -> Result<TrainConfig> {
    let epochs = s.get_usize("epochs", 30)?;
    let batch_size = s.get_usize("batch", 32)?;
    let lr = s.get_f64("lr", 0.01)?;
    let lr_decays = parse_f64_list(&s.get("lr_decays", "0.6,0.8"), "lr_decays")?;
    if lr_decays.iter().any(|d| !(0.0..=1.0).contains(d)) {
        return Err(MdError::Config(
            "lr_decays entries must be epoch fractions in [0,1]".into(),
        ));
    }
    let momentum = s.get_f64("momentum", 0.9)?;
    let seed = s.get_u64("seed", 0)?;
    let wd_raw = s.get("wd", "auto");
    let weight_decay = if wd_raw == "auto" {
        WeightDecayPolicy::default()
    } else {
        let v: f64 = wd_raw
            .parse()
            .map_err(|_| MdError::Config(format!("wd = '{wd_raw}' is not a number or 'auto'")))?;
        WeightDecayPolicy::fixed(v)
    };
    Ok(TrainConfig {
        epochs,
        batch_size,
        lr,
        lr_decays,
        momentum,
        regime,
        weight_decay,
        dropout,
        seed,
    })
}

fn parse_f64_list(raw: &str, key: &str) -> Result<Vec<f64>> {
    if raw.trim().is_empty() || raw.trim() == "none" {
        return Ok(Vec::new());
    }
    raw.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| MdError::Config(format!("{key}: '{p}' is not a number")))
        })
        .collect()
}

fn parse_usize_list(raw: &str, key: &str) -> Result<Vec<usize>> {
    raw.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| MdError::Config(format!("{key}: '{p}' is not an integer")))
        })
        .collect()
}

fn load_checkpoint(path: &str) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| MdError::io(path.to_string(), e))?;
    Checkpoint::decode(&bytes, path)
}

fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    atomic_write(path, &ck.encode())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    atomic_write(path, text.as_bytes())
}

/// Dtype of the universal stem filter — the precision the file was saved in.
fn checkpoint_dtype(ck: &Checkpoint) -> Result<Dtype> {
    ck.get("universal/layer/0/filter")
        .map(|r| r.dtype())
        .ok_or_else(|| {
            MdError::Integrity("checkpoint holds no universal/layer/0/filter entry".into())
        })
}

fn load_splits(dir: &str) -> Result<(Dataset, Dataset)> {
    let dir = Path::new(dir);
    let train = Dataset::load_dir(&dir.join("train"))?;
    let val = Dataset::load_dir(&dir.join("val"))?;
    Ok((train, val))
}

const DATASET_FILES: [&str; 3] = ["images.mdtb", "labels.mdtb", "meta.txt"];

fn split_inputs(label: &str, dir: &str) -> Vec<(String, PathBuf)> {
    let mut v = Vec::new();
    for split in ["train", "val"] {
        for f in DATASET_FILES {
            v.push((
                format!("{label}/{split}/{f}"),
                Path::new(dir).join(split).join(f),
            ));
        }
    }
    v
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| MdError::io(path.display().to_string(), e))?;
    let out = Sha256::digest(&bytes);
    let mut hex = String::with_capacity(64);
    for b in out {
        let _ = write!(hex, "{b:02x}");
    }
    Ok(hex)
}

/// The reproduction record of a run: command, resolved configuration, and
/// a digest of every input file.
fn write_manifest(
    out_dir: &Path,
    command: &str,
    s: &Settings,
    inputs: &[(String, PathBuf)],
) -> Result<()> {
    let mut text = format!("command = {command}\n");
    text.push_str(&s.resolved_config());
    for (label, path) in inputs {
        text.push_str(&format!("digest/{label} = {}\n", sha256_file(path)?));
    }
    write_text(&out_dir.join("manifest.txt"), &text)
}

fn echo(s: &Settings, out: &mut dyn Write) -> Result<()> {
    write!(out, "resolved configuration:\n{}", s.echo())
        .map_err(|e| MdError::io("stdout", e))
}

fn say(out: &mut dyn Write, line: std::fmt::Arguments) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| MdError::io("stdout", e))
}

fn write_report_files(out_dir: &Path, suffix: &str, report: &RunReport) -> Result<()> {
    write_text(&out_dir.join(format!("report{suffix}.csv")), &report.to_csv())?;
    write_text(&out_dir.join(format!("summary{suffix}.txt")), &report.summary())
}

// ---------------------------------------------------------------------------
// Commands.
// ---------------------------------------------------------------------------

fn cmd_gen_data(args: &GenDataArgs, out: &mut dyn Write) -> Result<()> {
    let mut s = args.shared.settings()?;
    for (key, v) in [
        ("classes", args.classes),
        ("per_class", args.per_class),
        ("val_per_class", args.val_per_class),
        ("height", args.height),
        ("width", args.width),
        ("channels", args.channels),
    ] {
        if let Some(v) = v {
            s.set_flag(key, v.to_string());
        }
    }
    for (key, v) in [
        ("palette_rotation", args.palette_rotation),
        ("texture_frequency", args.texture_frequency),
        ("noise_sigma", args.noise_sigma),
    ] {
        if let Some(v) = v {
            s.set_flag(key, v.to_string());
        }
    }
    if let Some(v) = &args.name {
        s.set_flag("name", v.clone());
    }

    let out_dir = resolve_out(&mut s)?;
    let seed = s.get_u64("seed", 0)?;
    let classes = s.get_usize("classes", 10)?;
    let per_class = s.get_usize("per_class", 100)?;
    let val_per_class = s.get_usize("val_per_class", 20)?;
    let spec = SyntheticDomainSpec {
        seed,
        num_classes: classes,
        images_per_class: per_class + val_per_class,
        height: s.get_usize("height", 32)?,
        width: s.get_usize("width", 32)?,
        channels: s.get_usize("channels", 3)?,
        palette_rotation: s.get_f64("palette_rotation", 0.0)?,
        texture_frequency: s.get_f64("texture_frequency", 3.0)?,
        noise_sigma: s.get_f64("noise_sigma", 0.1)?,
    };
    let name = s.get("name", "synthetic");
    if per_class == 0 || val_per_class == 0 {
        return Err(MdError::Config(
            "per_class and val_per_class must be positive".into(),
        ));
    }
    s.check_unknown_keys()?;
    echo(&s, out)?;

    // One generator pass; the first per_class images of each class are the
    // training split, the rest validation. Images come out grouped by class.
    let (images, labels) = generate_domain(&spec)?;
    let row = spec.height * spec.width * spec.channels;
    let split = |offset: usize, count: usize| -> Result<Dataset> {
        let mut data = Vec::with_capacity(classes * count * row);
        let mut lab = Vec::with_capacity(classes * count);
        for c in 0..classes {
            let start = c * (per_class + val_per_class) + offset;
            data.extend_from_slice(&images.data()[start * row..(start + count) * row]);
            lab.extend_from_slice(&labels[start..start + count]);
        }
        Dataset::new(
            Tensor::new(
                &[classes * count, spec.height, spec.width, spec.channels],
                data,
            )?,
            lab,
            classes,
            name.clone(),
        )
    };
    let train = split(0, per_class)?;
    let val = split(per_class, val_per_class)?;
    train.save_dir(&out_dir.join("train"))?;
    val.save_dir(&out_dir.join("val"))?;
    write_manifest(&out_dir, "gen-data", &s, &[])?;
    say(
        out,
        format_args!(
            "wrote {} train and {} val images across {classes} classes",
            train.len(),
            val.len()
        ),
    )
}

fn cmd_train_base(args: &TrainBaseArgs, out: &mut dyn Write) -> Result<()> {
    let mut s = args.shared.settings()?;
    args.knobs.apply(&mut s);
    if let Some(v) = &args.data {
        s.set_flag("data", v.clone());
    }
    if let Some(v) = &args.widths {
        s.set_flag("widths", v.clone());
    }
    if let Some(v) = args.blocks {
        s.set_flag("blocks", v.to_string());
    }
    if let Some(v) = args.filter {
        s.set_flag("filter", v.to_string());
    }

    let data_dir = require(&mut s, "data")?;
    let out_dir = resolve_out(&mut s)?;
    let precision = resolve_precision(&mut s, None)?;
    let widths = parse_usize_list(&s.get("widths", "64,128,256"), "widths")?;
    let [w0, w1, w2] = widths[..] else {
        return Err(MdError::Config("widths must list exactly 3 values".into()));
    };
    let blocks = s.get_usize("blocks", 4)?;
    let filter = s.get_usize("filter", 3)?;
    let cfg = resolve_train(&mut s, Regime::FinetuneAll, DropoutSetting::Off)?;
    s.check_unknown_keys()?;
    echo(&s, out)?;

    let (train, val) = load_splits(&data_dir)?;
    let arch = NetworkConfig {
        input_channels: train.image_dims()[2],
        macro_widths: [w0, w1, w2],
        blocks_per_macro: blocks,
        filter_size: filter,
        class_counts: vec![train.num_classes],
    };
    with_scalar!(precision, S => {
        let (net, report) = trainer::train_base::<S>(&arch, &train, &val, &cfg)?;
        save_checkpoint(&out_dir.join("base.mdck"), &net.to_checkpoint()?)?;
        write_report_files(&out_dir, "", &report)?;
        say(out, format_args!("final val accuracy: {:.4}", report.final_accuracy))?;
    });
    write_manifest(&out_dir, "train-base", &s, &split_inputs("data", &data_dir))
}

fn cmd_train_domain(args: &TrainDomainArgs, out: &mut dyn Write) -> Result<()> {
    let mut s = args.shared.settings()?;
    args.knobs.apply(&mut s);
    for (key, v) in [
        ("base", &args.base),
        ("data", &args.data),
        ("regime", &args.regime),
        ("topology", &args.topology),
        ("placement", &args.placement),
        ("within", &args.within),
        ("dropout", &args.dropout),
    ] {
        if let Some(v) = v {
            s.set_flag(key, v.clone());
        }
    }
    if let Some(v) = args.domain {
        s.set_flag("domain", v.to_string());
    }
    if let Some(v) = args.fraction {
        s.set_flag("fraction", v.to_string());
    }

    let base_path = require(&mut s, "base")?;
    let data_dir = require(&mut s, "data")?;
    let domain_raw = require(&mut s, "domain")?;
    let domain: usize = domain_raw
        .parse()
        .map_err(|_| MdError::Config(format!("domain = '{domain_raw}' is not an integer")))?;
    let out_dir = resolve_out(&mut s)?;
    let regime = Regime::parse(&s.get("regime", "adapters_only"))?;
    let placement = PlacementConfig {
        macros: MacroSelection::parse(&s.get("placement", "all"))?,
        within_block: WithinBlock::parse(&s.get("within", "both"))?,
        topology: Topology::parse(&s.get("topology", "series"))?,
        dropout: DropoutSetting::parse(&s.get("dropout", "off"))?,
    };
    let fraction = s.get_f64("fraction", 1.0)?;
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(MdError::Config(format!(
            "fraction = {fraction} must be in (0, 1]"
        )));
    }
    let base_ck = load_checkpoint(&base_path)?;
    let precision = resolve_precision(&mut s, Some(checkpoint_dtype(&base_ck)?))?;
    let cfg = resolve_train(&mut s, regime, placement.dropout)?;
    s.check_unknown_keys()?;
    echo(&s, out)?;

    let (full_train, val) = load_splits(&data_dir)?;
    let train = full_train.subsample(fraction, cfg.seed)?;
    with_scalar!(precision, S => {
        let (net, report) =
            trainer::train_domain::<S>(&base_ck, placement, domain, &train, &val, &cfg)?;
        save_checkpoint(&out_dir.join("adapted.mdck"), &net.to_checkpoint()?)?;
        write_report_files(&out_dir, "", &report)?;
        say(out, format_args!(
            "domain {domain} ({}) final val accuracy: {:.4}",
            report.regime, report.final_accuracy
        ))?;
    });
    let mut inputs = split_inputs("data", &data_dir);
    inputs.push(("base".into(), PathBuf::from(&base_path)));
    write_manifest(&out_dir, "train-domain", &s, &inputs)
}

fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let mut s = args.shared.settings()?;
    for (key, v) in [("ckpt", &args.ckpt), ("data", &args.data), ("split", &args.split)] {
        if let Some(v) = v {
            s.set_flag(key, v.clone());
        }
    }
    if let Some(v) = args.domain {
        s.set_flag("domain", v.to_string());
    }

    let ckpt_path = require(&mut s, "ckpt")?;
    let data_dir = require(&mut s, "data")?;
    let domain = s.get_usize("domain", 0)?;
    let split = s.get_choice("split", "val", &["train", "val"])?;
    let out_dir = resolve_out(&mut s)?;
    let ck = load_checkpoint(&ckpt_path)?;
    let precision = resolve_precision(&mut s, Some(checkpoint_dtype(&ck)?))?;
    s.check_unknown_keys()?;
    echo(&s, out)?;

    // --data may point directly at a dataset directory or at a parent
    // holding train/ and val/ splits.
    let leaf = if Path::new(&data_dir).join("images.mdtb").exists() {
        PathBuf::from(&data_dir)
    } else {
        Path::new(&data_dir).join(&split)
    };
    let ds = Dataset::load_dir(&leaf)?;
    let text = with_scalar!(precision, S => {
        let (net, _) = network_from_checkpoint::<S>(&ck)?;
        let (loss, acc) = eval_metrics(&net, domain, &ds)?;
        format!(
            "dataset = {}\nimages = {}\ndomain = {domain}\nloss = {loss}\naccuracy = {acc}\n",
            ds.name,
            ds.len()
        )
    });
    write_text(&out_dir.join("eval.txt"), &text)?;
    write!(out, "{text}").map_err(|e| MdError::io("stdout", e))?;
    let mut inputs: Vec<(String, PathBuf)> = DATASET_FILES
        .iter()
        .map(|f| (format!("data/{f}"), leaf.join(f)))
        .collect();
    inputs.push(("ckpt".into(), PathBuf::from(&ckpt_path)));
    write_manifest(&out_dir, "eval", &s, &inputs)
}

fn cmd_fuse(args: &FuseArgs, out: &mut dyn Write) -> Result<()> {
    let mut s = args.shared.settings()?;
    if let Some(v) = &args.ckpt {
        s.set_flag("ckpt", v.clone());
    }
    if let Some(v) = args.domain {
        s.set_flag("domain", v.to_string());
    }
    let ckpt_path = require(&mut s, "ckpt")?;
    let domain = s.get_usize("domain", 0)?;
    let out_dir = resolve_out(&mut s)?;
    let ck = load_checkpoint(&ckpt_path)?;
    let precision = resolve_precision(&mut s, Some(checkpoint_dtype(&ck)?))?;
    s.check_unknown_keys()?;
    echo(&s, out)?;

    let fused = with_scalar!(precision, S => fuse_checkpoint::<S>(&ck, domain)?);
    save_checkpoint(&out_dir.join("fused.mdck"), &fused)?;
    say(out, format_args!("fused domain {domain} into fused.mdck"))?;
    write_manifest(
        &out_dir,
        "fuse",
        &s,
        &[("ckpt".into(), PathBuf::from(&ckpt_path))],
    )
}

fn cmd_unfuse(args: &UnfuseArgs, out: &mut dyn Write) -> Result<()> {
    let mut s = args.shared.settings()?;
    if let Some(v) = &args.ckpt {
        s.set_flag("ckpt", v.clone());
    }
    let ckpt_path = require(&mut s, "ckpt")?;
    let out_dir = resolve_out(&mut s)?;
    let ck = load_checkpoint(&ckpt_path)?;
    // Restoring stashed records never does arithmetic, so precision is
    // resolved only for the echo/manifest.
    resolve_precision(&mut s, Some(checkpoint_dtype(&ck)?))?;
    s.check_unknown_keys()?;
    echo(&s, out)?;

    let restored = unfuse_checkpoint(&ck)?;
    save_checkpoint(&out_dir.join("unfused.mdck"), &restored)?;
    say(out, format_args!("restored original records into unfused.mdck"))?;
    write_manifest(
        &out_dir,
        "unfuse",
        &s,
        &[("ckpt".into(), PathBuf::from(&ckpt_path))],
    )
}

fn cmd_compress(args: &CompressArgs, out: &mut dyn Write) -> Result<()> {
    let mut s = args.shared.settings()?;
    for (key, v) in [("ckpt", &args.ckpt), ("domains", &args.domains), ("rank", &args.rank)] {
        if let Some(v) = v {
            s.set_flag(key, v.clone());
        }
    }
    let ckpt_path = require(&mut s, "ckpt")?;
    let domains = parse_usize_list(&require(&mut s, "domains")?, "domains")?;
    let rank_raw = s.get("rank", "half");
    let rank = if rank_raw == "half" {
        RankSpec::Half
    } else {
        RankSpec::Exact(rank_raw.parse().map_err(|_| {
            MdError::Config(format!("rank = '{rank_raw}' is not an integer or 'half'"))
        })?)
    };
    let out_dir = resolve_out(&mut s)?;
    let ck = load_checkpoint(&ckpt_path)?;
    if ck.names().any(|n| n.starts_with("compressed/")) {
        return Err(MdError::Config(
            "checkpoint already holds a factorization; finetune-gamma works on it directly".into(),
        ));
    }
    let precision = resolve_precision(&mut s, Some(checkpoint_dtype(&ck)?))?;
    s.check_unknown_keys()?;
    echo(&s, out)?;

    let mut compressed = ck.clone();
    with_scalar!(precision, S => {
        let net = MultiDomainNet::<S>::from_checkpoint(&ck)?;
        let fact = factorize_adapters(&net, &domains, rank)?;
        store_factorization(&mut compressed, &fact)?;
        let mut raw = 0usize;
        let mut stored = 0usize;
        for (&layer, jf) in &fact.layers {
            let (ci, co) = (jf.beta.dim(0), jf.gammas[0].dim(0));
            let layer_raw = domains.len() * ci * co;
            say(out, format_args!(
                "layer {layer}: rank {} -> {} stored elements vs {} uncompressed",
                jf.k,
                jf.stored_elements(),
                layer_raw
            ))?;
            raw += layer_raw;
            stored += jf.stored_elements();
        }
        say(out, format_args!(
            "total adapter elements: {stored} stored vs {raw} uncompressed (ratio {:.4})",
            stored as f64 / raw as f64
        ))?;
    });
    save_checkpoint(&out_dir.join("compressed.mdck"), &compressed)?;
    write_manifest(
        &out_dir,
        "compress",
        &s,
        &[("ckpt".into(), PathBuf::from(&ckpt_path))],
    )
}

fn cmd_finetune_gamma(args: &FinetuneGammaArgs, out: &mut dyn Write) -> Result<()> {
    let mut s = args.shared.settings()?;
    args.knobs.apply(&mut s);
    if let Some(v) = &args.fact {
        s.set_flag("fact", v.clone());
    }
    if !args.data.is_empty() {
        s.set_flag("data", args.data.join(","));
    }
    let fact_path = require(&mut s, "fact")?;
    let data_dirs: Vec<String> = require(&mut s, "data")?
        .split(',')
        .map(|p| p.trim().to_string())
        .collect();
    let out_dir = resolve_out(&mut s)?;
    let ck = load_checkpoint(&fact_path)?;
    let precision = resolve_precision(&mut s, Some(checkpoint_dtype(&ck)?))?;
    let cfg = resolve_train(&mut s, Regime::AdaptersOnly, DropoutSetting::Off)?;
    s.check_unknown_keys()?;
    echo(&s, out)?;

    let mut inputs: Vec<(String, PathBuf)> = vec![("fact".into(), PathBuf::from(&fact_path))];
    with_scalar!(precision, S => {
        let (mut net, fact) = network_from_checkpoint::<S>(&ck)?;
        let Some(mut fact) = fact else {
            return Err(MdError::Config(
                "checkpoint holds no factorization; run compress first".into(),
            ));
        };
        if data_dirs.len() != fact.domains.len() {
            return Err(MdError::Config(format!(
                "{} --data directories for {} factorized domains {:?}",
                data_dirs.len(),
                fact.domains.len(),
                fact.domains
            )));
        }
        let splits: Vec<(Dataset, Dataset)> = data_dirs
            .iter()
            .map(|d| load_splits(d))
            .collect::<Result<_>>()?;
        let data: Vec<(usize, &Dataset, &Dataset)> = fact
            .domains
            .iter()
            .zip(&splits)
            .map(|(&d, (t, v))| (d, t, v))
            .collect();
        let reports = trainer::finetune_gammas(&mut net, &mut fact, &data, &cfg)?;
        let mut finetuned = net.to_checkpoint()?;
        store_factorization(&mut finetuned, &fact)?;
        save_checkpoint(&out_dir.join("finetuned.mdck"), &finetuned)?;
        for report in &reports {
            write_report_files(&out_dir, &format!("_domain{}", report.domain), report)?;
            say(out, format_args!(
                "domain {} final val accuracy: {:.4}",
                report.domain, report.final_accuracy
            ))?;
        }
    });
    for (i, dir) in data_dirs.iter().enumerate() {
        inputs.extend(split_inputs(&format!("data{i}"), dir));
    }
    write_manifest(&out_dir, "finetune-gamma", &s, &inputs)
}

fn cmd_report_params(args: &ReportParamsArgs, out: &mut dyn Write) -> Result<()> {
    let mut s = args.shared.settings()?;
    if let Some(v) = &args.ckpt {
        s.set_flag("ckpt", v.clone());
    }
    let ckpt_path = require(&mut s, "ckpt")?;
    let out_dir = resolve_out(&mut s)?;
    let ck = load_checkpoint(&ckpt_path)?;
    let precision = resolve_precision(&mut s, Some(checkpoint_dtype(&ck)?))?;
    s.check_unknown_keys()?;
    echo(&s, out)?;

    let mut text = String::new();
    with_scalar!(precision, S => {
        let (net, fact) = network_from_checkpoint::<S>(&ck)?;
        let cfg = &net.cfg;
        text.push_str(&format!("weight layers: {}\n", cfg.weight_layers()));
        text.push_str(&format!(
            "macro widths: {}/{}/{}\n",
            cfg.macro_widths[0], cfg.macro_widths[1], cfg.macro_widths[2]
        ));
        text.push_str(&format!("{}\n", net.count_params()));
        // Per-layer adapter overhead relative to its host convolution.
        let adapted = net
            .domains
            .iter()
            .find(|d| !d.adapters.is_empty())
            .map(|d| d.adapters.keys().copied().collect::<Vec<_>>())
            .unwrap_or_default();
        for layer in adapted {
            let host = &net.universal.body[layer - 1];
            let frac = adapter_param_fraction(
                host.l(),
                host.c_in(),
                host.c_out(),
                net.placement.topology,
            );
            text.push_str(&format!(
                "layer {layer}: {}x{} conv {}->{}, adapter fraction {frac:.6}\n",
                host.l(),
                host.l(),
                host.c_in(),
                host.c_out()
            ));
        }
        if let Some(fact) = &fact {
            text.push_str(&format!(
                "factorized adapter storage (domains {:?}):\n",
                fact.domains
            ));
            let t = fact.domains.len();
            let mut stored_total = 0usize;
            let mut raw_total = 0usize;
            for (&layer, jf) in &fact.layers {
                let (ci, co) = (jf.beta.dim(0), jf.gammas[0].dim(0));
                let raw = t * ci * co;
                stored_total += jf.stored_elements();
                raw_total += raw;
                text.push_str(&format!(
                    "layer {layer}: rank {} -> {} stored vs {} uncompressed\n",
                    jf.k,
                    jf.stored_elements(),
                    raw
                ));
            }
            text.push_str(&format!(
                "total: {stored_total} stored vs {raw_total} uncompressed (ratio {:.4})\n",
                stored_total as f64 / raw_total as f64
            ));
        }
    });
    write_text(&out_dir.join("params.txt"), &text)?;
    write!(out, "{text}").map_err(|e| MdError::io("stdout", e))?;
    write_manifest(
        &out_dir,
        "report-params",
        &s,
        &[("ckpt".into(), PathBuf::from(&ckpt_path))],
    )
}

fn cmd_gradcheck(args: &GradcheckArgs, out: &mut dyn Write) -> Result<()> {
    let mut s = args.shared.settings()?;
    if let Some(v) = args.tolerance {
        s.set_flag("tolerance", v.to_string());
    }
    let seed = s.get_u64("seed", 0)?;
    let tolerance = s.get_f64("tolerance", 1e-6)?;
    // The finite-difference suite is defined in double precision; the
    // step size underflows single-precision arithmetic.
    let precision = s.get_choice("precision", "double", &["single", "double"])?;
    if precision == "single" {
        return Err(MdError::Config(
            "gradcheck runs in double precision only".into(),
        ));
    }
    let out_dir = resolve_out(&mut s)?;
    s.check_unknown_keys()?;
    echo(&s, out)?;

    let reports = run_full_suite(seed);
    let worst = reports
        .iter()
        .map(|r| r.max_rel_err)
        .fold(0.0f64, f64::max);
    let mut text = format!(
        "checks = {}\nworst = {worst:e}\ntolerance = {tolerance:e}\n",
        reports.len()
    );
    for r in &reports {
        text.push_str(&format!("{} coords={} max_rel_err={:e}\n", r.name, r.coords, r.max_rel_err));
    }
    write_text(&out_dir.join("gradcheck.txt"), &text)?;
    say(
        out,
        format_args!(
            "{} checks, worst relative error {worst:e} (tolerance {tolerance:e})",
            reports.len()
        ),
    )?;
    write_manifest(&out_dir, "gradcheck", &s, &[])?;
    if worst > tolerance {
        let bad = reports
            .iter()
            .filter(|r| r.max_rel_err > tolerance)
            .map(|r| r.name.as_str())
            .collect::<Vec<_>>()
            .join(", ");
        return Err(MdError::Numeric {
            op: "gradcheck",
            detail: format!("checks over tolerance: {bad}"),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_vec(args: &[&str]) -> (i32, String) {
        let mut buf = Vec::new();
        let argv: Vec<String> = std::iter::once("mdnet".to_string())
            .chain(args.iter().map(|s| s.to_string()))
            .collect();
        let code = run(argv, &mut buf);
        (code, String::from_utf8(buf).unwrap())
    }

    #[test]
    fn help_and_version_exit_zero() {
        let (code, text) = run_vec(&["--help"]);
        assert_eq!(code, 0);
        assert!(text.contains("train-base"));
        assert!(text.contains("gradcheck"));
        let (code, _) = run_vec(&["--version"]);
        assert_eq!(code, 0);
    }

    #[test]
    fn unknown_flags_and_commands_are_usage_errors() {
        let (code, text) = run_vec(&["train-base", "--no-such-flag"]);
        assert_eq!(code, 1);
        assert!(text.contains("--no-such-flag"));
        let (code, _) = run_vec(&["frobnicate"]);
        assert_eq!(code, 1);
    }

    #[test]
    fn missing_required_inputs_are_usage_errors() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("o");
        let (code, text) = run_vec(&["train-base", "--out", out.to_str().unwrap()]);
        assert_eq!(code, 1);
        assert!(text.contains("--data"), "{text}");
    }

    #[test]
    fn missing_checkpoint_file_is_a_runtime_error() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("o");
        let (code, text) = run_vec(&[
            "report-params",
            "--ckpt",
            "/nonexistent/path.mdck",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 2, "{text}");
    }

    #[test]
    fn gradcheck_rejects_single_precision() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("o");
        let (code, text) = run_vec(&[
            "gradcheck",
            "--precision",
            "single",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 1);
        assert!(text.contains("double precision"), "{text}");
    }

    #[test]
    fn gen_data_writes_splits_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("data");
        let (code, text) = run_vec(&[
            "gen-data",
            "--classes",
            "3",
            "--per-class",
            "5",
            "--val-per-class",
            "2",
            "--height",
            "8",
            "--width",
            "8",
            "--seed",
            "7",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0, "{text}");
        assert!(text.contains("resolved configuration:"));
        assert!(text.contains("seed = 7  # flag"));
        let train = Dataset::load_dir(&out.join("train")).unwrap();
        let val = Dataset::load_dir(&out.join("val")).unwrap();
        assert_eq!(train.len(), 15);
        assert_eq!(val.len(), 6);
        assert_eq!(train.num_classes, 3);
        // Stratified split: every class contributes exactly per-class rows.
        for c in 0..3 {
            assert_eq!(train.class_indices(c).len(), 5);
            assert_eq!(val.class_indices(c).len(), 2);
        }
        let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
        assert!(manifest.contains("command = gen-data"));
        assert!(manifest.contains("seed = 7"));
    }

    #[test]
    fn config_file_fills_in_flags() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("data");
        let cfg = dir.path().join("run.cfg");
        fs::write(
            &cfg,
            "classes = 3\nper_class = 4\nval_per_class = 2\nheight = 8\nwidth = 8\nseed = 9\n",
        )
        .unwrap();
        let (code, text) = run_vec(&[
            "gen-data",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "11",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0, "{text}");
        // Flag beats file; file beats default.
        assert!(text.contains("seed = 11  # flag"), "{text}");
        assert!(text.contains("classes = 3  # file"), "{text}");
        assert!(text.contains("channels = 3  # default"), "{text}");

        let bad = dir.path().join("bad.cfg");
        fs::write(&bad, "classses = 3\n").unwrap();
        let (code, text) = run_vec(&[
            "gen-data",
            "--config",
            bad.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 1);
        assert!(text.contains("classses"), "{text}");
    }
}
