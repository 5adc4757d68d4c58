//! Command-line front end: `inspect`, `convert`, `synth`, `pretrain`,
//! `finetune` and `evaluate`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use vardim3d::backbone::{
    build_backbone, count_flops, count_params, embedded_config, infer_shapes, parse_arch, BackboneConfig,
    BackboneModel, Freeze, HeadKind, Stem,
};
use vardim3d::convert::ConversionRule;
use vardim3d::data::{load_image_folder, synth2d_corpus, synth3d_task, Dataset, Synth2dSpec, SynthKind, SynthTaskSpec};
use vardim3d::train::{
    evaluate_classification, evaluate_segmentation, finetune, pretrain, step_milestones, Init, LossWeights,
    ScheduleKind, SegEvalOptions, TrainConfig,
};
use vardim3d::{load_checkpoint, save_checkpoint};

/// Directory for generated datasets, overridable with this variable.
pub const CACHE_ENV: &str = "VARDIM3D_CACHE";

#[derive(Parser, Debug)]
#[command(name = "vardim3d", version, about = "Pseudo-3D pre-training and 2D-to-3D weight conversion")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parameter count, FLOPs and per-stage feature shapes of a backbone.
    Inspect(InspectArgs),
    /// Convert a checkpoint with one of the weight conversion rules.
    Convert(ConvertArgs),
    /// Generate a seeded synthetic dataset.
    Synth(SynthArgs),
    /// Pre-train a depth-preserving backbone on planar images.
    Pretrain(PretrainArgs),
    /// Fine-tune a 3D backbone on volumes, from scratch or a checkpoint.
    Finetune(FinetuneArgs),
    /// Score a trained checkpoint on a dataset.
    Evaluate(EvaluateArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StemArg {
    K7,
    V1c,
}

impl From<StemArg> for Stem {
    fn from(s: StemArg) -> Self {
        match s {
            StemArg::K7 => Stem::K7,
            StemArg::V1c => Stem::V1c,
        }
    }
}

#[derive(Args, Debug)]
struct ArchArgs {
    /// `resnet18|34|50` (planar) or `resnet3d18|34|50`.
    #[arg(long)]
    arch: Option<String>,
    /// Keep depth at every stage (volumetric architectures only).
    #[arg(long, overrides_with = "no_depth_preserve")]
    depth_preserve: bool,
    #[arg(long, overrides_with = "depth_preserve")]
    no_depth_preserve: bool,
    #[arg(long, value_enum)]
    stem: Option<StemArg>,
    /// Channels of the first stage.
    #[arg(long)]
    width: Option<usize>,
}

impl ArchArgs {
    fn preserve(&self, default: bool) -> bool {
        if self.depth_preserve {
            true
        } else if self.no_depth_preserve {
            false
        } else {
            default
        }
    }

    /// Unset fields fall back to `base` (or the stock defaults).
    fn config(&self, default_preserve: bool, base: Option<&BackboneConfig>) -> anyhow::Result<BackboneConfig> {
        let arch = match (&self.arch, base) {
            (Some(a), _) => a.clone(),
            (None, Some(b)) => format!("resnet3d{}", b.family.depth()),
            (None, None) => "resnet3d18".into(),
        };
        let (family, volumetric) = parse_arch(&arch)?;
        let mut cfg = if !volumetric {
            if self.depth_preserve || self.no_depth_preserve {
                bail!("--depth-preserve applies to 3D architectures, `{arch}` is planar");
            }
            BackboneConfig::planar(family)
        } else if self.preserve(default_preserve) {
            BackboneConfig::modified(family)
        } else {
            BackboneConfig::vanilla(family)
        };
        cfg.stem = self.stem.map(Stem::from).or(base.map(|b| b.stem)).unwrap_or(Stem::K7);
        cfg.base_width = self.width.or(base.map(|b| b.base_width)).unwrap_or(64);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum HeadArg {
    Classify,
    Segment,
    None,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[command(flatten)]
    arch: ArchArgs,
    /// `CxDxHxW`, or `CxHxW` for planar architectures.
    #[arg(long, default_value = "1x3x224x224")]
    input: String,
    #[arg(long, value_enum, default_value_t = HeadArg::Classify)]
    head: HeadArg,
    #[arg(long, default_value_t = 1000)]
    num_classes: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum RuleArg {
    Svd,
    I3d,
    Zeropad,
    Acs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ScaleArg {
    Invk,
    None,
}

#[derive(Args, Debug)]
struct ConvertArgs {
    #[arg(long, value_enum)]
    rule: RuleArg,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Depth of inflated kernels (i3d, zeropad).
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, value_enum)]
    scale: Option<ScaleArg>,
    /// Transplant target; width and stem default to the source's.
    #[command(flatten)]
    arch: ArchArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SynthKindArg {
    Cls2d,
    Cls3d,
    Seg3d,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, value_enum)]
    kind: SynthKindArg,
    /// Defaults to a file in the dataset cache.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    classes: Option<usize>,
    /// Volume count (cls3d, seg3d).
    #[arg(long, default_value_t = 64)]
    samples: usize,
    /// Images per class (cls2d).
    #[arg(long, default_value_t = 60)]
    per_class: usize,
    /// Image side (cls2d).
    #[arg(long, default_value_t = 32)]
    size: usize,
    /// Volume `DxHxW` (cls3d, seg3d).
    #[arg(long, default_value = "16x32x32")]
    shape: String,
    #[arg(long)]
    noise: Option<f32>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ScheduleArg {
    Cosine,
    Step,
    Poly,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FreezeArg {
    None,
    FixRes1,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// TOML file with training settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    schedule: Option<ScheduleArg>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Label smoothing.
    #[arg(long)]
    eps: Option<f64>,
    /// Dice and cross-entropy weights, `d,c`.
    #[arg(long)]
    loss_weights: Option<LossWeights>,
    #[arg(long, value_enum)]
    freeze: Option<FreezeArg>,
    /// none, lidc, lits or imagenet.
    #[arg(long)]
    augment: Option<String>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Seeds initialization, shuffling and augmentation.
    #[arg(long)]
    seed: Option<u64>,
    /// Per-epoch records as JSON lines.
    #[arg(long)]
    log: Option<PathBuf>,
}

impl TrainArgs {
    fn resolve(&self) -> anyhow::Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => TrainConfig::default(),
        };
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.eps {
            cfg.label_smoothing = v;
        }
        if let Some(v) = self.loss_weights {
            cfg.loss_weights = v;
        }
        if let Some(v) = self.momentum {
            cfg.sgd.momentum = v;
        }
        if let Some(v) = self.weight_decay {
            cfg.sgd.weight_decay = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(f) = self.freeze {
            cfg.freeze = match f {
                FreezeArg::None => Freeze::None,
                FreezeArg::FixRes1 => Freeze::FixRes1,
            };
        }
        if let Some(a) = &self.augment {
            cfg.augment = a.parse()?;
        }
        if let Some(s) = self.schedule {
            cfg.schedule = match s {
                ScheduleArg::Cosine => ScheduleKind::Cosine,
                ScheduleArg::Step => ScheduleKind::Step {
                    milestones: step_milestones(cfg.epochs),
                    factor: 0.1,
                },
                ScheduleArg::Poly => ScheduleKind::Polynomial {
                    power: 0.9,
                    min_lr: 0.0,
                },
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn write_log(&self, log: &vardim3d::train::TrainLog) -> anyhow::Result<()> {
        if let Some(path) = &self.log {
            std::fs::write(path, log.to_json_lines()).with_context(|| format!("writing {}", path.display()))?;
        }
        Ok(())
    }
}

#[derive(Args, Debug)]
struct PretrainArgs {
    /// Dataset checkpoint or image folder (one sub-directory per class).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Hold out every k-th image and report its top-1 accuracy.
    #[arg(long)]
    holdout: Option<usize>,
    #[command(flatten)]
    arch: ArchArgs,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TaskArg {
    Classify,
    Segment,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Pre-trained checkpoint to transplant; scratch when absent.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = TaskArg::Classify)]
    task: TaskArg,
    #[command(flatten)]
    arch: ArchArgs,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Sliding-window patch `DxHxW` for segmentation.
    #[arg(long)]
    window: Option<String>,
    /// Sliding-window stride `DxHxW`; defaults to half the patch.
    #[arg(long)]
    stride: Option<String>,
    /// Keep only the largest connected foreground component.
    #[arg(long)]
    largest_component: bool,
}

/// Parses `AxBxC...` into exactly `n` positive sizes.
fn parse_dims(s: &str, n: &[usize]) -> anyhow::Result<Vec<usize>> {
    let dims = s
        .split(['x', 'X'])
        .map(|t| t.trim().parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .with_context(|| format!("bad size `{s}`"))?;
    if !n.contains(&dims.len()) || dims.contains(&0) {
        bail!("bad size `{s}`: expected {n:?} positive sizes joined by `x`");
    }
    Ok(dims)
}

fn dims3(s: &str) -> anyhow::Result<[usize; 3]> {
    let d = parse_dims(s, &[3])?;
    Ok([d[0], d[1], d[2]])
}

pub fn cache_dir() -> PathBuf {
    match std::env::var_os(CACHE_ENV) {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => match std::env::var_os("HOME") {
            Some(home) => Path::new(&home).join(".cache").join("vardim3d"),
            None => PathBuf::from(".vardim3d-cache"),
        },
    }
}

/// A dataset checkpoint or image folder; relative paths that do not exist are
/// looked up in the cache directory.
fn load_dataset(path: &Path) -> anyhow::Result<Dataset> {
    let resolved = if !path.exists() && path.is_relative() {
        let cached = cache_dir().join(path);
        if !cached.exists() {
            bail!("dataset {} not found (also looked in {})", path.display(), cached.display());
        }
        cached
    } else {
        path.to_path_buf()
    };
    let data = if resolved.is_dir() {
        load_image_folder(&resolved)?
    } else {
        Dataset::from_checkpoint(&load_checkpoint(&resolved)?)?
    };
    log::info!("{}: {} samples, {} classes", resolved.display(), data.len(), data.num_classes());
    Ok(data)
}

fn millions(n: u64) -> String {
    format!("{:.2}M", n as f64 / 1e6)
}

fn inspect(args: &InspectArgs) -> anyhow::Result<()> {
    let cfg = args.arch.config(false, None)?;
    let dims = parse_dims(&args.input, &[3, 4])?;
    let input = match dims[..] {
        [c, h, w] => [c, 1, h, w],
        [c, d, h, w] => [c, d, h, w],
        _ => unreachable!(),
    };
    let mut model = build_backbone(&cfg, 0)?;
    match args.head {
        HeadArg::Classify => model.attach_head(HeadKind::Classify { num_classes: args.num_classes }, 0)?,
        HeadArg::Segment => model.attach_head(HeadKind::Segment, 0)?,
        HeadArg::None => {}
    }
    let params = count_params(&model);
    let flops = count_flops(&model, input)?;
    let kind = if cfg.is_planar() {
        "planar"
    } else if cfg.depth_preserve {
        "depth-preserving"
    } else {
        "volumetric"
    };
    let arch = if cfg.is_planar() {
        format!("resnet{}", cfg.family.depth())
    } else {
        format!("resnet3d{}", cfg.family.depth())
    };
    println!("arch     {arch} ({kind}, {} stem, width {})", cfg.stem, cfg.base_width);
    println!("input    {}", join_dims(&input));
    println!("params   {} ({params})", millions(params));
    println!("flops    {:.2}G multiply-accumulates", flops as f64 / 1e9);
    for (i, s) in infer_shapes(&cfg, input)?.iter().enumerate() {
        println!("stage{}   {}", i + 1, join_dims(s));
    }
    Ok(())
}

fn join_dims(d: &[usize]) -> String {
    d.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

fn report_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(OsString::from).unwrap_or_default();
    name.push(".report.json");
    out.with_file_name(name)
}

fn convert(args: &ConvertArgs) -> anyhow::Result<()> {
    let source = load_checkpoint(&args.input)?;
    let mut options = BTreeMap::new();
    if let Some(k) = args.k {
        options.insert("k".to_string(), k.to_string());
    }
    if let Some(s) = args.scale {
        let s = match s {
            ScaleArg::Invk => "invk",
            ScaleArg::None => "none",
        };
        options.insert("scale".to_string(), s.to_string());
    }
    let (kind, target) = match args.rule {
        RuleArg::Svd => {
            let base = embedded_config(source.fingerprint()).ok();
            ("svd", Some(args.arch.config(false, base.as_ref())?))
        }
        RuleArg::I3d => ("i3d", None),
        RuleArg::Zeropad => ("zeropad", None),
        RuleArg::Acs => ("acs", None),
    };
    let rule = ConversionRule::parse(kind, &options, target)?;
    let (converted, report) = rule.apply(&source)?;
    save_checkpoint(&converted, &args.out)?;
    let sidecar = report_path(&args.out);
    std::fs::write(&sidecar, report.to_json()).with_context(|| format!("writing {}", sidecar.display()))?;
    print!("{report}");
    println!("wrote {} and {}", args.out.display(), sidecar.display());
    Ok(())
}

fn synth(args: &SynthArgs) -> anyhow::Result<()> {
    let (data, tag) = match args.kind {
        SynthKindArg::Cls2d => {
            let spec = Synth2dSpec {
                num_classes: args.classes.unwrap_or(10),
                per_class: args.per_class,
                size: args.size,
                noise_level: args.noise.unwrap_or(0.1),
                seed: args.seed,
            };
            (synth2d_corpus(&spec)?, "cls2d")
        }
        SynthKindArg::Cls3d | SynthKindArg::Seg3d => {
            let (kind, tag) = match args.kind {
                SynthKindArg::Cls3d => (SynthKind::Cls3d, "cls3d"),
                _ => (SynthKind::Seg3d, "seg3d"),
            };
            let spec = SynthTaskSpec {
                kind,
                num_classes: args.classes.unwrap_or(if kind == SynthKind::Seg3d { 2 } else { 3 }),
                volume_shape: dims3(&args.shape)?,
                num_samples: args.samples,
                noise_level: args.noise.unwrap_or(0.5),
                seed: args.seed,
            };
            (synth3d_task(&spec)?, tag)
        }
    };
    let out = match &args.out {
        Some(p) => p.clone(),
        None => {
            let dir = cache_dir();
            std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            dir.join(format!("{tag}-seed{}.ckpt", args.seed))
        }
    };
    save_checkpoint(&data.to_checkpoint()?, &out)?;
    let majority = if tag == "seg3d" {
        String::new()
    } else {
        format!(", majority {:.3}", data.majority_fraction())
    };
    println!("{tag}: {} samples, {} classes{majority} -> {}", data.len(), data.num_classes(), out.display());
    Ok(())
}

fn pretrain_cmd(args: &PretrainArgs) -> anyhow::Result<()> {
    let cfg = args.train.resolve()?;
    let data = load_dataset(&args.data)?;
    let (train, held_out) = match args.holdout {
        Some(k) => {
            let (t, h) = data.split_every(k);
            (t, Some(h))
        }
        None => (data, None),
    };
    let mut model = build_backbone(&args.arch.config(true, None)?, cfg.seed)?;
    model.attach_head(HeadKind::Classify { num_classes: train.num_classes() }, cfg.seed)?;
    let (ckpt, log) = pretrain(&mut model, &train, &cfg)?;
    save_checkpoint(&ckpt, &args.out)?;
    args.train.write_log(&log)?;
    if let Some(loss) = log.final_loss() {
        println!("final loss {loss:.4}");
    }
    if let Some(h) = held_out.filter(|h| !h.is_empty()) {
        let m = evaluate_classification(&model, &h)?;
        println!("held-out top-1 {:.4} (majority {:.4})", m.top1, h.majority_fraction());
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

fn finetune_cmd(args: &FinetuneArgs) -> anyhow::Result<()> {
    let cfg = args.train.resolve()?;
    let data = load_dataset(&args.data)?;
    let init = match &args.init {
        Some(p) => Init::Pretrained(load_checkpoint(p)?),
        None => Init::Scratch,
    };
    let mut model = build_backbone(&args.arch.config(false, None)?, cfg.seed)?;
    let head = match args.task {
        TaskArg::Classify => HeadKind::Classify { num_classes: data.num_classes() },
        TaskArg::Segment => HeadKind::Segment,
    };
    model.attach_head(head, cfg.seed)?;
    let (model, log, report) = finetune(model, &data, &init, &cfg)?;
    if let Some(r) = report {
        print!("{r}");
    }
    save_checkpoint(&model.to_checkpoint(), &args.out)?;
    args.train.write_log(&log)?;
    if let Some(loss) = log.final_loss() {
        println!("final loss {loss:.4}");
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

fn evaluate_cmd(args: &EvaluateArgs) -> anyhow::Result<()> {
    let model = BackboneModel::from_checkpoint(&load_checkpoint(&args.model)?)?;
    let data = load_dataset(&args.data)?;
    let json = match model.head_kind() {
        Some(HeadKind::Classify { .. }) => serde_json::to_string_pretty(&evaluate_classification(&model, &data)?)?,
        Some(HeadKind::Segment) => {
            let window = match &args.window {
                Some(p) => {
                    let patch = dims3(p)?;
                    let stride = match &args.stride {
                        Some(s) => dims3(s)?,
                        None => patch.map(|v| (v / 2).max(1)),
                    };
                    Some((patch, stride))
                }
                None => None,
            };
            let opts = SegEvalOptions {
                largest_component: args.largest_component,
                window,
            };
            serde_json::to_string_pretty(&evaluate_segmentation(&model, &data, opts)?)?
        }
        None => bail!("{} has no task head to evaluate", args.model.display()),
    };
    println!("{json}");
    Ok(())
}

/// Runs one command line (including the program name) and returns the exit
/// code: 0 on success, 1 on failure, 2 on usage errors.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Inspect(a) => inspect(a),
        Command::Convert(a) => convert(a),
        Command::Synth(a) => synth(a),
        Command::Pretrain(a) => pretrain_cmd(a),
        Command::Finetune(a) => finetune_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
