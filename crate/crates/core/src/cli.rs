//! Command-line front end: train, eval, visualize, compare, make-synthetic.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::abn::{cam_attention_map, AbnModel, CamSelector, Mechanism, NetworkSpec};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::{
    load_cifar10, load_with_regions, make_synthetic, make_synthetic_multitask, save_with_regions,
    AugmentConfig, ChannelStats, Dataset, Split, SyntheticConfig,
};
use crate::error::{invalid, AbnError, Result};
use crate::train::{
    comparison_csv, evaluate, history_csv, mechanism_comparison, metric_name, train_epochs_with,
    TrainConfig,
};
use crate::visualize::{encode_pgm, image_to_gray, quantize_min_max, upsample_bilinear, upsample_nearest};

#[derive(Parser, Debug)]
#[command(name = "abn", version, about = "Attention branch networks: train, evaluate, explain")]
pub struct Cli {
    /// Seed for initialization, shuffling and augmentation.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model and write a checkpoint plus per-epoch history CSV.
    Train(TrainArgs),
    /// Report test-split top-1 error (or mean per-task accuracy).
    Eval(EvalArgs),
    /// Export input images and attention maps as PGM files.
    Visualize(VisualizeArgs),
    /// Train none / dot / residual variants and tabulate their test error.
    Compare(CompareArgs),
    /// Write a synthetic dataset as record files with region sidecars.
    MakeSynthetic(MakeSyntheticArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DatasetKind {
    Synthetic,
    Cifar10,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MechanismArg {
    None,
    Dot,
    Residual,
}

impl From<MechanismArg> for Mechanism {
    fn from(m: MechanismArg) -> Self {
        match m {
            MechanismArg::None => Mechanism::None,
            MechanismArg::Dot => Mechanism::Dot,
            MechanismArg::Residual => Mechanism::Residual,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BaselineArg {
    Resnet,
    Vgg,
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    #[arg(long, value_enum, default_value_t = DatasetKind::Synthetic)]
    pub dataset: DatasetKind,
    /// CIFAR-10 batch directory, or a directory written by make-synthetic.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Use only the first N training images.
    #[arg(long)]
    pub train_limit: Option<usize>,
    /// Use only the first N test images.
    #[arg(long)]
    pub test_limit: Option<usize>,
    /// Synthetic: number of classes (single-task).
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    /// Synthetic: binary attributes; more than one selects multi-task.
    #[arg(long, default_value_t = 1)]
    pub tasks: usize,
    #[arg(long, default_value_t = 400)]
    pub train_size: usize,
    #[arg(long, default_value_t = 200)]
    pub test_size: usize,
    #[arg(long, default_value_t = 32)]
    pub image_size: usize,
    #[arg(long, default_value_t = 8)]
    pub patch_size: usize,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    /// Synthetic: seed of the training split; the test split uses seed + 1.
    #[arg(long, default_value_t = 1)]
    pub data_seed: u64,
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    #[arg(long, value_enum, default_value_t = BaselineArg::Resnet)]
    pub baseline: BaselineArg,
    /// ResNet depth (6n+2).
    #[arg(long, default_value_t = 20)]
    pub depth: usize,
    /// VGG convolutions per stage.
    #[arg(long, default_value_t = 2)]
    pub convs_per_stage: usize,
    #[arg(long, default_value_t = 16)]
    pub width: usize,
    /// Number of stages in the feature extractor.
    #[arg(long, default_value_t = 2)]
    pub split: usize,
    /// Defaults to residual, or dot for multi-task models.
    #[arg(long, value_enum)]
    pub mechanism: Option<MechanismArg>,
}

#[derive(Args, Debug, Clone)]
pub struct OptimArgs {
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub weight_decay: f64,
    /// Disable pad-4 / random-crop / mirror augmentation.
    #[arg(long)]
    pub no_augment: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// History CSV; defaults to the checkpoint path with `.history.csv`.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Args, Debug)]
pub struct VisualizeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Test-split sample indices, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub indices: Vec<usize>,
    /// Also export the CAM map of this class.
    #[arg(long)]
    pub class: Option<usize>,
    /// Multi-task: export only this task's map (default: all tasks).
    #[arg(long)]
    pub task: Option<usize>,
    /// Bilinear instead of nearest-neighbour upsampling.
    #[arg(long)]
    pub bilinear: bool,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    /// Comparison table CSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct MakeSyntheticArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
}

fn synthetic_config(d: &DataArgs, per_class: usize, seed: u64) -> SyntheticConfig {
    SyntheticConfig {
        num_classes: d.classes,
        per_class,
        channels: 3,
        height: d.image_size,
        width: d.image_size,
        patch_h: d.patch_size,
        patch_w: d.patch_size,
        noise_std: d.noise,
        seed,
    }
}

fn generate_split(d: &DataArgs, size: usize, seed: u64) -> Result<Dataset> {
    if d.tasks > 1 {
        return make_synthetic_multitask(&synthetic_config(d, 0, seed), d.tasks, size);
    }
    if d.classes == 0 || !size.is_multiple_of(d.classes) {
        return invalid(format!("split size {size} is not a multiple of {} classes", d.classes));
    }
    make_synthetic(&synthetic_config(d, size / d.classes, seed))
}

fn truncate(data: Dataset, limit: Option<usize>) -> Result<Dataset> {
    match limit {
        Some(0) => invalid("dataset limit must be positive"),
        Some(n) if n < data.len() => Ok(data.subset(&(0..n).collect::<Vec<_>>())),
        _ => Ok(data),
    }
}

/// Training and test splits selected by the data flags.
pub fn load_splits(d: &DataArgs) -> Result<(Dataset, Dataset)> {
    let (train, test) = match (d.dataset, &d.data_dir) {
        (DatasetKind::Cifar10, Some(dir)) => (
            load_cifar10(dir, Split::Train)?,
            load_cifar10(dir, Split::Test)?,
        ),
        (DatasetKind::Cifar10, None) => return invalid("--dataset cifar10 needs --data-dir"),
        (DatasetKind::Synthetic, Some(dir)) => {
            if d.tasks > 1 {
                return invalid("persisted synthetic datasets are single-task");
            }
            let shape = (3, d.image_size, d.image_size);
            let load = |stem: &str| {
                load_with_regions(
                    &dir.join(format!("{stem}.bin")),
                    &dir.join(format!("{stem}.regions")),
                    shape,
                    d.classes,
                )
            };
            (load("train")?, load("test")?)
        }
        (DatasetKind::Synthetic, None) => (
            generate_split(d, d.train_size, d.data_seed)?,
            generate_split(d, d.test_size, d.data_seed.wrapping_add(1))?,
        ),
    };
    Ok((truncate(train, d.train_limit)?, truncate(test, d.test_limit)?))
}

fn network_spec(m: &ModelArgs, d: &DataArgs) -> NetworkSpec {
    let classes = match d.dataset {
        DatasetKind::Cifar10 => crate::data::CIFAR_CLASSES,
        DatasetKind::Synthetic => d.classes,
    };
    let base = match m.baseline {
        BaselineArg::Resnet => NetworkSpec::resnet_cifar(m.depth, classes),
        BaselineArg::Vgg => NetworkSpec::small_vgg(m.convs_per_stage, classes),
    };
    let spec = NetworkSpec {
        base_width: m.width,
        split_point: m.split,
        ..base
    };
    let spec = if d.tasks > 1 { spec.with_tasks(d.tasks) } else { spec };
    match m.mechanism {
        Some(mechanism) => spec.with_mechanism(mechanism.into()),
        None => spec,
    }
}

fn train_config(o: &OptimArgs, seed: u64, image_size: (usize, usize)) -> TrainConfig {
    TrainConfig {
        lr0: o.lr,
        momentum: o.momentum,
        weight_decay: o.weight_decay,
        augment: (!o.no_augment).then(|| AugmentConfig::standard(image_size.0, image_size.1)),
        ..TrainConfig::new(o.epochs, o.batch_size, seed)
    }
}

fn fresh_model(spec: NetworkSpec, seed: u64, train: &Dataset) -> Result<AbnModel> {
    let mut model = AbnModel::build(spec, seed)?;
    model.set_input_stats(&ChannelStats::from_images(&train.images)?)?;
    Ok(model)
}

fn check_compatible(model: &AbnModel, data: &Dataset) -> Result<()> {
    let (c, _, _) = data.image_shape();
    if c != model.spec.in_channels {
        return invalid(format!(
            "dataset has {c}-channel images, the checkpoint expects {}",
            model.spec.in_channels
        ));
    }
    // Label layout mismatches surface from evaluate; run it on nothing here
    // so errors name the problem before any work is done.
    match (&data.labels, model.spec.is_multitask()) {
        (crate::data::Labels::Classes { num_classes, .. }, false) if *num_classes == model.spec.num_classes => Ok(()),
        (crate::data::Labels::Attributes { tasks, .. }, true) if *tasks == model.spec.task_count => Ok(()),
        _ => invalid("dataset labels do not match the checkpoint's class/task layout"),
    }
}

fn default_history_path(out: &Path) -> PathBuf {
    out.with_extension("history.csv")
}

fn cmd_train(args: &TrainArgs, seed: u64) -> Result<()> {
    let (train, test) = load_splits(&args.data)?;
    let spec = network_spec(&args.model, &args.data);
    let mut model = fresh_model(spec, seed, &train)?;
    let (_, h, w) = train.image_shape();
    let config = train_config(&args.optim, seed, (h, w));
    let metric = metric_name(&spec);
    let history = train_epochs_with(&mut model, &train, Some(&test), &config, |r| {
        eprintln!(
            "epoch {} train_loss {:.6} {metric} {}",
            r.epoch,
            r.train_loss,
            r.eval_metric.unwrap_or(f64::NAN)
        );
    })?;
    save_checkpoint(&model, &args.out)?;
    let history_path = args
        .history
        .clone()
        .unwrap_or_else(|| default_history_path(&args.out));
    fs::write(&history_path, history_csv(&spec, &history))?;
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<String> {
    let mut model = load_checkpoint(&args.checkpoint)?;
    let (_, test) = load_splits(&args.data)?;
    check_compatible(&model, &test)?;
    let value = evaluate(&mut model, &test)?;
    Ok(format!("{},{value}", metric_name(&model.spec)))
}

fn write_pgm(path: &Path, size: (usize, usize), pixels: &[u8]) -> Result<()> {
    fs::write(path, encode_pgm(size.1, size.0, pixels))?;
    Ok(())
}

fn cmd_visualize(args: &VisualizeArgs) -> Result<()> {
    let mut model = load_checkpoint(&args.checkpoint)?;
    let (_, test) = load_splits(&args.data)?;
    check_compatible(&model, &test)?;
    if let Some(&bad) = args.indices.iter().find(|&&i| i >= test.len()) {
        return invalid(format!("sample index {bad} out of range for {} test images", test.len()));
    }
    if model.net.attention.is_none() {
        return invalid("the checkpoint has no attention branch (mechanism none)");
    }
    let spec = model.spec;
    if let Some(c) = args.class {
        if spec.is_multitask() || c >= spec.num_classes {
            return invalid(format!("class {c} is not valid for this model"));
        }
    }
    if let Some(t) = args.task {
        if t >= spec.task_count {
            return invalid(format!("task {t} is not valid for this model"));
        }
    }
    fs::create_dir_all(&args.out_dir)?;
    let (c, h, w) = test.image_shape();
    let resize = |map: &[f64], hw: (usize, usize)| {
        if args.bilinear {
            upsample_bilinear(map, hw, (h, w))
        } else {
            upsample_nearest(map, hw, (h, w))
        }
    };
    for &i in &args.indices {
        let sample = test.subset(&[i]);
        let out = model.infer(&sample.images)?;
        write_pgm(
            &args.out_dir.join(format!("sample{i}_input.pgm")),
            (h, w),
            &image_to_gray(sample.images.data(), c),
        )?;
        let maps = out.attention_map.expect("attention branch present");
        let (_, t_count, mh, mw) = maps.dims4()?;
        let plane = mh * mw;
        for t in 0..t_count {
            if args.task.is_some_and(|sel| sel != t) {
                continue;
            }
            let name = if spec.is_multitask() {
                format!("sample{i}_task{t}_attention.pgm")
            } else {
                format!("sample{i}_attention.pgm")
            };
            let map = &maps.data()[t * plane..(t + 1) * plane];
            write_pgm(&args.out_dir.join(name), (h, w), &quantize_min_max(&resize(map, (mh, mw))))?;
        }
        if let Some(class) = args.class {
            let k_maps = out.k_maps.expect("attention branch present");
            let cam = cam_attention_map(&k_maps, &CamSelector::Class(class))?;
            write_pgm(
                &args.out_dir.join(format!("sample{i}_cam{class}.pgm")),
                (h, w),
                &quantize_min_max(&resize(cam.data(), (mh, mw))),
            )?;
        }
    }
    Ok(())
}

fn cmd_compare(args: &CompareArgs, seed: u64) -> Result<()> {
    if args.data.tasks > 1 {
        return invalid("the mechanism comparison is single-task");
    }
    let (train, test) = load_splits(&args.data)?;
    let spec = network_spec(&args.model, &args.data);
    let (_, h, w) = train.image_shape();
    let config = train_config(&args.optim, seed, (h, w));
    let stats = ChannelStats::from_images(&train.images)?;
    let rows = mechanism_comparison(spec, seed, &train, &test, &config, |m| m.set_input_stats(&stats))?;
    for r in &rows {
        eprintln!("{:<8} {:<14} top1_error {}", r.mechanism.name(), r.mechanism.formula(), r.top1_error);
    }
    fs::write(&args.out, comparison_csv(&rows))?;
    Ok(())
}

fn cmd_make_synthetic(args: &MakeSyntheticArgs) -> Result<()> {
    if args.data.dataset != DatasetKind::Synthetic || args.data.data_dir.is_some() {
        return invalid("make-synthetic generates data; use --dataset synthetic without --data-dir");
    }
    if args.data.tasks > 1 {
        return invalid("only single-task synthetic data can be written as records");
    }
    let (train, test) = load_splits(&args.data)?;
    fs::create_dir_all(&args.out_dir)?;
    for (stem, data) in [("train", &train), ("test", &test)] {
        save_with_regions(
            data,
            &args.out_dir.join(format!("{stem}.bin")),
            &args.out_dir.join(format!("{stem}.regions")),
        )?;
    }
    Ok(())
}

/// Runs a parsed command; text meant for stdout is returned.
pub fn execute(cli: &Cli) -> Result<Option<String>> {
    match &cli.command {
        Command::Train(a) => cmd_train(a, cli.seed).map(|_| None),
        Command::Eval(a) => cmd_eval(a).map(Some),
        Command::Visualize(a) => cmd_visualize(a).map(|_| None),
        Command::Compare(a) => cmd_compare(a, cli.seed).map(|_| None),
        Command::MakeSynthetic(a) => cmd_make_synthetic(a).map(|_| None),
    }
}

/// Exit status for an error: 1 for bad input or data, 3 for divergence
/// (2 is taken by usage errors).
pub fn exit_code(err: &AbnError) -> u8 {
    match err {
        AbnError::Divergence { .. } => 3,
        _ => 1,
    }
}
