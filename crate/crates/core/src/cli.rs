//! Command-line interface: `train`, `eval`, `params`, `gradcheck`, `perturb`.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::autograd::Fault;
use crate::checkpoint;
use crate::data::{self, ChannelStats, Dataset};
use crate::error::{Error, Result};
use crate::gradcheck::GradCheck;
use crate::gradsuite::{self, CaseResult};
use crate::model::{Model, ModelSpec};
use crate::train::{evaluate, EpochMetrics, TrainConfig, Trainer};

#[derive(Debug, Parser)]
#[command(name = "capsdense", version, about = "Densely connected capsule networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write metrics.csv, checkpoints and summary.json.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a test set.
    Eval(EvalArgs),
    /// Print per-module and total parameter counts.
    Params(ParamsArgs),
    /// Run finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Decode one sample with each class-capsule dimension perturbed in turn.
    Perturb(PerturbArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DatasetKind {
    /// Pick from the model's input shape.
    Auto,
    Synth,
    Mnist,
    Cifar10,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Model spec JSON file.
    #[arg(long, conflicts_with = "preset")]
    pub model: Option<PathBuf>,
    /// Named preset or model kind.
    #[arg(long)]
    pub preset: Option<String>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long, env = "CAPSDENSE_DATA")]
    pub data_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "auto")]
    pub dataset: DatasetKind,
    /// Use at most this many training samples (synth: generate this many).
    #[arg(long)]
    pub train_samples: Option<usize>,
    /// Use at most this many test samples (synth: generate this many).
    #[arg(long)]
    pub test_samples: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, default_value_t = 0.9)]
    pub decay: f64,
    #[arg(long)]
    pub routing_iters: Option<usize>,
    #[arg(long)]
    pub recon_mult: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long, default_value = "runs/latest")]
    pub out: PathBuf,
    /// Resume from this checkpoint (its spec sidecar supplies the model).
    #[arg(long, conflicts_with_all = ["model", "preset"])]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub head_isolation: Option<bool>,
    #[arg(long, default_value_t = 1)]
    pub checkpoint_every: usize,
    /// Print the summary as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Scale {
    Ops,
    Model,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FaultArg {
    None,
    LeakyRelu,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "ops")]
    pub scale: Scale,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Inject a broken backward rule (negative control).
    #[arg(long, value_enum, default_value = "none", hide = true)]
    pub fault: FaultArg,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct PerturbArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Index into the test set.
    #[arg(long, default_value_t = 0)]
    pub sample: usize,
    #[arg(long, default_value_t = -0.2, allow_hyphen_values = true)]
    pub delta: f32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "perturb")]
    pub out: PathBuf,
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Params(a) => cmd_params(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Perturb(a) => cmd_perturb(a),
    }
}

fn set_threads(threads: Option<usize>) -> Result<()> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(Error::config("--threads must be at least 1"));
        }
        std::env::set_var("MATMUL_NUM_THREADS", n.to_string());
    }
    Ok(())
}

pub fn resolve_spec(m: &ModelArgs) -> Result<ModelSpec> {
    match (&m.model, &m.preset) {
        (Some(path), _) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::config(format!("cannot read model spec {}: {e}", path.display())))?;
            ModelSpec::from_json(&text)
        }
        (None, Some(name)) => ModelSpec::preset(name),
        (None, None) => Err(Error::config("one of --model or --preset is required")),
    }
}

/// Train and test splits for `spec`.
pub fn load_data(spec: &ModelSpec, d: &DataArgs, seed: u64) -> Result<(Dataset, Dataset, Option<ChannelStats>)> {
    let input = spec.input;
    let kind = match d.dataset {
        DatasetKind::Auto => match (input.channels, input.height, input.width) {
            (1, data::SYNTH_SIDE, data::SYNTH_SIDE) => DatasetKind::Synth,
            (1, 28, 28) => DatasetKind::Mnist,
            (3, 32, 32) => DatasetKind::Cifar10,
            _ => {
                return Err(Error::config(format!(
                    "no dataset matches input {}x{}x{}; pass --dataset",
                    input.channels, input.height, input.width
                )))
            }
        },
        k => k,
    };
    let dir = || {
        d.data_dir
            .clone()
            .ok_or_else(|| Error::config("--data-dir (or CAPSDENSE_DATA) is required for this dataset"))
    };
    let (train, test, stats) = match kind {
        DatasetKind::Synth => {
            let (train, test) = synth_split(d.train_samples.unwrap_or(1024), d.test_samples.unwrap_or(256), seed);
            (train, test, None)
        }
        DatasetKind::Mnist => {
            let dir = dir()?;
            (data::load_mnist_dir(&dir, true)?, data::load_mnist_dir(&dir, false)?, None)
        }
        DatasetKind::Cifar10 => {
            let dir = dir()?;
            let train = data::load_cifar10_bin(&data::cifar10_paths(&dir, true))?;
            let test = data::load_cifar10_bin(&data::cifar10_paths(&dir, false))?;
            let stats = ChannelStats::cached(&dir, &train)?;
            (train, test, Some(stats))
        }
        DatasetKind::Auto => unreachable!("resolved above"),
    };
    let train = match d.train_samples {
        Some(n) if kind != DatasetKind::Synth => train.take(n)?,
        _ => train,
    };
    let test = match d.test_samples {
        Some(n) if kind != DatasetKind::Synth => test.take(n)?,
        _ => test,
    };
    let [c, h, w] = train.sample_shape();
    if [c, h, w] != [input.channels, input.height, input.width] {
        return Err(Error::config(format!(
            "dataset images are {c}x{h}x{w}, model expects {}x{}x{}",
            input.channels, input.height, input.width
        )));
    }
    if train.num_classes > spec.num_classes || test.labels.iter().any(|&l| l >= spec.num_classes) {
        return Err(Error::config(format!(
            "dataset has labels outside the model's {} classes",
            spec.num_classes
        )));
    }
    Ok((train, test, stats))
}

/// Independent synthetic train and test sets.
pub fn synth_split(train: usize, test: usize, seed: u64) -> (Dataset, Dataset) {
    (data::synth_shapes(train, seed), data::synth_shapes(test, seed ^ 0x7E57_7E57_7E57_7E57))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<i32> {
    set_threads(a.threads)?;
    let resumed = match &a.checkpoint {
        Some(path) => Some(checkpoint::load_with_spec(path)?),
        None => None,
    };
    let spec = match &resumed {
        Some((spec, _)) => spec.clone(),
        None => resolve_spec(&a.model)?,
    };
    let cfg = TrainConfig {
        lr0: a.lr.or(spec.lr).unwrap_or(0.001),
        decay: a.decay,
        epochs: a.epochs,
        batch_size: a.batch_size,
        recon_multiplier: a.recon_mult,
        routing_iters: a.routing_iters,
        seed: a.seed,
        head_isolation: a.head_isolation,
        checkpoint_every: Some(a.checkpoint_every),
        ..TrainConfig::default()
    };
    let (train, test, stats) = load_data(&spec, &a.data, a.seed)?;
    let mut trainer = match resumed {
        Some((spec, ck)) => Trainer::resume(&spec, ck, cfg)?,
        None => Trainer::new(&spec, cfg)?,
    };
    trainer.input_stats = stats;
    fs::create_dir_all(&a.out)?;
    let quiet = a.json;
    let rows = trainer.fit(&train, Some(&test), Some(&a.out), |r: &EpochMetrics| {
        if !quiet {
            println!(
                "epoch {:>3}  lr {:.6}  loss {:.5}  train {:.4}  test {:.4}  {:.1}s",
                r.epoch,
                r.lr,
                r.total_loss,
                r.train_acc,
                r.test_acc.unwrap_or(f64::NAN),
                r.seconds
            );
        }
    })?;
    let best = rows
        .iter()
        .filter_map(|r| r.test_acc.map(|a| (a, r.epoch)))
        .fold(None, |acc: Option<(f64, usize)>, x| match acc {
            Some(b) if b.0 >= x.0 => Some(b),
            _ => Some(x),
        });
    let summary = json!({
        "model": trainer.model.spec.kind.name(),
        "param_count": trainer.model.params.count(),
        "epochs_completed": trainer.epoch,
        "best_test_acc": best.map(|b| b.0),
        "best_epoch": best.map(|b| b.1),
        "final": rows.last(),
        "checkpoint": a.out.join("checkpoint.cdck"),
    });
    write_json(&a.out.join("summary.json"), &summary)?;
    if a.json {
        println!("{}", serde_json::to_string(&summary)?);
    }
    Ok(0)
}

fn cmd_eval(a: EvalArgs) -> Result<i32> {
    set_threads(a.threads)?;
    let (spec, ck) = checkpoint::load_with_spec(&a.checkpoint)?;
    let model = Model { spec, params: ck.params };
    let (_, test, stats) = load_data(&model.spec, &a.data, a.seed)?;
    let report = evaluate(&model, &test, a.batch_size.max(1), stats.as_ref())?;
    if a.json {
        println!("{}", serde_json::to_string(&report)?);
    } else {
        println!("accuracy {:.4} on {} samples", report.accuracy, report.samples);
        for (k, acc) in report.per_class_accuracy.iter().enumerate() {
            match acc {
                Some(acc) => println!("  class {k:>2}: {acc:.4}"),
                None => println!("  class {k:>2}: -"),
            }
        }
    }
    Ok(0)
}

fn cmd_params(a: ParamsArgs) -> Result<i32> {
    let spec = resolve_spec(&a.model)?;
    let breakdown = spec.param_breakdown()?;
    let total = spec.param_count()?;
    if a.json {
        let modules: serde_json::Map<String, serde_json::Value> =
            breakdown.iter().map(|(n, c)| (n.clone(), json!(c))).collect();
        println!(
            "{}",
            serde_json::to_string(&json!({"model": spec.kind.name(), "modules": modules, "total": total}))?
        );
    } else {
        println!("{}", spec.kind.name());
        for (name, count) in &breakdown {
            println!("  {name:<24} {count:>12}");
        }
        println!("  {:<24} {total:>12}", "total");
    }
    Ok(0)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<i32> {
    let cfg = GradCheck {
        fault: match a.fault {
            FaultArg::None => Fault::None,
            FaultArg::LeakyRelu => Fault::LeakyRelu,
        },
        ..GradCheck::default()
    };
    let results: Vec<CaseResult> = match a.scale {
        Scale::Ops => {
            let mut r = gradsuite::ops_suite(&cfg)?;
            if cfg.fault != Fault::None {
                r.push(gradsuite::model_check(&gradsuite::tiny_spec(), a.seed, &cfg)?);
            }
            r
        }
        Scale::Model => vec![gradsuite::model_check(&gradsuite::tiny_spec(), a.seed, &cfg)?],
    };
    let failed = results.iter().filter(|r| !r.passed()).count();
    if a.json {
        let cases: Vec<_> = results
            .iter()
            .map(|r| {
                json!({
                    "name": r.name,
                    "max_rel_error": r.report.max_rel_error,
                    "tolerance": r.tolerance,
                    "checked": r.report.checked,
                    "passed": r.passed(),
                })
            })
            .collect();
        println!("{}", serde_json::to_string(&json!({"cases": cases, "failed": failed}))?);
    } else {
        for r in &results {
            println!(
                "{:<24} max rel error {:.3e} (tol {:.0e}) {}",
                r.name,
                r.report.max_rel_error,
                r.tolerance,
                if r.passed() { "ok" } else { "FAIL" }
            );
        }
    }
    if failed > 0 {
        return Err(Error::Numerical(format!("{failed} gradient check(s) above tolerance")));
    }
    Ok(0)
}

/// Binary PGM (P5) of a `[H,W]` image in [0,1].
pub fn encode_pgm(height: usize, width: usize, pixels: &[f32]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(pixels.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

fn cmd_perturb(a: PerturbArgs) -> Result<i32> {
    let (spec, ck) = checkpoint::load_with_spec(&a.checkpoint)?;
    if spec.decoder.is_none() {
        return Err(Error::config("model has no decoder; nothing to reconstruct"));
    }
    let model = Model { spec, params: ck.params };
    let (_, test, stats) = load_data(&model.spec, &a.data, a.seed)?;
    if a.sample >= test.len() {
        return Err(Error::config(format!("sample {} out of range for {} test samples", a.sample, test.len())));
    }
    let one = test.select(&[a.sample])?;
    let mut input = one.images.clone();
    if let Some(s) = &stats {
        s.normalize_images(&mut input)?;
    }
    let (caps, predicted) = model.infer(&input)?;
    let label = one.labels[0];
    let (k, d) = (caps.shape()[1], caps.shape()[2]);
    let class_caps = caps.reshape(&[k, d])?;
    let (h, w) = (model.spec.input.height, model.spec.input.width);

    fs::create_dir_all(&a.out)?;
    let mut files = Vec::with_capacity(d + 1);
    let mut save = |name: String, img: &crate::Tensor<f32>| -> Result<()> {
        let plane = &img.data()[..h * w];
        fs::File::create(a.out.join(&name))?.write_all(&encode_pgm(h, w, plane))?;
        files.push(name);
        Ok(())
    };
    let baseline = model.perturbed_reconstruction(&class_caps, label, label, 0, 0.0)?;
    save("baseline.pgm".into(), &baseline)?;
    for dim in 0..d {
        let img = model.perturbed_reconstruction(&class_caps, label, label, dim, a.delta)?;
        save(format!("dim_{dim:02}.pgm"), &img)?;
    }
    let index = json!({
        "checkpoint": a.checkpoint,
        "sample": a.sample,
        "label": label,
        "predicted": predicted[0],
        "delta": a.delta,
        "capsule_dims": d,
        "width": w,
        "height": h,
        "files": files,
    });
    write_json(&a.out.join("index.json"), &index)?;
    println!("wrote {} images to {}", files.len(), a.out.display());
    Ok(0)
}
