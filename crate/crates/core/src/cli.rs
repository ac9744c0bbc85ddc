//! Command-line entry point: train / generate / evaluate / accountant / grid
//! subcommands, flag-over-file configuration, write-once outputs, and the
//! fixed exit-code contract (0 ok, 2 config, 3 I/O, 4 corrupt artifact).

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::accountant::{max_affordable_steps, AccountantState, MechanismParams};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::{RunManifest, TrainConfig};
use crate::data::{load_idx, mnist_dir, render_grid, save_idx, LabeledDataset};
use crate::dp::DpMode;
use crate::error::{Error, Result};
use crate::eval::{table1_pipeline, ClassifierSpec};
use crate::rng::RngStream;
use crate::train::{balanced_one_hot, generate, train, TrainReport};

/// Differentially private conditional GAN: train on labeled images under an
/// (ε, δ) budget, generate synthetic datasets, and evaluate them downstream.
#[derive(Debug, Parser)]
#[command(name = "dpcgan", version, about, long_about = None)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the GAN pair under the configured privacy budget.
    Train(TrainArgs),
    /// Sample a labeled synthetic dataset from a trained checkpoint.
    Generate(GenerateArgs),
    /// Train downstream classifiers on sources and score them on a test set.
    Evaluate(EvaluateArgs),
    /// Query the privacy accountant without training.
    Accountant(AccountantArgs),
    /// Render a dataset's images as a PGM tile grid.
    Grid(GridArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Flat key=value config file; flags below override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding the four MNIST IDX files (defaults to $MNIST_DIR
    /// or data/mnist).
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Training images IDX file (defaults to data-dir/train-images-idx3-ubyte).
    #[arg(long)]
    train_images: Option<PathBuf>,
    /// Training labels IDX file (defaults to data-dir/train-labels-idx1-ubyte).
    #[arg(long)]
    train_labels: Option<PathBuf>,
    /// Keep only the first N training examples.
    #[arg(long)]
    take: Option<usize>,
    /// Directory that receives checkpoint, report, snapshot, and manifest.
    #[arg(long)]
    out_dir: PathBuf,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,

    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    noise_multiplier: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    target_epsilon: Option<f64>,
    #[arg(long)]
    target_delta: Option<f64>,
    #[arg(long)]
    max_steps: Option<u64>,
    /// split_clip | combined_clip | none
    #[arg(long)]
    dp_mode: Option<String>,
    #[arg(long)]
    lr_initial: Option<f64>,
    #[arg(long)]
    lr_final: Option<f64>,
    #[arg(long)]
    lr_decay_end_step: Option<u64>,
    #[arg(long)]
    lr_step_drop: Option<bool>,
    #[arg(long)]
    seed_params: Option<u64>,
    #[arg(long)]
    seed_noise: Option<u64>,
    #[arg(long)]
    seed_sampling: Option<u64>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    gen_hidden_dim: Option<usize>,
    #[arg(long)]
    disc_hidden_dim: Option<usize>,
    #[arg(long)]
    sensitivity_multiplier: Option<f64>,
    #[arg(long)]
    non_saturating: Option<bool>,
    #[arg(long)]
    gen_lr: Option<f64>,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    /// Trained checkpoint to sample from.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Images generated per class.
    #[arg(long, default_value_t = 6000)]
    per_class: usize,
    /// Seed for the generation stream.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output IDX images file.
    #[arg(long)]
    out_images: PathBuf,
    /// Output IDX labels file.
    #[arg(long)]
    out_labels: PathBuf,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Training source as NAME=IMAGES,LABELS; repeatable, evaluated in order.
    #[arg(long = "source", required = true)]
    sources: Vec<String>,
    /// Real test images IDX file.
    #[arg(long)]
    test_images: PathBuf,
    /// Real test labels IDX file.
    #[arg(long)]
    test_labels: PathBuf,
    /// lr | mlp | both
    #[arg(long, default_value = "both")]
    classifier: String,
    /// Base seed; cell seed = base + classifier index.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct AccountantArgs {
    /// Poisson sampling probability q ∈ [0,1].
    #[arg(long)]
    q: f64,
    /// Noise multiplier σ > 0.
    #[arg(long)]
    sigma: f64,
    /// Privacy δ ∈ (0,1).
    #[arg(long)]
    target_delta: f64,
    /// Convert this many steps to a spend.
    #[arg(long, conflicts_with = "target_epsilon")]
    steps: Option<u64>,
    /// Plan: largest step count whose spend stays within this ε.
    #[arg(long)]
    target_epsilon: Option<f64>,
}

#[derive(Debug, Args)]
struct GridArgs {
    /// Images IDX file.
    #[arg(long)]
    images: PathBuf,
    /// Labels IDX file.
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value_t = 10)]
    rows: usize,
    #[arg(long, default_value_t = 10)]
    cols: usize,
    /// Output PGM path.
    #[arg(long)]
    out: PathBuf,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

/// Refuses to clobber an existing output unless `--force` was given.
fn check_writable(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::io(
            path.display().to_string(),
            std::io::Error::new(
                std::io::ErrorKind::AlreadyExists,
                "output already exists; pass --force to overwrite",
            ),
        ));
    }
    Ok(())
}

/// Creates the directory an output file will land in, if it is missing.
fn ensure_parent_dir(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .map_err(|e| Error::io(parent.display().to_string(), e))?;
        }
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn resolve_train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &args.config {
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        cfg.apply_text(&text)?;
    }
    if let Some(v) = args.clip_norm {
        cfg.clip_norm = v;
    }
    if let Some(v) = args.noise_multiplier {
        cfg.noise_multiplier = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.target_epsilon {
        cfg.target_epsilon = v;
    }
    if let Some(v) = args.target_delta {
        cfg.target_delta = v;
    }
    if let Some(v) = args.max_steps {
        cfg.max_steps = v;
    }
    if let Some(v) = &args.dp_mode {
        cfg.dp_mode = DpMode::parse(v)?;
    }
    if let Some(v) = args.lr_initial {
        cfg.lr.initial = v;
    }
    if let Some(v) = args.lr_final {
        cfg.lr.final_value = v;
    }
    if let Some(v) = args.lr_decay_end_step {
        cfg.lr.decay_end_step = v;
    }
    if let Some(v) = args.lr_step_drop {
        cfg.lr.step_drop = v;
    }
    if let Some(v) = args.seed_params {
        cfg.seed_params = v;
    }
    if let Some(v) = args.seed_noise {
        cfg.seed_noise = v;
    }
    if let Some(v) = args.seed_sampling {
        cfg.seed_sampling = v;
    }
    if let Some(v) = args.latent_dim {
        cfg.latent_dim = v;
    }
    if let Some(v) = args.gen_hidden_dim {
        cfg.gen_hidden_dim = v;
    }
    if let Some(v) = args.disc_hidden_dim {
        cfg.disc_hidden_dim = v;
    }
    if let Some(v) = args.sensitivity_multiplier {
        cfg.sensitivity_multiplier = v;
    }
    if let Some(v) = args.non_saturating {
        cfg.non_saturating = v;
    }
    if let Some(v) = args.gen_lr {
        cfg.gen_lr = v;
    }
    Ok(cfg)
}

/// Stable text form of a training report, written beside the checkpoint.
fn report_text(report: &TrainReport) -> String {
    let mut s = String::new();
    s.push_str(&format!("steps_run = {}\n", report.steps_run));
    s.push_str(&format!("halt_reason = {}\n", report.halt_reason.as_str()));
    s.push_str(&format!("final_epsilon = {}\n", report.final_spend.epsilon));
    s.push_str(&format!("final_delta = {}\n", report.final_spend.delta));
    s.push_str(&format!(
        "optimal_order = {}\n",
        report.final_spend.optimal_order
    ));
    s.push_str("# loss samples: step d_loss_real d_loss_fake g_loss\n");
    for sample in &report.loss_samples {
        s.push_str(&format!(
            "sample = {} {} {} {}\n",
            sample.step, sample.d_loss_real, sample.d_loss_fake, sample.g_loss
        ));
    }
    s
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = resolve_train_config(args)?;
    cfg.validate()?;

    let data_dir = args.data_dir.clone().unwrap_or_else(mnist_dir);
    let images_path = args
        .train_images
        .clone()
        .unwrap_or_else(|| data_dir.join("train-images-idx3-ubyte"));
    let labels_path = args
        .train_labels
        .clone()
        .unwrap_or_else(|| data_dir.join("train-labels-idx1-ubyte"));

    let out_dir = &args.out_dir;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let ckpt_path = out_dir.join("model.ckpt");
    let report_path = out_dir.join("report.txt");
    let snapshot_path = out_dir.join("accountant.txt");
    let manifest_path = out_dir.join("manifest.txt");
    for p in [&ckpt_path, &report_path, &snapshot_path, &manifest_path] {
        check_writable(p, args.force)?;
    }

    // Load data before creating any output, so a missing input leaves the
    // output directory untouched.
    let mut dataset = load_idx(&images_path, &labels_path)?;
    if let Some(n) = args.take {
        dataset = dataset.take(n)?;
    }

    let (pair, report, accountant) = train(&dataset, &cfg)?;

    let ckpt = Checkpoint {
        config: cfg.clone(),
        step: pair.step,
        generator: pair.generator,
        discriminator: pair.discriminator,
        adam: pair.adam_state,
        accountant: accountant.clone(),
        streams: report.final_streams,
    };
    save_checkpoint(&ckpt, &ckpt_path)?;
    write_text(&report_path, &report_text(&report))?;
    write_text(&snapshot_path, &accountant.to_snapshot_text())?;
    let manifest = RunManifest::new("train", cfg)
        .input("train_images", &images_path)
        .input("train_labels", &labels_path)
        .output("checkpoint", &ckpt_path)
        .output("report", &report_path)
        .output("accountant_snapshot", &snapshot_path);
    write_text(&manifest_path, &manifest.to_text())?;

    println!(
        "halted after {} steps ({})",
        report.steps_run,
        report.halt_reason.as_str()
    );
    println!(
        "final spend (epsilon, delta) = ({}, {}) at order {}",
        report.final_spend.epsilon, report.final_spend.delta, report.final_spend.optimal_order
    );
    println!("checkpoint written to {}", ckpt_path.display());
    Ok(())
}

fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    check_writable(&args.out_images, args.force)?;
    check_writable(&args.out_labels, args.force)?;
    let manifest_path = args.out_images.with_extension("manifest.txt");
    check_writable(&manifest_path, args.force)?;
    ensure_parent_dir(&args.out_images)?;
    ensure_parent_dir(&args.out_labels)?;

    let ckpt = load_checkpoint(&args.checkpoint)?;
    let classes = ckpt
        .generator
        .input_dim()
        .saturating_sub(ckpt.config.latent_dim);
    if classes == 0 {
        return Err(Error::Corrupt {
            path: args.checkpoint.display().to_string(),
            message: format!(
                "generator input dim {} does not exceed latent dim {}",
                ckpt.generator.input_dim(),
                ckpt.config.latent_dim
            ),
        });
    }
    let labels = balanced_one_hot(args.per_class, classes)?;
    let mut stream = RngStream::new(args.seed);
    let synthetic = generate(&ckpt.generator, &labels, &mut stream)?;
    save_idx(&synthetic, &args.out_images, &args.out_labels)?;

    let manifest = RunManifest::new("generate", ckpt.config)
        .input("checkpoint", &args.checkpoint)
        .input("seed", args.seed.to_string())
        .input("per_class", args.per_class.to_string())
        .output("images", &args.out_images)
        .output("labels", &args.out_labels);
    write_text(&manifest_path, &manifest.to_text())?;

    println!(
        "wrote {} synthetic examples ({} per class × {classes} classes)",
        synthetic.len(),
        args.per_class
    );
    Ok(())
}

fn parse_source(spec: &str) -> Result<(String, PathBuf, PathBuf)> {
    let bad = || Error::Config {
        key: "source".into(),
        message: format!("expected NAME=IMAGES,LABELS, got `{spec}`"),
    };
    let (name, paths) = spec.split_once('=').ok_or_else(bad)?;
    let (images, labels) = paths.split_once(',').ok_or_else(bad)?;
    if name.is_empty() || images.is_empty() || labels.is_empty() {
        return Err(bad());
    }
    Ok((
        name.to_string(),
        PathBuf::from(images),
        PathBuf::from(labels),
    ))
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    check_writable(&args.out, args.force)?;
    let manifest_path = args.out.with_extension("manifest.txt");
    check_writable(&manifest_path, args.force)?;
    ensure_parent_dir(&args.out)?;

    let specs: Vec<ClassifierSpec> = match args.classifier.as_str() {
        "lr" => vec![ClassifierSpec::logistic_regression()],
        "mlp" => vec![ClassifierSpec::mlp()],
        "both" => vec![
            ClassifierSpec::logistic_regression(),
            ClassifierSpec::mlp(),
        ],
        other => {
            return Err(Error::Config {
                key: "classifier".into(),
                message: format!("expected lr, mlp, or both, got `{other}`"),
            })
        }
    };

    let mut sources: Vec<(String, LabeledDataset)> = Vec::new();
    let mut manifest = RunManifest::new("evaluate", TrainConfig::default())
        .input("test_images", &args.test_images)
        .input("test_labels", &args.test_labels)
        .input("classifier", &args.classifier)
        .input("base_seed", args.seed.to_string());
    for spec in &args.sources {
        let (name, images, labels) = parse_source(spec)?;
        manifest = manifest
            .input(&format!("source_{name}_images"), &images)
            .input(&format!("source_{name}_labels"), &labels);
        sources.push((name, load_idx(&images, &labels)?));
    }
    let test = load_idx(&args.test_images, &args.test_labels)?;

    let table = table1_pipeline(&sources, &test, &specs, args.seed)?;
    write_text(&args.out, &table.to_csv())?;
    manifest = manifest.output("csv", &args.out);
    write_text(&manifest_path, &manifest.to_text())?;

    print!("{}", table.to_aligned_text());
    println!("CSV written to {}", args.out.display());
    Ok(())
}

fn cmd_accountant(args: &AccountantArgs) -> Result<()> {
    let params = MechanismParams::new(args.q, args.sigma)?;
    match (args.steps, args.target_epsilon) {
        (Some(steps), None) => {
            let mut state = AccountantState::new(params)?;
            if steps > 0 {
                state = state.accumulate_step(steps)?;
            }
            let spend = state.to_epsilon_delta(args.target_delta)?;
            println!(
                "epsilon = {} at order {} (q = {}, sigma = {}, steps = {steps}, delta = {})",
                spend.epsilon, spend.optimal_order, args.q, args.sigma, args.target_delta
            );
        }
        (None, Some(eps)) => {
            let steps = max_affordable_steps(&params, eps, args.target_delta)?;
            println!(
                "max_affordable_steps = {steps} (q = {}, sigma = {}, target epsilon = {eps}, delta = {})",
                args.q, args.sigma, args.target_delta
            );
        }
        _ => {
            return Err(Error::Param(
                "pass exactly one of --steps or --target-epsilon".into(),
            ))
        }
    }
    Ok(())
}

fn cmd_grid(args: &GridArgs) -> Result<()> {
    check_writable(&args.out, args.force)?;
    let manifest_path = args.out.with_extension("manifest.txt");
    check_writable(&manifest_path, args.force)?;
    ensure_parent_dir(&args.out)?;
    let dataset = load_idx(&args.images, &args.labels)?;
    render_grid(&dataset, args.rows, args.cols, &args.out)?;
    let manifest = RunManifest::new("grid", TrainConfig::default())
        .input("images", &args.images)
        .input("labels", &args.labels)
        .output("grid", &args.out);
    write_text(&manifest_path, &manifest.to_text())?;
    println!(
        "wrote {}×{} grid to {}",
        args.rows,
        args.cols,
        args.out.display()
    );
    Ok(())
}

impl Cli {
    /// Runs the parsed command; the caller maps errors to exit codes.
    pub fn run(&self) -> Result<()> {
        match &self.command {
            Command::Train(args) => cmd_train(args),
            Command::Generate(args) => cmd_generate(args),
            Command::Evaluate(args) => cmd_evaluate(args),
            Command::Accountant(args) => cmd_accountant(args),
            Command::Grid(args) => cmd_grid(args),
        }
    }
}
