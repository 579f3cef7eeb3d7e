use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use entangle_core::attribution::encode_image_ppm;
use entangle_core::denoiser::checkpoint;
use entangle_core::denoiser::SamplerMode;
use entangle_core::fsutil::write_bytes;
use entangle_core::harness::experiment::{self, RunMode};
use entangle_core::harness::ExperimentConfig;
use entangle_core::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(name = "entangle", version, about = "Measure and reduce colour/shape concept entanglement in a toy text-to-image denoiser")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the toy denoiser on the synthetic dataset and save a checkpoint.
    Train(Common),
    /// Write the synthetic dataset (manifest and images) to disk.
    GenerateDataset(Common),
    /// Sample with plain classifier-free guidance and score entanglement.
    Audit(Common),
    /// Sample with energy guidance and score entanglement.
    Mitigate(Common),
    /// Compare the energy gradient with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Summarise audit and mitigation outputs as markdown.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Sampler {
    Ddim,
    Ddpm,
}

#[derive(Clone, Copy, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON with a top-level "version").
    #[arg(long)]
    config: Option<PathBuf>,
    /// Experiment seed for train/generate-dataset; first image seed for audit/mitigate.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    q: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    /// Training steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, value_enum)]
    sampler: Option<Sampler>,
    /// Images per prompt.
    #[arg(long)]
    images: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    heatmaps: Option<Toggle>,
    /// Checkpoint path; defaults to `<out>/model.json`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Number of random latents.
    #[arg(long, default_value_t = 20)]
    latents: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-4)]
    step: f64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
    #[arg(long)]
    q: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    /// Write `gradcheck.json` here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory holding `audit/` and optionally `mitigate/`.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

enum Failure {
    Core(Error),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Io { .. } => EXIT_IO,
        Error::Numerical(_) => EXIT_NUMERICAL,
        _ => EXIT_USAGE,
    }
}

fn load_config(args: &Common, seed_is_base: bool) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = args.seed {
        if seed_is_base {
            cfg.audit.seed_base = s;
        } else {
            cfg.seed = s;
        }
    }
    let g = &mut cfg.guidance;
    if let Some(v) = args.lambda {
        g.lambda = v;
    }
    if let Some(v) = args.gamma {
        g.gamma = v;
    }
    if let Some(v) = args.q {
        g.q = v;
    }
    if let Some(v) = args.tau {
        g.tau = v;
    }
    if let Some(s) = args.sampler {
        g.sampler = match s {
            Sampler::Ddim => SamplerMode::Ddim,
            Sampler::Ddpm => SamplerMode::Ddpm,
        };
    }
    if let Some(v) = args.steps {
        cfg.training.steps = v;
    }
    if let Some(v) = args.images {
        cfg.audit.n_images = v;
    }
    if let Some(h) = args.heatmaps {
        cfg.audit.heatmaps = matches!(h, Toggle::On);
    }
    if let Some(o) = &args.out {
        cfg.out_dir = o.clone();
        cfg.checkpoint = o.join("model.json");
    }
    if let Some(c) = &args.checkpoint {
        cfg.checkpoint = c.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serialisable")
}

fn train(args: &Common) -> Result<(), Failure> {
    let cfg = load_config(args, false)?;
    let (model, summary) = experiment::train(&cfg, &mut |line| eprintln!("{line}"))?;
    checkpoint::save(&cfg.checkpoint, &model, &cfg.schedule)?;
    write_bytes(&cfg.out_dir.join("training.json"), to_json(&summary).as_bytes())?;
    println!(
        "held-out mse {:.4} -> {:.4} ({:.1}% lower); checkpoint {}",
        summary.heldout_initial,
        summary.heldout_final,
        100.0 * summary.reduction,
        cfg.checkpoint.display()
    );
    Ok(())
}

fn generate_dataset(args: &Common) -> Result<(), Failure> {
    let cfg = load_config(args, false)?;
    let data = experiment::build_dataset(&cfg)?;
    let dir = &cfg.out_dir;
    for (entry, item) in data.manifest.items.iter().zip(&data.items) {
        write_bytes(&dir.join("images").join(format!("{:05}.ppm", entry.index)), &encode_image_ppm(&item.scene.image))?;
    }
    write_bytes(&dir.join("manifest.json"), to_json(&data.manifest).as_bytes())?;
    println!("{} items, sha256 {}", data.manifest.size, data.manifest.hash);
    Ok(())
}

fn sample(args: &Common, mode: RunMode) -> Result<(), Failure> {
    let mut cfg = load_config(args, true)?;
    let (model, schedule) = checkpoint::load(&cfg.checkpoint)?;
    cfg.model = model.config().clone();
    cfg.schedule = schedule;
    let output = experiment::evaluate(&model, &cfg, mode)?;
    let dir = cfg.out_dir.join(mode.name());
    experiment::write_outputs(&dir, &output, &cfg)?;
    for r in &output.reports {
        println!(
            "{:<8} mIoU {:.4}  mBIoU {:.4}  (n={}, λ={})",
            r.metadata.prompt.last().cloned().unwrap_or_default(),
            r.miou,
            r.mbiou,
            r.images.len(),
            r.metadata.lambda
        );
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn gradcheck(args: &GradcheckArgs) -> Result<(), Failure> {
    let mut g = ExperimentConfig::default().guidance_for("circle", args.seed)?;
    if let Some(q) = args.q {
        g.q = q;
    }
    if let Some(t) = args.tau {
        g.tau = t;
    }
    g.validate()?;
    let report = experiment::gradcheck(args.latents, args.seed, args.step, args.tol, &g)?;
    for e in &report.entries {
        println!("t={:<3} E={:.6} max rel err {:.3e}", e.timestep, e.energy, e.max_relative_error);
    }
    if let Some(dir) = &args.out {
        write_bytes(&dir.join("gradcheck.json"), to_json(&report).as_bytes())?;
    }
    println!("worst {:.3e} (tolerance {:.1e})", report.worst, report.tolerance);
    if report.passed {
        Ok(())
    } else {
        Err(Failure::Numerical(format!(
            "gradient check failed: worst relative error {:.3e} > {:.1e}",
            report.worst, report.tolerance
        )))
    }
}

fn report(args: &ReportArgs) -> Result<(), Failure> {
    let md = experiment::report(&args.out)?;
    let path: &Path = &args.out.join("report.md");
    write_bytes(path, md.as_bytes())?;
    print!("{md}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Train(a) => train(a),
        Command::GenerateDataset(a) => generate_dataset(a),
        Command::Audit(a) => sample(a, RunMode::Audit),
        Command::Mitigate(a) => sample(a, RunMode::Mitigate),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_NUMERICAL)
        }
    }
}
