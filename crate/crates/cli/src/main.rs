use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use lmjf_core::formats;
use lmjf_core::metrics;
use lmjf_core::pipeline::{self, PipelineConfig};
use lmjf_core::plot::report_svg;
use lmjf_core::synth::{generate, ScenarioSpec, PRESETS};
use lmjf_core::vae::encode_all;

#[derive(Parser)]
#[command(name = "lmjf", version, about = "Latent-space anomaly detection for frame sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scenario.
    Gen(GenArgs),
    /// Train a model bundle on a normal sequence.
    Train(TrainArgs),
    /// Encode a dataset into a latent CSV.
    Encode(EncodeArgs),
    /// Score a sequence and write a report and plot.
    Score(ScoreArgs),
    /// Compare a report against ground-truth labels.
    Eval(EvalArgs),
    /// Print the default configuration.
    Config,
}

#[derive(Args)]
struct GenArgs {
    /// One of train, stop, avoid (alias detour), uturn.
    #[arg(long)]
    preset: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output frame dataset.
    #[arg(long)]
    out: PathBuf,
    /// Output label CSV.
    #[arg(long)]
    labels: Option<PathBuf>,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    bundle: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Training frame dataset.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Also write the training latents as CSV.
    #[arg(long)]
    latents: Option<PathBuf>,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Frame dataset or latent CSV to score.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
    /// SVG plot; defaults to the report path with an .svg extension.
    #[arg(long)]
    plot: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    labels: PathBuf,
}

fn load_config(args: &ConfigArgs) -> Result<PipelineConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            PipelineConfig::from_toml(&text).with_context(|| format!("loading {}", path.display()))?
        }
        None => PipelineConfig::default(),
    };
    if let Some(b) = &args.bundle {
        cfg.bundle = Some(b.clone());
    }
    Ok(cfg)
}

fn required<'a>(value: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    match value {
        Some(p) => Ok(p),
        None => bail!("no {what} given (use --{what} or set it in the config)"),
    }
}

fn gen(args: GenArgs) -> Result<()> {
    let spec = ScenarioSpec::preset(&args.preset, args.seed)
        .with_context(|| format!("presets are {}", PRESETS.join(", ")))?;
    let scenario = generate(&spec)?;
    formats::write_frames(&args.out, &scenario.frames)?;
    if let Some(path) = &args.labels {
        formats::write_labels(path, &scenario.labels)?;
    }
    let abnormal = scenario.labels.iter().filter(|&&l| l).count();
    println!(
        "wrote {} frames ({} abnormal) to {}",
        scenario.frames.len(),
        abnormal,
        args.out.display()
    );
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    if let Some(d) = args.dataset {
        cfg.dataset = Some(d);
    }
    let dataset = required(&cfg.dataset, "dataset")?;
    let bundle_dir = required(&cfg.bundle, "bundle")?;
    let frames = formats::read_frames(dataset)?;
    let start = Instant::now();
    let trained = pipeline::train_pipeline(&frames, &cfg)?;
    let s = &trained.summary;
    println!("vae: {} frames, final loss {:.3}", s.frames, s.vae_final_loss);
    println!("clusters: sizes {:?}", s.cluster_sizes);
    if s.fallback_clusters.is_empty() {
        println!("dynamics: all clusters trained");
    } else {
        println!("dynamics: constant-velocity fallback for clusters {:?}", s.fallback_clusters);
    }
    println!(
        "calibration: tau {:.6}, threshold {:.6}, training frames flagged {:.2}%",
        s.tau,
        s.threshold,
        100.0 * s.train_flagged_fraction
    );
    formats::save_bundle(bundle_dir, &trained.bundle)?;
    if let Some(path) = &args.latents {
        formats::write_latents(path, &trained.latents)?;
    }
    println!("bundle written to {} in {:.1}s", bundle_dir.display(), start.elapsed().as_secs_f64());
    Ok(())
}

fn encode(args: EncodeArgs) -> Result<()> {
    let bundle = formats::load_bundle(&args.bundle)?;
    let frames = formats::read_frames(&args.dataset)?;
    let latents = encode_all(&bundle.vae, &frames)?;
    formats::write_latents(&args.out, &latents)?;
    println!("wrote {} latent frames to {}", latents.len(), args.out.display());
    Ok(())
}

fn score(args: ScoreArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    if let Some(d) = args.dataset {
        cfg.dataset = Some(d);
    }
    if let Some(r) = args.report {
        cfg.report = Some(r);
    }
    let bundle_dir = required(&cfg.bundle, "bundle")?;
    let dataset = required(&cfg.dataset, "dataset")?;
    let report_path = required(&cfg.report, "report")?;
    let bundle = formats::load_bundle(bundle_dir)?;
    let report = if formats::is_frame_dataset(dataset) {
        pipeline::score_frames(&bundle, &formats::read_frames(dataset)?)?
    } else {
        pipeline::score_latents(&bundle, &formats::read_latents(dataset)?)?
    };
    formats::write_report(report_path, &report)?;
    let plot = args.plot.unwrap_or_else(|| report_path.with_extension("svg"));
    let title = dataset.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    std::fs::write(&plot, report_svg(&report, &title)).with_context(|| format!("writing {}", plot.display()))?;
    let flagged = report.flags.iter().filter(|&&f| f).count();
    println!(
        "scored {} frames: {} flagged ({:.1}%), threshold {:.6}",
        report.len(),
        flagged,
        100.0 * report.flagged_fraction(),
        report.threshold
    );
    if !report.weight_resets.is_empty() {
        println!("resampling weights reset at frames {:?}", report.weight_resets);
    }
    println!("report {}, plot {}", report_path.display(), plot.display());
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let table = formats::read_report(&args.report)?;
    let labels = formats::read_labels(&args.labels)?;
    let aligned = table
        .frames
        .iter()
        .map(|&k| labels.get(k).copied())
        .collect::<Option<Vec<bool>>>()
        .with_context(|| format!("report frames exceed the {} labels", labels.len()))?;
    let m = metrics::evaluate(&table.y, &table.flags, &aligned)?;
    println!("frames {}", aligned.len());
    println!("precision {:.4}", m.precision);
    println!("recall {:.4}", m.recall);
    println!("auc {:.4}", m.auc);
    println!("normal_flagged {:.4}", m.false_positive_rate);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train(a),
        Command::Encode(a) => encode(a),
        Command::Score(a) => score(a),
        Command::Eval(a) => eval(a),
        Command::Config => {
            print!("{}", PipelineConfig::default().to_toml());
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
