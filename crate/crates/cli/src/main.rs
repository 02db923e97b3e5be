//! Command-line harness around the multidefer library: generate synthetic
//! data and experts, train, predict, evaluate, sweep, and run the two canned
//! benchmark pipelines. Errors exit nonzero with a single `error: ...` line
//! on stderr.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use multidefer::data::{
    load_dataset, load_expert_predictions, save_dataset, save_expert_predictions, DatasetFormat,
};
use multidefer::experiment::{
    repro_grouped_bench, repro_three_cluster, run_experiment, run_sweep, RunConfig, SweepConfig,
};
use multidefer::inference::{
    batch_predict, batch_predict_sparse, read_predictions_csv, write_predictions_csv,
};
use multidefer::metrics::{compute_metrics, expert_accuracies, EvalInputs};
use multidefer::models::{load_classifier, load_deferrer};
use multidefer::synthetic::{
    gen_biased_experts, gen_grouped_feature_dataset, gen_three_cluster_dataset, mask_predictions,
    simulate_expert_predictions, SyntheticMeta,
};

#[derive(Parser)]
#[command(
    name = "multidefer",
    version,
    about = "Joint classifier + deferrer learning with multiple experts"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (CSV + sidecar metadata).
    GenData(GenDataArgs),
    /// Generate synthetic experts for an existing dataset and simulate their
    /// predictions.
    GenExperts(GenExpertsArgs),
    /// Train per a run config file and write reports, predictions, and
    /// checkpoints.
    Train(TrainArgs),
    /// Predict with saved model checkpoints.
    Predict(PredictArgs),
    /// Evaluate a predictions file against a dataset.
    Evaluate(EvaluateArgs),
    /// Run a parameter sweep from a sweep config file.
    Sweep(SweepArgs),
    /// Reproduce the three-cluster benchmark pipeline.
    ReproSec31(ReproSec31Args),
    /// Reproduce the grouped biased-experts benchmark table.
    ReproSec32(ReproSec32Args),
}

#[derive(Args)]
struct GenDataArgs {
    /// Generator: `three-cluster` or `grouped`.
    #[arg(long)]
    generator: String,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
    /// Sample count (grouped generator).
    #[arg(long, default_value_t = 2000)]
    n: usize,
    /// Feature dimension (grouped generator).
    #[arg(long, default_value_t = 10)]
    dim: usize,
    /// Protected-group rate (grouped generator).
    #[arg(long, default_value_t = 0.36)]
    group_fraction: f64,
    /// Distance between the class means (grouped generator).
    #[arg(long, default_value_t = 2.0)]
    class_sep: f64,
}

#[derive(Args)]
struct GenExpertsArgs {
    /// Directory holding dataset.csv (and meta.toml for cluster experts).
    #[arg(long)]
    data_dir: PathBuf,
    /// Expert population: `from-meta` (cluster experts recorded by gen-data)
    /// or `biased` (group-dependent accuracies).
    #[arg(long, default_value = "biased")]
    kind: String,
    /// Total experts including the identity expert (biased population).
    #[arg(long, default_value_t = 20)]
    m: usize,
    /// Observed fraction of samples per expert (1.0 = fully observed).
    #[arg(long)]
    coverage: Option<f64>,
    #[arg(long)]
    seed: u64,
    /// Output CSV path (defaults to experts.csv in the data directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Run config TOML.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    classifier: PathBuf,
    #[arg(long)]
    deferrer: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Long-format expert predictions CSV.
    #[arg(long)]
    experts: PathBuf,
    #[arg(long)]
    num_experts: usize,
    /// Sparse committee size; omit for the full weighted aggregate.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Expert predictions CSV for per-expert accuracy reporting.
    #[arg(long)]
    experts: Option<PathBuf>,
    #[arg(long)]
    num_experts: Option<usize>,
    /// Output report TOML (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Sweep config TOML.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ReproSec31Args {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ReproSec32Args {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 5)]
    repetitions: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(args) => gen_data(args),
        Command::GenExperts(args) => gen_experts(args),
        Command::Train(args) => train(args),
        Command::Predict(args) => predict(args),
        Command::Evaluate(args) => evaluate(args),
        Command::Sweep(args) => sweep(args),
        Command::ReproSec31(args) => {
            let report = repro_three_cluster(args.seed, Some(&args.out_dir))?;
            println!(
                "three-cluster seed {}: joint accuracy {:.4}, sparse k=1 {:.4}, classifier-only {:.4}, ll {:.4}, crowdselect {:.4}",
                args.seed,
                report.joint_accuracy,
                report.sparse_k1_accuracy,
                report.classifier_only_accuracy,
                report.ll_accuracy,
                report.crowdselect_accuracy
            );
            Ok(())
        }
        Command::ReproSec32(args) => {
            let report = repro_grouped_bench(args.seed, args.repetitions, Some(&args.out_dir))?;
            for row in &report.rows {
                println!(
                    "{:<24} overall {:.3} ({:.3})  group0 {:.3} ({:.3})  group1 {:.3} ({:.3})",
                    row.method,
                    row.overall_mean,
                    row.overall_stderr,
                    row.group0_mean,
                    row.group0_stderr,
                    row.group1_mean,
                    row.group1_stderr
                );
            }
            Ok(())
        }
    }
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    std::fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;
    let (dataset, meta) = match args.generator.as_str() {
        "three-cluster" => {
            let (dataset, meta) = gen_three_cluster_dataset(args.seed);
            (dataset, meta)
        }
        "grouped" => {
            let dataset = gen_grouped_feature_dataset(
                args.n,
                args.dim,
                args.group_fraction,
                args.class_sep,
                args.seed,
            )?;
            let meta = SyntheticMeta {
                generator: "grouped".into(),
                seed: args.seed,
                clusters: None,
                experts: Vec::new(),
            };
            (dataset, meta)
        }
        other => bail!("unknown generator `{other}` (expected `three-cluster` or `grouped`)"),
    };
    save_dataset(&dataset, args.out_dir.join("dataset.csv"))?;
    meta.save(args.out_dir.join("meta.toml"))?;
    println!(
        "wrote {} samples to {}",
        dataset.n_samples(),
        args.out_dir.join("dataset.csv").display()
    );
    Ok(())
}

fn gen_experts(args: GenExpertsArgs) -> Result<()> {
    let dataset = load_dataset(args.data_dir.join("dataset.csv"), &DatasetFormat::default())?;
    let meta_path = args.data_dir.join("meta.toml");
    let (specs, clusters) = match args.kind.as_str() {
        "from-meta" => {
            let meta = SyntheticMeta::load(&meta_path)
                .with_context(|| format!("loading {}", meta_path.display()))?;
            (meta.experts.clone(), meta.clusters)
        }
        "biased" => (gen_biased_experts(args.m, args.seed)?, None),
        other => bail!("unknown expert kind `{other}` (expected `from-meta` or `biased`)"),
    };
    let mut predictions =
        simulate_expert_predictions(&specs, &dataset, clusters.as_deref(), args.seed)?;
    if let Some(coverage) = args.coverage {
        predictions = mask_predictions(&predictions, coverage, args.seed ^ 0x6d61736b)?;
    }
    let out = args
        .out
        .unwrap_or_else(|| args.data_dir.join("experts.csv"));
    save_expert_predictions(&predictions, &out)?;
    let specs_out = out.with_extension("specs.toml");
    SyntheticMeta {
        generator: args.kind,
        seed: args.seed,
        clusters: None,
        experts: specs,
    }
    .save(&specs_out)?;
    println!(
        "wrote {} predictions from {} experts to {}",
        predictions.observed_count(),
        predictions.num_experts(),
        out.display()
    );
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    let output = run_experiment(&cfg, Some(&args.out_dir))?;
    println!(
        "{}: overall accuracy {:.4} ({:.4}) over {} repetition(s)",
        output.aggregate.method,
        output.aggregate.overall_mean,
        output.aggregate.overall_stderr,
        output.aggregate.repetitions
    );
    Ok(())
}

fn predict(args: PredictArgs) -> Result<()> {
    let classifier = load_classifier(&args.classifier)?;
    let deferrer = load_deferrer(&args.deferrer)?;
    let dataset = load_dataset(&args.dataset, &DatasetFormat::default())?;
    let (experts, _) =
        load_expert_predictions(&args.experts, dataset.n_samples(), args.num_experts)?;
    experts.validate_labels(dataset.num_classes())?;
    let indices: Vec<usize> = (0..dataset.n_samples()).collect();
    let rows = match args.k {
        Some(k) => batch_predict_sparse(
            &classifier,
            &deferrer,
            &dataset,
            &experts,
            &indices,
            k,
            args.seed,
        )?,
        None => batch_predict(&classifier, &deferrer, &dataset, &experts, &indices)?,
    };
    write_predictions_csv(&rows, &args.out)?;
    println!("wrote {} predictions to {}", rows.len(), args.out.display());
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    let dataset = load_dataset(&args.dataset, &DatasetFormat::default())?;
    let rows = read_predictions_csv(&args.predictions)?;
    let predictions: Vec<usize> = rows.iter().map(|r| r.label).collect();
    let labels: Vec<usize> = rows.iter().map(|r| dataset.label(r.sample_id)).collect();
    let groups: Vec<usize> = rows.iter().map(|r| dataset.group(r.sample_id)).collect();
    let committees: Option<Vec<Vec<usize>>> = if rows.iter().all(|r| r.committee.is_some()) {
        Some(rows.iter().map(|r| r.committee.clone().unwrap()).collect())
    } else {
        None
    };
    let (expert_accuracy, num_workers) = match (&args.experts, args.num_experts) {
        (Some(path), Some(num_experts)) => {
            let (experts, _) = load_expert_predictions(path, dataset.n_samples(), num_experts)?;
            let ids: Vec<usize> = rows.iter().map(|r| r.sample_id).collect();
            (expert_accuracies(&experts, &dataset, &ids), num_experts + 1)
        }
        _ => {
            let max_member = committees
                .iter()
                .flatten()
                .flatten()
                .copied()
                .max()
                .map_or(0, |m| m + 1);
            (Vec::new(), max_member.max(1))
        }
    };
    let report = compute_metrics(&EvalInputs {
        predictions: &predictions,
        labels: &labels,
        groups: &groups,
        num_groups: dataset.num_groups(),
        num_workers,
        committees: committees.as_deref(),
        deferrer_weights: None,
        group_loss: Vec::new(),
        expert_accuracy,
    })?;
    let text = multidefer::experiment::report_to_toml(&report)?;
    match args.out {
        Some(path) => {
            std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
            println!("wrote report to {}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn sweep(args: SweepArgs) -> Result<()> {
    let mut cfg = SweepConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.base.train.seed = seed;
    }
    let output = run_sweep(&cfg, Some(&args.out_dir))?;
    let failed = output.cells.iter().filter(|c| c.report.is_err()).count();
    println!(
        "swept {} cells ({} failed); results in {}",
        output.cells.len(),
        failed,
        args.out_dir.display()
    );
    Ok(())
}
