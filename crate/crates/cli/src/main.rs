//! Command-line driver tying the library together: train a model from a
//! config file, attack or evaluate a checkpoint, run the exact verification
//! suite for the alignment and generalization guarantees, sweep the
//! natural/robust trade-off, and export adversarial examples or feature
//! embeddings.
//!
//! Exit status: 0 on success, 1 on usage errors (bad flags or config), 2 on
//! runtime failures, 3 when `verify-theory` finds a violated property.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use advtrain_core::attacks::evaluate_robust_accuracy;
use advtrain_core::config::{attack_to_string, parse_config, ExperimentConfig};
use advtrain_core::datasets::{load_dataset_with, DatasetSplit};
use advtrain_core::eval::{
    build_alignment_sample, class_count_table, export_embeddings, natural_accuracy, pareto_csv,
    pareto_sweep, silhouette_alignment,
};
use advtrain_core::nets::{one_hot, ModelBundle};
use advtrain_core::theory::suite::{run_verification, SuiteConfig};
use advtrain_core::trainer::{fit, load_checkpoint, seeded_stream, EVAL_STREAM_SALT};
use advtrain_core::uae::{generate_uae, sample_noise};

#[derive(Parser)]
#[command(
    name = "advtrain",
    version,
    about = "Semi-supervised adversarial training with a learned generative attacker",
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the four-network training loop from a config file.
    Train(RunArgs),
    /// Measure a checkpoint's robust accuracy under the attack battery.
    Attack(CheckpointArgs),
    /// Natural accuracy, alignment silhouette, and class counts for a checkpoint.
    Eval(EvalArgs),
    /// Brute-force checks of the alignment and generalization guarantees.
    VerifyTheory(VerifyArgs),
    /// Train once per robustness weight and tabulate natural/robust accuracy.
    Sweep(SweepArgs),
    /// Generate adversarial examples from a checkpoint and write them as CSV.
    ExportUaes(ExportUaesArgs),
    /// Write the alignment sample's penultimate features as CSV.
    ExportEmbeddings(EvalArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config file; all defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CheckpointArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Trained checkpoint (`best.json` or `last.json` from a train run).
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    ck: CheckpointArgs,
    /// Real and generated examples drawn per class for alignment metrics.
    #[arg(long, default_value_t = 25)]
    per_class: usize,
}

#[derive(Args)]
struct VerifyArgs {
    /// Seed for the randomized verification instances.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Comma-separated robustness weights to sweep.
    #[arg(long, value_delimiter = ',', default_value = "0,3,6")]
    betas: Vec<f64>,
}

#[derive(Args)]
struct ExportUaesArgs {
    #[command(flatten)]
    ck: CheckpointArgs,
    /// Adversarial examples to generate per class.
    #[arg(long, default_value_t = 10)]
    per_class: usize,
}

enum Outcome {
    Success,
    PropertyFailure,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

fn rt(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let requested = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = e.print();
            return if requested {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            };
        }
    };
    match dispatch(cli.command) {
        Ok(Outcome::Success) => ExitCode::SUCCESS,
        Ok(Outcome::PropertyFailure) => ExitCode::from(3),
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(command: Command) -> Result<Outcome, CliError> {
    match command {
        Command::Train(args) => cmd_train(args),
        Command::Attack(args) => cmd_attack(args),
        Command::Eval(args) => cmd_eval(args),
        Command::VerifyTheory(args) => cmd_verify(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::ExportUaes(args) => cmd_export_uaes(args),
        Command::ExportEmbeddings(args) => cmd_export_embeddings(args),
    }
}

fn load_experiment(run: &RunArgs) -> Result<ExperimentConfig, CliError> {
    let cfg = match &run.config {
        Some(path) => parse_config(path).map_err(|e| CliError::Usage(e.to_string()))?,
        None => ExperimentConfig::default(),
    };
    Ok(cfg.with_overrides(run.seed, run.out.clone()))
}

fn load_data(cfg: &ExperimentConfig) -> Result<DatasetSplit, CliError> {
    load_dataset_with(&cfg.dataset_name, &cfg.resolved_root(), &cfg.dataset).map_err(rt)
}

fn load_models(path: &Path) -> Result<ModelBundle, CliError> {
    Ok(load_checkpoint(path).map_err(rt)?.models)
}

/// Creates the output directory (when configured) and drops the
/// reproducibility manifest into it.
fn prepare_output(cfg: &ExperimentConfig) -> Result<(), CliError> {
    if let Some(dir) = &cfg.output_dir {
        std::fs::create_dir_all(dir).map_err(rt)?;
        std::fs::write(dir.join("manifest.txt"), cfg.manifest()).map_err(rt)?;
    }
    Ok(())
}

fn write_artifact(cfg: &ExperimentConfig, name: &str, text: &str) -> Result<(), CliError> {
    if let Some(dir) = &cfg.output_dir {
        std::fs::write(dir.join(name), text).map_err(rt)?;
        println!("wrote {}", dir.join(name).display());
    }
    Ok(())
}

/// Robust accuracy of `models` under every attack in the config's battery,
/// each with its own deterministic evaluation stream.
fn battery_table(
    cfg: &ExperimentConfig,
    models: &ModelBundle,
    data: &DatasetSplit,
) -> Result<Vec<(String, f64)>, CliError> {
    let mut rows = Vec::with_capacity(cfg.attack_battery.len());
    for (i, spec) in cfg.attack_battery.iter().enumerate() {
        let mut rng = seeded_stream(cfg.seed, EVAL_STREAM_SALT ^ (i as u64 + 1));
        let acc = evaluate_robust_accuracy(models, spec, &data.test_x, &data.test_y, &mut rng)
            .map_err(rt)?;
        rows.push((attack_to_string(spec), acc));
    }
    Ok(rows)
}

fn battery_csv(rows: &[(String, f64)]) -> String {
    let mut out = String::from("attack,robust_acc\n");
    for (name, acc) in rows {
        out.push_str(&format!("{name},{acc}\n"));
    }
    out
}

fn cmd_train(args: RunArgs) -> Result<Outcome, CliError> {
    let cfg = load_experiment(&args)?;
    let data = load_data(&cfg)?;
    prepare_output(&cfg)?;
    let outcome = fit(&cfg.train, &data).map_err(rt)?;
    for (i, nat) in outcome.report.pretrain_nat.iter().enumerate() {
        println!("pretrain epoch {i}: natural loss {nat:.6}");
    }
    for rec in &outcome.report.epochs {
        println!(
            "epoch {}: total {:.6}  val_nat {:.4}  val_rob {:.4}  lr {:.5}",
            rec.epoch, rec.terms.total, rec.val_nat_acc, rec.val_rob_acc, rec.lr
        );
    }
    match outcome.report.best_epoch {
        Some(e) => println!(
            "best epoch {e}, validation metric {:.4}, {:.1}s",
            outcome.report.best_metric, outcome.report.wall_seconds
        ),
        None => println!(
            "no validation epochs ran ({:.1}s)",
            outcome.report.wall_seconds
        ),
    }
    let rows = battery_table(&cfg, &outcome.models, &data)?;
    for (name, acc) in &rows {
        println!("robust accuracy [{name}] = {acc:.4}");
    }
    write_artifact(&cfg, "robustness.csv", &battery_csv(&rows))?;
    Ok(Outcome::Success)
}

fn cmd_attack(args: CheckpointArgs) -> Result<Outcome, CliError> {
    let cfg = load_experiment(&args.run)?;
    let data = load_data(&cfg)?;
    let models = load_models(&args.checkpoint)?;
    prepare_output(&cfg)?;
    let rows = battery_table(&cfg, &models, &data)?;
    print!("{}", battery_csv(&rows));
    write_artifact(&cfg, "robustness.csv", &battery_csv(&rows))?;
    Ok(Outcome::Success)
}

fn cmd_eval(args: EvalArgs) -> Result<Outcome, CliError> {
    let cfg = load_experiment(&args.ck.run)?;
    let data = load_data(&cfg)?;
    let models = load_models(&args.ck.checkpoint)?;
    prepare_output(&cfg)?;
    let nat = natural_accuracy(&models.c, &data.test_x, &data.test_y).map_err(rt)?;
    let mut rng = seeded_stream(cfg.seed, EVAL_STREAM_SALT);
    let rob = evaluate_robust_accuracy(
        &models,
        &cfg.train.eval_attack,
        &data.test_x,
        &data.test_y,
        &mut rng,
    )
    .map_err(rt)?;
    let mut rng = seeded_stream(cfg.seed, EVAL_STREAM_SALT ^ 0xa119);
    let sample = build_alignment_sample(&models, &data, args.per_class, &mut rng).map_err(rt)?;
    let silhouette = silhouette_alignment(&sample).map_err(rt)?;
    let table = class_count_table(&sample, &models.c);
    println!("natural_acc = {nat:.4}");
    println!(
        "robust_acc [{}] = {rob:.4}",
        attack_to_string(&cfg.train.eval_attack)
    );
    println!("alignment_silhouette = {silhouette:.4}");
    print!("{}", table.csv());
    let summary = format!(
        "natural_acc,robust_acc,alignment_silhouette\n{nat},{rob},{silhouette}\n"
    );
    write_artifact(&cfg, "eval.csv", &summary)?;
    write_artifact(&cfg, "class_counts.csv", &table.csv())?;
    Ok(Outcome::Success)
}

fn cmd_verify(args: VerifyArgs) -> Result<Outcome, CliError> {
    let report = run_verification(&SuiteConfig::default(), args.seed);
    for c in &report.checks {
        println!(
            "{:<28} {}  ({} instances, {} failures, worst slack {:.3e})",
            c.name,
            if c.pass { "PASS" } else { "FAIL" },
            c.instances,
            c.failures,
            c.worst_slack
        );
    }
    if report.all_passed() {
        println!("all properties hold");
        Ok(Outcome::Success)
    } else {
        println!("property violations found");
        Ok(Outcome::PropertyFailure)
    }
}

fn cmd_sweep(args: SweepArgs) -> Result<Outcome, CliError> {
    if args.betas.is_empty() {
        return Err(CliError::Usage("--betas needs at least one value".into()));
    }
    if let Some(bad) = args.betas.iter().find(|b| !b.is_finite() || **b < 0.0) {
        return Err(CliError::Usage(format!(
            "--betas values must be finite and ≥ 0, got {bad}"
        )));
    }
    let cfg = load_experiment(&args.run)?;
    let data = load_data(&cfg)?;
    prepare_output(&cfg)?;
    let rows = pareto_sweep(&cfg.train, &args.betas, &cfg.attack_battery, &data).map_err(rt)?;
    let labels: Vec<String> = cfg
        .attack_battery
        .iter()
        .map(|s| attack_to_string(s).replace(' ', "_").replace('=', "-"))
        .collect();
    let csv = pareto_csv(&rows, &labels);
    print!("{csv}");
    write_artifact(&cfg, "pareto.csv", &csv)?;
    Ok(Outcome::Success)
}

fn cmd_export_uaes(args: ExportUaesArgs) -> Result<Outcome, CliError> {
    let cfg = load_experiment(&args.ck.run)?;
    let models = load_models(&args.ck.checkpoint)?;
    prepare_output(&cfg)?;
    let k = models.num_classes;
    let mut rng = seeded_stream(cfg.seed, EVAL_STREAM_SALT ^ 0x0ae5);
    let dim = models.g.decode(
        &sample_noise(1, models.g.noise_dim, &mut rng),
        &one_hot(&[0], k),
    );
    let mut out = String::from("class,kind,predicted");
    for j in 0..dim.ncols() {
        out.push_str(&format!(",x{j}"));
    }
    out.push('\n');
    let mut rng = seeded_stream(cfg.seed, EVAL_STREAM_SALT ^ 0x0ae5);
    for y in 0..k {
        let z = sample_noise(args.per_class, models.g.noise_dim, &mut rng);
        let y_hot = one_hot(&vec![y; args.per_class], k);
        let batch = generate_uae(&models.g, &models.a, &z, &y_hot).map_err(rt)?;
        for (kind, x) in [("natural", &batch.x_g), ("attacked", &batch.x_tilde)] {
            let preds = models.c.predict(x);
            for r in 0..x.nrows() {
                out.push_str(&format!("{y},{kind},{}", preds[r]));
                for j in 0..x.ncols() {
                    out.push_str(&format!(",{}", x[[r, j]]));
                }
                out.push('\n');
            }
        }
    }
    match &cfg.output_dir {
        Some(_) => write_artifact(&cfg, "uaes.csv", &out)?,
        None => print!("{out}"),
    }
    Ok(Outcome::Success)
}

fn cmd_export_embeddings(args: EvalArgs) -> Result<Outcome, CliError> {
    let cfg = load_experiment(&args.ck.run)?;
    let data = load_data(&cfg)?;
    let models = load_models(&args.ck.checkpoint)?;
    prepare_output(&cfg)?;
    let mut rng = seeded_stream(cfg.seed, EVAL_STREAM_SALT ^ 0xe3bd);
    let sample = build_alignment_sample(&models, &data, args.per_class, &mut rng).map_err(rt)?;
    let path = match &cfg.output_dir {
        Some(dir) => dir.join("embeddings.csv"),
        None => PathBuf::from("embeddings.csv"),
    };
    export_embeddings(&sample, &path).map_err(rt)?;
    println!("wrote {}", path.display());
    Ok(Outcome::Success)
}
