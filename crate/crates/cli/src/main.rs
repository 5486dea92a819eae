//! Command-line front end: train, quantize, attack, defend, eval, report.
//!
//! Exit codes: 0 success, 2 invalid spec or usage, 1 runtime failure.

mod report;
mod runner;
mod spec;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use qwb_core::error::{Error, Result};
use qwb_core::model::{evaluate_accuracy, load_model, save_model, train, Split};
use qwb_core::quant::{quantize_model, save_quantized_model};

use report::read_report;
use runner::{harden, run_experiment};
use spec::{load_json_spec, AttackJobSpec, DefendSpec, ExperimentSpec, QuantizeSpec, TrainSpec};

#[derive(Parser)]
#[command(
    name = "qwb",
    version,
    about = "Train, quantize, attack, defend, and evaluate tiny image classifiers"
)]
struct Cli {
    /// JSON config file for the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output file or directory (subcommand-dependent).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Override the seed carried by the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a toy model and save it as a model container.
    Train,
    /// Post-training-quantize a saved model to int8 or int16.
    Quantize,
    /// Run one attack against one model and store the results.
    Attack,
    /// Apply a train-based defense and save the hardened model.
    Defend,
    /// Run a full experiment spec (direct / transfer / defense-eval).
    Eval,
    /// Re-emit the CSV table from a stored report.json.
    Report {
        /// Path to an existing report.json.
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

fn require_config(cli: &Cli) -> Result<&Path> {
    cli.config
        .as_deref()
        .ok_or_else(|| Error::InvalidSpec("--config is required for this subcommand".into()))
}

fn require_out(cli: &Cli) -> Result<&Path> {
    cli.out
        .as_deref()
        .ok_or_else(|| Error::InvalidSpec("--out is required for this subcommand".into()))
}

fn cmd_train(cli: &Cli) -> Result<()> {
    let mut spec: TrainSpec = load_json_spec(require_config(cli)?)?;
    if let Some(seed) = cli.seed {
        spec.train.seed = seed;
    }
    let out = require_out(cli)?;
    let train_set = spec.dataset.load(Split::Train, spec.train_count)?;
    let test_set = spec.dataset.load(Split::Test, spec.test_count)?;
    let input_shape = train_set.images[0].shape().to_vec();
    let template = match spec.arch.as_str() {
        "resnet" => qwb_core::model::build_toy_resnet_seeded(&input_shape, train_set.classes, spec.init_seed)?,
        "dscnn" => qwb_core::model::build_toy_dscnn_seeded(&input_shape, train_set.classes, spec.init_seed)?,
        other => {
            return Err(Error::InvalidSpec(format!(
                "unknown arch '{other}'; expected resnet or dscnn"
            )))
        }
    };
    let (model, trace) = train(&template, &train_set, &spec.train)?;
    let acc = evaluate_accuracy(&model, &test_set)?;
    save_model(&model, out)?;
    println!(
        "trained {} ({} params) final-loss {:.4} test-accuracy {:.4} -> {}",
        spec.arch,
        model.param_count(),
        trace.last().copied().unwrap_or(f32::NAN),
        acc,
        out.display()
    );
    Ok(())
}

fn cmd_quantize(cli: &Cli) -> Result<()> {
    let spec: QuantizeSpec = load_json_spec(require_config(cli)?)?;
    let out = require_out(cli)?;
    let model = load_model(&spec.model)?;
    let calib = spec.dataset.load(Split::Calibration, spec.calibration_count)?;
    let qm = quantize_model(&model, &calib, spec.bits)?;
    let test = spec.dataset.load(Split::Test, 128)?;
    let float_acc = evaluate_accuracy(&model, &test)?;
    let int_acc = evaluate_accuracy(&qm, &test)?;
    save_quantized_model(&qm, out)?;
    println!(
        "quantized to int{} float-accuracy {:.4} integer-accuracy {:.4} -> {}",
        spec.bits,
        float_acc,
        int_acc,
        out.display()
    );
    Ok(())
}

fn cmd_attack(cli: &Cli) -> Result<()> {
    let mut job: AttackJobSpec = load_json_spec(require_config(cli)?)?;
    if let Some(seed) = cli.seed {
        job.seed = seed;
    }
    let out = require_out(cli)?;
    // A single-attack job is the direct protocol with one cell.
    let spec = ExperimentSpec {
        protocol: spec::Protocol::Direct,
        model: job.model.clone(),
        bit_widths: vec![job.bit_width.unwrap_or(spec::BitWidth::Float32)],
        attacks: vec![job.attack.clone()],
        defense: None,
        dataset: job.dataset.clone(),
        sample_count: job.sample_count,
        calibration_count: job.calibration_count,
        train_count: 0,
        seed: job.seed,
        diagnostics: Default::default(),
        auto_calibrate: Default::default(),
        recraft_on_defense: false,
    };
    let report = run_experiment(&spec, out)?;
    let cell = &report.cells[0];
    println!(
        "{} on {}: adversarial-accuracy {:.4} (n={}) -> {}",
        cell.attack,
        cell.bit_width.label(),
        cell.adversarial_accuracy,
        cell.distortions.n_all,
        out.display()
    );
    Ok(())
}

fn cmd_defend(cli: &Cli) -> Result<()> {
    let mut spec: DefendSpec = load_json_spec(require_config(cli)?)?;
    if let Some(seed) = cli.seed {
        spec.seed = seed;
    }
    let out = require_out(cli)?;
    let baseline = load_model(&spec.model)?;
    let train_set = spec.dataset.load(Split::Train, spec.train_count)?;
    let hardened = harden(&spec.defense, &baseline, &train_set, spec.seed)?;
    save_model(&hardened, out)?;
    let test = spec.dataset.load(Split::Test, 128)?;
    let acc = evaluate_accuracy(&hardened, &test)?;
    println!(
        "hardened with {} clean-accuracy {:.4} -> {}",
        spec.defense.name(),
        acc,
        out.display()
    );
    Ok(())
}

fn cmd_eval(cli: &Cli) -> Result<()> {
    let mut spec = ExperimentSpec::from_file(require_config(cli)?)?;
    if let Some(seed) = cli.seed {
        spec.seed = seed;
    }
    let out = require_out(cli)?;
    let report = run_experiment(&spec, out)?;
    for cell in &report.cells {
        let success = cell
            .defense_success
            .map(|s| format!(" defense-success={s}"))
            .unwrap_or_default();
        println!(
            "{:<12} {:<8} acc {:.4} l2 {:.4}{}",
            cell.attack,
            cell.bit_width.label(),
            cell.adversarial_accuracy,
            cell.distortions.mean_all.l2,
            success
        );
    }
    println!("report -> {}", out.join("report.json").display());
    Ok(())
}

fn cmd_report(cli: &Cli, input: Option<&Path>) -> Result<()> {
    let path = input
        .or(cli.config.as_deref())
        .ok_or_else(|| Error::InvalidSpec("report needs --input (or --config) report.json".into()))?;
    let report = read_report(path)?;
    let out = cli.out.as_deref().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(out)?;
    let csv_path = out.join("report.csv");
    std::fs::write(&csv_path, report.to_csv())?;
    println!("{} cells -> {}", report.cells.len(), csv_path.display());
    Ok(())
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::InvalidSpec(_) | Error::InvalidArgument(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train => cmd_train(&cli),
        Command::Quantize => cmd_quantize(&cli),
        Command::Attack => cmd_attack(&cli),
        Command::Defend => cmd_defend(&cli),
        Command::Eval => cmd_eval(&cli),
        Command::Report { input } => cmd_report(&cli, input.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
