//! `fplab` — train, evaluate and compare small failure-prediction models.
//!
//! Exit codes: 0 success, 1 validation error, 2 training divergence,
//! 3 I/O error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fplab::ablation::{run_cells, ComponentToggles};
use fplab::config::ExperimentConfig;
use fplab::error::{Error, Result};
use fplab::metrics::{compute_report, read_prediction_dump, MetricReport};
use fplab::model::Model;
use fplab::report::{
    emit_report, read_manifest_json, write_diagnostic_manifest, write_metrics_csv,
};
use fplab::train::{evaluate_records, run_eval, run_training, SplitReport};

#[derive(Parser)]
#[command(name = "fplab", version, about = "Desk-scale failure-prediction laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model, evaluate it, and write run artifacts.
    Train(TrainArgs),
    /// Evaluate a saved checkpoint — or score an existing prediction dump.
    Eval(EvalArgs),
    /// Run a component-toggle ablation grid over several seeds.
    Ablate(AblateArgs),
    /// Re-emit report artifacts from a finished run directory.
    Report(ReportArgs),
    /// Compute metrics from a `confidence,predicted,true_label` dump.
    Metrics(MetricsArgs),
}

/// Every config-file key doubles as a flag of the same name; flags win over
/// the file, the file wins over the built-in desk preset.
#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// Flat `key = value` config file applied before any per-key flag.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,

    #[arg(long = "dataset", hide_short_help = true)]
    dataset: Option<String>,
    #[arg(long = "data_path", hide_short_help = true)]
    data_path: Option<String>,
    #[arg(long = "num_classes", hide_short_help = true)]
    num_classes: Option<String>,
    #[arg(long = "samples_per_class", hide_short_help = true)]
    samples_per_class: Option<String>,
    #[arg(long = "test_per_class", hide_short_help = true)]
    test_per_class: Option<String>,
    #[arg(long = "input_dim", hide_short_help = true)]
    input_dim: Option<String>,
    #[arg(long = "sigma_gap", hide_short_help = true)]
    sigma_gap: Option<String>,
    #[arg(long = "moons_noise", hide_short_help = true)]
    moons_noise: Option<String>,
    #[arg(long = "long_tail_if", hide_short_help = true)]
    long_tail_if: Option<String>,
    #[arg(long = "noise_rate", hide_short_help = true)]
    noise_rate: Option<String>,
    #[arg(long = "corruption_eval", hide_short_help = true)]
    corruption_eval: Option<String>,
    #[arg(long = "hidden", hide_short_help = true)]
    hidden: Option<String>,
    #[arg(long = "head", hide_short_help = true)]
    head: Option<String>,
    #[arg(long = "temperature", hide_short_help = true)]
    temperature: Option<String>,
    #[arg(long = "lambda_mix", hide_short_help = true)]
    lambda_mix: Option<String>,
    #[arg(long = "lambda_crl", hide_short_help = true)]
    lambda_crl: Option<String>,
    #[arg(long = "beta", hide_short_help = true)]
    beta: Option<String>,
    #[arg(long = "rho", hide_short_help = true)]
    rho: Option<String>,
    #[arg(long = "lr", hide_short_help = true)]
    lr: Option<String>,
    #[arg(long = "lr_min", hide_short_help = true)]
    lr_min: Option<String>,
    #[arg(long = "momentum", hide_short_help = true)]
    momentum: Option<String>,
    #[arg(long = "weight_decay", hide_short_help = true)]
    weight_decay: Option<String>,
    #[arg(long = "batch_size", hide_short_help = true)]
    batch_size: Option<String>,
    #[arg(long = "epochs", hide_short_help = true)]
    epochs: Option<String>,
    #[arg(long = "swa", hide_short_help = true)]
    swa: Option<String>,
    #[arg(long = "swa_start", hide_short_help = true)]
    swa_start: Option<String>,
    #[arg(long = "swa_lr", hide_short_help = true)]
    swa_lr: Option<String>,
    #[arg(long = "val_fraction", hide_short_help = true)]
    val_fraction: Option<String>,
    #[arg(long = "reweight", hide_short_help = true)]
    reweight: Option<String>,
    #[arg(long = "reweight_map", hide_short_help = true)]
    reweight_map: Option<String>,
    #[arg(long = "reweight_param", hide_short_help = true)]
    reweight_param: Option<String>,
    #[arg(long = "reweight_epochs", hide_short_help = true)]
    reweight_epochs: Option<String>,
    #[arg(long = "reweight_lr", hide_short_help = true)]
    reweight_lr: Option<String>,
    #[arg(long = "out_dir", hide_short_help = true)]
    out_dir: Option<String>,
    #[arg(long = "run_id", hide_short_help = true)]
    run_id: Option<String>,
}

impl ConfigArgs {
    fn overrides(&self) -> Vec<(&'static str, &Option<String>)> {
        vec![
            ("dataset", &self.dataset),
            ("data_path", &self.data_path),
            ("num_classes", &self.num_classes),
            ("samples_per_class", &self.samples_per_class),
            ("test_per_class", &self.test_per_class),
            ("input_dim", &self.input_dim),
            ("sigma_gap", &self.sigma_gap),
            ("moons_noise", &self.moons_noise),
            ("long_tail_if", &self.long_tail_if),
            ("noise_rate", &self.noise_rate),
            ("corruption_eval", &self.corruption_eval),
            ("hidden", &self.hidden),
            ("head", &self.head),
            ("temperature", &self.temperature),
            ("lambda_mix", &self.lambda_mix),
            ("lambda_crl", &self.lambda_crl),
            ("beta", &self.beta),
            ("rho", &self.rho),
            ("lr", &self.lr),
            ("lr_min", &self.lr_min),
            ("momentum", &self.momentum),
            ("weight_decay", &self.weight_decay),
            ("batch_size", &self.batch_size),
            ("epochs", &self.epochs),
            ("swa", &self.swa),
            ("swa_start", &self.swa_start),
            ("swa_lr", &self.swa_lr),
            ("val_fraction", &self.val_fraction),
            ("reweight", &self.reweight),
            ("reweight_map", &self.reweight_map),
            ("reweight_param", &self.reweight_param),
            ("reweight_epochs", &self.reweight_epochs),
            ("reweight_lr", &self.reweight_lr),
            ("out_dir", &self.out_dir),
            ("run_id", &self.run_id),
        ]
    }

    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_file(path)?,
            None => ExperimentConfig::desk(),
        };
        for (key, value) in self.overrides() {
            if let Some(v) = value {
                cfg.apply(key, v)?;
            }
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// RNG seed; every random draw of the run derives from it.
    #[arg(long, required = true)]
    seed: u64,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint written by `train` (model.ckpt).
    #[arg(long, value_name = "FILE", conflicts_with = "dump")]
    checkpoint: Option<PathBuf>,
    /// Prediction dump; computes metrics without touching a model.
    #[arg(long, value_name = "FILE")]
    dump: Option<PathBuf>,
    /// Seed for the evaluation dataset and corruption draws.
    #[arg(long)]
    seed: Option<u64>,
    /// Write the metric rows to this CSV file.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct AblateArgs {
    /// Comma-separated seeds; each grid cell runs once per seed.
    #[arg(long, default_value = "1,2,3")]
    seeds: String,
    /// `all` (the 2⁵ grid) or comma-separated cells like
    /// `baseline,full,mixup+crl,sam`.
    #[arg(long, default_value = "all")]
    cells: String,
    /// Write the aggregated table to this CSV file.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory containing manifest.json and predictions.csv.
    #[arg(long = "run_dir", value_name = "DIR")]
    run_dir: PathBuf,
    /// Destination directory (defaults to the run directory itself).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MetricsArgs {
    /// Prediction dump: `confidence,predicted,true_label` per line.
    #[arg(long, value_name = "FILE", required = true)]
    dump: PathBuf,
    /// Row label for CSV output.
    #[arg(long = "run_id", default_value = "dump")]
    run_id: String,
    /// Write a `run_id,accuracy,aurc_x1000,auroc,fpr95` CSV here.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

fn opt_fmt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".to_string())
}

fn print_metrics(label: &str, m: &MetricReport) {
    println!(
        "{label:<28} acc {:.4}  aurc_x1000 {:>8.3}  auroc {}  fpr95 {}",
        m.accuracy,
        m.aurc_x1000(),
        opt_fmt(m.auroc),
        opt_fmt(m.fpr95),
    );
}

fn print_split_reports(reports: &std::collections::BTreeMap<String, SplitReport>) {
    for (split, r) in reports {
        print_metrics(split, &r.metrics);
    }
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut cfg = args.config.resolve()?;
    cfg.seed = Some(args.seed);
    let run_id = cfg
        .run_id
        .clone()
        .unwrap_or_else(|| format!("run-{}", args.seed));
    let run_dir = cfg.out_dir.join(&run_id);

    let outcome = match run_training(&cfg) {
        Ok(o) => o,
        Err(e) => {
            // leave a diagnostic trace for divergence, best effort
            if e.exit_code() == 2 && std::fs::create_dir_all(&run_dir).is_ok() {
                let echo: Vec<(String, String)> = ExperimentConfig::known_keys()
                    .iter()
                    .filter_map(|k| cfg.get(k).ok().map(|v| (k.to_string(), v)))
                    .collect();
                let _ = write_diagnostic_manifest(
                    echo,
                    cfg.seed,
                    &e,
                    &run_dir.join("manifest.json"),
                );
            }
            return Err(e);
        }
    };

    std::fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
    let records = evaluate_records(&outcome.selected, &outcome.data.test)?;
    let mut manifest = outcome.manifest.clone();
    outcome.selected.save(&run_dir.join("model.ckpt"))?;
    outcome.final_model.save(&run_dir.join("final.ckpt"))?;
    if let Some(stage2) = &outcome.stage2 {
        stage2.save(&run_dir.join("stage2.ckpt"))?;
    }
    if let Some(scores) = &outcome.stage2_scores {
        scores.write_csv(&run_dir.join("scores.csv"))?;
    }
    std::fs::write(run_dir.join("config.txt"), cfg.to_file_text())
        .map_err(|e| Error::io(run_dir.join("config.txt"), e))?;
    let files = emit_report(&mut manifest, &records, &run_dir)?;

    println!(
        "run {run_id}: selected epoch {} (val aurc_x1000 {:.3})",
        manifest.selection.best_epoch,
        manifest.selection.best_val_aurc * 1000.0
    );
    print_split_reports(&manifest.reports);
    if let Some(mean) = manifest.corruption_mean_aurc {
        println!("corruption mean aurc_x1000 {:.3}", mean * 1000.0);
    }
    for w in &manifest.warnings {
        eprintln!("warning: {w}");
    }
    println!("artifacts in {}", run_dir.display());
    for f in &files {
        println!("  {}", f.display());
    }
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    if let Some(dump) = &args.dump {
        let records = read_prediction_dump(dump)?;
        let report = compute_report(&records)?;
        print_metrics("dump", &report);
        if let Some(out) = &args.out {
            write_metrics_csv(&[("dump".to_string(), report)], out)?;
        }
        return Ok(());
    }
    let Some(ckpt) = &args.checkpoint else {
        return Err(Error::invalid_config(
            "eval",
            "need either --checkpoint or --dump",
        ));
    };
    let mut cfg = args.config.resolve()?;
    if let Some(seed) = args.seed {
        cfg.seed = Some(seed);
    }
    if cfg.seed.is_none() {
        cfg.seed = Some(0);
    }
    cfg.validate()?;
    let model = Model::load(ckpt)?;
    let seed = cfg.seed.unwrap();
    let data = fplab::train::prepare_data(&cfg, seed)?;
    let (reports, corrupt_mean) = run_eval(&model, &data.test, &cfg.corruption_eval, seed)?;
    print_split_reports(&reports);
    if let Some(mean) = corrupt_mean {
        println!("corruption mean aurc_x1000 {:.3}", mean * 1000.0);
    }
    if let Some(out) = &args.out {
        let stem = ckpt
            .file_stem()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_else(|| "model".to_string());
        let rows: Vec<(String, MetricReport)> = reports
            .iter()
            .map(|(split, r)| (format!("{stem}/{split}"), r.metrics))
            .collect();
        write_metrics_csv(&rows, out)?;
    }
    Ok(())
}

fn parse_cell(s: &str) -> Result<ComponentToggles> {
    match s {
        "baseline" => return Ok(ComponentToggles::ALL_OFF),
        "full" => return Ok(ComponentToggles::ALL_ON),
        _ => {}
    }
    let mut t = ComponentToggles::ALL_OFF;
    for part in s.split('+') {
        match part.trim() {
            "mixup" => t.mixup = true,
            "crl" => t.crl = true,
            "sam" => t.sam = true,
            "swa" => t.swa = true,
            "csc" | "cosine" => t.cosine = true,
            other => {
                return Err(Error::invalid_config(
                    "cells",
                    format!("unknown component '{other}'"),
                ))
            }
        }
    }
    Ok(t)
}

fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    let seeds: Vec<u64> = args
        .seeds
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<u64>()
                .map_err(|_| Error::invalid_config("seeds", format!("bad seed '{s}'")))
        })
        .collect::<Result<_>>()?;
    let cells: Vec<ComponentToggles> = if args.cells.trim() == "all" {
        (0..32).map(ComponentToggles::from_bits).collect()
    } else {
        args.cells
            .split(',')
            .map(|s| parse_cell(s.trim()))
            .collect::<Result<_>>()?
    };
    let table = run_cells(&cfg, &cells, &seeds)?;
    print!("{}", table.to_text());
    if let Some(out) = &args.out {
        table.write_csv(out)?;
        println!("table written to {}", out.display());
    }
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let manifest_path = args.run_dir.join("manifest.json");
    let mut manifest = read_manifest_json(&manifest_path)?;
    let records = read_prediction_dump(&args.run_dir.join("predictions.csv"))?;
    let dest = args.out.clone().unwrap_or_else(|| args.run_dir.clone());
    let files = emit_report(&mut manifest, &records, &dest)?;
    for f in &files {
        println!("{}", f.display());
    }
    Ok(())
}

fn cmd_metrics(args: &MetricsArgs) -> Result<()> {
    let records = read_prediction_dump(&args.dump)?;
    let report = compute_report(&records)?;
    print_metrics(&args.run_id, &report);
    if let Some(out) = &args.out {
        write_metrics_csv(&[(args.run_id.clone(), report)], out)?;
        println!("metrics written to {}", out.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version are not failures; anything else is bad usage
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Report(a) => cmd_report(a),
        Command::Metrics(a) => cmd_metrics(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

