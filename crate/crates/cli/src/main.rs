//! `mcvi`: generate synthetic data, fit, sweep, reconstruct and evaluate
//! multi-channel latent variable models.
//!
//! Exit status: 0 on success, 1 for usage errors, 2 for data errors and 3
//! for numerical failures.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mcvi::config::RunConfig;
use mcvi::data::{export_synthetic, load_dir, load_labels, read_json, write_json, write_labels};
use mcvi::evaluate::ReconMode;
use mcvi::pipeline::{
    prepare_data, run_evaluate, run_fit, run_reconstruct, run_sweep, threshold_labels, ModelFile,
    PreparedData,
};
use mcvi::synthetic::{generate_scenario, ScenarioSpec};
use mcvi::{Error, ErrorKind, Result};

const LABELS_FILE: &str = "labels.csv";

#[derive(Debug, Parser)]
#[command(name = "mcvi", version, about = "Multi-channel variational inference for linear Gaussian latent models")]
struct Cli {
    /// Seed for training and evaluation; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel sweep cells.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Only report warnings and errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic scenario as channel CSVs plus a ground-truth sidecar.
    Generate {
        /// Scenario JSON: channels, dim, latent_dim, samples, snr, replication.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write labels.csv by splitting this latent coordinate at its median.
        #[arg(long)]
        label_coordinate: Option<usize>,
    },
    /// Train one model; writes model.json and fit_report.json.
    Fit {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train every latent dimension and replication; writes sweep reports.
    Sweep {
        #[arg(long)]
        config: PathBuf,
    },
    /// Reconstruct every channel; writes recon_report.json and CSVs.
    Reconstruct {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "multi")]
        mode: ReconMode,
        /// Output directory; defaults to the model's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Bound, exact evidence and optional LDA accuracy; writes evaluation.json.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Two-column `id,class` CSV.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Output directory; defaults to the model's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Usage => 1,
        ErrorKind::Data => 2,
        ErrorKind::Numerical => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::new()
        .filter_level(if cli.quiet {
            log::LevelFilter::Warn
        } else {
            log::LevelFilter::Info
        })
        .parse_default_env()
        .init();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn output_dir(out: &Option<PathBuf>, model: &Path) -> PathBuf {
    out.clone().unwrap_or_else(|| {
        model
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."))
    })
}

fn load_model(path: &Path, seed: Option<u64>) -> Result<ModelFile> {
    let mut file = ModelFile::load(path)?;
    if let Some(s) = seed {
        file.config.train.seed = s;
    }
    Ok(file)
}

fn load_data(file: &ModelFile, dir: &Path) -> Result<PreparedData> {
    let (raw, truth) = load_dir(dir)?;
    file.check_data(&raw)?;
    PreparedData::with_record(raw, truth, file.standardization.as_deref())
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Generate {
            spec,
            out,
            label_coordinate,
        } => {
            let spec: ScenarioSpec = read_json(spec).map_err(|e| Error::Config(e.to_string()))?;
            spec.validate()?;
            if cli.seed.is_some() {
                log::warn!("--seed does not apply to generate; the scenario fixes its own draw");
            }
            let ds = generate_scenario(&spec)?;
            let table = export_synthetic(&ds, out)?;
            write_json(&out.join("scenario.json"), &spec)?;
            if let Some(k) = label_coordinate {
                let truth = mcvi::data::GroundTruth {
                    spec: spec.clone(),
                    ids: table.ids.clone(),
                    latent: ds.latent.clone(),
                    maps: ds.maps.clone(),
                    noise_scale: ds.noise_scale,
                };
                write_labels(&out.join(LABELS_FILE), &table.ids, &threshold_labels(&truth, *k)?)?;
            }
            log::info!(
                "wrote {} channels x {} samples to {}",
                spec.channels,
                spec.samples,
                out.display()
            );
        }
        Command::Fit { config } => {
            let cfg = load_config(config, cli.seed)?;
            let data = prepare_data(&cfg)?;
            let (_, report) = run_fit(&cfg, &data)?;
            log::info!(
                "final NLB {:.6} +/- {:.6} after {} epochs ({:.1}s)",
                report.final_nlb,
                report.final_nlb_stderr,
                report.epochs,
                report.wall_time_secs
            );
        }
        Command::Sweep { config } => {
            let cfg = load_config(config, cli.seed)?;
            let data = prepare_data(&cfg)?;
            let labels = match &cfg.evaluation.labels {
                Some(p) => Some(load_labels(p, &data.dataset.ids)?),
                None => None,
            };
            let report = run_sweep(&cfg, &data, labels.as_deref())?;
            for s in &report.summaries {
                log::info!("l={} NLB {:.6} +/- {:.6}", s.latent_dim, s.nlb_mean, s.nlb_stderr);
            }
            if let Some(e) = report.elbow {
                log::info!("elbow at l={e}");
            }
            let failed = report.cells.iter().filter(|c| c.error.is_some()).count();
            if failed == report.cells.len() {
                return Err(Error::NonFinite(format!(
                    "all {failed} sweep cells failed; see the cell errors in the report"
                )));
            }
        }
        Command::Reconstruct {
            model,
            data,
            mode,
            out,
        } => {
            let file = load_model(model, cli.seed)?;
            let prepared = load_data(&file, data)?;
            let artifact = run_reconstruct(&file, &prepared, *mode, &output_dir(out, model))?;
            print_json(&artifact.observed)?;
        }
        Command::Evaluate {
            model,
            data,
            labels,
            out,
        } => {
            let file = load_model(model, cli.seed)?;
            let prepared = load_data(&file, data)?;
            let labels = match labels {
                Some(p) => Some(load_labels(p, &prepared.dataset.ids)?),
                None => None,
            };
            let report = run_evaluate(&file, &prepared, labels.as_deref(), &output_dir(out, model))?;
            print_json(&report)?;
        }
    }
    Ok(())
}
