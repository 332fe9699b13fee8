//! End-to-end runs: data preparation, fitting, sweeping, reconstruction and
//! evaluation, with every artifact written under one output directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{DataSource, RunConfig};
use crate::data::{
    apply_standardization, format_f64, load_channels, load_dir, standardize, synthetic_to_dataset,
    write_channel_csv, write_json, GroundTruth, MultiChannelDataset, Standardization,
};
use crate::elbo::{elbo_batch, check_batch};
use crate::error::{Error, Result};
use crate::evaluate::{
    encode_labels, exact_log_evidence, latent_features, lda_split_half, posterior_gap_between,
    recon_report, reconstruct, sweep_latent_dims, LatentFeatures, LdaResult, LdaSpec,
    LinearGaussian, ReconMode, ReconReport, ReconTarget, SweepReport,
};
use crate::linalg::{derive_seed, Matrix, SeededRng};
use crate::model::MultiChannelModel;
use crate::optim::{fit_new, FitReport};
use crate::synthetic::{generate_scenario, split_indices};

pub const MODEL_FILE: &str = "model.json";
pub const FIT_REPORT_FILE: &str = "fit_report.json";
pub const SWEEP_REPORT_FILE: &str = "sweep_report.json";
pub const SWEEP_CELLS_FILE: &str = "sweep_cells.csv";
pub const SWEEP_SUMMARY_FILE: &str = "sweep_summary.csv";
pub const RECON_REPORT_FILE: &str = "recon_report.json";
pub const EVALUATION_FILE: &str = "evaluation.json";

const SPLIT_STREAM: u64 = 11;
const LDA_STREAM: u64 = 12;
const EVAL_STREAM: u64 = 13;

/// Channels ready for fitting, plus whatever is known about how they were
/// generated.
#[derive(Clone, Debug)]
pub struct PreparedData {
    /// Data on the scale the model sees.
    pub dataset: MultiChannelDataset,
    /// Data on its original scale.
    pub raw: MultiChannelDataset,
    pub truth: Option<GroundTruth>,
}

impl PreparedData {
    pub fn new(raw: MultiChannelDataset, truth: Option<GroundTruth>, standardized: bool) -> Result<Self> {
        let dataset = if standardized { standardize(&raw)? } else { raw.clone() };
        Ok(Self { dataset, raw, truth })
    }

    /// Reuses the preprocessing recorded with a fitted model.
    pub fn with_record(
        raw: MultiChannelDataset,
        truth: Option<GroundTruth>,
        record: Option<&[Standardization]>,
    ) -> Result<Self> {
        let dataset = match record {
            Some(r) => apply_standardization(&raw, r)?,
            None => raw.clone(),
        };
        Ok(Self { dataset, raw, truth })
    }

    pub fn truth_model(&self) -> Option<LinearGaussian> {
        self.truth.as_ref().map(|t| {
            let var = t.noise_scale * t.noise_scale;
            LinearGaussian {
                maps: t.maps.clone(),
                noise_var: t.maps.iter().map(|g| vec![var; g.rows()]).collect(),
            }
        })
    }

    /// `Σ ln std` over every feature: the log Jacobian between the raw and
    /// the model scale.
    pub fn log_scale(&self) -> f64 {
        self.dataset
            .standardization
            .as_ref()
            .map(|records| {
                records
                    .iter()
                    .flat_map(|r| r.std.iter())
                    .map(|s| s.ln())
                    .sum()
            })
            .unwrap_or(0.0)
    }
}

/// Loads or generates the configured data.
pub fn prepare_data(cfg: &RunConfig) -> Result<PreparedData> {
    let (raw, truth) = match &cfg.data {
        DataSource::Csv(paths) => (load_channels(paths)?, None),
        DataSource::Dir(dir) => load_dir(dir)?,
        DataSource::Scenario(spec) => {
            let ds = generate_scenario(spec)?;
            let table = synthetic_to_dataset(&ds)?;
            let truth = GroundTruth {
                spec: spec.clone(),
                ids: table.ids.clone(),
                latent: ds.latent,
                maps: ds.maps,
                noise_scale: ds.noise_scale,
            };
            (table, Some(truth))
        }
    };
    PreparedData::new(raw, truth, cfg.standardize)
}

/// A fitted model together with the preprocessing and configuration that
/// produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub model: MultiChannelModel,
    pub features: Vec<Vec<String>>,
    pub standardization: Option<Vec<Standardization>>,
    pub config: RunConfig,
}

impl ModelFile {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: ModelFile = crate::data::read_json(path)?;
        file.model.validate()?;
        Ok(file)
    }

    /// Checks that `ds` has the channels this model was fitted on.
    pub fn check_data(&self, ds: &MultiChannelDataset) -> Result<()> {
        if ds.channels.len() != self.model.num_channels() {
            return Err(Error::Shape(format!(
                "model has {} channels, data has {}",
                self.model.num_channels(),
                ds.channels.len()
            )));
        }
        for (spec, ch) in self.model.channels.iter().zip(&ds.channels) {
            if ch.values.cols() != spec.dim {
                return Err(Error::Channel {
                    channel: spec.name.clone(),
                    message: format!(
                        "model expects {} features, data file {:?} has {}",
                        spec.dim,
                        ch.name,
                        ch.values.cols()
                    ),
                });
            }
        }
        Ok(())
    }
}

/// Fills in every data-dependent default so the config can be replayed.
pub fn resolve_config(cfg: &RunConfig, samples: usize) -> RunConfig {
    let mut out = cfg.clone();
    out.train.batch_size = Some(cfg.train.resolved_batch_size(samples));
    out
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn train_split(cfg: &RunConfig, data: &[Matrix]) -> Result<(Vec<Matrix>, Option<Vec<Matrix>>)> {
    match cfg.evaluation.validation_fraction {
        None => Ok((data.to_vec(), None)),
        Some(f) => {
            let mut rng = SeededRng::new(derive_seed(&[cfg.train.seed, SPLIT_STREAM]));
            let (train, valid) = split_indices(data[0].rows(), f, &mut rng)?;
            Ok((
                data.iter().map(|x| x.select_rows(&train)).collect(),
                Some(data.iter().map(|x| x.select_rows(&valid)).collect()),
            ))
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitArtifact {
    pub config: RunConfig,
    pub report: FitReport,
}

/// Trains one model and writes the model file and the fit report.
pub fn run_fit(cfg: &RunConfig, data: &PreparedData) -> Result<(ModelFile, FitReport)> {
    let dims = cfg.latent_dims.as_vec();
    let [latent_dim] = dims[..] else {
        return Err(Error::Config(format!(
            "fit takes one latent dimension, got {dims:?}; use sweep for several"
        )));
    };
    let resolved = resolve_config(cfg, data.dataset.samples());
    let matrices = data.dataset.matrices();
    let (train, valid) = train_split(&resolved, &matrices)?;
    let (model, report) = fit_new(
        latent_dim,
        &train,
        &data.dataset.names(),
        &resolved.train,
        valid.as_deref(),
    )?;
    let file = ModelFile {
        model,
        features: data.dataset.channels.iter().map(|c| c.features.clone()).collect(),
        standardization: data.dataset.standardization.clone(),
        config: resolved.clone(),
    };
    ensure_dir(&cfg.output_dir)?;
    file.save(&cfg.output_dir.join(MODEL_FILE))?;
    write_json(
        &cfg.output_dir.join(FIT_REPORT_FILE),
        &FitArtifact {
            config: resolved,
            report: report.clone(),
        },
    )?;
    Ok((file, report))
}

fn class_ids(labels: &[String]) -> Vec<usize> {
    encode_labels(labels).0
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepArtifact {
    pub config: RunConfig,
    pub report: SweepReport,
}

/// Fits every latent dimension and replication and writes the JSON report
/// plus per-cell and per-dimension CSV tables.
pub fn run_sweep(cfg: &RunConfig, data: &PreparedData, labels: Option<&[String]>) -> Result<SweepReport> {
    let resolved = resolve_config(cfg, data.dataset.samples());
    let lda = labels.map(|l| LdaSpec {
        labels: class_ids(l),
        repeats: cfg.evaluation.lda_repeats,
        features: cfg.evaluation.features,
    });
    let report = sweep_latent_dims(
        &data.dataset.matrices(),
        &data.dataset.names(),
        &cfg.latent_dims.as_vec(),
        &resolved.train,
        cfg.replications,
        lda.as_ref(),
    )?;
    ensure_dir(&cfg.output_dir)?;
    write_json(
        &cfg.output_dir.join(SWEEP_REPORT_FILE),
        &SweepArtifact {
            config: resolved,
            report: report.clone(),
        },
    )?;
    let cells = cfg.output_dir.join(SWEEP_CELLS_FILE);
    fs::write(&cells, report.cells_csv()).map_err(|e| Error::io(&cells, e))?;
    let mut summary = String::from("latent_dim,nlb_mean,nlb_stderr,succeeded,lda_mean\n");
    for s in &report.summaries {
        summary.push_str(&format!(
            "{},{},{},{},{}\n",
            s.latent_dim,
            format_f64(s.nlb_mean),
            format_f64(s.nlb_stderr),
            s.succeeded,
            s.lda_mean.map(format_f64).unwrap_or_default()
        ));
    }
    let path = cfg.output_dir.join(SWEEP_SUMMARY_FILE);
    fs::write(&path, summary).map_err(|e| Error::io(&path, e))?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReconArtifact {
    pub config: RunConfig,
    pub mode: ReconMode,
    /// Errors against the observed data, on the model's scale.
    pub observed: ReconReport,
    /// Errors against the noiseless signal, when the ground truth is known.
    pub signal: Option<ReconReport>,
    pub files: Vec<PathBuf>,
}

/// Reconstructs every channel, writes the reconstructions on the original
/// data scale and the error report.
pub fn run_reconstruct(file: &ModelFile, data: &PreparedData, mode: ReconMode, out: &Path) -> Result<ReconArtifact> {
    file.check_data(&data.dataset)?;
    let inputs = data.dataset.matrices();
    let observed = recon_report(&file.model, &inputs, &inputs, ReconTarget::Observed)?;
    let signal = match &data.truth {
        Some(t) => {
            let raw_signals = t.signals()?;
            let table = MultiChannelDataset {
                ids: data.dataset.ids.clone(),
                channels: data
                    .raw
                    .channels
                    .iter()
                    .zip(raw_signals)
                    .map(|(c, s)| crate::data::ChannelData { values: s, ..c.clone() })
                    .collect(),
                standardization: None,
            };
            let scaled = match &data.dataset.standardization {
                Some(r) => apply_standardization(&table, r)?,
                None => table,
            };
            Some(recon_report(&file.model, &inputs, &scaled.matrices(), ReconTarget::Signal)?)
        }
        None => None,
    };
    let rec = reconstruct(&file.model, &inputs, mode)?;
    let mut rec_table = data.dataset.clone();
    for (c, m) in rec_table.channels.iter_mut().zip(rec) {
        c.values = m;
    }
    let rec_raw = if rec_table.standardization.is_some() {
        crate::data::inverse_standardize(&rec_table)?
    } else {
        rec_table
    };
    ensure_dir(out)?;
    let mut files = Vec::new();
    for ch in &rec_raw.channels {
        let name = format!("{}_recon_{}.csv", ch.name, mode_name(mode));
        let path = out.join(&name);
        write_channel_csv(&path, &rec_raw.ids, &ch.features, &ch.values)?;
        files.push(PathBuf::from(name));
    }
    let artifact = ReconArtifact {
        config: file.config.clone(),
        mode,
        observed,
        signal,
        files,
    };
    write_json(&out.join(RECON_REPORT_FILE), &artifact)?;
    Ok(artifact)
}

fn mode_name(mode: ReconMode) -> &'static str {
    match mode {
        ReconMode::Multi => "multi",
        ReconMode::Single => "single",
    }
}

/// Comparison with the generating model of synthetic data.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TruthComparison {
    /// Negative log evidence per sample of the generating model, on the
    /// model's data scale.
    pub true_neg_log_evidence: f64,
    /// Mean KL from each encoder to the exact posterior of the generating
    /// model; absent when the latent dimensions differ.
    pub posterior_kl: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub samples: usize,
    pub channels: Vec<String>,
    pub latent_dim: usize,
    /// Negative lower bound per sample.
    pub nlb: f64,
    pub nlb_stderr: f64,
    pub mc_samples: usize,
    /// Exact negative log evidence per sample of the fitted model.
    pub neg_log_evidence: f64,
    /// `nlb - neg_log_evidence`; non-negative up to Monte-Carlo error.
    pub bound_gap: f64,
    pub truth: Option<TruthComparison>,
    pub lda: Option<LdaResult>,
    pub lda_features: LatentFeatures,
    pub config: RunConfig,
}

/// Scores a fitted model on data: bound, exact evidence, optional ground
/// truth comparison and optional split-half LDA.
pub fn evaluate_model(file: &ModelFile, data: &PreparedData, labels: Option<&[String]>) -> Result<EvaluationReport> {
    file.check_data(&data.dataset)?;
    let cfg = &file.config;
    let x = data.dataset.matrices();
    let n = check_batch(&file.model, &x)?;
    let mc = cfg.evaluation.mc_samples;
    let bound = elbo_batch(&file.model, &x, derive_seed(&[cfg.train.seed, EVAL_STREAM]), mc)?;
    let nle = -exact_log_evidence(&LinearGaussian::from(&file.model), &x)?;
    let truth = match data.truth_model() {
        Some(t) => {
            let raw = data.raw.matrices();
            // density of the scaled data = raw density · Π std
            let true_nle = -exact_log_evidence(&t, &raw)? - data.log_scale();
            let posterior_kl = if t.latent_dim() == file.model.latent_dim {
                Some(posterior_gap_between(&file.model, &x, &t, &raw)?.mean_kl)
            } else {
                None
            };
            Some(TruthComparison {
                true_neg_log_evidence: true_nle,
                posterior_kl,
            })
        }
        None => None,
    };
    let lda = match labels {
        Some(l) => {
            let feats = latent_features(&file.model, &x, cfg.evaluation.features)?;
            let mut rng = SeededRng::new(derive_seed(&[cfg.train.seed, LDA_STREAM]));
            Some(lda_split_half(&feats, &class_ids(l), &mut rng, cfg.evaluation.lda_repeats)?)
        }
        None => None,
    };
    Ok(EvaluationReport {
        samples: n,
        channels: data.dataset.names(),
        latent_dim: file.model.latent_dim,
        nlb: bound.nlb(),
        nlb_stderr: bound.mc_stderr(),
        mc_samples: mc,
        neg_log_evidence: nle,
        bound_gap: bound.nlb() - nle,
        truth,
        lda,
        lda_features: cfg.evaluation.features,
        config: cfg.clone(),
    })
}

/// [`evaluate_model`] followed by writing `evaluation.json` into `out`.
pub fn run_evaluate(
    file: &ModelFile,
    data: &PreparedData,
    labels: Option<&[String]>,
    out: &Path,
) -> Result<EvaluationReport> {
    let report = evaluate_model(file, data, labels)?;
    ensure_dir(out)?;
    write_json(&out.join(EVALUATION_FILE), &report)?;
    Ok(report)
}

/// Labels for a synthetic dataset: `"high"` when latent coordinate `coord`
/// is above its median, `"low"` otherwise.
pub fn threshold_labels(truth: &GroundTruth, coord: usize) -> Result<Vec<String>> {
    if coord >= truth.latent.cols() {
        return Err(Error::InvalidArgument(format!(
            "latent coordinate {coord} out of range for dimension {}",
            truth.latent.cols()
        )));
    }
    let col = truth.latent.col(coord);
    let mut sorted = col.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    Ok(col
        .iter()
        .map(|&v| if v >= median { "high" } else { "low" }.to_string())
        .collect())
}
