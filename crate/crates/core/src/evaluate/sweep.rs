//! Model selection over the fitted latent dimension.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::lda::{lda_split_half, LdaResult};
use super::{latent_features, LatentFeatures};
use crate::error::{Error, Result};
use crate::linalg::{derive_seed, Matrix, SeededRng};
use crate::optim::{fit_new, TrainConfig};

/// Labels for scoring each fitted model by split-half LDA.
#[derive(Clone, Debug)]
pub struct LdaSpec {
    pub labels: Vec<usize>,
    pub repeats: usize,
    pub features: LatentFeatures,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub latent_dim: usize,
    pub replication: usize,
    pub seed: u64,
    pub final_nlb: Option<f64>,
    pub final_nlb_stderr: Option<f64>,
    pub lda: Option<LdaResult>,
    pub wall_time_secs: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimSummary {
    pub latent_dim: usize,
    pub nlb_mean: f64,
    /// Standard error across successful replications.
    pub nlb_stderr: f64,
    pub succeeded: usize,
    pub lda_mean: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub dims: Vec<usize>,
    pub summaries: Vec<DimSummary>,
    /// Suggested latent dimension: largest second difference of the NLB.
    pub elbow: Option<usize>,
    pub cells: Vec<SweepCell>,
    pub config: TrainConfig,
}

impl SweepReport {
    pub fn mean_nlb(&self, dim: usize) -> Option<f64> {
        self.summaries
            .iter()
            .find(|s| s.latent_dim == dim)
            .map(|s| s.nlb_mean)
    }

    /// `NLB(from) - NLB(to)`, positive when `to` fits better.
    pub fn drop(&self, from: usize, to: usize) -> Option<f64> {
        Some(self.mean_nlb(from)? - self.mean_nlb(to)?)
    }

    /// Rows for the per-cell CSV export.
    pub fn cells_csv(&self) -> String {
        let mut s = String::from("latent_dim,replication,seed,final_nlb,final_nlb_stderr,lda_accuracy,error\n");
        for c in &self.cells {
            let opt = |v: Option<f64>| v.map(|x| format!("{x:.16e}")).unwrap_or_default();
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                c.latent_dim,
                c.replication,
                c.seed,
                opt(c.final_nlb),
                opt(c.final_nlb_stderr),
                opt(c.lda.as_ref().map(|l| l.mean_accuracy)),
                c.error.as_deref().unwrap_or("").replace([',', '\n'], ";"),
            ));
        }
        s
    }
}

/// Index of the point after the largest second forward difference,
/// `f[k+2] - 2 f[k+1] + f[k]`.
pub fn elbow_index(values: &[f64]) -> Option<usize> {
    if values.len() < 3 {
        return None;
    }
    let mut best: Option<(usize, f64)> = None;
    for k in 0..values.len() - 2 {
        let d2 = values[k + 2] - 2.0 * values[k + 1] + values[k];
        if d2.is_finite() && best.is_none_or(|(_, b)| d2 > b) {
            best = Some((k, d2));
        }
    }
    best.map(|(k, _)| k + 1)
}

/// Seed of one sweep cell.
pub fn cell_seed(base: u64, latent_dim: usize, replication: usize) -> u64 {
    derive_seed(&[base, latent_dim as u64, replication as u64])
}

fn mean_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len();
    let mean = v.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Fits one model per `(dim, replication)` and summarizes the final NLB.
/// Failed cells are recorded and skipped in the summaries.
pub fn sweep_latent_dims(
    channels: &[Matrix],
    names: &[String],
    dims: &[usize],
    cfg: &TrainConfig,
    replications: usize,
    lda: Option<&LdaSpec>,
) -> Result<SweepReport> {
    if dims.is_empty() {
        return Err(Error::InvalidArgument("no latent dimensions to sweep".into()));
    }
    if replications == 0 {
        return Err(Error::InvalidArgument("replications must be at least 1".into()));
    }
    if let Some(&bad) = dims.iter().find(|&&d| d == 0) {
        return Err(Error::InvalidArgument(format!("latent dimension {bad}")));
    }
    cfg.validate()?;
    let jobs: Vec<(usize, usize)> = dims
        .iter()
        .flat_map(|&d| (1..=replications).map(move |r| (d, r)))
        .collect();
    let cells: Vec<SweepCell> = jobs
        .par_iter()
        .map(|&(dim, rep)| run_cell(channels, names, dim, rep, cfg, lda))
        .collect();

    let summaries: Vec<DimSummary> = dims
        .iter()
        .map(|&d| {
            let ok: Vec<&SweepCell> = cells
                .iter()
                .filter(|c| c.latent_dim == d && c.final_nlb.is_some())
                .collect();
            let nlb: Vec<f64> = ok.iter().filter_map(|c| c.final_nlb).collect();
            let (nlb_mean, nlb_stderr) = if nlb.is_empty() {
                (f64::NAN, f64::NAN)
            } else {
                mean_stderr(&nlb)
            };
            let accs: Vec<f64> = ok
                .iter()
                .filter_map(|c| c.lda.as_ref().map(|l| l.mean_accuracy))
                .collect();
            DimSummary {
                latent_dim: d,
                nlb_mean,
                nlb_stderr,
                succeeded: nlb.len(),
                lda_mean: (!accs.is_empty()).then(|| mean_stderr(&accs).0),
            }
        })
        .collect();
    let means: Vec<f64> = summaries.iter().map(|s| s.nlb_mean).collect();
    let elbow = elbow_index(&means).map(|k| dims[k]);
    Ok(SweepReport {
        dims: dims.to_vec(),
        summaries,
        elbow,
        cells,
        config: cfg.clone(),
    })
}

fn run_cell(
    channels: &[Matrix],
    names: &[String],
    dim: usize,
    rep: usize,
    cfg: &TrainConfig,
    lda: Option<&LdaSpec>,
) -> SweepCell {
    let seed = cell_seed(cfg.seed, dim, rep);
    let cell_cfg = TrainConfig { seed, ..cfg.clone() };
    let mut cell = SweepCell {
        latent_dim: dim,
        replication: rep,
        seed,
        final_nlb: None,
        final_nlb_stderr: None,
        lda: None,
        wall_time_secs: None,
        error: None,
    };
    let result = fit_new(dim, channels, names, &cell_cfg, None).and_then(|(model, report)| {
        let lda_result = match lda {
            Some(spec) => {
                let feats = latent_features(&model, channels, spec.features)?;
                let mut rng = SeededRng::new(derive_seed(&[seed, 0x1da]));
                Some(lda_split_half(&feats, &spec.labels, &mut rng, spec.repeats)?)
            }
            None => None,
        };
        Ok((report, lda_result))
    });
    match result {
        Ok((report, lda_result)) => {
            cell.final_nlb = Some(report.final_nlb);
            cell.final_nlb_stderr = Some(report.final_nlb_stderr);
            cell.wall_time_secs = Some(report.wall_time_secs);
            cell.lda = lda_result;
        }
        Err(e) => {
            log::warn!("sweep cell l={dim} r={rep} failed: {e}");
            cell.error = Some(e.to_string());
        }
    }
    cell
}
