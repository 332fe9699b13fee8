//! Evaluation: exact evidence, posterior gaps, reconstruction, latent
//! classification and latent-dimension sweeps.

mod evidence;
mod lda;
mod recon;
mod sweep;

pub use evidence::{
    exact_log_evidence, exact_posterior, kl_diag, posterior_gap, posterior_gap_between,
    EvidenceOracle, LinearGaussian,
    PosteriorGap,
};
pub use lda::{encode_labels, lda_split_half, Lda, LdaResult};
pub use recon::{
    mse, recon_report, reconstruct, reconstruct_sampled, ReconMode, ReconReport, ReconTarget,
};
pub use sweep::{
    cell_seed, elbow_index, sweep_latent_dims, DimSummary, LdaSpec, SweepCell, SweepReport,
};

use serde::{Deserialize, Serialize};

use crate::elbo::check_batch;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::MultiChannelModel;

/// How per-channel posterior means are combined into one feature row.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentFeatures {
    /// Average over channels; `l` features.
    #[default]
    Mean,
    /// Side by side; `C·l` features.
    Concat,
}

impl std::str::FromStr for LatentFeatures {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "concat" => Ok(Self::Concat),
            other => Err(Error::InvalidArgument(format!(
                "unknown feature mode {other:?} (expected mean or concat)"
            ))),
        }
    }
}

/// Per-sample latent features from the encoder means.
pub fn latent_features(
    model: &MultiChannelModel,
    channels: &[Matrix],
    mode: LatentFeatures,
) -> Result<Matrix> {
    check_batch(model, channels)?;
    let codes = (0..model.num_channels())
        .map(|c| model.encode(c, &channels[c]).map(|q| q.mu))
        .collect::<Result<Vec<_>>>()?;
    Ok(match mode {
        LatentFeatures::Concat => Matrix::hstack(&codes.iter().collect::<Vec<_>>())?,
        LatentFeatures::Mean => {
            let mut acc = Matrix::zeros(codes[0].rows(), codes[0].cols());
            for z in &codes {
                acc.add_scaled(z, 1.0 / codes.len() as f64);
            }
            acc
        }
    })
}
