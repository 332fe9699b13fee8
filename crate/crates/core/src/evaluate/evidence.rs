//! Exact marginal likelihood and posterior of a linear-Gaussian model.
//!
//! Concatenating all channels, `x ~ N(0, G Gᵀ + Ψ)` with `Ψ` diagonal.
//! Densities are evaluated through the `l x l` matrix `M = I + Gᵀ Ψ⁻¹ G`
//! (matrix determinant lemma and Woodbury identity), so the cost per sample
//! is linear in the total dimension.

use serde::{Deserialize, Serialize};

use crate::elbo::LN_2PI;
use crate::error::{Error, Result};
use crate::linalg::{matmul, polar_orthogonal, Cholesky, Matrix};
use crate::model::{LatentGaussian, MultiChannelModel};

/// Decoder-only view of a model: mean maps and diagonal noise variances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearGaussian {
    pub maps: Vec<Matrix>,
    pub noise_var: Vec<Vec<f64>>,
}

impl From<&MultiChannelModel> for LinearGaussian {
    fn from(m: &MultiChannelModel) -> Self {
        Self {
            maps: m.theta.iter().map(|t| t.g_mu.clone()).collect(),
            noise_var: m.theta.iter().map(|t| t.variance()).collect(),
        }
    }
}

impl LinearGaussian {
    pub fn latent_dim(&self) -> usize {
        self.maps.first().map_or(0, Matrix::cols)
    }

    pub fn total_dim(&self) -> usize {
        self.maps.iter().map(Matrix::rows).sum()
    }

    /// Stacked `D x l` map.
    pub fn stacked_map(&self) -> Result<Matrix> {
        let parts: Vec<&Matrix> = self.maps.iter().collect();
        Matrix::vstack(&parts)
    }

    /// Dense `D x D` covariance `G Gᵀ + Ψ`.
    pub fn covariance(&self) -> Result<Matrix> {
        let g = self.stacked_map()?;
        let mut cov = matmul(&g, &g.transpose())?;
        for (i, v) in self.noise_var.iter().flatten().enumerate() {
            cov.set(i, i, cov.get(i, i) + v);
        }
        Ok(cov)
    }
}

/// Precomputed factorization for repeated density and posterior queries.
#[derive(Clone, Debug)]
pub struct EvidenceOracle {
    stacked: Matrix,
    noise_var: Vec<f64>,
    precision_chol: Cholesky,
    log_det_cov: f64,
}

impl EvidenceOracle {
    pub fn new(model: &LinearGaussian) -> Result<Self> {
        let l = model.latent_dim();
        if model.maps.len() != model.noise_var.len() || l == 0 {
            return Err(Error::Shape("maps and noise variances do not line up".into()));
        }
        for (g, v) in model.maps.iter().zip(&model.noise_var) {
            if g.cols() != l || g.rows() != v.len() {
                return Err(Error::Shape(format!(
                    "map {}x{} with {} noise variances",
                    g.rows(),
                    g.cols(),
                    v.len()
                )));
            }
        }
        let noise_var: Vec<f64> = model.noise_var.iter().flatten().copied().collect();
        if let Some(pivot) = noise_var.iter().position(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::NotPositiveDefinite { pivot });
        }
        let stacked = model.stacked_map()?;
        // M = I + Gᵀ Ψ⁻¹ G
        let mut scaled = stacked.clone();
        for (i, v) in noise_var.iter().enumerate() {
            scaled.row_mut(i).iter_mut().for_each(|g| *g /= v);
        }
        let mut precision = matmul(&stacked.transpose(), &scaled)?;
        for j in 0..l {
            precision.set(j, j, precision.get(j, j) + 1.0);
        }
        let precision_chol = Cholesky::new(&precision)?;
        let log_det_cov =
            precision_chol.log_det() + noise_var.iter().map(|v| v.ln()).sum::<f64>();
        Ok(Self {
            stacked,
            noise_var,
            precision_chol,
            log_det_cov,
        })
    }

    pub fn total_dim(&self) -> usize {
        self.noise_var.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.stacked.cols()
    }

    /// `Gᵀ Ψ⁻¹ x`.
    fn projected(&self, x: &[f64]) -> Vec<f64> {
        let mut b = vec![0.0; self.latent_dim()];
        for (i, (&xi, &v)) in x.iter().zip(&self.noise_var).enumerate() {
            let w = xi / v;
            for (bj, g) in b.iter_mut().zip(self.stacked.row(i)) {
                *bj += g * w;
            }
        }
        b
    }

    fn check_len(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.total_dim() {
            return Err(Error::Shape(format!(
                "observation of length {} for a model of total dimension {}",
                x.len(),
                self.total_dim()
            )));
        }
        Ok(())
    }

    /// Log density of one concatenated observation.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        self.check_len(x)?;
        let b = self.projected(x);
        let mut y = b.clone();
        self.precision_chol.forward(&mut y);
        let quad = x
            .iter()
            .zip(&self.noise_var)
            .map(|(xi, v)| xi * xi / v)
            .sum::<f64>()
            - y.iter().map(|v| v * v).sum::<f64>();
        Ok(-0.5 * (self.total_dim() as f64 * LN_2PI + self.log_det_cov + quad))
    }

    /// Posterior covariance, identical for every observation.
    pub fn posterior_covariance(&self) -> Matrix {
        self.precision_chol.inverse()
    }

    pub fn posterior_mean(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_len(x)?;
        Ok(self.precision_chol.solve_vec(&self.projected(x)))
    }

    /// Exact `p(z | x)` reduced to its mean and marginal standard deviations.
    pub fn posterior(&self, x: &[f64]) -> Result<LatentGaussian> {
        let mean = self.posterior_mean(x)?;
        let cov = self.posterior_covariance();
        let sigma = (0..cov.rows()).map(|j| cov.get(j, j).sqrt()).collect();
        LatentGaussian::new(mean, sigma)
    }
}

fn concat_rows(channels: &[Matrix]) -> Result<Matrix> {
    let parts: Vec<&Matrix> = channels.iter().collect();
    Matrix::hstack(&parts)
}

/// Average log evidence per sample of sample-aligned channel data.
pub fn exact_log_evidence(model: &LinearGaussian, channels: &[Matrix]) -> Result<f64> {
    let oracle = EvidenceOracle::new(model)?;
    let x = concat_rows(channels)?;
    if x.rows() == 0 {
        return Err(Error::InvalidArgument("no samples".into()));
    }
    let mut total = 0.0;
    for k in 0..x.rows() {
        total += oracle.log_density(x.row(k))?;
    }
    Ok(total / x.rows() as f64)
}

/// Exact posterior for one concatenated observation.
pub fn exact_posterior(model: &LinearGaussian, x: &[f64]) -> Result<LatentGaussian> {
    EvidenceOracle::new(model)?.posterior(x)
}

/// `KL(N(a_mu, diag a_var) || N(b_mu, diag b_var))`.
pub fn kl_diag(a_mu: &[f64], a_var: &[f64], b_mu: &[f64], b_var: &[f64]) -> f64 {
    let mut kl = 0.0;
    for j in 0..a_mu.len() {
        let d = a_mu[j] - b_mu[j];
        kl += 0.5 * ((b_var[j] / a_var[j]).ln() + (a_var[j] + d * d) / b_var[j] - 1.0);
    }
    kl
}

/// Distance from the per-channel encoders of a fitted model to the exact
/// posterior of a reference linear model.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PosteriorGap {
    /// Mean over samples and channels of `KL(q(z|x_c) || p_ref(z|x))`.
    pub mean_kl: f64,
    pub per_channel: Vec<f64>,
    /// Orthogonal map taking fitted latent coordinates to reference ones.
    pub rotation: Matrix,
}

/// Compares every `q(z | x_c)` with the marginals of the reference
/// posterior `p(z | x)`.
///
/// The bound is invariant to rotations of the latent space, so the
/// reference posterior is first expressed in the fitted coordinates through
/// the orthogonal Procrustes map between fitted encoder means (averaged over
/// channels) and reference posterior means.
pub fn posterior_gap(
    model: &MultiChannelModel,
    reference: &LinearGaussian,
    channels: &[Matrix],
) -> Result<PosteriorGap> {
    posterior_gap_between(model, channels, reference, channels)
}

/// [`posterior_gap`] when the fitted model sees transformed data, e.g.
/// standardized features, while the reference explains the raw rows
/// `reference_channels` of the same samples.
pub fn posterior_gap_between(
    model: &MultiChannelModel,
    channels: &[Matrix],
    reference: &LinearGaussian,
    reference_channels: &[Matrix],
) -> Result<PosteriorGap> {
    crate::elbo::check_batch(model, channels)?;
    if reference_channels.len() != channels.len()
        || reference_channels.iter().any(|x| x.rows() != channels[0].rows())
    {
        return Err(Error::Shape("reference data does not match the fitted data".into()));
    }
    let l = model.latent_dim;
    if reference.latent_dim() != l {
        return Err(Error::Shape(format!(
            "fitted latent dimension {l} differs from reference {}",
            reference.latent_dim()
        )));
    }
    let oracle = EvidenceOracle::new(reference)?;
    let x = concat_rows(reference_channels)?;
    let n = x.rows();
    let mut ref_mean = Matrix::zeros(n, l);
    for k in 0..n {
        ref_mean.row_mut(k).copy_from_slice(&oracle.posterior_mean(x.row(k))?);
    }
    let encoded = (0..model.num_channels())
        .map(|c| model.encode(c, &channels[c]))
        .collect::<Result<Vec<_>>>()?;
    let mut fit_mean = Matrix::zeros(n, l);
    for q in &encoded {
        fit_mean.add_scaled(&q.mu, 1.0 / encoded.len() as f64);
    }
    // ref ≈ Q fit  ⇒  Q = polar(Σ ref fitᵀ)
    let cross = matmul(&ref_mean.transpose(), &fit_mean)?;
    let rotation = polar_orthogonal(&cross)?;
    let qt = rotation.transpose();
    let ref_in_fit = matmul(&ref_mean, &rotation)?;
    let cov = matmul(&matmul(&qt, &oracle.posterior_covariance())?, &rotation)?;
    let ref_var: Vec<f64> = (0..l).map(|j| cov.get(j, j)).collect();

    let mut per_channel = Vec::with_capacity(encoded.len());
    for q in &encoded {
        let var = q.sigma().map(|s| s * s);
        let total: f64 = (0..n)
            .map(|k| kl_diag(q.mu.row(k), var.row(k), ref_in_fit.row(k), &ref_var))
            .sum();
        per_channel.push(total / n as f64);
    }
    let mean_kl = per_channel.iter().sum::<f64>() / per_channel.len() as f64;
    Ok(PosteriorGap {
        mean_kl,
        per_channel,
        rotation,
    })
}
