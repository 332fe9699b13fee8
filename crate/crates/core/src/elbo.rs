//! Multi-channel evidence lower bound and its exact gradients.
//!
//! For one sample the bound is
//!
//! ```text
//! L = 1/C Σ_c ( E_{q(z|x_c)} [ Σ_i ln p(x_i | z) ] - KL(q(z|x_c) || N(0, I)) )
//! ```
//!
//! The expectation is estimated with reparameterized draws `z = μ + σ ε`, the
//! KL term is analytic, and the result is averaged over the batch. All noise
//! comes from a single per-call seed so the value and its gradient describe
//! the same stochastic objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    add_matmul_at, derive_seed, matmul, matmul_bt, standard_normal_matrix, Matrix, SeededRng,
};
use crate::model::{
    param_tensors, param_tensors_mut, GenerativeParams, LatentGaussian, MultiChannelModel,
    VariationalParams, SIGMA_FLOOR,
};

/// `ln(2π)`.
pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Analytic `KL(N(μ, diag σ²) || N(0, I))`.
pub fn kl_standard_normal(q: &LatentGaussian) -> f64 {
    let mut kl = 0.0;
    for (&m, &s) in q.mu.iter().zip(&q.sigma) {
        let s2 = s.max(SIGMA_FLOOR).powi(2);
        kl += 0.5 * (m * m + s2 - 1.0 - s2.ln());
    }
    kl
}

/// Log density of `x` under a diagonal Gaussian.
pub fn gaussian_diag_loglik(x: &[f64], mean: &[f64], variance: &[f64]) -> Result<f64> {
    if x.len() != mean.len() || x.len() != variance.len() {
        return Err(Error::Shape(format!(
            "loglik of length {} with mean {} and variance {}",
            x.len(),
            mean.len(),
            variance.len()
        )));
    }
    if let Some(v) = variance.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::InvalidArgument(format!("variance {v} is not positive")));
    }
    let mut ll = 0.0;
    for ((&xj, &mj), &vj) in x.iter().zip(mean).zip(variance) {
        let r = xj - mj;
        ll += -0.5 * LN_2PI - 0.5 * vj.ln() - r * r / (2.0 * vj);
    }
    Ok(ll)
}

/// Batch-averaged bound with its per-term structure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub total: f64,
    /// `recon_terms[c][i]`: expected log-likelihood of channel `i` decoded
    /// from the latent code inferred from channel `c`.
    pub recon_terms: Vec<Vec<f64>>,
    pub kl_terms: Vec<f64>,
    /// Bound value for each Monte-Carlo draw taken alone.
    pub draw_totals: Vec<f64>,
}

impl ElboBreakdown {
    /// Negative lower bound, the training loss.
    pub fn nlb(&self) -> f64 {
        -self.total
    }

    /// Monte-Carlo standard error of `total` across draws; zero with a
    /// single draw.
    pub fn mc_stderr(&self) -> f64 {
        let m = self.draw_totals.len();
        if m < 2 {
            return 0.0;
        }
        let mean = self.draw_totals.iter().sum::<f64>() / m as f64;
        let var = self
            .draw_totals
            .iter()
            .map(|v| (v - mean).powi(2))
            .sum::<f64>()
            / (m - 1) as f64;
        (var / m as f64).sqrt()
    }
}

/// Gradients of the bound, shaped like the model parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    pub theta: Vec<GenerativeParams>,
    pub phi: Vec<VariationalParams>,
}

impl GradientSet {
    pub fn zeros_like(model: &MultiChannelModel) -> Self {
        let l = model.latent_dim;
        Self {
            theta: model
                .channels
                .iter()
                .map(|c| GenerativeParams::zeros(c.dim, l))
                .collect(),
            phi: model
                .channels
                .iter()
                .map(|c| VariationalParams::zeros(c.dim, l))
                .collect(),
        }
    }

    /// Flat views in the same order as [`MultiChannelModel::tensors`].
    pub fn tensors(&self) -> Vec<&[f64]> {
        param_tensors(&self.theta, &self.phi)
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        param_tensors_mut(&mut self.theta, &mut self.phi)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Which parts of the bound to include; anything but `Full` is a test hook.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Terms {
    #[default]
    Full,
    ReconOnly,
    KlOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ElboOptions {
    pub mc_samples: usize,
    pub seed: u64,
    pub terms: Terms,
}

impl ElboOptions {
    pub fn new(seed: u64, mc_samples: usize) -> Self {
        Self {
            mc_samples,
            seed,
            terms: Terms::Full,
        }
    }
}

/// Seed of the noise stream used by encoder `name` for a call seeded with
/// `seed`. Keyed by name so that reordering channels does not change the
/// noise each encoder sees.
pub fn channel_stream_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    derive_seed(&[seed, h])
}

/// Checks that a batch has one matrix per channel with matching widths and
/// a common, non-zero row count. Returns the row count.
pub fn check_batch(model: &MultiChannelModel, batch: &[Matrix]) -> Result<usize> {
    if batch.len() != model.num_channels() {
        return Err(Error::Shape(format!(
            "batch has {} channels, model has {}",
            batch.len(),
            model.num_channels()
        )));
    }
    let rows = batch[0].rows();
    for (ch, x) in model.channels.iter().zip(batch) {
        if x.cols() != ch.dim {
            return Err(Error::Channel {
                channel: ch.name.clone(),
                message: format!("data width {} but model dimension {}", x.cols(), ch.dim),
            });
        }
        if x.rows() != rows {
            return Err(Error::Channel {
                channel: ch.name.clone(),
                message: format!("{} samples where channel 0 has {rows}", x.rows()),
            });
        }
    }
    if rows == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    Ok(rows)
}

/// Monte-Carlo estimate of the bound, averaged over the batch.
pub fn elbo_batch(
    model: &MultiChannelModel,
    batch: &[Matrix],
    seed: u64,
    mc_samples: usize,
) -> Result<ElboBreakdown> {
    elbo_with_options(model, batch, &ElboOptions::new(seed, mc_samples), false).map(|(b, _)| b)
}

/// The bound together with its exact gradient with respect to every
/// parameter.
pub fn elbo_gradients(
    model: &MultiChannelModel,
    batch: &[Matrix],
    seed: u64,
    mc_samples: usize,
) -> Result<(ElboBreakdown, GradientSet)> {
    let (b, g) = elbo_with_options(model, batch, &ElboOptions::new(seed, mc_samples), true)?;
    Ok((b, g.expect("gradients requested")))
}

pub fn elbo_with_options(
    model: &MultiChannelModel,
    batch: &[Matrix],
    opts: &ElboOptions,
    with_grad: bool,
) -> Result<(ElboBreakdown, Option<GradientSet>)> {
    if opts.mc_samples == 0 {
        return Err(Error::InvalidArgument("mc_samples must be at least 1".into()));
    }
    let n = check_batch(model, batch)?;
    let nc = model.num_channels();
    let l = model.latent_dim;
    let draws = opts.mc_samples;
    let use_recon = opts.terms != Terms::KlOnly;
    let use_kl = opts.terms != Terms::ReconOnly;

    let mut grads = with_grad.then(|| GradientSet::zeros_like(model));

    let variances: Vec<Vec<f64>> = model.theta.iter().map(GenerativeParams::variance).collect();
    let log_variances: Vec<Vec<f64>> = variances
        .iter()
        .map(|v| v.iter().map(|x| x.ln()).collect())
        .collect();

    let mut recon_terms = vec![vec![0.0; nc]; nc];
    let mut kl_terms = vec![0.0; nc];
    let mut draw_recon = vec![vec![0.0; draws]; nc];

    // d(bound)/d(parameter) picks up 1/C from the channel average, 1/N from
    // the batch average and 1/M from the draw average.
    let w_recon = 1.0 / (nc * n * draws) as f64;
    let w_kl = 1.0 / (nc * n) as f64;

    for c in 0..nc {
        let mut rng = SeededRng::new(channel_stream_seed(opts.seed, &model.channels[c].name));
        let q = model.encode(c, &batch[c])?;
        let sigma = q.sigma();
        let clamped = |k: usize, j: usize| sigma.get(k, j) <= SIGMA_FLOOR;

        if use_kl {
            let mut kl_sum = 0.0;
            for k in 0..n {
                let mut kl_k = 0.0;
                for (&m, &s) in q.mu.row(k).iter().zip(sigma.row(k)) {
                    let s2 = s * s;
                    kl_k += 0.5 * (m * m + s2 - 1.0 - s2.ln());
                }
                kl_sum += kl_k;
            }
            kl_terms[c] = kl_sum / n as f64;
        }

        let mut d_mu = Matrix::zeros(n, l);
        let mut d_lv = Matrix::zeros(n, l);

        for m in 0..draws {
            let eps = standard_normal_matrix(&mut rng, n, l)?;
            if !use_recon {
                continue;
            }
            let mut z = Matrix::zeros(n, l);
            for k in 0..n {
                let (mu, s, e) = (q.mu.row(k), sigma.row(k), eps.row(k));
                for (j, zj) in z.row_mut(k).iter_mut().enumerate() {
                    *zj = mu[j] + s[j] * e[j];
                }
            }
            let mut d_z = Matrix::zeros(n, l);
            for i in 0..nc {
                let x = &batch[i];
                let var = &variances[i];
                let ln_var = &log_variances[i];
                let pred = matmul_bt(&z, &model.theta[i].g_mu)?;
                // residual scaled by precision; reused for the gradient
                let mut scaled = Matrix::zeros(n, x.cols());
                let mut ll_sum = 0.0;
                let mut d_glv = grads.as_ref().map(|_| vec![0.0; x.cols()]);
                for k in 0..n {
                    let mut ll_k = 0.0;
                    let (xr, pr) = (x.row(k), pred.row(k));
                    let sr = scaled.row_mut(k);
                    for j in 0..xr.len() {
                        let r = xr[j] - pr[j];
                        ll_k += -0.5 * LN_2PI - 0.5 * ln_var[j] - r * r / (2.0 * var[j]);
                        sr[j] = r / var[j];
                        if let Some(d) = d_glv.as_mut() {
                            d[j] += -0.5 + 0.5 * r * r / var[j];
                        }
                    }
                    ll_sum += ll_k;
                }
                recon_terms[c][i] += ll_sum;
                draw_recon[c][m] += ll_sum / n as f64;

                if let Some(g) = grads.as_mut() {
                    let th = &mut g.theta[i];
                    add_matmul_at(&mut th.g_mu, &scaled, &z, w_recon)?;
                    for (j, d) in d_glv.unwrap_or_default().into_iter().enumerate() {
                        if var[j] > SIGMA_FLOOR {
                            th.g_logvar[j] += w_recon * d;
                        }
                    }
                    d_z.add_scaled(&matmul(&scaled, &model.theta[i].g_mu)?, 1.0);
                }
            }
            if grads.is_some() {
                for k in 0..n {
                    for j in 0..l {
                        let dz = w_recon * d_z.get(k, j);
                        d_mu.set(k, j, d_mu.get(k, j) + dz);
                        if !clamped(k, j) {
                            let dl = dz * eps.get(k, j) * 0.5 * sigma.get(k, j);
                            d_lv.set(k, j, d_lv.get(k, j) + dl);
                        }
                    }
                }
            }
        }

        if let Some(g) = grads.as_mut() {
            if use_kl {
                for k in 0..n {
                    for j in 0..l {
                        d_mu.set(k, j, d_mu.get(k, j) - w_kl * q.mu.get(k, j));
                        if !clamped(k, j) {
                            let s2 = sigma.get(k, j).powi(2);
                            d_lv.set(k, j, d_lv.get(k, j) - w_kl * 0.5 * (s2 - 1.0));
                        }
                    }
                }
            }
            let ph = &mut g.phi[c];
            add_matmul_at(&mut ph.v_mu, &d_mu, &batch[c], 1.0)?;
            add_matmul_at(&mut ph.v_logvar, &d_lv, &batch[c], 1.0)?;
            for k in 0..n {
                for (b, d) in ph.v_logvar_bias.iter_mut().zip(d_lv.row(k)) {
                    *b += d;
                }
            }
        }
    }

    let denom = (draws * n) as f64;
    for row in recon_terms.iter_mut() {
        row.iter_mut().for_each(|v| *v /= denom);
    }
    let mut acc = 0.0;
    for c in 0..nc {
        acc += recon_terms[c].iter().sum::<f64>() - kl_terms[c];
    }
    let total = acc / nc as f64;

    let draw_totals = (0..draws)
        .map(|m| {
            (0..nc)
                .map(|c| draw_recon[c][m] - kl_terms[c])
                .sum::<f64>()
                / nc as f64
        })
        .collect();

    Ok((
        ElboBreakdown {
            total,
            recon_terms,
            kl_terms,
            draw_totals,
        },
        grads,
    ))
}
