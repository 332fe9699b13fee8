//! Multi- and single-channel reconstruction and its error.

use serde::{Deserialize, Serialize};

use crate::elbo::check_batch;
use crate::error::{Error, Result};
use crate::linalg::{matmul_bt, Matrix, SeededRng};
use crate::model::MultiChannelModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconMode {
    /// Average of the reconstructions from every encoding channel.
    Multi,
    /// Channel `i` reconstructed from its own encoder only.
    Single,
}

impl std::str::FromStr for ReconMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multi" => Ok(Self::Multi),
            "single" => Ok(Self::Single),
            other => Err(Error::InvalidArgument(format!(
                "unknown reconstruction mode {other:?} (expected multi or single)"
            ))),
        }
    }
}

/// Reconstructs every channel from the posterior means. Because decoders
/// are linear, decoding the posterior mean equals the expected decoded
/// mean under `q`.
pub fn reconstruct(
    model: &MultiChannelModel,
    channels: &[Matrix],
    mode: ReconMode,
) -> Result<Vec<Matrix>> {
    check_batch(model, channels)?;
    let nc = model.num_channels();
    let codes = (0..nc)
        .map(|c| model.encode(c, &channels[c]).map(|q| q.mu))
        .collect::<Result<Vec<_>>>()?;
    (0..nc)
        .map(|i| {
            let g = &model.theta[i].g_mu;
            match mode {
                ReconMode::Single => matmul_bt(&codes[i], g),
                ReconMode::Multi => {
                    let mut avg = Matrix::zeros(channels[i].rows(), channels[i].cols());
                    for z in &codes {
                        avg.add_scaled(&matmul_bt(z, g)?, 1.0 / nc as f64);
                    }
                    Ok(avg)
                }
            }
        })
        .collect()
}

/// Monte-Carlo version of [`reconstruct`]: decodes `draws` reparameterized
/// samples per encoder and averages the decoded means.
pub fn reconstruct_sampled(
    model: &MultiChannelModel,
    channels: &[Matrix],
    mode: ReconMode,
    draws: usize,
    rng: &mut SeededRng,
) -> Result<Vec<Matrix>> {
    check_batch(model, channels)?;
    if draws == 0 {
        return Err(Error::InvalidArgument("draws must be at least 1".into()));
    }
    let nc = model.num_channels();
    let n = channels[0].rows();
    let l = model.latent_dim;
    let encoders: Vec<usize> = (0..nc).collect();
    let mut out: Vec<Matrix> = channels.iter().map(|x| Matrix::zeros(n, x.cols())).collect();
    for &c in &encoders {
        let q = model.encode(c, &channels[c])?;
        let sigma = q.sigma();
        for _ in 0..draws {
            let mut z = Matrix::zeros(n, l);
            for k in 0..n {
                for j in 0..l {
                    z.set(k, j, q.mu.get(k, j) + sigma.get(k, j) * rng.standard_normal());
                }
            }
            for (i, acc) in out.iter_mut().enumerate() {
                let weight = match mode {
                    ReconMode::Multi => 1.0 / (nc * draws) as f64,
                    ReconMode::Single if i == c => 1.0 / draws as f64,
                    ReconMode::Single => continue,
                };
                acc.add_scaled(&matmul_bt(&z, &model.theta[i].g_mu)?, weight);
            }
        }
    }
    Ok(out)
}

/// Mean over all entries of the squared difference.
pub fn mse(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "mse of {}x{} and {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let n = a.as_slice().len();
    if n == 0 {
        return Err(Error::InvalidArgument("mse of empty matrices".into()));
    }
    let s: f64 = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(s / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconTarget {
    Observed,
    /// Noiseless ground-truth signal.
    Signal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconReport {
    pub target: ReconTarget,
    pub channel_names: Vec<String>,
    pub multi_mse: Vec<f64>,
    pub single_mse: Vec<f64>,
    /// `multi / single`; absent when the single-channel error is zero.
    pub ratio: Vec<Option<f64>>,
}

impl ReconReport {
    pub fn mean_ratio(&self) -> Option<f64> {
        let r: Vec<f64> = self.ratio.iter().flatten().copied().collect();
        (!r.is_empty()).then(|| r.iter().sum::<f64>() / r.len() as f64)
    }
}

/// Reconstructs `inputs` both ways and scores against `targets`.
pub fn recon_report(
    model: &MultiChannelModel,
    inputs: &[Matrix],
    targets: &[Matrix],
    target: ReconTarget,
) -> Result<ReconReport> {
    let multi = reconstruct(model, inputs, ReconMode::Multi)?;
    let single = reconstruct(model, inputs, ReconMode::Single)?;
    if targets.len() != multi.len() {
        return Err(Error::Shape(format!(
            "{} targets for {} channels",
            targets.len(),
            multi.len()
        )));
    }
    let multi_mse = multi
        .iter()
        .zip(targets)
        .map(|(a, b)| mse(a, b))
        .collect::<Result<Vec<_>>>()?;
    let single_mse = single
        .iter()
        .zip(targets)
        .map(|(a, b)| mse(a, b))
        .collect::<Result<Vec<_>>>()?;
    let ratio = multi_mse
        .iter()
        .zip(&single_mse)
        .map(|(m, s)| (*s > 0.0).then(|| m / s))
        .collect();
    Ok(ReconReport {
        target,
        channel_names: model.channels.iter().map(|c| c.name.clone()).collect(),
        multi_mse,
        single_mse,
        ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{matmul, standard_normal_matrix};
    use crate::synthetic::{generate_with_noise_scale, ScenarioSpec};

    #[test]
    fn mse_cases() {
        let mut rng = SeededRng::new(1);
        let a = standard_normal_matrix(&mut rng, 4, 3).unwrap();
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        let b = a.map(|v| v + 1.0);
        assert!((mse(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        let c = standard_normal_matrix(&mut rng, 4, 3).unwrap();
        let mut want = 0.0;
        for i in 0..4 {
            for j in 0..3 {
                want += (a.get(i, j) - c.get(i, j)).powi(2);
            }
        }
        assert!((mse(&a, &c).unwrap() - want / 12.0).abs() < 1e-12);
        assert_eq!(mse(&a, &c).unwrap(), mse(&c, &a).unwrap());
        assert!(mse(&a, &Matrix::zeros(3, 4)).is_err());
    }

    #[test]
    fn single_channel_modes_agree() {
        let mut rng = SeededRng::new(2);
        let model = MultiChannelModel::init(&mut rng, 2, &[4], 0.5).unwrap();
        let x = vec![standard_normal_matrix(&mut rng, 6, 4).unwrap()];
        let m = reconstruct(&model, &x, ReconMode::Multi).unwrap();
        let s = reconstruct(&model, &x, ReconMode::Single).unwrap();
        assert!(m[0].max_abs_diff(&s[0]) < 1e-15);
    }

    #[test]
    fn exact_recovery_on_noiseless_data() {
        let spec = ScenarioSpec {
            channels: 3,
            dim: 6,
            latent_dim: 2,
            samples: 50,
            snr: 10.0,
            replication: 1,
        };
        let ds = generate_with_noise_scale(&spec, 0.0).unwrap();
        let mut model = MultiChannelModel::init(&mut SeededRng::new(0), 2, &[6, 6, 6], 0.1).unwrap();
        for c in 0..3 {
            let g = &ds.maps[c];
            // left pseudo-inverse (Gᵀ G)⁻¹ Gᵀ
            let gtg = matmul(&g.transpose(), g).unwrap();
            let inv = crate::linalg::Cholesky::new(&gtg).unwrap().inverse();
            model.theta[c].g_mu = g.clone();
            model.phi[c].v_mu = matmul(&inv, &g.transpose()).unwrap();
        }
        for mode in [ReconMode::Multi, ReconMode::Single] {
            let rec = reconstruct(&model, &ds.channels, mode).unwrap();
            for (r, s) in rec.iter().zip(&ds.signals) {
                assert!(mse(r, s).unwrap() < 1e-6);
            }
        }
    }

    #[test]
    fn plug_in_matches_sampled_average() {
        let mut rng = SeededRng::new(3);
        let model = MultiChannelModel::init(&mut rng, 2, &[3, 2], 0.6).unwrap();
        let x = vec![
            standard_normal_matrix(&mut rng, 2, 3).unwrap(),
            standard_normal_matrix(&mut rng, 2, 2).unwrap(),
        ];
        let plug = reconstruct(&model, &x, ReconMode::Multi).unwrap();
        // spread of one decoded draw bounds the standard error
        let draws = 20_000;
        let sampled =
            reconstruct_sampled(&model, &x, ReconMode::Multi, draws, &mut SeededRng::new(4)).unwrap();
        for i in 0..2 {
            let g = &model.theta[i].g_mu;
            let mut sd = 0.0f64;
            for c in 0..2 {
                let s = model.encode(c, &x[c]).unwrap().sigma();
                for k in 0..2 {
                    for j in 0..g.rows() {
                        let v: f64 = (0..2).map(|t| (g.get(j, t) * s.get(k, t)).powi(2)).sum();
                        sd = sd.max(v.sqrt());
                    }
                }
            }
            let se = sd / ((2 * draws) as f64).sqrt();
            assert!(plug[i].max_abs_diff(&sampled[i]) < 3.0 * se + 1e-12);
        }
    }

    #[test]
    fn report_ratios() {
        let mut rng = SeededRng::new(5);
        let model = MultiChannelModel::init(&mut rng, 1, &[2, 2], 0.5).unwrap();
        let x = vec![
            standard_normal_matrix(&mut rng, 5, 2).unwrap(),
            standard_normal_matrix(&mut rng, 5, 2).unwrap(),
        ];
        let r = recon_report(&model, &x, &x, ReconTarget::Observed).unwrap();
        for k in 0..2 {
            assert!((r.ratio[k].unwrap() - r.multi_mse[k] / r.single_mse[k]).abs() < 1e-15);
        }
        assert!("triple".parse::<ReconMode>().is_err());
    }
}
