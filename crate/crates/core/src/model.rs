//! Gaussian-linear multi-channel model.
//!
//! Each channel `c` has a decoder `p(x_c | z) = N(G_c z, diag(exp(g_c)))` and
//! an encoder `q(z | x_c) = N(V_c x_c, diag(exp(W_c x_c + b_c)))`. Variances
//! are stored as log-variances so gradient steps can never make them
//! negative.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{matmul_bt, standard_normal_matrix, Matrix, SeededRng};

/// Lower clamp applied to every standard deviation and variance.
pub const SIGMA_FLOOR: f64 = 1e-12;

/// Default standard deviation of initial weights.
pub const DEFAULT_INIT_SCALE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub index: usize,
    pub dim: usize,
    pub name: String,
}

/// Decoder parameters of one channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerativeParams {
    /// `d_c x l` mean map.
    pub g_mu: Matrix,
    /// Per-feature log noise variance.
    pub g_logvar: Vec<f64>,
}

/// Encoder parameters of one channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariationalParams {
    /// `l x d_c` mean map.
    pub v_mu: Matrix,
    /// `l x d_c` map producing the posterior log-variance.
    pub v_logvar: Matrix,
    /// Per-latent offset added to the posterior log-variance.
    pub v_logvar_bias: Vec<f64>,
}

impl GenerativeParams {
    pub fn zeros(dim: usize, latent_dim: usize) -> Self {
        Self {
            g_mu: Matrix::zeros(dim, latent_dim),
            g_logvar: vec![0.0; dim],
        }
    }

    pub fn variance(&self) -> Vec<f64> {
        self.g_logvar
            .iter()
            .map(|v| v.exp().max(SIGMA_FLOOR))
            .collect()
    }
}

impl VariationalParams {
    pub fn zeros(dim: usize, latent_dim: usize) -> Self {
        Self {
            v_mu: Matrix::zeros(latent_dim, dim),
            v_logvar: Matrix::zeros(latent_dim, dim),
            v_logvar_bias: vec![0.0; latent_dim],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiChannelModel {
    pub latent_dim: usize,
    pub channels: Vec<ChannelSpec>,
    pub theta: Vec<GenerativeParams>,
    pub phi: Vec<VariationalParams>,
}

/// Diagonal Gaussian over the latent space for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGaussian {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl LatentGaussian {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if mu.len() != sigma.len() {
            return Err(Error::Shape(format!(
                "latent mean of length {} with sigma of length {}",
                mu.len(),
                sigma.len()
            )));
        }
        if sigma.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidArgument("sigma must be positive and finite".into()));
        }
        Ok(Self { mu, sigma })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Encoder output for a batch: one row per sample.
#[derive(Clone, Debug)]
pub struct LatentBatch {
    pub mu: Matrix,
    pub log_var: Matrix,
}

impl LatentBatch {
    pub fn len(&self) -> usize {
        self.mu.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.rows() == 0
    }

    /// Standard deviations, floored at [`SIGMA_FLOOR`].
    pub fn sigma(&self) -> Matrix {
        self.log_var.map(|lv| (0.5 * lv).exp().max(SIGMA_FLOOR))
    }

    pub fn get(&self, k: usize) -> LatentGaussian {
        let sigma = self
            .log_var
            .row(k)
            .iter()
            .map(|lv| (0.5 * lv).exp().max(SIGMA_FLOOR))
            .collect();
        LatentGaussian {
            mu: self.mu.row(k).to_vec(),
            sigma,
        }
    }
}

/// Decoder output for a batch: per-sample means and the shared variance.
#[derive(Clone, Debug)]
pub struct Decoded {
    pub mean: Matrix,
    pub variance: Vec<f64>,
}

impl MultiChannelModel {
    /// Random initialization: weights i.i.d. `N(0, init_scale^2)`,
    /// log-variances zero.
    pub fn init(
        rng: &mut SeededRng,
        latent_dim: usize,
        channel_dims: &[usize],
        init_scale: f64,
    ) -> Result<Self> {
        let names: Vec<String> = (0..channel_dims.len()).map(|i| format!("channel_{i}")).collect();
        Self::init_named(rng, latent_dim, channel_dims, &names, init_scale)
    }

    pub fn init_named(
        rng: &mut SeededRng,
        latent_dim: usize,
        channel_dims: &[usize],
        names: &[String],
        init_scale: f64,
    ) -> Result<Self> {
        if channel_dims.is_empty() {
            return Err(Error::InvalidArgument("model needs at least one channel".into()));
        }
        if latent_dim == 0 {
            return Err(Error::InvalidArgument("latent dimension must be at least 1".into()));
        }
        if !(init_scale > 0.0 && init_scale.is_finite()) {
            return Err(Error::InvalidArgument(format!("init_scale {init_scale} must be > 0")));
        }
        if names.len() != channel_dims.len() {
            return Err(Error::InvalidArgument("one name per channel required".into()));
        }
        let mut channels = Vec::with_capacity(channel_dims.len());
        let mut theta = Vec::with_capacity(channel_dims.len());
        let mut phi = Vec::with_capacity(channel_dims.len());
        for (index, (&dim, name)) in channel_dims.iter().zip(names).enumerate() {
            if dim == 0 {
                return Err(Error::InvalidArgument(format!("channel {name} has dimension 0")));
            }
            channels.push(ChannelSpec {
                index,
                dim,
                name: name.clone(),
            });
            theta.push(GenerativeParams {
                g_mu: standard_normal_matrix(rng, dim, latent_dim)?.scale(init_scale),
                g_logvar: vec![0.0; dim],
            });
            phi.push(VariationalParams {
                v_mu: standard_normal_matrix(rng, latent_dim, dim)?.scale(init_scale),
                v_logvar: standard_normal_matrix(rng, latent_dim, dim)?.scale(init_scale),
                v_logvar_bias: vec![0.0; latent_dim],
            });
        }
        let model = Self {
            latent_dim,
            channels,
            theta,
            phi,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn channel_dims(&self) -> Vec<usize> {
        self.channels.iter().map(|c| c.dim).collect()
    }

    /// Checks every structural invariant; used after deserialization.
    pub fn validate(&self) -> Result<()> {
        let l = self.latent_dim;
        if l == 0 {
            return Err(Error::InvalidArgument("latent dimension must be at least 1".into()));
        }
        if self.channels.is_empty() {
            return Err(Error::InvalidArgument("model has no channels".into()));
        }
        if self.theta.len() != self.channels.len() || self.phi.len() != self.channels.len() {
            return Err(Error::Shape("parameter lists do not match channel count".into()));
        }
        let mut names = HashSet::new();
        for (i, ch) in self.channels.iter().enumerate() {
            let bad = |message: String| Error::Channel {
                channel: ch.name.clone(),
                message,
            };
            if ch.index != i {
                return Err(bad(format!("index {} at position {i}", ch.index)));
            }
            if !names.insert(ch.name.as_str()) {
                return Err(bad("duplicate channel name".into()));
            }
            if ch.dim == 0 {
                return Err(bad("dimension 0".into()));
            }
            let th = &self.theta[i];
            let ph = &self.phi[i];
            if th.g_mu.shape() != (ch.dim, l) || th.g_logvar.len() != ch.dim {
                return Err(bad("generative parameter shapes".into()));
            }
            if ph.v_mu.shape() != (l, ch.dim)
                || ph.v_logvar.shape() != (l, ch.dim)
                || ph.v_logvar_bias.len() != l
            {
                return Err(bad("variational parameter shapes".into()));
            }
            if !self.tensors_of(i).iter().all(|t| t.iter().all(|v| v.is_finite())) {
                return Err(bad("non-finite parameter".into()));
            }
        }
        Ok(())
    }

    fn check_channel(&self, c: usize) -> Result<&ChannelSpec> {
        self.channels
            .get(c)
            .ok_or_else(|| Error::InvalidArgument(format!("no channel with index {c}")))
    }

    /// Posterior moments `q(z | x_c)` for every row of `x`.
    pub fn encode(&self, c: usize, x: &Matrix) -> Result<LatentBatch> {
        let ch = self.check_channel(c)?;
        if x.cols() != ch.dim {
            return Err(Error::Channel {
                channel: ch.name.clone(),
                message: format!("input width {} but channel dimension {}", x.cols(), ch.dim),
            });
        }
        let ph = &self.phi[c];
        let mu = matmul_bt(x, &ph.v_mu)?;
        let mut log_var = matmul_bt(x, &ph.v_logvar)?;
        for k in 0..log_var.rows() {
            for (v, b) in log_var.row_mut(k).iter_mut().zip(&ph.v_logvar_bias) {
                *v += b;
            }
        }
        Ok(LatentBatch { mu, log_var })
    }

    /// Likelihood moments `p(x_i | z)` for every row of `z`.
    pub fn decode(&self, i: usize, z: &Matrix) -> Result<Decoded> {
        let ch = self.check_channel(i)?;
        if z.cols() != self.latent_dim {
            return Err(Error::Channel {
                channel: ch.name.clone(),
                message: format!("latent width {} but model has {}", z.cols(), self.latent_dim),
            });
        }
        let th = &self.theta[i];
        Ok(Decoded {
            mean: matmul_bt(z, &th.g_mu)?,
            variance: th.variance(),
        })
    }

    fn tensors_of(&self, c: usize) -> [&[f64]; 5] {
        let th = &self.theta[c];
        let ph = &self.phi[c];
        [
            th.g_mu.as_slice(),
            &th.g_logvar,
            ph.v_mu.as_slice(),
            ph.v_logvar.as_slice(),
            &ph.v_logvar_bias,
        ]
    }

    /// Flat views of all parameter tensors in a fixed order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        param_tensors(&self.theta, &self.phi)
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        param_tensors_mut(&mut self.theta, &mut self.phi)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        m.validate()?;
        Ok(m)
    }
}

pub(crate) fn param_tensors<'a>(
    theta: &'a [GenerativeParams],
    phi: &'a [VariationalParams],
) -> Vec<&'a [f64]> {
    theta
        .iter()
        .zip(phi)
        .flat_map(|(th, ph)| {
            [
                th.g_mu.as_slice(),
                th.g_logvar.as_slice(),
                ph.v_mu.as_slice(),
                ph.v_logvar.as_slice(),
                ph.v_logvar_bias.as_slice(),
            ]
        })
        .collect()
}

pub(crate) fn param_tensors_mut<'a>(
    theta: &'a mut [GenerativeParams],
    phi: &'a mut [VariationalParams],
) -> Vec<&'a mut [f64]> {
    theta
        .iter_mut()
        .zip(phi.iter_mut())
        .flat_map(|(th, ph)| {
            [
                th.g_mu.as_mut_slice(),
                th.g_logvar.as_mut_slice(),
                ph.v_mu.as_mut_slice(),
                ph.v_logvar.as_mut_slice(),
                ph.v_logvar_bias.as_mut_slice(),
            ]
        })
        .collect()
}

/// Draws `mu + sigma * eps` with `eps ~ N(0, I)`.
pub fn reparameterized_sample(rng: &mut SeededRng, q: &LatentGaussian) -> Vec<f64> {
    q.mu.iter()
        .zip(&q.sigma)
        .map(|(m, s)| m + s.max(SIGMA_FLOOR) * rng.standard_normal())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::matmul;
    use proptest::prelude::*;

    fn model(seed: u64, l: usize, dims: &[usize]) -> MultiChannelModel {
        MultiChannelModel::init(&mut SeededRng::new(seed), l, dims, 0.5).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let a = MultiChannelModel::init(&mut SeededRng::new(4), 4, &[6, 10], 0.1).unwrap();
        let b = MultiChannelModel::init(&mut SeededRng::new(4), 4, &[6, 10], 0.1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.theta[0].g_mu.shape(), (6, 4));
        assert_eq!(a.theta[1].g_mu.shape(), (10, 4));
        assert_eq!(a.phi[0].v_mu.shape(), (4, 6));
        assert_eq!(a.phi[1].v_mu.shape(), (4, 10));
        assert!(a.theta.iter().all(|t| t.g_logvar.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn init_weight_scale() {
        let m = MultiChannelModel::init(&mut SeededRng::new(8), 8, &[50, 50], 0.01).unwrap();
        let w: Vec<f64> = m
            .theta
            .iter()
            .flat_map(|t| t.g_mu.as_slice().iter().copied())
            .chain(m.phi.iter().flat_map(|p| p.v_mu.as_slice().iter().copied()))
            .chain(m.phi.iter().flat_map(|p| p.v_logvar.as_slice().iter().copied()))
            .collect();
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let sd = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((sd - 0.01).abs() < 0.002, "sd {sd}");
    }

    #[test]
    fn init_rejects_bad_arguments() {
        let mut rng = SeededRng::new(1);
        assert!(MultiChannelModel::init(&mut rng, 2, &[], 0.1).is_err());
        assert!(MultiChannelModel::init(&mut rng, 0, &[3], 0.1).is_err());
        assert!(MultiChannelModel::init(&mut rng, 2, &[3, 0], 0.1).is_err());
        assert!(MultiChannelModel::init(&mut rng, 2, &[3], 0.0).is_err());
    }

    #[test]
    fn encode_zero_input() {
        let m = model(1, 3, &[5]);
        let q = m.encode(0, &Matrix::zeros(2, 5)).unwrap();
        let g = q.get(1);
        assert_eq!(g.mu, vec![0.0; 3]);
        assert_eq!(g.sigma, vec![1.0; 3]);
    }

    #[test]
    fn encode_identity_map() {
        let mut m = model(2, 3, &[3]);
        m.phi[0].v_mu = Matrix::identity(3);
        let x = Matrix::from_rows(&[vec![0.3, -1.2, 4.0]]).unwrap();
        assert_eq!(m.encode(0, &x).unwrap().mu, x);
    }

    #[test]
    fn encode_decode_match_matmul() {
        let m = model(3, 3, &[4, 6]);
        let mut rng = SeededRng::new(30);
        let x = standard_normal_matrix(&mut rng, 5, 6).unwrap();
        let q = m.encode(1, &x).unwrap();
        let want_mu = matmul(&x, &m.phi[1].v_mu.transpose()).unwrap();
        let want_lv = matmul(&x, &m.phi[1].v_logvar.transpose()).unwrap();
        assert!(q.mu.max_abs_diff(&want_mu) < 1e-12);
        assert!(q.log_var.max_abs_diff(&want_lv) < 1e-12);

        let z = standard_normal_matrix(&mut rng, 5, 3).unwrap();
        let d = m.decode(0, &z).unwrap();
        let want = matmul(&z, &m.theta[0].g_mu.transpose()).unwrap();
        assert!(d.mean.max_abs_diff(&want) < 1e-12);
        assert_eq!(d.variance, vec![1.0; 4]);
        assert_eq!(
            m.decode(0, &Matrix::zeros(1, 3)).unwrap().mean,
            Matrix::zeros(1, 4)
        );
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let m = model(4, 2, &[3, 4]);
        assert!(m.encode(0, &Matrix::zeros(1, 4)).is_err());
        assert!(m.decode(1, &Matrix::zeros(1, 3)).is_err());
        assert!(m.encode(5, &Matrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn reparameterized_draws() {
        let q = LatentGaussian::new(vec![1.5, -2.0], vec![0.0f64.max(SIGMA_FLOOR); 2]).unwrap();
        let z = reparameterized_sample(&mut SeededRng::new(1), &q);
        assert!((z[0] - 1.5).abs() < 1e-10 && (z[1] + 2.0).abs() < 1e-10);

        let q = LatentGaussian::new(vec![0.7], vec![1.3]).unwrap();
        assert_eq!(
            reparameterized_sample(&mut SeededRng::new(9), &q),
            reparameterized_sample(&mut SeededRng::new(9), &q)
        );
        let mut rng = SeededRng::new(77);
        let n = 1_000_000;
        let draws: Vec<f64> = (0..n).map(|_| reparameterized_sample(&mut rng, &q)[0]).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((mean - 0.7).abs() < 0.01 * 0.7);
        assert!((var - 1.69).abs() < 0.01 * 1.69);
    }

    #[test]
    fn json_round_trip_is_exact() {
        let mut m = model(5, 3, &[4, 2]);
        m.theta[1].g_logvar = vec![-0.1234567890123456789, 1e-300];
        m.phi[0].v_logvar_bias[2] = std::f64::consts::PI;
        let back = MultiChannelModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(m, back);
        for (a, b) in m.tensors().iter().zip(back.tensors()) {
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn load_rejects_inconsistent_shapes() {
        let mut m = model(6, 2, &[3]);
        m.theta[0].g_logvar.push(0.0);
        let s = serde_json::to_string(&m).unwrap();
        assert!(MultiChannelModel::from_json(&s).is_err());
    }

    proptest! {
        #[test]
        fn mean_pathways_are_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let m = model(seed, 3, &[4]);
            let mut rng = SeededRng::new(seed ^ 1);
            let x = standard_normal_matrix(&mut rng, 2, 4).unwrap();
            let y = standard_normal_matrix(&mut rng, 2, 4).unwrap();
            let combo = x.scale(a).add(&y.scale(b)).unwrap();
            let lhs = m.encode(0, &combo).unwrap().mu;
            let rhs = m.encode(0, &x).unwrap().mu.scale(a)
                .add(&m.encode(0, &y).unwrap().mu.scale(b)).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs) < 1e-10);

            let z = standard_normal_matrix(&mut rng, 2, 3).unwrap();
            let w = standard_normal_matrix(&mut rng, 2, 3).unwrap();
            let zc = z.scale(a).add(&w.scale(b)).unwrap();
            let lhs = m.decode(0, &zc).unwrap().mean;
            let rhs = m.decode(0, &z).unwrap().mean.scale(a)
                .add(&m.decode(0, &w).unwrap().mean.scale(b)).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs) < 1e-10);
        }

        #[test]
        fn variances_are_positive(seed in any::<u64>(), shift in -600.0f64..600.0) {
            let mut m = model(seed, 2, &[3]);
            m.theta[0].g_logvar = vec![shift; 3];
            m.phi[0].v_logvar_bias = vec![shift; 2];
            let x = standard_normal_matrix(&mut SeededRng::new(seed), 3, 3).unwrap();
            let q = m.encode(0, &x).unwrap();
            prop_assert!(q.sigma().as_slice().iter().all(|s| *s > 0.0 && s.is_finite()));
            let d = m.decode(0, &q.mu).unwrap();
            prop_assert!(d.variance.iter().all(|v| *v > 0.0 && v.is_finite()));
        }
    }
}
