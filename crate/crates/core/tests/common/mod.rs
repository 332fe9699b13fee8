//! Helpers shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use mcvi::elbo::{channel_stream_seed, elbo_batch, elbo_gradients, LN_2PI};
use mcvi::linalg::standard_normal_matrix;
use mcvi::{Matrix, MultiChannelModel, SeededRng};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// A random model with non-trivial log-variances, and a batch for it.
pub fn random_problem(seed: u64, l: usize, dims: &[usize], n: usize) -> (MultiChannelModel, Vec<Matrix>) {
    let mut rng = SeededRng::new(seed);
    let mut model = MultiChannelModel::init(&mut rng, l, dims, 0.4).unwrap();
    for (th, ph) in model.theta.iter_mut().zip(model.phi.iter_mut()) {
        for v in th.g_logvar.iter_mut() {
            *v = 0.5 * rng.standard_normal();
        }
        for v in ph.v_logvar_bias.iter_mut() {
            *v = 0.5 * rng.standard_normal();
        }
    }
    let batch = dims
        .iter()
        .map(|&d| standard_normal_matrix(&mut rng, n, d).unwrap())
        .collect();
    (model, batch)
}

/// Relative error with a small absolute floor, so that gradients that are
/// zero up to rounding compare as equal.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Largest relative error between the analytic gradient and central finite
/// differences of the fixed-seed bound, over every parameter.
pub fn max_gradient_error(model: &MultiChannelModel, batch: &[Matrix], seed: u64, mc: usize) -> f64 {
    let (_, grads) = elbo_gradients(model, batch, seed, mc).unwrap();
    let analytic: Vec<f64> = grads.tensors().into_iter().flatten().copied().collect();
    let h = 1e-5;
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    let mut flat = 0;
    let sizes: Vec<usize> = model.tensors().iter().map(|t| t.len()).collect();
    for (t, &size) in sizes.iter().enumerate() {
        for i in 0..size {
            let orig = probe.tensors()[t][i];
            probe.tensors_mut()[t][i] = orig + h;
            let up = elbo_batch(&probe, batch, seed, mc).unwrap().total;
            probe.tensors_mut()[t][i] = orig - h;
            let down = elbo_batch(&probe, batch, seed, mc).unwrap().total;
            probe.tensors_mut()[t][i] = orig;
            let fd = (up - down) / (2.0 * h);
            worst = worst.max(relative_error(analytic[flat], fd));
            flat += 1;
        }
    }
    worst
}

/// Single-channel VAE bound written from scratch on plain vectors: linear
/// Gaussian encoder with a log-variance bias, linear Gaussian decoder with a
/// diagonal variance, reparameterized draws from a ChaCha8 stream, analytic
/// KL to the standard normal prior, averaged over samples and draws.
pub fn reference_vae_bound(model: &MultiChannelModel, x: &Matrix, seed: u64, draws: usize) -> f64 {
    assert_eq!(model.num_channels(), 1);
    let floor = 1e-12;
    let (n, d) = (x.rows(), x.cols());
    let l = model.latent_dim;
    let th = &model.theta[0];
    let ph = &model.phi[0];
    let dot = |a: &[f64], b: &[f64]| {
        let mut s = 0.0;
        for (u, v) in a.iter().zip(b) {
            s += u * v;
        }
        s
    };

    let mut mu = vec![vec![0.0; l]; n];
    let mut sd = vec![vec![0.0; l]; n];
    for k in 0..n {
        for j in 0..l {
            mu[k][j] = dot(x.row(k), ph.v_mu.row(j));
            let lv = dot(x.row(k), ph.v_logvar.row(j)) + ph.v_logvar_bias[j];
            sd[k][j] = (0.5 * lv).exp().max(floor);
        }
    }

    let mut kl_sum = 0.0;
    for k in 0..n {
        let mut kl_k = 0.0;
        for j in 0..l {
            let s2 = sd[k][j] * sd[k][j];
            kl_k += 0.5 * (mu[k][j] * mu[k][j] + s2 - 1.0 - s2.ln());
        }
        kl_sum += kl_k;
    }
    let kl = kl_sum / n as f64;

    let var: Vec<f64> = th.g_logvar.iter().map(|v| v.exp().max(floor)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(channel_stream_seed(seed, &model.channels[0].name));
    let mut recon = 0.0;
    for _ in 0..draws {
        let eps: Vec<f64> = (0..n * l).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut ll_sum = 0.0;
        for k in 0..n {
            let z: Vec<f64> = (0..l).map(|j| mu[k][j] + sd[k][j] * eps[k * l + j]).collect();
            let mut ll_k = 0.0;
            for j in 0..d {
                let r = x.get(k, j) - dot(&z, th.g_mu.row(j));
                ll_k += -0.5 * LN_2PI - 0.5 * var[j].ln() - r * r / (2.0 * var[j]);
            }
            ll_sum += ll_k;
        }
        recon += ll_sum;
    }
    recon / (draws * n) as f64 - kl
}
