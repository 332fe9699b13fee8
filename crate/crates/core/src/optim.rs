//! Minibatch stochastic gradient ascent on the bound with Adam.

use std::time::Instant;

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::elbo::{check_batch, elbo_batch, elbo_gradients};
use crate::error::{Error, Result};
use crate::linalg::{derive_seed, Matrix, SeededRng};
use crate::model::{MultiChannelModel, DEFAULT_INIT_SCALE};

const INIT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;
const STEP_STREAM: u64 = 3;
const EVAL_STREAM: u64 = 4;
const VALID_STREAM: u64 = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    /// `None` means `min(64, S)`.
    pub batch_size: Option<usize>,
    pub epochs: usize,
    pub mc_samples: usize,
    /// Draws used for the final full-data bound.
    pub eval_mc_samples: usize,
    pub init_scale: f64,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            batch_size: None,
            epochs: 1000,
            mc_samples: 1,
            eval_mc_samples: 16,
            init_scale: DEFAULT_INIT_SCALE,
            seed: 0,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be >= 0", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("{name} {b} must lie in (0, 1)"));
            }
        }
        if !(self.eps_adam > 0.0) {
            return bad(format!("eps_adam {} must be > 0", self.eps_adam));
        }
        if self.batch_size == Some(0) {
            return bad("batch_size must be at least 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.mc_samples == 0 || self.eval_mc_samples == 0 {
            return bad("mc_samples must be at least 1".into());
        }
        if !(self.init_scale > 0.0) {
            return bad(format!("init_scale {} must be > 0", self.init_scale));
        }
        Ok(())
    }

    pub fn resolved_batch_size(&self, samples: usize) -> usize {
        self.batch_size.unwrap_or(64).min(samples).max(1)
    }

    /// Seed used to initialize a model trained under this config.
    pub fn init_seed(&self) -> u64 {
        derive_seed(&[self.seed, INIT_STREAM])
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(shapes: &[usize]) -> Self {
        Self {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_model(model: &MultiChannelModel) -> Self {
        let shapes: Vec<usize> = model.tensors().iter().map(|t| t.len()).collect();
        Self::new(&shapes)
    }
}

/// One bias-corrected Adam update at step `t` (1-based), moving the
/// parameters up the gradient.
pub fn adam_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut AdamState,
    t: u64,
    cfg: &TrainConfig,
) -> Result<()> {
    if t == 0 {
        return Err(Error::InvalidArgument("Adam step index starts at 1".into()));
    }
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "{} parameter tensors, {} gradients, {} state buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (k, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[k].len() {
            return Err(Error::Shape(format!(
                "tensor {k}: parameter length {}, gradient length {}, state length {}",
                p.len(),
                g.len(),
                state.m[k].len()
            )));
        }
    }
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for j in 0..p.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] += cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps_adam);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// Per-epoch mean minibatch NLB.
    pub train_nlb: Vec<f64>,
    pub validation_nlb: Option<Vec<f64>>,
    /// Full-data NLB of the final model with `eval_mc_samples` draws.
    pub final_nlb: f64,
    pub final_nlb_stderr: f64,
    pub epochs: usize,
    pub steps: u64,
    pub wall_time_secs: f64,
}

/// Trains `model` in place on sample-aligned channel matrices.
pub fn fit(
    model: &mut MultiChannelModel,
    data: &[Matrix],
    cfg: &TrainConfig,
    validation: Option<&[Matrix]>,
) -> Result<FitReport> {
    cfg.validate()?;
    let samples = check_batch(model, data)?;
    if let Some(v) = validation {
        check_batch(model, v)?;
    }
    let batch_size = cfg.resolved_batch_size(samples);
    let start = Instant::now();

    let mut shuffle_rng = SeededRng::new(derive_seed(&[cfg.seed, SHUFFLE_STREAM]));
    let mut state = AdamState::for_model(model);
    let mut step: u64 = 0;
    let mut train_nlb = Vec::with_capacity(cfg.epochs);
    let mut validation_nlb = validation.map(|_| Vec::with_capacity(cfg.epochs));
    let mut last_finite = None;

    for epoch in 0..cfg.epochs {
        let order = shuffle_rng.permutation(samples);
        let mut epoch_sum = 0.0;
        for idx in order.chunks(batch_size) {
            step += 1;
            let batch: Vec<Matrix> = data.iter().map(|x| x.select_rows(idx)).collect();
            let seed = derive_seed(&[cfg.seed, STEP_STREAM, step]);
            let (bound, grads) = elbo_gradients(model, &batch, seed, cfg.mc_samples)?;
            if !bound.total.is_finite() || !grads.is_finite() {
                return Err(Error::Diverged { epoch, last_finite });
            }
            epoch_sum += bound.nlb() * idx.len() as f64;
            let mut params = model.tensors_mut();
            adam_step(&mut params, &grads.tensors(), &mut state, step, cfg)?;
        }
        if !model.tensors().iter().all(|t| t.iter().all(|v| v.is_finite())) {
            return Err(Error::Diverged { epoch, last_finite });
        }
        let nlb = epoch_sum / samples as f64;
        train_nlb.push(nlb);
        if let (Some(v), Some(trace)) = (validation, validation_nlb.as_mut()) {
            let seed = derive_seed(&[cfg.seed, VALID_STREAM, epoch as u64]);
            trace.push(elbo_batch(model, v, seed, cfg.mc_samples)?.nlb());
        }
        last_finite = Some(epoch);
        if cfg.log_every > 0 && (epoch + 1) % cfg.log_every == 0 {
            debug!("epoch {:>6}  train NLB {:.6}", epoch + 1, nlb);
        }
    }

    let eval = elbo_batch(
        model,
        data,
        derive_seed(&[cfg.seed, EVAL_STREAM]),
        cfg.eval_mc_samples,
    )?;
    if !eval.total.is_finite() {
        return Err(Error::Diverged {
            epoch: cfg.epochs,
            last_finite,
        });
    }
    let report = FitReport {
        train_nlb,
        validation_nlb,
        final_nlb: eval.nlb(),
        final_nlb_stderr: eval.mc_stderr(),
        epochs: cfg.epochs,
        steps: step,
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    info!(
        "fit l={} finished: {} epochs, final NLB {:.6} ± {:.2e}",
        model.latent_dim, report.epochs, report.final_nlb, report.final_nlb_stderr
    );
    Ok(report)
}

/// Initializes a model from `cfg` and trains it.
pub fn fit_new(
    latent_dim: usize,
    data: &[Matrix],
    names: &[String],
    cfg: &TrainConfig,
    validation: Option<&[Matrix]>,
) -> Result<(MultiChannelModel, FitReport)> {
    cfg.validate()?;
    let dims: Vec<usize> = data.iter().map(Matrix::cols).collect();
    let mut rng = SeededRng::new(cfg.init_seed());
    let mut model = MultiChannelModel::init_named(&mut rng, latent_dim, &dims, names, cfg.init_scale)?;
    let report = fit(&mut model, data, cfg, validation)?;
    Ok((model, report))
}

pub fn default_names(count: usize) -> Vec<String> {
    (0..count).map(|i| format!("channel_{i}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::standard_normal_matrix;

    fn cfg() -> TrainConfig {
        TrainConfig {
            learning_rate: 0.1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![1.0, -2.0];
        let mut state = AdamState::new(&[2]);
        adam_step(&mut [&mut p], &[&[0.0, 0.0]], &mut state, 1, &cfg()).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn first_step_has_learning_rate_magnitude() {
        for g in [3.0, -0.02, 1e3] {
            let mut p = vec![0.0];
            let mut state = AdamState::new(&[1]);
            adam_step(&mut [&mut p], &[&[g]], &mut state, 1, &cfg()).unwrap();
            assert!((p[0].abs() - 0.1).abs() < 1e-6, "{g}: {}", p[0]);
            assert_eq!(p[0].signum(), g.signum());
        }
    }

    #[test]
    fn matches_scalar_adam_trajectory() {
        // ascend f(w) = -w², gradient -2w
        let c = cfg();
        let (mut w_ref, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        let mut p = vec![1.0];
        let mut state = AdamState::new(&[1]);
        for t in 1..=100u64 {
            let g = -2.0 * w_ref;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t as i32));
            let vh = v / (1.0 - 0.999f64.powi(t as i32));
            w_ref += 0.1 * mh / (vh.sqrt() + 1e-8);

            let grad = [-2.0 * p[0]];
            adam_step(&mut [&mut p], &[&grad], &mut state, t, &c).unwrap();
            assert!((p[0] - w_ref).abs() < 1e-10, "step {t}");
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = vec![0.0; 3];
        let mut state = AdamState::new(&[3]);
        assert!(adam_step(&mut [&mut p], &[&[0.0; 2]], &mut state, 1, &cfg()).is_err());
        assert!(adam_step(&mut [&mut p], &[&[0.0; 3]], &mut state, 0, &cfg()).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { beta1: 1.0, ..Default::default() },
            TrainConfig { epochs: 0, ..Default::default() },
            TrainConfig { batch_size: Some(0), ..Default::default() },
            TrainConfig { learning_rate: -1.0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
        let parsed: std::result::Result<TrainConfig, _> =
            serde_json::from_str(r#"{"learning_rte": 0.1}"#);
        assert!(parsed.is_err());
    }

    fn toy_data(seed: u64) -> Vec<Matrix> {
        let mut rng = SeededRng::new(seed);
        let z = standard_normal_matrix(&mut rng, 40, 1).unwrap();
        [3usize, 2]
            .iter()
            .map(|&d| {
                let g = standard_normal_matrix(&mut rng, d, 1).unwrap();
                let noise = standard_normal_matrix(&mut rng, 40, d).unwrap().scale(0.3);
                crate::linalg::matmul_bt(&z, &g).unwrap().add(&noise).unwrap()
            })
            .collect()
    }

    #[test]
    fn fit_is_deterministic() {
        let data = toy_data(1);
        let c = TrainConfig {
            epochs: 20,
            batch_size: Some(16),
            learning_rate: 0.01,
            ..Default::default()
        };
        let names = default_names(2);
        let (a, ra) = fit_new(1, &data, &names, &c, None).unwrap();
        let (b, rb) = fit_new(1, &data, &names, &c, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra.train_nlb, rb.train_nlb);
        assert_eq!(ra.train_nlb.len(), 20);
        assert_eq!(ra.steps, 20 * 3);
    }

    #[test]
    fn zero_learning_rate_keeps_model() {
        let data = toy_data(2);
        let c = TrainConfig {
            epochs: 30,
            learning_rate: 0.0,
            ..Default::default()
        };
        let mut rng = SeededRng::new(c.init_seed());
        let mut model = MultiChannelModel::init(&mut rng, 1, &[3, 2], 0.1).unwrap();
        let before = model.clone();
        let r = fit(&mut model, &data, &c, Some(&data)).unwrap();
        assert_eq!(model, before);
        let first = r.train_nlb[0];
        assert!(r.train_nlb.iter().all(|v| (v - first).abs() < 0.5));
        assert_eq!(r.validation_nlb.unwrap().len(), 30);
    }

    #[test]
    fn nlb_trends_down() {
        let data = toy_data(3);
        let c = TrainConfig {
            epochs: 300,
            learning_rate: 0.01,
            batch_size: Some(8),
            ..Default::default()
        };
        let (_, r) = fit_new(1, &data, &default_names(2), &c, None).unwrap();
        let head: f64 = r.train_nlb[..50].iter().sum::<f64>() / 50.0;
        let tail: f64 = r.train_nlb[250..].iter().sum::<f64>() / 50.0;
        assert!(tail < head, "{tail} !< {head}");
    }

    #[test]
    fn divergence_is_reported() {
        let mut data = toy_data(4);
        data[0] = data[0].scale(1e200);
        let c = TrainConfig {
            epochs: 5,
            learning_rate: 0.5,
            ..Default::default()
        };
        match fit_new(1, &data, &default_names(2), &c, None) {
            Err(Error::Diverged { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let data = toy_data(5);
        let mut rng = SeededRng::new(0);
        let mut model = MultiChannelModel::init(&mut rng, 1, &[3, 3], 0.1).unwrap();
        assert!(fit(&mut model, &data, &TrainConfig::default(), None).is_err());
    }
}
