//! Linearly generated synthetic multi-channel data and the one-at-a-time
//! scenario grid.
//!
//! For each channel a random `d x l` matrix with orthonormal columns `R_c` is
//! drawn, its rows are rescaled to unit norm to give `G_c`, and
//! `x_c = G_c z + snr^{-1/2} ε` with `z ~ N(0, I_l)`, `ε ~ N(0, I_d)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluate::LinearGaussian;
use crate::linalg::{
    derive_seed, matmul_bt, orthonormalize_columns, standard_normal_matrix, Matrix, SeededRng,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub channels: usize,
    pub dim: usize,
    pub latent_dim: usize,
    pub samples: usize,
    pub snr: f64,
    #[serde(default = "first_replication")]
    pub replication: usize,
}

fn first_replication() -> usize {
    1
}

impl Default for ScenarioSpec {
    /// Central value of every attribute range.
    fn default() -> Self {
        Self {
            channels: 3,
            dim: 16,
            latent_dim: 4,
            samples: 1000,
            snr: 10.0,
            replication: 1,
        }
    }
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.dim == 0 || self.latent_dim == 0 || self.samples == 0 {
            return Err(Error::InvalidArgument(format!("all counts must be >= 1 in {self:?}")));
        }
        if !(self.snr > 0.0 && self.snr.is_finite()) {
            return Err(Error::InvalidArgument(format!("snr {} must be > 0", self.snr)));
        }
        if self.dim < self.latent_dim {
            return Err(Error::InvalidArgument(format!(
                "channel dimension {} is smaller than latent dimension {}: \
                 a {}x{} matrix cannot have orthonormal columns",
                self.dim, self.latent_dim, self.dim, self.latent_dim
            )));
        }
        Ok(())
    }

    /// Seed derived from the whole tuple; stable across runs and platforms.
    pub fn seed(&self) -> u64 {
        derive_seed(&[
            self.channels as u64,
            self.dim as u64,
            self.latent_dim as u64,
            self.samples as u64,
            self.snr.to_bits(),
            self.replication as u64,
        ])
    }

    pub fn with_replication(&self, replication: usize) -> Self {
        Self {
            replication,
            ..self.clone()
        }
    }

    /// Short stable key, e.g. `C3_d16_l4_S1000_snr10_r1`.
    pub fn key(&self) -> String {
        format!(
            "C{}_d{}_l{}_S{}_snr{}_r{}",
            self.channels, self.dim, self.latent_dim, self.samples, self.snr, self.replication
        )
    }
}

/// Named setups used by the model-selection experiments.
pub mod presets {
    use super::ScenarioSpec;

    /// Clear elbow: `C=10, d=32, l=4`.
    pub fn elbow() -> ScenarioSpec {
        ScenarioSpec {
            channels: 10,
            dim: 32,
            ..ScenarioSpec::default()
        }
    }

    /// `d=4, l=4` with a variable number of channels.
    pub fn channel_effect(channels: usize) -> ScenarioSpec {
        ScenarioSpec {
            channels,
            dim: 4,
            ..ScenarioSpec::default()
        }
    }

    /// High-dimensional channels, `C=10, d=500`, where the bound tends to
    /// overestimate the latent dimension.
    pub fn overestimation() -> ScenarioSpec {
        ScenarioSpec {
            channels: 10,
            dim: 500,
            ..ScenarioSpec::default()
        }
    }

    /// `C=10, d=500, S=10000, snr=100`.
    pub fn high_quality() -> ScenarioSpec {
        ScenarioSpec {
            channels: 10,
            dim: 500,
            samples: 10_000,
            snr: 100.0,
            ..ScenarioSpec::default()
        }
    }

    /// `snr=100, S=10000, C=3, d=16, l=4`.
    pub fn easy() -> ScenarioSpec {
        ScenarioSpec {
            samples: 10_000,
            snr: 100.0,
            ..ScenarioSpec::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub spec: ScenarioSpec,
    /// `S x d` observations per channel.
    pub channels: Vec<Matrix>,
    /// `S x l` latent draws.
    pub latent: Matrix,
    /// Orthonormal-column matrices `R_c` before row normalization.
    pub bases: Vec<Matrix>,
    /// Generative maps `G_c`, `d x l`, unit-norm rows.
    pub maps: Vec<Matrix>,
    /// Noiseless signals `G_c z`, `S x d`.
    pub signals: Vec<Matrix>,
    /// Standard deviation of the additive noise, `snr^{-1/2}`.
    pub noise_scale: f64,
}

impl SyntheticDataset {
    pub fn samples(&self) -> usize {
        self.latent.rows()
    }

    /// The generating model as a linear-Gaussian model.
    pub fn truth(&self) -> LinearGaussian {
        let var = self.noise_scale * self.noise_scale;
        LinearGaussian {
            maps: self.maps.clone(),
            noise_var: self.maps.iter().map(|g| vec![var; g.rows()]).collect(),
        }
    }

    /// Restricts every per-sample array to the given rows.
    pub fn select(&self, rows: &[usize]) -> SyntheticDataset {
        SyntheticDataset {
            spec: ScenarioSpec {
                samples: rows.len(),
                ..self.spec.clone()
            },
            channels: self.channels.iter().map(|x| x.select_rows(rows)).collect(),
            latent: self.latent.select_rows(rows),
            bases: self.bases.clone(),
            maps: self.maps.clone(),
            signals: self.signals.iter().map(|x| x.select_rows(rows)).collect(),
            noise_scale: self.noise_scale,
        }
    }
}

/// Rescales each row of `r` to unit Euclidean norm, `diag(R Rᵀ)^{-1/2} R`.
pub fn normalize_rows(r: &Matrix) -> Result<Matrix> {
    let mut g = r.clone();
    for i in 0..g.rows() {
        let row = g.row_mut(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < crate::linalg::PIVOT_TOL {
            return Err(Error::RankDeficient { column: i });
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(g)
}

pub fn generate_scenario(spec: &ScenarioSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    generate_with_noise_scale(spec, spec.snr.powf(-0.5))
}

/// Generation with an explicit noise scale; `0.0` gives noiseless data.
pub fn generate_with_noise_scale(spec: &ScenarioSpec, noise_scale: f64) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = SeededRng::new(spec.seed());
    let mut bases = Vec::with_capacity(spec.channels);
    let mut maps = Vec::with_capacity(spec.channels);
    for _ in 0..spec.channels {
        let r = orthonormalize_columns(&standard_normal_matrix(&mut rng, spec.dim, spec.latent_dim)?)?;
        maps.push(normalize_rows(&r)?);
        bases.push(r);
    }
    let latent = standard_normal_matrix(&mut rng, spec.samples, spec.latent_dim)?;
    let mut channels = Vec::with_capacity(spec.channels);
    let mut signals = Vec::with_capacity(spec.channels);
    for g in &maps {
        let signal = matmul_bt(&latent, g)?;
        let noise = standard_normal_matrix(&mut rng, spec.samples, spec.dim)?;
        let mut x = signal.clone();
        x.add_scaled(&noise, noise_scale);
        channels.push(x);
        signals.push(signal);
    }
    Ok(SyntheticDataset {
        spec: spec.clone(),
        channels,
        latent,
        bases,
        maps,
        signals,
        noise_scale,
    })
}

/// Values tried for each attribute when varying one at a time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridRanges {
    pub channels: Vec<usize>,
    pub dim: Vec<usize>,
    pub latent_dim: Vec<usize>,
    pub samples: Vec<usize>,
    pub snr: Vec<f64>,
    pub replications: Vec<usize>,
}

impl Default for GridRanges {
    fn default() -> Self {
        Self {
            channels: vec![2, 3, 5, 10],
            dim: vec![4, 8, 16, 32, 500],
            latent_dim: vec![1, 2, 4, 10, 20],
            samples: vec![50, 100, 1000, 10_000],
            snr: vec![100.0, 10.0, 1.0, 0.1],
            replications: vec![1, 2, 3, 4, 5],
        }
    }
}

impl GridRanges {
    /// Ranges that vary nothing; fill in the attributes to sweep.
    pub fn empty() -> Self {
        Self {
            channels: vec![],
            dim: vec![],
            latent_dim: vec![],
            samples: vec![],
            snr: vec![],
            replications: vec![1, 2, 3, 4, 5],
        }
    }
}

/// One-at-a-time variation of each attribute around `base`, crossed with
/// the replications. Attributes are visited in the order channels, dim,
/// latent_dim, samples, snr.
pub fn enumerate_grid(base: &ScenarioSpec, table: &GridRanges) -> Vec<ScenarioSpec> {
    let mut out = Vec::new();
    let mut push = |spec: ScenarioSpec| {
        for &r in &table.replications {
            out.push(spec.with_replication(r));
        }
    };
    for &v in &table.channels {
        push(ScenarioSpec { channels: v, ..base.clone() });
    }
    for &v in &table.dim {
        push(ScenarioSpec { dim: v, ..base.clone() });
    }
    for &v in &table.latent_dim {
        push(ScenarioSpec { latent_dim: v, ..base.clone() });
    }
    for &v in &table.samples {
        push(ScenarioSpec { samples: v, ..base.clone() });
    }
    for &v in &table.snr {
        push(ScenarioSpec { snr: v, ..base.clone() });
    }
    out
}

pub const DEFAULT_TEST_FRACTION: f64 = 0.2;

/// Disjoint random row partition applied to every channel and to the
/// ground truth. Both parts keep the original row order.
pub fn train_test_split(
    ds: &SyntheticDataset,
    test_fraction: f64,
    rng: &mut SeededRng,
) -> Result<(SyntheticDataset, SyntheticDataset)> {
    let (train, test) = split_indices(ds.samples(), test_fraction, rng)?;
    Ok((ds.select(&train), ds.select(&test)))
}

/// Index form of [`train_test_split`].
pub fn split_indices(
    samples: usize,
    test_fraction: f64,
    rng: &mut SeededRng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "test fraction {test_fraction} must lie in (0, 1)"
        )));
    }
    let n_test = (samples as f64 * test_fraction).round() as usize;
    if n_test == 0 || n_test >= samples {
        return Err(Error::InvalidArgument(format!(
            "splitting {samples} samples at fraction {test_fraction} leaves an empty part"
        )));
    }
    let perm = rng.permutation(samples);
    let mut test = perm[..n_test].to_vec();
    let mut train = perm[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{matmul, symmetric_eigen};

    fn small() -> ScenarioSpec {
        ScenarioSpec {
            channels: 2,
            dim: 6,
            latent_dim: 3,
            samples: 100,
            snr: 10.0,
            replication: 1,
        }
    }

    #[test]
    fn maps_have_unit_rows_and_bases_are_orthonormal() {
        for rep in 1..=5 {
            let ds = generate_scenario(&ScenarioSpec { replication: rep, ..small() }).unwrap();
            for (r, g) in ds.bases.iter().zip(&ds.maps) {
                let rtr = matmul(&r.transpose(), r).unwrap();
                assert!(rtr.max_abs_diff(&Matrix::identity(3)) < 1e-10);
                for i in 0..g.rows() {
                    let n: f64 = g.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                    assert!((n - 1.0).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn coordinate_variance_follows_snr() {
        let spec = ScenarioSpec {
            samples: 10_000,
            snr: 100.0,
            ..small()
        };
        let ds = generate_scenario(&spec).unwrap();
        for x in &ds.channels {
            for j in 0..x.cols() {
                let col = x.col(j);
                let var = col.iter().map(|v| v * v).sum::<f64>() / col.len() as f64;
                assert!((var - 1.01).abs() < 0.05, "{var}");
            }
        }
    }

    #[test]
    fn noise_residual_variance() {
        let spec = ScenarioSpec { samples: 2000, snr: 4.0, ..small() };
        let ds = generate_scenario(&spec).unwrap();
        for (x, s) in ds.channels.iter().zip(&ds.signals) {
            let r = x.sub(s).unwrap();
            for j in 0..r.cols() {
                let col = r.col(j);
                let var = col.iter().map(|v| v * v).sum::<f64>() / col.len() as f64;
                assert!((var - 0.25).abs() < 0.1 * 0.25, "{var}");
            }
        }
    }

    #[test]
    fn noiseless_hook() {
        let ds = generate_with_noise_scale(&small(), 0.0).unwrap();
        for (x, s) in ds.channels.iter().zip(&ds.signals) {
            assert_eq!(x, s);
        }
    }

    #[test]
    fn rejects_too_small_dimension() {
        let err = generate_scenario(&ScenarioSpec { dim: 2, ..small() }).unwrap_err();
        assert!(err.to_string().contains("orthonormal"));
    }

    #[test]
    fn grid_counts() {
        let base = ScenarioSpec::default();
        let only_c = GridRanges {
            channels: GridRanges::default().channels,
            ..GridRanges::empty()
        };
        assert_eq!(enumerate_grid(&base, &only_c).len(), 20);
        assert_eq!(enumerate_grid(&base, &GridRanges::default()).len(), 110);
        let a = enumerate_grid(&base, &GridRanges::default());
        let b = enumerate_grid(&base, &GridRanges::default());
        assert_eq!(a, b);
    }

    #[test]
    fn generation_is_pure() {
        let spec = small();
        assert_eq!(generate_scenario(&spec).unwrap(), generate_scenario(&spec).unwrap());
        let other = generate_scenario(&spec.with_replication(2)).unwrap();
        assert_ne!(generate_scenario(&spec).unwrap().maps, other.maps);
    }

    #[test]
    fn split_partitions_rows() {
        let ds = generate_scenario(&small()).unwrap();
        let (train, test) = train_test_split(&ds, 0.2, &mut SeededRng::new(5)).unwrap();
        assert_eq!((train.samples(), test.samples()), (80, 20));
        let (a, b) = split_indices(100, 0.2, &mut SeededRng::new(5)).unwrap();
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(split_indices(100, 0.2, &mut SeededRng::new(5)).unwrap(), (a.clone(), b));
        // row k of every part traces back to the same original sample
        for (k, &orig) in a.iter().enumerate() {
            assert_eq!(train.latent.row(k), ds.latent.row(orig));
            for c in 0..2 {
                assert_eq!(train.channels[c].row(k), ds.channels[c].row(orig));
                assert_eq!(train.signals[c].row(k), ds.signals[c].row(orig));
            }
        }
        assert!(split_indices(3, 0.01, &mut SeededRng::new(0)).is_err());
        assert!(split_indices(10, 1.0, &mut SeededRng::new(0)).is_err());
    }

    #[test]
    fn cross_covariance_has_latent_rank() {
        let spec = ScenarioSpec {
            channels: 2,
            dim: 16,
            latent_dim: 4,
            samples: 10_000,
            snr: 100.0,
            replication: 1,
        };
        let ds = generate_scenario(&spec).unwrap();
        let cross = matmul(&ds.channels[0].transpose(), &ds.channels[1])
            .unwrap()
            .scale(1.0 / 10_000.0);
        let (vals, _) = symmetric_eigen(&matmul(&cross.transpose(), &cross).unwrap()).unwrap();
        let sv: Vec<f64> = vals.iter().map(|v| v.max(0.0).sqrt()).collect();
        assert!(sv[3] >= 5.0 * sv[4], "{sv:?}");
    }
}
