//! Fixtures shared by the benchmarks.

use mcvi::linalg::standard_normal_matrix;
use mcvi::optim::default_names;
use mcvi::synthetic::{generate_scenario, ScenarioSpec};
use mcvi::{Matrix, MultiChannelModel, SeededRng};

/// Random `rows x cols` matrix from a fixed seed.
pub fn random_matrix(seed: u64, rows: usize, cols: usize) -> Matrix {
    standard_normal_matrix(&mut SeededRng::new(seed), rows, cols).expect("non-empty shape")
}

/// A freshly initialized model and a data set for it.
pub fn problem(channels: usize, dim: usize, latent_dim: usize, samples: usize) -> (MultiChannelModel, Vec<Matrix>) {
    let spec = ScenarioSpec {
        channels,
        dim,
        latent_dim,
        samples,
        snr: 10.0,
        replication: 1,
    };
    let ds = generate_scenario(&spec).expect("valid scenario");
    let model = MultiChannelModel::init_named(
        &mut SeededRng::new(0),
        latent_dim,
        &vec![dim; channels],
        &default_names(channels),
        0.1,
    )
    .expect("valid model");
    (model, ds.channels)
}
