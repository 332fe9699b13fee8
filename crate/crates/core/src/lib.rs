//! Multi-channel stochastic variational inference.
//!
//! Several data channels observed on the same samples are modeled as noisy
//! linear images of one shared Gaussian latent variable. Each channel gets
//! its own decoder and its own encoder, and all of them are trained jointly
//! by maximizing a lower bound in which the code inferred from every channel
//! has to reconstruct every other channel.

pub mod config;
pub mod data;
pub mod elbo;
pub mod error;
pub mod evaluate;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod synthetic;

pub use config::RunConfig;
pub use data::MultiChannelDataset;
pub use elbo::{elbo_batch, elbo_gradients, ElboBreakdown, GradientSet};
pub use error::{Error, ErrorKind, Result};
pub use linalg::{Matrix, SeededRng};
pub use model::{ChannelSpec, LatentGaussian, MultiChannelModel};
pub use optim::{fit, FitReport, TrainConfig};
pub use synthetic::{ScenarioSpec, SyntheticDataset};
