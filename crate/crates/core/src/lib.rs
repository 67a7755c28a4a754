//! Personalized brake response time (PBRT) estimation with a linear
//! mixed-effects model on log response times.
//!
//! The pipeline is: [`simgen`] draws synthetic data, [`training`] fits the
//! population model by maximum likelihood, [`driver`] forms per-driver
//! BLUPs and [`pbrt`] turns them into log-normal response time
//! distributions. Every estimator is generic over [`Real`] (`f32`/`f64`).

pub mod cli;
pub mod driver;
pub mod error;
pub mod io;
pub mod model;
pub mod numerics;
pub mod pbrt;
pub mod scalar;
pub mod simgen;
pub mod training;

pub use driver::{compute_blup, henderson_oracle, BlupResult, DriverState};
pub use error::{Error, Result};
pub use model::{build_design, feature_row, FitInfo, ModelSpec, Observation, StimulusId, StimulusRegistry, TrainedModel};
pub use numerics::{generalized_inverse, is_psd, log_det_spd, spd_solve, SymMatrix};
pub use pbrt::{density_curve, estimate_pbrt, percentile, PbrtEstimate};
pub use scalar::Real;
pub use simgen::{default_config, generate, SimConfig};
pub use training::{fit, gls_beta, log_likelihood, marginal_cov, FitOptions, TrainingSet, VarianceParams};

pub type SymMatrixF64 = SymMatrix<f64>;
pub type ObservationF64 = Observation<f64>;
pub type TrainedModelF64 = TrainedModel<f64>;
pub type TrainingSetF64 = TrainingSet<f64>;
pub type DriverStateF64 = DriverState<f64>;
pub type BlupResultF64 = BlupResult<f64>;
pub type PbrtEstimateF64 = PbrtEstimate<f64>;
pub type SimConfigF64 = SimConfig<f64>;

pub type SymMatrixF32 = SymMatrix<f32>;
pub type ObservationF32 = Observation<f32>;
pub type TrainedModelF32 = TrainedModel<f32>;
pub type TrainingSetF32 = TrainingSet<f32>;
pub type DriverStateF32 = DriverState<f32>;
pub type BlupResultF32 = BlupResult<f32>;
pub type PbrtEstimateF32 = PbrtEstimate<f32>;
pub type SimConfigF32 = SimConfig<f32>;
