//! Synthetic BRT data drawn from the mixed model.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{feature_row, ModelSpec, Observation, StimulusId, COVARIANCE_PSD_TOL};
use crate::numerics::{is_psd, psd_sqrt, SymMatrix};
use crate::scalar::Real;
use crate::training::TrainingSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct SimConfig<T: Real> {
    pub spec: ModelSpec,
    pub beta_true: Vec<T>,
    pub sigma2_true: T,
    pub sigma_gamma_true: SymMatrix<T>,
    pub num_drivers: usize,
    /// Observations per driver for each stimulus type.
    pub obs_per_driver: Vec<usize>,
    pub headway_range: (T, T),
    pub seed: u64,
}

/// Per-driver random effects keyed by driver id.
pub type GroundTruth<T> = BTreeMap<String, Vec<T>>;

impl<T: Real> SimConfig<T> {
    pub fn validate(&self) -> Result<()> {
        let p = self.spec.num_coefficients();
        if self.beta_true.len() != p || self.sigma_gamma_true.dim() != p {
            return Err(Error::InvalidConfig(format!(
                "beta_true has length {} and sigma_gamma_true is {}x{}, expected {p}",
                self.beta_true.len(),
                self.sigma_gamma_true.dim(),
                self.sigma_gamma_true.dim()
            )));
        }
        if self.obs_per_driver.len() != self.spec.num_stimuli() {
            return Err(Error::InvalidConfig(format!(
                "obs_per_driver has {} entries for {} stimulus types",
                self.obs_per_driver.len(),
                self.spec.num_stimuli()
            )));
        }
        if !(self.sigma2_true >= T::zero()) || !self.sigma2_true.is_finite() {
            return Err(Error::InvalidConfig(format!("sigma2_true must be non-negative, got {}", self.sigma2_true)));
        }
        if !is_psd(&self.sigma_gamma_true, T::lit(COVARIANCE_PSD_TOL)) {
            return Err(Error::InvalidConfig("sigma_gamma_true is not positive semidefinite".into()));
        }
        let (lo, hi) = self.headway_range;
        if !(lo > T::zero()) || !(hi >= lo) || !hi.is_finite() {
            return Err(Error::InvalidConfig(format!("headway range ({lo}, {hi}) must satisfy 0 < min <= max")));
        }
        if self.num_drivers < 2 {
            return Err(Error::InvalidConfig(format!("need at least 2 drivers, got {}", self.num_drivers)));
        }
        if self.obs_per_driver.iter().all(|&n| n == 0) {
            return Err(Error::InvalidConfig("every per-stimulus count is zero".into()));
        }
        Ok(())
    }
}

/// Canonical fixture: three stimuli, quadratic in headway.
pub fn default_config<T: Real>() -> SimConfig<T> {
    let spec = ModelSpec::default();
    #[rustfmt::skip]
    let beta = [
        -0.55, 0.20, -0.012,
        -0.70, 0.28, -0.018,
        -0.40, 0.18, -0.010,
    ];
    let within = [0.02, 0.005, 0.0001];
    let cross_intercept = 0.3 * 0.02;
    let p = spec.num_coefficients();
    let k = spec.block_len();
    let sg = DMatrix::from_fn(p, p, |i, j| {
        if i == j {
            within[i % k]
        } else if i % k == 0 && j % k == 0 {
            cross_intercept
        } else {
            0.0
        }
    });
    SimConfig {
        spec,
        beta_true: beta.iter().map(|&v| T::lit(v)).collect(),
        sigma2_true: T::lit(0.04),
        sigma_gamma_true: SymMatrix::new(sg.map(T::lit)).expect("fixture is symmetric"),
        num_drivers: 200,
        obs_per_driver: vec![10; 3],
        headway_range: (T::lit(0.5), T::lit(6.0)),
        seed: 42,
    }
}

pub fn driver_name(index: usize) -> String {
    format!("driver_{:04}", index + 1)
}

/// Box–Muller standard normals; the second variate of each pair is kept.
pub struct Gaussian {
    spare: Option<f64>,
}

impl Gaussian {
    pub fn new() -> Self {
        Self { spare: None }
    }

    pub fn sample<R: Rng>(&mut self, rng: &mut R) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1: f64 = 1.0 - rng.random::<f64>();
        let u2: f64 = rng.random::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }
}

impl Default for Gaussian {
    fn default() -> Self {
        Self::new()
    }
}

/// Draws a training set and the random effects that generated it.
pub fn generate<T: Real>(config: &SimConfig<T>) -> Result<(TrainingSet<T>, GroundTruth<T>)> {
    config.validate()?;
    let p = config.spec.num_coefficients();
    let beta = DVector::from_column_slice(&config.beta_true);
    let root = psd_sqrt(&config.sigma_gamma_true);
    let sigma = config.sigma2_true.sqrt();
    let (lo, hi) = (config.headway_range.0.as_f64(), config.headway_range.1.as_f64());

    let per_driver: Vec<Result<(String, Vec<Observation<T>>, Vec<T>)>> = (0..config.num_drivers)
        .into_par_iter()
        .map(|d| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(d as u64);
            let mut normal = Gaussian::new();
            let id = driver_name(d);
            let z = DVector::from_fn(p, |_, _| T::lit(normal.sample(&mut rng)));
            let gamma = &root * z;
            let coef = &beta + &gamma;
            let mut obs = Vec::new();
            for (s, &count) in config.obs_per_driver.iter().enumerate() {
                for _ in 0..count {
                    let t = if hi > lo { rng.random_range(lo..hi) } else { lo };
                    let t = T::lit(t);
                    let x = feature_row(&config.spec, StimulusId(s), t)?;
                    let eps = T::lit(normal.sample(&mut rng)) * sigma;
                    let y = x.dot(&coef) + eps;
                    obs.push(Observation::new(id.clone(), StimulusId(s), t, y.exp())?);
                }
            }
            Ok((id, obs, gamma.iter().copied().collect()))
        })
        .collect();

    let mut drivers = BTreeMap::new();
    let mut truth = BTreeMap::new();
    for r in per_driver {
        let (id, obs, gamma) = r?;
        drivers.insert(id.clone(), obs);
        truth.insert(id, gamma);
    }
    Ok((TrainingSet::new(config.spec.clone(), drivers)?, truth))
}
