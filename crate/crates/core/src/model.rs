//! Observations, model parameters and the per-stimulus polynomial design.
//!
//! Each stimulus type owns a contiguous block of `degree + 1` coefficients
//! holding `(1, t, t², …)` in the time headway `t`. The response is the
//! natural log of the observed brake response time.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{is_psd, SymMatrix};
use crate::scalar::Real;

/// Largest brake response time accepted, in seconds.
pub const MAX_BRT_S: f64 = 60.0;

/// Reference headway at which braking delay is implausible.
pub const DEFAULT_T_STAR: f64 = 1.5;

pub const DEFAULT_DEGREE: usize = 2;

/// Tolerance for the PSD checks on fitted covariance matrices.
pub const COVARIANCE_PSD_TOL: f64 = 1e-8;

/// Index of a stimulus type inside a [`StimulusRegistry`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StimulusId(pub usize);

/// Ordered set of stimulus labels; the position of a label is its id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StimulusRegistry {
    names: Vec<String>,
}

impl StimulusRegistry {
    pub fn new<I, S>(names: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(Error::InvalidConfig("at least one stimulus type is required".into()));
        }
        for (i, n) in names.iter().enumerate() {
            if n.trim().is_empty() || n.contains(',') || n.trim() != n {
                return Err(Error::InvalidConfig(format!("invalid stimulus label {n:?}")));
            }
            if names[..i].contains(n) {
                return Err(Error::InvalidConfig(format!("duplicate stimulus label {n:?}")));
            }
        }
        Ok(Self { names })
    }

    /// `traffic_signal`, `lead_car_brake`, `pedestrian_crossing`.
    pub fn default_three() -> Self {
        Self::new(["traffic_signal", "lead_car_brake", "pedestrian_crossing"])
            .expect("static labels are valid")
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id(&self, name: &str) -> Result<StimulusId> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(StimulusId)
            .ok_or_else(|| Error::UnknownStimulus(format!("{name:?}")))
    }

    pub fn name(&self, id: StimulusId) -> Result<&str> {
        self.names
            .get(id.0)
            .map(String::as_str)
            .ok_or_else(|| Error::UnknownStimulus(format!("id {}", id.0)))
    }
}

/// Stimulus registry plus the polynomial degree in headway.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "ModelSpecRepr", into = "ModelSpecRepr")]
pub struct ModelSpec {
    stimuli: StimulusRegistry,
    degree: usize,
}

#[derive(Serialize, Deserialize)]
struct ModelSpecRepr {
    num_stimuli: usize,
    degree: usize,
    stimuli: Vec<String>,
}

impl TryFrom<ModelSpecRepr> for ModelSpec {
    type Error = Error;

    fn try_from(r: ModelSpecRepr) -> Result<Self> {
        if r.num_stimuli != r.stimuli.len() {
            return Err(Error::InvalidConfig(format!(
                "num_stimuli is {} but {} labels are listed",
                r.num_stimuli,
                r.stimuli.len()
            )));
        }
        Ok(ModelSpec::new(StimulusRegistry::new(r.stimuli)?, r.degree))
    }
}

impl From<ModelSpec> for ModelSpecRepr {
    fn from(s: ModelSpec) -> Self {
        ModelSpecRepr { num_stimuli: s.num_stimuli(), degree: s.degree, stimuli: s.stimuli.names }
    }
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self::new(StimulusRegistry::default_three(), DEFAULT_DEGREE)
    }
}

impl ModelSpec {
    pub fn new(stimuli: StimulusRegistry, degree: usize) -> Self {
        Self { stimuli, degree }
    }

    pub fn stimuli(&self) -> &StimulusRegistry {
        &self.stimuli
    }

    pub fn num_stimuli(&self) -> usize {
        self.stimuli.len()
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    /// Coefficients per stimulus block.
    pub fn block_len(&self) -> usize {
        self.degree + 1
    }

    /// Total coefficient count `p = S·(degree + 1)`.
    pub fn num_coefficients(&self) -> usize {
        self.num_stimuli() * self.block_len()
    }

    pub fn check_stimulus(&self, s: StimulusId) -> Result<()> {
        if s.0 < self.num_stimuli() {
            Ok(())
        } else {
            Err(Error::UnknownStimulus(format!(
                "id {} (model has {} stimulus types)",
                s.0,
                self.num_stimuli()
            )))
        }
    }

    /// Column range of stimulus `s`.
    pub fn block(&self, s: StimulusId) -> std::ops::Range<usize> {
        let start = s.0 * self.block_len();
        start..start + self.block_len()
    }
}

/// One braking event.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation<T: Real> {
    pub driver_id: String,
    pub stimulus: StimulusId,
    pub headway_s: T,
    pub brt_s: T,
}

impl<T: Real> Observation<T> {
    pub fn new(driver_id: impl Into<String>, stimulus: StimulusId, headway_s: T, brt_s: T) -> Result<Self> {
        let obs = Self { driver_id: driver_id.into(), stimulus, headway_s, brt_s };
        obs.validate()?;
        Ok(obs)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.headway_s > T::zero()) || !self.headway_s.is_finite() {
            return Err(Error::InvalidObservation(format!(
                "headway must be positive, got {}",
                self.headway_s
            )));
        }
        if !(self.brt_s > T::zero()) {
            return Err(Error::InvalidObservation(format!(
                "brake response time must be positive, got {}",
                self.brt_s
            )));
        }
        if !(self.brt_s <= T::lit(MAX_BRT_S)) {
            return Err(Error::InvalidObservation(format!(
                "brake response time {} s exceeds the {MAX_BRT_S} s cap",
                self.brt_s
            )));
        }
        Ok(())
    }

    /// Log response `y = ln(brt)`.
    pub fn log_brt(&self) -> T {
        self.brt_s.ln()
    }
}

/// Design row for one event: zero outside the stimulus block, which holds
/// `(1, t, …, t^degree)`.
pub fn feature_row<T: Real>(spec: &ModelSpec, stimulus: StimulusId, headway_s: T) -> Result<DVector<T>> {
    spec.check_stimulus(stimulus)?;
    if !(headway_s > T::zero()) {
        return Err(Error::InvalidObservation(format!("headway must be positive, got {headway_s}")));
    }
    let mut row = DVector::zeros(spec.num_coefficients());
    let mut power = T::one();
    for k in spec.block(stimulus) {
        row[k] = power;
        power *= headway_s;
    }
    Ok(row)
}

/// Stacks [`feature_row`]s into `X` and log responses into `y`, in input order.
pub fn build_design<T: Real>(spec: &ModelSpec, obs: &[Observation<T>]) -> Result<(DMatrix<T>, DVector<T>)> {
    let p = spec.num_coefficients();
    let mut x = DMatrix::zeros(obs.len(), p);
    let mut y = DVector::zeros(obs.len());
    for (i, o) in obs.iter().enumerate() {
        o.validate()?;
        let row = feature_row(spec, o.stimulus, o.headway_s)?;
        x.row_mut(i).copy_from(&row.transpose());
        y[i] = o.log_brt();
    }
    Ok((x, y))
}

/// Optimizer diagnostics stored alongside a fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitInfo {
    pub converged: bool,
    pub loglik: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl FitInfo {
    /// `DidNotConverge` unless the optimizer reported convergence.
    pub fn ensure_converged(&self) -> Result<()> {
        if self.converged {
            Ok(())
        } else {
            Err(Error::DidNotConverge { iterations: self.iterations })
        }
    }
}

/// Population parameters estimated from the training study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelFile<T>", into = "ModelFile<T>")]
#[serde(bound(serialize = "T: Real", deserialize = "T: Real"))]
pub struct TrainedModel<T: Real> {
    spec: ModelSpec,
    beta: DVector<T>,
    sigma2: T,
    sigma_gamma: SymMatrix<T>,
    beta_cov: SymMatrix<T>,
    t_star: T,
    fit_info: FitInfo,
}

impl<T: Real> TrainedModel<T> {
    pub fn new(
        spec: ModelSpec,
        beta: DVector<T>,
        sigma2: T,
        sigma_gamma: SymMatrix<T>,
        beta_cov: SymMatrix<T>,
        t_star: T,
        fit_info: FitInfo,
    ) -> Result<Self> {
        let p = spec.num_coefficients();
        if beta.len() != p || sigma_gamma.dim() != p || beta_cov.dim() != p {
            return Err(Error::DimensionMismatch(format!(
                "model with p = {p} got beta of length {}, sigma_gamma {}x{}, beta_cov {}x{}",
                beta.len(),
                sigma_gamma.dim(),
                sigma_gamma.dim(),
                beta_cov.dim(),
                beta_cov.dim()
            )));
        }
        if !(sigma2 > T::zero()) || !sigma2.is_finite() {
            return Err(Error::InvalidConfig(format!("sigma2 must be positive, got {sigma2}")));
        }
        if !(t_star > T::zero()) {
            return Err(Error::InvalidConfig(format!("t_star must be positive, got {t_star}")));
        }
        let tol = T::lit(COVARIANCE_PSD_TOL);
        for (name, m) in [("sigma_gamma", &sigma_gamma), ("beta_cov", &beta_cov)] {
            if !is_psd(m, tol) {
                return Err(Error::InvalidConfig(format!(
                    "{name} is not positive semidefinite (smallest eigenvalue {:e})",
                    m.min_eigenvalue().as_f64()
                )));
            }
        }
        Ok(Self { spec, beta, sigma2, sigma_gamma, beta_cov, t_star, fit_info })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn beta(&self) -> &DVector<T> {
        &self.beta
    }

    pub fn sigma2(&self) -> T {
        self.sigma2
    }

    pub fn sigma_gamma(&self) -> &SymMatrix<T> {
        &self.sigma_gamma
    }

    pub fn beta_cov(&self) -> &SymMatrix<T> {
        &self.beta_cov
    }

    pub fn t_star(&self) -> T {
        self.t_star
    }

    pub fn with_t_star(mut self, t_star: T) -> Result<Self> {
        if !(t_star > T::zero()) {
            return Err(Error::InvalidConfig(format!("t_star must be positive, got {t_star}")));
        }
        self.t_star = t_star;
        Ok(self)
    }

    pub fn fit_info(&self) -> &FitInfo {
        &self.fit_info
    }

    pub fn num_coefficients(&self) -> usize {
        self.spec.num_coefficients()
    }
}

/// On-disk layout of a trained model.
#[derive(Serialize, Deserialize)]
#[serde(bound(serialize = "T: Real", deserialize = "T: Real"))]
struct ModelFile<T: Real> {
    spec: ModelSpec,
    beta: Vec<T>,
    sigma2: T,
    sigma_gamma: SymMatrix<T>,
    beta_cov: SymMatrix<T>,
    t_star: T,
    fit_info: FitInfo,
}

impl<T: Real> From<TrainedModel<T>> for ModelFile<T> {
    fn from(m: TrainedModel<T>) -> Self {
        ModelFile {
            spec: m.spec,
            beta: m.beta.iter().copied().collect(),
            sigma2: m.sigma2,
            sigma_gamma: m.sigma_gamma,
            beta_cov: m.beta_cov,
            t_star: m.t_star,
            fit_info: m.fit_info,
        }
    }
}

impl<T: Real> TryFrom<ModelFile<T>> for TrainedModel<T> {
    type Error = Error;

    fn try_from(f: ModelFile<T>) -> Result<Self> {
        TrainedModel::new(
            f.spec,
            DVector::from_vec(f.beta),
            f.sigma2,
            f.sigma_gamma,
            f.beta_cov,
            f.t_star,
            f.fit_info,
        )
    }
}
