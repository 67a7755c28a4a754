//! Per-driver state and the plug-in BLUP of the driver's random effects.
//!
//! With `V = X Σ̂_γ Xᵀ + σ̂² I`, `K = Xᵀ V⁻¹ X` and `B = Cov(β̂)`:
//!
//! * `γ̂ = Σ̂_γ Xᵀ V⁻¹ (y − X β̂)`
//! * `Cov(γ̂) = Σ̂_γ (K − K B K) Σ̂_γ`
//! * prediction error covariance of `β̂ + γ̂`:
//!   `B + Σ̂_γ − Cov(γ̂) − B K Σ̂_γ − (B K Σ̂_γ)ᵀ`
//!
//! Everything is recomputed from the full history on demand; the cost is one
//! `n×n` Cholesky factorization.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{build_design, Observation, TrainedModel};
use crate::numerics::{spd_solve, Cholesky, SymMatrix};
use crate::scalar::Real;
use crate::training::marginal_covariance;

/// Default cap on the retained observation history.
pub const DEFAULT_WINDOW: usize = 500;

/// Clipping band for tiny negative eigenvalues of the prediction error covariance.
pub const PSD_CLIP_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct BlupResult<T: Real> {
    pub gamma_hat: DVector<T>,
    pub gamma_hat_cov: SymMatrix<T>,
    pub pred_err_cov: SymMatrix<T>,
}

impl<T: Real> BlupResult<T> {
    /// Zero-data predictor: `γ̂ = 0` with individual-effect uncertainty `Σ̂_γ`.
    pub fn population(model: &TrainedModel<T>) -> Self {
        let p = model.num_coefficients();
        Self {
            gamma_hat: DVector::zeros(p),
            gamma_hat_cov: SymMatrix::zeros(p),
            pred_err_cov: model.sigma_gamma().clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DriverState<T: Real> {
    driver_id: String,
    observations: Vec<Observation<T>>,
    window: usize,
    cached: Option<BlupResult<T>>,
}

impl<T: Real> DriverState<T> {
    pub fn new(driver_id: impl Into<String>) -> Self {
        Self::with_window(driver_id, DEFAULT_WINDOW)
    }

    pub fn with_window(driver_id: impl Into<String>, window: usize) -> Self {
        assert!(window >= 1, "window must hold at least one observation");
        Self { driver_id: driver_id.into(), observations: Vec::new(), window, cached: None }
    }

    /// Rebuilds a state from persisted parts. `cached` must have been computed
    /// from exactly `observations`.
    pub fn from_parts(
        driver_id: impl Into<String>,
        observations: Vec<Observation<T>>,
        cached: Option<BlupResult<T>>,
    ) -> Result<Self> {
        let mut state = Self::new(driver_id);
        for o in observations {
            state.add_observation(o)?;
        }
        state.cached = cached;
        Ok(state)
    }

    pub fn driver_id(&self) -> &str {
        &self.driver_id
    }

    pub fn observations(&self) -> &[Observation<T>] {
        &self.observations
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn cached(&self) -> Option<&BlupResult<T>> {
        self.cached.as_ref()
    }

    /// Appends `obs`, evicting the oldest event beyond the window.
    pub fn add_observation(&mut self, obs: Observation<T>) -> Result<()> {
        if obs.driver_id != self.driver_id {
            return Err(Error::DriverMismatch { expected: self.driver_id.clone(), found: obs.driver_id });
        }
        obs.validate()?;
        self.observations.push(obs);
        if self.observations.len() > self.window {
            let excess = self.observations.len() - self.window;
            self.observations.drain(..excess);
        }
        self.cached = None;
        Ok(())
    }

    /// BLUP for the current history, cached until the next observation.
    pub fn compute_blup(&mut self, model: &TrainedModel<T>) -> Result<&BlupResult<T>> {
        if self.cached.is_none() {
            self.cached = Some(compute_blup(&self.observations, model)?);
        }
        Ok(self.cached.as_ref().expect("just filled"))
    }
}

/// Plug-in BLUP and its covariance terms for one driver's history.
pub fn compute_blup<T: Real>(observations: &[Observation<T>], model: &TrainedModel<T>) -> Result<BlupResult<T>> {
    if observations.is_empty() {
        return Ok(BlupResult::population(model));
    }
    let (x, y) = build_design(model.spec(), observations)?;
    let sigma_gamma = model.sigma_gamma().as_matrix();
    let b = model.beta_cov().as_matrix();
    let resid = &y - &x * model.beta();

    let v = marginal_covariance(&x, model.sigma_gamma(), model.sigma2())?;
    let ch = Cholesky::factor(&v)?;
    let vinv_x = ch.solve(&x);
    let xt_vinv_r = vinv_x.transpose() * &resid;
    let k = x.transpose() * &vinv_x;
    let k = (&k + k.transpose()) * T::lit(0.5);

    let gamma_hat = sigma_gamma * xt_vinv_r;
    let info = &k - &k * b * &k;
    let gamma_hat_cov = SymMatrix::symmetrized(&(sigma_gamma * info * sigma_gamma))?;
    let cross = b * &k * sigma_gamma;
    let assembled = b + sigma_gamma - gamma_hat_cov.as_matrix() - &cross - cross.transpose();
    let pred_err_cov = project_psd(SymMatrix::symmetrized(&assembled)?)?;

    Ok(BlupResult { gamma_hat, gamma_hat_cov, pred_err_cov })
}

/// Clips eigenvalues in `(-1e-8, 0)` to zero; larger violations are errors.
fn project_psd<T: Real>(m: SymMatrix<T>) -> Result<SymMatrix<T>> {
    let (values, vectors) = m.eigen();
    let min = values[0];
    if min >= T::zero() {
        return Ok(m);
    }
    if min <= -T::lit(PSD_CLIP_TOL) {
        return Err(Error::NotPositiveSemidefinite { min_eigenvalue: min.as_f64() });
    }
    let clipped = values.map(|v| v.max(T::zero()));
    let rebuilt = &vectors * DMatrix::from_diagonal(&clipped) * vectors.transpose();
    SymMatrix::symmetrized(&rebuilt)
}

/// Test oracle: the random effects from the mixed-model normal equations
/// with `β` fixed at `β̂`, solved in the range space of `Σ̂_γ`.
///
/// With `Σ̂_γ = Q Λ Qᵀ` restricted to positive eigenvalues, solves
/// `(Qᵀ XᵀX Q / σ² + Λ⁻¹) a = Qᵀ Xᵀ (y − X β̂) / σ²` and returns `γ = Q a`.
/// It never forms the `n×n` marginal covariance. Requires at least one
/// observation.
pub fn henderson_oracle<T: Real>(observations: &[Observation<T>], model: &TrainedModel<T>) -> Result<DVector<T>> {
    if observations.is_empty() {
        return Err(Error::InvalidInput("the normal-equation oracle needs at least one observation".into()));
    }
    let (x, y) = build_design(model.spec(), observations)?;
    let p = model.num_coefficients();
    let resid = &y - &x * model.beta();
    let (values, vectors) = model.sigma_gamma().eigen();
    let lambda_max = values[p - 1];
    let cutoff = T::from_usize(p).unwrap() * lambda_max * T::lit(1e-12);
    let keep: Vec<usize> = (0..p).filter(|&k| values[k] > cutoff).collect();
    if keep.is_empty() {
        return Ok(DVector::zeros(p));
    }
    let q = DMatrix::from_fn(p, keep.len(), |i, j| vectors[(i, keep[j])]);
    let inv_s2 = T::one() / model.sigma2();
    let xq = &x * &q;
    let mut lhs = xq.transpose() * &xq * inv_s2;
    for (j, &k) in keep.iter().enumerate() {
        lhs[(j, j)] += T::one() / values[k];
    }
    let rhs = xq.transpose() * resid * inv_s2;
    let a = spd_solve(&SymMatrix::symmetrized(&lhs)?, &DMatrix::from_column_slice(rhs.len(), 1, rhs.as_slice()))?;
    Ok(q * a.column(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FitInfo, ModelSpec, StimulusId, StimulusRegistry};
    use crate::numerics::is_psd;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn info() -> FitInfo {
        FitInfo { converged: true, loglik: 0.0, iterations: 0, seed: 0 }
    }

    fn scalar_model(sigma_gamma: f64) -> TrainedModel<f64> {
        let spec = ModelSpec::new(StimulusRegistry::new(["s"]).unwrap(), 0);
        TrainedModel::new(
            spec,
            DVector::from_vec(vec![0.0]),
            1.0,
            SymMatrix::from_diagonal(&[sigma_gamma]),
            SymMatrix::zeros(1),
            1.5,
            info(),
        )
        .unwrap()
    }

    fn obs(d: &str, s: usize, t: f64, brt: f64) -> Observation<f64> {
        Observation::new(d, StimulusId(s), t, brt).unwrap()
    }

    fn random_spd(rng: &mut ChaCha8Rng, p: usize, scale: f64) -> SymMatrix<f64> {
        let m = DMatrix::from_fn(p, p, |_, _| rng.random_range(-1.0..1.0));
        SymMatrix::symmetrized(&((m.transpose() * &m + DMatrix::identity(p, p) * 0.1) * scale)).unwrap()
    }

    fn random_model(rng: &mut ChaCha8Rng, beta_cov_scale: f64) -> TrainedModel<f64> {
        let spec = ModelSpec::default();
        TrainedModel::new(
            spec,
            DVector::from_fn(9, |_, _| rng.random_range(-0.5..0.5)),
            rng.random_range(0.01..0.2),
            random_spd(rng, 9, 0.01),
            random_spd(rng, 9, beta_cov_scale),
            1.5,
            info(),
        )
        .unwrap()
    }

    fn random_obs(rng: &mut ChaCha8Rng, n: usize) -> Vec<Observation<f64>> {
        (0..n)
            .map(|_| obs("x", rng.random_range(0..3), rng.random_range(0.5..6.0), rng.random_range(0.3..3.0)))
            .collect()
    }

    #[test]
    fn add_observation_semantics() {
        let mut s = DriverState::<f64>::new("a");
        s.add_observation(obs("a", 0, 1.0, 0.8)).unwrap();
        assert_eq!(s.len(), 1);
        assert!(s.cached().is_none());
        let err = s.add_observation(obs("b", 0, 1.0, 0.8)).unwrap_err();
        assert!(matches!(err, Error::DriverMismatch { .. }));
        for i in 1..50 {
            s.add_observation(obs("a", 0, i as f64 * 0.1, 0.8)).unwrap();
        }
        assert_eq!(s.len(), 50);
        for (i, o) in s.observations().iter().enumerate().skip(1) {
            assert_eq!(o.headway_s, i as f64 * 0.1);
        }
    }

    #[test]
    fn window_evicts_oldest() {
        let mut s = DriverState::<f64>::with_window("a", 3);
        for i in 1..=5 {
            s.add_observation(obs("a", 0, i as f64, 1.0)).unwrap();
        }
        let kept: Vec<f64> = s.observations().iter().map(|o| o.headway_s).collect();
        assert_eq!(kept, vec![3.0, 4.0, 5.0]);
    }

    #[test]
    fn cache_invalidated_on_new_observation() {
        let model = scalar_model(1.0);
        let mut s = DriverState::new("a");
        s.add_observation(obs("a", 0, 1.0, 2f64.exp())).unwrap();
        s.compute_blup(&model).unwrap();
        assert!(s.cached().is_some());
        s.add_observation(obs("a", 0, 1.0, 1.0)).unwrap();
        assert!(s.cached().is_none());
    }

    #[test]
    fn zero_data_returns_population_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = random_model(&mut rng, 1e-4);
        let r = compute_blup(&[], &model).unwrap();
        assert_eq!(r.gamma_hat, DVector::zeros(9));
        assert_eq!(&r.pred_err_cov, model.sigma_gamma());
        assert_eq!(r.gamma_hat_cov, SymMatrix::zeros(9));
    }

    #[test]
    fn zero_prior_variance_gives_zero_blup() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = random_model(&mut rng, 1e-4);
        let model = TrainedModel::new(
            m.spec().clone(),
            m.beta().clone(),
            m.sigma2(),
            SymMatrix::zeros(9),
            m.beta_cov().clone(),
            1.5,
            info(),
        )
        .unwrap();
        let r = compute_blup(&random_obs(&mut rng, 12), &model).unwrap();
        assert!(r.gamma_hat.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_hand_evaluation() {
        // X = 1, Σ = 1, σ² = 1, β = 0, B = 0, y = 2  ⇒  V = 2
        let model = scalar_model(1.0);
        let o = vec![obs("a", 0, 1.0, 2f64.exp())];
        let r = compute_blup(&o, &model).unwrap();
        assert!((r.gamma_hat[0] - 1.0).abs() < 1e-14);
        assert!((r.gamma_hat_cov.as_matrix()[(0, 0)] - 0.5).abs() < 1e-14);
        assert!((r.pred_err_cov.as_matrix()[(0, 0)] - 0.5).abs() < 1e-14);
        let h = henderson_oracle(&o, &model).unwrap();
        assert!((h[0] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn henderson_requires_data() {
        assert!(henderson_oracle(&[], &scalar_model(1.0)).is_err());
    }

    #[test]
    fn blup_matches_henderson_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let model = random_model(&mut rng, 1e-3);
            let n = rng.random_range(1..=30);
            let o = random_obs(&mut rng, n);
            let g = compute_blup(&o, &model).unwrap().gamma_hat;
            let h = henderson_oracle(&o, &model).unwrap();
            assert!((&g - &h).norm() <= 1e-8 * h.norm().max(1e-300));
        }
    }

    #[test]
    fn henderson_handles_singular_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = random_model(&mut rng, 1e-4);
        // rank-2 prior
        let u = DMatrix::from_fn(9, 2, |_, _| rng.random_range(-0.2..0.2));
        let sg = SymMatrix::symmetrized(&(&u * u.transpose())).unwrap();
        let model = TrainedModel::new(m.spec().clone(), m.beta().clone(), 0.05, sg, m.beta_cov().clone(), 1.5, info()).unwrap();
        let o = random_obs(&mut rng, 15);
        let g = compute_blup(&o, &model).unwrap().gamma_hat;
        let h = henderson_oracle(&o, &model).unwrap();
        assert!((&g - &h).norm() <= 1e-8 * h.norm());
    }

    #[test]
    fn shrinkage_with_growing_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random_model(&mut rng, 1e-4);
        let o = random_obs(&mut rng, 10);
        let mut last = f64::INFINITY;
        for s2 in [1.0, 10.0, 100.0, 1000.0] {
            let model = TrainedModel::new(
                m.spec().clone(),
                m.beta().clone(),
                s2,
                m.sigma_gamma().clone(),
                m.beta_cov().clone(),
                1.5,
                info(),
            )
            .unwrap();
            let norm = compute_blup(&o, &model).unwrap().gamma_hat.norm();
            assert!(norm < last);
            last = norm;
        }
    }

    #[test]
    fn pred_err_cov_is_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let model = random_model(&mut rng, 1e-3);
            let n = rng.random_range(1..40);
            let r = compute_blup(&random_obs(&mut rng, n), &model).unwrap();
            assert!(is_psd(&r.pred_err_cov, 1e-8));
        }
    }

    #[test]
    fn project_psd_clips_tiny_and_rejects_large() {
        let m = SymMatrix::from_diagonal(&[1.0, -1e-10]);
        let p = project_psd(m).unwrap();
        assert!(p.min_eigenvalue() >= 0.0);
        assert!(matches!(
            project_psd(SymMatrix::from_diagonal(&[1.0, -1e-6])),
            Err(Error::NotPositiveSemidefinite { .. })
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            // With B = 0, Σ − Cov(γ̂) is the posterior covariance and only shrinks.
            #[test]
            fn information_monotone_without_beta_uncertainty(seed in any::<u64>(), n in 1usize..25) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let m = random_model(&mut rng, 1e-4);
                let model = TrainedModel::new(
                    m.spec().clone(), m.beta().clone(), m.sigma2(),
                    m.sigma_gamma().clone(), SymMatrix::zeros(9), 1.5, info(),
                ).unwrap();
                let o = random_obs(&mut rng, n);
                let mut last = model.sigma_gamma().trace();
                for k in 1..=n {
                    let r = compute_blup(&o[..k], &model).unwrap();
                    let post = model.sigma_gamma().trace() - r.gamma_hat_cov.trace();
                    prop_assert!(post <= last + 1e-12 * last.max(1.0));
                    last = post;
                }
            }
        }
    }
}
