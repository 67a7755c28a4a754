//! Maximum likelihood fit of the population parameters `β`, `σ²` and `Σ_γ`
//! from a multi-driver training study.
//!
//! For driver `d` the log responses satisfy
//! `y_d ~ N(X_d β, V_d)` with `V_d = X_d Σ_γ X_dᵀ + σ² I`. The fixed effects
//! are profiled out by generalized least squares; the variance parameters are
//! searched with Nelder–Mead over `(log σ, L)` where `Σ_γ = L Lᵀ` and the
//! diagonal of `L` is stored on the log scale, so every iterate is PSD.

mod nelder_mead;

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{build_design, FitInfo, ModelSpec, Observation, TrainedModel, DEFAULT_T_STAR};
use crate::numerics::{generalized_inverse, generalized_inverse_with_rank, Cholesky, SymMatrix};
use crate::scalar::Real;

pub use nelder_mead::{minimize, NelderMeadOptions, NelderMeadResult};

/// Observations of the training study grouped by driver.
#[derive(Debug, Clone)]
pub struct TrainingSet<T: Real> {
    spec: ModelSpec,
    drivers: BTreeMap<String, Vec<Observation<T>>>,
}

impl<T: Real> TrainingSet<T> {
    pub fn new(spec: ModelSpec, drivers: BTreeMap<String, Vec<Observation<T>>>) -> Result<Self> {
        if drivers.len() < 2 {
            return Err(Error::InvalidTrainingSet(format!(
                "at least 2 drivers required, got {}",
                drivers.len()
            )));
        }
        for (id, obs) in &drivers {
            if obs.is_empty() {
                return Err(Error::InvalidTrainingSet(format!("driver {id:?} has no observations")));
            }
            for o in obs {
                if &o.driver_id != id {
                    return Err(Error::InvalidTrainingSet(format!(
                        "observation of {:?} filed under {id:?}",
                        o.driver_id
                    )));
                }
                o.validate()?;
                spec.check_stimulus(o.stimulus)?;
            }
        }
        Ok(Self { spec, drivers })
    }

    /// Groups observations by driver id, keeping each driver's input order.
    pub fn from_observations<I>(spec: ModelSpec, obs: I) -> Result<Self>
    where
        I: IntoIterator<Item = Observation<T>>,
    {
        let mut drivers: BTreeMap<String, Vec<Observation<T>>> = BTreeMap::new();
        for o in obs {
            drivers.entry(o.driver_id.clone()).or_default().push(o);
        }
        Self::new(spec, drivers)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn drivers(&self) -> &BTreeMap<String, Vec<Observation<T>>> {
        &self.drivers
    }

    pub fn num_drivers(&self) -> usize {
        self.drivers.len()
    }

    pub fn num_observations(&self) -> usize {
        self.drivers.values().map(Vec::len).sum()
    }

    /// Per-driver `(X_d, y_d)` in driver-id order.
    pub fn design_blocks(&self) -> Result<Vec<(DMatrix<T>, DVector<T>)>> {
        self.drivers.values().map(|obs| build_design(&self.spec, obs)).collect()
    }

    /// All observations in driver-id order, flattened.
    pub fn observations(&self) -> impl Iterator<Item = &Observation<T>> {
        self.drivers.values().flatten()
    }
}

/// Which entries of the Cholesky factor of `Σ_γ` are free.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CovStructure {
    /// Dense lower triangle.
    #[default]
    Full,
    /// Lower triangle restricted to diagonal blocks of the given size
    /// (one block per stimulus type).
    BlockDiagonal { block: usize },
}

impl CovStructure {
    fn includes(self, i: usize, j: usize) -> bool {
        match self {
            CovStructure::Full => true,
            CovStructure::BlockDiagonal { block } => i / block == j / block,
        }
    }

    /// Free `(row, col)` positions of the factor, row-major over the lower triangle.
    pub fn free_entries(self, p: usize) -> Vec<(usize, usize)> {
        (0..p)
            .flat_map(|i| (0..=i).map(move |j| (i, j)))
            .filter(|&(i, j)| self.includes(i, j))
            .collect()
    }

    /// Number of optimizer coordinates, `σ` included.
    pub fn num_params(self, p: usize) -> usize {
        1 + self.free_entries(p).len()
    }
}

/// Unconstrained variance parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceParams<T: Real> {
    /// `σ = exp(log_sigma)`.
    pub log_sigma: T,
    /// Lower triangular; the diagonal holds `log L_ii`.
    pub chol_factor: DMatrix<T>,
}

impl<T: Real> VarianceParams<T> {
    pub fn dim(&self) -> usize {
        self.chol_factor.nrows()
    }

    pub fn sigma2(&self) -> T {
        (self.log_sigma + self.log_sigma).exp()
    }

    /// `L` with the diagonal exponentiated and the upper triangle zeroed.
    pub fn factor(&self) -> DMatrix<T> {
        let p = self.dim();
        DMatrix::from_fn(p, p, |i, j| match i.cmp(&j) {
            std::cmp::Ordering::Less => T::zero(),
            std::cmp::Ordering::Equal => self.chol_factor[(i, i)].exp(),
            std::cmp::Ordering::Greater => self.chol_factor[(i, j)],
        })
    }

    pub fn sigma_gamma(&self) -> SymMatrix<T> {
        let l = self.factor();
        SymMatrix::symmetrized(&(&l * l.transpose())).expect("square factor")
    }

    /// Parameters reproducing `σ²` and a positive definite `Σ_γ`.
    pub fn from_covariances(sigma2: T, sigma_gamma: &SymMatrix<T>) -> Result<Self> {
        if !(sigma2 > T::zero()) {
            return Err(Error::InvalidConfig(format!("sigma2 must be positive, got {sigma2}")));
        }
        let mut l = Cholesky::factor(sigma_gamma)?.l().clone();
        for i in 0..l.nrows() {
            l[(i, i)] = l[(i, i)].ln();
        }
        Ok(Self { log_sigma: sigma2.ln() * T::lit(0.5), chol_factor: l })
    }

    pub fn pack(&self, structure: CovStructure) -> Vec<T> {
        let mut v = vec![self.log_sigma];
        v.extend(structure.free_entries(self.dim()).into_iter().map(|(i, j)| self.chol_factor[(i, j)]));
        v
    }

    pub fn unpack(structure: CovStructure, p: usize, theta: &[T]) -> Self {
        let entries = structure.free_entries(p);
        assert_eq!(theta.len(), entries.len() + 1, "parameter vector length");
        let mut l = DMatrix::zeros(p, p);
        // absent diagonal entries never happen: every structure frees the diagonal
        for (&(i, j), &v) in entries.iter().zip(&theta[1..]) {
            l[(i, j)] = v;
        }
        Self { log_sigma: theta[0], chol_factor: l }
    }
}

/// `X_d Σ_γ X_dᵀ + σ² I`.
pub fn marginal_covariance<T: Real>(x_d: &DMatrix<T>, sigma_gamma: &SymMatrix<T>, sigma2: T) -> Result<SymMatrix<T>> {
    if x_d.ncols() != sigma_gamma.dim() {
        return Err(Error::DimensionMismatch(format!(
            "design has {} columns, covariance is {}x{}",
            x_d.ncols(),
            sigma_gamma.dim(),
            sigma_gamma.dim()
        )));
    }
    if x_d.nrows() == 0 {
        return Err(Error::DimensionMismatch("marginal covariance of zero observations".into()));
    }
    let mut v = x_d * sigma_gamma.as_matrix() * x_d.transpose();
    for i in 0..v.nrows() {
        v[(i, i)] += sigma2;
    }
    SymMatrix::symmetrized(&v)
}

/// Marginal covariance of one driver's log responses under `params`.
pub fn marginal_cov<T: Real>(x_d: &DMatrix<T>, params: &VarianceParams<T>) -> Result<SymMatrix<T>> {
    marginal_covariance(x_d, &params.sigma_gamma(), params.sigma2())
}

/// Generalized least squares with a block-diagonal covariance.
///
/// Rows of `x` are split into consecutive spans matching `v_blocks`. Returns
/// `β = (XᵀV⁻¹X)⁻ XᵀV⁻¹y` and `(XᵀV⁻¹X)⁻`, using the Moore–Penrose inverse.
pub fn gls_beta<T: Real>(
    x: &DMatrix<T>,
    y: &DVector<T>,
    v_blocks: &[SymMatrix<T>],
) -> Result<(DVector<T>, SymMatrix<T>)> {
    let n: usize = v_blocks.iter().map(SymMatrix::dim).sum();
    if n != x.nrows() || n != y.len() {
        return Err(Error::DimensionMismatch(format!(
            "covariance blocks cover {n} rows but X has {} and y has {}",
            x.nrows(),
            y.len()
        )));
    }
    let p = x.ncols();
    let mut k = DMatrix::<T>::zeros(p, p);
    let mut h = DVector::<T>::zeros(p);
    let mut start = 0;
    for v in v_blocks {
        let m = v.dim();
        let x_d = x.rows(start, m).into_owned();
        let y_d = y.rows(start, m).into_owned();
        let ch = Cholesky::factor(v)?;
        let vinv_x = ch.solve(&x_d);
        let vinv_y = ch.solve_vec(&y_d);
        k += x_d.transpose() * vinv_x;
        h += x_d.transpose() * vinv_y;
        start += m;
    }
    let k = SymMatrix::symmetrized(&k)?;
    let g = generalized_inverse(k.as_matrix());
    let beta = &g * h;
    Ok((beta, SymMatrix::symmetrized(&g)?))
}

/// Sufficient statistics of one driver: `XᵀX`, `Xᵀy`, `yᵀy`, `n`.
#[derive(Debug, Clone)]
struct DriverStats<T: Real> {
    xtx: DMatrix<T>,
    xty: DMatrix<T>,
    yty: T,
    n: usize,
}

struct Contribution<T: Real> {
    k: DMatrix<T>,
    h: DVector<T>,
    y_vinv_y: T,
    log_det: T,
}

impl<T: Real> DriverStats<T> {
    fn new(x: &DMatrix<T>, y: &DVector<T>) -> Self {
        Self { xtx: x.tr_mul(x), xty: x.tr_mul(y).reshape_generic(nalgebra::Dyn(x.ncols()), nalgebra::Dyn(1)), yty: y.dot(y), n: x.nrows() }
    }

    /// Terms of the profile likelihood through the `p×p` identities
    /// `V⁻¹ = σ⁻²(I − X L M⁻¹ Lᵀ Xᵀ)` and `det V = σ^{2(n−p)} det M`,
    /// with `M = σ² I + Lᵀ XᵀX L`.
    fn contribution(&self, l: &DMatrix<T>, sigma2: T) -> Result<Contribution<T>> {
        let p = l.nrows();
        let w = l.tr_mul(&self.xtx);
        let mut m = &w * l;
        for i in 0..p {
            m[(i, i)] += sigma2;
        }
        let ch = Cholesky::factor_matrix(&m)?;
        // with M = C Cᵀ: Wᵀ M⁻¹ W = Gᵀ G for G = C⁻¹ W
        let mut g = w;
        ch.forward_solve_in_place(&mut g);
        let mut gb = l.tr_mul(&self.xty);
        ch.forward_solve_in_place(&mut gb);
        let inv_s2 = T::one() / sigma2;
        let k = (&self.xtx - g.tr_mul(&g)) * inv_s2;
        let h = (&self.xty - g.tr_mul(&gb).column(0)) * inv_s2;
        let y_vinv_y = (self.yty - gb.norm_squared()) * inv_s2;
        let excess = T::lit(self.n as f64 - p as f64);
        let log_det = excess * sigma2.ln() + ch.log_det();
        Ok(Contribution { k, h, y_vinv_y, log_det })
    }
}

/// Profile log-likelihood of a training set, reusable across parameter values.
#[derive(Debug, Clone)]
pub struct ProfileLikelihood<T: Real> {
    drivers: Vec<DriverStats<T>>,
    p: usize,
    n_total: usize,
}

/// Value of the profile likelihood and the GLS fixed effects it used.
#[derive(Debug, Clone)]
pub struct ProfileValue<T: Real> {
    pub loglik: T,
    pub beta: DVector<T>,
}

impl<T: Real> ProfileLikelihood<T> {
    pub fn new(ts: &TrainingSet<T>) -> Result<Self> {
        let blocks = ts.design_blocks()?;
        let drivers: Vec<_> = blocks.iter().map(|(x, y)| DriverStats::new(x, y)).collect();
        Ok(Self { drivers, p: ts.spec().num_coefficients(), n_total: ts.num_observations() })
    }

    pub fn num_coefficients(&self) -> usize {
        self.p
    }

    pub fn eval(&self, params: &VarianceParams<T>) -> Result<T> {
        Ok(self.eval_full(params)?.loglik)
    }

    pub fn eval_full(&self, params: &VarianceParams<T>) -> Result<ProfileValue<T>> {
        if params.dim() != self.p {
            return Err(Error::DimensionMismatch(format!(
                "variance parameters for p = {}, model has p = {}",
                params.dim(),
                self.p
            )));
        }
        let l = params.factor();
        let sigma2 = params.sigma2();
        let parts: Vec<Contribution<T>> = self
            .drivers
            .par_iter()
            .map(|d| d.contribution(&l, sigma2))
            .collect::<Result<_>>()?;

        let mut k = DMatrix::<T>::zeros(self.p, self.p);
        let mut h = DVector::<T>::zeros(self.p);
        let mut y_vinv_y = T::zero();
        let mut log_det = T::zero();
        for c in &parts {
            k += &c.k;
            h += &c.h;
            y_vinv_y += c.y_vinv_y;
            log_det += c.log_det;
        }
        let k = (&k + k.transpose()) * T::lit(0.5);
        let beta = match Cholesky::factor_matrix(&k) {
            Ok(ch) => ch.solve_vec(&h),
            Err(_) => generalized_inverse(&k) * &h,
        };
        let quad = y_vinv_y - (h.dot(&beta) + h.dot(&beta)) + beta.dot(&(&k * &beta));
        let n = T::from_usize(self.n_total).unwrap();
        let loglik = -T::lit(0.5) * (n * T::two_pi().ln() + log_det + quad);
        Ok(ProfileValue { loglik, beta })
    }
}

/// Gaussian marginal log-likelihood with `β` at its GLS estimate:
/// `−½ Σ_d [n_d log 2π + log det V_d + r_dᵀ V_d⁻¹ r_d]`.
pub fn log_likelihood<T: Real>(ts: &TrainingSet<T>, params: &VarianceParams<T>) -> Result<T> {
    ProfileLikelihood::new(ts)?.eval(params)
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    /// Iteration cap for each Nelder–Mead run.
    pub max_iterations: usize,
    /// Absolute log-likelihood improvement per simplex cycle.
    pub tolerance: f64,
    pub seed: u64,
    /// Extra Nelder–Mead runs started around the incumbent.
    pub restarts: usize,
    pub structure: CovStructure,
    pub t_star: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100_000,
            tolerance: 1e-6,
            seed: 42,
            restarts: 3,
            structure: CovStructure::Full,
            t_star: DEFAULT_T_STAR,
        }
    }
}

impl FitOptions {
    /// Block-diagonal `Σ_γ` with one block per stimulus type of `spec`.
    pub fn block_diagonal(mut self, spec: &ModelSpec) -> Self {
        self.structure = CovStructure::BlockDiagonal { block: spec.block_len() };
        self
    }
}

/// Residual variance pooled over per-driver least squares fits.
fn pooled_ols_variance<T: Real>(blocks: &[(DMatrix<T>, DVector<T>)]) -> T {
    let mut rss = T::zero();
    let mut dof = 0usize;
    for (x, y) in blocks {
        let (g, rank) = generalized_inverse_with_rank(x);
        let resid = y - x * (g * y);
        rss += resid.dot(&resid);
        dof += x.nrows().saturating_sub(rank);
    }
    if dof > 0 && rss > T::zero() {
        return rss / T::from_usize(dof).unwrap();
    }
    // every driver is saturated: fall back to the marginal variance of y
    let all: Vec<T> = blocks.iter().flat_map(|(_, y)| y.iter().copied()).collect();
    let n = T::from_usize(all.len()).unwrap();
    let mean = all.iter().fold(T::zero(), |a, &v| a + v) / n;
    let var = all.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
    if var > T::zero() {
        var
    } else {
        T::one()
    }
}

/// Fits `β`, `σ²` and `Σ_γ` by maximum likelihood.
///
/// The returned model carries `fit_info.converged`; a run that hits the
/// iteration cap still yields its best parameters.
pub fn fit<T: Real>(ts: &TrainingSet<T>, opts: &FitOptions) -> Result<TrainedModel<T>> {
    let spec = ts.spec().clone();
    let p = spec.num_coefficients();
    if let CovStructure::BlockDiagonal { block } = opts.structure {
        if block == 0 || p % block != 0 {
            return Err(Error::InvalidConfig(format!("block size {block} does not divide p = {p}")));
        }
    }
    let blocks = ts.design_blocks()?;
    let profile = ProfileLikelihood::new(ts)?;

    let sigma2_0 = pooled_ols_variance(&blocks);
    let sigma_0 = sigma2_0.sqrt();
    let mut init_factor = DMatrix::<T>::zeros(p, p);
    let log_diag = (T::lit(0.1) * sigma_0).ln();
    for i in 0..p {
        init_factor[(i, i)] = log_diag;
    }
    let init = VarianceParams { log_sigma: sigma_0.ln(), chol_factor: init_factor };
    let structure = opts.structure;
    let entries = structure.free_entries(p);

    let mut base_steps = vec![T::lit(0.2)];
    base_steps.extend(entries.iter().map(|&(i, j)| if i == j { T::lit(0.5) } else { T::lit(0.1) * sigma_0 }));

    let objective = |theta: &[T]| -> T {
        let params = VarianceParams::unpack(structure, p, theta);
        match profile.eval(&params) {
            Ok(v) => -v,
            Err(_) => T::max_value().unwrap(),
        }
    };
    let nm_opts = NelderMeadOptions { max_iterations: opts.max_iterations, tolerance: T::lit(opts.tolerance) };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut x = init.pack(structure);
    let mut run = minimize(objective, &x, &base_steps, &nm_opts);
    let mut iterations = run.iterations;
    x = run.x.clone();
    let mut fx = run.fx;
    for _ in 0..opts.restarts {
        let steps: Vec<T> = base_steps
            .iter()
            .map(|&s| {
                let scale = T::lit(rng.random_range(0.5..1.5));
                if rng.random_bool(0.5) {
                    s * scale
                } else {
                    -s * scale
                }
            })
            .collect();
        run = minimize(objective, &x, &steps, &nm_opts);
        iterations += run.iterations;
        if run.fx <= fx {
            x = run.x.clone();
            fx = run.fx;
        }
    }
    if fx >= T::max_value().unwrap() {
        return Err(Error::InvalidTrainingSet("likelihood could not be evaluated at any trial point".into()));
    }

    let params = VarianceParams::unpack(structure, p, &x);
    let sigma2 = params.sigma2();
    let sigma_gamma = params.sigma_gamma();
    let v_blocks = blocks
        .iter()
        .map(|(x_d, _)| marginal_covariance(x_d, &sigma_gamma, sigma2))
        .collect::<Result<Vec<_>>>()?;
    let (x_all, y_all) = build_design(&spec, &ts.observations().cloned().collect::<Vec<_>>())?;
    let (beta, beta_cov) = gls_beta(&x_all, &y_all, &v_blocks)?;
    let loglik = profile.eval(&params)?;

    let info = FitInfo { converged: run.converged, loglik: loglik.as_f64(), iterations, seed: opts.seed };
    TrainedModel::new(spec, beta, sigma2, sigma_gamma, beta_cov, T::lit(opts.t_star), info)
}
