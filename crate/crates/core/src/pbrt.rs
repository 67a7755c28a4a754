//! Log-normal PBRT distribution at a fixed headway.

use std::f64::consts::PI;

use nalgebra::DVector;

use crate::driver::BlupResult;
use crate::error::{Error, Result};
use crate::model::{feature_row, StimulusId, TrainedModel};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PbrtEstimate<T: Real> {
    /// Mean of `ln BRT` at `t*`.
    pub mu: T,
    /// Residual variance only.
    pub var_naive: T,
    /// Residual variance plus the prediction error of `β̂ + γ̂`.
    pub var_conservative: T,
}

impl<T: Real> PbrtEstimate<T> {
    pub fn variance(&self, conservative: bool) -> T {
        if conservative {
            self.var_conservative
        } else {
            self.var_naive
        }
    }

    pub fn median(&self) -> T {
        self.mu.exp()
    }
}

/// PBRT distribution for stimulus `stimulus` at headway `t_star`.
pub fn estimate_pbrt<T: Real>(
    model: &TrainedModel<T>,
    blup: &BlupResult<T>,
    stimulus: StimulusId,
    t_star: T,
) -> Result<PbrtEstimate<T>> {
    if !(t_star > T::zero()) || !t_star.is_finite() {
        return Err(Error::InvalidInput(format!("t_star must be positive, got {t_star}")));
    }
    let p = model.num_coefficients();
    if blup.gamma_hat.len() != p || blup.pred_err_cov.dim() != p {
        return Err(Error::DimensionMismatch(format!(
            "BLUP has dimension {} but the model has {p} coefficients",
            blup.gamma_hat.len()
        )));
    }
    let w: DVector<T> = feature_row(model.spec(), stimulus, t_star)?;
    let mu = w.dot(&(model.beta() + &blup.gamma_hat));
    let var_naive = model.sigma2();
    let var_conservative = blup.pred_err_cov.quadratic_form(&w) + var_naive;
    Ok(PbrtEstimate { mu, var_naive, var_conservative })
}

/// `q`-quantile of the log-normal with log-mean `mu` and log-variance `var`.
pub fn percentile<T: Real>(mu: T, var: T, q: f64) -> Result<T> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::InvalidQuantile(q));
    }
    if !(var >= T::zero()) {
        return Err(Error::InvalidInput(format!("variance must be non-negative, got {var}")));
    }
    let z = T::lit(normal_quantile(q));
    Ok((mu + z * var.sqrt()).exp())
}

/// Log-normal density at `t`; zero for `t <= 0`.
pub fn lognormal_pdf<T: Real>(t: T, mu: T, var: T) -> T {
    if !(t > T::zero()) {
        return T::zero();
    }
    let d = t.ln() - mu;
    let two_pi = T::lit(2.0 * PI);
    (-(d * d) / (T::lit(2.0) * var)).exp() / (t * (two_pi * var).sqrt())
}

/// Naive and conservative densities on `grid`, as `(t, naive, conservative)`.
pub fn density_curve<T: Real>(estimate: &PbrtEstimate<T>, grid: &[T]) -> Vec<(T, T, T)> {
    grid.iter()
        .map(|&t| {
            (
                t,
                lognormal_pdf(t, estimate.mu, estimate.var_naive),
                lognormal_pdf(t, estimate.mu, estimate.var_conservative),
            )
        })
        .collect()
}

/// Inverse standard normal CDF (Wichura's AS241, about 1e-16 relative accuracy).
pub fn normal_quantile(p: f64) -> f64 {
    debug_assert!(p > 0.0 && p < 1.0);
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return q * poly(&A, r) / poly(&B, r);
    }
    let r = if q < 0.0 { p } else { 1.0 - p };
    let r = (-r.ln()).sqrt();
    let x = if r <= 5.0 {
        let r = r - 1.6;
        poly(&C, r) / poly(&D, r)
    } else {
        let r = r - 5.0;
        poly(&E, r) / poly(&F, r)
    };
    if q < 0.0 {
        -x
    } else {
        x
    }
}

fn poly(c: &[f64; 8], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &k| acc * x + k)
}

const A: [f64; 8] = [
    3.387_132_872_796_366_5,
    133.141_667_891_784_38,
    1_971.590_950_306_551_3,
    13_731.693_765_509_461,
    45_921.953_931_549_87,
    67_265.770_927_008_7,
    33_430.575_583_588_13,
    2_509.080_928_730_122_7,
];
const B: [f64; 8] = [
    1.0,
    42.313_330_701_600_91,
    687.187_007_492_057_9,
    5_394.196_021_424_751,
    21_213.794_301_586_597,
    39_307.895_800_092_71,
    28_729.085_735_721_943,
    5_226.495_278_852_545,
];
const C: [f64; 8] = [
    1.423_437_110_749_683_5,
    4.630_337_846_156_546,
    5.769_497_221_460_691,
    3.647_848_324_763_204_5,
    1.270_458_252_452_368_4,
    0.241_780_725_177_450_6,
    0.022_723_844_989_269_184,
    7.745_450_142_783_414e-4,
];
const D: [f64; 8] = [
    1.0,
    2.053_191_626_637_759,
    1.676_384_830_183_803_8,
    0.689_767_334_985_1,
    0.148_103_976_427_480_08,
    0.015_198_666_563_616_457,
    5.475_938_084_995_345e-4,
    1.050_750_071_644_416_9e-9,
];
const E: [f64; 8] = [
    6.657_904_643_501_103,
    5.463_784_911_164_114,
    1.784_826_539_917_291_3,
    0.296_560_571_828_504_9,
    0.026_532_189_526_576_124,
    0.001_242_660_947_388_078_4,
    2.711_555_568_743_487_6e-5,
    2.010_334_399_292_288_1e-7,
];
const F: [f64; 8] = [
    1.0,
    0.599_832_206_555_888,
    0.136_929_880_922_735_8,
    0.014_875_361_290_850_615,
    7.868_691_311_456_133e-4,
    1.846_318_317_510_054_8e-5,
    1.421_511_758_316_446e-7,
    2.043_131_102_900_898_7e-15,
];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FitInfo, ModelSpec};
    use crate::numerics::SymMatrix;

    /// Φ via the erf Maclaurin series (converges for every x, slow for large |x|).
    fn normal_cdf_series(x: f64) -> f64 {
        let z = x / 2f64.sqrt();
        let mut term = z;
        let mut sum = z;
        let mut n = 0u32;
        while term.abs() > 1e-18 * sum.abs().max(1e-300) && n < 400 {
            n += 1;
            term *= -z * z / n as f64;
            sum += term / (2 * n + 1) as f64;
        }
        0.5 * (1.0 + 2.0 / PI.sqrt() * sum)
    }

    fn quantile_by_bisection(p: f64) -> f64 {
        let (mut lo, mut hi) = (-8.0, 8.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if normal_cdf_series(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn quantile_matches_independent_route() {
        for &p in &[0.01, 0.05, 0.1, 0.25, 0.4, 0.5, 0.6, 0.75, 0.9, 0.95, 0.99] {
            let a = normal_quantile(p);
            let b = quantile_by_bisection(p);
            assert!((a - b).abs() < 1e-10, "p={p}: {a} vs {b}");
        }
    }

    #[test]
    fn quantile_known_values() {
        assert_eq!(normal_quantile(0.5), 0.0);
        assert!((normal_quantile(0.9) - 1.281_551_565_544_600_4).abs() < 1e-14);
        assert!((normal_quantile(0.975) - 1.959_963_984_540_054).abs() < 1e-14);
        assert!((normal_quantile(1e-10) + 6.361_340_902_404_056).abs() < 1e-9);
    }

    #[test]
    fn percentile_examples() {
        assert!((percentile(0.0f64, 1.0, 0.5).unwrap() - 1.0).abs() < 1e-12);
        let z90 = quantile_by_bisection(0.9);
        assert!((percentile(0.0f64, 1.0, 0.9).unwrap() - z90.exp()).abs() < 1e-9);
        assert!((percentile(0.0f64, 1.0, 0.9).unwrap() - 3.602_224_3).abs() < 1e-6);
        for q in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(percentile(0.0f64, 1.0, q), Err(Error::InvalidQuantile(_))));
        }
    }

    #[test]
    fn pdf_integrates_to_one() {
        let (mu, var) = (-0.3f64, 0.09);
        let n = 200_000;
        let h = 20.0 / n as f64;
        let total: f64 = (1..n).map(|i| lognormal_pdf(i as f64 * h, mu, var)).sum::<f64>() * h;
        assert!((total - 1.0).abs() < 1e-6);
        assert_eq!(lognormal_pdf(0.0, mu, var), 0.0);
        assert_eq!(lognormal_pdf(-1.0, mu, var), 0.0);
    }

    #[test]
    fn pdf_at_unit_time() {
        let v = lognormal_pdf(1.0f64, 0.0, 1.0);
        assert!((v - 1.0 / (2.0 * PI).sqrt()).abs() < 1e-15);
        assert!((v - 0.39894).abs() < 1e-5);
    }

    #[test]
    fn zero_coefficients_give_unit_median() {
        let model = TrainedModel::new(
            ModelSpec::default(),
            DVector::zeros(9),
            0.1,
            SymMatrix::identity(9),
            SymMatrix::zeros(9),
            1.5,
            FitInfo { converged: true, loglik: 0.0, iterations: 0, seed: 0 },
        )
        .unwrap();
        let blup = BlupResult::population(&model);
        for t in [0.5, 1.5, 4.0] {
            let e = estimate_pbrt(&model, &blup, StimulusId(2), t).unwrap();
            assert_eq!(e.mu, 0.0);
            assert_eq!(e.median(), 1.0);
        }
    }

    #[test]
    fn estimate_uses_selected_block() {
        let spec = ModelSpec::default();
        let beta = DVector::from_fn(9, |i, _| i as f64 * 0.1);
        let model = TrainedModel::new(
            spec,
            beta,
            0.04,
            SymMatrix::identity(9),
            SymMatrix::zeros(9),
            1.5,
            FitInfo { converged: true, loglik: 0.0, iterations: 0, seed: 0 },
        )
        .unwrap();
        let blup = BlupResult::population(&model);
        let e = estimate_pbrt(&model, &blup, StimulusId(1), 2.0).unwrap();
        // block 1 is beta[3..6] = (0.3, 0.4, 0.5)
        assert!((e.mu - (0.3 + 0.4 * 2.0 + 0.5 * 4.0)).abs() < 1e-12);
        assert_eq!(e.var_naive, 0.04);
        assert!((e.var_conservative - (1.0 + 4.0 + 16.0 + 0.04)).abs() < 1e-12);
        assert!(estimate_pbrt(&model, &blup, StimulusId(3), 2.0).is_err());
        assert!(estimate_pbrt(&model, &blup, StimulusId(0), 0.0).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn percentile_monotone_in_q(mu in -2.0f64..2.0, var in 1e-4f64..2.0, a in 0.001f64..0.999, b in 0.001f64..0.999) {
                let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                prop_assert!(percentile(mu, var, lo).unwrap() <= percentile(mu, var, hi).unwrap());
            }

            #[test]
            fn tenth_and_ninetieth_multiply_to_squared_median(mu in -2.0f64..2.0, var in 1e-4f64..2.0) {
                let prod = percentile(mu, var, 0.1).unwrap() * percentile(mu, var, 0.9).unwrap();
                prop_assert!((prod - (2.0 * mu).exp()).abs() < 1e-10 * (2.0 * mu).exp());
            }

            #[test]
            fn conservative_interval_nests_naive(mu in -2.0f64..2.0, var in 1e-4f64..1.0, extra in 0.0f64..1.0, q in 0.001f64..0.999) {
                let naive = percentile(mu, var, q).unwrap();
                let cons = percentile(mu, var + extra, q).unwrap();
                if q >= 0.5 {
                    prop_assert!(cons >= naive);
                } else {
                    prop_assert!(cons <= naive);
                }
            }

            #[test]
            fn quantile_antisymmetric(p in 1e-8f64..0.5) {
                prop_assert!((normal_quantile(p) + normal_quantile(1.0 - p)).abs() < 1e-9);
            }
        }
    }
}
