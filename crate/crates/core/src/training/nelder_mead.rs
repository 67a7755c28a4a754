//! Derivative-free simplex minimization with dimension-adaptive coefficients
//! (reflection 1, expansion 1 + 2/n, contraction 3/4 − 1/(2n), shrink 1 − 1/n).

use crate::scalar::Real;

#[derive(Debug, Clone)]
pub struct NelderMeadOptions<T> {
    pub max_iterations: usize,
    /// Converged once the best value improves by less than this over
    /// `n + 1` consecutive iterations (one full simplex cycle) and the
    /// simplex values span less than this.
    pub tolerance: T,
}

#[derive(Debug, Clone)]
pub struct NelderMeadResult<T> {
    pub x: Vec<T>,
    pub fx: T,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    /// Best-value improvement over the last full cycle.
    pub last_cycle_improvement: T,
}

struct Coefficients<T> {
    reflect: T,
    expand: T,
    contract: T,
    shrink: T,
}

impl<T: Real> Coefficients<T> {
    fn adaptive(n: usize) -> Self {
        let n = T::from_usize(n.max(1)).unwrap();
        let one = T::one();
        let two = T::lit(2.0);
        Self {
            reflect: one,
            expand: one + two / n,
            contract: T::lit(0.75) - one / (two * n),
            shrink: one - one / n,
        }
    }
}

/// Minimizes `f` starting from the simplex `x0, x0 + steps[i]·e_i`.
///
/// Non-finite objective values are treated as `+∞`.
pub fn minimize<T, F>(mut f: F, x0: &[T], steps: &[T], opts: &NelderMeadOptions<T>) -> NelderMeadResult<T>
where
    T: Real,
    F: FnMut(&[T]) -> T,
{
    let n = x0.len();
    assert_eq!(steps.len(), n, "one step per coordinate");
    let mut evaluations = 0usize;
    let mut eval = |x: &[T], evaluations: &mut usize| {
        *evaluations += 1;
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            T::max_value().unwrap()
        }
    };

    let mut simplex: Vec<Vec<T>> = Vec::with_capacity(n + 1);
    simplex.push(x0.to_vec());
    for i in 0..n {
        let mut v = x0.to_vec();
        v[i] += steps[i];
        simplex.push(v);
    }
    let mut values: Vec<T> = simplex.iter().map(|v| eval(v, &mut evaluations)).collect();

    if n == 0 {
        return NelderMeadResult {
            x: Vec::new(),
            fx: values[0],
            iterations: 0,
            evaluations,
            converged: true,
            last_cycle_improvement: T::zero(),
        };
    }

    let c = Coefficients::<T>::adaptive(n);
    let mut order: Vec<usize> = (0..=n).collect();
    let mut best_history: Vec<T> = Vec::with_capacity(opts.max_iterations + 1);
    let mut converged = false;
    let mut last_improvement = T::max_value().unwrap();
    let mut iterations = 0usize;
    let mut centroid = vec![T::zero(); n];
    let mut trial = vec![T::zero(); n];
    let mut trial2 = vec![T::zero(); n];

    sort_order(&mut order, &values);
    best_history.push(values[order[0]]);

    while iterations < opts.max_iterations {
        iterations += 1;
        let best = order[0];
        let worst = order[n];
        let second_worst = order[n - 1];

        centroid.iter_mut().for_each(|v| *v = T::zero());
        for &k in &order[..n] {
            for (cj, xj) in centroid.iter_mut().zip(&simplex[k]) {
                *cj += *xj;
            }
        }
        let inv_n = T::one() / T::from_usize(n).unwrap();
        centroid.iter_mut().for_each(|v| *v *= inv_n);

        // reflection
        for j in 0..n {
            trial[j] = centroid[j] + c.reflect * (centroid[j] - simplex[worst][j]);
        }
        let f_r = eval(&trial, &mut evaluations);

        if f_r < values[best] {
            for j in 0..n {
                trial2[j] = centroid[j] + c.expand * (trial[j] - centroid[j]);
            }
            let f_e = eval(&trial2, &mut evaluations);
            if f_e < f_r {
                simplex[worst].copy_from_slice(&trial2);
                values[worst] = f_e;
            } else {
                simplex[worst].copy_from_slice(&trial);
                values[worst] = f_r;
            }
        } else if f_r < values[second_worst] {
            simplex[worst].copy_from_slice(&trial);
            values[worst] = f_r;
        } else {
            let outside = f_r < values[worst];
            for j in 0..n {
                let toward = if outside { trial[j] } else { simplex[worst][j] };
                trial2[j] = centroid[j] + c.contract * (toward - centroid[j]);
            }
            let f_c = eval(&trial2, &mut evaluations);
            let accept = if outside { f_c <= f_r } else { f_c < values[worst] };
            if accept {
                simplex[worst].copy_from_slice(&trial2);
                values[worst] = f_c;
            } else {
                let anchor = simplex[best].clone();
                for k in 0..=n {
                    if k == best {
                        continue;
                    }
                    for j in 0..n {
                        simplex[k][j] = anchor[j] + c.shrink * (simplex[k][j] - anchor[j]);
                    }
                    values[k] = eval(&simplex[k], &mut evaluations);
                }
            }
        }

        sort_order(&mut order, &values);
        best_history.push(values[order[0]]);
        if iterations > n {
            last_improvement = best_history[iterations - (n + 1)] - best_history[iterations];
            let spread = values[order[n]] - values[order[0]];
            if last_improvement < opts.tolerance && spread < opts.tolerance {
                converged = true;
                break;
            }
        }
    }

    let best = order[0];
    NelderMeadResult {
        x: simplex[best].clone(),
        fx: values[best],
        iterations,
        evaluations,
        converged,
        last_cycle_improvement: last_improvement,
    }
}

fn sort_order<T: Real>(order: &mut [usize], values: &[T]) {
    order.sort_by(|&a, &b| {
        values[a]
            .partial_cmp(&values[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts(tol: f64) -> NelderMeadOptions<f64> {
        NelderMeadOptions { max_iterations: 20_000, tolerance: tol }
    }

    #[test]
    fn quadratic_bowl() {
        let f = |x: &[f64]| (x[0] - 1.0).powi(2) + 4.0 * (x[1] + 2.0).powi(2) + 0.5 * (x[2] - 0.3).powi(2);
        let r = minimize(f, &[0.0, 0.0, 0.0], &[0.5, 0.5, 0.5], &opts(1e-14));
        assert!(r.converged);
        assert!((r.x[0] - 1.0).abs() < 1e-4);
        assert!((r.x[1] + 2.0).abs() < 1e-4);
        assert!((r.x[2] - 0.3).abs() < 1e-4);
    }

    #[test]
    fn rosenbrock() {
        let f = |x: &[f64]| 100.0 * (x[1] - x[0] * x[0]).powi(2) + (1.0 - x[0]).powi(2);
        let r = minimize(f, &[-1.2, 1.0], &[0.1, 0.1], &opts(1e-16));
        assert!(r.fx < 1e-8, "fx = {}", r.fx);
    }

    #[test]
    fn nonfinite_values_are_avoided() {
        let f = |x: &[f64]| if x[0] < 0.0 { f64::NAN } else { (x[0] - 2.0).powi(2) };
        let r = minimize(f, &[1.0], &[0.5], &opts(1e-14));
        assert!((r.x[0] - 2.0).abs() < 1e-5);
    }

    #[test]
    fn iteration_cap_reports_not_converged() {
        let f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let r = minimize(f, &[5.0; 6], &[1.0; 6], &NelderMeadOptions { max_iterations: 5, tolerance: 1e-12 });
        assert!(!r.converged);
        assert_eq!(r.iterations, 5);
    }

    #[test]
    fn deterministic() {
        let f = |x: &[f64]| (x[0] - 0.1).powi(2) + (x[1] * x[0] - 0.4).powi(2) + x[2].abs();
        let a = minimize(f, &[1.0, 1.0, 1.0], &[0.3, 0.2, 0.1], &opts(1e-12));
        let b = minimize(f, &[1.0, 1.0, 1.0], &[0.3, 0.2, 0.1], &opts(1e-12));
        assert_eq!(a.x, b.x);
        assert_eq!(a.evaluations, b.evaluations);
    }
}
