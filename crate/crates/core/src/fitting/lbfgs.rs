//! L-BFGS with a backtracking (sufficient-decrease) line search.
//!
//! The search direction comes from the two-loop recursion over the last
//! `memory` curvature pairs; pairs with non-positive curvature are skipped.

use std::collections::VecDeque;

use nalgebra::DVector;

use super::FitError;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    /// Number of stored `(s, y)` pairs.
    pub memory: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            gradient_tolerance: 1e-8,
            memory: 8,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<(), FitError> {
        if self.max_iterations == 0
            || self.memory == 0
            || self.gradient_tolerance.is_nan()
            || self.gradient_tolerance <= 0.0
        {
            return Err(FitError::InvalidConfig("solver options must all be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: DVector<f64>,
    pub value: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    /// True iff the final gradient norm is within tolerance.
    pub converged: bool,
}

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;

fn finite(v: f64, g: &DVector<f64>) -> bool {
    v.is_finite() && g.iter().all(|x| x.is_finite())
}

/// Minimizes `f` from `x0`. The closure writes the gradient into its second
/// argument and returns the objective value.
pub fn minimize<F>(mut f: F, x0: DVector<f64>, opts: &SolverOptions) -> Result<Minimum, FitError>
where
    F: FnMut(&DVector<f64>, &mut DVector<f64>) -> f64,
{
    opts.validate()?;
    let dim = x0.len();
    let mut x = x0;
    let mut g = DVector::zeros(dim);
    let mut fx = f(&x, &mut g);
    if !finite(fx, &g) {
        return Err(FitError::NonFiniteObjective);
    }

    let mut history: VecDeque<(DVector<f64>, DVector<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let mut iterations = 0;
    let mut x_new = DVector::zeros(dim);
    let mut g_new = DVector::zeros(dim);

    while g.norm() > opts.gradient_tolerance && iterations < opts.max_iterations {
        let mut d = two_loop(&g, &history);
        let mut slope = d.dot(&g);
        if slope.is_nan() || slope >= 0.0 {
            history.clear();
            d = -&g;
            slope = -g.norm_squared();
        }
        // without curvature information, start with a unit-length step
        let mut alpha = if history.is_empty() {
            (1.0 / d.norm()).min(1.0)
        } else {
            1.0
        };

        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            x_new.copy_from(&x);
            x_new.axpy(alpha, &d, 1.0);
            let f_new = f(&x_new, &mut g_new);
            if !finite(f_new, &g_new) {
                return Err(FitError::NonFiniteObjective);
            }
            if f_new <= fx + ARMIJO_C1 * alpha * slope {
                accepted = Some(f_new);
                break;
            }
            // minimizer of the quadratic through f(0), f'(0) and f(alpha), safeguarded
            let denom = 2.0 * (f_new - fx - slope * alpha);
            let trial = if denom > 0.0 {
                -slope * alpha * alpha / denom
            } else {
                0.5 * alpha
            };
            alpha = trial.clamp(0.1 * alpha, 0.5 * alpha);
        }
        let Some(f_new) = accepted else { break };
        iterations += 1;

        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        let decrease = fx - f_new;
        std::mem::swap(&mut x, &mut x_new);
        std::mem::swap(&mut g, &mut g_new);
        fx = f_new;

        if sy > f64::EPSILON * s.norm() * y.norm() && sy > 0.0 {
            if history.len() == opts.memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        if decrease <= 0.0 {
            // step too small to change the objective
            break;
        }
    }

    let gradient_norm = g.norm();
    Ok(Minimum {
        x,
        value: fx,
        gradient_norm,
        iterations,
        converged: gradient_norm <= opts.gradient_tolerance,
    })
}

fn two_loop(g: &DVector<f64>, history: &VecDeque<(DVector<f64>, DVector<f64>, f64)>) -> DVector<f64> {
    let mut q = g.clone();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * s.dot(&q);
        q.axpy(-a, y, 1.0);
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        q *= s.dot(y) / y.norm_squared();
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.into_iter().rev()) {
        let b = rho * y.dot(&q);
        q.axpy(a - b, s, 1.0);
    }
    -q
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &DVector<f64>, g: &mut DVector<f64>) -> f64 {
        let (a, b) = (x[0], x[1]);
        g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
        g[1] = 200.0 * (b - a * a);
        (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
    }

    #[test]
    fn quadratic_bowl() {
        let target = DVector::from_vec(vec![1.0, 2.0]);
        let res = minimize(
            |x, g| {
                let d = x - &target;
                g.copy_from(&(2.0 * &d));
                d.norm_squared()
            },
            DVector::zeros(2),
            &SolverOptions::default(),
        )
        .unwrap();
        assert!((res.x - target).norm() < 1e-8);
        assert!(res.converged);
        assert!(res.gradient_norm < 1e-8);
    }

    #[test]
    fn rosenbrock_from_standard_start() {
        let opts = SolverOptions {
            max_iterations: 1000,
            ..Default::default()
        };
        let res = minimize(rosenbrock, DVector::from_vec(vec![-1.2, 1.0]), &opts).unwrap();
        assert!(
            (res.x[0] - 1.0).abs() < 1e-6 && (res.x[1] - 1.0).abs() < 1e-6,
            "{:?}",
            res
        );
    }

    #[test]
    fn objective_never_increases() {
        let x0 = DVector::from_vec(vec![-1.2, 1.0]);
        let mut g = DVector::zeros(2);
        let f0 = rosenbrock(&x0, &mut g);
        for iters in 1..30 {
            let opts = SolverOptions {
                max_iterations: iters,
                ..Default::default()
            };
            let res = minimize(rosenbrock, x0.clone(), &opts).unwrap();
            assert!(res.value <= f0);
        }
    }

    #[test]
    fn already_at_minimum() {
        let res = minimize(
            |x, g| {
                g.copy_from(&(2.0 * x));
                x.norm_squared()
            },
            DVector::zeros(3),
            &SolverOptions::default(),
        )
        .unwrap();
        assert_eq!(res.iterations, 0);
        assert!(res.converged);
    }

    #[test]
    fn non_finite_objective() {
        let res = minimize(
            |_, g| {
                g.fill(0.0);
                f64::NAN
            },
            DVector::zeros(2),
            &SolverOptions::default(),
        );
        assert!(matches!(res, Err(FitError::NonFiniteObjective)));

        // finite at the start, blows up along the first step
        let res = minimize(
            |x, g| {
                g.fill(-1.0);
                if x[0] > 0.0 {
                    f64::INFINITY
                } else {
                    -x[0]
                }
            },
            DVector::zeros(1),
            &SolverOptions::default(),
        );
        assert!(matches!(res, Err(FitError::NonFiniteObjective)));
    }
}
