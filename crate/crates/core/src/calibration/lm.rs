//! Bound-constrained Levenberg–Marquardt for small dense problems.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

/// A residual function with a Jacobian. `State` carries whatever the
/// Jacobian needs from the residual evaluation at the same point.
pub trait LeastSquares {
    type State;

    fn residuals(&self, x: &[f64]) -> Option<(Vec<f64>, Self::State)>;

    fn jacobian(&self, x: &[f64], residuals: &[f64], state: &Self::State) -> Option<DMatrix<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmSettings {
    pub max_iterations: usize,
    /// Relative reduction of the cost below which iteration stops.
    pub ftol: f64,
    /// Bound on the range-scaled projected gradient relative to the cost.
    pub gtol: f64,
    /// Relative step length below which iteration stops.
    pub xtol: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    CostTolerance,
    GradientTolerance,
    StepTolerance,
    /// The damping grew without finding a decrease.
    NoProgress,
    MaxIterations,
    /// The Jacobian could not be evaluated.
    JacobianFailure,
}

impl Termination {
    pub fn converged(self) -> bool {
        matches!(
            self,
            Termination::CostTolerance
                | Termination::GradientTolerance
                | Termination::StepTolerance
        )
    }
}

#[derive(Debug, Clone)]
pub struct LmOutcome {
    pub x: Vec<f64>,
    pub cost: f64,
    pub initial_cost: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
}

fn half_norm2(r: &[f64]) -> f64 {
    0.5 * r.iter().map(|v| v * v).sum::<f64>()
}

/// Minimizes `½‖r(x)‖²` subject to `lower ≤ x ≤ upper` from a feasible `x0`.
///
/// Returns `None` when the residuals cannot be evaluated at `x0`.
pub fn minimize<P: LeastSquares>(
    problem: &P,
    x0: &[f64],
    lower: &[f64],
    upper: &[f64],
    settings: &LmSettings,
) -> Option<LmOutcome> {
    let n = x0.len();
    let range: Vec<f64> = (0..n).map(|i| upper[i] - lower[i]).collect();
    let mut x: Vec<f64> = (0..n).map(|i| x0[i].clamp(lower[i], upper[i])).collect();
    let (mut r, mut state) = problem.residuals(&x)?;
    let mut evaluations = 1;
    let mut cost = half_norm2(&r);
    let initial_cost = cost;
    let outcome = |x: Vec<f64>, cost: f64, iterations, evaluations, termination| LmOutcome {
        x,
        cost,
        initial_cost,
        iterations,
        evaluations,
        termination,
    };
    if cost == 0.0 {
        return Some(outcome(x, cost, 0, evaluations, Termination::CostTolerance));
    }

    let mut scale = vec![0.0f64; n];
    let mut mu = 0.0;
    let mut nu = 2.0;
    let mut fresh = true;
    let mut grad = DVector::zeros(n);
    let mut jtj = DMatrix::zeros(n, n);

    for iteration in 0..settings.max_iterations {
        if fresh {
            let jac = match problem.jacobian(&x, &r, &state) {
                Some(j) => j,
                None => {
                    return Some(outcome(
                        x,
                        cost,
                        iteration,
                        evaluations,
                        Termination::JacobianFailure,
                    ))
                }
            };
            let rv = DVector::from_column_slice(&r);
            grad = jac.tr_mul(&rv);
            jtj = jac.tr_mul(&jac);
            for i in 0..n {
                scale[i] = scale[i].max(jtj[(i, i)]);
            }
            let floor = scale.iter().cloned().fold(0.0, f64::max) * 1e-12 + f64::MIN_POSITIVE;
            for s in scale.iter_mut() {
                *s = s.max(floor);
            }
            if mu == 0.0 {
                mu = 1e-3;
            }
            fresh = false;

            // projected gradient in units of the bound ranges
            let pg = (0..n)
                .map(|i| {
                    let moved = (x[i] - grad[i]).clamp(lower[i], upper[i]) - x[i];
                    let g = if moved == 0.0 { 0.0 } else { grad[i] };
                    (g * range[i]).abs()
                })
                .fold(0.0, f64::max);
            if pg <= settings.gtol * cost {
                return Some(outcome(
                    x,
                    cost,
                    iteration,
                    evaluations,
                    Termination::GradientTolerance,
                ));
            }
        }

        // variables pinned at a bound with the gradient pushing outward
        let free: Vec<usize> = (0..n)
            .filter(|&i| {
                !((x[i] <= lower[i] && grad[i] > 0.0) || (x[i] >= upper[i] && grad[i] < 0.0))
            })
            .collect();
        if free.is_empty() {
            return Some(outcome(
                x,
                cost,
                iteration,
                evaluations,
                Termination::GradientTolerance,
            ));
        }
        let m = free.len();
        let mut a = DMatrix::zeros(m, m);
        let mut b = DVector::zeros(m);
        for (p, &i) in free.iter().enumerate() {
            b[p] = -grad[i];
            for (q, &j) in free.iter().enumerate() {
                a[(p, q)] = jtj[(i, j)];
            }
            a[(p, p)] += mu * scale[i];
        }
        let delta = match a.cholesky() {
            Some(ch) => ch.solve(&b),
            None => {
                mu *= nu;
                nu *= 2.0;
                if mu > 1e32 {
                    return Some(outcome(
                        x,
                        cost,
                        iteration,
                        evaluations,
                        Termination::NoProgress,
                    ));
                }
                continue;
            }
        };
        let mut trial = x.clone();
        for (p, &i) in free.iter().enumerate() {
            trial[i] = (x[i] + delta[p]).clamp(lower[i], upper[i]);
        }
        let step: DVector<f64> = DVector::from_iterator(n, (0..n).map(|i| trial[i] - x[i]));
        let step_rel = (0..n).map(|i| step[i].abs() / range[i]).fold(0.0, f64::max);
        if step_rel <= settings.xtol {
            return Some(outcome(
                x,
                cost,
                iteration,
                evaluations,
                Termination::StepTolerance,
            ));
        }

        let predicted = -(grad.dot(&step) + 0.5 * step.dot(&(&jtj * &step)));
        evaluations += 1;
        let trial_eval = problem.residuals(&trial);
        let trial_cost = trial_eval
            .as_ref()
            .map_or(f64::INFINITY, |(rt, _)| half_norm2(rt));
        let actual = cost - trial_cost;
        let rho = if predicted > 0.0 {
            actual / predicted
        } else {
            -1.0
        };

        if trial_cost.is_finite() && actual > 0.0 && rho > 1e-4 {
            let (rt, st) = trial_eval.expect("finite cost implies evaluation");
            let previous = cost;
            x = trial;
            r = rt;
            state = st;
            cost = trial_cost;
            mu *= (1.0 - (2.0 * rho - 1.0).powi(3)).max(1.0 / 3.0);
            nu = 2.0;
            fresh = true;
            if cost == 0.0 || actual <= settings.ftol * previous {
                return Some(outcome(
                    x,
                    cost,
                    iteration + 1,
                    evaluations,
                    Termination::CostTolerance,
                ));
            }
        } else {
            mu *= nu;
            nu *= 2.0;
            if mu > 1e32 {
                return Some(outcome(
                    x,
                    cost,
                    iteration + 1,
                    evaluations,
                    Termination::NoProgress,
                ));
            }
        }
    }
    let iterations = settings.max_iterations;
    Some(outcome(
        x,
        cost,
        iterations,
        evaluations,
        Termination::MaxIterations,
    ))
}
