//! Bound-constrained Levenberg–Marquardt for small dense problems.

use nalgebra::{DMatrix, DVector};

pub(crate) struct LmOptions {
    pub max_iterations: usize,
    /// Stop when the relative cost decrease of an accepted step falls below this.
    pub cost_tol: f64,
    /// Stop when every relative parameter change falls below this.
    pub step_tol: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            cost_tol: 1e-15,
            step_tol: 1e-13,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LmOutcome {
    pub params: Vec<f64>,
    /// Sum of squared residuals.
    pub cost: f64,
    pub converged: bool,
}

/// Residuals and Jacobian of a least-squares problem at a parameter point.
pub(crate) trait Problem {
    fn n_residuals(&self) -> usize;
    fn residuals(&self, p: &[f64], out: &mut [f64]);
    /// Row-major `n_residuals × n_params` Jacobian of the residuals.
    fn jacobian(&self, p: &[f64], out: &mut DMatrix<f64>);
}

fn sum_sq(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum()
}

/// Minimizes the squared residual norm of `problem` inside `[lo, hi]`.
///
/// Parameters with `free[k] == false` stay at their starting value. A free
/// parameter sitting on a bound with the descent direction pointing out of
/// the box is held for that iteration; trial points are clamped to the box.
pub(crate) fn minimize<P: Problem>(
    problem: &P,
    start: &[f64],
    lo: &[f64],
    hi: &[f64],
    free: &[bool],
    opts: &LmOptions,
) -> LmOutcome {
    let np = start.len();
    let nr = problem.n_residuals();
    let clamp = |p: &mut [f64]| {
        for k in 0..np {
            p[k] = p[k].clamp(lo[k], hi[k]);
        }
    };
    let mut p = start.to_vec();
    clamp(&mut p);
    let mut r = vec![0.0; nr];
    problem.residuals(&p, &mut r);
    let mut cost = sum_sq(&r);
    if !cost.is_finite() {
        return LmOutcome { params: p, cost, converged: false };
    }
    let mut jac = DMatrix::zeros(nr, np);
    let mut trial = vec![0.0; np];
    let mut r_trial = vec![0.0; nr];
    let mut lambda = -1.0;
    let mut converged = false;
    let mut iterations = 0;

    'outer: while iterations < opts.max_iterations {
        iterations += 1;
        if cost == 0.0 {
            converged = true;
            break;
        }
        problem.jacobian(&p, &mut jac);
        let rv = DVector::from_column_slice(&r);
        let jtj = jac.transpose() * &jac;
        let g = jac.transpose() * rv;

        let active: Vec<usize> = (0..np)
            .filter(|&k| {
                free[k]
                    && !((p[k] <= lo[k] && g[k] > 0.0) || (p[k] >= hi[k] && g[k] < 0.0))
            })
            .collect();
        if active.is_empty() {
            converged = true;
            break;
        }
        let na = active.len();
        let scale: Vec<f64> = active.iter().map(|&k| jtj[(k, k)].max(1e-300)).collect();
        if lambda < 0.0 {
            lambda = 1e-3;
        }

        loop {
            let mut a = DMatrix::zeros(na, na);
            let mut b = DVector::zeros(na);
            for (ia, &ka) in active.iter().enumerate() {
                b[ia] = -g[ka];
                for (ib, &kb) in active.iter().enumerate() {
                    a[(ia, ib)] = jtj[(ka, kb)];
                }
                a[(ia, ia)] += lambda * scale[ia];
            }
            let step = match a.clone().cholesky() {
                Some(ch) => ch.solve(&b),
                None => match a.lu().solve(&b) {
                    Some(s) => s,
                    None => {
                        lambda *= 10.0;
                        if lambda > 1e20 {
                            break 'outer;
                        }
                        continue;
                    }
                },
            };
            trial.copy_from_slice(&p);
            for (ia, &ka) in active.iter().enumerate() {
                trial[ka] += step[ia];
            }
            clamp(&mut trial);
            problem.residuals(&trial, &mut r_trial);
            let new_cost = sum_sq(&r_trial);
            if new_cost.is_finite() && new_cost < cost {
                let small_step = (0..np).all(|k| {
                    (trial[k] - p[k]).abs() <= opts.step_tol * (p[k].abs() + opts.step_tol)
                });
                let small_decrease = cost - new_cost <= opts.cost_tol * cost;
                p.copy_from_slice(&trial);
                std::mem::swap(&mut r, &mut r_trial);
                cost = new_cost;
                lambda = (lambda / 3.0).max(1e-15);
                if small_step || small_decrease {
                    converged = true;
                    break 'outer;
                }
                break;
            }
            let moved = (0..np).any(|k| trial[k] != p[k]);
            lambda *= 4.0;
            if !moved || lambda > 1e16 {
                // no representable descent left: stationary to working precision
                converged = true;
                break 'outer;
            }
        }
    }
    LmOutcome { params: p, cost, converged }
}
