//! Small dense Levenberg-Marquardt solver with box constraints.
//!
//! Problems here have at most a handful of parameters and residuals, so the
//! Jacobian is formed by central differences and the damped normal equations
//! are solved directly. Bounds are enforced by projecting every trial step
//! back into the box.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy)]
pub struct LmConfig {
    pub max_iterations: usize,
    /// Stop once `‖r‖∞` falls below this.
    pub tolerance: f64,
    /// Step used for the finite-difference Jacobian.
    pub jacobian_step: f64,
    pub initial_damping: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self { max_iterations: 200, tolerance: 1e-12, jacobian_step: 1e-7, initial_damping: 1e-3 }
    }
}

#[derive(Debug, Clone)]
pub struct LmReport {
    pub params: Vec<f64>,
    pub residuals: Vec<f64>,
    pub residual_inf: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn unbounded(n: usize) -> Self {
        Self { lower: vec![f64::NEG_INFINITY; n], upper: vec![f64::INFINITY; n] }
    }

    fn project(&self, x: &mut [f64]) {
        for (k, v) in x.iter_mut().enumerate() {
            *v = v.clamp(self.lower[k], self.upper[k]);
        }
    }
}

fn inf_norm(r: &[f64]) -> f64 {
    r.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn sq_norm(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum()
}

fn jacobian<F>(f: &F, x: &[f64], m: usize, bounds: &Bounds, step: f64) -> DMatrix<f64>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let n = x.len();
    let mut jac = DMatrix::zeros(m, n);
    let mut xp = x.to_vec();
    for k in 0..n {
        let h = step * x[k].abs().max(1.0);
        // one-sided at an active bound so we never evaluate outside the box
        let up = (x[k] + h).min(bounds.upper[k]);
        let down = (x[k] - h).max(bounds.lower[k]);
        xp[k] = up;
        let rp = f(&xp);
        xp[k] = down;
        let rm = f(&xp);
        xp[k] = x[k];
        let width = up - down;
        if width <= 0.0 {
            continue;
        }
        for i in 0..m {
            jac[(i, k)] = (rp[i] - rm[i]) / width;
        }
    }
    jac
}

/// Minimises `½‖f(x)‖²` from `x0` inside `bounds`.
pub fn minimize<F>(f: F, x0: &[f64], bounds: &Bounds, cfg: &LmConfig) -> LmReport
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let mut x = x0.to_vec();
    bounds.project(&mut x);
    let mut r = f(&x);
    let m = r.len();
    let mut cost = sq_norm(&r);
    let mut lambda = cfg.initial_damping;
    let mut iterations = 0;

    while iterations < cfg.max_iterations && inf_norm(&r) >= cfg.tolerance {
        iterations += 1;
        let jac = jacobian(&f, &x, m, bounds, cfg.jacobian_step);
        let jt = jac.transpose();
        let jtj = &jt * &jac;
        let g = &jt * DVector::from_column_slice(&r);

        let mut improved = false;
        for _ in 0..12 {
            let mut a = jtj.clone();
            for k in 0..a.ncols() {
                a[(k, k)] += lambda * jtj[(k, k)].max(1e-12);
            }
            let Some(step) = a.lu().solve(&(-&g)) else {
                lambda *= 10.0;
                continue;
            };
            let mut trial: Vec<f64> = x.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            bounds.project(&mut trial);
            let rt = f(&trial);
            let ct = sq_norm(&rt);
            if ct.is_finite() && ct < cost {
                x = trial;
                r = rt;
                cost = ct;
                lambda = (lambda / 3.0).max(1e-15);
                improved = true;
                break;
            }
            lambda *= 8.0;
        }
        if !improved {
            break;
        }
    }

    let residual_inf = inf_norm(&r);
    LmReport { converged: residual_inf < cfg.tolerance, params: x, residuals: r, residual_inf, iterations }
}
