//! Quasi-Newton minimization with finite-difference gradients.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BfgsOptions {
    /// Stop once the gradient's infinity norm drops below this.
    pub grad_tol: f64,
    /// Stop once `|f_new - f| <= rel_tol * max(|f|, |f_new|)`.
    pub rel_tol: f64,
    pub max_iter: usize,
    /// Armijo sufficient-decrease constant.
    pub armijo_c: f64,
    pub shrink: f64,
    pub max_backtracks: usize,
    /// Relative central-difference step, scaled by `max(|x_i|, 1)`.
    pub fd_step: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            grad_tol: 1e-6,
            rel_tol: 1e-10,
            max_iter: 200,
            armijo_c: 1e-4,
            shrink: 0.5,
            max_backtracks: 40,
            fd_step: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub converged: bool,
    pub grad_norm: f64,
}

/// Central-difference gradient of `f` at `x`.
pub fn fd_gradient<F: Fn(&[f64]) -> f64>(f: &F, x: &[f64], rel_step: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = rel_step * x[i].abs().max(1.0);
            xp[i] = x[i] + h;
            let fp = f(&xp);
            xp[i] = x[i] - h;
            let fm = f(&xp);
            xp[i] = x[i];
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// BFGS on the inverse Hessian with a backtracking Armijo line search.
/// Accepted iterates never increase `f`. A failed line search returns the
/// best point found with `converged = false`.
pub fn bfgs_minimize<F: Fn(&[f64]) -> f64>(f: F, x0: &[f64], opts: &BfgsOptions) -> BfgsResult {
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut fx = f(&x);
    let mut g = fd_gradient(&f, &x, opts.fd_step);
    let out = |x: Vec<f64>, f: f64, it: usize, conv: bool, g: &[f64]| BfgsResult {
        x,
        f,
        iterations: it,
        converged: conv,
        grad_norm: inf_norm(g),
    };
    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return out(x, fx, 0, false, &g);
    }
    if inf_norm(&g) < opts.grad_tol {
        return out(x, fx, 0, true, &g);
    }
    let mut h = vec![0.0; n * n];
    let reset = |h: &mut [f64], scale: f64| {
        h.fill(0.0);
        for i in 0..n {
            h[i * n + i] = scale;
        }
    };
    reset(&mut h, 1.0);
    let mut first = true;
    let mut x_new = vec![0.0; n];

    for it in 1..=opts.max_iter {
        let mut p: Vec<f64> = (0..n).map(|i| -dot(&h[i * n..(i + 1) * n], &g)).collect();
        let mut slope = dot(&g, &p);
        if !(slope < 0.0) {
            reset(&mut h, 1.0);
            p = g.iter().map(|v| -v).collect();
            slope = dot(&g, &p);
        }
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..opts.max_backtracks {
            for i in 0..n {
                x_new[i] = x[i] + alpha * p[i];
            }
            let f_new = f(&x_new);
            if f_new.is_finite() && f_new <= fx + opts.armijo_c * alpha * slope {
                accepted = Some(f_new);
                break;
            }
            alpha *= opts.shrink;
        }
        let Some(f_new) = accepted else {
            return out(x, fx, it - 1, false, &g);
        };
        let g_new = fd_gradient(&f, &x_new, opts.fd_step);
        if g_new.iter().any(|v| !v.is_finite()) {
            return out(x_new.clone(), f_new, it, false, &g_new);
        }
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let rel_change = (fx - f_new).abs() <= opts.rel_tol * fx.abs().max(f_new.abs());
        x.copy_from_slice(&x_new);
        fx = f_new;
        g = g_new;
        if inf_norm(&g) < opts.grad_tol || rel_change {
            return out(x, fx, it, true, &g);
        }

        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if first {
                reset(&mut h, sy / dot(&y, &y));
                first = false;
            }
            // H <- (I - rho s y^T) H (I - rho y s^T) + rho s s^T
            let rho = 1.0 / sy;
            let hy: Vec<f64> = (0..n).map(|i| dot(&h[i * n..(i + 1) * n], &y)).collect();
            let yhy = dot(&y, &hy);
            for i in 0..n {
                for j in 0..n {
                    h[i * n + j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
                }
            }
        }
    }
    out(x, fx, opts.max_iter, false, &g)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shifted_parabola() {
        let r = bfgs_minimize(|w: &[f64]| (w[0] - 3.0).powi(2), &[0.0], &BfgsOptions::default());
        assert!((r.x[0] - 3.0).abs() < 1e-8, "{r:?}");
        assert!(r.iterations <= 10);
        assert!(r.converged);
    }

    #[test]
    fn rosenbrock() {
        let rosen = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let r = bfgs_minimize(rosen, &[-1.2, 1.0], &BfgsOptions::default());
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 1.0).abs() < 1e-6, "{r:?}");
    }

    #[test]
    fn stationary_start_returns_immediately() {
        let r = bfgs_minimize(
            |x: &[f64]| x[0] * x[0] + x[1] * x[1],
            &[0.0, 0.0],
            &BfgsOptions::default(),
        );
        assert_eq!(r.iterations, 0);
        assert!(r.converged);
        assert_eq!(r.x, vec![0.0, 0.0]);
    }

    #[test]
    fn non_finite_start_is_not_converged() {
        let r = bfgs_minimize(|_: &[f64]| f64::INFINITY, &[1.0], &BfgsOptions::default());
        assert!(!r.converged);
        assert_eq!(r.iterations, 0);
    }
}
