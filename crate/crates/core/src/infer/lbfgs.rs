//! Limited-memory quasi-Newton maximization with backtracking line search.
//!
//! Works on the negative log density internally. The two-loop recursion
//! keeps the last ten curvature pairs; updates that would break positive
//! curvature are skipped rather than damped.

use std::collections::VecDeque;

use super::LogDensity;
use crate::error::{Error, Result};

const MEMORY: usize = 10;
const ARMIJO_C1: f64 = 1e-4;
/// Convergence: ||grad||_2 <= GRAD_TOL * (1 + |f|). Tighter than the 1e-5
/// contract callers rely on, leaving headroom for the final report.
const GRAD_TOL: f64 = 1e-6;

#[derive(Debug)]
pub(crate) struct OptOutcome {
    pub x: Vec<f64>,
    /// Log density (not its negation) at `x`.
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    /// (log density, gradient norm) per iteration.
    pub trace: Vec<(f64, f64)>,
    /// Whether the gradient tolerance was met. A false value still carries
    /// the best iterate found; the caller may refine it further.
    pub converged: bool,
}

pub(crate) fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn maximize<T: LogDensity + ?Sized>(
    target: &T,
    x0: &[f64],
    max_iter: usize,
) -> Result<OptOutcome> {
    let n = x0.len();
    let eval = |x: &[f64]| -> (f64, Vec<f64>) {
        let (v, mut g) = target.log_density_grad(x);
        for gi in g.iter_mut() {
            *gi = -*gi;
        }
        (-v, g)
    };

    let mut x = x0.to_vec();
    let (mut f, mut g) = eval(&x);
    if !f.is_finite() {
        return Err(Error::NonConvergence {
            message: "log density is not finite at the starting point".into(),
            trace: vec![(-f, norm2(&g))],
        });
    }

    let mut s_hist: VecDeque<Vec<f64>> = VecDeque::with_capacity(MEMORY);
    let mut y_hist: VecDeque<Vec<f64>> = VecDeque::with_capacity(MEMORY);
    let mut rho: VecDeque<f64> = VecDeque::with_capacity(MEMORY);
    let mut trace = Vec::new();
    let mut steepest_retry = false;

    for iter in 0..max_iter {
        let gnorm = norm2(&g);
        trace.push((-f, gnorm));
        if gnorm <= GRAD_TOL * (1.0 + f.abs()) {
            return Ok(OptOutcome {
                x,
                value: -f,
                grad_norm: gnorm,
                iterations: iter,
                trace,
                converged: true,
            });
        }

        // Two-loop recursion for d = -H * g.
        let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
        let m = s_hist.len();
        let mut alphas = vec![0.0; m];
        for j in (0..m).rev() {
            let a = rho[j] * dot(&s_hist[j], &d);
            alphas[j] = a;
            for (di, yi) in d.iter_mut().zip(&y_hist[j]) {
                *di -= a * yi;
            }
        }
        if m > 0 {
            let gamma = dot(&s_hist[m - 1], &y_hist[m - 1]) / dot(&y_hist[m - 1], &y_hist[m - 1]);
            for di in d.iter_mut() {
                *di *= gamma;
            }
        }
        for j in 0..m {
            let b = rho[j] * dot(&y_hist[j], &d);
            for (di, si) in d.iter_mut().zip(&s_hist[j]) {
                *di += (alphas[j] - b) * si;
            }
        }

        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            // Curvature information went stale; fall back to steepest descent.
            d = g.iter().map(|v| -v).collect();
            slope = -gnorm * gnorm;
            s_hist.clear();
            y_hist.clear();
            rho.clear();
        }

        // Backtracking Armijo search. The first iteration has no curvature
        // scale, so start conservatively.
        let mut step = if m == 0 { (1.0 / gnorm).min(1.0) } else { 1.0 };
        let mut accepted = false;
        let mut xn = vec![0.0; n];
        let mut fn_ = f;
        let mut gn: Vec<f64> = Vec::new();
        for _ in 0..60 {
            for i in 0..n {
                xn[i] = x[i] + step * d[i];
            }
            let (fv, gv) = eval(&xn);
            if fv.is_finite() && fv <= f + ARMIJO_C1 * step * slope {
                fn_ = fv;
                gn = gv;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            if !steepest_retry && !s_hist.is_empty() {
                s_hist.clear();
                y_hist.clear();
                rho.clear();
                steepest_retry = true;
                continue;
            }
            // No downhill step exists at machine precision along either
            // direction; report the iterate and let the caller polish it.
            return Ok(OptOutcome {
                x,
                value: -f,
                grad_norm: gnorm,
                iterations: iter,
                trace,
                converged: gnorm <= GRAD_TOL * (1.0 + f.abs()),
            });
        }
        steepest_retry = false;

        let s: Vec<f64> = (0..n).map(|i| xn[i] - x[i]).collect();
        let y: Vec<f64> = (0..n).map(|i| gn[i] - g[i]).collect();
        let sy = dot(&s, &y);
        if sy > 1e-10 * norm2(&s) * norm2(&y) {
            if s_hist.len() == MEMORY {
                s_hist.pop_front();
                y_hist.pop_front();
                rho.pop_front();
            }
            rho.push_back(1.0 / sy);
            s_hist.push_back(s);
            y_hist.push_back(y);
        }
        x = xn.clone();
        f = fn_;
        g = gn;
    }

    let gnorm = norm2(&g);
    Ok(OptOutcome {
        x,
        value: -f,
        grad_norm: gnorm,
        iterations: max_iter,
        trace,
        converged: gnorm <= GRAD_TOL * (1.0 + f.abs()),
    })
}
