//! Age curves: a deterministic penalized-spline basis over integer ages and
//! the rate-curve families evaluated on it.
//!
//! The basis has K columns: an intercept, a standardized-age linear column,
//! and K-2 thin-plate-style radial columns |x - t|^3 at evenly spaced age
//! quantiles, projected orthogonal to the intercept and linear columns and
//! rescaled to unit Euclidean norm. Coefficients beyond the second can then
//! share a single shrinkage scale with a uniform meaning.

use crate::error::{Error, Result};

/// Log rates are capped here before exponentiation so that absurd optimizer
/// or sampler proposals yield finite (if terrible) likelihoods instead of NaN.
pub(crate) const MAX_LOG_RATE: f64 = 40.0;

/// Rate increment scale for the increasing family.
pub(crate) const INCREASING_SCALE: f64 = 0.01;

#[derive(Clone, Debug)]
pub struct SplineBasis {
    n_ages: usize,
    k: usize,
    /// Row-major, `values[age * k + j]`.
    values: Vec<f64>,
}

impl SplineBasis {
    /// Builds the basis for ages `0..n_ages` with `k` columns. The
    /// construction is fully determined by `(n_ages, k)`.
    pub fn new(n_ages: usize, k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::Dimension(format!(
                "spline basis needs at least 2 columns, got {k}"
            )));
        }
        if n_ages < k {
            return Err(Error::Dimension(format!(
                "spline basis with {k} columns needs at least {k} ages, got {n_ages}"
            )));
        }
        let a_max = (n_ages - 1) as f64;
        let half = a_max / 2.0;
        let std_age = |a: f64| (a - half) / half;
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(k);
        cols.push(vec![1.0; n_ages]);
        cols.push((0..n_ages).map(|a| std_age(a as f64)).collect());
        for j in 1..=(k - 2) {
            let knot = std_age(a_max * j as f64 / (k - 1) as f64);
            let mut col: Vec<f64> = cols[1].iter().map(|&x| (x - knot).abs().powi(3)).collect();
            // Project out the constant and linear parts (modified Gram-Schmidt
            // against the first two columns), then rescale to unit norm.
            for base in &cols[..2] {
                let proj = dot(&col, base) / dot(base, base);
                for (c, b) in col.iter_mut().zip(base) {
                    *c -= proj * b;
                }
            }
            let norm = dot(&col, &col).sqrt();
            if norm < 1e-10 {
                return Err(Error::Dimension(format!(
                    "spline column {j} is degenerate for n_ages={n_ages}, k={k}"
                )));
            }
            for c in col.iter_mut() {
                *c /= norm;
            }
            cols.push(col);
        }
        let mut values = vec![0.0; n_ages * k];
        for (j, col) in cols.iter().enumerate() {
            for (a, &x) in col.iter().enumerate() {
                values[a * k + j] = x;
            }
        }
        Ok(SplineBasis { n_ages, k, values })
    }

    pub fn n_ages(&self) -> usize {
        self.n_ages
    }

    pub fn k(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn row(&self, age: usize) -> &[f64] {
        &self.values[age * self.k..(age + 1) * self.k]
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// How a rate varies over age.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CurveFamily {
    /// Penalized spline on the log rate.
    Smooth,
    /// Rate forced non-decreasing in age: positive spline-driven increments
    /// on top of a base level.
    Increasing,
    /// One shared log rate for all ages.
    Const,
    /// A free log rate per year of age.
    Indep,
}

impl CurveFamily {
    pub fn n_params(self, k: usize, n_ages: usize) -> usize {
        match self {
            CurveFamily::Smooth => k,
            CurveFamily::Increasing => 1 + k,
            CurveFamily::Const => 1,
            CurveFamily::Indep => n_ages,
        }
    }
}

/// Evaluates per-age rates for one curve. `eqage` clamps smooth curves: ages
/// below it reuse the curve value at `eqage`. The increasing family instead
/// holds its base level through `eqage` and accumulates increments beyond it.
/// `params` length must equal `family.n_params(basis.k(), basis.n_ages())`.
pub fn eval_rates(
    family: CurveFamily,
    basis: &SplineBasis,
    eqage: usize,
    params: &[f64],
    out: &mut [f64],
) {
    let n_ages = basis.n_ages();
    debug_assert_eq!(out.len(), n_ages);
    debug_assert_eq!(params.len(), family.n_params(basis.k(), n_ages));
    match family {
        CurveFamily::Smooth => {
            for a in 0..n_ages {
                let row = basis.row(a.max(eqage.min(n_ages - 1)));
                let eta: f64 = dot(row, params);
                out[a] = eta.min(MAX_LOG_RATE).exp();
            }
        }
        CurveFamily::Const => {
            let rate = params[0].min(MAX_LOG_RATE).exp();
            out.fill(rate);
        }
        CurveFamily::Indep => {
            for a in 0..n_ages {
                out[a] = params[a].min(MAX_LOG_RATE).exp();
            }
        }
        CurveFamily::Increasing => {
            let base = params[0].min(MAX_LOG_RATE).exp();
            let beta = &params[1..];
            let mut rate = base;
            for a in 0..n_ages {
                if a > eqage {
                    let xi: f64 = dot(basis.row(a), beta);
                    rate += INCREASING_SCALE * xi.min(MAX_LOG_RATE).exp();
                }
                out[a] = rate;
            }
        }
    }
}

/// Accumulates `d(loss)/d(params)` into `param_bar` given `rate_bar[a] =
/// d(loss)/d(rate_a)` and the forward `rates` from [`eval_rates`].
pub fn backprop_rates(
    family: CurveFamily,
    basis: &SplineBasis,
    eqage: usize,
    params: &[f64],
    rates: &[f64],
    rate_bar: &[f64],
    param_bar: &mut [f64],
) {
    let n_ages = basis.n_ages();
    match family {
        CurveFamily::Smooth => {
            for a in 0..n_ages {
                let eta_bar = rates[a] * rate_bar[a];
                let row = basis.row(a.max(eqage.min(n_ages - 1)));
                for (pb, b) in param_bar.iter_mut().zip(row) {
                    *pb += eta_bar * b;
                }
            }
        }
        CurveFamily::Const => {
            let total: f64 = (0..n_ages).map(|a| rates[a] * rate_bar[a]).sum();
            param_bar[0] += total;
        }
        CurveFamily::Indep => {
            for a in 0..n_ages {
                param_bar[a] += rates[a] * rate_bar[a];
            }
        }
        CurveFamily::Increasing => {
            let base = params[0].min(MAX_LOG_RATE).exp();
            let beta = &params[1..];
            // rate_a = base + sum_{b <= a, b > eqage} scale * exp(xi_b), so
            // each xi_b sees the suffix sum of rate_bar from b onward.
            let mut suffix = 0.0;
            let mut total = 0.0;
            for a in (0..n_ages).rev() {
                suffix += rate_bar[a];
                total += rate_bar[a];
                if a > eqage {
                    let xi: f64 = dot(basis.row(a), beta);
                    let xi_bar = suffix * INCREASING_SCALE * xi.min(MAX_LOG_RATE).exp();
                    for (pb, b) in param_bar[1..].iter_mut().zip(basis.row(a)) {
                        *pb += xi_bar * b;
                    }
                }
            }
            param_bar[0] += base * total;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn basis_shape_and_fixed_columns() {
        let b = SplineBasis::new(101, 10).unwrap();
        assert_eq!(b.k(), 10);
        for a in 0..101 {
            assert_eq!(b.row(a)[0], 1.0);
        }
        for a in 1..101 {
            assert!(b.row(a)[1] > b.row(a - 1)[1], "linear column must increase");
        }
        assert!((b.row(0)[1] + 1.0).abs() < 1e-14);
        assert!((b.row(100)[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn nonlinear_columns_orthogonal_and_unit_norm() {
        for (n_ages, k) in [(101, 10), (50, 6), (30, 5)] {
            let b = SplineBasis::new(n_ages, k).unwrap();
            for j in 2..k {
                let col: Vec<f64> = (0..n_ages).map(|a| b.row(a)[j]).collect();
                let ones: Vec<f64> = vec![1.0; n_ages];
                let lin: Vec<f64> = (0..n_ages).map(|a| b.row(a)[1]).collect();
                assert!(dot(&col, &ones).abs() < 1e-8, "col {j} not centered");
                assert!(dot(&col, &lin).abs() < 1e-8, "col {j} not orthogonal to age");
                assert!((dot(&col, &col) - 1.0).abs() < 1e-10, "col {j} not unit norm");
            }
        }
    }

    #[test]
    fn basis_is_deterministic() {
        let a = SplineBasis::new(101, 10).unwrap();
        let b = SplineBasis::new(101, 10).unwrap();
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn cubic_log_rate_is_representable() {
        // Least squares on the basis must reproduce a smooth cubic almost
        // exactly; this pins down that the radial columns span enough.
        let n_ages = 101;
        let b = SplineBasis::new(n_ages, 10).unwrap();
        let target: Vec<f64> = (0..n_ages)
            .map(|a| {
                let x = (a as f64 - 50.0) / 50.0;
                0.5 - 1.2 * x + 0.7 * x * x + 0.9 * x * x * x
            })
            .collect();
        let m = nalgebra::DMatrix::from_fn(n_ages, 10, |a, j| b.row(a)[j]);
        let y = nalgebra::DVector::from_column_slice(&target);
        let beta = m
            .clone()
            .svd(true, true)
            .solve(&y, 1e-12)
            .expect("least squares");
        let fit = m * beta;
        let max_err = fit
            .iter()
            .zip(&target)
            .map(|(f, t)| (f - t).abs())
            .fold(0.0, f64::max);
        assert!(max_err < 0.01, "max abs fit error {max_err}");
    }

    #[test]
    fn smooth_zero_coefficients_give_unit_rates() {
        let b = SplineBasis::new(101, 10).unwrap();
        let mut rates = vec![0.0; 101];
        eval_rates(CurveFamily::Smooth, &b, 0, &vec![0.0; 10], &mut rates);
        assert!(rates.iter().all(|&r| r == 1.0));
    }

    #[test]
    fn smooth_log_linear_when_nonlinear_terms_vanish() {
        let b = SplineBasis::new(61, 8).unwrap();
        let mut params = vec![0.0; 8];
        params[0] = -3.0;
        params[1] = 0.7;
        let mut rates = vec![0.0; 61];
        eval_rates(CurveFamily::Smooth, &b, 0, &params, &mut rates);
        for a in 0..61 {
            let expected = (-3.0 + 0.7 * b.row(a)[1]).exp();
            assert!((rates[a] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn eqage_clamps_low_ages() {
        let b = SplineBasis::new(101, 10).unwrap();
        let params: Vec<f64> = (0..10).map(|j| 0.1 * (j as f64 + 1.0)).collect();
        let mut rates = vec![0.0; 101];
        eval_rates(CurveFamily::Smooth, &b, 30, &params, &mut rates);
        for a in 0..30 {
            assert_eq!(rates[a], rates[30], "age {a} must equal the eqage value");
        }
        assert_ne!(rates[31], rates[30]);
    }

    #[test]
    fn increasing_family_matches_hand_computation() {
        let n_ages = 53;
        let b = SplineBasis::new(n_ages, 10).unwrap();
        let mut params = vec![0.0; 11];
        params[0] = 0.1f64.ln();
        let mut rates = vec![0.0; n_ages];
        eval_rates(CurveFamily::Increasing, &b, 50, &params, &mut rates);
        for a in 0..=50 {
            assert!((rates[a] - 0.1).abs() < 1e-15);
        }
        assert!((rates[51] - 0.11).abs() < 1e-15);
        assert!((rates[52] - 0.12).abs() < 1e-15);
    }

    #[test]
    fn const_and_indep_families() {
        let b = SplineBasis::new(10, 4).unwrap();
        let mut rates = vec![0.0; 10];
        eval_rates(CurveFamily::Const, &b, 0, &[-2.0], &mut rates);
        assert!(rates.iter().all(|&r| (r - (-2.0f64).exp()).abs() < 1e-15));
        let params: Vec<f64> = (0..10).map(|a| -3.0 + 0.1 * a as f64).collect();
        eval_rates(CurveFamily::Indep, &b, 0, &params, &mut rates);
        for a in 0..10 {
            assert!((rates[a] - params[a].exp()).abs() < 1e-15);
        }
    }

    fn backprop_fd_check(family: CurveFamily, eqage: usize, params: Vec<f64>) {
        let n_ages = 40;
        let b = SplineBasis::new(n_ages, 6).unwrap();
        // Loss = sum_a weight_a * rate_a with arbitrary fixed weights.
        let weights: Vec<f64> = (0..n_ages).map(|a| ((a * 7 % 11) as f64 - 5.0) * 0.3).collect();
        let mut rates = vec![0.0; n_ages];
        eval_rates(family, &b, eqage, &params, &mut rates);
        let mut grad = vec![0.0; params.len()];
        backprop_rates(family, &b, eqage, &params, &rates, &weights, &mut grad);
        let h = 1e-6;
        for j in 0..params.len() {
            let mut lo = params.clone();
            let mut hi = params.clone();
            lo[j] -= h;
            hi[j] += h;
            let mut rl = vec![0.0; n_ages];
            let mut rh = vec![0.0; n_ages];
            eval_rates(family, &b, eqage, &lo, &mut rl);
            eval_rates(family, &b, eqage, &hi, &mut rh);
            let fl: f64 = rl.iter().zip(&weights).map(|(r, w)| r * w).sum();
            let fh: f64 = rh.iter().zip(&weights).map(|(r, w)| r * w).sum();
            let fd = (fh - fl) / (2.0 * h);
            assert!(
                (grad[j] - fd).abs() < 1e-6 * (1.0 + fd.abs()),
                "{family:?} param {j}: {} vs {fd}",
                grad[j]
            );
        }
    }

    #[test]
    fn backprop_matches_finite_differences() {
        backprop_fd_check(
            CurveFamily::Smooth,
            12,
            vec![-2.0, 0.5, 0.2, -0.3, 0.1, 0.05],
        );
        backprop_fd_check(CurveFamily::Const, 0, vec![-1.5]);
        backprop_fd_check(
            CurveFamily::Increasing,
            5,
            vec![-2.5, 0.1, -0.2, 0.3, 0.05, -0.1, 0.2],
        );
        let indep: Vec<f64> = (0..40).map(|a| -2.0 + 0.02 * a as f64).collect();
        backprop_fd_check(CurveFamily::Indep, 0, indep);
    }

    proptest! {
        #[test]
        fn increasing_family_is_monotone(
            base in -4.0..0.0f64,
            beta in proptest::collection::vec(-1.0..1.0f64, 6),
            eqage in 0usize..20,
        ) {
            let n_ages = 40;
            let b = SplineBasis::new(n_ages, 6).unwrap();
            let mut params = vec![base];
            params.extend(beta);
            let mut rates = vec![0.0; n_ages];
            eval_rates(CurveFamily::Increasing, &b, eqage, &params, &mut rates);
            for w in rates.windows(2) {
                prop_assert!(w[1] >= w[0]);
            }
        }
    }
}
