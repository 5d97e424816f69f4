//! Shared numeric kernels. The incomplete beta routine returns both tails
//! with the smaller one computed directly, because conflict p-values need
//! relative precision far below f64 epsilon in the extreme tail, which
//! `1.0 - cdf` cannot deliver.

pub(crate) use statrs::function::gamma::ln_gamma;

pub(crate) fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// log of the generalized binomial coefficient Gamma(n+1)/(Gamma(y+1)Gamma(n-y+1)).
pub(crate) fn ln_choose(n: f64, y: f64) -> f64 {
    ln_gamma(n + 1.0) - ln_gamma(y + 1.0) - ln_gamma(n - y + 1.0)
}

/// Continued fraction for the regularized incomplete beta (Lentz's method).
/// Converges for x < (a+1)/(a+b+2).
fn betacf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=500 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 3e-16 {
            break;
        }
    }
    h
}

/// Regularized incomplete beta I_x(a, b) as the pair (lower, upper) with
/// lower + upper == 1. The smaller tail keeps full relative precision down
/// to the underflow limit.
pub(crate) fn beta_tails(a: f64, b: f64, x: f64) -> (f64, f64) {
    assert!(a > 0.0 && b > 0.0, "beta shape parameters must be positive");
    assert!((0.0..=1.0).contains(&x), "beta argument must lie in [0,1]");
    if x == 0.0 {
        return (0.0, 1.0);
    }
    if x == 1.0 {
        return (1.0, 0.0);
    }
    let ln_front = a * x.ln() + b * (-x).ln_1p() - ln_beta(a, b);
    if x < (a + 1.0) / (a + b + 2.0) {
        let lower = (ln_front.exp() / a) * betacf(a, b, x);
        (lower, 1.0 - lower)
    } else {
        let upper = (ln_front.exp() / b) * betacf(b, a, 1.0 - x);
        (1.0 - upper, upper)
    }
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub(crate) fn sort_f64(v: &mut [f64]) {
    v.sort_unstable_by(f64::total_cmp);
}

/// Empirical quantile with linear interpolation between order statistics
/// (R type 7). `sorted` must be ascending and non-empty.
pub(crate) fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{Beta, ContinuousCDF};

    #[test]
    fn beta_tails_match_reference_cdf_in_the_bulk() {
        for &(a, b) in &[(5.5, 5.5), (2.0, 7.0), (0.5, 0.5), (30.5, 70.5), (400.0, 3.0)] {
            let dist = Beta::new(a, b).unwrap();
            for &x in &[0.05, 0.2, 0.3, 0.5, 0.7, 0.95] {
                let (lo, up) = beta_tails(a, b, x);
                assert!((lo - dist.cdf(x)).abs() < 1e-12, "a={a} b={b} x={x}");
                assert!((lo + up - 1.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn beta_tails_keep_precision_in_extreme_tails() {
        // scipy.stats.beta.sf(0.5, 0.5, 100.5) = 4.412536991751157e-32
        let (_, up) = beta_tails(0.5, 100.5, 0.5);
        assert!((up / 4.412536991751157e-32 - 1.0).abs() < 1e-10);
    }

    #[test]
    fn beta_tails_symmetry() {
        for &(a, b, x) in &[(3.0, 9.0, 0.13), (0.7, 0.9, 0.41), (12.5, 2.5, 0.86)] {
            let (lo, up) = beta_tails(a, b, x);
            let (lo2, up2) = beta_tails(b, a, 1.0 - x);
            assert!((lo - up2).abs() <= 1e-15 * lo.max(up2).max(1e-300));
            assert!((up - lo2).abs() <= 1e-15 * up.max(lo2).max(1e-300));
        }
    }

    #[test]
    fn quantile_interpolates() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&v, 0.0), 1.0);
        assert_eq!(quantile_sorted(&v, 1.0), 4.0);
        assert_eq!(quantile_sorted(&v, 0.5), 2.5);
    }

    #[test]
    fn log_sum_exp_handles_extremes() {
        assert!((log_sum_exp(&[-1000.0, -1000.0]) - (-1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY; 3]), f64::NEG_INFINITY);
    }
}
