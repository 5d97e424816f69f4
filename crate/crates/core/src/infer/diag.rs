//! Convergence diagnostics: split potential scale reduction, autocorrelation
//! based effective sample size, and a Kolmogorov-Smirnov tail helper.

/// Splits each chain in half and computes the potential scale reduction
/// factor over the resulting sequences. Returns NaN when the chains are too
/// short or the pooled variance is degenerate.
pub fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    let seqs = split(chains);
    if seqs.is_empty() {
        return f64::NAN;
    }
    let n = seqs[0].len();
    if n < 2 {
        return f64::NAN;
    }
    let (w, var_means) = pooled_moments(&seqs);
    if !(w > 0.0) {
        return f64::NAN;
    }
    let var_plus = (n as f64 - 1.0) / n as f64 * w + var_means;
    (var_plus / w).sqrt()
}

/// Effective sample size over split chains, using paired autocorrelation
/// sums truncated at the first negative pair and forced non-increasing.
pub fn ess(chains: &[Vec<f64>]) -> f64 {
    let seqs = split(chains);
    if seqs.is_empty() {
        return f64::NAN;
    }
    let n = seqs[0].len();
    if n < 4 {
        return f64::NAN;
    }
    let (w, var_means) = pooled_moments(&seqs);
    let var_plus = (n as f64 - 1.0) / n as f64 * w + var_means;
    if !(var_plus > 0.0) {
        return f64::NAN;
    }

    let means: Vec<f64> = seqs.iter().map(|s| mean(s)).collect();
    // Biased (1/n) autocovariance at a given lag, averaged across sequences.
    let acov = |t: usize| -> f64 {
        let mut total = 0.0;
        for (s, m) in seqs.iter().zip(&means) {
            let mut acc = 0.0;
            for i in 0..n - t {
                acc += (s[i] - m) * (s[i + t] - m);
            }
            total += acc / n as f64;
        }
        total / seqs.len() as f64
    };
    let rho = |t: usize| 1.0 - (w - acov(t)) / var_plus;

    let mut tau = -1.0;
    let mut prev_pair = f64::INFINITY;
    let mut t = 0;
    while t + 1 < n {
        let pair = if t == 0 { 1.0 + rho(1) } else { rho(t) + rho(t + 1) };
        if pair <= 0.0 && t > 0 {
            break;
        }
        let pair = pair.min(prev_pair).max(0.0);
        tau += 2.0 * pair;
        prev_pair = pair;
        t += 2;
    }

    let total = (seqs.len() * n) as f64;
    let tau = tau.max(1.0 / total.log10().max(1.0));
    total / tau
}

fn split(chains: &[Vec<f64>]) -> Vec<&[f64]> {
    let mut seqs = Vec::with_capacity(2 * chains.len());
    for c in chains {
        let h = c.len() / 2;
        if h == 0 {
            continue;
        }
        seqs.push(&c[..h]);
        seqs.push(&c[c.len() - h..]);
    }
    seqs
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// (mean within-sequence variance, variance of sequence means).
fn pooled_moments(seqs: &[&[f64]]) -> (f64, f64) {
    let n = seqs[0].len() as f64;
    let means: Vec<f64> = seqs.iter().map(|s| mean(s)).collect();
    let w = seqs
        .iter()
        .zip(&means)
        .map(|(s, m)| s.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0))
        .sum::<f64>()
        / seqs.len() as f64;
    let grand = mean(&means);
    let var_means = if seqs.len() > 1 {
        means.iter().map(|m| (m - grand) * (m - grand)).sum::<f64>() / (seqs.len() as f64 - 1.0)
    } else {
        0.0
    };
    (w, var_means)
}

/// Kolmogorov-Smirnov statistic of a sorted sample against the uniform
/// distribution on [0, 1].
pub fn ks_statistic_uniform(sorted: &[f64]) -> f64 {
    let n = sorted.len() as f64;
    let mut d = 0.0_f64;
    for (i, x) in sorted.iter().enumerate() {
        let lo = x - i as f64 / n;
        let hi = (i as f64 + 1.0) / n - x;
        d = d.max(lo).max(hi);
    }
    d
}

/// Asymptotic two-sided p-value for a Kolmogorov-Smirnov statistic `d` from
/// a sample of size `n`.
pub fn ks_pvalue(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    let mut p = 0.0;
    let mut sign = 1.0;
    for k in 1..=100 {
        let term = (-2.0 * (k as f64 * lambda).powi(2)).exp();
        p += sign * term;
        sign = -sign;
        if term < 1e-12 {
            break;
        }
    }
    (2.0 * p).clamp(0.0, 1.0)
}
