//! Converting published summaries into the effective counts the model
//! consumes: interval estimates to beta-implied numerators and denominators,
//! age-grouped counts to smooth single-year counts, ten-year survival to
//! annual remission, and downweighting of distrusted sources.

use nalgebra::DMatrix;

use crate::special::beta_tails;
use crate::{Error, Result};

/// A published estimate with its equal-tailed 95% interval.
#[derive(Clone, Copy, Debug)]
pub struct PointInterval {
    pub est: f64,
    pub lo: f64,
    pub hi: f64,
}

impl PointInterval {
    pub fn new(est: f64, lo: f64, hi: f64) -> Result<Self> {
        let ordered = 0.0 <= lo && lo <= est && est <= hi && hi <= 1.0;
        if !ordered {
            return Err(Error::InvalidInput(format!(
                "interval must satisfy 0 <= lo <= est <= hi <= 1, got ({est}, {lo}, {hi})"
            )));
        }
        Ok(PointInterval { est, lo, hi })
    }
}

/// Largest beta parameter the interval fit searches over; intervals this
/// concentrated carry no usable uncertainty information.
const BETA_BOUND: f64 = 1e6;

/// Objective tolerance below which a fitted beta is accepted.
const BETA_FIT_TOL: f64 = 1e-6;

/// Effective count behind a published estimate and 95% interval, assuming
/// they summarize a Beta(alpha, beta) distribution: the best fit minimizes
/// the squared distance between the interval's nominal quantile levels and
/// the beta CDF at (lo, est, hi). Returns (r, n) = (alpha, alpha + beta),
/// the convention under which Beta(alpha, beta) is the posterior from r
/// events in n trials under a prior flat on the logit scale.
pub fn beta_from_quantiles(pi: &PointInterval) -> Result<(f64, f64)> {
    if !(pi.lo < pi.hi) {
        return Err(Error::InvalidInput(format!(
            "interval ({}, {}) is degenerate; a width is needed to infer a denominator",
            pi.lo, pi.hi
        )));
    }
    if !(pi.est > 0.0 && pi.est < 1.0) {
        return Err(Error::InvalidInput(format!(
            "point estimate {} must lie strictly inside (0, 1)",
            pi.est
        )));
    }
    let objective = |z: &[f64; 2]| -> f64 {
        let (a, b) = (z[0].exp(), z[1].exp());
        if !(a.is_finite() && b.is_finite()) || a > BETA_BOUND || b > BETA_BOUND {
            return f64::INFINITY;
        }
        let f_lo = beta_tails(a, b, pi.lo).0;
        let f_est = beta_tails(a, b, pi.est).0;
        let f_hi = beta_tails(a, b, pi.hi).0;
        (f_lo - 0.025).powi(2) + (f_est - 0.5).powi(2) + (f_hi - 0.975).powi(2)
    };

    // Moment-matched start: mean near the point estimate, spread from the
    // interval width. Extra starts rescale the concentration to escape
    // poor local geometry on very tight or very wide intervals.
    let m = pi.est.clamp(1e-6, 1.0 - 1e-6);
    let sd = ((pi.hi - pi.lo) / 3.92).min(0.49);
    let mut conc = m * (1.0 - m) / (sd * sd) - 1.0;
    if !(conc > 0.0) {
        conc = 2.0;
    }
    let mut best: Option<([f64; 2], f64)> = None;
    for scale in [1.0, 0.2, 5.0] {
        let nu = (conc * scale).clamp(1e-3, BETA_BOUND);
        let start = [(m * nu).clamp(1e-3, BETA_BOUND).ln(), ((1.0 - m) * nu).clamp(1e-3, BETA_BOUND).ln()];
        let (z, f) = nelder_mead_2d(&objective, start, 0.5, 600);
        if best.is_none_or(|(_, bf)| f < bf) {
            best = Some((z, f));
        }
    }
    let (z, f) = best.unwrap();
    if !(f < BETA_FIT_TOL) {
        return Err(Error::SearchFailed(format!(
            "no beta distribution reproduces the interval ({}, {}, {}); best objective {f:.3e}",
            pi.lo, pi.est, pi.hi
        )));
    }
    let (a, b) = (z[0].exp(), z[1].exp());
    Ok((a, a + b))
}

/// Downhill simplex minimization in two dimensions with standard
/// reflection/expansion/contraction/shrink coefficients.
fn nelder_mead_2d(
    f: &impl Fn(&[f64; 2]) -> f64,
    start: [f64; 2],
    step: f64,
    max_iter: usize,
) -> ([f64; 2], f64) {
    let mut simplex = [
        start,
        [start[0] + step, start[1]],
        [start[0], start[1] + step],
    ];
    let mut vals = simplex.map(|v| f(&v));
    for _ in 0..max_iter {
        // Order: index 0 best, 2 worst.
        let mut idx = [0usize, 1, 2];
        idx.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        simplex = idx.map(|i| simplex[i]);
        vals = idx.map(|i| vals[i]);

        let spread = vals[2] - vals[0];
        let diam = (0..2)
            .map(|d| (simplex[2][d] - simplex[0][d]).abs() + (simplex[1][d] - simplex[0][d]).abs())
            .fold(0.0f64, f64::max);
        if spread.abs() < 1e-16 && diam < 1e-10 {
            break;
        }

        let centroid = [
            0.5 * (simplex[0][0] + simplex[1][0]),
            0.5 * (simplex[0][1] + simplex[1][1]),
        ];
        let at = |t: f64| {
            [
                centroid[0] + t * (centroid[0] - simplex[2][0]),
                centroid[1] + t * (centroid[1] - simplex[2][1]),
            ]
        };
        let reflected = at(1.0);
        let fr = f(&reflected);
        if fr < vals[0] {
            let expanded = at(2.0);
            let fe = f(&expanded);
            if fe < fr {
                simplex[2] = expanded;
                vals[2] = fe;
            } else {
                simplex[2] = reflected;
                vals[2] = fr;
            }
        } else if fr < vals[1] {
            simplex[2] = reflected;
            vals[2] = fr;
        } else {
            let contracted = if fr < vals[2] { at(0.5) } else { at(-0.5) };
            let fc = f(&contracted);
            if fc < vals[2].min(fr) {
                simplex[2] = contracted;
                vals[2] = fc;
            } else {
                for i in 1..3 {
                    for d in 0..2 {
                        simplex[i][d] = simplex[0][d] + 0.5 * (simplex[i][d] - simplex[0][d]);
                    }
                    vals[i] = f(&simplex[i]);
                }
            }
        }
    }
    let mut bi = 0;
    for i in 1..3 {
        if vals[i] < vals[bi] {
            bi = i;
        }
    }
    (simplex[bi], vals[bi])
}

/// Count pair from a published proportion and the population size behind
/// it. The numerator keeps its fractional part.
pub fn counts_from_estimate(est: f64, denom: f64) -> (f64, f64) {
    assert!(denom > 0.0, "population size must be positive");
    (est * denom, denom)
}

/// Scales a count pair toward zero evidence, giving the source a fraction
/// of its original weight.
pub fn downweight(y: f64, n: f64, w: f64) -> (f64, f64) {
    assert!(w > 0.0 && w <= 1.0, "weight must lie in (0, 1]");
    (y * w, n * w)
}

/// Annual remission from a 10-year survival probability, where survival
/// means remission happened within those ten years: the annual probability
/// r solves S = 1 - (1-r)^10. Returns (probability, rate).
pub fn remission_from_survival(s: f64) -> Result<(f64, f64)> {
    if !(0.0..1.0).contains(&s) {
        return Err(Error::InvalidInput(format!(
            "10-year survival must lie in [0, 1), got {s}; certain remission implies an infinite rate"
        )));
    }
    let keep = (1.0 - s).powf(0.1);
    let r = 1.0 - keep;
    Ok((r, -keep.ln()))
}

/// One published age band: ages `age_lo..=age_hi` with aggregated counts.
#[derive(Clone, Copy, Debug)]
pub struct AgeGroup {
    pub age_lo: usize,
    pub age_hi: usize,
    pub y: f64,
    pub n: f64,
}

/// Contiguous, non-overlapping age bands covering every year of age from
/// the first group's `age_lo` through the last group's `age_hi`.
#[derive(Clone, Debug)]
pub struct AgeGroupCounts {
    groups: Vec<AgeGroup>,
}

impl AgeGroupCounts {
    pub fn new(groups: Vec<AgeGroup>) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::InvalidInput("no age groups".into()));
        }
        let mut expect = groups[0].age_lo;
        for g in &groups {
            if g.age_lo != expect {
                return Err(Error::InvalidInput(format!(
                    "age groups must tile contiguously: expected a group starting at {expect}, found {}",
                    g.age_lo
                )));
            }
            if g.age_hi < g.age_lo {
                return Err(Error::InvalidInput(format!(
                    "age group {}-{} is reversed",
                    g.age_lo, g.age_hi
                )));
            }
            if !(g.y.is_finite() && g.n.is_finite()) || g.y < 0.0 || g.n < 0.0 {
                return Err(Error::InvalidInput(format!(
                    "ages {}-{}: counts must be finite and non-negative, got y={}, n={}",
                    g.age_lo, g.age_hi, g.y, g.n
                )));
            }
            if g.y > g.n {
                return Err(Error::InvalidInput(format!(
                    "ages {}-{}: numerator {} exceeds denominator {}",
                    g.age_lo, g.age_hi, g.y, g.n
                )));
            }
            expect = g.age_hi + 1;
        }
        Ok(AgeGroupCounts { groups })
    }

    pub fn groups(&self) -> &[AgeGroup] {
        &self.groups
    }

    /// First covered year of age.
    pub fn age_start(&self) -> usize {
        self.groups[0].age_lo
    }

    /// Total number of single years covered.
    pub fn n_ages(&self) -> usize {
        self.groups.last().unwrap().age_hi - self.groups[0].age_lo + 1
    }
}

/// Ridge on first differences: breaks the affine indeterminacy of the pure
/// curvature penalty without visibly changing smooth solutions.
const DISAGG_RIDGE: f64 = 1e-6;

/// Splits age-grouped counts into single-year counts that vary smoothly
/// with age while each group's yearly values sum exactly to the published
/// totals. Numerators and denominators are disaggregated separately, each
/// minimizing the summed squared second differences of the yearly series
/// subject to the group sums; negatives are floored at zero and the rest of
/// the group rescaled, and any yearly numerator exceeding its denominator
/// is capped with the excess moved onto the group's remaining slack.
/// Returns per-age (y, n) pairs starting at [`AgeGroupCounts::age_start`].
pub fn disaggregate(counts: &AgeGroupCounts) -> Result<Vec<(f64, f64)>> {
    let widths: Vec<usize> = counts
        .groups
        .iter()
        .map(|g| g.age_hi - g.age_lo + 1)
        .collect();
    let ys: Vec<f64> = counts.groups.iter().map(|g| g.y).collect();
    let ns: Vec<f64> = counts.groups.iter().map(|g| g.n).collect();
    let mut y = disaggregate_series(&widths, &ys)?;
    let n = disaggregate_series(&widths, &ns)?;

    // Cap yearly numerators at their denominators group by group, moving
    // the removed mass onto ages with slack so the group sum is preserved.
    let mut offset = 0;
    for (g, &w) in widths.iter().enumerate() {
        cap_at_denominator(&mut y[offset..offset + w], &n[offset..offset + w], ys[g])?;
        offset += w;
    }
    Ok(y.into_iter().zip(n).collect())
}

/// Smooth single-series disaggregation: minimizes the summed squared second
/// differences subject to exact group sums (closed-form KKT solve), floors
/// negative values, and pins each group sum to the total.
pub fn disaggregate_series(widths: &[usize], totals: &[f64]) -> Result<Vec<f64>> {
    if widths.len() != totals.len() || widths.is_empty() {
        return Err(Error::Dimension(format!(
            "{} group widths against {} totals",
            widths.len(),
            totals.len()
        )));
    }
    if widths.contains(&0) {
        return Err(Error::InvalidInput("age group of width zero".into()));
    }
    let a: usize = widths.iter().sum();
    let g = widths.len();

    // KKT system for: minimize x'Qx subject to Cx = totals.
    let mut m = DMatrix::<f64>::zeros(a + g, a + g);
    let mut add = |i: usize, j: usize, v: f64| m[(i, j)] += v;
    for i in 0..a.saturating_sub(2) {
        let idx = [i, i + 1, i + 2];
        let w = [1.0, -2.0, 1.0];
        for (r, wr) in idx.iter().zip(w) {
            for (c, wc) in idx.iter().zip(w) {
                add(*r, *c, 2.0 * wr * wc);
            }
        }
    }
    for i in 0..a - 1 {
        let idx = [i, i + 1];
        let w = [1.0, -1.0];
        for (r, wr) in idx.iter().zip(w) {
            for (c, wc) in idx.iter().zip(w) {
                add(*r, *c, 2.0 * DISAGG_RIDGE * wr * wc);
            }
        }
    }
    let mut rhs = DMatrix::<f64>::zeros(a + g, 1);
    let mut offset = 0;
    for (gi, (&w, &t)) in widths.iter().zip(totals).enumerate() {
        for j in offset..offset + w {
            m[(a + gi, j)] = 1.0;
            m[(j, a + gi)] = 1.0;
        }
        rhs[(a + gi, 0)] = t;
        offset += w;
    }
    let solved = m
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Infeasible("disaggregation system is singular".into()))?;
    let mut x: Vec<f64> = (0..a).map(|i| solved[(i, 0)]).collect();

    let mut offset = 0;
    for (&w, &t) in widths.iter().zip(totals) {
        let seg = &mut x[offset..offset + w];
        force_sum(seg, t);
        if seg.iter().any(|v| *v < 0.0) {
            // Counts cannot go negative: zero them and let the positive
            // part of the group absorb the mass.
            let pos: f64 = seg.iter().filter(|v| **v > 0.0).sum();
            if pos > 0.0 {
                let scale = t / pos;
                for v in seg.iter_mut() {
                    *v = if *v > 0.0 { *v * scale } else { 0.0 };
                }
            } else {
                seg.fill(t / w as f64);
            }
            force_sum(seg, t);
            for v in seg.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        offset += w;
    }
    Ok(x)
}

/// Adjusts a block so its elements sum to `total` exactly up to one final
/// rounding: spreads the residual uniformly, then pins the last element.
fn force_sum(seg: &mut [f64], total: f64) {
    let sum: f64 = seg.iter().sum();
    let fix = (total - sum) / seg.len() as f64;
    for v in seg.iter_mut() {
        *v += fix;
    }
    let head: f64 = seg[..seg.len() - 1].iter().sum();
    let last = seg.len() - 1;
    seg[last] = total - head;
}

fn cap_at_denominator(y: &mut [f64], n: &[f64], total: f64) -> Result<()> {
    for _ in 0..y.len() + 2 {
        let mut overflow = 0.0;
        for (yi, ni) in y.iter_mut().zip(n) {
            if *yi > *ni {
                overflow += *yi - *ni;
                *yi = *ni;
            }
        }
        if overflow <= 1e-12 {
            break;
        }
        let slack: f64 = y.iter().zip(n).map(|(yi, ni)| ni - yi).sum();
        if slack < overflow - 1e-9 {
            return Err(Error::Infeasible(format!(
                "group numerator {total} cannot fit under the yearly denominators"
            )));
        }
        if slack <= 0.0 {
            break;
        }
        let frac = (overflow / slack).min(1.0);
        for (yi, ni) in y.iter_mut().zip(n) {
            *yi += frac * (ni - *yi);
        }
    }
    force_sum(y, total);
    for (yi, ni) in y.iter_mut().zip(n) {
        if *yi > *ni {
            *yi = *ni;
        }
        if *yi < 0.0 {
            *yi = 0.0;
        }
    }
    Ok(())
}
