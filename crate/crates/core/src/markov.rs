//! Transition and occupancy mathematics for a three-state illness-death
//! process: state 1 disease-free, state 2 diseased, state 3 dead. Transition
//! intensities are piecewise constant within single years of age, so the
//! annual transition probability matrix has a closed form; a series matrix
//! exponential backs it up near the degenerate point and doubles as an
//! independent oracle.

use crate::dual::{Dual3, Scalar};
use crate::error::{Error, Result};

/// Annual transition intensities at one age: incidence `i` (well to ill),
/// case fatality `f` (ill to dead), remission `r` (ill to well).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RateTriple {
    pub i: f64,
    pub f: f64,
    pub r: f64,
}

impl RateTriple {
    pub fn new(i: f64, f: f64, r: f64) -> Self {
        RateTriple { i, f, r }
    }
}

/// Row-major 3x3 matrix; rows index the source state, columns the target.
pub type Matrix3 = [[f64; 3]; 3];

/// Probability vector over the three states.
pub type StateVec = [f64; 3];

fn c<S: Scalar>(x: f64) -> S {
    S::from_f64(x)
}

fn intensity<S: Scalar>(i: S, f: S, r: S) -> [[S; 3]; 3] {
    let z = c::<S>(0.0);
    [[-i, i, z], [r, -(r + f), f], [z, z, z]]
}

fn mat_mul<S: Scalar>(a: &[[S; 3]; 3], b: &[[S; 3]; 3]) -> [[S; 3]; 3] {
    let mut out = [[c::<S>(0.0); 3]; 3];
    for (row, a_row) in a.iter().enumerate() {
        for col in 0..3 {
            out[row][col] =
                a_row[0] * b[0][col] + a_row[1] * b[1][col] + a_row[2] * b[2][col];
        }
    }
    out
}

/// Series matrix exponential with scaling and squaring, truncated when terms
/// fall below 1e-20 in absolute value. Entry error is below 1e-12 for the
/// intensity matrices this crate produces (rates up to roughly 1e3).
fn expm3<S: Scalar>(m: &[[S; 3]; 3]) -> [[S; 3]; 3] {
    let norm = (0..3)
        .map(|col| (0..3).map(|row| m[row][col].val().abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as u32
    } else {
        0
    };
    let scale = c::<S>(1.0 / 2f64.powi(squarings as i32));
    let a = {
        let mut a = *m;
        for row in a.iter_mut() {
            for entry in row.iter_mut() {
                *entry = *entry * scale;
            }
        }
        a
    };
    let mut result = [[c::<S>(0.0); 3]; 3];
    for (k, row) in result.iter_mut().enumerate() {
        row[k] = c::<S>(1.0);
    }
    let mut term = result;
    for k in 1..=60 {
        term = mat_mul(&term, &a);
        let inv_k = c::<S>(1.0 / k as f64);
        let mut max_abs = 0.0f64;
        for row in 0..3 {
            for col in 0..3 {
                term[row][col] = term[row][col] * inv_k;
                result[row][col] = result[row][col] + term[row][col];
                max_abs = max_abs.max(term[row][col].val().abs());
            }
        }
        if max_abs < 1e-20 {
            break;
        }
    }
    for _ in 0..squarings {
        result = mat_mul(&result, &result);
    }
    result
}

/// Transition probabilities over `t` years via the series matrix
/// exponential of the intensity matrix. This is the reference implementation
/// against which the closed form is validated; it shares no code with the
/// closed-form branch beyond the intensity matrix itself.
pub fn expm_oracle(rates: RateTriple, t: f64) -> Matrix3 {
    check_rates(rates);
    assert!(t >= 0.0 && t.is_finite(), "time span must be non-negative");
    let q = intensity(rates.i * t, rates.f * t, rates.r * t);
    expm3(&q)
}

/// Relative size of q below which the closed form degenerates (q appears in
/// denominators) and the series fallback takes over.
const DEGENERATE_Q: f64 = 1e-8;

fn transition_impl<S: Scalar>(i: S, f: S, r: S) -> [[S; 3]; 3] {
    let two = c::<S>(2.0);
    let u = i + r + f;
    let q2 = i * i + two * i * r - two * i * f + r * r + two * f * r + f * f;
    let thresh = DEGENERATE_Q * u.val().max(1.0);
    if q2.val() < thresh * thresh {
        return expm3(&intensity(i, f, r));
    }
    let q = q2.sqrt();
    let half = c::<S>(0.5);
    let one = c::<S>(1.0);
    let w = (-(u + q) * half).exp();
    let v = (-(u - q) * half).exp();
    let two_q = two * q;
    let p11 = (two * (v - w) * (f + r) + v * (q - u) + w * (q + u)) / two_q;
    let p12 = i * (v - w) / q;
    let p13 = (-u * (v - w) - q * (v + w)) / two_q + one;
    let p21 = (v - w) * r / q;
    let p22 = -((two * (f + r) - u) * (v - w) - q * (v + w)) / two_q;
    let p23 = ((v - w) * (two * f - u) - q * (v + w)) / two_q + one;
    let z = c::<S>(0.0);
    [[p11, p12, p13], [p21, p22, p23], [z, z, one]]
}

fn check_rates(rates: RateTriple) {
    assert!(
        rates.i.is_finite() && rates.f.is_finite() && rates.r.is_finite(),
        "transition rates must be finite, got {rates:?}"
    );
    assert!(
        rates.i >= 0.0 && rates.f >= 0.0 && rates.r >= 0.0,
        "transition rates must be non-negative, got {rates:?}"
    );
}

/// Annual transition probability matrix for constant intensities over one
/// year of age.
pub fn transition_matrix(rates: RateTriple) -> Matrix3 {
    check_rates(rates);
    transition_impl(rates.i, rates.f, rates.r)
}

/// Transition matrix together with its partial derivatives with respect to
/// `(i, f, r)`; `partials[k][row][col]` is the derivative of entry
/// `(row, col)` with respect to rate `k`.
pub fn transition_matrix_with_partials(rates: RateTriple) -> (Matrix3, [Matrix3; 3]) {
    check_rates(rates);
    let p = transition_impl(
        Dual3::seeded(rates.i, 0),
        Dual3::seeded(rates.f, 1),
        Dual3::seeded(rates.r, 2),
    );
    let mut value = [[0.0; 3]; 3];
    let mut partials = [[[0.0; 3]; 3]; 3];
    for row in 0..3 {
        for col in 0..3 {
            value[row][col] = p[row][col].v;
            for k in 0..3 {
                partials[k][row][col] = p[row][col].d[k];
            }
        }
    }
    (value, partials)
}

/// Left multiplication of a state row vector by a transition matrix, with a
/// fixed summation order so repeated evaluations are bit-identical.
pub fn step_state(s: StateVec, p: &Matrix3) -> StateVec {
    [
        s[0] * p[0][0] + s[1] * p[1][0] + s[2] * p[2][0],
        s[0] * p[0][1] + s[1] * p[1][1] + s[2] * p[2][1],
        s[0] * p[0][2] + s[1] * p[1][2] + s[2] * p[2][2],
    ]
}

/// State occupancy probabilities by age for a cohort following the per-age
/// rates. `out[a]` is the distribution at exact age `a`; `out[0] == s0` and
/// the final entry of `rates` only affects observation probabilities, not
/// occupancy.
pub fn occupancy_path(rates: &[RateTriple], s0: StateVec) -> Vec<StateVec> {
    assert!(!rates.is_empty(), "need at least one age");
    let mut out = Vec::with_capacity(rates.len());
    out.push(s0);
    for a in 1..rates.len() {
        let p = transition_matrix(rates[a - 1]);
        out.push(step_state(out[a - 1], &p));
    }
    out
}

/// Proportion of the living in the diseased state.
pub fn prevalence(s: StateVec) -> Result<f64> {
    let alive = s[0] + s[1];
    if !(alive > 0.0) {
        return Err(Error::DegenerateCohort);
    }
    Ok(s[1] / alive)
}

/// Probability of dying within the year given the transition matrix and the
/// prevalence among the living at the start of the year.
pub fn mortality_prob(p: &Matrix3, prev: f64) -> f64 {
    prev * p[1][2] + (1.0 - prev) * p[0][2]
}

/// Probability that a disease-free person contracts the disease within the
/// year (including paths that pass through further states).
pub fn incidence_prob(p: &Matrix3) -> f64 {
    1.0 - p[0][0]
}

/// Probability that a diseased person is disease-free a year later.
pub fn remission_prob(p: &Matrix3) -> f64 {
    p[1][0]
}

/// Calendar-time multipliers for one rate: `ratio(age, year)` scales the
/// current-year rate at `age` to its value in `year`. Year index
/// `N_YEARS - 1 = 100` is the data year and its column is identically one.
#[derive(Clone, Debug)]
pub struct TrendMatrix {
    n_ages: usize,
    ratios: Vec<f64>,
}

impl TrendMatrix {
    pub const N_YEARS: usize = 101;

    pub fn unit(n_ages: usize) -> Self {
        TrendMatrix {
            n_ages,
            ratios: vec![1.0; n_ages * Self::N_YEARS],
        }
    }

    /// Builds from per-age rows of length [`Self::N_YEARS`]. Ratios must be
    /// finite and positive and the final (data-year) column must be one;
    /// values within 1e-12 of one are snapped exactly.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_ages = rows.len();
        if n_ages == 0 {
            return Err(Error::Dimension("trend matrix has no age rows".into()));
        }
        let mut ratios = Vec::with_capacity(n_ages * Self::N_YEARS);
        for (age, row) in rows.iter().enumerate() {
            if row.len() != Self::N_YEARS {
                return Err(Error::Dimension(format!(
                    "trend row for age {age} has {} years, expected {}",
                    row.len(),
                    Self::N_YEARS
                )));
            }
            for (year, &x) in row.iter().enumerate() {
                if !x.is_finite() || x <= 0.0 {
                    return Err(Error::InvalidInput(format!(
                        "trend ratio at age {age}, year {year} is {x}; ratios must be finite and positive"
                    )));
                }
                let x = if (x - 1.0).abs() <= 1e-12 { 1.0 } else { x };
                if year == Self::N_YEARS - 1 && x != 1.0 {
                    return Err(Error::InvalidInput(format!(
                        "trend ratio at age {age} in the data year must be 1, got {x}"
                    )));
                }
                ratios.push(x);
            }
        }
        Ok(TrendMatrix { n_ages, ratios })
    }

    pub fn n_ages(&self) -> usize {
        self.n_ages
    }

    #[inline]
    pub fn ratio(&self, age: usize, year: usize) -> f64 {
        self.ratios[age * Self::N_YEARS + year]
    }

    pub fn is_unit(&self) -> bool {
        self.ratios.iter().all(|&x| x == 1.0)
    }
}

/// Effective rates for a person aged `b` in calendar year `year`, given the
/// data-year rates by age and the trend multipliers for incidence and case
/// fatality (remission carries no trend).
pub fn effective_rates(
    rates: &[RateTriple],
    inc_trend: &TrendMatrix,
    cf_trend: &TrendMatrix,
    b: usize,
    year: usize,
) -> RateTriple {
    RateTriple {
        i: inc_trend.ratio(b, year) * rates[b].i,
        f: cf_trend.ratio(b, year) * rates[b].f,
        r: rates[b].r,
    }
}

/// Occupancy at the data year under calendar trends. The cohort aged `a` in
/// the data year is traced along its own birth-cohort diagonal: at age `b`
/// (`b < a`) it experienced year `100 - a + b` rates. With unit trends this
/// reproduces [`occupancy_path`] bit for bit, because each diagonal applies
/// the identical matrices in the identical order.
pub fn occupancy_lexis(
    rates: &[RateTriple],
    inc_trend: &TrendMatrix,
    cf_trend: &TrendMatrix,
    s0: StateVec,
) -> Result<Vec<StateVec>> {
    let n_ages = rates.len();
    if n_ages == 0 {
        return Err(Error::Dimension("need at least one age".into()));
    }
    if n_ages > TrendMatrix::N_YEARS {
        return Err(Error::Dimension(format!(
            "trend models support at most {} ages, got {n_ages}",
            TrendMatrix::N_YEARS
        )));
    }
    if inc_trend.n_ages() != n_ages || cf_trend.n_ages() != n_ages {
        return Err(Error::Dimension(format!(
            "trend matrices cover {} and {} ages, data has {n_ages}",
            inc_trend.n_ages(),
            cf_trend.n_ages()
        )));
    }
    let data_year = TrendMatrix::N_YEARS - 1;
    let out = crate::par::map_indexed(n_ages, |a| {
        let mut s = s0;
        for b in 0..a {
            let eff = effective_rates(rates, inc_trend, cf_trend, b, data_year - a + b);
            let p = transition_matrix(eff);
            s = step_state(s, &p);
        }
        s
    });
    Ok(out)
}
