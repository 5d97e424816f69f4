//! Dataset builders shared by unit tests across modules.

use crate::markov::{transition_matrix, RateTriple};
use crate::model::{Count, Dataset, ModelSpec, ObservedCounts, RateModel};

/// Counts set to their expectations under the given rate curves (indexed
/// by standardized age in [-1, 1]), rounded to whole events.
pub(crate) fn curved_dataset(
    n_ages: usize,
    denom: f64,
    inc_at: impl Fn(f64) -> f64,
    cf_at: impl Fn(f64) -> f64,
) -> Dataset {
    Dataset::single(curved_counts(n_ages, denom, inc_at, cf_at)).unwrap()
}

pub(crate) fn curved_counts(
    n_ages: usize,
    denom: f64,
    inc_at: impl Fn(f64) -> f64,
    cf_at: impl Fn(f64) -> f64,
) -> ObservedCounts {
    let half = (n_ages - 1) as f64 / 2.0;
    let mut s = [1.0, 0.0, 0.0];
    let mut mortality = Vec::new();
    let mut prevalence = Vec::new();
    let mut incidence = Vec::new();
    for a in 0..n_ages {
        let t = (a as f64 - half) / half;
        let p = transition_matrix(RateTriple::new(inc_at(t), cf_at(t), 0.0));
        let prev = s[1] / (s[0] + s[1]);
        let mort = prev * p[1][2] + (1.0 - prev) * p[0][2];
        let inc_prob = 1.0 - p[0][0];
        mortality.push(Count::new((denom * mort).round(), denom));
        prevalence.push(Count::new((denom * prev).round(), denom));
        incidence.push(Count::new((denom * inc_prob).round(), denom));
        let next = [
            s[0] * p[0][0] + s[1] * p[1][0],
            s[0] * p[0][1] + s[1] * p[1][1],
            s[0] * p[0][2] + s[1] * p[1][2] + s[2],
        ];
        s = next;
    }
    ObservedCounts {
        mortality,
        prevalence: Some(prevalence),
        incidence: Some(incidence),
        remission: None,
    }
}

pub(crate) fn synthetic_dataset(n_ages: usize, inc: f64, cf: f64, denom: f64) -> Dataset {
    curved_dataset(n_ages, denom, |_| inc, |_| cf)
}

pub(crate) fn empty_dataset(n_ages: usize) -> Dataset {
    Dataset::single(ObservedCounts {
        mortality: vec![Count::none(); n_ages],
        prevalence: Some(vec![Count::none(); n_ages]),
        incidence: None,
        remission: None,
    })
    .unwrap()
}

/// Two-parameter model: one constant log case fatality, one constant log
/// incidence.
pub(crate) fn const_spec() -> ModelSpec {
    ModelSpec {
        k: 2,
        cf: RateModel::constant(),
        inc: RateModel::constant(),
        ..ModelSpec::default()
    }
}
