//! Ground-truth generators: individual-level cohort simulation as a
//! brute-force oracle for the occupancy recursions, and binomial count
//! synthesis for recovery tests.

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Binomial, Exp};

use crate::error::Result;
use crate::markov::{self, RateTriple, StateVec, TrendMatrix};
use crate::model::{probs_for_rates, Count, ObservedCounts, PopulationProbs, Trends};
use crate::par;

/// A known rate surface: one rate triple per age, optionally modulated by
/// calendar trends relative to the data year.
#[derive(Clone, Debug)]
pub struct TrueRates {
    pub rates: Vec<RateTriple>,
    pub trends: Option<Trends>,
    /// State distribution at age zero.
    pub s0: StateVec,
}

impl TrueRates {
    pub fn new(rates: Vec<RateTriple>) -> Self {
        TrueRates {
            rates,
            trends: None,
            s0: [1.0, 0.0, 0.0],
        }
    }

    pub fn constant(n_ages: usize, i: f64, f: f64, r: f64) -> Self {
        TrueRates::new(vec![RateTriple::new(i, f, r); n_ages])
    }

    pub fn from_curves(inc: &[f64], cf: &[f64], rem: &[f64]) -> Self {
        assert!(inc.len() == cf.len() && cf.len() == rem.len());
        TrueRates::new(
            inc.iter()
                .zip(cf)
                .zip(rem)
                .map(|((&i, &f), &r)| RateTriple::new(i, f, r))
                .collect(),
        )
    }

    pub fn n_ages(&self) -> usize {
        self.rates.len()
    }

    /// Rates experienced at age `b` by the cohort observed at `target_age`
    /// in the data year.
    fn rates_at(&self, b: usize, target_age: usize) -> RateTriple {
        match &self.trends {
            None => self.rates[b],
            Some(t) => {
                let year = TrendMatrix::N_YEARS - 1 - target_age + b;
                markov::effective_rates(&self.rates, &t.inc, &t.cf, b, year)
            }
        }
    }

    /// State distributions at each age from the matrix recursion (the
    /// quantity the microsimulation estimates by brute force).
    pub fn occupancy(&self) -> Result<Vec<StateVec>> {
        match &self.trends {
            None => Ok(markov::occupancy_path(&self.rates, self.s0)),
            Some(t) => markov::occupancy_lexis(&self.rates, &t.inc, &t.cf, self.s0),
        }
    }

    /// Model-implied one-year observation probabilities per age.
    pub fn implied_probs(&self) -> Result<PopulationProbs> {
        Ok(probs_for_rates(&self.rates, &self.occupancy()?))
    }
}

const SHARD: u64 = 4096;

/// Simulates one person-year: starting state, one year of piecewise-constant
/// intensities, returns the state at the year boundary. Event times within
/// the year are competing exponentials, re-drawn after each transition, which
/// is exact for the continuous-time model.
fn simulate_year(rates: RateTriple, mut state: u8, rng: &mut ChaCha12Rng) -> u8 {
    let mut remaining = 1.0_f64;
    loop {
        let total = match state {
            0 => rates.i,
            1 => rates.r + rates.f,
            _ => return 2,
        };
        if total <= 0.0 {
            return state;
        }
        let wait = rng.sample(Exp::new(total).unwrap());
        if wait >= remaining {
            return state;
        }
        remaining -= wait;
        state = match state {
            0 => 1,
            _ => {
                // In the disease state, remission competes with death.
                if rng.random::<f64>() * total < rates.r {
                    0
                } else {
                    2
                }
            }
        };
    }
}

fn sample_initial_state(s0: StateVec, rng: &mut ChaCha12Rng) -> u8 {
    let u: f64 = rng.random();
    if u < s0[0] {
        0
    } else if u < s0[0] + s0[1] {
        1
    } else {
        2
    }
}

/// Counts of individuals in each state at the start of the given age, for
/// the cohort observed at that age in the data year. Without trends every
/// age describes the same birth cohort; with trends each age is its own
/// cohort diagonal.
pub fn microsimulate_at(
    truth: &TrueRates,
    age: usize,
    cohort_size: u64,
    seed: u64,
) -> [u64; 3] {
    assert!(age < truth.n_ages());
    assert!(cohort_size >= 1);
    let shards = cohort_size.div_ceil(SHARD);
    let counts = par::map_indexed(shards as usize, |shard| {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(shard as u64);
        let lo = shard as u64 * SHARD;
        let hi = (lo + SHARD).min(cohort_size);
        let mut local = [0u64; 3];
        for _ in lo..hi {
            let mut state = sample_initial_state(truth.s0, &mut rng);
            for b in 0..age {
                state = simulate_year(truth.rates_at(b, age), state, &mut rng);
            }
            local[state as usize] += 1;
        }
        local
    });
    let mut out = [0u64; 3];
    for c in counts {
        for k in 0..3 {
            out[k] += c[k];
        }
    }
    out
}

/// Per-age state counts for a simulated cohort of `cohort_size` individuals.
///
/// Without trends, one pass per individual records the state at every age
/// boundary. With trends the ages belong to different birth cohorts, so each
/// age is simulated separately (quadratic in the number of ages).
pub fn microsimulate(truth: &TrueRates, cohort_size: u64, seed: u64) -> Vec<[u64; 3]> {
    assert!(cohort_size >= 1);
    let n_ages = truth.n_ages();
    if truth.trends.is_some() {
        return (0..n_ages)
            .map(|a| microsimulate_at(truth, a, cohort_size, seed.wrapping_add(a as u64)))
            .collect();
    }
    let shards = cohort_size.div_ceil(SHARD);
    let counts = par::map_indexed(shards as usize, |shard| {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(shard as u64);
        let lo = shard as u64 * SHARD;
        let hi = (lo + SHARD).min(cohort_size);
        let mut local = vec![[0u64; 3]; n_ages];
        for _ in lo..hi {
            let mut state = sample_initial_state(truth.s0, &mut rng);
            local[0][state as usize] += 1;
            for a in 1..n_ages {
                state = simulate_year(truth.rates[a - 1], state, &mut rng);
                local[a][state as usize] += 1;
            }
        }
        local
    });
    let mut out = vec![[0u64; 3]; n_ages];
    for c in counts {
        for (acc, row) in out.iter_mut().zip(c) {
            for k in 0..3 {
                acc[k] += row[k];
            }
        }
    }
    out
}

/// Denominators for synthetic counts, one per age for each outcome present.
#[derive(Clone, Debug)]
pub struct Denominators {
    pub mortality: Vec<f64>,
    pub incidence: Option<Vec<f64>>,
    pub prevalence: Option<Vec<f64>>,
    pub remission: Option<Vec<f64>>,
}

impl Denominators {
    /// The same denominator everywhere for mortality, incidence, and
    /// prevalence; no remission counts.
    pub fn uniform(n_ages: usize, n: f64) -> Self {
        Denominators {
            mortality: vec![n; n_ages],
            incidence: Some(vec![n; n_ages]),
            prevalence: Some(vec![n; n_ages]),
            remission: None,
        }
    }
}

fn draw_counts(
    probs: &[f64],
    denoms: &[f64],
    rng: &mut ChaCha12Rng,
) -> Vec<Count> {
    probs
        .iter()
        .zip(denoms)
        .map(|(&p, &n)| {
            let trials = n.round().max(0.0) as u64;
            if trials == 0 {
                return Count::none();
            }
            let p = p.clamp(0.0, 1.0);
            let y = rng.sample(Binomial::new(trials, p).unwrap());
            Count::new(y as f64, trials as f64)
        })
        .collect()
}

/// Draws binomial counts around the model-implied probabilities.
/// Reproducible: the same truth, denominators, and seed give identical data.
pub fn synthesize_counts(
    truth: &TrueRates,
    denoms: &Denominators,
    seed: u64,
) -> Result<ObservedCounts> {
    let probs = truth.implied_probs()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    // Fixed outcome order keeps the RNG stream stable across optional
    // columns: each outcome gets its own stream.
    let mut next = |probs: &[f64], denoms: Option<&Vec<f64>>, stream: u64| {
        denoms.map(|d| {
            rng.set_stream(stream);
            draw_counts(probs, d, &mut rng)
        })
    };
    Ok(ObservedCounts {
        mortality: next(&probs.mort, Some(&denoms.mortality), 0).unwrap(),
        incidence: next(&probs.inc_prob, denoms.incidence.as_ref(), 1),
        prevalence: next(&probs.prev, denoms.prevalence.as_ref(), 2),
        remission: next(&probs.rem_prob, denoms.remission.as_ref(), 3),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn binomial_se(p: f64, n: f64) -> f64 {
        (p * (1.0 - p) / n).sqrt().max(1e-9)
    }

    #[test]
    fn zero_rates_leave_everyone_disease_free() {
        let truth = TrueRates::constant(20, 0.0, 0.0, 0.0);
        let counts = microsimulate(&truth, 5000, 1);
        for row in counts {
            assert_eq!(row, [5000, 0, 0]);
        }
    }

    #[test]
    fn cohort_fractions_match_matrix_recursion() {
        let truth = TrueRates::constant(51, 0.1, 0.2, 0.0);
        let n = 200_000u64;
        let counts = microsimulate(&truth, n, 42);
        let occ = truth.occupancy().unwrap();
        for &age in &[10usize, 25, 50] {
            for k in 0..3 {
                let frac = counts[age][k] as f64 / n as f64;
                let se = binomial_se(occ[age][k], n as f64);
                assert!(
                    (frac - occ[age][k]).abs() < 3.0 * se,
                    "age {age} state {k}: {frac} vs {} (se {se})",
                    occ[age][k]
                );
            }
        }
    }

    #[test]
    fn fast_remission_keeps_prevalence_near_flow_balance() {
        // i = 0.05 in, r = 5.0 out: the diseased pool turns over so fast the
        // prevalence sits close to the i/(i+r) flow-balance level.
        let truth = TrueRates::constant(31, 0.05, 0.0, 5.0);
        let n = 100_000u64;
        let counts = microsimulate(&truth, n, 7);
        let occ = truth.occupancy().unwrap();
        let age = 30;
        let frac = counts[age][1] as f64 / n as f64;
        let expected = occ[age][1];
        assert!((expected - 0.05 / 5.05).abs() < 2e-3, "analytic {expected}");
        assert!((frac - expected).abs() < 3.0 * binomial_se(expected, n as f64));
    }

    #[test]
    fn trended_cohort_matches_lexis_recursion() {
        // Doubled past incidence at every age and year before the data year.
        let n_ages = 31;
        let rows: Vec<Vec<f64>> = (0..n_ages)
            .map(|_| {
                let mut row = vec![2.0; TrendMatrix::N_YEARS];
                row[TrendMatrix::N_YEARS - 1] = 1.0;
                row
            })
            .collect();
        let mut truth = TrueRates::constant(n_ages, 0.05, 0.1, 0.0);
        truth.trends = Some(Trends {
            inc: TrendMatrix::from_rows(&rows).unwrap(),
            cf: TrendMatrix::unit(n_ages),
        });
        // The lexis recursion for this cohort must agree with a plain
        // doubled-incidence recursion, since every year it lived through
        // has ratio 2.
        let occ = truth.occupancy().unwrap();
        let doubled = markov::occupancy_path(
            &vec![RateTriple::new(0.1, 0.1, 0.0); n_ages],
            [1.0, 0.0, 0.0],
        );
        assert_eq!(occ[30], doubled[30]);
        let n = 200_000u64;
        let age = 30;
        let counts = microsimulate_at(&truth, age, n, 1);
        for k in 0..3 {
            let frac = counts[k] as f64 / n as f64;
            let se = binomial_se(occ[age][k], n as f64);
            assert!(
                (frac - occ[age][k]).abs() < 3.0 * se,
                "state {k}: {frac} vs {} (se {se})",
                occ[age][k]
            );
        }
    }

    #[test]
    fn synthesized_counts_are_reproducible_and_consistent() {
        let truth = TrueRates::constant(25, 0.02, 0.15, 0.0);
        let denoms = Denominators::uniform(25, 1e4);
        let a = synthesize_counts(&truth, &denoms, 11).unwrap();
        let b = synthesize_counts(&truth, &denoms, 11).unwrap();
        assert_eq!(a.mortality, b.mortality);
        assert_eq!(a.incidence, b.incidence);
        assert_eq!(a.prevalence, b.prevalence);
        let c = synthesize_counts(&truth, &denoms, 12).unwrap();
        assert_ne!(a.mortality, c.mortality);

        // Zero denominators produce unobserved entries.
        let empty = Denominators {
            mortality: vec![0.0; 25],
            incidence: None,
            prevalence: Some(vec![0.0; 25]),
            remission: None,
        };
        let z = synthesize_counts(&truth, &empty, 1).unwrap();
        assert!(z.mortality.iter().all(|c| c.y == 0.0 && c.n == 0.0));
        assert!(z.incidence.is_none());
    }

    #[test]
    fn huge_denominators_pin_down_the_implied_probabilities() {
        let truth = TrueRates::constant(10, 0.03, 0.1, 0.05);
        let mut denoms = Denominators::uniform(10, 1e8);
        denoms.remission = Some(vec![1e8; 10]);
        let data = synthesize_counts(&truth, &denoms, 5).unwrap();
        let probs = truth.implied_probs().unwrap();
        for a in 0..10 {
            assert!((data.mortality[a].y / data.mortality[a].n - probs.mort[a]).abs() < 1e-3);
            let inc = data.incidence.as_ref().unwrap();
            assert!((inc[a].y / inc[a].n - probs.inc_prob[a]).abs() < 1e-3);
            let prev = data.prevalence.as_ref().unwrap();
            assert!((prev[a].y / prev[a].n - probs.prev[a]).abs() < 1e-3);
            let rem = data.remission.as_ref().unwrap();
            assert!((rem[a].y / rem[a].n - probs.rem_prob[a]).abs() < 1e-3);
        }
    }

    /// The dedicated streams make each outcome's draws independent of which
    /// other outcome columns are requested.
    #[test]
    fn outcome_draws_do_not_depend_on_other_columns() {
        let truth = TrueRates::constant(8, 0.02, 0.1, 0.0);
        let full = synthesize_counts(&truth, &Denominators::uniform(8, 1000.0), 3).unwrap();
        let mort_only = Denominators {
            mortality: vec![1000.0; 8],
            incidence: None,
            prevalence: None,
            remission: None,
        };
        let partial = synthesize_counts(&truth, &mort_only, 3).unwrap();
        assert_eq!(full.mortality, partial.mortality);
    }
}
