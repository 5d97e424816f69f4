//! Cross-cutting consistency checks that exercise several modules at once:
//! sampler calibration against the prior, seed-merge convergence, ordering
//! invariance of the optimizer, and the collapse of the hierarchy as the
//! between-area spread vanishes.

mod common;

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use threestate::infer::diag::{ks_pvalue, ks_statistic_uniform, split_rhat};
use threestate::infer::{fit_mcmc, fit_mode, tidy_filtered, McmcOptions, OptOptions};
use threestate::model::{Dataset, HyperSetting, ModelSpec, PriorSettings, RateModel};
use threestate::simulate::{synthesize_counts, Denominators, TrueRates};

fn curved_truth(n_ages: usize, inc_mid: f64, cf_mid: f64) -> TrueRates {
    let half = (n_ages - 1) as f64 / 2.0;
    let t = |a: usize| (a as f64 - half) / half;
    let inc: Vec<f64> = (0..n_ages)
        .map(|a| inc_mid * (0.8 * t(a) + 0.4 * t(a) * t(a)).exp())
        .collect();
    let cf: Vec<f64> = (0..n_ages)
        .map(|a| cf_mid * (0.6 * t(a) + 0.3 * t(a) * t(a)).exp())
        .collect();
    TrueRates::from_curves(&inc, &cf, &vec![0.0; n_ages])
}

fn single_pop(counts: threestate::model::ObservedCounts) -> Dataset {
    Dataset::new(vec!["all".into()], vec!["all".into()], vec![counts]).unwrap()
}

fn param_index(names: &[String], name: &str) -> usize {
    names
        .iter()
        .position(|n| n == name)
        .unwrap_or_else(|| panic!("parameter {name} not found in {names:?}"))
}

#[test]
fn tidy_case_fatality_slice_has_one_row_per_age() {
    let truth = curved_truth(70, 0.012, 0.09);
    let counts = synthesize_counts(&truth, &Denominators::uniform(70, 2e4), 41).unwrap();
    let fit = fit_mode(
        &single_pop(counts),
        &ModelSpec::default(),
        &OptOptions {
            laplace_draws: 300,
            ..OptOptions::default()
        },
    )
    .unwrap();
    let rows: Vec<_> = tidy_filtered(&fit, &["cf"], &[0.025, 0.975])
        .unwrap()
        .into_iter()
        .filter(|r| (61..=65).contains(&r.age))
        .collect();
    assert_eq!(rows.len(), 5);
    for r in &rows {
        assert!(r.quantiles[0] <= r.point && r.point <= r.quantiles[1]);
        assert!(r.point > 0.0);
    }
}

/// Draws the generating parameters from the prior, simulates data, fits,
/// and locates the truth within the posterior draws. If the sampler targets
/// the right distribution those posterior quantiles are uniform.
#[test]
fn sampler_recovers_rank_uniform_quantiles_from_the_prior() {
    let n_ages = 10;
    let reps = 100;
    let prior_sd = 0.5;
    let spec = ModelSpec {
        k: 2,
        cf: RateModel::constant(),
        inc: RateModel::constant(),
        priors: PriorSettings {
            intercept_sd: prior_sd,
            ..PriorSettings::default()
        },
        ..ModelSpec::default()
    };
    let mut prior_rng = ChaCha12Rng::seed_from_u64(7001);

    let mut quantiles = [Vec::with_capacity(reps), Vec::with_capacity(reps)];
    for rep in 0..reps {
        prior_rng.set_stream(rep as u64);
        let truth_cf: f64 = prior_sd * prior_rng.sample::<f64, _>(StandardNormal);
        let truth_inc: f64 = prior_sd * prior_rng.sample::<f64, _>(StandardNormal);
        let truth = TrueRates::constant(n_ages, truth_inc.exp(), truth_cf.exp(), 0.0);
        let counts =
            synthesize_counts(&truth, &Denominators::uniform(n_ages, 400.0), 40_000 + rep as u64)
                .unwrap();
        let fit = fit_mcmc(
            &single_pop(counts),
            &spec,
            &McmcOptions {
                chains: 2,
                warmup: 250,
                samples: 250,
                seed: 9000 + rep as u64,
                ..McmcOptions::default()
            },
        )
        .unwrap();
        let idx = [
            param_index(&fit.names, "cf_lograte"),
            param_index(&fit.names, "inc_lograte"),
        ];
        for (q, (&i, truth_val)) in quantiles
            .iter_mut()
            .zip(idx.iter().zip([truth_cf, truth_inc]))
        {
            let below = fit.draws.iter().filter(|d| d[i] < truth_val).count();
            q.push(below as f64 / fit.draws.len() as f64);
        }
    }

    for (q, what) in quantiles.iter_mut().zip(["case fatality", "incidence"]) {
        q.sort_by(f64::total_cmp);
        let d = ks_statistic_uniform(q);
        let p = ks_pvalue(d, q.len());
        assert!(p > 0.01, "{what} rank quantiles non-uniform: D={d}, p={p}");
    }
}

#[test]
fn independent_seeds_mix_into_one_posterior() {
    let truth = curved_truth(12, 0.02, 0.1);
    let counts = synthesize_counts(&truth, &Denominators::uniform(12, 1e4), 17).unwrap();
    let data = single_pop(counts);
    let spec = ModelSpec {
        k: 4,
        hp_fixed: vec![("lambda0_cf".into(), 1.0), ("lambda0_inc".into(), 1.0)],
        ..ModelSpec::default()
    };
    let opts = |seed| McmcOptions {
        chains: 2,
        warmup: 400,
        samples: 400,
        seed,
        ..McmcOptions::default()
    };
    let fit_a = fit_mcmc(&data, &spec, &opts(11)).unwrap();
    let fit_b = fit_mcmc(&data, &spec, &opts(303)).unwrap();

    for name in ["cf_beta[1]", "inc_beta[1]"] {
        let idx = param_index(&fit_a.names, name);
        let mut chains = Vec::new();
        for fit in [&fit_a, &fit_b] {
            let per = fit.draws.len() / fit.n_chains;
            for c in 0..fit.n_chains {
                chains.push(
                    fit.draws[c * per..(c + 1) * per]
                        .iter()
                        .map(|d| d[idx])
                        .collect::<Vec<f64>>(),
                );
            }
        }
        let r = split_rhat(&chains);
        assert!(r < 1.01, "merged R-hat for {name} is {r}");
    }
}

fn hier_spec() -> ModelSpec {
    ModelSpec {
        k: 4,
        hierarchical: true,
        hp_fixed: vec![("lambda0_cf".into(), 1.0), ("lambda0_inc".into(), 1.0)],
        ..ModelSpec::default()
    }
}

fn three_area_data(order: [usize; 3]) -> Dataset {
    // Same incidence everywhere; case fatality scaled per area.
    let names = ["east", "north", "west"];
    let scales = [0.8, 1.0, 1.25];
    let pops: Vec<_> = order
        .iter()
        .map(|&i| {
            let truth = curved_truth(15, 0.02, 0.1 * scales[i]);
            synthesize_counts(&truth, &Denominators::uniform(15, 1e4), 600 + i as u64).unwrap()
        })
        .collect();
    Dataset::new(
        order.iter().map(|&i| names[i].to_string()).collect(),
        vec!["all".into()],
        pops,
    )
    .unwrap()
}

#[test]
fn area_order_does_not_move_the_mode() {
    let opts = OptOptions {
        laplace_draws: 0,
        ..OptOptions::default()
    };
    let fit_a = fit_mode(&three_area_data([0, 1, 2]), &hier_spec(), &opts).unwrap();
    let fit_b = fit_mode(&three_area_data([2, 0, 1]), &hier_spec(), &opts).unwrap();

    for area in ["east", "north", "west"] {
        let curve = |fit: &threestate::infer::FitResult| {
            let post = threestate::model::Posterior::new(&fit.data, &fit.spec).unwrap();
            let ai = fit.data.areas().iter().position(|a| a == area).unwrap();
            let pop = ai * fit.data.genders().len();
            post.population_curves(fit.mode.as_ref().unwrap(), pop).cf
        };
        let (ca, cb) = (curve(&fit_a), curve(&fit_b));
        for (age, (a, b)) in ca.iter().zip(&cb).enumerate() {
            assert!(
                (a.ln() - b.ln()).abs() < 1e-8,
                "area {area}, age {age}: {a} vs {b}"
            );
        }
    }
}

#[test]
fn vanishing_area_spread_collapses_intercepts() {
    let data = three_area_data([0, 1, 2]);
    let mut spec = hier_spec();
    spec.priors.lambda1 = HyperSetting::Fixed(1e-6);
    let fit = fit_mode(
        &data,
        &spec,
        &OptOptions {
            laplace_draws: 0,
            ..OptOptions::default()
        },
    )
    .unwrap();
    let mode = fit.mode.as_ref().unwrap();
    let b1 = mode[param_index(&fit.names, "cf_b1")];
    // Intercepts are non-centered: beta_{i,1} = b1 + lambda1 * z_i.
    let intercepts: Vec<f64> = ["east", "north", "west"]
        .iter()
        .map(|area| b1 + 1e-6 * mode[param_index(&fit.names, &format!("cf_z[{area}]"))])
        .collect();
    for i in 0..3 {
        for j in i + 1..3 {
            assert!(
                (intercepts[i] - intercepts[j]).abs() < 1e-3,
                "intercepts {} and {} differ: {intercepts:?}",
                i,
                j
            );
        }
    }
}
