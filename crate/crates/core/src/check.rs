//! Model criticism: observed-vs-fitted tables, conflict p-values for single
//! counts, and leave-one-out cross-validation via Pareto-smoothed importance
//! sampling, with an exact refit oracle for small datasets.

use crate::infer::{fit_mcmc, FitResult, McmcOptions, Method};
use crate::model::{
    Count, Dataset, ModelSpec, ObsKey, Outcome, PopulationProbs, Posterior,
};
use crate::special::{beta_tails, log_sum_exp, quantile_sorted, sort_f64};
use crate::{par, Error, Result};

/// Pareto shape above which an importance-sampling estimate is unreliable.
pub const PARETO_K_FLAG: f64 = 0.7;

/// Fewest posterior draws accepted for importance-sampling cross-validation.
pub const MIN_LOO_DRAWS: usize = 1000;

/// One observed count next to the fitted probability of its generating
/// quantity: the one-year incidence probability for incidence rows,
/// prevalence for prevalence rows, the population-wide death probability for
/// mortality rows, and the annual remission probability for remission rows.
#[derive(Clone, Debug)]
pub struct CheckRow {
    pub outcome: Outcome,
    pub age: usize,
    pub area: String,
    pub gender: String,
    pub y: f64,
    pub n: f64,
    /// y / n.
    pub observed: f64,
    /// Posterior point: evaluated at the mode for optimisation fits, the
    /// posterior median of the probability otherwise.
    pub fitted: f64,
    /// Equal-tailed 95% posterior interval around `fitted`.
    pub lower: f64,
    pub upper: f64,
}

/// Fitted-vs-observed table plus the scalar mortality summary.
#[derive(Clone, Debug)]
pub struct FitChecks {
    pub rows: Vec<CheckRow>,
    /// Mean of |observed - fitted| over the mortality rows; NaN when the
    /// data contain no observed mortality count.
    pub mean_abs_mortality_error: f64,
}

fn outcome_series(probs: &PopulationProbs, outcome: Outcome) -> &[f64] {
    match outcome {
        Outcome::Mortality => &probs.mort,
        Outcome::Incidence => &probs.inc_prob,
        Outcome::Prevalence => &probs.prev,
        Outcome::Remission => &probs.rem_prob,
    }
}

/// Compares every observed count in `data` (cells with a positive
/// denominator) against the fitted probability of the same quantity under
/// `fit`. Rows follow the observation order: populations area-major, then
/// outcome, then age.
pub fn fitted_vs_observed(fit: &FitResult, data: &Dataset) -> Result<FitChecks> {
    if data.n_ages() != fit.data.n_ages()
        || data.areas() != fit.data.areas()
        || data.genders() != fit.data.genders()
    {
        return Err(Error::Dimension(format!(
            "checking data covers {} ages, areas {:?}, genders {:?}; the fit covers {} ages, areas {:?}, genders {:?}",
            data.n_ages(),
            data.areas(),
            data.genders(),
            fit.data.n_ages(),
            fit.data.areas(),
            fit.data.genders(),
        )));
    }
    let post = Posterior::new(&fit.data, &fit.spec)?;
    let n_draws = fit.draws.len();
    let mut rows = Vec::new();
    let mut mort_rows = 0usize;
    let mut mort_abs = 0.0f64;

    for pop in 0..data.n_populations() {
        let (ai, gi) = data.population_key(pop);
        let point = match &fit.mode {
            Some(m) => Some(post.population_probs(m, pop)?),
            None => None,
        };
        let draw_probs: Vec<PopulationProbs> =
            par::map_indexed(n_draws, |d| post.population_probs(&fit.draws[d], pop))
                .into_iter()
                .collect::<Result<_>>()?;
        let counts = data.counts_by_index(pop);
        for outcome in Outcome::ALL {
            let Some(col) = counts.outcome(outcome) else {
                continue;
            };
            for (age, c) in col.iter().enumerate() {
                if !c.is_observed() {
                    continue;
                }
                let mut vals: Vec<f64> = draw_probs
                    .iter()
                    .map(|p| outcome_series(p, outcome)[age])
                    .collect();
                sort_f64(&mut vals);
                let (lower, upper, median) = if vals.is_empty() {
                    (f64::NAN, f64::NAN, f64::NAN)
                } else {
                    (
                        quantile_sorted(&vals, 0.025),
                        quantile_sorted(&vals, 0.975),
                        quantile_sorted(&vals, 0.5),
                    )
                };
                let fitted = match &point {
                    Some(p) => outcome_series(p, outcome)[age],
                    None => median,
                };
                let observed = c.y / c.n;
                if outcome == Outcome::Mortality {
                    mort_rows += 1;
                    mort_abs += (observed - fitted).abs();
                }
                rows.push(CheckRow {
                    outcome,
                    age,
                    area: data.areas()[ai].clone(),
                    gender: data.genders()[gi].clone(),
                    y: c.y,
                    n: c.n,
                    observed,
                    fitted,
                    lower,
                    upper,
                });
            }
        }
    }
    let mean_abs_mortality_error = if mort_rows == 0 {
        f64::NAN
    } else {
        mort_abs / mort_rows as f64
    };
    Ok(FitChecks {
        rows,
        mean_abs_mortality_error,
    })
}

/// Two-sided conflict p-value for a count y out of n against a reference
/// probability. The probability behind the count gets a Beta(0.5, 0.5)
/// prior; with q the posterior probability that it lies below `p_full`, the
/// p-value is 2 min(q, 1-q). Small values mean the count disagrees with the
/// reference by more than sampling variation explains.
pub fn conflict_pvalue(y: f64, n: f64, p_full: f64) -> Result<f64> {
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::InvalidInput(format!(
            "denominator must be positive and finite, got {n}"
        )));
    }
    if !(y >= 0.0 && y <= n) {
        return Err(Error::InvalidInput(format!(
            "count must satisfy 0 <= y <= n, got y={y}, n={n}"
        )));
    }
    if !(p_full > 0.0 && p_full < 1.0) {
        return Err(Error::InvalidInput(format!(
            "reference probability must lie strictly inside (0, 1), got {p_full}"
        )));
    }
    let (q, one_minus_q) = beta_tails(y + 0.5, n - y + 0.5, p_full);
    Ok((2.0 * q.min(one_minus_q)).clamp(f64::MIN_POSITIVE, 1.0))
}

/// Leave-one-out cross-validation summary. Entries align with
/// `observations`; `flagged` marks estimates whose Pareto shape exceeds
/// [`PARETO_K_FLAG`] and which should not enter headline comparisons.
#[derive(Clone, Debug)]
pub struct LooResult {
    pub observations: Vec<ObsKey>,
    pub elpd_i: Vec<f64>,
    pub pareto_k: Vec<f64>,
    pub flagged: Vec<bool>,
    /// Sum of `elpd_i`.
    pub elpd: f64,
    /// -2 * elpd, lower is better.
    pub looic: f64,
}

impl LooResult {
    fn from_parts(observations: Vec<ObsKey>, elpd_i: Vec<f64>, pareto_k: Vec<f64>) -> Self {
        let flagged = pareto_k.iter().map(|&k| k > PARETO_K_FLAG).collect();
        let elpd: f64 = elpd_i.iter().sum();
        LooResult {
            observations,
            elpd_i,
            pareto_k,
            flagged,
            elpd,
            looic: -2.0 * elpd,
        }
    }

    pub fn n_flagged(&self) -> usize {
        self.flagged.iter().filter(|f| **f).count()
    }

    /// Restriction to the observations satisfying `keep`, with totals
    /// recomputed over the subset.
    pub fn filtered(&self, keep: impl Fn(&ObsKey) -> bool) -> LooResult {
        let idx: Vec<usize> = (0..self.observations.len())
            .filter(|&i| keep(&self.observations[i]))
            .collect();
        LooResult::from_parts(
            idx.iter().map(|&i| self.observations[i]).collect(),
            idx.iter().map(|&i| self.elpd_i[i]).collect(),
            idx.iter().map(|&i| self.pareto_k[i]).collect(),
        )
    }
}

/// Expected log predictive density of every observation under leave-one-out
/// cross-validation, estimated from the full-posterior draws by importance
/// sampling with Pareto-smoothed tails.
pub fn psis_loo(fit: &FitResult) -> Result<LooResult> {
    if fit.method != Method::Mcmc {
        return Err(Error::InvalidInput(
            "cross-validation needs posterior draws from MCMC; refit with the mcmc method".into(),
        ));
    }
    let s = fit.draws.len();
    if s < MIN_LOO_DRAWS {
        return Err(Error::InvalidInput(format!(
            "{s} posterior draws are too few for importance sampling; at least {MIN_LOO_DRAWS} are required"
        )));
    }
    let post = Posterior::new(&fit.data, &fit.spec)?;
    let observations = post.observations();
    if observations.is_empty() {
        return Err(Error::InvalidInput(
            "the dataset has no observed counts to cross-validate".into(),
        ));
    }
    let loglik: Vec<Vec<f64>> =
        par::map_indexed(s, |d| post.loglik_by_observation(&fit.draws[d]))
            .into_iter()
            .collect::<Result<_>>()?;

    let n_obs = observations.len();
    let per_obs: Vec<(f64, f64)> = par::map_indexed(n_obs, |i| {
        let li: Vec<f64> = (0..s).map(|d| loglik[d][i]).collect();
        let ratios: Vec<f64> = li.iter().map(|l| -l).collect();
        let (lw, khat) = pareto_smoothed_weights(&ratios);
        let weighted: Vec<f64> = lw.iter().zip(&li).map(|(w, l)| w + l).collect();
        let elpd = log_sum_exp(&weighted) - log_sum_exp(&lw);
        (elpd, khat)
    });

    let (elpd_i, pareto_k) = per_obs.into_iter().unzip();
    Ok(LooResult::from_parts(observations, elpd_i, pareto_k))
}

/// Log importance weights, shifted so the largest is zero, with the tail
/// replaced by expected order statistics of a generalized Pareto fit.
/// Returns the weights and the fitted (regularized) Pareto shape. A shape
/// of -inf means the tail was degenerate (all ratios equal), +inf that it
/// was too short to assess; neither triggers smoothing.
fn pareto_smoothed_weights(log_ratios: &[f64]) -> (Vec<f64>, f64) {
    let s = log_ratios.len();
    let max_lr = log_ratios.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut lw: Vec<f64> = log_ratios.iter().map(|r| r - max_lr).collect();

    let m = (0.2 * s as f64).min(3.0 * (s as f64).sqrt()).ceil() as usize;
    if m < 5 || m + 1 >= s {
        return (lw, f64::INFINITY);
    }
    // Stable sort keeps tied weights in draw order, fixing which draws the
    // smoothed tail values land on.
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| lw[a].total_cmp(&lw[b]));

    let cutoff = lw[order[s - m - 1]].exp();
    let tail: Vec<f64> = order[s - m..].iter().map(|&i| lw[i].exp() - cutoff).collect();
    if !(tail[m - 1] > 0.0) {
        return (lw, f64::NEG_INFINITY);
    }
    let (khat, sigma) = gpd_fit(&tail);
    if khat.is_finite() && sigma.is_finite() && sigma > 0.0 {
        for (j, &i) in order[s - m..].iter().enumerate() {
            let p = (j as f64 + 0.5) / m as f64;
            lw[i] = (gpd_quantile(p, khat, sigma) + cutoff).ln();
        }
    }
    // Smoothed values never exceed the largest raw weight.
    for w in &mut lw {
        if *w > 0.0 {
            *w = 0.0;
        }
    }
    (lw, khat)
}

/// Generalized Pareto fit to exceedances `x` (ascending, non-negative, with
/// a positive maximum) by the profile-posterior method of Zhang and
/// Stephens, with the shape estimate shrunk toward 1/2 by ten
/// pseudo-observations. Returns (shape, scale).
fn gpd_fit(x: &[f64]) -> (f64, f64) {
    let n = x.len();
    let nf = n as f64;
    let xmax = x[n - 1];
    let mut xstar = x[(nf / 4.0 + 0.5).floor() as usize - 1];
    if !(xstar > 0.0) {
        // Over a quarter of the tail ties the cutoff; any positive anchor
        // keeps the grid finite.
        xstar = xmax / 4.0;
    }
    let grid = 30 + nf.sqrt().floor() as usize;
    let mut thetas = Vec::with_capacity(grid);
    let mut lprof = Vec::with_capacity(grid);
    for j in 1..=grid {
        let theta =
            1.0 / xmax + (1.0 - (grid as f64 / (j as f64 - 0.5)).sqrt()) / (3.0 * xstar);
        // Conditional maximum of the shape given theta.
        let k = x.iter().map(|&v| (-theta * v).ln_1p()).sum::<f64>() / nf;
        let l = nf * ((-theta / k).ln() - k - 1.0);
        thetas.push(theta);
        lprof.push(if l.is_finite() { l } else { f64::NEG_INFINITY });
    }
    let lse = log_sum_exp(&lprof);
    let theta_hat: f64 = thetas
        .iter()
        .zip(&lprof)
        .map(|(t, l)| t * (l - lse).exp())
        .sum();
    let k_mle = x.iter().map(|&v| (-theta_hat * v).ln_1p()).sum::<f64>() / nf;
    let sigma = -k_mle / theta_hat;
    let k_reg = (k_mle * nf + 5.0) / (nf + 10.0);
    (k_reg, sigma)
}

/// Quantile of the generalized Pareto distribution with location zero.
fn gpd_quantile(p: f64, k: f64, sigma: f64) -> f64 {
    if k.abs() < 1e-12 {
        -sigma * (-p).ln_1p()
    } else {
        sigma / k * ((1.0 - p).powf(-k) - 1.0)
    }
}

/// Exact leave-one-out cross-validation by refitting the model once per
/// observation with that count removed. A validation oracle: cost grows
/// linearly in refits, so it is limited to 50 observations and must be
/// requested explicitly.
pub fn exact_loo(data: &Dataset, spec: &ModelSpec, opts: &McmcOptions) -> Result<LooResult> {
    let post = Posterior::new(data, spec)?;
    let observations = post.observations();
    if observations.is_empty() {
        return Err(Error::InvalidInput(
            "the dataset has no observed counts to cross-validate".into(),
        ));
    }
    if observations.len() > 50 {
        return Err(Error::Unsupported(format!(
            "exact refit cross-validation is limited to 50 observations, the dataset has {}",
            observations.len()
        )));
    }
    let mut elpd_i = Vec::with_capacity(observations.len());
    for (i, key) in observations.iter().enumerate() {
        let reduced = without_observation(data, key)?;
        let refit = fit_mcmc(&reduced, spec, opts)?;
        // log p(y_i | rest) = log of the draw-averaged density of the
        // held-out count. The full-data posterior object only evaluates the
        // likelihood here; the draws come from the reduced fit.
        let li: Vec<f64> = refit
            .draws
            .iter()
            .map(|d| post.loglik_by_observation(d).map(|l| l[i]))
            .collect::<Result<_>>()?;
        elpd_i.push(log_sum_exp(&li) - (li.len() as f64).ln());
    }
    let k = vec![f64::NEG_INFINITY; observations.len()];
    Ok(LooResult::from_parts(observations, elpd_i, k))
}

fn without_observation(data: &Dataset, key: &ObsKey) -> Result<Dataset> {
    let mut pops = Vec::with_capacity(data.n_populations());
    for p in 0..data.n_populations() {
        let mut counts = data.counts_by_index(p).clone();
        if data.population_key(p) == (key.area, key.gender) {
            let col = match key.outcome {
                Outcome::Mortality => Some(&mut counts.mortality),
                Outcome::Incidence => counts.incidence.as_mut(),
                Outcome::Prevalence => counts.prevalence.as_mut(),
                Outcome::Remission => counts.remission.as_mut(),
            };
            let col = col.ok_or_else(|| {
                Error::InvalidInput(format!(
                    "{} is not observed in this dataset",
                    key.outcome.label()
                ))
            })?;
            col[key.age] = Count::none();
        }
        pops.push(counts);
    }
    Dataset::new(data.areas().to_vec(), data.genders().to_vec(), pops)
}

/// Cross-validatory comparison of models fitted to the same observations.
#[derive(Clone, Debug)]
pub struct LooComparison {
    pub labels: Vec<String>,
    /// Per-model count of observations with an unreliable Pareto shape.
    pub flagged: Vec<usize>,
    /// Observations dropped from every model because at least one model
    /// flagged them.
    pub dropped: usize,
    /// Observations entering the comparison.
    pub retained: usize,
    /// LOOIC per model over the retained observations.
    pub looic: Vec<f64>,
    /// looic minus the first model's looic; negative favours that model.
    pub delta: Vec<f64>,
}

/// Compares models by LOOIC over the observations every model estimates
/// reliably. All results must cover the identical observation set.
pub fn compare_loo(results: &[LooResult], labels: &[&str]) -> Result<LooComparison> {
    if results.is_empty() {
        return Err(Error::InvalidInput("no cross-validation results".into()));
    }
    if results.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} results but {} labels",
            results.len(),
            labels.len()
        )));
    }
    let reference = &results[0].observations;
    for (r, label) in results.iter().zip(labels) {
        if &r.observations != reference {
            return Err(Error::InvalidInput(format!(
                "model {label:?} covers a different observation set; \
                 cross-validation comparisons need identical observations"
            )));
        }
    }
    let n = reference.len();
    let keep: Vec<bool> = (0..n)
        .map(|i| results.iter().all(|r| !r.flagged[i]))
        .collect();
    let retained = keep.iter().filter(|k| **k).count();
    if retained == 0 {
        return Err(Error::InvalidInput(
            "every observation was flagged unreliable in some model".into(),
        ));
    }
    let looic: Vec<f64> = results
        .iter()
        .map(|r| {
            let e: f64 = (0..n).filter(|&i| keep[i]).map(|i| r.elpd_i[i]).sum();
            -2.0 * e
        })
        .collect();
    let delta = looic.iter().map(|l| l - looic[0]).collect();
    Ok(LooComparison {
        labels: labels.iter().map(|l| l.to_string()).collect(),
        flagged: results.iter().map(|r| r.n_flagged()).collect(),
        dropped: n - retained,
        retained,
        looic,
        delta,
    })
}
