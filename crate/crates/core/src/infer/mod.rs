//! Fitting machinery: posterior mode with a Gaussian (Laplace) approximation,
//! full MCMC via the no-U-turn sampler, tidy summaries of derived quantities,
//! and hyperparameter profiling.

pub mod diag;
mod lbfgs;
mod nuts;

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{Dataset, HyperSetting, ModelSpec, Posterior, KNOWN_HYPERS};
use crate::par;
use crate::special::{quantile_sorted, sort_f64};

/// Anything with a differentiable log density over a flat parameter vector.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;
    fn log_density(&self, x: &[f64]) -> f64;
    fn log_density_grad(&self, x: &[f64]) -> (f64, Vec<f64>);
}

impl LogDensity for Posterior<'_> {
    fn dim(&self) -> usize {
        self.n_params()
    }
    fn log_density(&self, x: &[f64]) -> f64 {
        self.log_posterior(x)
    }
    fn log_density_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
        self.log_posterior_grad(x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Opt,
    Mcmc,
}

/// Eigenvalues of the curvature at the mode below this are treated as a
/// failure to find an interior maximum.
pub const HESSIAN_EIG_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug)]
pub struct OptOptions {
    pub max_iter: usize,
    /// Total optimizer starts: the first from zero, the rest jittered.
    pub restarts: usize,
    pub seed: u64,
    /// Draws taken from the Gaussian approximation for interval summaries.
    pub laplace_draws: usize,
}

impl Default for OptOptions {
    fn default() -> Self {
        OptOptions {
            max_iter: 2000,
            restarts: 3,
            seed: 0,
            laplace_draws: 1000,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct McmcOptions {
    pub chains: usize,
    pub warmup: usize,
    pub samples: usize,
    pub seed: u64,
    pub max_treedepth: usize,
    pub target_accept: f64,
}

impl Default for McmcOptions {
    fn default() -> Self {
        McmcOptions {
            chains: 4,
            warmup: 1000,
            samples: 1000,
            seed: 0,
            max_treedepth: 10,
            target_accept: 0.8,
        }
    }
}

/// Method-specific quality indicators. Optimizer fits fill the first group,
/// MCMC fits the second.
#[derive(Clone, Debug, Default)]
pub struct Diagnostics {
    pub grad_norm: Option<f64>,
    pub iterations: Option<usize>,
    pub hessian_min_eigenvalue: Option<f64>,
    pub r_hat: Option<Vec<f64>>,
    pub ess: Option<Vec<f64>>,
    pub divergences: Option<usize>,
    pub divergence_fraction: Option<f64>,
    pub max_depth_hits: Option<usize>,
    pub step_sizes: Option<Vec<f64>>,
    pub accept_rates: Option<Vec<f64>>,
    /// Any parameter with split potential scale reduction above 1.05.
    pub flagged_rhat: bool,
    /// More than 10% of post-warmup transitions diverged.
    pub flagged_divergences: bool,
}

/// A fitted model: the inputs it was fitted to plus parameter draws and,
/// for optimizer fits, the mode and curvature.
#[derive(Clone, Debug)]
pub struct FitResult {
    pub method: Method,
    pub data: Dataset,
    pub spec: ModelSpec,
    /// Parameter names aligned with every vector in `mode` and `draws`.
    pub names: Vec<String>,
    pub mode: Option<Vec<f64>>,
    pub log_posterior: Option<f64>,
    /// Row-major covariance of the Gaussian approximation at the mode.
    pub covariance: Option<Vec<Vec<f64>>>,
    /// Parameter draws, chain-major for MCMC fits.
    pub draws: Vec<Vec<f64>>,
    pub n_chains: usize,
    pub diagnostics: Diagnostics,
}

impl FitResult {
    /// Per-parameter reference point: the mode when one exists, otherwise
    /// the componentwise median of the draws.
    pub fn reference_point(&self) -> Vec<f64> {
        if let Some(m) = &self.mode {
            return m.clone();
        }
        let n = self.names.len();
        (0..n)
            .map(|j| {
                let mut xs: Vec<f64> = self.draws.iter().map(|d| d[j]).collect();
                if xs.is_empty() {
                    return f64::NAN;
                }
                sort_f64(&mut xs);
                quantile_sorted(&xs, 0.5)
            })
            .collect()
    }
}

fn maximize_with_restarts<T: LogDensity + ?Sized>(
    target: &T,
    opts: &OptOptions,
    base: &[f64],
) -> Result<lbfgs::OptOutcome> {
    let n = target.dim();
    let mut rng = ChaCha12Rng::seed_from_u64(opts.seed);
    let mut best: Option<lbfgs::OptOutcome> = None;
    let mut first_err: Option<Error> = None;
    for s in 0..opts.restarts.max(1) {
        let x0: Vec<f64> = if s == 0 {
            base.to_vec()
        } else {
            base.iter()
                .map(|b| b + 0.1 * rng.sample::<f64, _>(StandardNormal))
                .collect()
        };
        match lbfgs::maximize(target, &x0, opts.max_iter) {
            Ok(o) => {
                if best.as_ref().is_none_or(|b| o.value > b.value) {
                    best = Some(o);
                }
            }
            Err(e) => {
                if first_err.is_none() {
                    first_err = Some(e);
                }
            }
        }
    }
    let mut out = best.ok_or_else(|| {
        first_err.unwrap_or_else(|| Error::NonConvergence {
            message: "optimizer produced no iterates".into(),
            trace: Vec::new(),
        })
    })?;
    newton_polish(target, &mut out);
    if out.grad_norm > 1e-5 * (1.0 + out.value.abs()) {
        return Err(Error::NonConvergence {
            message: format!(
                "no convergence after quasi-Newton and Newton refinement (gradient norm {:.3e})",
                out.grad_norm
            ),
            trace: out.trace,
        });
    }
    Ok(out)
}

/// Warm start for posteriors with estimated smoothness or spread scales.
/// The joint surface over (coefficients, log scales) has a funnel: descending
/// from a cold start can dive into the low-scale cliff and stall on a ridge
/// whose curvature overwhelms both quasi-Newton and damped Newton steps.
/// Solving first with every estimated scale pinned at its prior mean, then
/// releasing the scales from that iterate, stays out of the funnel.
fn staged_start(
    data: &Dataset,
    spec: &ModelSpec,
    post: &Posterior,
    opts: &OptOptions,
) -> Vec<f64> {
    let names = post.layout().names();
    let cold = || vec![0.0; names.len()];
    let estimated: Vec<&str> = KNOWN_HYPERS
        .iter()
        .copied()
        .filter(|h| names.iter().any(|n| n == &format!("log_{h}")))
        .collect();
    if estimated.is_empty() {
        return cold();
    }

    let mut pinned = spec.clone();
    let mut pins: Vec<(String, f64)> = Vec::new();
    for h in &estimated {
        let setting = match *h {
            "lambda0_cf" => &spec.priors.lambda0_cf,
            "lambda0_inc" => &spec.priors.lambda0_inc,
            "lambda0_rem" => &spec.priors.lambda0_rem,
            "lambda0_male" => &spec.priors.lambda0_male,
            "lambda1" => &spec.priors.lambda1,
            _ => unreachable!("estimated scales come from KNOWN_HYPERS"),
        };
        let value = match setting {
            HyperSetting::Estimated(gp) => gp.shape / gp.rate,
            HyperSetting::Fixed(v) => *v,
        };
        pins.push(((*h).to_string(), value));
        pinned.hp_fixed.push(((*h).to_string(), value));
    }

    let warm = Posterior::new(data, &pinned).ok().and_then(|reduced| {
        let zeros = vec![0.0; reduced.n_params()];
        maximize_with_restarts(&reduced, opts, &zeros)
            .ok()
            .map(|o| (reduced.layout().names().to_vec(), o.x))
    });
    let Some((reduced_names, reduced_x)) = warm else {
        return cold();
    };

    // Map the reduced mode into the full coordinates by name; each released
    // scale starts where it was pinned.
    let index: std::collections::HashMap<&str, usize> = reduced_names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();
    names
        .iter()
        .map(|n| {
            if let Some(h) = n.strip_prefix("log_") {
                if let Some((_, v)) = pins.iter().find(|(p, _)| p == h) {
                    return v.ln();
                }
            }
            index.get(n.as_str()).map_or(0.0, |i| reduced_x[*i])
        })
        .collect()
}

/// Refines an iterate with damped Newton steps using the dense curvature.
/// Quasi-Newton alone crawls near modes with wildly anisotropic curvature
/// (smoothness scales against thousands of binomial counts); a handful of
/// Newton solves lands on the mode to near machine precision, which the
/// permutation-invariance guarantees rely on.
fn newton_polish<T: LogDensity + ?Sized>(target: &T, out: &mut lbfgs::OptOutcome) {
    let n = out.x.len();
    let mut x = out.x.clone();
    let (v0, g0) = target.log_density_grad(&x);
    let mut fval = -v0;
    let mut g: Vec<f64> = g0.iter().map(|gi| -gi).collect();

    for _ in 0..40 {
        let gnorm = lbfgs::norm2(&g);
        if gnorm <= 1e-10 * (1.0 + fval.abs()) {
            break;
        }
        let hess = negative_hessian(target, &x);
        let mut dir: Option<Vec<f64>> = None;
        if hess.iter().all(|h| h.is_finite()) {
            let scale = hess.diagonal().amax().max(1.0);
            let mut shift = 0.0;
            for _ in 0..30 {
                let mut m = hess.clone();
                for i in 0..n {
                    m[(i, i)] += shift;
                }
                if let Some(ch) = m.cholesky() {
                    let d = ch.solve(&DVector::from_iterator(n, g.iter().map(|v| -v)));
                    if d.iter().all(|v| v.is_finite()) {
                        dir = Some(d.iter().copied().collect());
                    }
                    break;
                }
                shift = if shift == 0.0 { 1e-10 * scale } else { shift * 10.0 };
            }
        }
        let mut d = dir.unwrap_or_else(|| g.iter().map(|v| -v / (1.0 + gnorm)).collect());
        if !(lbfgs::dot(&g, &d) < 0.0) {
            d = g.iter().map(|v| -v / (1.0 + gnorm)).collect();
        }

        let mut accepted = false;
        let mut step = 1.0;
        for _ in 0..60 {
            let xn: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + step * di).collect();
            let (vn, gn) = target.log_density_grad(&xn);
            if vn.is_finite() && -vn < fval {
                x = xn;
                fval = -vn;
                g = gn.iter().map(|gi| -gi).collect();
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        out.trace.push((-fval, lbfgs::norm2(&g)));
        if !accepted {
            break;
        }
    }

    let gnorm = lbfgs::norm2(&g);
    if -fval >= out.value || gnorm < out.grad_norm {
        out.x = x;
        out.value = -fval;
        out.grad_norm = gnorm;
        out.converged = gnorm <= 1e-5 * (1.0 + fval.abs());
    }
}

/// Central finite differences of the gradient, symmetrized. Returns the
/// curvature of the negative log density.
fn negative_hessian<T: LogDensity + ?Sized>(target: &T, x: &[f64]) -> DMatrix<f64> {
    let n = x.len();
    let cols: Vec<Vec<f64>> = par::map_indexed(n, |j| {
        let h = 1e-4 * (1.0 + x[j].abs());
        let mut xp = x.to_vec();
        xp[j] += h;
        let mut xm = x.to_vec();
        xm[j] -= h;
        let (_, gp) = target.log_density_grad(&xp);
        let (_, gm) = target.log_density_grad(&xm);
        (0..n).map(|i| -(gp[i] - gm[i]) / (2.0 * h)).collect()
    });
    let mut hess = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in 0..n {
            hess[(i, j)] = cols[j][i];
        }
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (hess[(i, j)] + hess[(j, i)]);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    hess
}

struct Laplace {
    covariance: Vec<Vec<f64>>,
    min_eigenvalue: f64,
    draws: Vec<Vec<f64>>,
}

fn laplace_approximation<T: LogDensity + ?Sized>(
    target: &T,
    mode: &[f64],
    opts: &OptOptions,
) -> Result<Laplace> {
    let n = mode.len();
    let hess = negative_hessian(target, mode);
    let eig = hess.symmetric_eigen();
    let min_eigenvalue = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min_eigenvalue < HESSIAN_EIG_FLOOR {
        return Err(Error::NotPositiveDefinite {
            min_eigenvalue,
            threshold: HESSIAN_EIG_FLOOR,
        });
    }
    let v = &eig.eigenvectors;
    let inv = DVector::from_iterator(n, eig.eigenvalues.iter().map(|l| 1.0 / l));
    let cov = v * DMatrix::from_diagonal(&inv) * v.transpose();
    let covariance = (0..n)
        .map(|i| (0..n).map(|j| cov[(i, j)]).collect())
        .collect();

    // Draw on a stream decoupled from the optimizer jitter so the draws do
    // not shift when the restart count changes.
    let mut rng = ChaCha12Rng::seed_from_u64(opts.seed ^ 0x9E37_79B9_7F4A_7C15);
    let mut draws = Vec::with_capacity(opts.laplace_draws);
    for _ in 0..opts.laplace_draws {
        let z = DVector::from_iterator(
            n,
            (0..n).map(|i| rng.sample::<f64, _>(StandardNormal) / eig.eigenvalues[i].sqrt()),
        );
        let step = v * z;
        draws.push((0..n).map(|i| mode[i] + step[i]).collect());
    }
    Ok(Laplace {
        covariance,
        min_eigenvalue,
        draws,
    })
}

/// Finds the posterior mode and builds a Gaussian approximation around it.
///
/// Fails with a non-convergence error (carrying the iterate trace) when no
/// start reaches the gradient tolerance, and with a curvature error naming
/// the offending eigenvalue when the mode is not an interior maximum.
pub fn fit_mode(data: &Dataset, spec: &ModelSpec, opts: &OptOptions) -> Result<FitResult> {
    let post = Posterior::new(data, spec)?;
    let x0 = staged_start(data, spec, &post, opts);
    let out = maximize_with_restarts(&post, opts, &x0)?;
    let lap = laplace_approximation(&post, &out.x, opts)?;
    Ok(FitResult {
        method: Method::Opt,
        data: data.clone(),
        spec: spec.clone(),
        names: post.layout().names().to_vec(),
        mode: Some(out.x),
        log_posterior: Some(out.value),
        covariance: Some(lap.covariance),
        draws: lap.draws,
        n_chains: 1,
        diagnostics: Diagnostics {
            grad_norm: Some(out.grad_norm),
            iterations: Some(out.iterations),
            hessian_min_eigenvalue: Some(lap.min_eigenvalue),
            ..Diagnostics::default()
        },
    })
}

/// Raw MCMC output for a generic target density.
pub struct McmcRun {
    /// Pooled post-warmup draws, chain-major.
    pub draws: Vec<Vec<f64>>,
    pub n_chains: usize,
    pub diagnostics: Diagnostics,
}

/// Runs independent NUTS chains over any log density and pools the draws.
/// Chain `c` is seeded with `seed + c`, so results are reproducible and
/// independent of how chains are scheduled.
pub fn sample_density<T: LogDensity + ?Sized>(
    target: &T,
    opts: &McmcOptions,
) -> Result<McmcRun> {
    if opts.chains < 2 {
        return Err(Error::InvalidInput(format!(
            "MCMC needs at least 2 chains for convergence diagnostics, got {}",
            opts.chains
        )));
    }
    let cfg = nuts::NutsConfig {
        warmup: opts.warmup,
        samples: opts.samples,
        max_treedepth: opts.max_treedepth,
        target_accept: opts.target_accept,
        init_jitter: 0.1,
    };
    let outputs = par::map_indexed(opts.chains, |c| {
        nuts::run_chain(target, &cfg, opts.seed.wrapping_add(c as u64))
    });

    let n = target.dim();
    let mut r_hat = Vec::with_capacity(n);
    let mut ess = Vec::with_capacity(n);
    for j in 0..n {
        let series: Vec<Vec<f64>> = outputs
            .iter()
            .map(|o| o.draws.iter().map(|d| d[j]).collect())
            .collect();
        r_hat.push(diag::split_rhat(&series));
        ess.push(diag::ess(&series));
    }
    let divergences: usize = outputs.iter().map(|o| o.divergences).sum();
    let total = (opts.chains * opts.samples).max(1);
    let divergence_fraction = divergences as f64 / total as f64;
    let diagnostics = Diagnostics {
        flagged_rhat: r_hat.iter().any(|r| *r > 1.05),
        flagged_divergences: divergence_fraction > 0.10,
        divergences: Some(divergences),
        divergence_fraction: Some(divergence_fraction),
        max_depth_hits: Some(outputs.iter().map(|o| o.max_depth_hits).sum()),
        step_sizes: Some(outputs.iter().map(|o| o.step_size).collect()),
        accept_rates: Some(outputs.iter().map(|o| o.accept_mean).collect()),
        r_hat: Some(r_hat),
        ess: Some(ess),
        ..Diagnostics::default()
    };
    Ok(McmcRun {
        draws: outputs.into_iter().flat_map(|o| o.draws).collect(),
        n_chains: opts.chains,
        diagnostics,
    })
}

/// Samples the posterior with NUTS. Convergence problems are recorded in the
/// diagnostics flags, not turned into errors.
pub fn fit_mcmc(data: &Dataset, spec: &ModelSpec, opts: &McmcOptions) -> Result<FitResult> {
    let post = Posterior::new(data, spec)?;
    let run = sample_density(&post, opts)?;
    Ok(FitResult {
        method: Method::Mcmc,
        data: data.clone(),
        spec: spec.clone(),
        names: post.layout().names().to_vec(),
        mode: None,
        log_posterior: None,
        covariance: None,
        draws: run.draws,
        n_chains: run.n_chains,
        diagnostics: run.diagnostics,
    })
}

/// Derived quantities reported by [`tidy`].
pub const TIDY_VARS: [&str; 6] = ["cf", "inc", "rem", "prev", "mort", "inc_prob"];

/// One summarized quantity at one age in one population.
#[derive(Clone, Debug)]
pub struct TidyRow {
    pub var: String,
    pub age: usize,
    pub area: String,
    pub gender: String,
    /// Mode-derived value for optimizer fits, posterior median for MCMC.
    pub point: f64,
    /// Aligned with the quantile levels passed to [`tidy`].
    pub quantiles: Vec<f64>,
}

/// Summarizes every derived variable at every age. Rows are ordered
/// population-major (areas outer, genders inner), then variable, then age.
pub fn tidy(fit: &FitResult, quantiles: &[f64]) -> Result<Vec<TidyRow>> {
    tidy_filtered(fit, &TIDY_VARS, quantiles)
}

/// [`tidy`] restricted to a subset of variables, in the order given.
pub fn tidy_filtered(fit: &FitResult, vars: &[&str], quantiles: &[f64]) -> Result<Vec<TidyRow>> {
    for v in vars {
        if !TIDY_VARS.contains(v) {
            return Err(Error::InvalidInput(format!(
                "unknown variable `{v}`; known variables: {}",
                TIDY_VARS.join(", ")
            )));
        }
    }
    for q in quantiles {
        if !(*q > 0.0 && *q < 1.0) {
            return Err(Error::InvalidInput(format!(
                "quantile level {q} is outside (0, 1)"
            )));
        }
    }
    let post = Posterior::new(&fit.data, &fit.spec)?;
    let n_ages = fit.data.n_ages();
    let n_draws = fit.draws.len();
    let mut rows = Vec::with_capacity(fit.data.n_populations() * vars.len() * n_ages);

    for pop in 0..fit.data.n_populations() {
        let (ai, gi) = fit.data.population_key(pop);
        let area = &fit.data.areas()[ai];
        let gender = &fit.data.genders()[gi];

        let point_series = match &fit.mode {
            Some(m) => Some(series_at(&post, m, pop, vars)?),
            None => None,
        };
        let per_draw: Vec<Result<Vec<Vec<f64>>>> =
            par::map_indexed(n_draws, |d| series_at(&post, &fit.draws[d], pop, vars));
        // series[var][age] collects the draw values for one cell.
        let mut series = vec![vec![Vec::with_capacity(n_draws); n_ages]; vars.len()];
        for r in per_draw {
            for (vi, ages) in r?.into_iter().enumerate() {
                for (a, val) in ages.into_iter().enumerate() {
                    series[vi][a].push(val);
                }
            }
        }

        for (vi, var) in vars.iter().enumerate() {
            for age in 0..n_ages {
                let vals = &mut series[vi][age];
                sort_f64(vals);
                let qs: Vec<f64> = quantiles
                    .iter()
                    .map(|q| {
                        if vals.is_empty() {
                            f64::NAN
                        } else {
                            quantile_sorted(vals, *q)
                        }
                    })
                    .collect();
                let point = match &point_series {
                    Some(ps) => ps[vi][age],
                    None if vals.is_empty() => f64::NAN,
                    None => quantile_sorted(vals, 0.5),
                };
                rows.push(TidyRow {
                    var: (*var).to_string(),
                    age,
                    area: area.clone(),
                    gender: gender.clone(),
                    point,
                    quantiles: qs,
                });
            }
        }
    }
    Ok(rows)
}

fn series_at(
    post: &Posterior,
    x: &[f64],
    pop: usize,
    vars: &[&str],
) -> Result<Vec<Vec<f64>>> {
    let curves = post.population_curves(x, pop);
    let probs = post.probs_from_curves(&curves)?;
    Ok(vars
        .iter()
        .map(|v| match *v {
            "cf" => curves.cf.clone(),
            "inc" => curves.inc.clone(),
            "rem" => curves.rem.clone(),
            "prev" => probs.prev.clone(),
            "mort" => probs.mort.clone(),
            "inc_prob" => probs.inc_prob.clone(),
            _ => unreachable!("variables validated by the caller"),
        })
        .collect())
}

/// Returns a copy of `spec` with the named hyperparameters pinned at their
/// fitted values, removing them from the parameter vector of later fits.
pub fn fix_hyperparameters(
    spec: &ModelSpec,
    fit: &FitResult,
    names: &[&str],
) -> Result<ModelSpec> {
    let post = Posterior::new(&fit.data, &fit.spec)?;
    let reference = fit.reference_point();
    let mut out = spec.clone();
    for name in names {
        if !KNOWN_HYPERS.contains(name) {
            return Err(Error::UnknownHyperparameter {
                name: (*name).to_string(),
                known: KNOWN_HYPERS.iter().map(|s| s.to_string()).collect(),
            });
        }
        let value = post
            .layout()
            .hyper_value(name, &reference)
            .ok_or_else(|| {
                Error::InvalidInput(format!("hyperparameter {name} has no value in this model"))
            })?;
        out.hp_fixed.push(((*name).to_string(), value));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{const_spec, curved_dataset, empty_dataset, synthetic_dataset};

    #[test]
    fn prior_only_fit_lands_on_prior_means() {
        // With no observed counts the posterior is the prior, whose mode is
        // the zero vector for these Gaussian blocks.
        let data = empty_dataset(6);
        let fit = fit_mode(&data, &const_spec(), &OptOptions::default()).unwrap();
        let mode = fit.mode.as_ref().unwrap();
        assert_eq!(fit.names, ["cf_lograte", "inc_lograte"]);
        for m in mode {
            assert!(m.abs() < 1e-6, "mode {m} not at the prior mean");
        }
        // Curvature of a N(0, 100) prior is 1e-4, so the Laplace variance
        // must come back as the prior variance.
        let cov = fit.covariance.as_ref().unwrap();
        assert!((cov[0][0] - 1e4).abs() / 1e4 < 1e-2, "var {}", cov[0][0]);
        assert!((cov[1][1] - 1e4).abs() / 1e4 < 1e-2);
        assert!(cov[0][1].abs() < 1.0);
    }

    #[test]
    fn mode_fit_is_deterministic() {
        let data = synthetic_dataset(8, 0.02, 0.1, 5e4);
        let opts = OptOptions {
            laplace_draws: 50,
            ..OptOptions::default()
        };
        let a = fit_mode(&data, &const_spec(), &opts).unwrap();
        let b = fit_mode(&data, &const_spec(), &opts).unwrap();
        assert_eq!(a.mode, b.mode);
        assert_eq!(a.draws, b.draws);
        assert_eq!(
            a.diagnostics.hessian_min_eigenvalue,
            b.diagnostics.hessian_min_eigenvalue
        );
    }

    #[test]
    fn mode_recovers_constant_truth() {
        let data = synthetic_dataset(10, 0.02, 0.1, 1e6);
        let fit = fit_mode(&data, &const_spec(), &OptOptions::default()).unwrap();
        let mode = fit.mode.as_ref().unwrap();
        let cf = mode[0].exp();
        let inc = mode[1].exp();
        assert!((cf - 0.1).abs() / 0.1 < 0.02, "cf {cf}");
        assert!((inc - 0.02).abs() / 0.02 < 0.02, "inc {inc}");
        assert!(fit.diagnostics.grad_norm.unwrap() < 1e-4);
    }

    #[test]
    fn mcmc_requires_two_chains() {
        let data = synthetic_dataset(6, 0.02, 0.1, 1e4);
        let opts = McmcOptions {
            chains: 1,
            ..McmcOptions::default()
        };
        match fit_mcmc(&data, &const_spec(), &opts) {
            Err(Error::InvalidInput(msg)) => assert!(msg.contains("chains")),
            other => panic!("expected invalid-input error, got {other:?}"),
        }
    }

    #[test]
    fn mcmc_smoke_mixes_on_small_model() {
        let data = synthetic_dataset(8, 0.02, 0.1, 1e4);
        let opts = McmcOptions {
            chains: 2,
            warmup: 300,
            samples: 300,
            seed: 5,
            ..McmcOptions::default()
        };
        let fit = fit_mcmc(&data, &const_spec(), &opts).unwrap();
        assert_eq!(fit.draws.len(), 600);
        assert_eq!(fit.n_chains, 2);
        let d = &fit.diagnostics;
        assert!(!d.flagged_divergences, "{:?}", d.divergence_fraction);
        for r in d.r_hat.as_ref().unwrap() {
            assert!(*r < 1.05, "r_hat {r}");
        }
        for e in d.ess.as_ref().unwrap() {
            assert!(*e > 50.0, "ess {e}");
        }
    }

    /// Posterior of a binomial count under a conjugate beta prior, sampled
    /// on the log-odds scale (the prior-times-Jacobian exponents fold into
    /// plain beta exponents).
    struct LogitBeta {
        a: f64,
        b: f64,
    }

    impl LogDensity for LogitBeta {
        fn dim(&self) -> usize {
            1
        }
        fn log_density(&self, x: &[f64]) -> f64 {
            let pi = 1.0 / (1.0 + (-x[0]).exp());
            self.a * pi.ln() + self.b * (1.0 - pi).ln()
        }
        fn log_density_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
            let pi = 1.0 / (1.0 + (-x[0]).exp());
            (self.log_density(x), vec![self.a - (self.a + self.b) * pi])
        }
    }

    #[test]
    fn conjugate_target_matches_known_posterior() {
        // 30 events in 100 trials under a Jeffreys prior: the probability
        // has an exact Beta(30.5, 70.5) posterior.
        let target = LogitBeta { a: 30.5, b: 70.5 };
        let opts = McmcOptions {
            chains: 4,
            warmup: 500,
            samples: 1000,
            seed: 11,
            ..McmcOptions::default()
        };
        let run = sample_density(&target, &opts).unwrap();
        let probs: Vec<f64> = run
            .draws
            .iter()
            .map(|d| 1.0 / (1.0 + (-d[0]).exp()))
            .collect();
        let mean = probs.iter().sum::<f64>() / probs.len() as f64;
        let exact_mean = 30.5 / 101.0;
        let exact_sd = (30.5 * 70.5 / (101.0_f64.powi(2) * 102.0)).sqrt();
        let ess = run.diagnostics.ess.as_ref().unwrap()[0];
        let se = exact_sd / ess.sqrt();
        assert!(
            (mean - exact_mean).abs() < 4.0 * se,
            "mean {mean} vs {exact_mean}, se {se}"
        );
        assert!(run.diagnostics.r_hat.as_ref().unwrap()[0] < 1.02);
    }

    #[test]
    fn tidy_reports_every_variable_at_every_age() {
        let data = synthetic_dataset(8, 0.02, 0.1, 1e4);
        let fit = fit_mode(
            &data,
            &const_spec(),
            &OptOptions {
                laplace_draws: 200,
                ..OptOptions::default()
            },
        )
        .unwrap();
        let rows = tidy(&fit, &[0.05, 0.5, 0.95]).unwrap();
        assert_eq!(rows.len(), 6 * 8);
        for row in &rows {
            assert_eq!(row.quantiles.len(), 3);
            assert!(row.quantiles[0] <= row.quantiles[2]);
            if row.var == "rem" {
                // No remission model, so the derived remission rate is zero.
                assert_eq!(row.point, 0.0);
            } else {
                assert!(row.point.is_finite());
                // The point estimate comes from the mode; the draws scatter
                // around it.
                assert!(row.quantiles[0] <= row.point + 1e-9);
                assert!(row.point - 1e-9 <= row.quantiles[2]);
            }
        }
        let median_only = tidy(&fit, &[0.5]).unwrap();
        assert!(median_only.iter().all(|r| r.quantiles.len() == 1));
    }

    #[test]
    fn tidy_rejects_unknown_variables_and_levels() {
        let data = synthetic_dataset(8, 0.02, 0.1, 1e4);
        let fit = fit_mode(
            &data,
            &const_spec(),
            &OptOptions {
                laplace_draws: 10,
                ..OptOptions::default()
            },
        )
        .unwrap();
        match tidy_filtered(&fit, &["cf", "hazard"], &[0.5]) {
            Err(Error::InvalidInput(msg)) => assert!(msg.contains("hazard")),
            other => panic!("expected invalid-input error, got {other:?}"),
        }
        assert!(tidy(&fit, &[0.0]).is_err());
        assert!(tidy(&fit, &[1.0]).is_err());
    }

    #[test]
    fn fix_hyperparameters_rejects_unknown_names() {
        let data = synthetic_dataset(8, 0.02, 0.1, 1e4);
        let fit = fit_mode(
            &data,
            &const_spec(),
            &OptOptions {
                laplace_draws: 10,
                ..OptOptions::default()
            },
        )
        .unwrap();
        match fix_hyperparameters(&fit.spec, &fit, &["lambda9"]) {
            Err(Error::UnknownHyperparameter { name, known }) => {
                assert_eq!(name, "lambda9");
                assert!(known.contains(&"lambda1".to_string()));
            }
            other => panic!("expected unknown-hyperparameter error, got {other:?}"),
        }
    }

    #[test]
    fn pinning_hyperparameters_at_the_mode_preserves_it() {
        // Curved truth keeps the smoothing scales identified, so the joint
        // mode over coefficients and scales is interior.
        let data = curved_dataset(
            12,
            1e5,
            |t| (-3.5 + 0.3 * t + 0.4 * t * t).exp(),
            |t| (-2.0 + 0.6 * t + 0.5 * t * t).exp(),
        );
        let spec = ModelSpec {
            k: 4,
            ..ModelSpec::default()
        };
        let opts = OptOptions {
            laplace_draws: 10,
            ..OptOptions::default()
        };
        let full = fit_mode(&data, &spec, &opts).unwrap();
        assert!(full.names.iter().any(|n| n == "log_lambda0_cf"));

        let pinned_spec =
            fix_hyperparameters(&spec, &full, &["lambda0_cf", "lambda0_inc"]).unwrap();
        let pinned = fit_mode(&data, &pinned_spec, &opts).unwrap();
        assert!(pinned.names.iter().all(|n| !n.starts_with("log_lambda0")));

        // Fixing the scales at their joint-mode values must not move the
        // remaining coordinates of the mode.
        let full_mode = full.mode.as_ref().unwrap();
        let pinned_mode = pinned.mode.as_ref().unwrap();
        for (j, name) in pinned.names.iter().enumerate() {
            let i = full.names.iter().position(|n| n == name).unwrap();
            assert!(
                (pinned_mode[j] - full_mode[i]).abs() < 1e-4,
                "{name}: {} vs {}",
                pinned_mode[j],
                full_mode[i]
            );
        }
    }
}
