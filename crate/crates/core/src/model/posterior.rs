//! Parameter layout and the log posterior with its analytic gradient.
//!
//! The likelihood factorizes over populations. For each population the
//! forward pass evaluates rate curves, per-age transition matrices, and the
//! occupancy recursion; the backward pass runs the adjoint of that recursion
//! and chains through the curve families, so a gradient costs a small
//! constant times one evaluation regardless of the parameter count.

use std::ops::Range;

use crate::error::Result;
use crate::markov::{
    self, effective_rates, step_state, transition_matrix, transition_matrix_with_partials,
    Matrix3, RateTriple, StateVec, TrendMatrix,
};
use crate::model::{Dataset, GammaPrior, HyperSetting, ModelSpec, Outcome};
use crate::par;
use crate::special::{ln_choose, ln_gamma};
use crate::spline::{backprop_rates, eval_rates, CurveFamily, SplineBasis};

/// Model probabilities are clamped to this range before entering log
/// densities, so structurally impossible observations (for example nonzero
/// prevalence at age zero) yield a finite, extremely unlikely density rather
/// than an infinite one.
pub const PROB_CLAMP: (f64, f64) = (1e-12, 1.0 - 1e-12);

const LN_2PI: f64 = 1.8378770664093453;

/// Per-age rates for one population.
#[derive(Clone, Debug)]
pub struct PopulationCurves {
    pub cf: Vec<f64>,
    pub inc: Vec<f64>,
    pub rem: Vec<f64>,
}

/// Per-age observable probabilities for one population.
#[derive(Clone, Debug)]
pub struct PopulationProbs {
    pub inc_prob: Vec<f64>,
    pub prev: Vec<f64>,
    pub mort: Vec<f64>,
    pub rem_prob: Vec<f64>,
}

/// Identifies one observation in the fixed crate-wide order: populations in
/// index order, outcomes in [`Outcome::ALL`] order, ages ascending.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ObsKey {
    pub outcome: Outcome,
    pub age: usize,
    pub area: usize,
    pub gender: usize,
}

#[derive(Clone, Copy, Debug, Default)]
struct FixedHypers {
    lambda0_cf: Option<f64>,
    lambda0_inc: Option<f64>,
    lambda0_rem: Option<f64>,
    lambda0_male: Option<f64>,
    lambda1: Option<f64>,
}

/// Where each block of the flat unconstrained parameter vector lives.
/// Empty ranges mark absent blocks.
#[derive(Clone, Debug)]
pub struct ParamLayout {
    k: usize,
    n_ages: usize,
    n_areas: usize,
    n_genders: usize,
    hierarchical: bool,
    gender_additive: bool,
    cf_family: CurveFamily,
    inc_family: CurveFamily,
    rem_family: Option<CurveFamily>,
    /// Non-hierarchical case-fatality curve parameters.
    cf: Range<usize>,
    hier_b1: usize,
    hier_b2: usize,
    hier_z: Range<usize>,
    /// Area-major chunks of k-2 nonlinear coefficients.
    hier_nonlin: Range<usize>,
    hier_male: Range<usize>,
    /// Incidence curve parameters, one block per population.
    inc: Vec<Range<usize>>,
    rem: Range<usize>,
    log_lambda0_cf: Option<usize>,
    log_lambda0_inc: Option<usize>,
    log_lambda0_rem: Option<usize>,
    log_lambda0_male: Option<usize>,
    log_lambda1: Option<usize>,
    fixed: FixedHypers,
    names: Vec<String>,
    n_params: usize,
}

fn needs_shrinkage(family: CurveFamily, k: usize) -> bool {
    matches!(family, CurveFamily::Smooth | CurveFamily::Increasing) && k > 2
}

impl ParamLayout {
    fn build(data: &Dataset, spec: &ModelSpec) -> Result<Self> {
        let k = spec.k;
        let n_ages = data.n_ages();
        let n_areas = data.areas().len();
        let n_genders = data.genders().len();
        let n_pops = data.n_populations();

        let resolve = |setting: &HyperSetting, name: &str| -> Option<f64> {
            spec.hp_fixed_value(name).or(setting.fixed_value())
        };
        let mut fixed = FixedHypers {
            lambda0_cf: resolve(&spec.priors.lambda0_cf, "lambda0_cf"),
            lambda0_inc: resolve(&spec.priors.lambda0_inc, "lambda0_inc"),
            lambda0_rem: resolve(&spec.priors.lambda0_rem, "lambda0_rem"),
            lambda0_male: resolve(&spec.priors.lambda0_male, "lambda0_male"),
            lambda1: resolve(&spec.priors.lambda1, "lambda1"),
        };
        // Scales that no parameter uses are pinned to keep the layout honest.
        if !needs_shrinkage(spec.cf.family, k) {
            fixed.lambda0_cf = Some(fixed.lambda0_cf.unwrap_or(1.0));
        }
        if !needs_shrinkage(spec.inc.family, k) {
            fixed.lambda0_inc = Some(fixed.lambda0_inc.unwrap_or(1.0));
        }
        if !spec.rem.is_some_and(|rm| needs_shrinkage(rm.family, k)) {
            fixed.lambda0_rem = Some(fixed.lambda0_rem.unwrap_or(1.0));
        }
        if !spec.gender_additive || !needs_shrinkage(CurveFamily::Smooth, k) {
            fixed.lambda0_male = Some(fixed.lambda0_male.unwrap_or(1.0));
        }
        if !spec.hierarchical {
            fixed.lambda1 = Some(fixed.lambda1.unwrap_or(1.0));
        }

        let mut names = Vec::new();
        let mut cursor = 0usize;
        let mut range = |len: usize, f: &mut dyn FnMut(usize) -> String| -> Range<usize> {
            let start = cursor;
            for j in 0..len {
                names.push(f(j));
            }
            cursor += len;
            start..cursor
        };

        let pop_suffix = |pop: usize| -> String {
            if n_pops == 1 {
                String::new()
            } else {
                let (a, g) = (pop / n_genders, pop % n_genders);
                if n_genders == 1 {
                    format!("[{}]", data.areas()[a])
                } else {
                    format!("[{}/{}]", data.areas()[a], data.genders()[g])
                }
            }
        };

        let mut cf = 0..0;
        let mut hier_b1 = usize::MAX;
        let mut hier_b2 = usize::MAX;
        let mut hier_z = 0..0;
        let mut hier_nonlin = 0..0;
        let mut hier_male = 0..0;
        if spec.hierarchical {
            hier_b1 = range(1, &mut |_| "cf_b1".into()).start;
            hier_b2 = range(1, &mut |_| "cf_b2".into()).start;
            hier_z = range(n_areas, &mut |j| format!("cf_z[{}]", data.areas()[j]));
            hier_nonlin = range(n_areas * (k - 2), &mut |j| {
                let (area, kk) = (j / (k - 2), j % (k - 2) + 3);
                format!("cf_beta[{kk}][{}]", data.areas()[area])
            });
            if spec.gender_additive {
                hier_male = range(k, &mut |j| format!("cf_male[{}]", j + 1));
            }
        } else {
            cf = match spec.cf.family {
                CurveFamily::Smooth => range(k, &mut |j| format!("cf_beta[{}]", j + 1)),
                CurveFamily::Increasing => range(1 + k, &mut |j| {
                    if j == 0 {
                        "cf_base".into()
                    } else {
                        format!("cf_beta[{j}]")
                    }
                }),
                CurveFamily::Const => range(1, &mut |_| "cf_lograte".into()),
                CurveFamily::Indep => range(n_ages, &mut |j| format!("cf_lograte[{j}]")),
            };
        }

        let mut inc = Vec::with_capacity(n_pops);
        for pop in 0..n_pops {
            let suffix = pop_suffix(pop);
            let block = match spec.inc.family {
                CurveFamily::Smooth => {
                    range(k, &mut |j| format!("inc_beta[{}]{suffix}", j + 1))
                }
                CurveFamily::Increasing => range(1 + k, &mut |j| {
                    if j == 0 {
                        format!("inc_base{suffix}")
                    } else {
                        format!("inc_beta[{j}]{suffix}")
                    }
                }),
                CurveFamily::Const => range(1, &mut |_| format!("inc_lograte{suffix}")),
                CurveFamily::Indep => range(n_ages, &mut |j| format!("inc_lograte[{j}]{suffix}")),
            };
            inc.push(block);
            if !spec.hierarchical {
                break;
            }
        }

        let rem = match spec.rem {
            None => 0..0,
            Some(rm) => match rm.family {
                CurveFamily::Smooth => range(k, &mut |j| format!("rem_beta[{}]", j + 1)),
                CurveFamily::Increasing => range(1 + k, &mut |j| {
                    if j == 0 {
                        "rem_base".into()
                    } else {
                        format!("rem_beta[{j}]")
                    }
                }),
                CurveFamily::Const => range(1, &mut |_| "rem_lograte".into()),
                CurveFamily::Indep => range(n_ages, &mut |j| format!("rem_lograte[{j}]")),
            },
        };

        let mut hyper = |fixed: Option<f64>, name: &str| -> Option<usize> {
            if fixed.is_some() {
                None
            } else {
                Some(range(1, &mut |_| format!("log_{name}")).start)
            }
        };
        let log_lambda0_cf = hyper(fixed.lambda0_cf, "lambda0_cf");
        let log_lambda0_inc = hyper(fixed.lambda0_inc, "lambda0_inc");
        let log_lambda0_rem = hyper(fixed.lambda0_rem, "lambda0_rem");
        let log_lambda0_male = hyper(fixed.lambda0_male, "lambda0_male");
        let log_lambda1 = hyper(fixed.lambda1, "lambda1");

        Ok(ParamLayout {
            k,
            n_ages,
            n_areas,
            n_genders,
            hierarchical: spec.hierarchical,
            gender_additive: spec.gender_additive,
            cf_family: spec.cf.family,
            inc_family: spec.inc.family,
            rem_family: spec.rem.map(|rm| rm.family),
            cf,
            hier_b1,
            hier_b2,
            hier_z,
            hier_nonlin,
            hier_male,
            inc,
            rem,
            log_lambda0_cf,
            log_lambda0_inc,
            log_lambda0_rem,
            log_lambda0_male,
            log_lambda1,
            fixed,
            names,
            n_params: cursor,
        })
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    /// Stable diagnostic names, one per flat parameter.
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name_of(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    /// Natural-scale value of a named hyperparameter at `x`, whether
    /// estimated or fixed.
    pub fn hyper_value(&self, name: &str, x: &[f64]) -> Option<f64> {
        let (idx, fixed) = match name {
            "lambda0_cf" => (self.log_lambda0_cf, self.fixed.lambda0_cf),
            "lambda0_inc" => (self.log_lambda0_inc, self.fixed.lambda0_inc),
            "lambda0_rem" => (self.log_lambda0_rem, self.fixed.lambda0_rem),
            "lambda0_male" => (self.log_lambda0_male, self.fixed.lambda0_male),
            "lambda1" => (self.log_lambda1, self.fixed.lambda1),
            _ => return None,
        };
        idx.map(|i| x[i].exp()).or(fixed)
    }

    fn lambda0(&self, which: Outcome, x: &[f64]) -> f64 {
        match which {
            Outcome::Mortality => unreachable!("mortality has no curve"),
            Outcome::Incidence => self
                .log_lambda0_inc
                .map(|i| x[i].exp())
                .or(self.fixed.lambda0_inc)
                .unwrap(),
            Outcome::Prevalence => self
                .log_lambda0_cf
                .map(|i| x[i].exp())
                .or(self.fixed.lambda0_cf)
                .unwrap(),
            Outcome::Remission => self
                .log_lambda0_rem
                .map(|i| x[i].exp())
                .or(self.fixed.lambda0_rem)
                .unwrap(),
        }
    }

    fn lambda1(&self, x: &[f64]) -> f64 {
        self.log_lambda1
            .map(|i| x[i].exp())
            .or(self.fixed.lambda1)
            .unwrap()
    }

    fn lambda0_male(&self, x: &[f64]) -> f64 {
        self.log_lambda0_male
            .map(|i| x[i].exp())
            .or(self.fixed.lambda0_male)
            .unwrap()
    }

    fn nonlin_block(&self, area: usize) -> Range<usize> {
        let w = self.k - 2;
        let start = self.hier_nonlin.start + area * w;
        start..start + w
    }
}

/// The log posterior of a model spec applied to a dataset.
pub struct Posterior<'a> {
    data: &'a Dataset,
    spec: &'a ModelSpec,
    basis: SplineBasis,
    layout: ParamLayout,
}

impl<'a> Posterior<'a> {
    pub fn new(data: &'a Dataset, spec: &'a ModelSpec) -> Result<Self> {
        spec.validate(data)?;
        let basis = SplineBasis::new(data.n_ages(), spec.k)?;
        let layout = ParamLayout::build(data, spec)?;
        Ok(Posterior {
            data,
            spec,
            basis,
            layout,
        })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn data(&self) -> &Dataset {
        self.data
    }

    pub fn spec(&self) -> &ModelSpec {
        self.spec
    }

    pub fn n_params(&self) -> usize {
        self.layout.n_params
    }

    /// Case-fatality curve parameters for one population, assembled from the
    /// hierarchical blocks when applicable.
    fn cf_params(&self, x: &[f64], pop: usize) -> Vec<f64> {
        let l = &self.layout;
        if !l.hierarchical {
            return x[l.cf.clone()].to_vec();
        }
        let (area, gender) = self.data.population_key(pop);
        let lambda1 = l.lambda1(x);
        let mut coefs = vec![0.0; l.k];
        coefs[0] = x[l.hier_b1] + lambda1 * x[l.hier_z.clone()][area];
        coefs[1] = x[l.hier_b2];
        coefs[2..].copy_from_slice(&x[l.nonlin_block(area)]);
        if l.gender_additive && gender == 1 {
            for (c, m) in coefs.iter_mut().zip(&x[l.hier_male.clone()]) {
                *c += m;
            }
        }
        coefs
    }

    fn inc_params<'x>(&self, x: &'x [f64], pop: usize) -> &'x [f64] {
        let l = &self.layout;
        let block = if l.hierarchical {
            l.inc[pop].clone()
        } else {
            l.inc[0].clone()
        };
        &x[block]
    }

    /// Per-age rate curves for one population.
    pub fn population_curves(&self, x: &[f64], pop: usize) -> PopulationCurves {
        let l = &self.layout;
        let n_ages = l.n_ages;
        let mut cf = vec![0.0; n_ages];
        let mut inc = vec![0.0; n_ages];
        let mut rem = vec![0.0; n_ages];
        let cf_params = self.cf_params(x, pop);
        eval_rates(l.cf_family, &self.basis, self.spec.cf.eqage, &cf_params, &mut cf);
        eval_rates(
            l.inc_family,
            &self.basis,
            self.spec.inc.eqage,
            self.inc_params(x, pop),
            &mut inc,
        );
        if let (Some(family), Some(rm)) = (l.rem_family, self.spec.rem) {
            eval_rates(family, &self.basis, rm.eqage, &x[l.rem.clone()], &mut rem);
        }
        PopulationCurves { cf, inc, rem }
    }

    fn occupancy(&self, rates: &[RateTriple]) -> Result<Vec<StateVec>> {
        match &self.spec.trends {
            None => Ok(markov::occupancy_path(rates, self.spec.s0)),
            Some(trends) => markov::occupancy_lexis(rates, &trends.inc, &trends.cf, self.spec.s0),
        }
    }

    /// Per-age observable probabilities for one population. Where the cohort
    /// has numerically underflowed to extinction, prevalence carries the last
    /// finite value forward rather than going undefined.
    pub fn population_probs(&self, x: &[f64], pop: usize) -> Result<PopulationProbs> {
        let curves = self.population_curves(x, pop);
        self.probs_from_curves(&curves)
    }

    /// Observable probabilities implied by already-evaluated rate curves.
    pub fn probs_from_curves(&self, curves: &PopulationCurves) -> Result<PopulationProbs> {
        let rates = curve_rates(curves);
        let occ = self.occupancy(&rates)?;
        Ok(probs_for_rates(&rates, &occ))
    }

    pub fn log_likelihood(&self, x: &[f64]) -> f64 {
        par::sum_indexed(self.data.n_populations(), |pop| {
            self.population_loglik(x, pop, None)
        })
    }

    pub fn log_posterior(&self, x: &[f64]) -> f64 {
        let ll = self.log_likelihood(x);
        if !ll.is_finite() {
            return f64::NEG_INFINITY;
        }
        let lp = ll + self.log_prior_value_grad(x, None);
        if lp.is_nan() {
            f64::NEG_INFINITY
        } else {
            lp
        }
    }

    pub fn log_prior(&self, x: &[f64]) -> f64 {
        self.log_prior_value_grad(x, None)
    }

    /// Log posterior and its gradient. At invalid parameter regions the
    /// value is `-inf` and the gradient is zeros.
    pub fn log_posterior_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let n = self.layout.n_params;
        let per_pop: Vec<(f64, Vec<f64>)> = par::map_indexed(self.data.n_populations(), |pop| {
            let mut grad = vec![0.0; n];
            let ll = self.population_loglik(x, pop, Some(&mut grad));
            (ll, grad)
        });
        let mut total = 0.0;
        let mut grad = vec![0.0; n];
        for (ll, g) in per_pop {
            total += ll;
            for (acc, gi) in grad.iter_mut().zip(g) {
                *acc += gi;
            }
        }
        if !total.is_finite() {
            return (f64::NEG_INFINITY, vec![0.0; n]);
        }
        total += self.log_prior_value_grad(x, Some(&mut grad));
        if !total.is_finite() {
            return (f64::NEG_INFINITY, vec![0.0; n]);
        }
        (total, grad)
    }

    /// Log likelihood for one population, optionally accumulating its
    /// gradient contribution.
    fn population_loglik(&self, x: &[f64], pop: usize, grad: Option<&mut [f64]>) -> f64 {
        let l = &self.layout;
        let n_ages = l.n_ages;
        let counts = self.data.counts_by_index(pop);
        let curves = self.population_curves(x, pop);
        let rates = curve_rates(&curves);
        let want_grad = grad.is_some();

        let mut mats: Vec<Matrix3> = Vec::with_capacity(n_ages);
        let mut parts: Vec<[Matrix3; 3]> = Vec::with_capacity(if want_grad { n_ages } else { 0 });
        for &r in &rates {
            if want_grad {
                let (p, dp) = transition_matrix_with_partials(r);
                mats.push(p);
                parts.push(dp);
            } else {
                mats.push(transition_matrix(r));
            }
        }

        let occ = match self.occupancy(&rates) {
            Ok(occ) => occ,
            Err(_) => return f64::NEG_INFINITY,
        };

        // Forward: per-age probabilities and likelihood terms.
        let (lo, hi) = PROB_CLAMP;
        let mut loglik = 0.0;
        // d(loglik)/d(raw probability), zero where the clamp is active.
        let mut pbar = vec![[0.0f64; 4]; n_ages]; // [mort, inc, prev, rem]
        let mut prev = vec![0.0f64; n_ages];
        for a in 0..n_ages {
            let alive = occ[a][0] + occ[a][1];
            let pi = if alive > 0.0 { occ[a][1] / alive } else { f64::NAN };
            prev[a] = pi;
            for (oi, outcome) in Outcome::ALL.iter().enumerate() {
                let Some(col) = counts.outcome(*outcome) else {
                    continue;
                };
                let c = col[a];
                if !c.is_observed() {
                    continue;
                }
                let raw = match outcome {
                    Outcome::Mortality => markov::mortality_prob(&mats[a], pi),
                    Outcome::Incidence => markov::incidence_prob(&mats[a]),
                    Outcome::Prevalence => pi,
                    Outcome::Remission => markov::remission_prob(&mats[a]),
                };
                if raw.is_nan() {
                    return f64::NEG_INFINITY;
                }
                let p = raw.clamp(lo, hi);
                loglik += c.y * p.ln() + (c.n - c.y) * (1.0 - p).ln() + ln_choose(c.n, c.y);
                if want_grad && raw > lo && raw < hi {
                    pbar[a][oi] = c.y / p - (c.n - c.y) / (1.0 - p);
                }
            }
        }
        if !loglik.is_finite() {
            return f64::NEG_INFINITY;
        }
        let Some(grad) = grad else {
            return loglik;
        };

        // Backward: adjoints of matrices, occupancies, then rates.
        let mut mat_bar = vec![[[0.0f64; 3]; 3]; n_ages];
        let mut occ_bar = vec![[0.0f64; 3]; n_ages];
        for a in 0..n_ages {
            let [mort_bar, inc_bar, prev_bar, rem_bar] = pbar[a];
            let pi = prev[a];
            let mut pi_bar = prev_bar;
            if mort_bar != 0.0 {
                pi_bar += mort_bar * (mats[a][1][2] - mats[a][0][2]);
                mat_bar[a][1][2] += mort_bar * pi;
                mat_bar[a][0][2] += mort_bar * (1.0 - pi);
            }
            if inc_bar != 0.0 {
                mat_bar[a][0][0] -= inc_bar;
            }
            if rem_bar != 0.0 {
                mat_bar[a][1][0] += rem_bar;
            }
            if pi_bar != 0.0 {
                let alive = occ[a][0] + occ[a][1];
                // pi = s1/(s0+s1): d/ds0 = -s1/alive^2, d/ds1 = s0/alive^2.
                let inv2 = 1.0 / (alive * alive);
                occ_bar[a][0] -= pi_bar * occ[a][1] * inv2;
                occ_bar[a][1] += pi_bar * occ[a][0] * inv2;
            }
        }

        let mut rate_bar = vec![[0.0f64; 3]; n_ages]; // d/d(i, f, r) per age
        match &self.spec.trends {
            None => {
                // S_{a+1} = S_a P_a: run the adjoint recursion downward,
                // accumulating both the state and matrix cotangents.
                for a in (0..n_ages - 1).rev() {
                    let sb = occ_bar[a + 1];
                    let s = occ[a];
                    let p = &mats[a];
                    for j in 0..3 {
                        occ_bar[a][j] += p[j][0] * sb[0] + p[j][1] * sb[1] + p[j][2] * sb[2];
                        for kk in 0..3 {
                            mat_bar[a][j][kk] += s[j] * sb[kk];
                        }
                    }
                }
                for a in 0..n_ages {
                    for which in 0..3 {
                        let dp = &parts[a][which];
                        let mut acc = 0.0;
                        for j in 0..3 {
                            for kk in 0..3 {
                                acc += mat_bar[a][j][kk] * dp[j][kk];
                            }
                        }
                        rate_bar[a][which] += acc;
                    }
                }
            }
            Some(trends) => {
                // Direct (data-year) matrix contributions.
                for a in 0..n_ages {
                    for which in 0..3 {
                        let dp = &parts[a][which];
                        let mut acc = 0.0;
                        for j in 0..3 {
                            for kk in 0..3 {
                                acc += mat_bar[a][j][kk] * dp[j][kk];
                            }
                        }
                        rate_bar[a][which] += acc;
                    }
                }
                // Each age's occupancy came down its own birth-cohort
                // diagonal; replay it forward, then run the adjoint back.
                let data_year = TrendMatrix::N_YEARS - 1;
                let mut diag_s: Vec<StateVec> = Vec::new();
                let mut diag_p: Vec<Matrix3> = Vec::new();
                let mut diag_dp: Vec<[Matrix3; 3]> = Vec::new();
                for a in 0..n_ages {
                    if occ_bar[a] == [0.0; 3] {
                        continue;
                    }
                    diag_s.clear();
                    diag_p.clear();
                    diag_dp.clear();
                    let mut s = self.spec.s0;
                    for b in 0..a {
                        let eff = effective_rates(&rates, &trends.inc, &trends.cf, b, data_year - a + b);
                        let (p, dp) = transition_matrix_with_partials(eff);
                        diag_s.push(s);
                        s = step_state(s, &p);
                        diag_p.push(p);
                        diag_dp.push(dp);
                    }
                    let mut sb = occ_bar[a];
                    for b in (0..a).rev() {
                        let year = data_year - a + b;
                        let s = diag_s[b];
                        let p = &diag_p[b];
                        let dp = &diag_dp[b];
                        let mut pb = [[0.0f64; 3]; 3];
                        let mut sb_prev = [0.0f64; 3];
                        for j in 0..3 {
                            sb_prev[j] = p[j][0] * sb[0] + p[j][1] * sb[1] + p[j][2] * sb[2];
                            for kk in 0..3 {
                                pb[j][kk] = s[j] * sb[kk];
                            }
                        }
                        // Chain through the trend multipliers to data-year rates.
                        let ratios = [
                            trends.inc.ratio(b, year),
                            trends.cf.ratio(b, year),
                            1.0,
                        ];
                        for which in 0..3 {
                            let mut acc = 0.0;
                            for j in 0..3 {
                                for kk in 0..3 {
                                    acc += pb[j][kk] * dp[which][j][kk];
                                }
                            }
                            rate_bar[b][which] += acc * ratios[which];
                        }
                        sb = sb_prev;
                    }
                }
            }
        }

        // Chain rate cotangents through the curve families into parameters.
        let inc_bar: Vec<f64> = rate_bar.iter().map(|r| r[0]).collect();
        let cf_bar: Vec<f64> = rate_bar.iter().map(|r| r[1]).collect();
        let rem_bar: Vec<f64> = rate_bar.iter().map(|r| r[2]).collect();

        let cf_params = self.cf_params(x, pop);
        let mut cf_param_bar = vec![0.0; cf_params.len()];
        backprop_rates(
            l.cf_family,
            &self.basis,
            self.spec.cf.eqage,
            &cf_params,
            &curves.cf,
            &cf_bar,
            &mut cf_param_bar,
        );
        if !l.hierarchical {
            for (g, b) in grad[l.cf.clone()].iter_mut().zip(&cf_param_bar) {
                *g += b;
            }
        } else {
            let (area, gender) = self.data.population_key(pop);
            let lambda1 = l.lambda1(x);
            let z = x[l.hier_z.clone()][area];
            grad[l.hier_b1] += cf_param_bar[0];
            grad[l.hier_z.start + area] += lambda1 * cf_param_bar[0];
            if let Some(i) = l.log_lambda1 {
                grad[i] += lambda1 * z * cf_param_bar[0];
            }
            grad[l.hier_b2] += cf_param_bar[1];
            for (g, b) in grad[l.nonlin_block(area)].iter_mut().zip(&cf_param_bar[2..]) {
                *g += b;
            }
            if l.gender_additive && gender == 1 {
                for (g, b) in grad[l.hier_male.clone()].iter_mut().zip(&cf_param_bar) {
                    *g += b;
                }
            }
        }

        let inc_block = if l.hierarchical {
            l.inc[pop].clone()
        } else {
            l.inc[0].clone()
        };
        let inc_params = &x[inc_block.clone()];
        let mut inc_param_bar = vec![0.0; inc_params.len()];
        backprop_rates(
            l.inc_family,
            &self.basis,
            self.spec.inc.eqage,
            inc_params,
            &curves.inc,
            &inc_bar,
            &mut inc_param_bar,
        );
        for (g, b) in grad[inc_block].iter_mut().zip(&inc_param_bar) {
            *g += b;
        }

        if let (Some(family), Some(rm)) = (l.rem_family, self.spec.rem) {
            let rem_params = &x[l.rem.clone()];
            let mut rem_param_bar = vec![0.0; rem_params.len()];
            backprop_rates(
                family,
                &self.basis,
                rm.eqage,
                rem_params,
                &curves.rem,
                &rem_bar,
                &mut rem_param_bar,
            );
            for (g, b) in grad[l.rem.clone()].iter_mut().zip(&rem_param_bar) {
                *g += b;
            }
        }

        loglik
    }

    /// Log prior; accumulates its gradient into `grad` when provided.
    fn log_prior_value_grad(&self, x: &[f64], mut grad: Option<&mut [f64]>) -> f64 {
        let l = &self.layout;
        let pr = &self.spec.priors;
        let g = &mut grad;
        let mut lp = 0.0;

        if !l.hierarchical {
            lp += curve_prior(
                x,
                g,
                l.cf_family,
                l.cf.clone(),
                pr.intercept_sd,
                pr.slope_sd,
                l.lambda0(Outcome::Prevalence, x),
                l.log_lambda0_cf,
            );
        } else {
            lp += normal_term(x, g, l.hier_b1, pr.hier_intercept.0, pr.hier_intercept.1);
            lp += normal_term(x, g, l.hier_b2, pr.hier_slope.0, pr.hier_slope.1);
            for idx in l.hier_z.clone() {
                lp += normal_term(x, g, idx, 0.0, 1.0);
            }
            let lambda0 = l.lambda0(Outcome::Prevalence, x);
            for idx in l.hier_nonlin.clone() {
                lp += shrink_term(x, g, idx, lambda0, l.log_lambda0_cf);
            }
            if l.gender_additive {
                let male = l.hier_male.clone();
                lp += normal_term(x, g, male.start, 0.0, pr.male_sd);
                lp += normal_term(x, g, male.start + 1, 0.0, pr.male_sd);
                let lambda_m = l.lambda0_male(x);
                for idx in male.start + 2..male.end {
                    lp += shrink_term(x, g, idx, lambda_m, l.log_lambda0_male);
                }
            }
        }

        let lambda0_inc = l.lambda0(Outcome::Incidence, x);
        for block in &l.inc {
            lp += curve_prior(
                x,
                g,
                l.inc_family,
                block.clone(),
                pr.intercept_sd,
                pr.slope_sd,
                lambda0_inc,
                l.log_lambda0_inc,
            );
        }

        if let Some(family) = l.rem_family {
            lp += curve_prior(
                x,
                g,
                family,
                l.rem.clone(),
                pr.rem_intercept_sd,
                pr.slope_sd,
                l.lambda0(Outcome::Remission, x),
                l.log_lambda0_rem,
            );
        }

        let hypers = [
            (l.log_lambda0_cf, &pr.lambda0_cf),
            (l.log_lambda0_inc, &pr.lambda0_inc),
            (l.log_lambda0_rem, &pr.lambda0_rem),
            (l.log_lambda0_male, &pr.lambda0_male),
            (l.log_lambda1, &pr.lambda1),
        ];
        for (idx, setting) in hypers {
            if let (Some(i), HyperSetting::Estimated(p)) = (idx, setting) {
                lp += gamma_log_term(x, g, i, *p);
            }
        }
        lp
    }

    /// Keys of all observed data points, in the fixed evaluation order.
    pub fn observations(&self) -> Vec<ObsKey> {
        let mut keys = Vec::new();
        for pop in 0..self.data.n_populations() {
            let (area, gender) = self.data.population_key(pop);
            let counts = self.data.counts_by_index(pop);
            for outcome in Outcome::ALL {
                let Some(col) = counts.outcome(outcome) else {
                    continue;
                };
                for (age, c) in col.iter().enumerate() {
                    if c.is_observed() {
                        keys.push(ObsKey {
                            outcome,
                            age,
                            area,
                            gender,
                        });
                    }
                }
            }
        }
        keys
    }

    /// Full log density of every observation at `x`, aligned with
    /// [`Posterior::observations`].
    pub fn loglik_by_observation(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (lo, hi) = PROB_CLAMP;
        let mut out = Vec::new();
        for pop in 0..self.data.n_populations() {
            let counts = self.data.counts_by_index(pop);
            let probs = self.population_probs(x, pop)?;
            for outcome in Outcome::ALL {
                let Some(col) = counts.outcome(outcome) else {
                    continue;
                };
                let series = match outcome {
                    Outcome::Mortality => &probs.mort,
                    Outcome::Incidence => &probs.inc_prob,
                    Outcome::Prevalence => &probs.prev,
                    Outcome::Remission => &probs.rem_prob,
                };
                for (age, c) in col.iter().enumerate() {
                    if c.is_observed() {
                        let p = series[age].clamp(lo, hi);
                        out.push(
                            c.y * p.ln() + (c.n - c.y) * (1.0 - p).ln() + ln_choose(c.n, c.y),
                        );
                    }
                }
            }
        }
        Ok(out)
    }
}

fn curve_rates(curves: &PopulationCurves) -> Vec<RateTriple> {
    curves
        .inc
        .iter()
        .zip(&curves.cf)
        .zip(&curves.rem)
        .map(|((&i, &f), &r)| RateTriple::new(i, f, r))
        .collect()
}

/// Observable one-year probabilities from per-age rates and the matching
/// occupancy. After the cohort numerically dies out, prevalence carries the
/// last well-defined value forward.
pub(crate) fn probs_for_rates(rates: &[RateTriple], occ: &[StateVec]) -> PopulationProbs {
    let n_ages = rates.len();
    let mut probs = PopulationProbs {
        inc_prob: vec![0.0; n_ages],
        prev: vec![0.0; n_ages],
        mort: vec![0.0; n_ages],
        rem_prob: vec![0.0; n_ages],
    };
    let mut last_prev = 0.0;
    for a in 0..n_ages {
        let p = transition_matrix(rates[a]);
        let alive = occ[a][0] + occ[a][1];
        if alive > 0.0 {
            last_prev = occ[a][1] / alive;
        }
        probs.inc_prob[a] = markov::incidence_prob(&p);
        probs.prev[a] = last_prev;
        probs.mort[a] = markov::mortality_prob(&p, last_prev);
        probs.rem_prob[a] = markov::remission_prob(&p);
    }
    probs
}

fn normal_term(x: &[f64], grad: &mut Option<&mut [f64]>, idx: usize, mean: f64, sd: f64) -> f64 {
    let z = (x[idx] - mean) / sd;
    if let Some(g) = grad.as_deref_mut() {
        g[idx] -= z / sd;
    }
    -0.5 * z * z - sd.ln() - 0.5 * LN_2PI
}

/// Normal density with a shared scale `lambda`; when the scale is estimated,
/// `log_idx` locates its log in the parameter vector and picks up the scale
/// part of the gradient.
fn shrink_term(
    x: &[f64],
    grad: &mut Option<&mut [f64]>,
    idx: usize,
    lambda: f64,
    log_idx: Option<usize>,
) -> f64 {
    let z = x[idx] / lambda;
    if let Some(g) = grad.as_deref_mut() {
        g[idx] -= z / lambda;
        if let Some(li) = log_idx {
            g[li] += z * z - 1.0;
        }
    }
    -0.5 * z * z - lambda.ln() - 0.5 * LN_2PI
}

/// Gamma density for a scale parameterized on the log scale, including the
/// change-of-variables Jacobian.
fn gamma_log_term(
    x: &[f64],
    grad: &mut Option<&mut [f64]>,
    log_idx: usize,
    prior: GammaPrior,
) -> f64 {
    let lx = x[log_idx];
    let lam = lx.exp();
    if let Some(g) = grad.as_deref_mut() {
        g[log_idx] += prior.shape - prior.rate * lam;
    }
    prior.shape * lx - prior.rate * lam + prior.shape * prior.rate.ln() - ln_gamma(prior.shape)
}

#[allow(clippy::too_many_arguments)]
fn curve_prior(
    x: &[f64],
    grad: &mut Option<&mut [f64]>,
    family: CurveFamily,
    block: Range<usize>,
    intercept_sd: f64,
    slope_sd: f64,
    lambda: f64,
    log_idx: Option<usize>,
) -> f64 {
    let mut lp = 0.0;
    match family {
        CurveFamily::Const | CurveFamily::Indep => {
            for idx in block {
                lp += normal_term(x, grad, idx, 0.0, intercept_sd);
            }
        }
        CurveFamily::Smooth => {
            lp += normal_term(x, grad, block.start, 0.0, intercept_sd);
            lp += normal_term(x, grad, block.start + 1, 0.0, slope_sd);
            for idx in block.start + 2..block.end {
                lp += shrink_term(x, grad, idx, lambda, log_idx);
            }
        }
        CurveFamily::Increasing => {
            lp += normal_term(x, grad, block.start, 0.0, intercept_sd);
            lp += normal_term(x, grad, block.start + 1, 0.0, intercept_sd);
            lp += normal_term(x, grad, block.start + 2, 0.0, slope_sd);
            for idx in block.start + 3..block.end {
                lp += shrink_term(x, grad, idx, lambda, log_idx);
            }
        }
    }
    lp
}
