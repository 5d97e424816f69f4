//! Model specification: which curve family each rate follows, hierarchical
//! and gender structure, calendar trends, priors, and fixed hyperparameters.

mod data;
mod elicit;
mod posterior;

pub use data::{Count, Dataset, ObservedCounts, Outcome};
pub use elicit::elicit_lambda1_prior;
pub use posterior::{
    ObsKey, ParamLayout, PopulationCurves, PopulationProbs, Posterior, PROB_CLAMP,
};
pub(crate) use posterior::probs_for_rates;

use crate::error::{Error, Result};
use crate::markov::TrendMatrix;
use crate::spline::CurveFamily;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GammaPrior {
    pub shape: f64,
    pub rate: f64,
}

/// A positive hyperparameter is either estimated under a gamma prior or held
/// fixed at a known value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum HyperSetting {
    Fixed(f64),
    Estimated(GammaPrior),
}

impl HyperSetting {
    pub fn fixed_value(&self) -> Option<f64> {
        match self {
            HyperSetting::Fixed(v) => Some(*v),
            HyperSetting::Estimated(_) => None,
        }
    }
}

/// How one rate varies with age.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RateModel {
    pub family: CurveFamily,
    /// Ages below this share the curve value at it (smooth family), or the
    /// base level holds through it (increasing family).
    pub eqage: usize,
}

impl RateModel {
    pub fn smooth(eqage: usize) -> Self {
        RateModel {
            family: CurveFamily::Smooth,
            eqage,
        }
    }

    pub fn constant() -> Self {
        RateModel {
            family: CurveFamily::Const,
            eqage: 0,
        }
    }
}

/// Calendar-time trend multipliers for incidence and case fatality.
#[derive(Clone, Debug)]
pub struct Trends {
    pub inc: TrendMatrix,
    pub cf: TrendMatrix,
}

/// Prior settings. Defaults are the ones used throughout: vague normal
/// priors on intercepts and slopes, Gamma(2,1) smoothness scales, and an
/// elicited between-area spread corresponding to a best-guess 5-fold and an
/// at-most 50-fold ratio between extreme areas.
#[derive(Clone, Debug)]
pub struct PriorSettings {
    pub intercept_sd: f64,
    pub slope_sd: f64,
    /// Constant remission log rates are given a tighter prior than the other
    /// intercepts; exp(N(0,100^2)) draws would be astronomically improbable
    /// remission rates.
    pub rem_intercept_sd: f64,
    /// Hyperprior mean and sd of the hierarchical intercept b1.
    pub hier_intercept: (f64, f64),
    /// Hyperprior mean and sd of the shared slope b2 (standardized age).
    pub hier_slope: (f64, f64),
    /// SD of the additive male offsets on intercept and slope; 0.82 puts 95%
    /// of rate ratios between genders in (0.2, 5).
    pub male_sd: f64,
    pub lambda0_cf: HyperSetting,
    pub lambda0_inc: HyperSetting,
    pub lambda0_rem: HyperSetting,
    /// Smoothness of the nonlinear male-offset terms; fixed at 1 by default.
    pub lambda0_male: HyperSetting,
    /// Between-area intercept spread.
    pub lambda1: HyperSetting,
}

pub const DEFAULT_LAMBDA0_PRIOR: GammaPrior = GammaPrior {
    shape: 2.0,
    rate: 1.0,
};

impl Default for PriorSettings {
    fn default() -> Self {
        let lambda1 = elicit_lambda1_prior(5.0, 50.0)
            .expect("default lambda1 elicitation is well posed");
        PriorSettings {
            intercept_sd: 100.0,
            slope_sd: 100.0,
            rem_intercept_sd: 10.0,
            hier_intercept: (0.0, 10.0),
            hier_slope: (5.0, 5.0),
            male_sd: 0.82,
            lambda0_cf: HyperSetting::Estimated(DEFAULT_LAMBDA0_PRIOR),
            lambda0_inc: HyperSetting::Estimated(DEFAULT_LAMBDA0_PRIOR),
            lambda0_rem: HyperSetting::Estimated(DEFAULT_LAMBDA0_PRIOR),
            lambda0_male: HyperSetting::Fixed(1.0),
            lambda1: HyperSetting::Estimated(lambda1),
        }
    }
}

/// Full model specification.
#[derive(Clone, Debug)]
pub struct ModelSpec {
    /// Spline basis dimension.
    pub k: usize,
    pub cf: RateModel,
    pub inc: RateModel,
    /// `None` models the disease as irreversible (remission rate zero).
    pub rem: Option<RateModel>,
    /// Area-level random intercepts on case fatality; incidence is then
    /// modeled independently per population and remission shared.
    pub hierarchical: bool,
    /// Additive gender offsets on the case-fatality curve.
    pub gender_additive: bool,
    pub trends: Option<Trends>,
    pub priors: PriorSettings,
    /// Named hyperparameters pinned to fixed values, overriding `priors`:
    /// `lambda0_cf`, `lambda0_inc`, `lambda0_rem`, `lambda0_male`, `lambda1`.
    pub hp_fixed: Vec<(String, f64)>,
    /// State distribution at age zero.
    pub s0: [f64; 3],
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            k: 10,
            cf: RateModel::smooth(0),
            inc: RateModel::smooth(0),
            rem: None,
            hierarchical: false,
            gender_additive: false,
            trends: None,
            priors: PriorSettings::default(),
            hp_fixed: Vec::new(),
            s0: [1.0, 0.0, 0.0],
        }
    }
}

pub const KNOWN_HYPERS: [&str; 5] = [
    "lambda0_cf",
    "lambda0_inc",
    "lambda0_rem",
    "lambda0_male",
    "lambda1",
];

impl ModelSpec {
    /// A reasonable default spec for a dataset: smooth incidence and case
    /// fatality, constant remission when remission counts are present.
    pub fn default_for(data: &Dataset) -> Self {
        ModelSpec {
            rem: data.has_remission().then(RateModel::constant),
            ..Default::default()
        }
    }

    pub fn hp_fixed_value(&self, name: &str) -> Option<f64> {
        self.hp_fixed
            .iter()
            .rev()
            .find(|(n, _)| n == name)
            .map(|&(_, v)| v)
    }

    /// Checks the spec against a dataset. Every fitting entry point calls
    /// this before touching parameters.
    pub fn validate(&self, data: &Dataset) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Dimension(format!(
                "basis dimension must be at least 2, got {}",
                self.k
            )));
        }
        if data.n_ages() < self.k {
            return Err(Error::Dimension(format!(
                "basis dimension {} exceeds the {} observed ages",
                self.k,
                data.n_ages()
            )));
        }
        for (what, rm) in [("cf", Some(&self.cf)), ("inc", Some(&self.inc)), ("rem", self.rem.as_ref())] {
            if let Some(rm) = rm {
                if rm.eqage >= data.n_ages() {
                    return Err(Error::InvalidInput(format!(
                        "{what} eqage {} is outside ages 0..{}",
                        rm.eqage,
                        data.n_ages()
                    )));
                }
            }
        }
        if self.hierarchical {
            if data.areas().len() < 2 {
                return Err(Error::InvalidInput(
                    "hierarchical models need at least two areas".into(),
                ));
            }
            if self.cf.family != CurveFamily::Smooth {
                return Err(Error::Unsupported(
                    "hierarchical case fatality supports the smooth family only".into(),
                ));
            }
            if self.inc.family != CurveFamily::Smooth {
                return Err(Error::Unsupported(
                    "hierarchical models fit a smooth incidence curve per population".into(),
                ));
            }
            if let Some(rem) = &self.rem {
                if rem.family != CurveFamily::Const {
                    return Err(Error::Unsupported(
                        "hierarchical models share a constant remission rate".into(),
                    ));
                }
            }
            if data.genders().len() == 2 && !self.gender_additive {
                return Err(Error::InvalidInput(
                    "two genders in a hierarchical fit require gender_additive".into(),
                ));
            }
        } else {
            if data.areas().len() > 1 || data.genders().len() > 1 {
                return Err(Error::InvalidInput(
                    "non-hierarchical fits cover one population; fit areas separately or set hierarchical".into(),
                ));
            }
        }
        if self.gender_additive {
            if !self.hierarchical {
                return Err(Error::InvalidInput(
                    "gender_additive requires a hierarchical model".into(),
                ));
            }
            if data.genders().len() != 2 {
                return Err(Error::InvalidInput(format!(
                    "gender_additive needs two genders, data has {}",
                    data.genders().len()
                )));
            }
        }
        if let Some(trends) = &self.trends {
            if self.hierarchical {
                return Err(Error::Unsupported(
                    "time trends are supported in non-hierarchical models only".into(),
                ));
            }
            if trends.inc.n_ages() != data.n_ages() || trends.cf.n_ages() != data.n_ages() {
                return Err(Error::Dimension(format!(
                    "trend matrices cover {} and {} ages, data has {}",
                    trends.inc.n_ages(),
                    trends.cf.n_ages(),
                    data.n_ages()
                )));
            }
            if data.n_ages() > TrendMatrix::N_YEARS {
                return Err(Error::Dimension(format!(
                    "trend models support at most {} ages",
                    TrendMatrix::N_YEARS
                )));
            }
        }
        if data.has_remission() && self.rem.is_none() {
            return Err(Error::InvalidInput(
                "remission counts are present but the spec models no remission; set a remission model or drop the counts".into(),
            ));
        }
        for (name, value) in &self.hp_fixed {
            if !KNOWN_HYPERS.contains(&name.as_str()) {
                return Err(Error::UnknownHyperparameter {
                    name: name.clone(),
                    known: KNOWN_HYPERS.iter().map(|s| s.to_string()).collect(),
                });
            }
            if !(value.is_finite() && *value > 0.0) {
                return Err(Error::InvalidInput(format!(
                    "fixed hyperparameter {name} must be positive, got {value}"
                )));
            }
        }
        let s0_sum: f64 = self.s0.iter().sum();
        if !self.s0.iter().all(|&p| (0.0..=1.0).contains(&p)) || (s0_sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "initial state distribution must be a probability vector, got {:?}",
                self.s0
            )));
        }
        Ok(())
    }
}
