//! Observed count data, organized by population (area and gender) and age.

use crate::error::{Error, Result};

/// One binomial-style observation: `y` events out of `n` at risk. Both may
/// be fractional (counts reconstructed from published estimates). A zero
/// denominator means "no observation at this age".
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Count {
    pub y: f64,
    pub n: f64,
}

impl Count {
    pub fn new(y: f64, n: f64) -> Self {
        Count { y, n }
    }

    pub fn none() -> Self {
        Count { y: 0.0, n: 0.0 }
    }

    pub fn is_observed(&self) -> bool {
        self.n > 0.0
    }
}

/// The four observable outcomes, in the fixed order used for observation
/// indexing throughout the crate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Outcome {
    Mortality,
    Incidence,
    Prevalence,
    Remission,
}

impl Outcome {
    pub const ALL: [Outcome; 4] = [
        Outcome::Mortality,
        Outcome::Incidence,
        Outcome::Prevalence,
        Outcome::Remission,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Outcome::Mortality => "mort",
            Outcome::Incidence => "inc",
            Outcome::Prevalence => "prev",
            Outcome::Remission => "rem",
        }
    }
}

/// Per-age counts for one population. Mortality is required at every age;
/// the other outcomes are optional columns of the same length.
#[derive(Clone, Debug, Default)]
pub struct ObservedCounts {
    pub mortality: Vec<Count>,
    pub incidence: Option<Vec<Count>>,
    pub prevalence: Option<Vec<Count>>,
    pub remission: Option<Vec<Count>>,
}

impl ObservedCounts {
    pub fn outcome(&self, outcome: Outcome) -> Option<&[Count]> {
        match outcome {
            Outcome::Mortality => Some(&self.mortality),
            Outcome::Incidence => self.incidence.as_deref(),
            Outcome::Prevalence => self.prevalence.as_deref(),
            Outcome::Remission => self.remission.as_deref(),
        }
    }

    fn validate(&self, n_ages: usize, what: &str) -> Result<()> {
        if self.mortality.len() != n_ages {
            return Err(Error::Dimension(format!(
                "{what}: mortality covers {} ages, expected {n_ages}",
                self.mortality.len()
            )));
        }
        if self.incidence.is_none() && self.prevalence.is_none() {
            return Err(Error::InvalidInput(format!(
                "{what}: need incidence or prevalence counts in addition to mortality"
            )));
        }
        for outcome in Outcome::ALL {
            let Some(counts) = self.outcome(outcome) else {
                continue;
            };
            if counts.len() != n_ages {
                return Err(Error::Dimension(format!(
                    "{what}: {} covers {} ages, expected {n_ages}",
                    outcome.label(),
                    counts.len()
                )));
            }
            for (age, c) in counts.iter().enumerate() {
                if !(c.y.is_finite() && c.n.is_finite() && c.y >= 0.0 && c.n >= 0.0) {
                    return Err(Error::InvalidInput(format!(
                        "{what}: {} at age {age} has invalid counts y={}, n={}",
                        outcome.label(),
                        c.y,
                        c.n
                    )));
                }
                if c.y > c.n {
                    return Err(Error::InvalidInput(format!(
                        "{what}: {} at age {age} has y={} > n={}",
                        outcome.label(),
                        c.y,
                        c.n
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A complete dataset: one [`ObservedCounts`] per (area, gender), all over
/// the same ages `0..n_ages`. Gender index 0 is the baseline; index 1 (if
/// present) receives the additive effect in gender-additive models.
#[derive(Clone, Debug)]
pub struct Dataset {
    n_ages: usize,
    areas: Vec<String>,
    genders: Vec<String>,
    populations: Vec<ObservedCounts>,
}

impl Dataset {
    pub fn new(
        areas: Vec<String>,
        genders: Vec<String>,
        populations: Vec<ObservedCounts>,
    ) -> Result<Self> {
        if areas.is_empty() {
            return Err(Error::InvalidInput("dataset has no areas".into()));
        }
        if genders.is_empty() || genders.len() > 2 {
            return Err(Error::InvalidInput(format!(
                "dataset must have one or two genders, got {}",
                genders.len()
            )));
        }
        if populations.len() != areas.len() * genders.len() {
            return Err(Error::Dimension(format!(
                "expected {} populations ({} areas x {} genders), got {}",
                areas.len() * genders.len(),
                areas.len(),
                genders.len(),
                populations.len()
            )));
        }
        let n_ages = populations[0].mortality.len();
        if n_ages == 0 {
            return Err(Error::InvalidInput("dataset covers no ages".into()));
        }
        for (idx, pop) in populations.iter().enumerate() {
            let area = &areas[idx / genders.len()];
            let gender = &genders[idx % genders.len()];
            pop.validate(n_ages, &format!("population {area}/{gender}"))?;
        }
        Ok(Dataset {
            n_ages,
            areas,
            genders,
            populations,
        })
    }

    /// Single-population dataset (one area, one gender).
    pub fn single(counts: ObservedCounts) -> Result<Self> {
        Dataset::new(vec!["all".into()], vec!["all".into()], vec![counts])
    }

    pub fn n_ages(&self) -> usize {
        self.n_ages
    }

    pub fn areas(&self) -> &[String] {
        &self.areas
    }

    pub fn genders(&self) -> &[String] {
        &self.genders
    }

    pub fn n_populations(&self) -> usize {
        self.populations.len()
    }

    pub fn counts(&self, area: usize, gender: usize) -> &ObservedCounts {
        &self.populations[area * self.genders.len() + gender]
    }

    pub fn counts_by_index(&self, pop: usize) -> &ObservedCounts {
        &self.populations[pop]
    }

    /// (area, gender) indices for a flat population index.
    pub fn population_key(&self, pop: usize) -> (usize, usize) {
        (pop / self.genders.len(), pop % self.genders.len())
    }

    pub fn has_remission(&self) -> bool {
        self.populations.iter().any(|p| p.remission.is_some())
    }

    /// Extracts one population as a standalone single-population dataset,
    /// keeping its labels.
    pub fn subset(&self, area: usize, gender: usize) -> Dataset {
        Dataset {
            n_ages: self.n_ages,
            areas: vec![self.areas[area].clone()],
            genders: vec![self.genders[gender].clone()],
            populations: vec![self.counts(area, gender).clone()],
        }
    }

    /// Number of observed (nonzero-denominator) data points.
    pub fn n_observations(&self) -> usize {
        self.populations
            .iter()
            .map(|p| {
                Outcome::ALL
                    .iter()
                    .filter_map(|&o| p.outcome(o))
                    .flatten()
                    .filter(|c| c.is_observed())
                    .count()
            })
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(n_ages: usize) -> ObservedCounts {
        ObservedCounts {
            mortality: vec![Count::new(1.0, 100.0); n_ages],
            incidence: Some(vec![Count::new(2.0, 100.0); n_ages]),
            prevalence: None,
            remission: None,
        }
    }

    #[test]
    fn valid_single_population() {
        let d = Dataset::single(counts(10)).unwrap();
        assert_eq!(d.n_ages(), 10);
        assert_eq!(d.n_populations(), 1);
        assert_eq!(d.n_observations(), 20);
        assert!(!d.has_remission());
    }

    #[test]
    fn mortality_must_cover_every_age() {
        let mut c = counts(10);
        c.mortality.truncate(9);
        assert!(Dataset::single(c).is_err());
    }

    #[test]
    fn needs_incidence_or_prevalence() {
        let c = ObservedCounts {
            mortality: vec![Count::new(1.0, 100.0); 5],
            ..Default::default()
        };
        assert!(Dataset::single(c).is_err());
    }

    #[test]
    fn rejects_y_above_n() {
        let mut c = counts(5);
        c.incidence.as_mut().unwrap()[2] = Count::new(5.0, 4.0);
        assert!(Dataset::single(c).is_err());
    }

    #[test]
    fn population_indexing_is_area_major() {
        let pops: Vec<ObservedCounts> = (0..4).map(|_| counts(5)).collect();
        let d = Dataset::new(
            vec!["a".into(), "b".into()],
            vec!["f".into(), "m".into()],
            pops,
        )
        .unwrap();
        assert_eq!(d.population_key(0), (0, 0));
        assert_eq!(d.population_key(1), (0, 1));
        assert_eq!(d.population_key(3), (1, 1));
        assert_eq!(d.subset(1, 0).areas()[0], "b");
    }
}
