//! Helpers shared by the integration test binaries: the committed golden
//! dataset, its generating truth, and a minimal strict CSV reader for the
//! formats the data files use.

#![allow(dead_code)]

use threestate::model::{Count, Dataset, ObservedCounts};
use threestate::simulate::{Denominators, TrueRates};

pub const GOLDEN_AGES: usize = 100;
pub const GOLDEN_DENOM: f64 = 1e5;
pub const GOLDEN_SEED: u64 = 20250814;

/// The smooth curves behind the golden dataset: incidence and case fatality
/// both accelerate with age. Standardized age keeps the coefficients
/// readable. Both log rates carry genuine curvature; with a straight-line
/// log truth the smoothness scale has no interior optimum to find.
pub fn golden_truth() -> TrueRates {
    let half = (GOLDEN_AGES - 1) as f64 / 2.0;
    let t = |a: usize| (a as f64 - half) / half;
    let inc: Vec<f64> = (0..GOLDEN_AGES)
        .map(|a| 0.015 * (0.8 * t(a) + 0.4 * t(a) * t(a)).exp())
        .collect();
    let cf: Vec<f64> = (0..GOLDEN_AGES)
        .map(|a| 0.08 * (0.6 * t(a) + 0.3 * t(a) * t(a)).exp())
        .collect();
    let rem = vec![0.0; GOLDEN_AGES];
    TrueRates::from_curves(&inc, &cf, &rem)
}

pub fn golden_denominators() -> Denominators {
    Denominators::uniform(GOLDEN_AGES, GOLDEN_DENOM)
}

/// Renders the counts in the committed golden_counts.csv format.
pub fn counts_to_csv(counts: &ObservedCounts) -> String {
    let mut out = String::from("age,mort_num,mort_denom,inc_num,inc_denom,prev_num,prev_denom\n");
    let inc = counts.incidence.as_ref().expect("golden data has incidence");
    let prev = counts.prevalence.as_ref().expect("golden data has prevalence");
    for a in 0..counts.mortality.len() {
        let m = counts.mortality[a];
        let i = inc[a];
        let p = prev[a];
        out.push_str(&format!(
            "{a},{},{},{},{},{},{}\n",
            m.y, m.n, i.y, i.n, p.y, p.n
        ));
    }
    out
}

/// Renders the generating rates in the committed golden_truth.csv format.
pub fn truth_to_csv(truth: &TrueRates) -> String {
    let probs = truth.implied_probs().expect("golden truth is well posed");
    let mut out = String::from("age,inc,cf,prev\n");
    for (a, r) in truth.rates.iter().enumerate() {
        out.push_str(&format!("{a},{},{},{}\n", r.i, r.f, probs.prev[a]));
    }
    out
}

/// Parses a comma-separated table with a header row into named columns.
pub fn read_csv(text: &str) -> (Vec<String>, Vec<Vec<f64>>) {
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .expect("csv has a header")
        .split(',')
        .map(str::to_string)
        .collect();
    let rows: Vec<Vec<f64>> = lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split(',')
                .map(|v| v.parse::<f64>().expect("numeric cell"))
                .collect()
        })
        .collect();
    (header, rows)
}

fn column(header: &[String], rows: &[Vec<f64>], name: &str) -> Vec<f64> {
    let idx = header
        .iter()
        .position(|h| h == name)
        .unwrap_or_else(|| panic!("column {name} missing"));
    rows.iter().map(|r| r[idx]).collect()
}

/// The committed golden counts as a single-population Dataset.
pub fn golden_dataset() -> Dataset {
    let (header, rows) = read_csv(include_str!("../data/golden_counts.csv"));
    let pair = |num: &str, den: &str| -> Vec<Count> {
        column(&header, &rows, num)
            .into_iter()
            .zip(column(&header, &rows, den))
            .map(|(y, n)| Count::new(y, n))
            .collect()
    };
    let counts = ObservedCounts {
        mortality: pair("mort_num", "mort_denom"),
        incidence: Some(pair("inc_num", "inc_denom")),
        prevalence: Some(pair("prev_num", "prev_denom")),
        remission: None,
    };
    Dataset::new(vec!["all".into()], vec!["all".into()], vec![counts]).expect("golden data valid")
}

/// The committed generating rates: (incidence, case fatality) per age.
pub fn golden_truth_curves() -> (Vec<f64>, Vec<f64>) {
    let (header, rows) = read_csv(include_str!("../data/golden_truth.csv"));
    (
        column(&header, &rows, "inc"),
        column(&header, &rows, "cf"),
    )
}
