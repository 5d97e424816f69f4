//! Elicitation of the gamma prior for the between-area intercept spread.

use crate::error::{Error, Result};
use crate::model::GammaPrior;
use statrs::distribution::{ContinuousCDF, Gamma};

/// Width of a central 95% interval of a normal in standard deviations.
const Z95_WIDTH: f64 = 3.92;

/// Derives a gamma prior for the between-area standard deviation of log case
/// fatality from two judgments about the ratio between the highest-2.5% and
/// lowest-2.5% areas: a best guess and an upper plausible bound. A spread of
/// `lambda1` on the log scale puts that ratio at `exp(3.92 * lambda1)`, so
/// the guess fixes the prior mean and the bound its 97.5% quantile.
///
/// The returned prior's 97.5% quantile matches the bound to within 0.1%.
pub fn elicit_lambda1_prior(ratio_guess: f64, ratio_upper: f64) -> Result<GammaPrior> {
    if !(ratio_guess > 1.0 && ratio_upper > ratio_guess) {
        return Err(Error::InvalidInput(format!(
            "need 1 < ratio_guess < ratio_upper, got guess={ratio_guess}, upper={ratio_upper}"
        )));
    }
    let mean = ratio_guess.ln() / Z95_WIDTH;
    let upper = ratio_upper.ln() / Z95_WIDTH;

    let q975 = |shape: f64| -> Result<f64> {
        let rate = shape / mean;
        let dist = Gamma::new(shape, rate).map_err(|e| Error::SearchFailed(e.to_string()))?;
        Ok(dist.inverse_cdf(0.975))
    };

    // With the mean pinned, the 97.5% quantile rises to a single peak near
    // shape 0.1 (below it the mass collapses toward zero and the quantile
    // with it) and decreases monotonically after. Solve on the decreasing
    // branch: locate the peak on a log grid, then bisect to its right.
    let mut peak = 1e-3;
    let mut peak_q = f64::NEG_INFINITY;
    for j in 0..=140 {
        let shape = 10f64.powf(-3.0 + j as f64 / 20.0);
        let q = q975(shape)?;
        if q > peak_q {
            peak = shape;
            peak_q = q;
        }
    }
    let mut lo = peak;
    let mut hi = 1e4;
    if peak_q < upper || q975(hi)? > upper {
        return Err(Error::SearchFailed(format!(
            "no gamma prior with mean {mean} has a 97.5% quantile of {upper}; \
             the bound is too far from (or too close to) the guess"
        )));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let q = q975(mid)?;
        if (q - upper).abs() / upper < 1e-6 {
            return Ok(GammaPrior {
                shape: mid,
                rate: mid / mean,
            });
        }
        if q > upper {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let shape = 0.5 * (lo + hi);
    let q = q975(shape)?;
    if (q - upper).abs() / upper > 1e-3 {
        return Err(Error::SearchFailed(format!(
            "gamma quantile search stalled at shape {shape} (q97.5 {q} vs target {upper})"
        )));
    }
    Ok(GammaPrior {
        shape,
        rate: shape / mean,
    })
}
