//! Thurstone Case V pairwise comparison probabilities.
//!
//! The probability that image `i` is preferred over image `j` is the normal
//! CDF of the difference of their mean scores, scaled by the square root of
//! the summed score variances. Variances are floored so that two groups whose
//! samples all agree still yield a finite, sign-preserving probability.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::check_score;

/// How the ground-truth comparison probability is derived from two MOS values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroundTruthMode {
    /// Order indicator: 1, 0, or 0.5 on ties.
    #[default]
    Hard,
    /// Thurstone probability of the MOS difference with a fixed rater spread.
    Soft,
}

impl std::str::FromStr for GroundTruthMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hard" => Ok(GroundTruthMode::Hard),
            "soft" => Ok(GroundTruthMode::Soft),
            other => Err(Error::Config(format!("unknown ground-truth mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComparisonConfig {
    pub variance_floor: f64,
    pub gt_mode: GroundTruthMode,
    /// Per-image rater spread used by [`GroundTruthMode::Soft`].
    pub gt_sigma: f64,
}

impl Default for ComparisonConfig {
    fn default() -> Self {
        ComparisonConfig {
            variance_floor: 1e-6,
            gt_mode: GroundTruthMode::Hard,
            gt_sigma: 0.5,
        }
    }
}

impl ComparisonConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.variance_floor > 0.0 && self.variance_floor.is_finite()) {
            return Err(Error::Config(format!("variance_floor must be > 0, got {}", self.variance_floor)));
        }
        if !(self.gt_sigma > 0.0 && self.gt_sigma.is_finite()) {
            return Err(Error::Config(format!("gt_sigma must be > 0, got {}", self.gt_sigma)));
        }
        Ok(())
    }
}

/// Standard normal CDF, `0.5 * erfc(-z / sqrt(2))`.
pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

fn finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteInput(format!("{name} = {v}")))
    }
}

fn variance(name: &str, v: f64) -> Result<f64> {
    finite(name, v)?;
    if v < 0.0 {
        return Err(Error::NegativeVariance(v));
    }
    Ok(v)
}

/// Probability that the item with (`mean_i`, `var_i`) beats the one with
/// (`mean_j`, `var_j`).
pub fn comparison_prob(mean_i: f64, var_i: f64, mean_j: f64, var_j: f64, cfg: &ComparisonConfig) -> Result<f64> {
    let mean_i = finite("mean_i", mean_i)?;
    let mean_j = finite("mean_j", mean_j)?;
    let var_i = variance("var_i", var_i)?;
    let var_j = variance("var_j", var_j)?;
    let scale = (var_i.max(cfg.variance_floor) + var_j.max(cfg.variance_floor)).sqrt();
    Ok(std_normal_cdf((mean_i - mean_j) / scale))
}

/// Comparison probability of a single response of image `i` against the
/// group of image `j`: the response's score stands in for the mean of `i`,
/// both group variances are kept.
pub fn per_response_prob(
    sample_score_i: f64,
    group_i_var: f64,
    group_j_mean: f64,
    group_j_var: f64,
    cfg: &ComparisonConfig,
) -> Result<f64> {
    comparison_prob(sample_score_i, group_i_var, group_j_mean, group_j_var, cfg)
}

/// Ground-truth probability that `mos_i` is preferred over `mos_j`.
pub fn ground_truth_prob(mos_i: f64, mos_j: f64, cfg: &ComparisonConfig) -> Result<f64> {
    check_score("mos_i", mos_i)?;
    check_score("mos_j", mos_j)?;
    Ok(match cfg.gt_mode {
        GroundTruthMode::Hard => {
            if mos_i > mos_j {
                1.0
            } else if mos_i < mos_j {
                0.0
            } else {
                0.5
            }
        }
        GroundTruthMode::Soft => std_normal_cdf((mos_i - mos_j) / (cfg.gt_sigma * std::f64::consts::SQRT_2)),
    })
}
