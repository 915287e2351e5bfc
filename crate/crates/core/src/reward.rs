//! Turn reward: the sum of a facial-valence deviation term and a normalized
//! speech-duration term.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RewardError {
    #[error("{0} requires at least one sample")]
    Empty(&'static str),
    #[error("{field} must be finite, got {value}")]
    NonFinite { field: &'static str, value: f64 },
    #[error("duration must be non-negative, got {0}")]
    NegativeDuration(f64),
    #[error("standard deviation must be positive, got {0}")]
    NonPositiveStd(f64),
    #[error("{field} must be positive, got {value}")]
    NonPositive { field: &'static str, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineValence {
    pub value: f64,
    pub sample_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardComponents {
    pub fv: f64,
    pub sd: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StatsSource {
    ReferenceCorpus,
    PerCoacheeRunning,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DurationStats {
    pub mean_s: f64,
    pub std_s: f64,
    pub source: StatsSource,
}

impl DurationStats {
    pub fn new(mean_s: f64, std_s: f64, source: StatsSource) -> Result<Self, RewardError> {
        if !mean_s.is_finite() {
            return Err(RewardError::NonFinite { field: "mean_s", value: mean_s });
        }
        if !(std_s.is_finite() && std_s > 0.0) {
            return Err(RewardError::NonPositiveStd(std_s));
        }
        Ok(Self { mean_s, std_s, source })
    }

    /// Population mean/std of `samples`.
    pub fn from_samples(samples: &[f64], source: StatsSource) -> Result<Self, RewardError> {
        if samples.is_empty() {
            return Err(RewardError::Empty("duration statistics"));
        }
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self::new(mean, var.sqrt(), source)
    }
}

/// Scales for the two reward terms; all of them are configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub scale_fv: f64,
    pub scale_sd: f64,
    pub clip: f64,
    pub stats_source: StatsSource,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            scale_fv: 10.0,
            scale_sd: 5.0,
            clip: 15.0,
            stats_source: StatsSource::ReferenceCorpus,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), RewardError> {
        for (field, value) in [
            ("scale_fv", self.scale_fv),
            ("scale_sd", self.scale_sd),
            ("clip", self.clip),
        ] {
            if !(value.is_finite() && value > 0.0) {
                return Err(RewardError::NonPositive { field, value });
            }
        }
        Ok(())
    }
}

fn mean(samples: &[f64], what: &'static str) -> Result<f64, RewardError> {
    if samples.is_empty() {
        return Err(RewardError::Empty(what));
    }
    if let Some(&bad) = samples.iter().find(|v| !v.is_finite()) {
        return Err(RewardError::NonFinite { field: what, value: bad });
    }
    Ok(samples.iter().sum::<f64>() / samples.len() as f64)
}

pub fn calibrate_baseline(valence_samples: &[f64]) -> Result<BaselineValence, RewardError> {
    let value = mean(valence_samples, "baseline calibration")?;
    Ok(BaselineValence {
        value,
        sample_count: valence_samples.len(),
    })
}

/// `FV_t`: scaled deviation of the turn's mean valence from the session baseline.
pub fn valence_deviation(
    turn_samples: &[f64],
    baseline: &BaselineValence,
    scale_fv: f64,
) -> Result<f64, RewardError> {
    let m = mean(turn_samples, "valence deviation")?;
    Ok(scale_fv * (m - baseline.value))
}

/// `SD_t`: scaled, clipped z-score of the turn's speech duration.
pub fn normalized_speech_duration(
    duration_s: f64,
    stats: &DurationStats,
    scale_sd: f64,
    clip: f64,
) -> Result<f64, RewardError> {
    if !duration_s.is_finite() {
        return Err(RewardError::NonFinite { field: "duration_s", value: duration_s });
    }
    if duration_s < 0.0 {
        return Err(RewardError::NegativeDuration(duration_s));
    }
    if stats.std_s <= 0.0 {
        return Err(RewardError::NonPositiveStd(stats.std_s));
    }
    Ok((scale_sd * (duration_s - stats.mean_s) / stats.std_s).clamp(-clip, clip))
}

pub fn compute_reward(fv: f64, sd: f64) -> Result<RewardComponents, RewardError> {
    if !fv.is_finite() {
        return Err(RewardError::NonFinite { field: "fv", value: fv });
    }
    if !sd.is_finite() {
        return Err(RewardError::NonFinite { field: "sd", value: sd });
    }
    Ok(RewardComponents { fv, sd, total: fv + sd })
}

/// Full per-turn reward from raw turn features.
pub fn turn_reward(
    turn_valence: &[f64],
    speech_duration_s: f64,
    baseline: &BaselineValence,
    stats: &DurationStats,
    config: &RewardConfig,
) -> Result<RewardComponents, RewardError> {
    let fv = valence_deviation(turn_valence, baseline, config.scale_fv)?;
    let sd = normalized_speech_duration(speech_duration_s, stats, config.scale_sd, config.clip)?;
    compute_reward(fv, sd)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn stats(mean: f64, std: f64) -> DurationStats {
        DurationStats::new(mean, std, StatsSource::ReferenceCorpus).unwrap()
    }

    #[test]
    fn baseline_is_mean() {
        assert_eq!(calibrate_baseline(&[0.0, 0.0]).unwrap().value, 0.0);
        assert_abs_diff_eq!(calibrate_baseline(&[0.2, 0.4]).unwrap().value, 0.3, epsilon = 1e-15);
        assert_eq!(calibrate_baseline(&[]), Err(RewardError::Empty("baseline calibration")));
    }

    #[test]
    fn valence_deviation_examples() {
        let b = calibrate_baseline(&[0.1]).unwrap();
        assert_eq!(valence_deviation(&[0.1, 0.1], &b, 10.0).unwrap(), 0.0);
        assert_abs_diff_eq!(valence_deviation(&[0.2, 0.4], &b, 10.0).unwrap(), 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(valence_deviation(&[-0.2], &b, 10.0).unwrap(), -3.0, epsilon = 1e-12);
        assert!(valence_deviation(&[], &b, 10.0).is_err());
    }

    #[test]
    fn speech_duration_examples() {
        let s = stats(20.0, 10.0);
        assert_eq!(normalized_speech_duration(20.0, &s, 5.0, 15.0).unwrap(), 0.0);
        assert_eq!(normalized_speech_duration(30.0, &s, 5.0, 15.0).unwrap(), 5.0);
        assert_eq!(normalized_speech_duration(200.0, &s, 5.0, 15.0).unwrap(), 15.0);
        assert_eq!(normalized_speech_duration(0.0, &stats(100.0, 1.0), 5.0, 15.0).unwrap(), -15.0);
        assert_eq!(
            normalized_speech_duration(-1.0, &s, 5.0, 15.0),
            Err(RewardError::NegativeDuration(-1.0))
        );
    }

    #[test]
    fn reward_sum() {
        assert_eq!(compute_reward(0.0, 0.0).unwrap().total, 0.0);
        assert_eq!(compute_reward(2.0, -3.0).unwrap().total, -1.0);
        assert!(compute_reward(f64::NAN, 0.0).is_err());
        assert!(compute_reward(0.0, f64::INFINITY).is_err());
    }

    #[test]
    fn stats_validation() {
        assert!(DurationStats::new(1.0, 0.0, StatsSource::ReferenceCorpus).is_err());
        let s = DurationStats::from_samples(&[1.0, 3.0], StatsSource::PerCoacheeRunning).unwrap();
        assert_eq!((s.mean_s, s.std_s), (2.0, 1.0));
        assert!(DurationStats::from_samples(&[2.0, 2.0], StatsSource::ReferenceCorpus).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(RewardConfig::default().validate().is_ok());
        let bad = RewardConfig { clip: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
