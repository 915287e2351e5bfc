use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{FeatureStream, LabelRow, Modality, RuptureDataset, RuptureError, OVERLAP_S, WINDOW_S};

/// Generator for feature streams with planted rupture episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub subjects: usize,
    pub min_duration_s: usize,
    pub max_duration_s: usize,
    /// Share of subjects that have any rupture at all.
    pub ir_subject_fraction: f64,
    /// Per-window rupture probability for those subjects.
    pub ir_window_rate: f64,
    /// Mean shift (in noise units) of the affected audio features during a rupture.
    pub audio_shift: f64,
    pub facial_shift: f64,
    /// Number of leading features that carry the shift.
    pub shifted_features: usize,
    /// Spread of per-subject feature offsets.
    pub subject_spread: f64,
    pub sample_hz: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            subjects: 20,
            min_duration_s: 60,
            max_duration_s: 110,
            ir_subject_fraction: 0.7,
            ir_window_rate: 0.3,
            audio_shift: 2.5,
            facial_shift: 0.3,
            shifted_features: 8,
            subject_spread: 0.3,
            sample_hz: 2.0,
            seed: 23,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpus {
    pub facial: Vec<FeatureStream>,
    pub audio: Vec<FeatureStream>,
    pub labels: Vec<LabelRow>,
}

impl SyntheticCorpus {
    pub fn dataset(&self) -> Result<RuptureDataset, RuptureError> {
        RuptureDataset::from_streams(&self.facial, &self.audio, &self.labels)
    }
}

fn stream(
    rng: &mut ChaCha8Rng,
    modality: Modality,
    subject: &str,
    timestamps: &[f64],
    episode: &BTreeSet<i64>,
    shift: f64,
    cfg: &SynthConfig,
) -> Result<FeatureStream, RuptureError> {
    let w = modality.width();
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let offsets: Vec<f64> = (0..w).map(|_| cfg.subject_spread * unit.sample(rng)).collect();
    let mut state: Vec<f64> = (0..w).map(|_| unit.sample(rng)).collect();
    let rho: f64 = 0.5;
    let innovation = (1.0 - rho * rho).sqrt();
    let values = timestamps
        .iter()
        .map(|&t| {
            let active = episode.contains(&(t.floor() as i64));
            (0..w)
                .map(|j| {
                    state[j] = rho * state[j] + innovation * unit.sample(rng);
                    let planted = if active && j < cfg.shifted_features { shift } else { 0.0 };
                    offsets[j] + state[j] + planted
                })
                .collect()
        })
        .collect();
    FeatureStream::new(modality, subject, timestamps.to_vec(), values)
}

/// Streams whose rupture windows carry a mean shift in the leading features;
/// the shifted seconds of window `i` are `[7i + 3, 7i + 7)`, which no other
/// window covers.
pub fn synthetic_corpus(cfg: &SynthConfig) -> Result<SyntheticCorpus, RuptureError> {
    if cfg.min_duration_s < WINDOW_S || cfg.max_duration_s < cfg.min_duration_s || cfg.sample_hz < 1.0 {
        return Err(RuptureError::Input("synthetic durations must allow at least one window at >= 1 Hz".into()));
    }
    let stride = WINDOW_S - OVERLAP_S;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut corpus = SyntheticCorpus { facial: Vec::new(), audio: Vec::new(), labels: Vec::new() };
    for s in 0..cfg.subjects {
        let subject = format!("subject-{s:02}");
        let duration = rng.random_range(cfg.min_duration_s..=cfg.max_duration_s);
        let dt = 1.0 / cfg.sample_hz;
        let n = (duration as f64 * cfg.sample_hz) as usize + 1;
        let timestamps: Vec<f64> =
            (0..n).map(|k| if k == 0 { 0.0 } else { k as f64 * dt + rng.random_range(0.0..0.1 * dt) }).collect();
        let seconds = timestamps.last().expect("non-empty").floor() as usize + 1;
        let windows = (seconds - WINDOW_S) / stride + 1;
        let has_ir = rng.random_bool(cfg.ir_subject_fraction.clamp(0.0, 1.0));
        let mut episode = BTreeSet::new();
        for i in 0..windows {
            let start = (i * stride) as i64;
            let ir = has_ir && rng.random_bool(cfg.ir_window_rate.clamp(0.0, 1.0));
            if ir {
                episode.extend(start + OVERLAP_S as i64..start + stride as i64);
            }
            corpus.labels.push(LabelRow { subject_id: subject.clone(), t_start: start, label: ir });
        }
        corpus.facial.push(stream(&mut rng, Modality::Facial, &subject, &timestamps, &episode, cfg.facial_shift, cfg)?);
        corpus.audio.push(stream(&mut rng, Modality::Audio, &subject, &timestamps, &episode, cfg.audio_shift, cfg)?);
    }
    Ok(corpus)
}
