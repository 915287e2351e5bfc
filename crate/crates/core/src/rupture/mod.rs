//! Interaction-rupture detection from windowed facial and audio feature
//! streams: 1 Hz resampling, 10 s windows, NearMiss balancing, recurrent
//! classifiers with early or late fusion, and subject-independent repeated
//! cross-validation ranked by precision.

mod cv;
mod io;
mod model;
mod prep;
mod synth;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::neural::NeuralError;

pub use cv::{
    compute_metrics, fold_assignment, rank_by_precision, render_table, run_cv, CvConfig, CvReport, FoldMetrics,
    FoldRecord, MetricSummary,
};
pub use io::{read_labels_csv, read_streams_csv, write_labels_csv, write_streams_csv, LabelRow};
pub use model::{
    early_fusion_windows, fuse_max_confidence, late_fusion_predict, train_classifier, train_detector, Fusion,
    RuptureClassifier, RuptureModelKind, RuptureTrainConfig, TieBreak, TrainedRuptureDetector,
};
pub use prep::{nearmiss_undersample, znormalize, NormStats};
pub use synth::{synthetic_corpus, SyntheticCorpus, SynthConfig};

pub const FACIAL_WIDTH: usize = 35;
pub const AUDIO_WIDTH: usize = 25;
pub const WINDOW_S: usize = 10;
pub const OVERLAP_S: usize = 3;

#[derive(Debug, Error)]
pub enum RuptureError {
    #[error("invalid feature stream: {0}")]
    Stream(String),
    #[error("invalid dataset: {0}")]
    Dataset(String),
    #[error("windows are not aligned: {0}")]
    Misaligned(String),
    #[error("{0}")]
    Input(String),
    #[error("model error: {0}")]
    Model(#[from] NeuralError),
    #[error("csv error: {0}")]
    Csv(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modality {
    Facial,
    Audio,
}

impl Modality {
    pub fn width(self) -> usize {
        match self {
            Modality::Facial => FACIAL_WIDTH,
            Modality::Audio => AUDIO_WIDTH,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Facial => "facial",
            Modality::Audio => "audio",
        }
    }
}

/// Time-stamped feature vectors of one subject in one modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStream {
    pub modality: Modality,
    pub subject_id: String,
    pub timestamps: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl FeatureStream {
    pub fn new(
        modality: Modality,
        subject_id: impl Into<String>,
        timestamps: Vec<f64>,
        values: Vec<Vec<f64>>,
    ) -> Result<Self, RuptureError> {
        let s = Self { modality, subject_id: subject_id.into(), timestamps, values };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), RuptureError> {
        if self.timestamps.len() != self.values.len() {
            return Err(RuptureError::Stream(format!(
                "{} timestamps but {} vectors",
                self.timestamps.len(),
                self.values.len()
            )));
        }
        let w = self.modality.width();
        for (i, v) in self.values.iter().enumerate() {
            if v.len() != w {
                return Err(RuptureError::Stream(format!(
                    "{} vector {i} has width {}, expected {w}",
                    self.modality.name(),
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(RuptureError::Stream(format!("vector {i} has a non-finite value")));
            }
        }
        if self.timestamps.iter().any(|t| !t.is_finite()) {
            return Err(RuptureError::Stream("non-finite timestamp".into()));
        }
        if let Some(i) = self.timestamps.windows(2).position(|w| w[1] <= w[0]) {
            return Err(RuptureError::Stream(format!("timestamps not strictly increasing at index {}", i + 1)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }
}

/// A 10-step slice of a 1 Hz stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureWindow {
    pub subject_id: String,
    /// Whole second at which the window starts.
    pub start_s: i64,
    pub label: bool,
    pub matrix: Vec<Vec<f64>>,
}

impl FeatureWindow {
    pub fn width(&self) -> usize {
        self.matrix.first().map_or(0, Vec::len)
    }

    pub fn flattened(&self) -> Vec<f64> {
        self.matrix.concat()
    }
}

/// One vector per whole second, taken from the latest sample at or before it.
pub fn resample_1hz(stream: &FeatureStream) -> Result<FeatureStream, RuptureError> {
    stream.validate()?;
    let (Some(&first), Some(&last)) = (stream.timestamps.first(), stream.timestamps.last()) else {
        return Err(RuptureError::Stream("cannot resample an empty stream".into()));
    };
    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    let mut j = 0;
    let mut sec = first.ceil();
    while sec <= last.floor() {
        while j + 1 < stream.len() && stream.timestamps[j + 1] <= sec {
            j += 1;
        }
        timestamps.push(sec);
        values.push(stream.values[j].clone());
        sec += 1.0;
    }
    Ok(FeatureStream { modality: stream.modality, subject_id: stream.subject_id.clone(), timestamps, values })
}

/// Fixed-length windows over a 1 Hz stream, stride `window_s - overlap_s`.
/// Labels start out negative; see [`label_windows`].
pub fn make_windows(stream: &FeatureStream, window_s: usize, overlap_s: usize) -> Result<Vec<FeatureWindow>, RuptureError> {
    if window_s == 0 || overlap_s >= window_s {
        return Err(RuptureError::Input(format!(
            "window {window_s}s with overlap {overlap_s}s leaves no stride"
        )));
    }
    let stride = window_s - overlap_s;
    let n = stream.len();
    if n < window_s {
        tracing::warn!(subject = %stream.subject_id, len = n, "stream shorter than one window");
        return Ok(Vec::new());
    }
    Ok((0..=n - window_s)
        .step_by(stride)
        .map(|s| FeatureWindow {
            subject_id: stream.subject_id.clone(),
            start_s: stream.timestamps[s] as i64,
            label: false,
            matrix: stream.values[s..s + window_s].to_vec(),
        })
        .collect())
}

/// Applies `(subject, start second) -> label` rows; unlabeled windows are dropped.
pub fn label_windows(windows: Vec<FeatureWindow>, labels: &[LabelRow]) -> Vec<FeatureWindow> {
    let table: BTreeMap<(&str, i64), bool> =
        labels.iter().map(|l| ((l.subject_id.as_str(), l.t_start), l.label)).collect();
    let mut dropped = 0usize;
    let kept: Vec<_> = windows
        .into_iter()
        .filter_map(|mut w| match table.get(&(w.subject_id.as_str(), w.start_s)) {
            Some(&label) => {
                w.label = label;
                Some(w)
            }
            None => {
                dropped += 1;
                None
            }
        })
        .collect();
    if dropped > 0 {
        tracing::warn!(dropped, "windows without a label were dropped");
    }
    kept
}

/// Index-aligned facial and audio windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuptureDataset {
    pub facial: Vec<FeatureWindow>,
    pub audio: Vec<FeatureWindow>,
}

impl RuptureDataset {
    pub fn new(facial: Vec<FeatureWindow>, audio: Vec<FeatureWindow>) -> Result<Self, RuptureError> {
        let d = Self { facial, audio };
        d.validate()?;
        Ok(d)
    }

    /// Resamples, windows and labels both modalities, then aligns them on
    /// `(subject, start second)`.
    pub fn from_streams(
        facial: &[FeatureStream],
        audio: &[FeatureStream],
        labels: &[LabelRow],
    ) -> Result<Self, RuptureError> {
        let windows = |streams: &[FeatureStream], m: Modality| -> Result<Vec<FeatureWindow>, RuptureError> {
            let mut out = Vec::new();
            for s in streams {
                if s.modality != m {
                    return Err(RuptureError::Stream(format!("expected {} stream, got {}", m.name(), s.modality.name())));
                }
                out.extend(make_windows(&resample_1hz(s)?, WINDOW_S, OVERLAP_S)?);
            }
            Ok(label_windows(out, labels))
        };
        let f = windows(facial, Modality::Facial)?;
        let a = windows(audio, Modality::Audio)?;
        let audio_by_key: BTreeMap<(String, i64), FeatureWindow> =
            a.into_iter().map(|w| ((w.subject_id.clone(), w.start_s), w)).collect();
        let mut fac = Vec::new();
        let mut aud = Vec::new();
        for w in f {
            if let Some(aw) = audio_by_key.get(&(w.subject_id.clone(), w.start_s)) {
                aud.push(aw.clone());
                fac.push(w);
            }
        }
        Self::new(fac, aud)
    }

    pub fn validate(&self) -> Result<(), RuptureError> {
        if self.facial.len() != self.audio.len() {
            return Err(RuptureError::Misaligned(format!(
                "{} facial vs {} audio windows",
                self.facial.len(),
                self.audio.len()
            )));
        }
        for (i, (f, a)) in self.facial.iter().zip(&self.audio).enumerate() {
            if f.subject_id != a.subject_id || f.start_s != a.start_s || f.label != a.label {
                return Err(RuptureError::Misaligned(format!("window {i}")));
            }
            if f.matrix.len() != WINDOW_S || a.matrix.len() != WINDOW_S {
                return Err(RuptureError::Dataset(format!("window {i} does not have {WINDOW_S} steps")));
            }
            if f.matrix.iter().any(|r| r.len() != FACIAL_WIDTH) || a.matrix.iter().any(|r| r.len() != AUDIO_WIDTH) {
                return Err(RuptureError::Dataset(format!("window {i} has the wrong feature width")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.facial.len()
    }

    pub fn is_empty(&self) -> bool {
        self.facial.is_empty()
    }

    pub fn labels(&self) -> Vec<bool> {
        self.facial.iter().map(|w| w.label).collect()
    }

    /// `(no-IR, IR)` window counts.
    pub fn class_counts(&self) -> (usize, usize) {
        let ir = self.facial.iter().filter(|w| w.label).count();
        (self.len() - ir, ir)
    }

    pub fn subjects(&self) -> BTreeSet<String> {
        self.facial.iter().map(|w| w.subject_id.clone()).collect()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            facial: idx.iter().map(|&i| self.facial[i].clone()).collect(),
            audio: idx.iter().map(|&i| self.audio[i].clone()).collect(),
        }
    }

    /// NearMiss-1 balancing on the concatenated facial and audio windows.
    pub fn undersample(&self, k: usize) -> Result<Self, RuptureError> {
        let flat: Vec<Vec<f64>> =
            self.facial.iter().zip(&self.audio).map(|(f, a)| [f.flattened(), a.flattened()].concat()).collect();
        let keep = nearmiss_undersample(&flat, &self.labels(), k)?;
        Ok(self.select(&keep))
    }
}
