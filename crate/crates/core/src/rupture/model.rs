use serde::{Deserialize, Serialize};

use super::prep::NormStats;
use super::{FeatureWindow, Modality, RuptureDataset, RuptureError, AUDIO_WIDTH, FACIAL_WIDTH, WINDOW_S};
use crate::dialogue::{RuptureDetector, TurnFeatures};
use crate::neural::{
    argmax, predict_proba, train, Activation, Dataset, LayerSpec, LossKind, Network, NetworkSpec, Targets, Tensor,
    Tensor3, TrainConfig,
};

type Matrix = Vec<Vec<f64>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuptureModelKind {
    Lstm,
    Gru,
    #[serde(alias = "bi-lstm")]
    Bilstm,
}

impl RuptureModelKind {
    pub const ALL: [RuptureModelKind; 3] = [RuptureModelKind::Lstm, RuptureModelKind::Gru, RuptureModelKind::Bilstm];

    pub fn name(self) -> &'static str {
        match self {
            RuptureModelKind::Lstm => "LSTM",
            RuptureModelKind::Gru => "GRU",
            RuptureModelKind::Bilstm => "Bi-LSTM",
        }
    }

    fn spec(self, input: usize, hidden: usize, seed: u64) -> NetworkSpec {
        let (rnn, pooled) = match self {
            RuptureModelKind::Lstm => (LayerSpec::Lstm { input, hidden }, hidden),
            RuptureModelKind::Gru => (LayerSpec::Gru { input, hidden }, hidden),
            RuptureModelKind::Bilstm => (LayerSpec::Bidirectional { input, hidden }, 2 * hidden),
        };
        NetworkSpec::new(
            vec![rnn, LayerSpec::LastStep, LayerSpec::Dense { input: pooled, output: 2, activation: Activation::Identity }],
            LossKind::SoftmaxCrossEntropy,
            seed,
        )
    }
}

impl std::str::FromStr for RuptureModelKind {
    type Err = RuptureError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "lstm" => Ok(Self::Lstm),
            "gru" => Ok(Self::Gru),
            "bilstm" => Ok(Self::Bilstm),
            other => Err(RuptureError::Input(format!("unknown model `{other}` (lstm, gru, bilstm)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    Facial,
    Audio,
    Early,
    Late,
}

impl Fusion {
    pub const ALL: [Fusion; 4] = [Fusion::Facial, Fusion::Audio, Fusion::Early, Fusion::Late];

    pub fn name(self) -> &'static str {
        match self {
            Fusion::Facial => "facial",
            Fusion::Audio => "audio",
            Fusion::Early => "early",
            Fusion::Late => "late",
        }
    }
}

impl std::str::FromStr for Fusion {
    type Err = RuptureError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "facial" => Ok(Self::Facial),
            "audio" => Ok(Self::Audio),
            "early" => Ok(Self::Early),
            "late" => Ok(Self::Late),
            other => Err(RuptureError::Input(format!("unknown fusion `{other}` (facial, audio, early, late)"))),
        }
    }
}

/// Which uni-modal model decides when both are equally confident.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TieBreak {
    #[default]
    Audio,
    Facial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RuptureTrainConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for RuptureTrainConfig {
    fn default() -> Self {
        Self { hidden: 8, epochs: 30, learning_rate: 0.01, batch_size: 16, seed: 1 }
    }
}

/// A recurrent window classifier bundled with its input normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ClassifierParts", into = "ClassifierParts")]
pub struct RuptureClassifier {
    pub kind: RuptureModelKind,
    pub norm: NormStats,
    network: Network,
}

#[derive(Serialize, Deserialize)]
struct ClassifierParts {
    kind: RuptureModelKind,
    norm: NormStats,
    spec: NetworkSpec,
    params: Vec<f64>,
}

impl From<RuptureClassifier> for ClassifierParts {
    fn from(c: RuptureClassifier) -> Self {
        Self { kind: c.kind, norm: c.norm, spec: c.network.spec().clone(), params: c.network.params().to_vec() }
    }
}

impl TryFrom<ClassifierParts> for RuptureClassifier {
    type Error = String;

    fn try_from(p: ClassifierParts) -> Result<Self, String> {
        let network = Network::from_params(p.spec, p.params).map_err(|e| e.to_string())?;
        Ok(Self { kind: p.kind, norm: p.norm, network })
    }
}

fn to_tensor(windows: &[Matrix], norm: &NormStats) -> Result<Tensor, RuptureError> {
    let width = norm.width();
    let mut data = Vec::with_capacity(windows.len() * WINDOW_S * width);
    for w in windows {
        if w.len() != WINDOW_S {
            return Err(RuptureError::Input(format!("window has {} steps, expected {WINDOW_S}", w.len())));
        }
        for row in w {
            if row.len() != width {
                return Err(RuptureError::Input(format!("row width {} != {width}", row.len())));
            }
            data.extend(norm.apply_row(row));
        }
    }
    Ok(Tensor::Seq(Tensor3::from_vec(windows.len(), WINDOW_S, width, data)?))
}

impl RuptureClassifier {
    pub fn input_width(&self) -> usize {
        self.norm.width()
    }

    /// `[P(no IR), P(IR)]` per window.
    pub fn predict_proba(&self, windows: &[Matrix]) -> Result<Vec<[f64; 2]>, RuptureError> {
        if windows.is_empty() {
            return Ok(Vec::new());
        }
        let p = predict_proba(&self.network, &to_tensor(windows, &self.norm)?)?;
        Ok((0..p.rows).map(|r| [p.get(r, 0), p.get(r, 1)]).collect())
    }

    pub fn predict(&self, windows: &[Matrix]) -> Result<Vec<bool>, RuptureError> {
        Ok(self.predict_proba(windows)?.iter().map(|p| argmax(p) == 1).collect())
    }
}

/// Fits normalization on `windows`, then trains the classifier on the
/// standardized windows.
pub fn train_classifier(
    kind: RuptureModelKind,
    windows: &[Matrix],
    labels: &[bool],
    config: &RuptureTrainConfig,
) -> Result<RuptureClassifier, RuptureError> {
    if windows.len() != labels.len() || windows.is_empty() {
        return Err(RuptureError::Input(format!("{} windows with {} labels", windows.len(), labels.len())));
    }
    let norm = NormStats::fit(windows)?;
    let x = to_tensor(windows, &norm)?;
    let y = Targets::Classes(labels.iter().map(|&l| usize::from(l)).collect());
    let train_cfg = TrainConfig {
        learning_rate: config.learning_rate,
        batch_size: config.batch_size,
        epochs: config.epochs,
        ..TrainConfig::default()
    };
    let spec = kind.spec(norm.width(), config.hidden, config.seed);
    let outcome = train(spec, &Dataset::new(x, y)?, &train_cfg)?;
    Ok(RuptureClassifier { kind, norm, network: outcome.network })
}

/// Per-step concatenation, facial block first.
pub fn early_fusion_windows(facial: &FeatureWindow, audio: &FeatureWindow) -> Result<FeatureWindow, RuptureError> {
    check_aligned(facial, audio)?;
    Ok(FeatureWindow {
        subject_id: facial.subject_id.clone(),
        start_s: facial.start_s,
        label: facial.label,
        matrix: facial.matrix.iter().zip(&audio.matrix).map(|(f, a)| [f.as_slice(), a.as_slice()].concat()).collect(),
    })
}

fn check_aligned(facial: &FeatureWindow, audio: &FeatureWindow) -> Result<(), RuptureError> {
    if facial.subject_id != audio.subject_id || facial.start_s != audio.start_s {
        return Err(RuptureError::Misaligned(format!(
            "facial ({}, {}) vs audio ({}, {})",
            facial.subject_id, facial.start_s, audio.subject_id, audio.start_s
        )));
    }
    if facial.matrix.len() != audio.matrix.len() {
        return Err(RuptureError::Misaligned(format!(
            "{} facial steps vs {} audio steps",
            facial.matrix.len(),
            audio.matrix.len()
        )));
    }
    Ok(())
}

/// The prediction of whichever model is more confident in its own class.
/// Returns `(is_rupture, confidence)`.
pub fn fuse_max_confidence(facial: [f64; 2], audio: [f64; 2], tie: TieBreak) -> (bool, f64) {
    let cf = facial[0].max(facial[1]);
    let ca = audio[0].max(audio[1]);
    let pick = if cf > ca {
        facial
    } else if ca > cf {
        audio
    } else {
        match tie {
            TieBreak::Audio => audio,
            TieBreak::Facial => facial,
        }
    };
    (argmax(&pick) == 1, pick[0].max(pick[1]))
}

pub fn late_fusion_predict(
    facial_model: &RuptureClassifier,
    audio_model: &RuptureClassifier,
    facial_window: &FeatureWindow,
    audio_window: &FeatureWindow,
    tie: TieBreak,
) -> Result<(bool, f64), RuptureError> {
    check_aligned(facial_window, audio_window)?;
    let pf = facial_model.predict_proba(std::slice::from_ref(&facial_window.matrix))?[0];
    let pa = audio_model.predict_proba(std::slice::from_ref(&audio_window.matrix))?[0];
    Ok(fuse_max_confidence(pf, pa, tie))
}

pub(crate) fn modality_matrices(d: &RuptureDataset, m: Modality) -> Vec<Matrix> {
    let windows = match m {
        Modality::Facial => &d.facial,
        Modality::Audio => &d.audio,
    };
    windows.iter().map(|w| w.matrix.clone()).collect()
}

pub(crate) fn early_matrices(d: &RuptureDataset) -> Result<Vec<Matrix>, RuptureError> {
    d.facial.iter().zip(&d.audio).map(|(f, a)| early_fusion_windows(f, a).map(|w| w.matrix)).collect()
}

/// Trains the models a fusion strategy needs and predicts on `test`.
pub(crate) fn fit_predict(
    train_set: &RuptureDataset,
    test_set: &RuptureDataset,
    kind: RuptureModelKind,
    fusion: Fusion,
    config: &RuptureTrainConfig,
    tie: TieBreak,
) -> Result<Vec<bool>, RuptureError> {
    let labels = train_set.labels();
    match fusion {
        Fusion::Facial | Fusion::Audio => {
            let m = if fusion == Fusion::Facial { Modality::Facial } else { Modality::Audio };
            let model = train_classifier(kind, &modality_matrices(train_set, m), &labels, config)?;
            model.predict(&modality_matrices(test_set, m))
        }
        Fusion::Early => {
            let model = train_classifier(kind, &early_matrices(train_set)?, &labels, config)?;
            model.predict(&early_matrices(test_set)?)
        }
        Fusion::Late => {
            let fm = train_classifier(kind, &modality_matrices(train_set, Modality::Facial), &labels, config)?;
            let am = train_classifier(kind, &modality_matrices(train_set, Modality::Audio), &labels, config)?;
            let pf = fm.predict_proba(&modality_matrices(test_set, Modality::Facial))?;
            let pa = am.predict_proba(&modality_matrices(test_set, Modality::Audio))?;
            Ok(pf.into_iter().zip(pa).map(|(f, a)| fuse_max_confidence(f, a, tie).0).collect())
        }
    }
}

/// Deployable detector: one fusion strategy trained on a whole dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedRuptureDetector {
    pub fusion: Fusion,
    pub tie: TieBreak,
    pub facial: Option<RuptureClassifier>,
    pub audio: Option<RuptureClassifier>,
    pub early: Option<RuptureClassifier>,
}

pub fn train_detector(
    dataset: &RuptureDataset,
    kind: RuptureModelKind,
    fusion: Fusion,
    config: &RuptureTrainConfig,
    tie: TieBreak,
) -> Result<TrainedRuptureDetector, RuptureError> {
    dataset.validate()?;
    let labels = dataset.labels();
    let uni = |m: Modality| train_classifier(kind, &modality_matrices(dataset, m), &labels, config);
    let mut det = TrainedRuptureDetector { fusion, tie, facial: None, audio: None, early: None };
    match fusion {
        Fusion::Facial => det.facial = Some(uni(Modality::Facial)?),
        Fusion::Audio => det.audio = Some(uni(Modality::Audio)?),
        Fusion::Early => det.early = Some(train_classifier(kind, &early_matrices(dataset)?, &labels, config)?),
        Fusion::Late => {
            det.facial = Some(uni(Modality::Facial)?);
            det.audio = Some(uni(Modality::Audio)?);
        }
    }
    Ok(det)
}

fn check_turn_features(f: &TurnFeatures) -> Result<(), String> {
    for (name, rows, width) in [("facial", &f.facial, FACIAL_WIDTH), ("audio", &f.audio, AUDIO_WIDTH)] {
        if rows.len() != WINDOW_S || rows.iter().any(|r| r.len() != width) {
            return Err(format!("{name} features must be {WINDOW_S} x {width}"));
        }
    }
    Ok(())
}

impl TrainedRuptureDetector {
    fn single(model: &Option<RuptureClassifier>, window: Matrix) -> Result<[f64; 2], String> {
        let m = model.as_ref().ok_or("detector is missing a model")?;
        m.predict_proba(&[window]).map(|p| p[0]).map_err(|e| e.to_string())
    }
}

impl RuptureDetector for TrainedRuptureDetector {
    fn ir_probability(&self, features: &TurnFeatures) -> Result<f64, String> {
        check_turn_features(features)?;
        let p = match self.fusion {
            Fusion::Facial => Self::single(&self.facial, features.facial.clone())?,
            Fusion::Audio => Self::single(&self.audio, features.audio.clone())?,
            Fusion::Early => {
                let fused = features.facial.iter().zip(&features.audio).map(|(f, a)| [f.as_slice(), a.as_slice()].concat());
                Self::single(&self.early, fused.collect())?
            }
            Fusion::Late => {
                let pf = Self::single(&self.facial, features.facial.clone())?;
                let pa = Self::single(&self.audio, features.audio.clone())?;
                let (is_ir, conf) = fuse_max_confidence(pf, pa, self.tie);
                return Ok(if is_ir { conf } else { 1.0 - conf });
            }
        };
        Ok(p[1])
    }
}
