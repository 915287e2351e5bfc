use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::fit_predict;
use super::{Fusion, RuptureDataset, RuptureError, RuptureModelKind, RuptureTrainConfig, TieBreak};

/// Binary metrics with IR as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// No positive predictions: precision reported as 0.
    pub precision_undefined: bool,
    /// No positive labels: recall reported as 0.
    pub recall_undefined: bool,
}

pub fn compute_metrics(predictions: &[bool], labels: &[bool]) -> Result<FoldMetrics, RuptureError> {
    if predictions.len() != labels.len() {
        return Err(RuptureError::Input(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(RuptureError::Input("metrics need at least one sample".into()));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    Ok(FoldMetrics {
        accuracy: ratio(tp + tn, labels.len()),
        precision,
        recall,
        f1,
        precision_undefined: tp + fp == 0,
        recall_undefined: tp + fn_ == 0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvConfig {
    pub folds: usize,
    pub repeats: usize,
    pub seed: u64,
    pub train: RuptureTrainConfig,
    pub tie: TieBreak,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self { folds: 5, repeats: 10, seed: 17, train: RuptureTrainConfig::default(), tie: TieBreak::Audio }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub repeat: usize,
    pub fold: usize,
    pub train_subjects: Vec<String>,
    pub test_subjects: Vec<String>,
    pub n_train: usize,
    pub n_test: usize,
    pub metrics: FoldMetrics,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub accuracy: MeanStd,
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub f1: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub model: RuptureModelKind,
    pub fusion: Fusion,
    pub folds: Vec<FoldRecord>,
    pub summary: MetricSummary,
}

/// Test-subject sets for every `(repeat, fold)`. IR-positive subjects and
/// IR-free subjects are shuffled separately and dealt round-robin so each
/// fold receives a proportional share of both.
pub fn fold_assignment(
    dataset: &RuptureDataset,
    folds: usize,
    repeats: usize,
    seed: u64,
) -> Result<Vec<Vec<BTreeSet<String>>>, RuptureError> {
    let subjects = dataset.subjects();
    if folds < 2 || repeats == 0 {
        return Err(RuptureError::Input(format!("need >= 2 folds and >= 1 repeat, got {folds} x {repeats}")));
    }
    if subjects.len() < folds {
        return Err(RuptureError::Dataset(format!(
            "{} subjects cannot fill {folds} subject-independent folds",
            subjects.len()
        )));
    }
    let positive: BTreeSet<String> = dataset.facial.iter().filter(|w| w.label).map(|w| w.subject_id.clone()).collect();
    let mut pos: Vec<String> = positive.iter().cloned().collect();
    let mut neg: Vec<String> = subjects.difference(&positive).cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        pos.shuffle(&mut rng);
        neg.shuffle(&mut rng);
        let mut assign = vec![BTreeSet::new(); folds];
        for (i, s) in pos.iter().chain(&neg).enumerate() {
            assign[i % folds].insert(s.clone());
        }
        out.push(assign);
    }
    Ok(out)
}

/// Repeated stratified subject-independent cross-validation of one
/// model/fusion configuration; folds run in parallel.
pub fn run_cv(
    dataset: &RuptureDataset,
    model: RuptureModelKind,
    fusion: Fusion,
    config: &CvConfig,
) -> Result<CvReport, RuptureError> {
    dataset.validate()?;
    let assignment = fold_assignment(dataset, config.folds, config.repeats, config.seed)?;
    let all = dataset.subjects();
    let jobs: Vec<(usize, usize, &BTreeSet<String>)> = assignment
        .iter()
        .enumerate()
        .flat_map(|(r, folds)| folds.iter().enumerate().map(move |(f, test)| (r, f, test)))
        .collect();
    let folds = jobs
        .par_iter()
        .map(|&(repeat, fold, test)| {
            let (test_idx, train_idx): (Vec<usize>, Vec<usize>) =
                (0..dataset.len()).partition(|&i| test.contains(&dataset.facial[i].subject_id));
            let train_set = dataset.select(&train_idx);
            let test_set = dataset.select(&test_idx);
            let train_cfg = RuptureTrainConfig {
                seed: config.train.seed.wrapping_add((repeat * config.folds + fold) as u64),
                ..config.train.clone()
            };
            let preds = fit_predict(&train_set, &test_set, model, fusion, &train_cfg, config.tie)?;
            let metrics = compute_metrics(&preds, &test_set.labels())?;
            Ok(FoldRecord {
                repeat,
                fold,
                train_subjects: all.difference(test).cloned().collect(),
                test_subjects: test.iter().cloned().collect(),
                n_train: train_idx.len(),
                n_test: test_idx.len(),
                metrics,
            })
        })
        .collect::<Result<Vec<_>, RuptureError>>()?;
    let pick = |f: fn(&FoldMetrics) -> f64| MeanStd::of(&folds.iter().map(|r| f(&r.metrics)).collect::<Vec<_>>());
    let summary = MetricSummary {
        accuracy: pick(|m| m.accuracy),
        precision: pick(|m| m.precision),
        recall: pick(|m| m.recall),
        f1: pick(|m| m.f1),
    };
    Ok(CvReport { model, fusion, folds, summary })
}

/// Indices of `reports`, best mean precision first; F1 then input order
/// break ties.
pub fn rank_by_precision(reports: &[CvReport]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..reports.len()).collect();
    idx.sort_by(|&a, &b| {
        let (ra, rb) = (&reports[a].summary, &reports[b].summary);
        rb.precision
            .mean
            .total_cmp(&ra.precision.mean)
            .then(rb.f1.mean.total_cmp(&ra.f1.mean))
            .then(a.cmp(&b))
    });
    idx
}

/// Plain-text results table, one row per configuration in ranking order.
pub fn render_table(reports: &[CvReport]) -> String {
    let cell = |m: MeanStd| format!("{:.2} ± {:.2}", m.mean, m.std);
    let mut out = String::new();
    let _ = writeln!(out, "{:<8} {:<8} {:>13} {:>13} {:>13} {:>13}", "Model", "Fusion", "Accuracy", "Precision", "Recall", "F1");
    for i in rank_by_precision(reports) {
        let r = &reports[i];
        let s = &r.summary;
        let _ = writeln!(
            out,
            "{:<8} {:<8} {:>13} {:>13} {:>13} {:>13}",
            r.model.name(),
            r.fusion.name(),
            cell(s.accuracy),
            cell(s.precision),
            cell(s.recall),
            cell(s.f1)
        );
    }
    out
}
