use super::tensor::Tensor2;
use super::NeuralError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

impl Reduction {
    fn factor(self, n: usize) -> f64 {
        match self {
            Reduction::Mean => 1.0 / n.max(1) as f64,
            Reduction::Sum => 1.0,
        }
    }
}

pub fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

pub fn softmax(logits: &Tensor2) -> Tensor2 {
    let mut out = Tensor2::zeros(logits.rows, logits.cols);
    for r in 0..logits.rows {
        out.row_mut(r).copy_from_slice(&softmax_row(logits.row(r)));
    }
    out
}

fn finite(loss: f64) -> Result<f64, NeuralError> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(NeuralError::NonFinite(format!("loss evaluated to {loss}")))
    }
}

/// Softmax cross-entropy over class logits; returns loss and d loss / d logits.
pub fn softmax_cross_entropy(
    logits: &Tensor2,
    labels: &[usize],
    reduction: Reduction,
) -> Result<(f64, Tensor2), NeuralError> {
    if labels.len() != logits.rows {
        return Err(NeuralError::Shape(format!(
            "{} labels for {} logit rows",
            labels.len(),
            logits.rows
        )));
    }
    let k = reduction.factor(logits.rows);
    let mut grad = Tensor2::zeros(logits.rows, logits.cols);
    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        if y >= logits.cols {
            return Err(NeuralError::Shape(format!("label {y} out of range for {} classes", logits.cols)));
        }
        let p = softmax_row(logits.row(r));
        loss -= p[y].max(1e-300).ln();
        let g = grad.row_mut(r);
        for (c, (gc, pc)) in g.iter_mut().zip(&p).enumerate() {
            *gc = k * (pc - if c == y { 1.0 } else { 0.0 });
        }
    }
    Ok((finite(loss * k)?, grad))
}

/// Squared error over all entries.
pub fn mean_squared(pred: &Tensor2, target: &Tensor2, reduction: Reduction) -> Result<(f64, Tensor2), NeuralError> {
    if pred.rows != target.rows || pred.cols != target.cols {
        return Err(NeuralError::Shape(format!(
            "prediction ({}, {}) vs target ({}, {})",
            pred.rows, pred.cols, target.rows, target.cols
        )));
    }
    let k = reduction.factor(pred.rows);
    let mut grad = Tensor2::zeros(pred.rows, pred.cols);
    let mut loss = 0.0;
    for ((g, &p), &t) in grad.data.iter_mut().zip(&pred.data).zip(&target.data) {
        let d = p - t;
        loss += d * d;
        *g = 2.0 * k * d;
    }
    Ok((finite(loss * k)?, grad))
}

/// Squared TD error on one selected output per row (the action taken).
pub fn selected_squared(
    pred: &Tensor2,
    targets: &[(usize, f64)],
    reduction: Reduction,
) -> Result<(f64, Tensor2), NeuralError> {
    if targets.len() != pred.rows {
        return Err(NeuralError::Shape(format!("{} targets for {} rows", targets.len(), pred.rows)));
    }
    let k = reduction.factor(pred.rows);
    let mut grad = Tensor2::zeros(pred.rows, pred.cols);
    let mut loss = 0.0;
    for (r, &(col, y)) in targets.iter().enumerate() {
        if col >= pred.cols {
            return Err(NeuralError::Shape(format!("target column {col} out of range")));
        }
        let d = pred.get(r, col) - y;
        loss += d * d;
        grad.row_mut(r)[col] = 2.0 * k * d;
    }
    Ok((finite(loss * k)?, grad))
}
