use serde::{Deserialize, Serialize};

use super::RuptureError;

type Matrix = Vec<Vec<f64>>;

const MIN_STD: f64 = 1e-12;

/// Per-feature statistics fitted on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Constant features; they normalize to zero.
    pub dropped: Vec<usize>,
}

impl NormStats {
    /// Fits over every time step of every training window.
    pub fn fit(train: &[Matrix]) -> Result<Self, RuptureError> {
        let width = train
            .iter()
            .flat_map(|m| m.first())
            .map(Vec::len)
            .next()
            .ok_or_else(|| RuptureError::Input("cannot fit normalization on an empty training set".into()))?;
        let mut sum = vec![0.0; width];
        let mut n = 0usize;
        for row in train.iter().flatten() {
            if row.len() != width {
                return Err(RuptureError::Input(format!("row width {} != {width}", row.len())));
            }
            sum.iter_mut().zip(row).for_each(|(s, x)| *s += x);
            n += 1;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let mut var = vec![0.0; width];
        for row in train.iter().flatten() {
            for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
                *v += (x - m).powi(2);
            }
        }
        let std: Vec<f64> = var.iter().map(|v| (v / n as f64).sqrt()).collect();
        let dropped: Vec<usize> = (0..width).filter(|&j| std[j] < MIN_STD).collect();
        if !dropped.is_empty() {
            tracing::warn!(?dropped, "constant features normalized to zero");
        }
        Ok(Self { mean, std, dropped })
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    pub fn apply_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(x, (m, s))| if *s < MIN_STD { 0.0 } else { (x - m) / s })
            .collect()
    }

    pub fn apply(&self, m: &Matrix) -> Matrix {
        m.iter().map(|r| self.apply_row(r)).collect()
    }
}

/// Standardizes both splits with statistics from the training split.
pub fn znormalize(train: &[Matrix], test: &[Matrix]) -> Result<(Vec<Matrix>, Vec<Matrix>, NormStats), RuptureError> {
    let stats = NormStats::fit(train)?;
    if let Some(bad) = test.iter().flatten().find(|r| r.len() != stats.width()) {
        return Err(RuptureError::Input(format!("test row width {} != {}", bad.len(), stats.width())));
    }
    let tr = train.iter().map(|m| stats.apply(m)).collect();
    let te = test.iter().map(|m| stats.apply(m)).collect();
    Ok((tr, te, stats))
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// NearMiss-1: keeps the majority samples whose mean distance to their `k`
/// nearest minority samples is smallest, down to the minority count.
/// Returns the kept indices in ascending order.
pub fn nearmiss_undersample(samples: &[Vec<f64>], labels: &[bool], k: usize) -> Result<Vec<usize>, RuptureError> {
    if samples.len() != labels.len() {
        return Err(RuptureError::Input(format!("{} samples but {} labels", samples.len(), labels.len())));
    }
    if k == 0 {
        return Err(RuptureError::Input("k must be >= 1".into()));
    }
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(RuptureError::Input("undersampling needs both classes".into()));
    }
    let (minority, majority) = if pos.len() <= neg.len() { (pos, neg) } else { (neg, pos) };
    if minority.len() == majority.len() {
        return Ok((0..labels.len()).collect());
    }
    let k = k.min(minority.len());
    let mut scored: Vec<(f64, usize)> = majority
        .iter()
        .map(|&i| {
            let mut d: Vec<f64> = minority.iter().map(|&j| distance(&samples[i], &samples[j])).collect();
            d.sort_by(f64::total_cmp);
            (d[..k].iter().sum::<f64>() / k as f64, i)
        })
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut keep: Vec<usize> = minority;
    keep.extend(scored.iter().take(keep.len()).map(|&(_, i)| i));
    keep.sort_unstable();
    Ok(keep)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn self_normalization() {
        let train = vec![vec![vec![1.0, 5.0], vec![3.0, 5.0]], vec![vec![2.0, 5.0], vec![6.0, 5.0]]];
        let (tr, _, stats) = znormalize(&train, &train).unwrap();
        let col: Vec<f64> = tr.iter().flatten().map(|r| r[0]).collect();
        let m = col.iter().sum::<f64>() / 4.0;
        let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 4.0;
        assert!(m.abs() < 1e-9 && (v.sqrt() - 1.0).abs() < 1e-9);
        assert!(tr.iter().flatten().all(|r| r[1] == 0.0));
        assert_eq!(stats.dropped, [1]);
    }

    #[test]
    fn planted_nearmiss() {
        // majority points 0 and 2 sit on the minority points
        let samples = vec![
            vec![0.0, 0.0],
            vec![10.0, 10.0],
            vec![5.0, 5.0],
            vec![-9.0, 3.0],
            vec![0.0, 0.0],
            vec![5.0, 5.0],
        ];
        let labels = [false, false, false, false, true, true];
        assert_eq!(nearmiss_undersample(&samples, &labels, 3).unwrap(), [0, 2, 4, 5]);
        assert!(nearmiss_undersample(&samples, &[false; 6], 3).is_err());
        let balanced = [true, false, true, false, true, false];
        assert_eq!(nearmiss_undersample(&samples, &balanced, 3).unwrap(), [0, 1, 2, 3, 4, 5]);
    }
}
