use serde::{Deserialize, Serialize};

use super::NeuralError;

/// Row-major matrix `(rows, cols)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor2 {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NeuralError> {
        if data.len() != rows * cols {
            return Err(NeuralError::Shape(format!(
                "tensor ({rows}, {cols}) needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NeuralError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(NeuralError::Shape("ragged rows".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self { rows: idx.len(), cols: self.cols, data }
    }
}

/// Batch of sequences `(batch, time, features)`, contiguous per sample then per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor3 {
    pub batch: usize,
    pub time: usize,
    pub features: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(batch: usize, time: usize, features: usize) -> Self {
        Self { batch, time, features, data: vec![0.0; batch * time * features] }
    }

    pub fn from_vec(batch: usize, time: usize, features: usize, data: Vec<f64>) -> Result<Self, NeuralError> {
        if data.len() != batch * time * features {
            return Err(NeuralError::Shape(format!(
                "tensor ({batch}, {time}, {features}) needs {} values, got {}",
                batch * time * features,
                data.len()
            )));
        }
        Ok(Self { batch, time, features, data })
    }

    fn offset(&self, b: usize, t: usize) -> usize {
        (b * self.time + t) * self.features
    }

    pub fn step(&self, b: usize, t: usize) -> &[f64] {
        let o = self.offset(b, t);
        &self.data[o..o + self.features]
    }

    pub fn step_mut(&mut self, b: usize, t: usize) -> &mut [f64] {
        let o = self.offset(b, t);
        &mut self.data[o..o + self.features]
    }

    pub fn sample(&self, b: usize) -> &[f64] {
        let n = self.time * self.features;
        &self.data[b * n..(b + 1) * n]
    }

    pub fn select_batch(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.time * self.features);
        for &i in idx {
            data.extend_from_slice(self.sample(i));
        }
        Self { batch: idx.len(), time: self.time, features: self.features, data }
    }

    /// Copy with the time axis reversed.
    pub fn reversed_time(&self) -> Self {
        let mut out = Self::zeros(self.batch, self.time, self.features);
        for b in 0..self.batch {
            for t in 0..self.time {
                out.step_mut(b, self.time - 1 - t).copy_from_slice(self.step(b, t));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Tensor {
    Mat(Tensor2),
    Seq(Tensor3),
}

impl Tensor {
    pub fn batch(&self) -> usize {
        match self {
            Tensor::Mat(m) => m.rows,
            Tensor::Seq(s) => s.batch,
        }
    }

    pub fn width(&self) -> usize {
        match self {
            Tensor::Mat(m) => m.cols,
            Tensor::Seq(s) => s.features,
        }
    }

    pub fn data(&self) -> &[f64] {
        match self {
            Tensor::Mat(m) => &m.data,
            Tensor::Seq(s) => &s.data,
        }
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        match self {
            Tensor::Mat(m) => Tensor::Mat(m.select_rows(idx)),
            Tensor::Seq(s) => Tensor::Seq(s.select_batch(idx)),
        }
    }

    pub fn into_mat(self) -> Result<Tensor2, NeuralError> {
        match self {
            Tensor::Mat(m) => Ok(m),
            Tensor::Seq(s) => Err(NeuralError::Shape(format!(
                "expected a matrix output, got sequence ({}, {}, {})",
                s.batch, s.time, s.features
            ))),
        }
    }

    pub fn into_seq(self) -> Result<Tensor3, NeuralError> {
        match self {
            Tensor::Seq(s) => Ok(s),
            Tensor::Mat(m) => Err(NeuralError::Shape(format!(
                "expected a sequence, got matrix ({}, {})",
                m.rows, m.cols
            ))),
        }
    }
}

impl From<Tensor2> for Tensor {
    fn from(m: Tensor2) -> Self {
        Tensor::Mat(m)
    }
}

impl From<Tensor3> for Tensor {
    fn from(s: Tensor3) -> Self {
        Tensor::Seq(s)
    }
}

/// `out[j] += sum_i x[i] * w[i * cols + j]`
#[inline]
pub(crate) fn accumulate_xw(x: &[f64], w: &[f64], cols: usize, out: &mut [f64]) {
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &w[i * cols..(i + 1) * cols];
        for (o, &wij) in out.iter_mut().zip(row) {
            *o += xi * wij;
        }
    }
}

/// `gw[i * cols + j] += x[i] * d[j]`
#[inline]
pub(crate) fn accumulate_outer(x: &[f64], d: &[f64], gw: &mut [f64]) {
    let cols = d.len();
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &mut gw[i * cols..(i + 1) * cols];
        for (g, &dj) in row.iter_mut().zip(d) {
            *g += xi * dj;
        }
    }
}

/// `dx[i] += sum_j d[j] * w[i * cols + j]`
#[inline]
pub(crate) fn accumulate_dwt(d: &[f64], w: &[f64], dx: &mut [f64]) {
    let cols = d.len();
    for (i, g) in dx.iter_mut().enumerate() {
        let row = &w[i * cols..(i + 1) * cols];
        *g += row.iter().zip(d).map(|(a, b)| a * b).sum::<f64>();
    }
}
