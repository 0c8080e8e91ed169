//! Dense `f32` batches in (batch, channels, height, width) order.
//!
//! Post-pooling features and logits use the same container with a 1x1 spatial
//! extent, so every activation batch in the crate is a `Tensor`.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: [usize; 4], value: f32) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f32>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::shape(shape, data.len()));
        }
        Ok(Tensor { shape, data })
    }

    /// Rows of a (batch, features) matrix stored with a 1x1 spatial extent.
    pub fn from_rows(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Self::from_vec([rows, cols, 1, 1], data)
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.shape[2]
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.shape[3]
    }

    /// Number of spatial positions per channel.
    #[inline]
    pub fn plane(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    /// Elements per sample.
    #[inline]
    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    pub fn sample(&self, n: usize) -> &[f32] {
        let len = self.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [f32] {
        let len = self.sample_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    /// Row `n` of a (batch, features) view.
    pub fn row(&self, n: usize) -> &[f32] {
        self.sample(n)
    }

    /// Gathers the listed samples into a new batch.
    pub fn select(&self, indices: &[usize]) -> Tensor {
        let len = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        Tensor {
            shape: [indices.len(), self.shape[1], self.shape[2], self.shape[3]],
            data,
        }
    }

    /// Concatenates batches along the sample axis.
    pub fn concat(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::config("concat of zero tensors"))?;
        let [_, c, h, w] = first.shape;
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.shape[1..] != [c, h, w] {
                return Err(Error::shape(first.shape, p.shape));
            }
            n += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor { shape: [n, c, h, w], data })
    }

    pub fn reshape(self, shape: [usize; 4]) -> Result<Tensor> {
        Tensor::from_vec(shape, self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Frobenius norm accumulated in `f64`.
    pub fn norm(&self) -> f64 {
        libm::sqrt(self.data.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| libm::fabsf(a - b))
            .fold(0.0, f32::max)
    }

    pub fn scale(&mut self, s: f32) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    /// `self += s * other`
    pub fn add_scaled(&mut self, other: &Tensor, s: f32) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn map_inplace(&mut self, f: impl Fn(f32) -> f32) {
        self.data.iter_mut().for_each(|v| *v = f(*v));
    }

    /// Index of the largest entry per sample (lowest index wins ties).
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.batch())
            .map(|n| {
                let row = self.sample(n);
                let mut best = 0;
                for (k, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }
}

impl Index<[usize; 4]> for Tensor {
    type Output = f32;

    fn index(&self, [n, c, y, x]: [usize; 4]) -> &f32 {
        &self.data[self.offset(n, c, y, x)]
    }
}

impl IndexMut<[usize; 4]> for Tensor {
    fn index_mut(&mut self, [n, c, y, x]: [usize; 4]) -> &mut f32 {
        let o = self.offset(n, c, y, x);
        &mut self.data[o]
    }
}

/// Channel-major matrix view: rows = channels, columns = (sample, position).
///
/// Convolutions and stitch layers multiply against this layout.
pub(crate) fn to_channel_major(t: &Tensor) -> Vec<f32> {
    let [n, c, h, w] = t.shape;
    let plane = h * w;
    let cols = n * plane;
    let mut out = vec![0.0; c * cols];
    for s in 0..n {
        for ch in 0..c {
            let src = &t.data[(s * c + ch) * plane..(s * c + ch + 1) * plane];
            out[ch * cols + s * plane..ch * cols + (s + 1) * plane].copy_from_slice(src);
        }
    }
    out
}

pub(crate) fn from_channel_major(m: &[f32], shape: [usize; 4]) -> Tensor {
    let [n, c, h, w] = shape;
    let plane = h * w;
    let cols = n * plane;
    let mut out = Tensor::zeros(shape);
    for s in 0..n {
        for ch in 0..c {
            out.data[(s * c + ch) * plane..(s * c + ch + 1) * plane]
                .copy_from_slice(&m[ch * cols + s * plane..ch * cols + (s + 1) * plane]);
        }
    }
    out
}
