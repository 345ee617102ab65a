// SPDX-License-Identifier: MIT OR Apache-2.0

//! In-memory paired activations, normalization and the shuffled batch stream
//! that feeds crosscoder training.

use alloc::format;
use alloc::vec::Vec;

use crate::linalg::Matrix;
use crate::math::sqrt;
use crate::rng::{self, DetRng};
use crate::{Error, Result};

/// Row-major `f32` activation rows (shard storage precision).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ActivationTable {
    cols: usize,
    data: Vec<f32>,
}

impl ActivationTable {
    pub fn new(cols: usize) -> Self {
        Self { cols, data: Vec::new() }
    }

    pub fn from_data(cols: usize, data: Vec<f32>) -> Result<Self> {
        if cols == 0 || !data.len().is_multiple_of(cols) {
            return Err(Error::Shape {
                op: "activation table",
                lhs: (data.len(), 1),
                rhs: (cols, 1),
            });
        }
        Ok(Self { cols, data })
    }

    pub fn from_matrix(m: &Matrix) -> Self {
        Self {
            cols: m.cols(),
            data: m.data().iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn push_row(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.cols);
        self.data.extend(row.iter().map(|&v| v as f32));
    }

    pub fn extend(&mut self, other: &ActivationTable) {
        assert_eq!(self.cols, other.cols);
        self.data.extend_from_slice(&other.data);
    }

    pub fn rows(&self) -> usize {
        self.data.len().checked_div(self.cols).unwrap_or(0)
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Selected rows widened to `f64` and multiplied by `scale`.
    pub fn gather(&self, idx: &[usize], scale: f64) -> Matrix {
        let mut m = Matrix::zeros(idx.len(), self.cols);
        for (r, &i) in idx.iter().enumerate() {
            for (o, &v) in m.row_mut(r).iter_mut().zip(self.row(i)) {
                *o = f64::from(v) * scale;
            }
        }
        m
    }

    /// Rows `start..end` as a matrix.
    pub fn slice(&self, start: usize, end: usize, scale: f64) -> Matrix {
        let idx: Vec<usize> = (start..end).collect();
        self.gather(&idx, scale)
    }

    /// Mean Euclidean row norm, accumulated sequentially in `f64`.
    pub fn mean_norm(&self) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.rows() {
            let mut s = 0.0;
            for &v in self.row(i) {
                s += f64::from(v) * f64::from(v);
            }
            acc += sqrt(s);
        }
        acc / self.rows().max(1) as f64
    }
}

/// Scale `s` with `E[|s x|] = sqrt(d)` over all rows of `tables`.
pub fn normalization_scale(tables: &[&ActivationTable]) -> Result<f64> {
    let d = tables.first().map_or(0, |t| t.cols());
    let mut total = 0.0;
    let mut rows = 0usize;
    for t in tables {
        if t.cols() != d {
            return Err(Error::Shape {
                op: "normalization_scale",
                lhs: (t.rows(), t.cols()),
                rhs: (0, d),
            });
        }
        total += t.mean_norm() * t.rows() as f64;
        rows += t.rows();
    }
    if rows == 0 {
        return Err(Error::Degenerate("no activation rows".into()));
    }
    let mean = total / rows as f64;
    if !(mean > 0.0) || !mean.is_finite() {
        return Err(Error::Degenerate("activations have zero (or non-finite) mean norm".into()));
    }
    Ok(sqrt(d as f64) / mean)
}

/// Buffered shuffle over `0..n`: a buffer of up to `buffer` row ids is filled
/// in storage order and each draw removes a uniformly random buffered id.
/// With `buffer >= n` every epoch is a uniform permutation.
#[derive(Clone, Debug)]
pub struct ShuffleStream {
    n: usize,
    capacity: usize,
    next_row: usize,
    buffer: Vec<usize>,
    rng: DetRng,
    epoch: u64,
}

impl ShuffleStream {
    pub fn new(n: usize, buffer: usize, seed: u64) -> Self {
        let mut s = Self {
            n,
            capacity: buffer.max(1),
            next_row: 0,
            buffer: Vec::new(),
            rng: rng::stream(seed, 0x5348),
            epoch: 0,
        };
        s.refill();
        s
    }

    fn refill(&mut self) {
        while self.buffer.len() < self.capacity && self.next_row < self.n {
            self.buffer.push(self.next_row);
            self.next_row += 1;
        }
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Next row id, or `None` exactly once at each epoch boundary.
    pub fn next_row(&mut self) -> Option<usize> {
        if self.buffer.is_empty() {
            self.epoch += 1;
            self.next_row = 0;
            self.refill();
            return None;
        }
        let j = rng::index(&mut self.rng, self.buffer.len());
        let id = if self.next_row < self.n {
            let incoming = self.next_row;
            self.next_row += 1;
            core::mem::replace(&mut self.buffer[j], incoming)
        } else {
            self.buffer.swap_remove(j)
        };
        Some(id)
    }
}

/// Row-aligned activations from two models on the same tokens.
#[derive(Clone, Debug)]
pub struct PairedActivations {
    pub a: ActivationTable,
    pub b: ActivationTable,
    pub scale_a: f64,
    pub scale_b: f64,
}

impl PairedActivations {
    pub fn new(a: ActivationTable, b: ActivationTable, scale_a: f64, scale_b: f64) -> Result<Self> {
        if a.rows() != b.rows() {
            return Err(Error::Pairing(format!(
                "row counts differ: {} vs {}",
                a.rows(),
                b.rows()
            )));
        }
        if a.rows() == 0 {
            return Err(Error::Degenerate("empty activation set".into()));
        }
        Ok(Self { a, b, scale_a, scale_b })
    }

    pub fn rows(&self) -> usize {
        self.a.rows()
    }

    pub fn d_a(&self) -> usize {
        self.a.cols()
    }

    pub fn d_b(&self) -> usize {
        self.b.cols()
    }

    /// Normalized paired rows for the given ids.
    pub fn batch(&self, rows: Vec<usize>) -> PairedBatch {
        PairedBatch {
            x_a: self.a.gather(&rows, self.scale_a),
            x_b: self.b.gather(&rows, self.scale_b),
            rows,
            epoch_end: false,
        }
    }

    /// Swaps the roles of the two models.
    pub fn swapped(&self) -> Self {
        Self {
            a: self.b.clone(),
            b: self.a.clone(),
            scale_a: self.scale_b,
            scale_b: self.scale_a,
        }
    }
}

/// One training batch; row `i` of `x_a` and `x_b` is source row `rows[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedBatch {
    pub x_a: Matrix,
    pub x_b: Matrix,
    pub rows: Vec<usize>,
    /// An epoch boundary was crossed while filling this batch.
    pub epoch_end: bool,
}

/// Endless stream of shuffled paired batches.
pub struct BatchIterator<'a> {
    data: &'a PairedActivations,
    stream: ShuffleStream,
    batch_size: usize,
}

impl<'a> BatchIterator<'a> {
    pub fn new(data: &'a PairedActivations, batch_size: usize, shuffle_buffer: usize, seed: u64) -> Self {
        Self {
            data,
            stream: ShuffleStream::new(data.rows(), shuffle_buffer, seed),
            batch_size: batch_size.max(1),
        }
    }

    pub fn epoch(&self) -> u64 {
        self.stream.epoch()
    }

    pub fn next_batch(&mut self) -> PairedBatch {
        let mut rows = Vec::with_capacity(self.batch_size);
        let mut epoch_end = false;
        while rows.len() < self.batch_size {
            match self.stream.next_row() {
                Some(r) => rows.push(r),
                None => epoch_end = true,
            }
        }
        let mut b = self.data.batch(rows);
        b.epoch_end = epoch_end;
        b
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn gaussian_table(rows: usize, d: usize, seed: u64, scale: f64) -> ActivationTable {
        let mut r = rng::stream(seed, 0);
        let m = Matrix::from_fn(rows, d, |_, _| scale * rng::normal(&mut r));
        ActivationTable::from_matrix(&m)
    }

    #[test]
    fn fixed_point_scale_is_one() {
        // Every row has norm exactly 2 = sqrt(4).
        let t = ActivationTable::from_data(4, vec![1.0; 4 * 50]).unwrap();
        let s = normalization_scale(&[&t]).unwrap();
        assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn doubling_halves_scale() {
        let t = gaussian_table(200, 8, 1, 1.0);
        let t2 = gaussian_table(200, 8, 1, 2.0);
        let (s, s2) = (normalization_scale(&[&t]).unwrap(), normalization_scale(&[&t2]).unwrap());
        assert!((s / s2 - 2.0).abs() < 1e-6);
    }

    #[test]
    fn gaussian_scale_matches_brute_force_mean() {
        let t = gaussian_table(10_000, 16, 2, 3.0);
        let mut acc = 0.0;
        for i in 0..t.rows() {
            acc += libm::sqrt(t.row(i).iter().map(|&v| f64::from(v).powi(2)).sum::<f64>());
        }
        let expected = 4.0 / (acc / t.rows() as f64);
        let s = normalization_scale(&[&t]).unwrap();
        assert!((s - expected).abs() < 1e-12 * expected.max(1.0));
        let scaled = t.slice(0, t.rows(), s);
        let mean: f64 = (0..scaled.rows()).map(|i| crate::math::norm(scaled.row(i))).sum::<f64>() / t.rows() as f64;
        assert!((mean - 4.0).abs() < 0.04);
    }

    #[test]
    fn zero_activations_are_degenerate() {
        let t = ActivationTable::from_data(3, vec![0.0; 30]).unwrap();
        assert!(matches!(normalization_scale(&[&t]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn full_buffer_gives_permutations() {
        let mut s = ShuffleStream::new(37, 100, 9);
        for _ in 0..3 {
            let mut seen = Vec::new();
            while let Some(r) = s.next_row() {
                seen.push(r);
            }
            let mut sorted = seen.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..37).collect::<Vec<_>>());
            assert_ne!(seen, sorted);
        }
        assert_eq!(s.epoch(), 3);
    }

    #[test]
    fn small_buffer_still_covers_each_row_once() {
        let mut s = ShuffleStream::new(100, 7, 1);
        let mut seen = Vec::new();
        while let Some(r) = s.next_row() {
            seen.push(r);
        }
        seen.sort_unstable();
        assert_eq!(seen, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn batches_are_paired_and_reproducible() {
        let a = gaussian_table(50, 3, 1, 1.0);
        let b = gaussian_table(50, 5, 2, 1.0);
        let pairs = PairedActivations::new(a.clone(), b.clone(), 2.0, 0.5).unwrap();
        let mut it1 = BatchIterator::new(&pairs, 8, 64, 3);
        let mut it2 = BatchIterator::new(&pairs, 8, 64, 3);
        let mut crossed = false;
        for _ in 0..20 {
            let x = it1.next_batch();
            assert_eq!(x, it2.next_batch());
            crossed |= x.epoch_end;
            for (i, &r) in x.rows.iter().enumerate() {
                for j in 0..3 {
                    assert_eq!(x.x_a.get(i, j), 2.0 * f64::from(a.row(r)[j]));
                }
                for j in 0..5 {
                    assert_eq!(x.x_b.get(i, j), 0.5 * f64::from(b.row(r)[j]));
                }
            }
        }
        assert!(crossed);
    }

    #[test]
    fn unequal_row_counts_refuse_to_pair() {
        let e = PairedActivations::new(gaussian_table(5, 2, 0, 1.0), gaussian_table(6, 2, 0, 1.0), 1.0, 1.0);
        assert!(matches!(e, Err(Error::Pairing(_))));
    }
}
