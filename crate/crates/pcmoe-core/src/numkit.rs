//! Minimal dense numeric kernels: vectors, row-major matrices, stable
//! softmax, top-k selection and Euclidean magnitudes.
//!
//! Everything is plain `f64`; masking is expressed by setting a logit to
//! [`MASKED`] (negative infinity), which softmax maps to an exact zero.

use std::cmp::Ordering;
use std::fmt;

use serde::de::{self, Deserializer, SeqAccess, Visitor};
use serde::ser::{SerializeSeq, Serializer};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sentinel logit value for masked-out entries.
pub const MASKED: f64 = f64::NEG_INFINITY;

/// Dense vector of 64-bit floats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn new(data: Vec<f64>) -> Self {
        Vector { data }
    }

    pub fn zeros(dim: usize) -> Self {
        Vector {
            data: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    /// True when every entry is finite.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Index of the largest entry, ties broken by the lower index.
    pub fn argmax(&self) -> Option<usize> {
        top_k_indices(self, 1).ok().map(|idx| idx[0])
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

impl std::ops::IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.data[i]
    }
}

impl From<Vec<f64>> for Vector {
    fn from(data: Vec<f64>) -> Self {
        Vector::new(data)
    }
}

/// Dense row-major matrix of 64-bit floats.
///
/// Serialized as nested arrays (one inner array per row), so weight files
/// stay human-readable and round-trip exactly through serde_json's
/// shortest-representation float printing.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix {rows}x{cols} requires {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::invalid("matrix rows have unequal lengths"));
        }
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            data.extend_from_slice(row);
        }
        Ok(Matrix {
            rows: r,
            cols: c,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl Serialize for Matrix {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut seq = serializer.serialize_seq(Some(self.rows))?;
        for i in 0..self.rows {
            seq.serialize_element(self.row(i))?;
        }
        seq.end()
    }
}

impl<'de> Deserialize<'de> for Matrix {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct MatrixVisitor;

        impl<'de> Visitor<'de> for MatrixVisitor {
            type Value = Matrix;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a sequence of equal-length float rows")
            }

            fn visit_seq<A: SeqAccess<'de>>(
                self,
                mut seq: A,
            ) -> std::result::Result<Matrix, A::Error> {
                let mut rows: Vec<Vec<f64>> = Vec::new();
                while let Some(row) = seq.next_element::<Vec<f64>>()? {
                    rows.push(row);
                }
                Matrix::from_rows(&rows).map_err(de::Error::custom)
            }
        }

        deserializer.deserialize_seq(MatrixVisitor)
    }
}

/// Matrix-vector product. Errors name both shapes on a mismatch.
pub fn matvec(m: &Matrix, v: &Vector) -> Result<Vector> {
    if m.cols != v.dim() {
        return Err(Error::ShapeMismatch {
            op: "matvec",
            lhs: format!("matrix {}x{}", m.rows, m.cols),
            rhs: format!("vector dim {}", v.dim()),
        });
    }
    let mut out = Vec::with_capacity(m.rows);
    for i in 0..m.rows {
        let row = m.row(i);
        let mut acc = 0.0;
        for (a, b) in row.iter().zip(v.as_slice()) {
            acc += a * b;
        }
        out.push(acc);
    }
    Ok(Vector::new(out))
}

/// Numerically stable softmax with max subtraction.
///
/// Entries equal to [`MASKED`] map to exactly zero. Errors when every entry
/// is masked.
pub fn softmax(logits: &Vector) -> Result<Vector> {
    let max = logits
        .iter()
        .copied()
        .filter(|x| *x != MASKED)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::NoUnmaskedLogits);
    }
    let mut out = Vec::with_capacity(logits.dim());
    let mut sum = 0.0;
    for &x in logits.iter() {
        let e = if x == MASKED { 0.0 } else { (x - max).exp() };
        sum += e;
        out.push(e);
    }
    for e in &mut out {
        *e /= sum;
    }
    Ok(Vector::new(out))
}

/// Indices of the `k` largest entries, in descending-score order; ties go to
/// the lower index.
pub fn top_k_indices(scores: &Vector, k: usize) -> Result<Vec<usize>> {
    let n = scores.dim();
    if k < 1 || k > n {
        return Err(Error::OutOfRange {
            op: "top_k_indices",
            what: "k",
            value: k,
            min: 1,
            max: n,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| match scores[b].partial_cmp(&scores[a]) {
        Some(Ordering::Equal) | None => a.cmp(&b),
        Some(ord) => ord,
    });
    order.truncate(k);
    Ok(order)
}

/// Euclidean (L2, Frobenius over flattened parameters) norm.
pub fn magnitude(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x * x).sum::<f64>().sqrt()
}
