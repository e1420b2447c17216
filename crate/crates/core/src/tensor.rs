//! Dense row-major `f64` tensors and named parameter collections.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::config(format!("zero dimension in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::config(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Rows and columns when viewed as a matrix (leading dims collapsed).
    pub fn rows_cols(&self) -> (usize, usize) {
        let cols = *self.shape.last().unwrap_or(&1);
        (self.data.len() / cols.max(1), cols)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let (_, c) = self.rows_cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Ordered named tensors; the unit every optimizer and quantizer works on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    entries: Vec<(String, Tensor)>,
}

impl ParamVector {
    pub fn new(entries: Vec<(String, Tensor)>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for (name, _) in &entries {
            if !seen.insert(name.as_str()) {
                return Err(Error::config(format!("duplicate parameter id {name}")));
            }
        }
        Ok(ParamVector { entries })
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.entries[i].1
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].1
    }

    pub fn name(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn zeros_like(&self) -> Self {
        ParamVector {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_count());
        for (_, t) in &self.entries {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten) using `self` as the structure template.
    pub fn unflatten(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.total_count() {
            return Err(Error::config(format!(
                "flat vector has {} values, structure needs {}",
                flat.len(),
                self.total_count()
            )));
        }
        let mut offset = 0;
        let entries = self
            .entries
            .iter()
            .map(|(n, t)| {
                let data = flat[offset..offset + t.len()].to_vec();
                offset += t.len();
                (n.clone(), Tensor { shape: t.shape.clone(), data })
            })
            .collect();
        Ok(ParamVector { entries })
    }

    pub fn same_structure(&self, other: &ParamVector) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((a, ta), (b, tb))| a == b && ta.shape() == tb.shape())
    }

    pub fn check_structure(&self, other: &ParamVector) -> Result<()> {
        if self.same_structure(other) {
            Ok(())
        } else {
            Err(Error::config("parameter vectors differ in structure"))
        }
    }

    /// `self + a * other`, elementwise.
    pub fn axpy(&self, a: f64, other: &ParamVector) -> ParamVector {
        let mut out = self.clone();
        out.add_scaled(a, other);
        out
    }

    pub fn add_scaled(&mut self, a: f64, other: &ParamVector) {
        for ((_, t), (_, o)) in self.entries.iter_mut().zip(&other.entries) {
            for (x, y) in t.data.iter_mut().zip(&o.data) {
                *x += a * y;
            }
        }
    }

    pub fn scale(&mut self, a: f64) {
        for (_, t) in &mut self.entries {
            t.data.iter_mut().for_each(|x| *x *= a);
        }
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        self.entries
            .iter()
            .zip(&other.entries)
            .map(|((_, a), (_, b))| a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum::<f64>())
            .sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    pub fn max_abs(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|(_, t)| t.data.iter())
            .fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }
}
