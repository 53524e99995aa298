use std::collections::BTreeMap;

use crate::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::arg(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// A `1 x n` row vector.
    pub fn row_vector(data: Vec<f64>) -> Self {
        Self {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Mat, scale: f64) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    /// `out += x^T W` where `x` has `rows` entries and `out` has `cols`.
    #[inline]
    pub fn accumulate_vec_mat(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (r, &xr) in x.iter().enumerate() {
            if xr == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(self.row(r)) {
                *o += xr * w;
            }
        }
    }

    /// `out += W dy`, i.e. the gradient w.r.t. `x` of `x^T W`.
    #[inline]
    pub fn accumulate_mat_vec(&self, dy: &[f64], out: &mut [f64]) {
        debug_assert_eq!(dy.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            *o += self.row(r).iter().zip(dy).map(|(w, d)| w * d).sum::<f64>();
        }
    }

    /// `self += x dy^T` (gradient of `x^T W` w.r.t. `W`).
    #[inline]
    pub fn accumulate_outer(&mut self, x: &[f64], dy: &[f64]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(dy.len(), self.cols);
        let cols = self.cols;
        for (r, &xr) in x.iter().enumerate() {
            if xr == 0.0 {
                continue;
            }
            let row = &mut self.data[r * cols..(r + 1) * cols];
            for (w, d) in row.iter_mut().zip(dy) {
                *w += xr * d;
            }
        }
    }
}

/// Named parameter collection. Iteration is sorted by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a parameter; a duplicate name is an error.
    pub fn insert(&mut self, name: impl Into<String>, value: Mat) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::arg(format!("duplicate parameter name {name:?}")));
        }
        self.params.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.params.get_mut(name)
    }

    /// Panics when `name` is absent; models use this for their own fixed names.
    pub(crate) fn expect(&self, name: &str) -> &Mat {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name:?}"))
    }

    pub(crate) fn expect_mut(&mut self, name: &str) -> &mut Mat {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter {name:?}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Mat)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar entries.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Mat::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), Mat::zeros(v.rows(), v.cols())))
                .collect(),
        }
    }

    /// True when both stores hold the same names with the same shapes.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((ka, va), (kb, vb))| ka == kb && va.shape() == vb.shape())
    }

    pub(crate) fn check_layout(&self, other: &ParamStore, what: &str) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::arg(format!("{what}: parameter layouts differ")))
        }
    }

    /// `self += scale * other`; layouts must match.
    pub fn add_scaled(&mut self, other: &ParamStore, scale: f64) -> Result<()> {
        self.check_layout(other, "add_scaled")?;
        for (a, b) in self.params.values_mut().zip(other.params.values()) {
            a.add_scaled(b, scale);
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for m in self.params.values_mut() {
            m.scale(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.params.values().map(Mat::sum_sq).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(Mat::is_finite)
    }

    /// Rescales so the global L2 norm is at most `max_norm`. Returns the
    /// norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }

    /// All scalars concatenated in name order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for m in self.params.values() {
            out.extend_from_slice(m.as_slice());
        }
        out
    }
}

impl<'a> IntoIterator for &'a ParamStore {
    type Item = (&'a String, &'a Mat);
    type IntoIter = std::collections::btree_map::Iter<'a, String, Mat>;

    fn into_iter(self) -> Self::IntoIter {
        self.params.iter()
    }
}
