//! Per-variable categorical distributions stored as one flat row-major table.

use serde::{Deserialize, Serialize};

use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoricalTable<T = f64> {
    num_vars: usize,
    num_cats: usize,
    probs: Vec<T>,
}

impl<T: Real> CategoricalTable<T> {
    pub fn zeros(num_vars: usize, num_cats: usize) -> Self {
        Self { num_vars, num_cats, probs: vec![T::zero(); num_vars * num_cats] }
    }

    pub fn uniform(num_vars: usize, num_cats: usize) -> Self {
        let p = T::one() / T::of(num_cats as f64);
        Self { num_vars, num_cats, probs: vec![p; num_vars * num_cats] }
    }

    /// Panics if `probs.len() != num_vars * num_cats`.
    pub fn from_vec(num_vars: usize, num_cats: usize, probs: Vec<T>) -> Self {
        assert_eq!(probs.len(), num_vars * num_cats, "table shape mismatch");
        Self { num_vars, num_cats, probs }
    }

    /// One-hot rows at the given categories.
    pub fn one_hot(values: &[u16], num_cats: usize) -> Self {
        let mut t = Self::zeros(values.len(), num_cats);
        for (i, &v) in values.iter().enumerate() {
            t.probs[i * num_cats + v as usize] = T::one();
        }
        t
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn num_cats(&self) -> usize {
        self.num_cats
    }

    pub fn row(&self, var: usize) -> &[T] {
        &self.probs[var * self.num_cats..(var + 1) * self.num_cats]
    }

    pub fn row_mut(&mut self, var: usize) -> &mut [T] {
        let c = self.num_cats;
        &mut self.probs[var * c..(var + 1) * c]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.probs
    }

    pub fn into_vec(self) -> Vec<T> {
        self.probs
    }

    /// Most probable category per variable; ties go to the lowest index.
    pub fn argmax(&self) -> Vec<u16> {
        (0..self.num_vars)
            .map(|i| {
                let row = self.row(i);
                let mut best = 0;
                for (c, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = c;
                    }
                }
                best as u16
            })
            .collect()
    }

    /// Per-variable expectation of `grid[c]`.
    pub fn expected_values(&self, grid: &[f64]) -> Vec<f64> {
        (0..self.num_vars)
            .map(|i| self.row(i).iter().zip(grid).map(|(p, v)| p.to_f64_lossy() * v).sum())
            .collect()
    }

    /// Largest absolute entry-wise difference; `inf` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        if self.num_vars != other.num_vars || self.num_cats != other.num_cats {
            return f64::INFINITY;
        }
        self.probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a.to_f64_lossy() - b.to_f64_lossy()).abs())
            .fold(0.0, f64::max)
    }
}
