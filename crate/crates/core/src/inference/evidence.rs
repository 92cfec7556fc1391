use crate::scalar::Real;

use super::InferenceError;

/// Per-variable log weights `log w_i(x)`, row-major `[var][category]`.
///
/// Weights need not be normalized and may exceed one. Hard evidence is the
/// one-hot special case and is flagged so callers can tell the two apart.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftEvidence<T = f64> {
    num_vars: usize,
    num_cats: usize,
    log_weights: Vec<T>,
    hard: Vec<bool>,
}

impl<T: Real> SoftEvidence<T> {
    /// All weights one: no evidence.
    pub fn uniform(num_vars: usize, num_cats: usize) -> Self {
        Self { num_vars, num_cats, log_weights: vec![T::zero(); num_vars * num_cats], hard: vec![false; num_vars] }
    }

    pub fn from_log_weights(num_vars: usize, num_cats: usize, log_weights: Vec<T>) -> Result<Self, InferenceError> {
        if log_weights.len() != num_vars * num_cats {
            return Err(InferenceError::DimMismatch {
                what: "log weights",
                expected: num_vars * num_cats,
                found: log_weights.len(),
            });
        }
        Ok(Self { num_vars, num_cats, log_weights, hard: vec![false; num_vars] })
    }

    /// Value-space weights; negative entries are treated as zero.
    pub fn from_weights(num_vars: usize, num_cats: usize, weights: &[T]) -> Result<Self, InferenceError> {
        let logs = weights.iter().map(|&w| if w > T::zero() { w.ln() } else { T::neg_infinity() }).collect();
        Self::from_log_weights(num_vars, num_cats, logs)
    }

    /// Hard evidence on every variable.
    pub fn from_hard(values: &[u16], num_cats: usize) -> Self {
        let mut ev = Self::uniform(values.len(), num_cats);
        for (v, &x) in values.iter().enumerate() {
            ev.set_hard(v, x);
        }
        ev
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn num_cats(&self) -> usize {
        self.num_cats
    }

    #[inline]
    pub fn row(&self, var: usize) -> &[T] {
        &self.log_weights[var * self.num_cats..(var + 1) * self.num_cats]
    }

    pub fn log_weights(&self) -> &[T] {
        &self.log_weights
    }

    pub fn is_hard(&self, var: usize) -> bool {
        self.hard[var]
    }

    pub fn hard_mask(&self) -> &[bool] {
        &self.hard
    }

    /// The observed category of a hard-evidence variable.
    pub fn hard_value(&self, var: usize) -> Option<u16> {
        if !self.hard[var] {
            return None;
        }
        self.row(var).iter().position(|&l| l > T::neg_infinity()).map(|i| i as u16)
    }

    /// Panics if `value` is not a category.
    pub fn set_hard(&mut self, var: usize, value: u16) {
        assert!((value as usize) < self.num_cats, "category {value} out of range");
        let c = self.num_cats;
        for (k, l) in self.log_weights[var * c..(var + 1) * c].iter_mut().enumerate() {
            *l = if k == value as usize { T::zero() } else { T::neg_infinity() };
        }
        self.hard[var] = true;
    }

    pub fn set_log_weights(&mut self, var: usize, row: &[T]) {
        assert_eq!(row.len(), self.num_cats);
        let c = self.num_cats;
        self.log_weights[var * c..(var + 1) * c].copy_from_slice(row);
        self.hard[var] = false;
    }

    /// Removes any evidence on `var`.
    pub fn clear(&mut self, var: usize) {
        let c = self.num_cats;
        self.log_weights[var * c..(var + 1) * c].fill(T::zero());
        self.hard[var] = false;
    }

    /// Multiplies every weight of `var` by `exp(log_c)`.
    pub fn scale(&mut self, var: usize, log_c: T) {
        let c = self.num_cats;
        for l in &mut self.log_weights[var * c..(var + 1) * c] {
            *l += log_c;
        }
    }

    /// First variable whose weights are all zero, if any.
    pub fn first_all_zero(&self) -> Option<usize> {
        (0..self.num_vars).find(|&v| self.row(v).iter().all(|&l| l == T::neg_infinity()))
    }

    /// Value-space weights, normalized per variable, as a flat row-major vector.
    pub fn normalized_probs(&self) -> Result<Vec<T>, InferenceError> {
        if let Some(v) = self.first_all_zero() {
            return Err(InferenceError::AllZeroEvidence { var: Some(v) });
        }
        let mut out = Vec::with_capacity(self.log_weights.len());
        for v in 0..self.num_vars {
            let row = self.row(v);
            let lz = crate::scalar::log_sum_exp(row);
            out.extend(row.iter().map(|&l| (l - lz).exp()));
        }
        Ok(out)
    }

    pub fn cast<U: Real>(&self) -> SoftEvidence<U> {
        SoftEvidence {
            num_vars: self.num_vars,
            num_cats: self.num_cats,
            log_weights: self.log_weights.iter().map(|l| U::of(l.to_f64_lossy())).collect(),
            hard: self.hard.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hard_rows_are_one_hot_and_recoverable() {
        let ev = SoftEvidence::<f64>::from_hard(&[2, 0], 3);
        assert_eq!(ev.row(0), &[f64::NEG_INFINITY, f64::NEG_INFINITY, 0.0]);
        assert_eq!(ev.hard_value(0), Some(2));
        assert_eq!(ev.hard_value(1), Some(0));
        assert_eq!(ev.normalized_probs().unwrap(), vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_rows_are_found() {
        let ev = SoftEvidence::<f64>::from_weights(2, 2, &[1.0, 0.5, 0.0, 0.0]).unwrap();
        assert_eq!(ev.first_all_zero(), Some(1));
        assert!(matches!(ev.normalized_probs(), Err(InferenceError::AllZeroEvidence { var: Some(1) })));
        assert!(SoftEvidence::<f64>::from_log_weights(2, 2, vec![0.0; 3]).is_err());
    }
}
