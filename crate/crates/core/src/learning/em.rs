//! Mini-batch expectation maximization over hard-evidence samples.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Dataset, LearningError};
use crate::circuit::{Circuit, NodeKind};
use crate::inference::{log_likelihood_batch, InferenceError};
use crate::rng::stream;
use crate::scalar::Real;

/// Rows handled per parallel work item. Fixed so the reduction order, and
/// therefore the result, does not depend on the thread count.
const CHUNK_ROWS: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmConfig {
    /// Convex update weight α in `(0, 1]`.
    pub step_size: f64,
    pub batch_size: usize,
    pub pseudocount: f64,
    pub num_iterations: usize,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self { step_size: 1.0, batch_size: 20_000, pseudocount: 0.1, num_iterations: 200, seed: 0 }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<(), LearningError> {
        if !(self.step_size > 0.0 && self.step_size <= 1.0) {
            return Err(LearningError::InvalidConfig(format!("step_size {} is outside (0, 1]", self.step_size)));
        }
        if !(self.pseudocount >= 0.0 && self.pseudocount.is_finite()) {
            return Err(LearningError::InvalidConfig(format!("pseudocount {} must be finite and >= 0", self.pseudocount)));
        }
        if self.batch_size == 0 {
            return Err(LearningError::InvalidConfig("batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Full-dataset average log-likelihood before the first step.
    pub initial_avg_ll: f64,
    /// Full-dataset average log-likelihood after each step.
    pub avg_ll: Vec<f64>,
    /// SHA-256 of the final parameter array (little-endian `f64`), hex.
    pub param_checksum: String,
}

pub fn param_checksum<T: Real>(c: &Circuit<T>) -> String {
    let mut h = Sha256::new();
    for p in c.all_params() {
        h.update(p.to_f64_lossy().to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn check_rows<T: Real>(c: &Circuit<T>, rows: &[u16]) -> Result<usize, LearningError> {
    let nv = c.num_vars();
    if !rows.len().is_multiple_of(nv) {
        return Err(LearningError::DimMismatch { what: "matrix entries (multiple of)", expected: nv, found: rows.len() });
    }
    if let Some(i) = rows.iter().position(|&v| v as usize >= c.num_cats()) {
        return Err(LearningError::CategoryOutOfRange { sample: i / nv, var: i % nv, value: rows[i], num_cats: c.num_cats() });
    }
    Ok(rows.len() / nv)
}

/// Expected flows of a batch, aligned with the circuit's parameter array (so
/// tied blocks pool automatically), plus the batch's total log-likelihood.
///
/// A sum edge contributes `θ · fw_c / fw_n · bk_n`, an input node contributes
/// `bk_n` to its observed category. Samples with zero probability contribute
/// nothing and make the returned log-likelihood `-inf`.
pub fn accumulate_statistics<T: Real>(c: &Circuit<T>, rows: &[u16]) -> Result<(Vec<f64>, f64), LearningError> {
    let n = check_rows(c, rows)?;
    if n == 0 {
        return Err(LearningError::EmptyBatch);
    }
    let nv = c.num_vars();
    let num_params = c.all_params().len();
    let partials: Vec<Result<(Vec<f64>, f64), InferenceError>> = rows
        .par_chunks(nv * CHUNK_ROWS)
        .map(|chunk| {
            let mut stats = vec![0.0f64; num_params];
            let mut ll = 0.0;
            let mut fw = vec![T::zero(); c.num_nodes()];
            let mut bk = vec![T::zero(); c.num_nodes()];
            for x in chunk.chunks(nv) {
                let lz = crate::inference::passes_forward(c, |n, var| c.log_params(n)[x[var] as usize], &mut fw);
                ll += lz.to_f64_lossy();
                if lz == T::neg_infinity() {
                    continue;
                }
                crate::inference::passes_backward(c, &fw, &mut bk)?;
                for (node, kind) in c.kinds().iter().enumerate() {
                    let b = bk[node].to_f64_lossy();
                    if b == 0.0 {
                        continue;
                    }
                    let id = node as u32;
                    match *kind {
                        NodeKind::Input { var } => {
                            let s = c.param_start(id).expect("inputs carry parameters");
                            stats[s + x[var as usize] as usize] += b;
                        }
                        NodeKind::Sum => {
                            let s = c.param_start(id).expect("sums carry parameters");
                            let lf = fw[node];
                            for (k, (&ch, &lt)) in c.children(id).iter().zip(c.log_params(id)).enumerate() {
                                let lc = fw[ch as usize];
                                if lc != T::neg_infinity() {
                                    stats[s + k] += (lt + lc - lf).to_f64_lossy().exp() * b;
                                }
                            }
                        }
                        NodeKind::Product => {}
                    }
                }
            }
            Ok((stats, ll))
        })
        .collect();
    let mut stats = vec![0.0f64; num_params];
    let mut ll = 0.0;
    for p in partials {
        let (s, l) = p?;
        for (a, b) in stats.iter_mut().zip(&s) {
            *a += b;
        }
        ll += l;
    }
    Ok((stats, ll))
}

/// One EM update: `θ ← (1 − α) θ + α (s + pc / len) / (Σ s + pc)` per parameter
/// block, for sum edges and input distributions alike. A block with zero
/// statistics and zero pseudocount keeps its values.
pub fn em_step<T: Real>(c: &Circuit<T>, rows: &[u16], cfg: &EmConfig) -> Result<Circuit<T>, LearningError> {
    cfg.validate()?;
    let (stats, _) = accumulate_statistics(c, rows)?;
    Ok(apply_update(c, &stats, cfg))
}

fn apply_update<T: Real>(c: &Circuit<T>, stats: &[f64], cfg: &EmConfig) -> Circuit<T> {
    let mut params: Vec<T> = c.all_params().to_vec();
    let alpha = cfg.step_size;
    for (_, start, len) in c.param_blocks() {
        let s = &stats[start..start + len];
        let total: f64 = s.iter().sum::<f64>() + cfg.pseudocount;
        if total.is_nan() || total <= 0.0 {
            continue;
        }
        let pc = cfg.pseudocount / len as f64;
        for (k, sk) in s.iter().enumerate() {
            let target = (sk + pc) / total;
            let old = params[start + k].to_f64_lossy();
            params[start + k] = T::of((1.0 - alpha) * old + alpha * target);
        }
    }
    c.with_params(params)
}

fn average_ll<T: Real>(c: &Circuit<T>, data: &Dataset) -> Result<f64, LearningError> {
    let lls = log_likelihood_batch(c, data.as_slice())?;
    Ok(lls.iter().map(|l| l.to_f64_lossy()).sum::<f64>() / data.num_samples() as f64)
}

/// Runs `num_iterations` EM steps, each on the next mini-batch of a seeded
/// per-epoch permutation, and records the full-dataset average log-likelihood.
pub fn fit<T: Real>(c: &Circuit<T>, data: &Dataset, cfg: &EmConfig) -> Result<(Circuit<T>, TrainReport), LearningError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(LearningError::DatasetEmpty);
    }
    if data.num_vars() != c.num_vars() {
        return Err(LearningError::DimMismatch { what: "dataset columns", expected: c.num_vars(), found: data.num_vars() });
    }
    check_rows(c, data.as_slice())?;
    let n = data.num_samples();
    let full_batch = cfg.batch_size >= n;
    let mut rng = stream(cfg.seed, "train");
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut current = c.clone();
    let initial_avg_ll = average_ll(&current, data)?;
    let mut avg_ll = Vec::with_capacity(cfg.num_iterations);
    for _ in 0..cfg.num_iterations {
        let stats = if full_batch {
            accumulate_statistics(&current, data.as_slice())?.0
        } else {
            if cursor + cfg.batch_size > n {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let batch = data.select(&order[cursor..cursor + cfg.batch_size]);
            cursor += cfg.batch_size;
            accumulate_statistics(&current, batch.as_slice())?.0
        };
        current = apply_update(&current, &stats, cfg);
        avg_ll.push(average_ll(&current, data)?);
    }
    let param_checksum = param_checksum(&current);
    Ok((current, TrainReport { initial_avg_ll, avg_ll, param_checksum }))
}
