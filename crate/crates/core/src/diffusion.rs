//! Discrete-valued diffusion: forward noising, a factorized surrogate denoiser
//! and the reverse step through the clean-image posterior.
//!
//! Pixels are categories `0..C` mapped to evenly spaced values on `[-1, 1]`.
//! Steps are numbered `1..=T`; `ᾱ_0 = 1`.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inference::SoftEvidence;
use crate::learning::Dataset;
use crate::rng::Rng;
use crate::table::CategoricalTable;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiffusionError {
    #[error("denoiser has not been trained")]
    UntrainedDenoiser,
    #[error("expected {expected} {what}, got {found}")]
    DimMismatch { what: &'static str, expected: usize, found: usize },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
}

/// Serialized form of a schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    #[serde(rename = "T")]
    pub num_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    #[serde(rename = "C")]
    pub num_cats: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { num_steps: 250, beta_start: 1e-4, beta_end: 0.02, num_cats: 2 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
    value_grid: Vec<f64>,
}

/// Evenly spaced values on `[-1, 1]`; a single category maps to 0.
pub fn value_grid(num_cats: usize) -> Vec<f64> {
    if num_cats == 1 {
        return vec![0.0];
    }
    (0..num_cats).map(|c| -1.0 + 2.0 * c as f64 / (num_cats - 1) as f64).collect()
}

impl NoiseSchedule {
    /// Linear β from `beta_start` to `beta_end` over `num_steps` steps.
    pub fn linear(num_steps: usize, beta_start: f64, beta_end: f64, num_cats: usize) -> Result<Self, DiffusionError> {
        if num_steps == 0 || num_cats == 0 {
            return Err(DiffusionError::InvalidSchedule("need at least one step and one category".into()));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(DiffusionError::InvalidSchedule(format!("betas {beta_start}..{beta_end} must satisfy 0 < start <= end < 1")));
        }
        let betas: Vec<f64> = (0..num_steps)
            .map(|i| {
                if num_steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (num_steps - 1) as f64
                }
            })
            .collect();
        let mut alpha_bar = Vec::with_capacity(num_steps);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(Self { betas, alpha_bar, value_grid: value_grid(num_cats) })
    }

    pub fn from_config(cfg: &ScheduleConfig) -> Result<Self, DiffusionError> {
        Self::linear(cfg.num_steps, cfg.beta_start, cfg.beta_end, cfg.num_cats)
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn num_cats(&self) -> usize {
        self.value_grid.len()
    }

    /// β_t for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// ᾱ_t for `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn value_grid(&self) -> &[f64] {
        &self.value_grid
    }

    /// Nearest grid category, ties to the lower index.
    pub fn nearest_category(&self, v: f64) -> u16 {
        let mut best = 0;
        for (k, g) in self.value_grid.iter().enumerate() {
            if (g - v).abs() < (self.value_grid[best] - v).abs() {
                best = k;
            }
        }
        best as u16
    }
}

/// `x_t` together with its step.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisyState {
    pub values: Vec<f64>,
    pub t: usize,
}

impl NoisyState {
    /// Categories of a clean state (`t = 0`), or the nearest grid values otherwise.
    pub fn categories(&self, sched: &NoiseSchedule) -> Vec<u16> {
        self.values.iter().map(|&v| sched.nearest_category(v)).collect()
    }
}

/// Samples `x_t ~ N(√ᾱ_t x_0, (1 − ᾱ_t) I)`.
pub fn forward_noise(x0: &[u16], t: usize, sched: &NoiseSchedule, rng: &mut Rng) -> NoisyState {
    assert!(t >= 1 && t <= sched.num_steps(), "step {t} outside 1..={}", sched.num_steps());
    let ab = sched.alpha_bar(t);
    let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    let values = x0
        .iter()
        .map(|&c| {
            let eps: f64 = StandardNormal.sample(rng);
            a * sched.value_grid[c as usize] + s * eps
        })
        .collect();
    NoisyState { values, t }
}

fn log_normal(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (2.0 * std::f64::consts::PI * var).ln() - (x - mean) * (x - mean) / (2.0 * var)
}

/// `log q(x_t^i | x̃_0^i = c)` for every variable and category, row-major.
pub fn noise_log_weights(state: &NoisyState, sched: &NoiseSchedule) -> Vec<f64> {
    assert!(state.t >= 1, "noise weights need t >= 1");
    let ab = sched.alpha_bar(state.t);
    let (a, var) = (ab.sqrt(), 1.0 - ab);
    let mut out = Vec::with_capacity(state.values.len() * sched.num_cats());
    for &x in &state.values {
        out.extend(sched.value_grid.iter().map(|&v| log_normal(x, a * v, var)));
    }
    out
}

/// Soft evidence from the noisy state; `known[i] = Some(c)` overrides with a one-hot row.
pub fn per_variable_noise_weights(state: &NoisyState, sched: &NoiseSchedule, known: &[Option<u16>]) -> SoftEvidence<f64> {
    let nv = state.values.len();
    let mut ev = SoftEvidence::from_log_weights(nv, sched.num_cats(), noise_log_weights(state, sched))
        .expect("weights have one row per variable");
    for (v, k) in known.iter().enumerate() {
        if let Some(c) = *k {
            ev.set_hard(v, c);
        }
    }
    ev
}

/// Per-pixel categorical prior; the posterior given `x_t` is exact Bayes on it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorizedDenoiser {
    num_vars: usize,
    num_cats: usize,
    log_prior: Vec<f64>,
    trained: bool,
}

impl FactorizedDenoiser {
    pub fn untrained(num_vars: usize, num_cats: usize) -> Self {
        Self { num_vars, num_cats, log_prior: vec![0.0; num_vars * num_cats], trained: false }
    }

    /// Uniform prior, usable as-is.
    pub fn uniform(num_vars: usize, num_cats: usize) -> Self {
        let l = -(num_cats as f64).ln();
        Self { num_vars, num_cats, log_prior: vec![l; num_vars * num_cats], trained: true }
    }

    /// Per-pixel histograms with `smoothing` added to every count.
    pub fn train(data: &Dataset, smoothing: f64) -> Self {
        let (nv, nc) = (data.num_vars(), data.num_cats());
        let mut counts = vec![smoothing; nv * nc];
        for row in data.rows() {
            for (v, &c) in row.iter().enumerate() {
                counts[v * nc + c as usize] += 1.0;
            }
        }
        let mut log_prior = Vec::with_capacity(nv * nc);
        for row in counts.chunks(nc) {
            let s: f64 = row.iter().sum();
            log_prior.extend(row.iter().map(|c| (c / s).ln()));
        }
        Self { num_vars: nv, num_cats: nc, log_prior, trained: !data.is_empty() }
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn num_cats(&self) -> usize {
        self.num_cats
    }

    pub fn prior(&self) -> CategoricalTable<f64> {
        CategoricalTable::from_vec(self.num_vars, self.num_cats, self.log_prior.iter().map(|l| l.exp()).collect())
    }

    /// `p_DM(x̃_0^i = c | x_t) ∝ prior_i(c) · q(x_t^i | c)`, with known pixels one-hot.
    pub fn posterior(
        &self,
        state: &NoisyState,
        sched: &NoiseSchedule,
        known: &[Option<u16>],
    ) -> Result<CategoricalTable<f64>, DiffusionError> {
        if !self.trained {
            return Err(DiffusionError::UntrainedDenoiser);
        }
        if state.values.len() != self.num_vars {
            return Err(DiffusionError::DimMismatch { what: "state values", expected: self.num_vars, found: state.values.len() });
        }
        if sched.num_cats() != self.num_cats {
            return Err(DiffusionError::DimMismatch { what: "schedule categories", expected: self.num_cats, found: sched.num_cats() });
        }
        if !known.is_empty() && known.len() != self.num_vars {
            return Err(DiffusionError::DimMismatch { what: "known entries", expected: self.num_vars, found: known.len() });
        }
        let lw = noise_log_weights(state, sched);
        let nc = self.num_cats;
        let mut probs = Vec::with_capacity(lw.len());
        for v in 0..self.num_vars {
            if let Some(Some(c)) = known.get(v) {
                probs.extend((0..nc).map(|k| if k == *c as usize { 1.0 } else { 0.0 }));
                continue;
            }
            let logs: Vec<f64> = (0..nc).map(|k| self.log_prior[v * nc + k] + lw[v * nc + k]).collect();
            let lz = crate::scalar::log_sum_exp(&logs);
            probs.extend(logs.iter().map(|l| (l - lz).exp()));
        }
        Ok(CategoricalTable::from_vec(self.num_vars, nc, probs))
    }
}

/// Draws a category from a probability row.
pub(crate) fn draw(row: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (k, &p) in row.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = k;
        if u < acc {
            return k;
        }
    }
    last
}

/// Mean and variance of `q(x_{t−1} | x_0, x_t)`.
pub fn posterior_gaussian(x0: f64, xt: f64, t: usize, sched: &NoiseSchedule) -> (f64, f64) {
    let (ab_t, ab_prev, beta) = (sched.alpha_bar(t), sched.alpha_bar(t - 1), sched.beta(t));
    let c0 = ab_prev.sqrt() * beta / (1.0 - ab_t);
    let ct = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
    (c0 * x0 + ct * xt, (1.0 - ab_prev) / (1.0 - ab_t) * beta)
}

/// Samples `x̃_0` per variable from `x0dist`, then `x_{t−1} ~ q(x_{t−1} | x̃_0, x_t)`.
/// At `t = 1` the sampled `x̃_0` values are returned as the clean state.
pub fn reverse_step(x0dist: &CategoricalTable<f64>, state: &NoisyState, sched: &NoiseSchedule, rng: &mut Rng) -> NoisyState {
    assert!(state.t >= 1, "cannot step below t = 0");
    let values = state
        .values
        .iter()
        .enumerate()
        .map(|(v, &xt)| {
            let x0 = sched.value_grid[draw(x0dist.row(v), rng)];
            if state.t == 1 {
                x0
            } else {
                let (mean, var) = posterior_gaussian(x0, xt, state.t, sched);
                let eps: f64 = StandardNormal.sample(rng);
                mean + var.sqrt() * eps
            }
        })
        .collect();
    NoisyState { values, t: state.t - 1 }
}

/// Pure `x_T ~ N(0, I)`.
pub fn initial_state(num_vars: usize, sched: &NoiseSchedule, rng: &mut Rng) -> NoisyState {
    NoisyState { values: (0..num_vars).map(|_| StandardNormal.sample(rng)).collect(), t: sched.num_steps() }
}
