//! Seeded toy image generators. The bars generator samples from an exact
//! ground-truth circuit, so its likelihoods can be evaluated exactly.

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::circuit::{Circuit, CircuitBuilder};
use crate::inference::{conditional_sample_with, forward_soft_evidence, SoftEvidence};
use crate::learning::Dataset;
use crate::rng::{stream, Rng};

pub const DEFAULT_NOISE: f64 = 0.02;
pub const BANDS: usize = 4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DatasetError {
    #[error("unknown generator {0:?}")]
    UnknownGenerator(String),
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Generator {
    /// Horizontal or vertical bands, each independently on or off, with pixel noise.
    Bars,
    /// Checkerboard with random phase and pixel noise.
    Checker,
    /// Every pixel at the top category.
    Constant,
    /// Bars or checker with equal probability.
    Mixture,
}

impl Generator {
    pub fn parse(name: &str) -> Result<Self, DatasetError> {
        match name {
            "bars" => Ok(Self::Bars),
            "checker" => Ok(Self::Checker),
            "constant" => Ok(Self::Constant),
            "mixture" => Ok(Self::Mixture),
            other => Err(DatasetError::UnknownGenerator(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyDatasetSpec {
    pub generator: Generator,
    pub height: usize,
    pub width: usize,
    #[serde(default = "default_cats")]
    pub num_cats: usize,
    pub num_samples: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_noise")]
    pub noise: f64,
}

fn default_cats() -> usize {
    2
}

fn default_noise() -> f64 {
    DEFAULT_NOISE
}

impl ToyDatasetSpec {
    pub fn new(generator: Generator, height: usize, width: usize, num_samples: usize, seed: u64) -> Self {
        Self { generator, height, width, num_cats: 2, num_samples, seed, noise: DEFAULT_NOISE }
    }

    fn check(&self) -> Result<(), DatasetError> {
        if self.height == 0 || self.width == 0 {
            return Err(DatasetError::InvalidSpec("grid must be non-empty".into()));
        }
        if self.num_cats < 2 || self.num_cats > u16::MAX as usize {
            return Err(DatasetError::InvalidSpec(format!("{} categories", self.num_cats)));
        }
        if !(0.0..1.0).contains(&self.noise) {
            return Err(DatasetError::InvalidSpec(format!("noise {} outside [0, 1)", self.noise)));
        }
        Ok(())
    }

    /// The exact generating distribution, when it is a circuit.
    pub fn ground_truth(&self) -> Option<Circuit<f64>> {
        (self.generator == Generator::Bars).then(|| bars_circuit(self.height, self.width, self.num_cats, self.noise))
    }
}

/// Row (or column) ranges of the bands along a side of length `n`.
fn bands(n: usize) -> Vec<std::ops::Range<usize>> {
    let nb = BANDS.min(n);
    (0..nb).map(|i| i * n / nb..(i + 1) * n / nb).collect()
}

/// Orientation chosen uniformly; each of the four bands is on with
/// probability 1/2; an on pixel takes the top category with probability
/// `1 − noise`, an off pixel category 0, the remaining mass spread evenly.
pub fn bars_circuit(height: usize, width: usize, num_cats: usize, noise: f64) -> Circuit<f64> {
    assert!(num_cats >= 2, "bars need at least two categories");
    let mut b = CircuitBuilder::new(height * width, num_cats);
    let spread = noise / (num_cats - 1) as f64;
    let mut on_dist = vec![spread; num_cats];
    on_dist[num_cats - 1] = 1.0 - noise;
    let mut off_dist = vec![spread; num_cats];
    off_dist[0] = 1.0 - noise;
    let on: Vec<_> = (0..height * width).map(|p| b.input(p as u32, &on_dist)).collect();
    let off: Vec<_> = (0..height * width).map(|p| b.input(p as u32, &off_dist)).collect();

    let band_sum = |b: &mut CircuitBuilder<f64>, pixels: Vec<usize>| {
        let on_p = b.product(&pixels.iter().map(|&p| on[p]).collect::<Vec<_>>());
        let off_p = b.product(&pixels.iter().map(|&p| off[p]).collect::<Vec<_>>());
        b.sum(&[on_p, off_p], &[0.5, 0.5])
    };
    let horizontal: Vec<_> = bands(height)
        .into_iter()
        .map(|rows| band_sum(&mut b, rows.flat_map(|r| (0..width).map(move |c| r * width + c)).collect()))
        .collect();
    let vertical: Vec<_> = bands(width)
        .into_iter()
        .map(|cols| band_sum(&mut b, (0..height).flat_map(|r| cols.clone().map(move |c| r * width + c)).collect()))
        .collect();
    let h = b.product(&horizontal);
    let v = b.product(&vertical);
    let root = b.sum(&[h, v], &[0.5, 0.5]);
    b.build_from(root).expect("bars circuit is well formed")
}

fn noisy(value: u16, noise: f64, num_cats: usize, rng: &mut Rng) -> u16 {
    if noise > 0.0 && rng.random::<f64>() < noise {
        let other = rng.random_range(0..num_cats - 1) as u16;
        if other >= value {
            other + 1
        } else {
            other
        }
    } else {
        value
    }
}

fn checker_image(spec: &ToyDatasetSpec, rng: &mut Rng) -> Vec<u16> {
    let cell = (spec.height.min(spec.width) / 4).max(1);
    let phase = rng.random_range(0..2usize);
    let top = (spec.num_cats - 1) as u16;
    (0..spec.height * spec.width)
        .map(|p| {
            let (r, c) = (p / spec.width, p % spec.width);
            let v = if (r / cell + c / cell + phase) % 2 == 1 { top } else { 0 };
            noisy(v, spec.noise, spec.num_cats, rng)
        })
        .collect()
}

/// Exactly reproducible from the spec: all draws come from the `data`
/// substream of `spec.seed`.
pub fn generate(spec: &ToyDatasetSpec) -> Result<Dataset, DatasetError> {
    spec.check()?;
    let mut rng = stream(spec.seed, "data");
    let nv = spec.height * spec.width;
    let bars = matches!(spec.generator, Generator::Bars | Generator::Mixture)
        .then(|| bars_circuit(spec.height, spec.width, spec.num_cats, spec.noise));
    let bars_state = bars.as_ref().map(|c| {
        let ev = SoftEvidence::uniform(nv, spec.num_cats);
        let fw = forward_soft_evidence(c, &ev).expect("uniform evidence has support");
        (ev, fw)
    });
    let draw_bars = |rng: &mut Rng| {
        let (ev, fw) = bars_state.as_ref().expect("bars circuit built");
        conditional_sample_with(bars.as_ref().expect("bars circuit built"), ev, fw, rng, 1).pop().expect("one sample")
    };
    let mut data = Vec::with_capacity(nv * spec.num_samples);
    for _ in 0..spec.num_samples {
        let img = match spec.generator {
            Generator::Bars => draw_bars(&mut rng),
            Generator::Checker => checker_image(spec, &mut rng),
            Generator::Constant => vec![(spec.num_cats - 1) as u16; nv],
            Generator::Mixture => {
                if rng.random::<bool>() {
                    draw_bars(&mut rng)
                } else {
                    checker_image(spec, &mut rng)
                }
            }
        };
        data.extend(img);
    }
    Ok(Dataset::new(nv, spec.num_cats, data).expect("generated rows are in range"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::log_likelihood;
    use crate::oracle::{enumerate_distribution, EnumerationBudget};

    #[test]
    fn bars_circuit_is_valid_and_normalized() {
        let c = bars_circuit(4, 4, 2, 0.1);
        assert!(c.validate().is_valid());
        let dist = enumerate_distribution(&c, &EnumerationBudget::default()).unwrap();
        let total: f64 = dist.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn clean_bar_probability() {
        // Noise-free 4x4: one horizontal band on. Only the horizontal branch explains it.
        let c = bars_circuit(4, 4, 2, 0.0);
        let mut img = vec![0u16; 16];
        img[4..8].fill(1);
        let expected = 0.5 * 0.5f64.powi(4);
        assert!((log_likelihood(&c, &img).unwrap() - expected.ln()).abs() < 1e-12);
        // The blank image is explained by both orientations.
        let blank = log_likelihood(&c, &[0u16; 16]).unwrap();
        assert!((blank - (0.5f64.powi(4)).ln()).abs() < 1e-12);
    }

    #[test]
    fn generation_is_reproducible() {
        for g in [Generator::Bars, Generator::Checker, Generator::Constant, Generator::Mixture] {
            let spec = ToyDatasetSpec::new(g, 8, 8, 20, 11);
            let a = generate(&spec).unwrap();
            assert_eq!(a, generate(&spec).unwrap());
            assert_eq!(a.num_samples(), 20);
        }
        let other = generate(&ToyDatasetSpec::new(Generator::Bars, 8, 8, 20, 12)).unwrap();
        assert_ne!(other, generate(&ToyDatasetSpec::new(Generator::Bars, 8, 8, 20, 11)).unwrap());
    }

    #[test]
    fn bars_samples_are_banded() {
        let spec = ToyDatasetSpec { noise: 0.0, ..ToyDatasetSpec::new(Generator::Bars, 8, 8, 50, 3) };
        let d = generate(&spec).unwrap();
        for img in d.rows() {
            let rows_const = (0..8).all(|r| img[r * 8..r * 8 + 8].iter().all(|&v| v == img[r * 8]));
            let cols_const = (0..8).all(|c| (0..8).all(|r| img[r * 8 + c] == img[c]));
            assert!(rows_const || cols_const);
        }
        assert!(generate(&ToyDatasetSpec::new(Generator::Constant, 2, 2, 3, 0)).unwrap().as_slice().iter().all(|&v| v == 1));
        assert!(matches!(Generator::parse("stripes"), Err(DatasetError::UnknownGenerator(_))));
    }
}
