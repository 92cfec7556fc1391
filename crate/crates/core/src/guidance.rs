//! The guided denoising loop: circuit posterior under noise and inpainting
//! evidence, geometric-mean mixing with the denoiser, and the α schedule.

use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::circuit::Circuit;
use crate::diffusion::{initial_state, per_variable_noise_weights, reverse_step, DiffusionError, FactorizedDenoiser, NoiseSchedule, NoisyState};
use crate::inference::{posterior_marginals, InferenceError, PosteriorMarginals};
use crate::latent::{estimate_latent_evidence, latent_guided_sample, LatentError, PatchCodebook, SoftAssign};
use crate::rng::{stream, Rng};
use crate::table::CategoricalTable;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GuidanceError {
    #[error("variable {var} has no category supported by both distributions")]
    DegenerateMix { var: usize },
    #[error("expected {expected} {what}, got {found}")]
    DimMismatch { what: &'static str, expected: usize, found: usize },
    #[error("invalid mixing coefficient {0}")]
    InvalidAlpha(f64),
    #[error("reverse step t = {t} failed: {source}")]
    AtStep {
        t: usize,
        #[source]
        source: Box<GuidanceError>,
    },
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Latent(#[from] LatentError),
}

/// Exponentially decaying mixing weight with a cutoff below which the
/// circuit is not consulted.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixSchedule {
    pub a: f64,
    pub b: f64,
    pub lambda: f64,
    pub t_cut: usize,
    pub num_steps: usize,
}

impl MixSchedule {
    pub fn new(a: f64, b: f64, lambda: f64, t_cut: usize, num_steps: usize) -> Self {
        Self { a, b, lambda, t_cut, num_steps }
    }

    pub fn celeba() -> Self {
        Self::new(0.8, 1.0, 2.0, 200, 250)
    }

    pub fn imagenet() -> Self {
        Self::new(0.8, 1.0, 2.0, 235, 250)
    }

    pub fn lsun() -> Self {
        Self::imagenet()
    }

    /// Looks up a preset by dataset name.
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "celeba" => Some(Self::celeba()),
            "imagenet" => Some(Self::imagenet()),
            "lsun" => Some(Self::lsun()),
            _ => None,
        }
    }

    /// Never consults the circuit.
    pub fn unguided(num_steps: usize) -> Self {
        Self::new(1.0, 1.0, 0.0, num_steps, num_steps)
    }

    pub fn alpha_at(&self, t: usize) -> f64 {
        alpha_at(t, self)
    }

    pub fn guided_steps(&self) -> usize {
        (1..=self.num_steps).filter(|&t| self.alpha_at(t) < 1.0).count()
    }
}

impl Default for MixSchedule {
    fn default() -> Self {
        Self::celeba()
    }
}

/// `1` for `t ≤ t_cut`, otherwise `(b − a)·exp(−λ·t/T) + a`.
pub fn alpha_at(t: usize, s: &MixSchedule) -> f64 {
    if t <= s.t_cut {
        return 1.0;
    }
    (s.b - s.a) * (-s.lambda * t as f64 / s.num_steps as f64).exp() + s.a
}

/// Known pixels of an inpainting problem.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InpaintTask {
    known: Vec<Option<u16>>,
}

impl InpaintTask {
    pub fn from_known(known: Vec<Option<u16>>) -> Self {
        Self { known }
    }

    /// `missing[i] == true` hides pixel `i` of `image`.
    pub fn from_image(image: &[u16], missing: &[bool]) -> Self {
        assert_eq!(image.len(), missing.len(), "image and mask sizes differ");
        Self { known: image.iter().zip(missing).map(|(&v, &m)| (!m).then_some(v)).collect() }
    }

    pub fn unconstrained(num_vars: usize) -> Self {
        Self { known: vec![None; num_vars] }
    }

    pub fn num_vars(&self) -> usize {
        self.known.len()
    }

    pub fn known_values(&self) -> &[Option<u16>] {
        &self.known
    }

    pub fn known_mask(&self) -> Vec<bool> {
        self.known.iter().map(Option::is_some).collect()
    }

    pub fn num_known(&self) -> usize {
        self.known.iter().filter(|k| k.is_some()).count()
    }

    /// Fraction of known pixels reproduced by `image` (1.0 when none are known).
    pub fn match_rate(&self, image: &[u16]) -> f64 {
        let n = self.num_known();
        if n == 0 {
            return 1.0;
        }
        let hits = self.known.iter().zip(image).filter(|(k, &v)| **k == Some(v)).count();
        hits as f64 / n as f64
    }
}

/// `p_TPM(x̃_0 | x_t, x_0^k)`: noise weights on unknown pixels, indicators on known ones.
pub fn tpm_posterior(
    circuit: &Circuit<f64>,
    state: &NoisyState,
    task: &InpaintTask,
    sched: &NoiseSchedule,
) -> Result<PosteriorMarginals<f64>, GuidanceError> {
    check_dims(circuit.num_vars(), task.num_vars(), "task variables")?;
    check_dims(circuit.num_vars(), state.values.len(), "state values")?;
    let ev = per_variable_noise_weights(state, sched, task.known_values());
    Ok(posterior_marginals(circuit, &ev)?)
}

fn check_dims(expected: usize, found: usize, what: &'static str) -> Result<(), GuidanceError> {
    if expected != found {
        return Err(GuidanceError::DimMismatch { what, expected, found });
    }
    Ok(())
}

/// Per-variable log-linear pool `p ∝ p_DM^α · p_TPM^{1−α}`. The endpoints
/// return a copy of the corresponding input.
pub fn mix_distributions(
    p_dm: &CategoricalTable<f64>,
    p_tpm: &CategoricalTable<f64>,
    alpha: f64,
) -> Result<CategoricalTable<f64>, GuidanceError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(GuidanceError::InvalidAlpha(alpha));
    }
    check_dims(p_dm.num_vars(), p_tpm.num_vars(), "variables")?;
    check_dims(p_dm.num_cats(), p_tpm.num_cats(), "categories")?;
    if alpha == 1.0 {
        return Ok(p_dm.clone());
    }
    if alpha == 0.0 {
        return Ok(p_tpm.clone());
    }
    let nc = p_dm.num_cats();
    let mut out = Vec::with_capacity(p_dm.num_vars() * nc);
    let mut logits = vec![0.0; nc];
    for v in 0..p_dm.num_vars() {
        for ((l, &d), &t) in logits.iter_mut().zip(p_dm.row(v)).zip(p_tpm.row(v)) {
            *l = if d > 0.0 && t > 0.0 { alpha * d.ln() + (1.0 - alpha) * t.ln() } else { f64::NEG_INFINITY };
        }
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if m == f64::NEG_INFINITY {
            return Err(GuidanceError::DegenerateMix { var: v });
        }
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        out.extend(logits.iter().map(|l| (l - m).exp() / z));
    }
    Ok(CategoricalTable::from_vec(p_dm.num_vars(), nc, out))
}

/// Which tractable model, if any, steers the denoiser.
#[derive(Clone, Copy, Debug)]
pub enum Guide<'a> {
    None,
    /// Circuit over pixels.
    Pixel(&'a Circuit<f64>),
    /// Circuit over patch codes of a codebook.
    Latent {
        circuit: &'a Circuit<f64>,
        codebook: &'a PatchCodebook,
        assign: SoftAssign,
        evidence_samples: usize,
        decodes: usize,
    },
}

/// Reconstructions at one step of the loop.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Snapshot {
    pub t: usize,
    pub alpha: f64,
    pub dm: CategoricalTable<f64>,
    /// Absent when there is no guide.
    pub tpm: Option<CategoricalTable<f64>>,
    pub mixed: CategoricalTable<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct PhaseTimings {
    pub denoiser_secs: f64,
    pub circuit_secs: f64,
    pub mix_secs: f64,
    pub total_secs: f64,
    pub guided_steps: usize,
    pub total_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InpaintOutcome {
    pub image: Vec<u16>,
    pub trace: Vec<Snapshot>,
    pub timings: PhaseTimings,
}

/// Whether step `t` of a `T`-step run is snapshotted with `trace_every = k`.
pub fn is_trace_step(t: usize, num_steps: usize, k: usize) -> bool {
    t == 1 || (t >= 2 && (num_steps - t).is_multiple_of(k))
}

fn guide_posterior(
    guide: &Guide<'_>,
    state: &NoisyState,
    task: &InpaintTask,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Option<CategoricalTable<f64>>, GuidanceError> {
    match *guide {
        Guide::None => Ok(None),
        Guide::Pixel(c) => Ok(Some(tpm_posterior(c, state, task, sched)?.marginals)),
        Guide::Latent { circuit, codebook, assign, evidence_samples, decodes } => {
            check_dims(codebook.num_pixels(), task.num_vars(), "task variables")?;
            let pixel_ev = per_variable_noise_weights(state, sched, task.known_values());
            let latent_ev = estimate_latent_evidence(codebook, &pixel_ev, evidence_samples, assign, rng)?;
            let mut table = latent_guided_sample(circuit, codebook, &latent_ev, decodes, rng)?.pixels;
            // Decoding is lossy; the inpainting constraints stay hard.
            for (v, k) in task.known_values().iter().enumerate() {
                if let Some(c) = k {
                    let row = table.row_mut(v);
                    row.fill(0.0);
                    row[*c as usize] = 1.0;
                }
            }
            Ok(Some(table))
        }
    }
}

/// Runs the full reverse process from pure noise.
///
/// The denoiser trajectory draws only from the `sample` substream of
/// `seed`; the latent guide draws from `guide`, so switching guidance off
/// leaves the trajectory unchanged. With `trace_every = Some(k)` the
/// reconstructions at every `k`-th step from `T`, plus `t = 1`, are kept.
pub fn run_inpainting(
    guide: &Guide<'_>,
    denoiser: &FactorizedDenoiser,
    task: &InpaintTask,
    sched: &NoiseSchedule,
    mix: &MixSchedule,
    seed: u64,
    trace_every: Option<usize>,
) -> Result<InpaintOutcome, GuidanceError> {
    check_dims(denoiser.num_vars(), task.num_vars(), "task variables")?;
    check_dims(sched.num_steps(), mix.num_steps, "mix schedule steps")?;
    let trace_every = trace_every.map(|k| k.max(1));
    let mut rng = stream(seed, "sample");
    let mut guide_rng = stream(seed, "guide");
    let total = Instant::now();
    let mut timings = PhaseTimings { total_steps: sched.num_steps(), ..Default::default() };
    let mut trace = Vec::new();
    let mut state = initial_state(task.num_vars(), sched, &mut rng);

    for t in (1..=sched.num_steps()).rev() {
        let at = |source: GuidanceError| GuidanceError::AtStep { t, source: Box::new(source) };
        let alpha = mix.alpha_at(t);
        let tracing = trace_every.is_some_and(|k| is_trace_step(t, sched.num_steps(), k));

        let clock = Instant::now();
        let p_dm = denoiser.posterior(&state, sched, task.known_values()).map_err(|e| at(e.into()))?;
        timings.denoiser_secs += clock.elapsed().as_secs_f64();

        let guided = alpha < 1.0 && !matches!(guide, Guide::None);
        let p_tpm = if guided || tracing {
            let clock = Instant::now();
            let p = guide_posterior(guide, &state, task, sched, &mut guide_rng).map_err(at)?;
            if guided {
                timings.circuit_secs += clock.elapsed().as_secs_f64();
                timings.guided_steps += 1;
            }
            p
        } else {
            None
        };

        let mixed = match (&p_tpm, guided) {
            (Some(p), true) => {
                let clock = Instant::now();
                let m = mix_distributions(&p_dm, p, alpha).map_err(at)?;
                timings.mix_secs += clock.elapsed().as_secs_f64();
                m
            }
            _ => p_dm.clone(),
        };
        state = reverse_step(&mixed, &state, sched, &mut rng);
        if tracing {
            trace.push(Snapshot { t, alpha, dm: p_dm, tpm: p_tpm, mixed });
        }
    }
    timings.total_secs = total.elapsed().as_secs_f64();
    Ok(InpaintOutcome { image: state.categories(sched), trace, timings })
}

/// Mask families, `true` marking a missing pixel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskKind {
    /// Left half of the columns.
    Left,
    /// Top half of the rows.
    Top,
    /// Everything outside the central half-size box.
    Expand,
    /// Every other column.
    VStrip,
    /// Every other row.
    HStrip,
    /// Two random rectangles of a quarter to a half of each side.
    Wide,
}

impl MaskKind {
    pub const ALL: [MaskKind; 6] = [Self::Left, Self::Top, Self::Expand, Self::VStrip, Self::HStrip, Self::Wide];

    pub fn name(self) -> &'static str {
        match self {
            Self::Left => "left",
            Self::Top => "top",
            Self::Expand => "expand",
            Self::VStrip => "v-strip",
            Self::HStrip => "h-strip",
            Self::Wide => "wide",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

/// Row-major missing-pixel mask. Only [`MaskKind::Wide`] draws from `rng`.
pub fn make_mask(kind: MaskKind, height: usize, width: usize, rng: &mut Rng) -> Vec<bool> {
    let mut mask = vec![false; height * width];
    let mut cover = |r0: usize, r1: usize, c0: usize, c1: usize| {
        for r in r0..r1 {
            for c in c0..c1 {
                mask[r * width + c] = true;
            }
        }
    };
    match kind {
        MaskKind::Left => cover(0, height, 0, width / 2),
        MaskKind::Top => cover(0, height / 2, 0, width),
        MaskKind::Expand => {
            let (r0, c0) = (height / 4, width / 4);
            let (r1, c1) = (r0 + height.div_ceil(2), c0 + width.div_ceil(2));
            cover(0, r0, 0, width);
            cover(r1, height, 0, width);
            cover(r0, r1, 0, c0);
            cover(r0, r1, c1, width);
        }
        MaskKind::VStrip => (0..width).step_by(2).for_each(|c| cover(0, height, c, c + 1)),
        MaskKind::HStrip => (0..height).step_by(2).for_each(|r| cover(r, r + 1, 0, width)),
        MaskKind::Wide => {
            for _ in 0..2 {
                let h = rng.random_range((height / 4).max(1)..=(height / 2).max(1));
                let w = rng.random_range((width / 4).max(1)..=(width / 2).max(1));
                let r0 = rng.random_range(0..=height - h);
                let c0 = rng.random_range(0..=width - w);
                cover(r0, r0 + h, c0, c0 + w);
            }
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::tests::figure_two_like;
    use crate::learning::Dataset;
    use crate::rng::seeded;
    use proptest::prelude::*;

    #[test]
    fn schedule_closed_form() {
        let s = MixSchedule::celeba();
        assert_eq!(s.alpha_at(200), 1.0);
        assert_eq!(s.alpha_at(1), 1.0);
        assert!((s.alpha_at(250) - (0.8 + 0.2 * (-2.0f64).exp())).abs() < 1e-15);
        assert!((s.alpha_at(250) - 0.8271).abs() < 1e-4);
        assert_eq!(s.guided_steps(), 50);
        assert_eq!(MixSchedule::imagenet().guided_steps(), 15);
    }

    #[test]
    fn mixing_symmetric_case() {
        let d = CategoricalTable::from_vec(1, 2, vec![0.8, 0.2]);
        let t = CategoricalTable::from_vec(1, 2, vec![0.2, 0.8]);
        let m = mix_distributions(&d, &t, 0.5).unwrap();
        assert!((m.row(0)[0] - 0.5).abs() < 1e-15);
        assert_eq!(mix_distributions(&d, &t, 1.0).unwrap(), d);
        assert_eq!(mix_distributions(&d, &t, 0.0).unwrap(), t);
    }

    #[test]
    fn disjoint_support_is_degenerate() {
        let d = CategoricalTable::from_vec(2, 2, vec![0.5, 0.5, 1.0, 0.0]);
        let t = CategoricalTable::from_vec(2, 2, vec![0.5, 0.5, 0.0, 1.0]);
        assert_eq!(mix_distributions(&d, &t, 0.3).unwrap_err(), GuidanceError::DegenerateMix { var: 1 });
        assert!(mix_distributions(&d, &t, 1.0).is_ok());
    }

    proptest! {
        #[test]
        fn mixing_ignores_row_scale(p in prop::collection::vec(0.01f64..1.0, 3), q in prop::collection::vec(0.01f64..1.0, 3), s in 0.1f64..10.0, alpha in 0.0f64..1.0) {
            let d = CategoricalTable::from_vec(1, 3, p.clone());
            let scaled = CategoricalTable::from_vec(1, 3, p.iter().map(|x| x * s).collect());
            let t = CategoricalTable::from_vec(1, 3, q);
            let a = mix_distributions(&d, &t, alpha).unwrap();
            let b = mix_distributions(&scaled, &t, alpha).unwrap();
            prop_assert!(a.max_abs_diff(&b) < 1e-12);
        }
    }

    fn constant_setup() -> (FactorizedDenoiser, NoiseSchedule) {
        let data = Dataset::new(4, 2, vec![1; 4 * 20]).unwrap();
        (FactorizedDenoiser::train(&data, 0.01), NoiseSchedule::linear(50, 1e-4, 0.2, 2).unwrap())
    }

    #[test]
    fn unguided_cutoff_reproduces_the_denoiser_trajectory() {
        let (dm, sched) = constant_setup();
        let c = figure_two_like();
        let task = InpaintTask::from_known(vec![Some(1), None, None, None]);
        let off = MixSchedule::new(0.8, 1.0, 2.0, 50, 50);
        let a = run_inpainting(&Guide::Pixel(&c), &dm, &task, &sched, &off, 3, Some(7)).unwrap();
        let b = run_inpainting(&Guide::None, &dm, &task, &sched, &off, 3, Some(7)).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.timings.guided_steps, 0);
        assert_eq!(a.trace.len(), (50 - 1usize).div_ceil(7) + 1);
        assert!(a.trace.iter().all(|s| s.tpm.is_some()));
        assert!(b.trace.iter().all(|s| s.tpm.is_none()));
    }

    #[test]
    fn fully_known_task_returns_the_image() {
        let (dm, sched) = constant_setup();
        let c = figure_two_like();
        let img = vec![0u16, 1, 0, 1];
        let task = InpaintTask::from_image(&img, &[false; 4]);
        let mix = MixSchedule::new(0.5, 0.5, 0.0, 0, 50);
        let out = run_inpainting(&Guide::Pixel(&c), &dm, &task, &sched, &mix, 9, None).unwrap();
        assert_eq!(out.image, img);
        assert_eq!(out.timings.guided_steps, 50);
    }

    #[test]
    fn constant_dataset_denoises_to_the_constant() {
        let (dm, sched) = constant_setup();
        let task = InpaintTask::unconstrained(4);
        let mut ones = 0;
        for seed in 0..50 {
            let out = run_inpainting(&Guide::None, &dm, &task, &sched, &MixSchedule::unguided(50), seed, None).unwrap();
            ones += out.image.iter().filter(|&&v| v == 1).count();
        }
        assert!(ones as f64 > 0.99 * 200.0);
    }

    #[test]
    fn failing_step_is_reported() {
        let (_, sched) = constant_setup();
        let dm = FactorizedDenoiser::untrained(4, 2);
        let err = run_inpainting(&Guide::None, &dm, &InpaintTask::unconstrained(4), &sched, &MixSchedule::unguided(50), 0, None)
            .unwrap_err();
        assert!(matches!(err, GuidanceError::AtStep { t: 50, .. }));
    }

    #[test]
    fn mask_shapes() {
        let mut rng = seeded(0);
        let left = make_mask(MaskKind::Left, 4, 4, &mut rng);
        assert_eq!(left, [[true, true, false, false]; 4].concat());
        let top = make_mask(MaskKind::Top, 4, 2, &mut rng);
        assert_eq!(top, vec![true, true, true, true, false, false, false, false]);
        let expand = make_mask(MaskKind::Expand, 4, 4, &mut rng);
        assert_eq!(expand.iter().filter(|&&m| !m).count(), 4);
        assert!(!expand[5] && !expand[10]);
        let wide = make_mask(MaskKind::Wide, 8, 8, &mut rng);
        assert!(wide.iter().any(|&m| m));
        for k in MaskKind::ALL {
            assert_eq!(MaskKind::parse(k.name()), Some(k));
        }
    }
}
