use proptest::prelude::*;

use pcguide::diffusion::{forward_noise, NoiseSchedule, NoisyState};
use pcguide::guidance::{tpm_posterior, InpaintTask};
use pcguide::inference::{conditional_sample, posterior_marginals, InferenceError};
use pcguide::oracle::{enumerate_distribution, oracle_soft_evidence_marginals, weights_from_logs, EnumerationBudget};
use pcguide::random::{random_circuit, RandomCircuitSpec};
use pcguide::rng::seeded;
use pcguide::{Circuit32, Circuit64, SoftEvidence};

fn spec(num_vars: usize, num_cats: usize, alternating: bool, tie_prob: f64) -> RandomCircuitSpec {
    RandomCircuitSpec { num_vars, num_cats, alternating, tie_prob, ..Default::default() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn marginals_match_enumeration(
        seed in any::<u64>(),
        nv in 1usize..7,
        nc in 2usize..4,
        alternating in any::<bool>(),
        logs in prop::collection::vec(-4.0f64..4.0, 24),
    ) {
        let mut rng = seeded(seed);
        let c: Circuit64 = random_circuit(&spec(nv, nc, alternating, 0.2), &mut rng);
        let ev = SoftEvidence::from_log_weights(nv, nc, logs[..nv * nc].to_vec()).unwrap();
        let fast = posterior_marginals(&c, &ev).unwrap();
        let exact = oracle_soft_evidence_marginals(&c, &weights_from_logs(ev.log_weights(), nc), &EnumerationBudget::default()).unwrap();
        prop_assert!((fast.log_z - exact.log_z()).abs() <= 1e-9 * exact.log_z().abs().max(1.0));
        for v in 0..nv {
            for k in 0..nc {
                prop_assert!((fast.marginals.row(v)[k] - exact.marginals[v][k]).abs() < 1e-9);
            }
            let s: f64 = fast.marginals.row(v).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_precision_tracks_double(seed in any::<u64>(), nv in 2usize..6) {
        let c: Circuit64 = random_circuit(&spec(nv, 2, true, 0.0), &mut seeded(seed));
        let c32: Circuit32 = c.cast();
        let ev64 = SoftEvidence::<f64>::uniform(nv, 2);
        let a = posterior_marginals(&c, &ev64).unwrap();
        let b = posterior_marginals(&c32, &ev64.cast::<f32>()).unwrap();
        for (x, y) in a.marginals.as_slice().iter().zip(b.marginals.as_slice()) {
            prop_assert!((x - *y as f64).abs() < 1e-4);
        }
    }

    #[test]
    fn scaling_evidence_rows_only_shifts_log_z(seed in any::<u64>(), var in 0usize..4, shift in -5.0f64..5.0) {
        let c: Circuit64 = random_circuit(&spec(4, 3, false, 0.0), &mut seeded(seed));
        let mut ev = SoftEvidence::<f64>::uniform(4, 3);
        ev.set_log_weights(0, &[0.3, -1.0, 2.0]);
        let a = posterior_marginals(&c, &ev).unwrap();
        ev.scale(var, shift);
        let b = posterior_marginals(&c, &ev).unwrap();
        prop_assert!((b.log_z - a.log_z - shift).abs() < 1e-10);
        prop_assert!(a.marginals.max_abs_diff(&b.marginals) < 1e-12);
    }
}

#[test]
fn contradictory_hard_evidence_is_reported() {
    let mut b = pcguide::CircuitBuilder::new(2, 2);
    let x0 = b.input(0, &[1.0, 0.0]);
    let x1 = b.input(1, &[0.5, 0.5]);
    let p = b.product(&[x0, x1]);
    let _ = b.sum(&[p], &[1.0]);
    let c = b.build().unwrap();
    let ev = SoftEvidence::from_hard(&[1, 0], 2);
    assert!(matches!(posterior_marginals(&c, &ev), Err(InferenceError::AllZeroEvidence { .. })));
}

#[test]
fn conditional_samples_follow_the_posterior() {
    let c: Circuit64 = random_circuit(&spec(3, 2, true, 0.0), &mut seeded(21));
    let mut ev = SoftEvidence::<f64>::uniform(3, 2);
    ev.set_log_weights(1, &[0.0, 1.5]);
    ev.set_hard(2, 1);
    let n = 40_000;
    let samples = conditional_sample(&c, &ev, 3, n).unwrap();
    let exact = oracle_soft_evidence_marginals(&c, &weights_from_logs(ev.log_weights(), 2), &EnumerationBudget::default()).unwrap();
    for v in 0..3 {
        let freq = samples.iter().filter(|s| s[v] == 1).count() as f64 / n as f64;
        let p = exact.marginals[v][1];
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!((freq - p).abs() <= 4.0 * sigma + 1e-12, "var {v}: {freq} vs {p}");
    }
    assert!(samples.iter().all(|s| s[2] == 1));
}

/// Brute-force posterior of the inpainting problem: p(x) ∏ known indicators ∏ noise likelihoods.
fn guided_posterior_oracle(c: &Circuit64, state: &NoisyState, task: &InpaintTask, sched: &NoiseSchedule) -> Vec<Vec<f64>> {
    let ab = sched.alpha_bar(state.t);
    let weights: Vec<Vec<f64>> = (0..c.num_vars())
        .map(|v| match task.known_values()[v] {
            Some(k) => (0..c.num_cats()).map(|j| if j == k as usize { 1.0 } else { 0.0 }).collect(),
            None => sched
                .value_grid()
                .iter()
                .map(|g| (-(state.values[v] - ab.sqrt() * g).powi(2) / (2.0 * (1.0 - ab))).exp())
                .collect(),
        })
        .collect();
    oracle_soft_evidence_marginals(c, &weights, &EnumerationBudget::default()).unwrap().marginals
}

#[test]
fn tpm_posterior_matches_enumeration() {
    let c: Circuit64 = random_circuit(&spec(4, 3, true, 0.0), &mut seeded(4));
    let sched = NoiseSchedule::linear(100, 1e-4, 0.02, 3).unwrap();
    let state = NoisyState { values: vec![0.4, -1.2, 0.1, 0.9], t: 37 };
    let task = InpaintTask::from_known(vec![Some(2), None, Some(0), None]);
    let fast = tpm_posterior(&c, &state, &task, &sched).unwrap();
    let exact = guided_posterior_oracle(&c, &state, &task, &sched);
    for (v, row) in exact.iter().enumerate() {
        for (k, p) in row.iter().enumerate() {
            assert!((fast.marginals.row(v)[k] - p).abs() < 1e-9);
        }
    }
}

#[test]
fn tpm_posterior_limits() {
    let c: Circuit64 = random_circuit(&spec(4, 2, true, 0.0), &mut seeded(8));
    let sched = NoiseSchedule::linear(1000, 1e-4, 0.02, 2).unwrap();
    let image = [1u16, 0, 1, 1];
    let state = forward_noise(&image, 10, &sched, &mut seeded(1));
    let all = tpm_posterior(&c, &state, &InpaintTask::from_image(&image, &[false; 4]), &sched).unwrap();
    assert_eq!(all.marginals.argmax(), image.to_vec());
    assert!(all.marginals.as_slice().iter().all(|&p| p == 0.0 || p == 1.0));

    // With alpha-bar near zero the noise weights are flat, leaving the prior marginal.
    let flat = NoiseSchedule::linear(20, 0.9, 0.9, 2).unwrap();
    assert!(flat.alpha_bar(20) < 1e-19);
    let noisy = forward_noise(&image, 20, &flat, &mut seeded(2));
    let none = tpm_posterior(&c, &noisy, &InpaintTask::unconstrained(4), &flat).unwrap();
    let joint = enumerate_distribution(&c, &EnumerationBudget::default()).unwrap();
    for v in 0..4 {
        let p1: f64 = joint.iter().enumerate().filter(|(i, _)| (i >> v) & 1 == 1).map(|(_, p)| p).sum();
        assert!((none.marginals.row(v)[1] - p1).abs() < 1e-6, "var {v}");
    }
}
