use pcguide::datasets::{generate, Generator, ToyDatasetSpec};
use pcguide::inference::log_likelihood_batch;
use pcguide::learning::{build_pd_circuit, em_step, fit, EmConfig, LearningError, PdStructureConfig};
use pcguide::oracle::{expected_flows, EnumerationBudget, enumerate_distribution};
use pcguide::{Circuit32, Circuit64};

fn bars(h: usize, w: usize, n: usize, seed: u64) -> pcguide::learning::Dataset {
    generate(&ToyDatasetSpec::new(Generator::Bars, h, w, n, seed)).unwrap()
}

#[test]
fn pd_circuit_learns_bars_and_beats_its_initialization() {
    let data = bars(4, 4, 300, 1);
    let (test, train) = data.split_at(60);
    let cfg = PdStructureConfig { height: 4, width: 4, num_cats: 2, sums_per_region: 3, init_seed: 2, ..Default::default() };
    let (c0, _) = build_pd_circuit::<f64>(&cfg).unwrap();
    let em = EmConfig { num_iterations: 30, batch_size: 100, seed: 3, ..EmConfig::default() };
    let (c, report) = fit(&c0, &train, &em).unwrap();
    assert!(report.avg_ll.last().unwrap() > &report.initial_avg_ll);
    let held_out = |c: &Circuit64| log_likelihood_batch(c, test.as_slice()).unwrap().iter().sum::<f64>() / 60.0;
    assert!(held_out(&c) > held_out(&c0) + 1.0);
    assert!(c.validate().is_valid());
    let total: f64 = enumerate_distribution(&c, &EnumerationBudget::default()).unwrap().iter().sum();
    assert!((total - 1.0).abs() < 1e-9);
}

#[test]
fn training_is_reproducible_and_seed_sensitive() {
    let data = bars(4, 4, 200, 5);
    let cfg = PdStructureConfig { height: 4, width: 4, num_cats: 2, sums_per_region: 2, init_seed: 1, ..Default::default() };
    let (c0, _) = build_pd_circuit::<f64>(&cfg).unwrap();
    let em = EmConfig { num_iterations: 5, batch_size: 64, seed: 9, ..EmConfig::default() };
    let (_, a) = fit(&c0, &data, &em).unwrap();
    let (_, b) = fit(&c0, &data, &em).unwrap();
    assert_eq!(a, b);
    let (_, other) = fit(&c0, &data, &EmConfig { seed: 10, ..em }).unwrap();
    assert_ne!(a.param_checksum, other.param_checksum);
}

#[test]
fn single_precision_training_stays_finite() {
    let data = bars(4, 4, 100, 2);
    let cfg = PdStructureConfig { height: 4, width: 4, num_cats: 2, sums_per_region: 2, tie_leaf_params: true, ..Default::default() };
    let (c0, _) = build_pd_circuit::<f32>(&cfg).unwrap();
    let (c, report): (Circuit32, _) = fit(&c0, &data, &EmConfig { num_iterations: 20, ..EmConfig::default() }).unwrap();
    assert!(report.avg_ll.iter().all(|v| v.is_finite()));
    assert!(c.all_params().iter().all(|p| p.is_finite()));
}

#[test]
fn full_step_equals_normalized_oracle_flows() {
    let data = bars(2, 2, 40, 3);
    let cfg = PdStructureConfig { height: 2, width: 2, num_cats: 2, sums_per_region: 2, ..Default::default() };
    let (c, _) = build_pd_circuit::<f64>(&cfg).unwrap();
    let em = EmConfig { step_size: 1.0, pseudocount: 0.0, ..EmConfig::default() };
    let next = em_step(&c, data.as_slice(), &em).unwrap();
    let rows: Vec<Vec<u16>> = data.rows().map(<[u16]>::to_vec).collect();
    let flows = expected_flows(&c, &rows);
    for (_, start, len) in c.param_blocks() {
        let total: f64 = flows[start..start + len].iter().sum();
        for k in 0..len {
            assert!((next.all_params()[start + k] - flows[start + k] / total).abs() < 1e-9);
        }
    }
}

#[test]
fn invalid_inputs_are_rejected() {
    let cfg = PdStructureConfig { height: 1, width: 4, ..Default::default() };
    assert!(matches!(build_pd_circuit::<f64>(&cfg), Err(LearningError::GridTooSmall { height: 1, width: 4 })));
    let (c, _) = build_pd_circuit::<f64>(&PdStructureConfig { height: 2, width: 2, ..Default::default() }).unwrap();
    let empty = pcguide::learning::Dataset::new(4, 2, vec![]).unwrap();
    assert!(fit(&c, &empty, &EmConfig::default()).is_err());
    let bad = EmConfig { step_size: 1.5, ..EmConfig::default() };
    assert!(matches!(bad.validate(), Err(LearningError::InvalidConfig(_))));
}
