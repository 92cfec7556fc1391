//! Randomized certification of the inference passes against the brute-force
//! oracle, plus a fixed library of malformed circuits for the validator.

use rand::Rng as _;
use serde::Serialize;

use crate::circuit::{Circuit, CircuitBuilder, NodeId, NodeKind, StructureError, ViolationKind};
use crate::inference::{backward_flows, backward_marginals, forward_soft_evidence, SoftEvidence};
use crate::oracle::{node_evidence_values, oracle_soft_evidence_marginals, weights_from_logs, EnumerationBudget};
use crate::random::{random_circuit, RandomCircuitSpec};
use crate::rng::{stream, Rng};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CertifyConfig {
    pub cases: usize,
    pub seed: u64,
    pub min_vars: usize,
    pub max_vars: usize,
    pub num_cats: usize,
    pub marginal_tol: f64,
    pub log_z_rel_tol: f64,
    pub flow_tol: f64,
}

impl Default for CertifyConfig {
    fn default() -> Self {
        Self {
            cases: 200,
            seed: 0,
            min_vars: 2,
            max_vars: 10,
            num_cats: 2,
            marginal_tol: 1e-9,
            log_z_rel_tol: 1e-9,
            flow_tol: 1e-9,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Property {
    /// The generated circuit passes structural validation.
    Valid,
    MarginalEquivalence,
    LogZ,
    /// Input-node backward values of each variable sum to one.
    FlowConservation,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CaseFailure {
    pub case: usize,
    pub num_vars: usize,
    pub property: Property,
    pub detail: String,
    /// Lowest node whose forward value disagrees with the oracle.
    pub node: Option<NodeId>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct CertifyReport {
    pub cases: usize,
    pub valid_pass: usize,
    pub marginal_pass: usize,
    pub log_z_pass: usize,
    pub flow_pass: usize,
    pub max_marginal_err: f64,
    pub max_log_z_rel_err: f64,
    pub max_flow_err: f64,
    pub failures: Vec<CaseFailure>,
}

impl CertifyReport {
    pub fn all_passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// One certification instance: a random circuit and random soft evidence.
#[derive(Clone, Debug)]
pub struct CertifyCase {
    pub circuit: Circuit<f64>,
    pub evidence: SoftEvidence<f64>,
}

/// Log weights in `[−3, 3]`; about one entry in ten is a hard zero, never a whole row.
pub fn random_evidence(num_vars: usize, num_cats: usize, rng: &mut Rng) -> SoftEvidence<f64> {
    let mut logs = Vec::with_capacity(num_vars * num_cats);
    for _ in 0..num_vars {
        let keep = rng.random_range(0..num_cats);
        for k in 0..num_cats {
            let l = if k != keep && rng.random_bool(0.1) { f64::NEG_INFINITY } else { rng.random_range(-3.0..3.0) };
            logs.push(l);
        }
    }
    SoftEvidence::from_log_weights(num_vars, num_cats, logs).expect("shape matches")
}

/// The `i`-th case of the battery for `cfg.seed`. Cases alternate between
/// alternating and general circuits and sometimes tie input parameters.
pub fn make_case(cfg: &CertifyConfig, i: usize) -> CertifyCase {
    let mut rng = stream(cfg.seed, &format!("certify/{i}"));
    let spec = RandomCircuitSpec {
        num_vars: rng.random_range(cfg.min_vars..=cfg.max_vars),
        num_cats: cfg.num_cats,
        alternating: i.is_multiple_of(2),
        tie_prob: if i.is_multiple_of(3) { 0.3 } else { 0.0 },
        ..RandomCircuitSpec::default()
    };
    let circuit = random_circuit(&spec, &mut rng);
    let evidence = random_evidence(spec.num_vars, spec.num_cats, &mut rng);
    CertifyCase { circuit, evidence }
}

/// Lowest-layer node whose soft-evidence value differs from the oracle value
/// computed on `reference`.
pub fn localize(fast: &Circuit<f64>, reference: &Circuit<f64>, ev: &SoftEvidence<f64>, rel_tol: f64) -> Option<NodeId> {
    let fw = forward_soft_evidence(fast, ev).ok()?;
    let weights = weights_from_logs(ev.log_weights(), ev.num_cats());
    let exact = node_evidence_values(reference, &weights, &EnumerationBudget::default()).ok()?;
    fast.topological_order().iter().copied().find(|&n| {
        let got = fw.log_fw[n as usize].exp();
        let want = exact[n as usize];
        (got - want).abs() > rel_tol * want.abs().max(f64::MIN_POSITIVE)
    })
}

/// Rewrites the circuit seen by the fast passes.
pub type Tamper<'a> = &'a dyn Fn(&Circuit<f64>) -> Circuit<f64>;

/// Runs the battery. `tamper`, when given, rewrites the circuit handed to the
/// fast passes while the oracle keeps the original; it exists to show that
/// the battery catches and localizes a corrupted parameter.
pub fn run_battery(cfg: &CertifyConfig, tamper: Option<Tamper<'_>>) -> CertifyReport {
    let mut report = CertifyReport { cases: cfg.cases, ..Default::default() };
    let budget = EnumerationBudget::default();
    for i in 0..cfg.cases {
        let CertifyCase { circuit, evidence } = make_case(cfg, i);
        let fast = tamper.map_or_else(|| circuit.clone(), |f| f(&circuit));
        let nv = circuit.num_vars();
        let mut fail = |property, detail: String, node| report.failures.push(CaseFailure { case: i, num_vars: nv, property, detail, node });

        let validation = circuit.validate();
        let valid = validation.is_valid();
        if !valid {
            fail(Property::Valid, format!("{:?}", validation.violations), validation.first_node());
        }

        let weights = weights_from_logs(evidence.log_weights(), evidence.num_cats());
        let oracle = match oracle_soft_evidence_marginals(&circuit, &weights, &budget) {
            Ok(o) => o,
            Err(e) => {
                fail(Property::MarginalEquivalence, format!("oracle: {e}"), None);
                continue;
            }
        };
        let fast_result = forward_soft_evidence(&fast, &evidence)
            .and_then(|fw| Ok((backward_marginals(&fast, &evidence, &fw)?, backward_flows(&fast, &fw)?)));
        let (marg, flows) = match fast_result {
            Ok(r) => r,
            Err(e) => {
                fail(Property::MarginalEquivalence, format!("fast path: {e}"), localize(&fast, &circuit, &evidence, 1e-9));
                continue;
            }
        };

        let mut err: f64 = 0.0;
        for (v, row) in oracle.marginals.iter().enumerate() {
            for (k, want) in row.iter().enumerate() {
                err = err.max((marg.marginals.row(v)[k] - want).abs());
            }
        }
        report.max_marginal_err = report.max_marginal_err.max(err);
        let localized = || localize(&fast, &circuit, &evidence, 1e-9);
        if err <= cfg.marginal_tol {
            report.marginal_pass += 1;
        } else {
            fail(Property::MarginalEquivalence, format!("max abs error {err:e}"), localized());
        }

        let z_err = ((marg.log_z - oracle.log_z()) / oracle.log_z().abs().max(1e-300)).abs();
        report.max_log_z_rel_err = report.max_log_z_rel_err.max(z_err);
        if z_err <= cfg.log_z_rel_tol {
            report.log_z_pass += 1;
        } else {
            fail(Property::LogZ, format!("relative error {z_err:e}"), localized());
        }

        let mut flow_err: f64 = 0.0;
        for nodes in fast.inputs_by_var() {
            let total: f64 = nodes.iter().map(|&n| flows[n as usize]).sum();
            flow_err = flow_err.max((total - 1.0).abs());
        }
        report.max_flow_err = report.max_flow_err.max(flow_err);
        if flow_err <= cfg.flow_tol {
            report.flow_pass += 1;
        } else {
            fail(Property::FlowConservation, format!("max deviation {flow_err:e}"), None);
        }
        if valid {
            report.valid_pass += 1;
        }
    }
    report
}

/// Scales the first weight of sum node `node` by `factor` without renormalizing.
pub fn scale_sum_weight(c: &Circuit<f64>, node: NodeId, factor: f64) -> Circuit<f64> {
    assert_eq!(c.kind(node), NodeKind::Sum, "node {node} is not a sum");
    let start = c.param_start(node).expect("sum nodes own parameters");
    let mut out = c.clone();
    out.set_param(start, c.all_params()[start] * factor);
    out
}

/// What the validator must report for a broken circuit.
#[derive(Clone, Debug, PartialEq)]
pub enum Expected {
    /// Construction fails with exactly this error.
    Structure(StructureError),
    /// Construction succeeds; validation reports this node first, with a
    /// violation of the named kind.
    Violation { node: NodeId, kind: &'static str },
}

#[derive(Clone, Debug)]
pub struct BrokenCase {
    pub name: &'static str,
    pub builder: CircuitBuilder<f64>,
    pub expected: Expected,
}

fn kind_name(k: &ViolationKind) -> &'static str {
    match k {
        ViolationKind::NotSmooth { .. } => "not-smooth",
        ViolationKind::NotDecomposable { .. } => "not-decomposable",
        ViolationKind::Unnormalized { .. } => "unnormalized",
        ViolationKind::NegativeParameter { .. } => "negative-parameter",
        ViolationKind::NonFiniteParameter => "non-finite-parameter",
        ViolationKind::ChildlessNode => "childless-node",
    }
}

/// Outcome of checking one library entry.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BrokenOutcome {
    pub name: &'static str,
    pub rejected: bool,
    pub localized: bool,
    pub detail: String,
}

impl BrokenCase {
    pub fn check(&self) -> BrokenOutcome {
        let result = self.builder.clone().build();
        let (rejected, localized, detail) = match (&self.expected, result) {
            (Expected::Structure(want), Err(got)) => (true, *want == got, format!("{got}")),
            (Expected::Structure(_), Ok(_)) => (false, false, "built without error".into()),
            (Expected::Violation { .. }, Err(e)) => (true, false, format!("unexpected construction error: {e}")),
            (Expected::Violation { node, kind }, Ok(c)) => {
                let r = c.validate();
                match r.violations.first() {
                    None => (false, false, "validated clean".into()),
                    Some(v) => (true, v.node == *node && kind_name(&v.kind) == *kind, format!("{v:?}")),
                }
            }
        };
        BrokenOutcome { name: self.name, rejected, localized, detail }
    }
}

/// Twelve deliberately malformed circuits covering smoothness,
/// decomposability, parameter, cycle and dangling-child defects.
pub fn broken_library() -> Vec<BrokenCase> {
    let half = [0.5, 0.5];
    let mut cases = Vec::new();
    let mut add = |name, builder, expected| cases.push(BrokenCase { name, builder, expected });

    // 1. Sum over inputs of two different variables.
    let mut b = CircuitBuilder::new(2, 2);
    let x0 = b.input(0, &half);
    let x1 = b.input(1, &half);
    let s = b.sum(&[x0, x1], &half);
    add("sum-mixed-scopes", b, Expected::Violation { node: s, kind: "not-smooth" });

    // 2. Non-smooth sum nested under a valid product.
    let mut b = CircuitBuilder::new(3, 2);
    let x0 = b.input(0, &half);
    let x1 = b.input(1, &half);
    let x2 = b.input(2, &half);
    let p01 = b.product(&[x0, x1]);
    let bad = b.sum(&[p01, x0], &half);
    let _root = b.product(&[bad, x2]);
    add("nested-non-smooth", b, Expected::Violation { node: bad, kind: "not-smooth" });

    // 3. Product of two inputs over the same variable.
    let mut b = CircuitBuilder::new(1, 2);
    let a = b.input(0, &half);
    let c = b.input(0, &[0.2, 0.8]);
    let p = b.product(&[a, c]);
    add("product-same-variable", b, Expected::Violation { node: p, kind: "not-decomposable" });

    // 4. Product whose children overlap through sub-products.
    let mut b = CircuitBuilder::new(3, 2);
    let x0 = b.input(0, &half);
    let x1 = b.input(1, &half);
    let x1b = b.input(1, &[0.3, 0.7]);
    let x2 = b.input(2, &half);
    let l = b.product(&[x0, x1]);
    let r = b.product(&[x1b, x2]);
    let p = b.product(&[l, r]);
    add("overlapping-subproducts", b, Expected::Violation { node: p, kind: "not-decomposable" });

    // 5. Sum weights adding to 1.4.
    let mut b = CircuitBuilder::new(1, 2);
    let a = b.input(0, &half);
    let c = b.input(0, &[0.1, 0.9]);
    let s = b.sum(&[a, c], &[0.7, 0.7]);
    add("sum-weights-unnormalized", b, Expected::Violation { node: s, kind: "unnormalized" });

    // 6. Input distribution adding to 0.9.
    let mut b = CircuitBuilder::new(2, 2);
    let x0 = b.input(0, &half);
    let x1 = b.input(1, &[0.4, 0.5]);
    let _p = b.product(&[x0, x1]);
    add("input-unnormalized", b, Expected::Violation { node: x1, kind: "unnormalized" });

    // 7. Negative sum weight.
    let mut b = CircuitBuilder::new(1, 2);
    let a = b.input(0, &half);
    let c = b.input(0, &[0.1, 0.9]);
    let s = b.sum(&[a, c], &[1.5, -0.5]);
    add("negative-weight", b, Expected::Violation { node: s, kind: "negative-parameter" });

    // 8. NaN in an input distribution.
    let mut b = CircuitBuilder::new(1, 2);
    let a = b.input(0, &[f64::NAN, 0.5]);
    let c = b.input(0, &half);
    let _s = b.sum(&[a, c], &half);
    add("nan-parameter", b, Expected::Violation { node: a, kind: "non-finite-parameter" });

    // 9. Product without children.
    let mut b = CircuitBuilder::new(1, 2);
    let a = b.input(0, &half);
    let empty = b.product(&[]);
    let _s = b.sum(&[a, empty], &half);
    add("childless-product", b, Expected::Violation { node: empty, kind: "childless-node" });

    // 10. Two-node cycle between a sum and a product.
    let mut b = CircuitBuilder::new(1, 2);
    let a = b.input(0, &half);
    let s = b.raw_node(NodeKind::Sum, &[a, 2], Some(&half));
    let p = b.raw_node(NodeKind::Product, &[s], None);
    let _root = b.product(&[p]);
    add("cycle", b, Expected::Structure(StructureError::CyclicGraph { node: s }));

    // 11. Child id past the end of the node table.
    let mut b = CircuitBuilder::new(1, 2);
    let a = b.input(0, &half);
    let s = b.raw_node(NodeKind::Sum, &[a, 7], Some(&half));
    add("dangling-child", b, Expected::Structure(StructureError::DanglingChild { node: s, child: 7 }));

    // 12. Sum over children of a deeper mismatched scope: {0,1} versus {0}.
    let mut b = CircuitBuilder::new(2, 2);
    let x0 = b.input(0, &half);
    let x1 = b.input(1, &half);
    let x0b = b.input(0, &[0.9, 0.1]);
    let p01 = b.product(&[x0, x1]);
    let p0 = b.product(&[x0b]);
    let s = b.sum(&[p01, p0], &half);
    add("sum-missing-variable", b, Expected::Violation { node: s, kind: "not-smooth" });

    cases
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_battery_passes() {
        let cfg = CertifyConfig { cases: 20, max_vars: 6, ..Default::default() };
        let r = run_battery(&cfg, None);
        assert!(r.all_passed(), "{:?}", r.failures);
        assert_eq!(r.marginal_pass, 20);
        assert_eq!(r.flow_pass, 20);
    }

    #[test]
    fn corruption_is_caught_and_localized() {
        let cfg = CertifyConfig { cases: 4, max_vars: 5, ..Default::default() };
        // Corrupt the lowest sum node of each case.
        let tamper = |c: &Circuit<f64>| {
            let node = c.topological_order().iter().copied().find(|&n| c.kind(n) == NodeKind::Sum).unwrap();
            scale_sum_weight(c, node, 1.5)
        };
        let r = run_battery(&cfg, Some(&tamper));
        assert!(!r.all_passed());
        for i in 0..cfg.cases {
            let case = make_case(&cfg, i);
            let expected = case.circuit.topological_order().iter().copied().find(|&n| case.circuit.kind(n) == NodeKind::Sum);
            let f = r
                .failures
                .iter()
                .find(|f| f.case == i && matches!(f.property, Property::MarginalEquivalence | Property::LogZ))
                .expect("every tampered case fails");
            assert_eq!(f.node, expected, "case {i}");
        }
    }

    #[test]
    fn node_values_match_root_normalizer() {
        let case = make_case(&CertifyConfig::default(), 3);
        let w = weights_from_logs(case.evidence.log_weights(), 2);
        let vals = node_evidence_values(&case.circuit, &w, &EnumerationBudget::default()).unwrap();
        let z = oracle_soft_evidence_marginals(&case.circuit, &w, &EnumerationBudget::default()).unwrap().z;
        assert!((vals[case.circuit.root() as usize] - z).abs() < 1e-12 * z);
        assert_eq!(localize(&case.circuit, &case.circuit, &case.evidence, 1e-9), None);
    }

    #[test]
    fn every_broken_circuit_is_rejected_at_the_right_node() {
        let lib = broken_library();
        assert_eq!(lib.len(), 12);
        for case in &lib {
            let o = case.check();
            assert!(o.rejected && o.localized, "{}: {}", o.name, o.detail);
        }
    }
}
