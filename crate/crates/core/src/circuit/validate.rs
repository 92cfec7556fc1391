//! Smoothness, decomposability and normalization checks.

use serde::Serialize;

use super::{CircuitBuilder, NodeId, NodeKind, StructureError};
use crate::scalar::Real;
use crate::Circuit;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum ViolationKind {
    /// A sum child whose scope differs from the first child's.
    NotSmooth { child: NodeId },
    /// Two product children with overlapping scopes.
    NotDecomposable { left: NodeId, right: NodeId },
    Unnormalized { total: f64 },
    NegativeParameter { value: f64 },
    NonFiniteParameter,
    /// Sum or product node without children.
    ChildlessNode,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Violation {
    pub node: NodeId,
    pub kind: ViolationKind,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    /// Nodes breaking alternation normal form. Not a validity failure: the
    /// inference passes accept any smooth, decomposable circuit.
    pub non_alternating: Vec<NodeId>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn is_alternating(&self) -> bool {
        self.non_alternating.is_empty()
    }

    pub fn first_node(&self) -> Option<NodeId> {
        self.violations.first().map(|v| v.node)
    }
}

/// Builds the circuit (which computes scopes bottom-up) and validates it.
pub fn validate_structure<T: Real>(builder: CircuitBuilder<T>) -> Result<ValidationReport, StructureError> {
    Ok(builder.build()?.validate())
}

impl<T: Real> Circuit<T> {
    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        let mut checked_blocks = std::collections::HashSet::new();
        for n in 0..self.num_nodes() as NodeId {
            let kind = self.kind(n);
            let children = self.children(n);
            if !matches!(kind, NodeKind::Input { .. }) && children.is_empty() {
                report.violations.push(Violation { node: n, kind: ViolationKind::ChildlessNode });
                continue;
            }
            match kind {
                NodeKind::Sum => {
                    let first = self.scope(children[0]);
                    if let Some(&bad) = children[1..].iter().find(|&&c| self.scope(c) != first) {
                        report.violations.push(Violation { node: n, kind: ViolationKind::NotSmooth { child: bad } });
                    }
                    if children.iter().any(|&c| self.kind(c) != NodeKind::Product) {
                        report.non_alternating.push(n);
                    }
                }
                NodeKind::Product => {
                    'outer: for (j, &c) in children.iter().enumerate() {
                        for &d in &children[..j] {
                            if !self.scope(c).is_disjoint(self.scope(d)) {
                                report.violations.push(Violation {
                                    node: n,
                                    kind: ViolationKind::NotDecomposable { left: d, right: c },
                                });
                                break 'outer;
                            }
                        }
                    }
                    if children.iter().any(|&c| self.kind(c) == NodeKind::Product) {
                        report.non_alternating.push(n);
                    }
                }
                NodeKind::Input { .. } => {}
            }
            if let Some(start) = self.param_start(n) {
                if !checked_blocks.insert(start) {
                    continue;
                }
                let tol = match kind {
                    NodeKind::Input { .. } => T::INPUT_NORM_TOL,
                    _ => T::NORM_TOL,
                };
                let block = self.params(n);
                if block.iter().any(|p| !p.is_finite()) {
                    report.violations.push(Violation { node: n, kind: ViolationKind::NonFiniteParameter });
                } else if let Some(&neg) = block.iter().find(|&&p| p < T::zero()) {
                    report.violations.push(Violation {
                        node: n,
                        kind: ViolationKind::NegativeParameter { value: neg.to_f64_lossy() },
                    });
                } else {
                    let total: f64 = block.iter().map(|p| p.to_f64_lossy()).sum();
                    if (total - 1.0).abs() > tol {
                        report.violations.push(Violation { node: n, kind: ViolationKind::Unnormalized { total } });
                    }
                }
            }
        }
        report
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::tests::figure_two_like;
    use crate::oracle;

    #[test]
    fn product_over_same_variable_is_not_decomposable() {
        let mut b = CircuitBuilder::new(1, 2);
        let a = b.input(0, &[0.5, 0.5]);
        let c = b.input(0, &[0.1, 0.9]);
        let p = b.product(&[a, c]);
        let r = validate_structure(b).unwrap();
        assert_eq!(r.violations, vec![Violation { node: p, kind: ViolationKind::NotDecomposable { left: a, right: c } }]);
    }

    #[test]
    fn sum_over_different_variables_is_not_smooth() {
        let mut b = CircuitBuilder::new(2, 2);
        let a = b.input(0, &[0.5, 0.5]);
        let c = b.input(1, &[0.5, 0.5]);
        let pa = b.product(&[a]);
        let pc = b.product(&[c]);
        let s = b.sum(&[pa, pc], &[0.5, 0.5]);
        let r = validate_structure(b).unwrap();
        assert_eq!(r.violations, vec![Violation { node: s, kind: ViolationKind::NotSmooth { child: pc } }]);
    }

    #[test]
    fn figure_two_shape_validates_and_scopes_match_recomputation() {
        let c = figure_two_like();
        let r = c.validate();
        assert!(r.is_valid(), "{r:?}");
        assert!(r.is_alternating());
        let scopes = oracle::recompute_scopes(&c);
        for n in 0..c.num_nodes() as NodeId {
            let fast: Vec<u32> = c.scope(n).to_vec();
            let slow: Vec<u32> = scopes[n as usize].iter().copied().collect();
            assert_eq!(fast, slow, "node {n}");
        }
    }

    #[test]
    fn unnormalized_and_negative_parameters_are_reported() {
        let mut b = CircuitBuilder::new(1, 2);
        let a = b.input(0, &[0.5, 0.6]);
        let pa = b.product(&[a]);
        let i = b.input(0, &[0.5, 0.5]);
        let pi = b.product(&[i]);
        let s = b.sum(&[pa, pi], &[1.2, -0.2]);
        let r = b.build().unwrap().validate();
        assert_eq!(r.violations.len(), 2);
        assert_eq!(r.violations[0].node, a);
        assert!(matches!(r.violations[1], Violation { node, kind: ViolationKind::NegativeParameter { .. } } if node == s));
    }

    #[test]
    fn sum_over_inputs_is_valid_but_not_alternating() {
        let mut b = CircuitBuilder::new(1, 2);
        let a = b.input(0, &[0.5, 0.5]);
        let c = b.input(0, &[0.2, 0.8]);
        let s = b.sum(&[a, c], &[0.5, 0.5]);
        let r = b.build().unwrap().validate();
        assert!(r.is_valid());
        assert_eq!(r.non_alternating, vec![s]);
    }
}
