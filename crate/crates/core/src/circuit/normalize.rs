//! Rewriting into alternation normal form.

use std::collections::HashMap;

use super::{CircuitBuilder, NodeId, NodeKind};
use crate::scalar::Real;
use crate::Circuit;

struct Work<T> {
    kind: NodeKind,
    children: Vec<usize>,
    weights: Vec<T>,
    /// Original parameter block, kept while the node's parameters are untouched.
    block: Option<usize>,
}

/// Returns an equivalent circuit in which sums have only product children and
/// products have no product children.
///
/// A sum (product) child with a single parent is merged into its parent, with
/// edge weights multiplied through. Shared children and inputs under sums get a
/// unary product (or a unary sum with weight 1) in between, so the edge count at
/// most doubles. An already-normal circuit is returned as is.
pub fn normalize_alternation<T: Real>(c: &Circuit<T>) -> Circuit<T> {
    if c.validate().is_alternating() {
        return c.clone();
    }
    let parent_count: Vec<usize> = c.parents().iter().map(Vec::len).collect();
    let mut work: Vec<Work<T>> = Vec::with_capacity(c.num_nodes() * 2);
    let mut new_of = vec![usize::MAX; c.num_nodes()];
    let mut wrapped: HashMap<usize, usize> = HashMap::new();

    let push = |work: &mut Vec<Work<T>>, w: Work<T>| {
        work.push(w);
        work.len() - 1
    };

    for &n in c.topological_order() {
        let id = match c.kind(n) {
            NodeKind::Input { .. } => push(
                &mut work,
                Work { kind: c.kind(n), children: vec![], weights: vec![], block: c.param_start(n) },
            ),
            NodeKind::Product => {
                let mut kids = Vec::new();
                for &ch in c.children(n) {
                    let cw = new_of[ch as usize];
                    if c.kind(ch) == NodeKind::Product {
                        if parent_count[ch as usize] == 1 {
                            kids.extend(work[cw].children.iter().copied());
                        } else {
                            let d = push(
                                &mut work,
                                Work { kind: NodeKind::Sum, children: vec![cw], weights: vec![T::one()], block: None },
                            );
                            kids.push(d);
                        }
                    } else {
                        kids.push(cw);
                    }
                }
                push(&mut work, Work { kind: NodeKind::Product, children: kids, weights: vec![], block: None })
            }
            NodeKind::Sum => {
                let mut kids = Vec::new();
                let mut weights = Vec::new();
                let mut merged = false;
                for (&ch, &theta) in c.children(n).iter().zip(c.params(n)) {
                    let cw = new_of[ch as usize];
                    match c.kind(ch) {
                        NodeKind::Sum if parent_count[ch as usize] == 1 => {
                            merged = true;
                            for (&g, &w) in work[cw].children.iter().zip(&work[cw].weights) {
                                kids.push(g);
                                weights.push(theta * w);
                            }
                        }
                        NodeKind::Sum => {
                            let d = push(
                                &mut work,
                                Work { kind: NodeKind::Product, children: vec![cw], weights: vec![], block: None },
                            );
                            kids.push(d);
                            weights.push(theta);
                        }
                        NodeKind::Input { .. } => {
                            let d = *wrapped.entry(ch as usize).or_insert_with(|| {
                                push(
                                    &mut work,
                                    Work { kind: NodeKind::Product, children: vec![cw], weights: vec![], block: None },
                                )
                            });
                            kids.push(d);
                            weights.push(theta);
                        }
                        NodeKind::Product => {
                            kids.push(cw);
                            weights.push(theta);
                        }
                    }
                }
                let block = if merged { None } else { c.param_start(n) };
                push(&mut work, Work { kind: NodeKind::Sum, children: kids, weights, block })
            }
        };
        new_of[n as usize] = id;
    }

    // Work ids are already children-first; emit only what the root reaches.
    let root = new_of[c.root() as usize];
    let mut reachable = vec![false; work.len()];
    let mut stack = vec![root];
    reachable[root] = true;
    while let Some(w) = stack.pop() {
        for &ch in &work[w].children {
            if !reachable[ch] {
                reachable[ch] = true;
                stack.push(ch);
            }
        }
    }

    let all = c.all_params();
    let mut b = CircuitBuilder::new(c.num_vars(), c.num_cats());
    let mut emitted = vec![NodeId::MAX; work.len()];
    let mut tied: HashMap<usize, NodeId> = HashMap::new();
    for (w, node) in work.iter().enumerate() {
        if !reachable[w] {
            continue;
        }
        let kids: Vec<NodeId> = node.children.iter().map(|&k| emitted[k]).collect();
        emitted[w] = match (node.kind, node.block) {
            (NodeKind::Input { var }, Some(s)) => match tied.get(&s) {
                Some(&like) => b.input_tied(var, like),
                None => {
                    let id = b.input(var, &all[s..s + c.num_cats()]);
                    tied.insert(s, id);
                    id
                }
            },
            (NodeKind::Sum, Some(s)) => match tied.get(&s) {
                Some(&like) => b.sum_tied(&kids, like),
                None => {
                    let id = b.sum(&kids, &all[s..s + kids.len()]);
                    tied.insert(s, id);
                    id
                }
            },
            (NodeKind::Sum, None) => b.sum(&kids, &node.weights),
            (NodeKind::Product, _) => b.product(&kids),
            (NodeKind::Input { .. }, None) => unreachable!("inputs keep their block"),
        };
    }
    b.build().expect("rewriting preserves a single-rooted DAG")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::tests::figure_two_like;
    use crate::oracle::{enumerate_distribution, EnumerationBudget};
    use crate::random::{random_circuit, RandomCircuitSpec};
    use proptest::prelude::*;

    fn assert_same_distribution(a: &Circuit<f64>, b: &Circuit<f64>, tol: f64) {
        let budget = EnumerationBudget::default();
        let ta = enumerate_distribution(a, &budget).unwrap();
        let tb = enumerate_distribution(b, &budget).unwrap();
        for (x, y) in ta.iter().zip(&tb) {
            assert!((x - y).abs() <= tol, "{x} vs {y}");
        }
    }

    #[test]
    fn inputs_under_sums_get_unary_products() {
        let mut b = CircuitBuilder::new(1, 2);
        let a = b.input(0, &[0.9, 0.1]);
        let c = b.input(0, &[0.2, 0.8]);
        b.sum(&[a, c], &[0.3, 0.7]);
        let c0 = b.build().unwrap();
        let c1 = normalize_alternation(&c0);
        assert!(c1.validate().is_alternating());
        let root = c1.root();
        for &ch in c1.children(root) {
            assert_eq!(c1.kind(ch), NodeKind::Product);
            assert_eq!(c1.children(ch).len(), 1);
        }
        assert_same_distribution(&c0, &c1, 1e-15);
    }

    #[test]
    fn consecutive_sums_are_merged() {
        let mut b = CircuitBuilder::new(2, 2);
        let x0 = b.input(0, &[0.9, 0.1]);
        let x1 = b.input(1, &[0.4, 0.6]);
        let y0 = b.input(0, &[0.3, 0.7]);
        let y1 = b.input(1, &[0.5, 0.5]);
        let p = b.product(&[x0, x1]);
        let q = b.product(&[y0, y1]);
        let r = b.product(&[x0, y1]);
        let inner = b.sum(&[p, q], &[0.25, 0.75]);
        b.sum(&[inner, r], &[0.6, 0.4]);
        let c0 = b.build().unwrap();
        let c1 = normalize_alternation(&c0);
        assert!(c1.validate().is_alternating());
        assert_eq!(c1.children(c1.root()).len(), 3);
        let mut w: Vec<f64> = c1.params(c1.root()).to_vec();
        w.sort_by(f64::total_cmp);
        for (got, want) in w.iter().zip([0.15, 0.4, 0.45]) {
            assert!((got - want).abs() < 1e-15, "{w:?}");
        }
        assert_same_distribution(&c0, &c1, 1e-12);
    }

    #[test]
    fn normal_circuit_is_unchanged() {
        let c = figure_two_like();
        let d = normalize_alternation(&c);
        assert_eq!(d.num_nodes(), c.num_nodes());
        assert_eq!(d.num_edges(), c.num_edges());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn normalization_preserves_distribution(seed in any::<u64>(), nv in 1usize..=8) {
            let spec = RandomCircuitSpec { num_vars: nv, num_cats: 2, alternating: false, ..RandomCircuitSpec::default() };
            let c0: Circuit<f64> = random_circuit(&spec, &mut crate::rng::seeded(seed));
            let c1 = normalize_alternation(&c0);
            let r = c1.validate();
            prop_assert!(r.is_valid() && r.is_alternating(), "{r:?}");
            prop_assert!(c1.num_edges() <= 2 * c0.num_edges());
            assert_same_distribution(&c0, &c1, 1e-12);
        }
    }
}
