//! Seeded random smooth, decomposable circuits for tests and benchmarks.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::circuit::{Circuit, CircuitBuilder, NodeId};
use crate::rng::Rng;
use crate::scalar::Real;

#[derive(Clone, Debug)]
pub struct RandomCircuitSpec {
    pub num_vars: usize,
    pub num_cats: usize,
    /// When false, also emit sums directly over inputs, sums over sums and
    /// unary products.
    pub alternating: bool,
    pub max_sums_per_region: usize,
    pub max_products_per_sum: usize,
    pub max_inputs_per_var: usize,
    /// Probability that a new input node shares the block of an earlier input.
    pub tie_prob: f64,
}

impl Default for RandomCircuitSpec {
    fn default() -> Self {
        Self {
            num_vars: 4,
            num_cats: 2,
            alternating: true,
            max_sums_per_region: 2,
            max_products_per_sum: 3,
            max_inputs_per_var: 2,
            tie_prob: 0.0,
        }
    }
}

fn random_simplex<T: Real>(n: usize, rng: &mut Rng) -> Vec<T> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| T::of(v / s)).collect()
}

struct Gen<'a, T> {
    spec: &'a RandomCircuitSpec,
    b: CircuitBuilder<T>,
    regions: HashMap<Vec<u32>, Vec<NodeId>>,
    inputs: Vec<NodeId>,
}

impl<T: Real> Gen<'_, T> {
    fn input(&mut self, var: u32, rng: &mut Rng) -> NodeId {
        let id = if !self.inputs.is_empty() && rng.random_bool(self.spec.tie_prob) {
            let like = self.inputs[rng.random_range(0..self.inputs.len())];
            self.b.input_tied(var, like)
        } else {
            let d = random_simplex(self.spec.num_cats, rng);
            self.b.input(var, &d)
        };
        self.inputs.push(id);
        id
    }

    /// Nodes whose scope is exactly `vars`: inputs for singletons, sums otherwise.
    fn region(&mut self, vars: &[u32], rng: &mut Rng) -> Vec<NodeId> {
        if let Some(r) = self.regions.get(vars) {
            return r.clone();
        }
        let nodes = if vars.len() == 1 {
            let k = rng.random_range(1..=self.spec.max_inputs_per_var);
            let inputs: Vec<NodeId> = (0..k).map(|_| self.input(vars[0], rng)).collect();
            if !self.spec.alternating && rng.random_bool(0.3) {
                let w = random_simplex(inputs.len(), rng);
                vec![self.b.sum(&inputs, &w)]
            } else {
                inputs
            }
        } else {
            let k = rng.random_range(1..=self.spec.max_sums_per_region);
            (0..k).map(|_| self.sum(vars, rng)).collect()
        };
        self.regions.insert(vars.to_vec(), nodes.clone());
        nodes
    }

    fn product(&mut self, vars: &[u32], rng: &mut Rng) -> NodeId {
        let mut shuffled = vars.to_vec();
        shuffled.shuffle(rng);
        let parts = rng.random_range(2..=vars.len().min(3));
        let mut cuts: Vec<usize> = (1..vars.len()).collect();
        cuts.shuffle(rng);
        let mut cuts: Vec<usize> = cuts[..parts - 1].to_vec();
        cuts.sort_unstable();
        let mut children = Vec::with_capacity(parts);
        let mut lo = 0;
        for hi in cuts.into_iter().chain([vars.len()]) {
            let mut part = shuffled[lo..hi].to_vec();
            part.sort_unstable();
            let options = self.region(&part, rng);
            children.push(options[rng.random_range(0..options.len())]);
            lo = hi;
        }
        self.b.product(&children)
    }

    fn sum(&mut self, vars: &[u32], rng: &mut Rng) -> NodeId {
        let k = rng.random_range(1..=self.spec.max_products_per_sum);
        let mut children: Vec<NodeId> = (0..k).map(|_| self.product(vars, rng)).collect();
        if !self.spec.alternating && rng.random_bool(0.3) {
            // Nested sum of the same scope.
            let inner_k = rng.random_range(1..=2);
            let inner: Vec<NodeId> = (0..inner_k).map(|_| self.product(vars, rng)).collect();
            let w = random_simplex(inner.len(), rng);
            children.push(self.b.sum(&inner, &w));
        }
        let w = random_simplex(children.len(), rng);
        self.b.sum(&children, &w)
    }

    /// Top region for a single variable: a sum over (wrapped) inputs.
    fn single_var_root(&mut self, rng: &mut Rng) -> NodeId {
        let k = rng.random_range(1..=self.spec.max_inputs_per_var.max(2));
        let inputs: Vec<NodeId> = (0..k).map(|_| self.input(0, rng)).collect();
        let children: Vec<NodeId> = if self.spec.alternating {
            inputs.iter().map(|&i| self.b.product(&[i])).collect()
        } else {
            inputs
                .iter()
                .map(|&i| if rng.random_bool(0.5) { self.b.product(&[i]) } else { i })
                .collect()
        };
        let w = random_simplex(children.len(), rng);
        self.b.sum(&children, &w)
    }
}

/// A random smooth, decomposable, normalized circuit whose root is a sum.
pub fn random_circuit<T: Real>(spec: &RandomCircuitSpec, rng: &mut Rng) -> Circuit<T> {
    assert!(spec.num_vars >= 1 && spec.num_cats >= 1);
    let mut g = Gen { spec, b: CircuitBuilder::new(spec.num_vars, spec.num_cats), regions: HashMap::new(), inputs: Vec::new() };
    let root = if spec.num_vars == 1 {
        g.single_var_root(rng)
    } else {
        let vars: Vec<u32> = (0..spec.num_vars as u32).collect();
        g.sum(&vars, rng)
    };
    // Region memo entries that no product picked are unreachable; drop them.
    g.b.build_from(root).expect("generator emits a DAG")
}

/// Benchmark family: a root sum over `copies` disjoint copies of one
/// factorized block (pairs of variables mixed over `mix` products each).
/// The edge count grows linearly in `copies`.
pub fn bench_circuit<T: Real>(num_vars: usize, num_cats: usize, mix: usize, copies: usize, rng: &mut Rng) -> Circuit<T> {
    assert!(num_vars >= 2 && num_vars.is_multiple_of(2) && mix >= 1 && copies >= 1);
    let mut b = CircuitBuilder::new(num_vars, num_cats);
    let mut tops = Vec::with_capacity(copies);
    for _ in 0..copies {
        let mut pairs = Vec::with_capacity(num_vars / 2);
        for v in (0..num_vars as u32).step_by(2) {
            let prods: Vec<NodeId> = (0..mix)
                .map(|_| {
                    let a = b.input(v, &random_simplex::<T>(num_cats, rng));
                    let c = b.input(v + 1, &random_simplex::<T>(num_cats, rng));
                    b.product(&[a, c])
                })
                .collect();
            let w = random_simplex(mix, rng);
            pairs.push(b.sum(&prods, &w));
        }
        tops.push(b.product(&pairs));
    }
    let w = random_simplex(copies, rng);
    b.sum(&tops, &w);
    b.build().expect("benchmark circuit is a DAG")
}

/// Edges of one [`bench_circuit`] copy, including its root edge.
pub fn bench_edges_per_copy(num_vars: usize, mix: usize) -> usize {
    (num_vars / 2) * (3 * mix) + num_vars / 2 + 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{enumerate_distribution, EnumerationBudget};
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn generated_circuits_validate_and_normalize(seed in any::<u64>(), nv in 1usize..=8, alt in any::<bool>(), tie in 0.0f64..0.5) {
            let spec = RandomCircuitSpec { num_vars: nv, num_cats: 2, alternating: alt, tie_prob: tie, ..Default::default() };
            let c: Circuit<f64> = random_circuit(&spec, &mut crate::rng::seeded(seed));
            let r = c.validate();
            prop_assert!(r.is_valid(), "{r:?}");
            if alt {
                prop_assert!(r.is_alternating(), "{r:?}");
            }
            prop_assert_eq!(c.scope(c.root()).len(), nv);
            let total: f64 = enumerate_distribution(&c, &EnumerationBudget::default()).unwrap().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn bench_edge_count_is_predicted() {
        let c: Circuit<f64> = bench_circuit(16, 2, 4, 10, &mut crate::rng::seeded(1));
        assert_eq!(c.num_edges(), 10 * bench_edges_per_copy(16, 4));
        assert!(c.validate().is_valid());
    }

    #[test]
    fn same_seed_same_circuit() {
        let spec = RandomCircuitSpec { num_vars: 6, ..Default::default() };
        let a: Circuit<f64> = random_circuit(&spec, &mut crate::rng::seeded(9));
        let b: Circuit<f64> = random_circuit(&spec, &mut crate::rng::seeded(9));
        assert_eq!(crate::circuit::serialize::to_bytes(&a), crate::circuit::serialize::to_bytes(&b));
    }
}
