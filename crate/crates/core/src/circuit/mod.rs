//! Probabilistic-circuit data model.
//!
//! A circuit is a rooted DAG of input, product and sum nodes stored in
//! compressed adjacency form: node `n` owns `children[child_start[n]..child_start[n + 1]]`.
//! Sum and input nodes reference a parameter block in one shared array. Two nodes
//! that reference the same block are tied: they hold identical values by
//! construction, and EM pools their statistics.
//!
//! Parameters are stored in value space (what gets serialized) with a cached
//! log-space copy that the inference passes read.

mod normalize;
mod partition;
mod scope;
pub mod serialize;
mod validate;

use thiserror::Error;

use crate::scalar::Real;

pub use normalize::normalize_alternation;
pub use partition::{Rect, ScopePartition};
pub use scope::{VarSet, BITSET_MAX_VARS};
pub use validate::{validate_structure, ValidationReport, Violation, ViolationKind};

pub type NodeId = u32;

pub(crate) const NONE: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum NodeKind {
    /// Categorical distribution over one variable.
    Input { var: u32 },
    Product,
    Sum,
}

/// Errors that make a node table unusable as a circuit at all.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StructureError {
    #[error("circuit has no nodes")]
    Empty,
    #[error("node {node} references missing child {child}")]
    DanglingChild { node: NodeId, child: NodeId },
    #[error("cycle through node {node}")]
    CyclicGraph { node: NodeId },
    #[error("circuit has {} parentless nodes: {roots:?}", roots.len())]
    MultipleRoots { roots: Vec<NodeId> },
    #[error("input node {node} references variable {var} outside the circuit")]
    VariableOutOfRange { node: NodeId, var: u32 },
    #[error("node {node} has no valid parameter block")]
    MissingParameters { node: NodeId },
    #[error("node {node} shares a parameter block of a different length")]
    TiedBlockMismatch { node: NodeId },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CircuitError {
    #[error(transparent)]
    Structure(#[from] StructureError),
    #[error("circuit failed validation: {} violation(s), first at node {:?}", .0.violations.len(), .0.first_node())]
    Invalid(ValidationReport),
}

/// Accumulates a node table. Child ids are not checked until [`CircuitBuilder::build`],
/// so forward references (and deliberately broken tables) are expressible.
#[derive(Clone, Debug)]
pub struct CircuitBuilder<T> {
    num_vars: usize,
    num_cats: usize,
    kinds: Vec<NodeKind>,
    child_start: Vec<u32>,
    children: Vec<NodeId>,
    param_start: Vec<u32>,
    params: Vec<T>,
}

impl<T: Real> CircuitBuilder<T> {
    pub fn new(num_vars: usize, num_cats: usize) -> Self {
        Self {
            num_vars,
            num_cats,
            kinds: Vec::new(),
            child_start: vec![0],
            children: Vec::new(),
            param_start: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.kinds.len()
    }

    pub fn num_cats(&self) -> usize {
        self.num_cats
    }

    fn push(&mut self, kind: NodeKind, children: &[NodeId], param_start: u32) -> NodeId {
        let id = self.kinds.len() as NodeId;
        self.kinds.push(kind);
        self.children.extend_from_slice(children);
        self.child_start.push(self.children.len() as u32);
        self.param_start.push(param_start);
        id
    }

    fn push_block(&mut self, values: &[T]) -> u32 {
        let start = self.params.len() as u32;
        self.params.extend_from_slice(values);
        start
    }

    /// Panics if `dist.len()` differs from the category count.
    pub fn input(&mut self, var: u32, dist: &[T]) -> NodeId {
        assert_eq!(dist.len(), self.num_cats, "input distribution must have one entry per category");
        let start = self.push_block(dist);
        self.push(NodeKind::Input { var }, &[], start)
    }

    /// Input node sharing the parameter block of `like`.
    pub fn input_tied(&mut self, var: u32, like: NodeId) -> NodeId {
        let start = self.param_start[like as usize];
        self.push(NodeKind::Input { var }, &[], start)
    }

    pub fn product(&mut self, children: &[NodeId]) -> NodeId {
        self.push(NodeKind::Product, children, NONE)
    }

    /// Panics if `weights.len() != children.len()`.
    pub fn sum(&mut self, children: &[NodeId], weights: &[T]) -> NodeId {
        assert_eq!(children.len(), weights.len(), "one weight per sum edge");
        let start = self.push_block(weights);
        self.push(NodeKind::Sum, children, start)
    }

    /// Sum node sharing the edge-parameter block of `like`.
    pub fn sum_tied(&mut self, children: &[NodeId], like: NodeId) -> NodeId {
        let start = self.param_start[like as usize];
        self.push(NodeKind::Sum, children, start)
    }

    /// Appends a node with an explicit parameter block start; no checks at all.
    pub fn raw_node(&mut self, kind: NodeKind, children: &[NodeId], params: Option<&[T]>) -> NodeId {
        let start = match params {
            Some(p) => self.push_block(p),
            None => NONE,
        };
        self.push(kind, children, start)
    }

    pub fn build(self) -> Result<Circuit<T>, StructureError> {
        Circuit::from_parts(
            self.num_vars,
            self.num_cats,
            self.kinds,
            self.child_start,
            self.children,
            self.param_start,
            self.params,
        )
    }

    /// Builds the sub-circuit reachable from `root`, dropping every other node.
    /// Surviving nodes keep their relative order and shared parameter blocks.
    pub fn build_from(self, root: NodeId) -> Result<Circuit<T>, StructureError> {
        let n = self.kinds.len();
        if n == 0 {
            return Err(StructureError::Empty);
        }
        let kids = |id: usize| &self.children[self.child_start[id] as usize..self.child_start[id + 1] as usize];
        let mut keep = vec![false; n];
        let mut stack = vec![root];
        keep[root as usize] = true;
        while let Some(id) = stack.pop() {
            for &c in kids(id as usize) {
                if c as usize >= n {
                    return Err(StructureError::DanglingChild { node: id, child: c });
                }
                if !keep[c as usize] {
                    keep[c as usize] = true;
                    stack.push(c);
                }
            }
        }
        let mut new_id = vec![NONE; n];
        let mut next = 0;
        for id in 0..n {
            if keep[id] {
                new_id[id] = next;
                next += 1;
            }
        }
        let mut out = CircuitBuilder::new(self.num_vars, self.num_cats);
        let mut moved: std::collections::HashMap<u32, u32> = std::collections::HashMap::new();
        for id in (0..n).filter(|&id| keep[id]) {
            let children: Vec<NodeId> = kids(id).iter().map(|&c| new_id[c as usize]).collect();
            let len = match self.kinds[id] {
                NodeKind::Input { .. } => self.num_cats,
                NodeKind::Sum => children.len(),
                NodeKind::Product => 0,
            };
            let start = self.param_start[id];
            let new_start = if len == 0 || start == NONE || start as usize + len > self.params.len() {
                NONE
            } else {
                *moved.entry(start).or_insert_with(|| out.push_block(&self.params[start as usize..start as usize + len]))
            };
            out.push(self.kinds[id], &children, new_start);
        }
        out.build()
    }

    /// Builds and rejects any smoothness, decomposability or normalization violation.
    pub fn build_validated(self) -> Result<Circuit<T>, CircuitError> {
        let c = self.build()?;
        let report = c.validate();
        if report.is_valid() {
            Ok(c)
        } else {
            Err(CircuitError::Invalid(report))
        }
    }
}

#[derive(Clone, Debug)]
pub struct Circuit<T> {
    num_vars: usize,
    num_cats: usize,
    kinds: Vec<NodeKind>,
    child_start: Vec<u32>,
    children: Vec<NodeId>,
    param_start: Vec<u32>,
    params: Vec<T>,
    log_params: Vec<T>,
    root: NodeId,
    order: Vec<NodeId>,
    layer_start: Vec<u32>,
    layer_of: Vec<u32>,
    scopes: Vec<VarSet>,
}

impl<T: Real> Circuit<T> {
    /// Checks ids, variables and parameter blocks, detects cycles and the root,
    /// assigns longest-path layers (inputs at layer 0) and computes scopes.
    pub fn from_parts(
        num_vars: usize,
        num_cats: usize,
        kinds: Vec<NodeKind>,
        child_start: Vec<u32>,
        children: Vec<NodeId>,
        param_start: Vec<u32>,
        params: Vec<T>,
    ) -> Result<Self, StructureError> {
        let n = kinds.len();
        if n == 0 {
            return Err(StructureError::Empty);
        }
        assert_eq!(child_start.len(), n + 1);
        assert_eq!(param_start.len(), n);

        let mut block_len = std::collections::HashMap::new();
        for id in 0..n {
            let ch = &children[child_start[id] as usize..child_start[id + 1] as usize];
            if let Some(&bad) = ch.iter().find(|&&c| c as usize >= n) {
                return Err(StructureError::DanglingChild { node: id as NodeId, child: bad });
            }
            let need = match kinds[id] {
                NodeKind::Input { var } => {
                    if var as usize >= num_vars {
                        return Err(StructureError::VariableOutOfRange { node: id as NodeId, var });
                    }
                    Some(num_cats)
                }
                NodeKind::Sum => Some(ch.len()),
                NodeKind::Product => None,
            };
            if let Some(len) = need {
                let start = param_start[id];
                if start == NONE || start as usize + len > params.len() {
                    return Err(StructureError::MissingParameters { node: id as NodeId });
                }
                if *block_len.entry(start).or_insert(len) != len {
                    return Err(StructureError::TiedBlockMismatch { node: id as NodeId });
                }
            }
        }

        // Kahn's algorithm, children before parents.
        let mut parent_count = vec![0u32; n];
        let mut pending = vec![0u32; n];
        for id in 0..n {
            pending[id] = child_start[id + 1] - child_start[id];
            for &c in &children[child_start[id] as usize..child_start[id + 1] as usize] {
                parent_count[c as usize] += 1;
            }
        }
        let mut parent_start = vec![0u32; n + 1];
        for id in 0..n {
            parent_start[id + 1] = parent_start[id] + parent_count[id];
        }
        let mut fill = parent_start.clone();
        let mut parents = vec![0u32; children.len()];
        for id in 0..n {
            for &c in &children[child_start[id] as usize..child_start[id + 1] as usize] {
                parents[fill[c as usize] as usize] = id as NodeId;
                fill[c as usize] += 1;
            }
        }

        let mut layer_of = vec![0u32; n];
        let mut queue: Vec<NodeId> = (0..n as NodeId).filter(|&i| pending[i as usize] == 0).collect();
        let mut topo = Vec::with_capacity(n);
        let mut head = 0;
        while head < queue.len() {
            let id = queue[head] as usize;
            head += 1;
            topo.push(id as NodeId);
            for &p in &parents[parent_start[id] as usize..parent_start[id + 1] as usize] {
                let p = p as usize;
                layer_of[p] = layer_of[p].max(layer_of[id] + 1);
                pending[p] -= 1;
                if pending[p] == 0 {
                    queue.push(p as NodeId);
                }
            }
        }
        if topo.len() < n {
            return Err(StructureError::CyclicGraph { node: find_cycle_node(n, &child_start, &children, &pending) });
        }

        let roots: Vec<NodeId> = (0..n as NodeId).filter(|&i| parent_count[i as usize] == 0).collect();
        if roots.len() != 1 {
            return Err(StructureError::MultipleRoots { roots });
        }
        let root = roots[0];

        let num_layers = layer_of.iter().copied().max().unwrap_or(0) as usize + 1;
        let mut layer_start = vec![0u32; num_layers + 1];
        for &l in &layer_of {
            layer_start[l as usize + 1] += 1;
        }
        for l in 0..num_layers {
            layer_start[l + 1] += layer_start[l];
        }
        let mut fill = layer_start.clone();
        let mut order = vec![0; n];
        for (id, &l) in layer_of.iter().enumerate() {
            let l = l as usize;
            order[fill[l] as usize] = id as NodeId;
            fill[l] += 1;
        }

        let mut scopes: Vec<VarSet> = vec![VarSet::empty(0); n];
        for &id in &order {
            let id = id as usize;
            scopes[id] = match kinds[id] {
                NodeKind::Input { var } => VarSet::singleton(num_vars, var),
                _ => {
                    let mut s = VarSet::empty(num_vars);
                    for &c in &children[child_start[id] as usize..child_start[id + 1] as usize] {
                        s.union_with(&scopes[c as usize]);
                    }
                    s
                }
            };
        }

        let log_params = params.iter().map(|p| p.ln()).collect();
        Ok(Self {
            num_vars,
            num_cats,
            kinds,
            child_start,
            children,
            param_start,
            params,
            log_params,
            root,
            order,
            layer_start,
            layer_of,
            scopes,
        })
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn num_cats(&self) -> usize {
        self.num_cats
    }

    pub fn num_nodes(&self) -> usize {
        self.kinds.len()
    }

    /// Circuit size |p|: the number of edges.
    pub fn num_edges(&self) -> usize {
        self.children.len()
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    #[inline]
    pub fn kind(&self, n: NodeId) -> NodeKind {
        self.kinds[n as usize]
    }

    pub fn kinds(&self) -> &[NodeKind] {
        &self.kinds
    }

    #[inline]
    pub fn children(&self, n: NodeId) -> &[NodeId] {
        let n = n as usize;
        &self.children[self.child_start[n] as usize..self.child_start[n + 1] as usize]
    }

    #[inline]
    pub(crate) fn child_range(&self, n: NodeId) -> std::ops::Range<usize> {
        let n = n as usize;
        self.child_start[n] as usize..self.child_start[n + 1] as usize
    }

    pub(crate) fn edge_array(&self) -> &[NodeId] {
        &self.children
    }

    pub(crate) fn child_starts(&self) -> &[u32] {
        &self.child_start
    }

    pub(crate) fn param_starts(&self) -> &[u32] {
        &self.param_start
    }

    /// Start of the node's parameter block; `None` for products.
    #[inline]
    pub fn param_start(&self, n: NodeId) -> Option<usize> {
        match self.kinds[n as usize] {
            NodeKind::Product => None,
            _ => Some(self.param_start[n as usize] as usize),
        }
    }

    fn block_len(&self, n: NodeId) -> usize {
        match self.kinds[n as usize] {
            NodeKind::Input { .. } => self.num_cats,
            NodeKind::Sum => self.children(n).len(),
            NodeKind::Product => 0,
        }
    }

    /// Edge weights of a sum node, or the distribution of an input node.
    #[inline]
    pub fn params(&self, n: NodeId) -> &[T] {
        match self.param_start(n) {
            Some(s) => &self.params[s..s + self.block_len(n)],
            None => &[],
        }
    }

    #[inline]
    pub fn log_params(&self, n: NodeId) -> &[T] {
        match self.param_start(n) {
            Some(s) => &self.log_params[s..s + self.block_len(n)],
            None => &[],
        }
    }

    pub fn all_params(&self) -> &[T] {
        &self.params
    }

    pub fn all_log_params(&self) -> &[T] {
        &self.log_params
    }

    /// One `(representative node, start, len)` per distinct parameter block.
    pub fn param_blocks(&self) -> Vec<(NodeId, usize, usize)> {
        let mut seen = std::collections::HashSet::new();
        let mut out = Vec::new();
        for n in 0..self.num_nodes() as NodeId {
            if let Some(s) = self.param_start(n) {
                if seen.insert(s) {
                    out.push((n, s, self.block_len(n)));
                }
            }
        }
        out
    }

    /// Replaces the whole parameter array. Panics on a length mismatch.
    pub fn set_all_params(&mut self, params: Vec<T>) {
        assert_eq!(params.len(), self.params.len(), "parameter array length changed");
        self.log_params = params.iter().map(|p| p.ln()).collect();
        self.params = params;
    }

    pub fn with_params(&self, params: Vec<T>) -> Self {
        let mut c = self.clone();
        c.set_all_params(params);
        c
    }

    /// Overwrites one entry of the parameter array (shared by every tied node).
    pub fn set_param(&mut self, index: usize, value: T) {
        self.params[index] = value;
        self.log_params[index] = value.ln();
    }

    #[inline]
    pub fn scope(&self, n: NodeId) -> &VarSet {
        &self.scopes[n as usize]
    }

    pub fn input_var(&self, n: NodeId) -> Option<usize> {
        match self.kinds[n as usize] {
            NodeKind::Input { var } => Some(var as usize),
            _ => None,
        }
    }

    /// Nodes sorted by layer; every child precedes its parents.
    pub fn topological_order(&self) -> &[NodeId] {
        &self.order
    }

    pub fn num_layers(&self) -> usize {
        self.layer_start.len() - 1
    }

    pub fn layer(&self, l: usize) -> &[NodeId] {
        &self.order[self.layer_start[l] as usize..self.layer_start[l + 1] as usize]
    }

    pub fn layers(&self) -> impl DoubleEndedIterator<Item = &[NodeId]> + '_ {
        (0..self.num_layers()).map(move |l| self.layer(l))
    }

    pub fn layer_of(&self, n: NodeId) -> usize {
        self.layer_of[n as usize] as usize
    }

    /// Parent lists, built on demand.
    pub fn parents(&self) -> Vec<Vec<NodeId>> {
        let mut p = vec![Vec::new(); self.num_nodes()];
        for n in 0..self.num_nodes() as NodeId {
            for &c in self.children(n) {
                p[c as usize].push(n);
            }
        }
        p
    }

    /// Input nodes grouped by variable.
    pub fn inputs_by_var(&self) -> Vec<Vec<NodeId>> {
        let mut out = vec![Vec::new(); self.num_vars];
        for n in 0..self.num_nodes() as NodeId {
            if let NodeKind::Input { var } = self.kinds[n as usize] {
                out[var as usize].push(n);
            }
        }
        out
    }

    /// Same structure and values in another scalar type.
    pub fn cast<U: Real>(&self) -> Circuit<U> {
        let params: Vec<U> = self.params.iter().map(|p| U::of(p.to_f64_lossy())).collect();
        Circuit {
            num_vars: self.num_vars,
            num_cats: self.num_cats,
            kinds: self.kinds.clone(),
            child_start: self.child_start.clone(),
            children: self.children.clone(),
            param_start: self.param_start.clone(),
            log_params: params.iter().map(|p| p.ln()).collect(),
            params,
            root: self.root,
            order: self.order.clone(),
            layer_start: self.layer_start.clone(),
            layer_of: self.layer_of.clone(),
            scopes: self.scopes.clone(),
        }
    }

    /// Rebuilds a builder holding this exact node table.
    pub fn to_builder(&self) -> CircuitBuilder<T> {
        CircuitBuilder {
            num_vars: self.num_vars,
            num_cats: self.num_cats,
            kinds: self.kinds.clone(),
            child_start: self.child_start.clone(),
            children: self.children.clone(),
            param_start: self.param_start.clone(),
            params: self.params.clone(),
        }
    }
}

/// Walks unprocessed children from some unprocessed node until a node repeats.
fn find_cycle_node(n: usize, child_start: &[u32], children: &[NodeId], pending: &[u32]) -> NodeId {
    let start = (0..n).find(|&i| pending[i] > 0).expect("an unprocessed node exists");
    let mut seen = vec![false; n];
    let mut cur = start;
    loop {
        if seen[cur] {
            return cur as NodeId;
        }
        seen[cur] = true;
        cur = children[child_start[cur] as usize..child_start[cur + 1] as usize]
            .iter()
            .map(|&c| c as usize)
            .find(|&c| pending[c] > 0)
            .expect("an unprocessed node has an unprocessed child");
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// Four binary variables: pairs {X0,X1} and {X2,X3} are each a mixture of
    /// two factorized products; the root multiplies the two mixtures.
    pub(crate) fn figure_two_like() -> Circuit<f64> {
        let mut b = CircuitBuilder::new(4, 2);
        let x: Vec<Vec<NodeId>> = (0..4)
            .map(|v| vec![b.input(v, &[0.8, 0.2]), b.input(v, &[0.3, 0.7])])
            .collect();
        let p0 = b.product(&[x[0][0], x[1][0]]);
        let p1 = b.product(&[x[0][1], x[1][1]]);
        let p2 = b.product(&[x[2][0], x[3][1]]);
        let p3 = b.product(&[x[2][1], x[3][0]]);
        let s0 = b.sum(&[p0, p1], &[0.4, 0.6]);
        let s1 = b.sum(&[p2, p3], &[0.9, 0.1]);
        b.product(&[s0, s1]);
        b.build().unwrap()
    }

    #[test]
    fn chain_gets_consecutive_layers() {
        let mut b = CircuitBuilder::new(1, 2);
        let i = b.input(0, &[0.5, 0.5]);
        let p = b.product(&[i]);
        let s = b.sum(&[p], &[1.0]);
        let c = b.build().unwrap();
        assert_eq!((c.layer_of(i), c.layer_of(p), c.layer_of(s)), (0, 1, 2));
        assert_eq!(c.root(), s);
    }

    #[test]
    fn figure_two_shape_has_four_layers() {
        let c = figure_two_like();
        assert_eq!(c.num_layers(), 4);
        assert_eq!(c.layer(0).len(), 8);
        assert_eq!(c.layer(1).len(), 4);
        assert_eq!(c.layer(2).len(), 2);
        assert_eq!(c.layer(3), &[c.root()]);
        for n in c.topological_order() {
            for &ch in c.children(*n) {
                assert!(c.layer_of(ch) < c.layer_of(*n));
            }
        }
    }

    #[test]
    fn empty_circuit_is_rejected() {
        assert_eq!(CircuitBuilder::<f64>::new(1, 2).build().unwrap_err(), StructureError::Empty);
    }

    #[test]
    fn structural_errors_are_located() {
        let mut b = CircuitBuilder::<f64>::new(1, 2);
        let i = b.input(0, &[0.5, 0.5]);
        b.product(&[i, 7]);
        assert_eq!(b.build().unwrap_err(), StructureError::DanglingChild { node: 1, child: 7 });

        let mut b = CircuitBuilder::<f64>::new(1, 2);
        let i = b.input(0, &[0.5, 0.5]);
        b.product(&[i, 2]);
        b.product(&[1]);
        b.product(&[2]);
        assert!(matches!(b.build().unwrap_err(), StructureError::CyclicGraph { node } if node == 1 || node == 2));

        let mut b = CircuitBuilder::<f64>::new(2, 2);
        b.input(0, &[0.5, 0.5]);
        b.input(1, &[0.5, 0.5]);
        assert_eq!(b.build().unwrap_err(), StructureError::MultipleRoots { roots: vec![0, 1] });

        let mut b = CircuitBuilder::<f64>::new(1, 2);
        b.input(3, &[0.5, 0.5]);
        assert_eq!(b.build().unwrap_err(), StructureError::VariableOutOfRange { node: 0, var: 3 });
    }

    #[test]
    fn tied_nodes_share_storage() {
        let mut b = CircuitBuilder::new(2, 2);
        let a = b.input(0, &[0.25, 0.75]);
        let t = b.input_tied(1, a);
        b.product(&[a, t]);
        let mut c = b.build().unwrap();
        assert_eq!(c.params(a), c.params(t));
        assert_eq!(c.param_blocks().len(), 1);
        c.set_param(0, 0.5);
        c.set_param(1, 0.5);
        assert_eq!(c.params(t), &[0.5, 0.5]);
    }

    #[test]
    fn cast_round_trips_structure() {
        let c = figure_two_like();
        let c32: Circuit<f32> = c.cast();
        assert_eq!(c32.num_edges(), c.num_edges());
        assert_eq!(c32.params(0), &[0.8f32, 0.2]);
    }
}
