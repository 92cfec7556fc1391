//! Brute-force reference implementations.
//!
//! Everything here evaluates the circuit polynomial directly in value space,
//! one complete assignment at a time, with compensated summation. Nothing in
//! this module calls into the inference, learning or latent code: the only
//! shared type is [`Circuit`], read through its public accessors.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::circuit::{Circuit, NodeId, NodeKind};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EnumerationBudget {
    pub max_states: u64,
}

impl Default for EnumerationBudget {
    fn default() -> Self {
        Self { max_states: 1 << 20 }
    }
}

impl EnumerationBudget {
    fn admit(&self, base: usize, exponent: usize) -> Result<u64, OracleError> {
        let states = (base as f64).powi(exponent as i32);
        if states > self.max_states as f64 {
            return Err(OracleError::BudgetExceeded { states, max_states: self.max_states });
        }
        Ok(states as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("enumeration needs {states:e} states, budget is {max_states}")]
    BudgetExceeded { states: f64, max_states: u64 },
    #[error("evidence gives every assignment zero weight")]
    ZeroNormalizer,
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
}

/// Neumaier's compensated sum.
#[derive(Clone, Copy, Debug, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn total(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Scopes from scratch by depth-first search from every node.
pub fn recompute_scopes<T: Real>(c: &Circuit<T>) -> Vec<BTreeSet<u32>> {
    fn visit<T: Real>(c: &Circuit<T>, n: NodeId, memo: &mut Vec<Option<BTreeSet<u32>>>) -> BTreeSet<u32> {
        if let Some(s) = &memo[n as usize] {
            return s.clone();
        }
        let s = match c.kind(n) {
            NodeKind::Input { var } => BTreeSet::from([var]),
            _ => c.children(n).iter().flat_map(|&ch| visit(c, ch, memo)).collect(),
        };
        memo[n as usize] = Some(s.clone());
        s
    }
    let mut memo = vec![None; c.num_nodes()];
    (0..c.num_nodes() as NodeId).map(|n| visit(c, n, &mut memo)).collect()
}

/// Replaces one quantity while evaluating, for derivative-by-linearity tricks.
#[derive(Clone, Copy, Debug)]
enum Override {
    None,
    /// Position in the edge list of a sum node: `(node, child slot, value)`.
    Edge(NodeId, usize, f64),
    /// Value of an input node.
    Node(NodeId, f64),
}

/// Recursive value-space evaluation of the circuit polynomial. `leaf(n, var)`
/// gives each input node's value.
fn evaluate<T: Real>(c: &Circuit<T>, leaf: &dyn Fn(NodeId, usize) -> f64, ov: Override) -> f64 {
    let mut memo = vec![None; c.num_nodes()];
    go(c, c.root(), leaf, ov, &mut memo)
}

fn go<T: Real>(
    c: &Circuit<T>,
    n: NodeId,
    leaf: &dyn Fn(NodeId, usize) -> f64,
    ov: Override,
    memo: &mut Vec<Option<f64>>,
) -> f64 {
    if let Some(v) = memo[n as usize] {
        return v;
    }
    let v = match c.kind(n) {
        NodeKind::Input { var } => match ov {
            Override::Node(m, v) if m == n => v,
            _ => leaf(n, var as usize),
        },
        NodeKind::Product => {
            let mut p = 1.0;
            for &ch in c.children(n) {
                p *= go(c, ch, leaf, ov, memo);
            }
            p
        }
        NodeKind::Sum => {
            let mut s = KahanSum::default();
            for (slot, (&ch, th)) in c.children(n).iter().zip(c.params(n)).enumerate() {
                let theta = match ov {
                    Override::Edge(m, k, v) if m == n && k == slot => v,
                    _ => th.to_f64_lossy(),
                };
                s.add(theta * go(c, ch, leaf, ov, memo));
            }
            s.total()
        }
    };
    memo[n as usize] = Some(v);
    v
}

/// Value of every node for one complete assignment.
fn evaluate_all<T: Real>(c: &Circuit<T>, leaf: &dyn Fn(NodeId, usize) -> f64) -> Vec<f64> {
    let mut memo = vec![None; c.num_nodes()];
    for n in 0..c.num_nodes() as NodeId {
        go(c, n, leaf, Override::None, &mut memo);
    }
    memo.into_iter().map(|v| v.expect("every node evaluated")).collect()
}

/// `p(x)` for one complete assignment.
pub fn probability<T: Real>(c: &Circuit<T>, x: &[u16]) -> f64 {
    evaluate(c, &|n, var| c.params(n)[x[var] as usize].to_f64_lossy(), Override::None)
}

/// Decodes a table index into an assignment (variable 0 varies fastest).
pub fn assignment(mut index: u64, num_vars: usize, num_cats: usize, out: &mut [u16]) {
    for slot in out.iter_mut().take(num_vars) {
        *slot = (index % num_cats as u64) as u16;
        index /= num_cats as u64;
    }
}

/// Full joint table indexed by `Σ x_i · C^i`.
pub fn enumerate_distribution<T: Real>(c: &Circuit<T>, budget: &EnumerationBudget) -> Result<Vec<f64>, OracleError> {
    let states = budget.admit(c.num_cats(), c.num_vars())?;
    let mut x = vec![0u16; c.num_vars()];
    Ok((0..states)
        .map(|i| {
            assignment(i, c.num_vars(), c.num_cats(), &mut x);
            probability(c, &x)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleMarginals {
    /// `marginals[var][category]`.
    pub marginals: Vec<Vec<f64>>,
    pub z: f64,
}

impl OracleMarginals {
    pub fn log_z(&self) -> f64 {
        self.z.ln()
    }
}

/// `Z = Σ_x p(x) ∏ w_i(x_i)` and `p'(x_i) = Σ_{x'|x'_i = x_i} p(x') ∏ w / Z` by
/// direct summation. `weights[var][category]` are value-space weights.
pub fn oracle_soft_evidence_marginals<T: Real>(
    c: &Circuit<T>,
    weights: &[Vec<f64>],
    budget: &EnumerationBudget,
) -> Result<OracleMarginals, OracleError> {
    let (nv, nc) = (c.num_vars(), c.num_cats());
    if weights.len() != nv || weights.iter().any(|w| w.len() != nc) {
        return Err(OracleError::DimMismatch(format!("expected {nv} weight rows of length {nc}")));
    }
    let states = budget.admit(nc, nv)?;
    let mut acc = vec![vec![KahanSum::default(); nc]; nv];
    let mut z = KahanSum::default();
    let mut x = vec![0u16; nv];
    for i in 0..states {
        assignment(i, nv, nc, &mut x);
        let mut w = 1.0;
        for (v, &xv) in x.iter().enumerate() {
            w *= weights[v][xv as usize];
        }
        if w == 0.0 {
            continue;
        }
        let mass = w * probability(c, &x);
        z.add(mass);
        for (v, &xv) in x.iter().enumerate() {
            acc[v][xv as usize].add(mass);
        }
    }
    let z = z.total();
    if z <= 0.0 {
        return Err(OracleError::ZeroNormalizer);
    }
    let marginals = acc.iter().map(|row| row.iter().map(|s| s.total() / z).collect()).collect();
    Ok(OracleMarginals { marginals, z })
}

/// Soft-evidence value of every node, `Σ_{x_S} f_n(x_S) ∏_{i ∈ S} w_i(x_i)` over
/// the node's scope `S`, by enumerating complete assignments and dividing
/// out the variables outside the scope.
pub fn node_evidence_values<T: Real>(
    c: &Circuit<T>,
    weights: &[Vec<f64>],
    budget: &EnumerationBudget,
) -> Result<Vec<f64>, OracleError> {
    let (nv, nc) = (c.num_vars(), c.num_cats());
    if weights.len() != nv || weights.iter().any(|w| w.len() != nc) {
        return Err(OracleError::DimMismatch(format!("expected {nv} weight rows of length {nc}")));
    }
    let states = budget.admit(nc, nv)?;
    let scopes = recompute_scopes(c);
    let mut acc = vec![KahanSum::default(); c.num_nodes()];
    let mut x = vec![0u16; nv];
    for i in 0..states {
        assignment(i, nv, nc, &mut x);
        let vals = evaluate_all(c, &|n, var| c.params(n)[x[var] as usize].to_f64_lossy());
        for (n, v) in vals.into_iter().enumerate() {
            let w: f64 = scopes[n].iter().map(|&var| weights[var as usize][x[var as usize] as usize]).product();
            acc[n].add(v * w);
        }
    }
    Ok(acc
        .iter()
        .zip(&scopes)
        .map(|(s, scope)| s.total() / (nc as f64).powi((nv - scope.len()) as i32))
        .collect())
}

/// Expected sufficient statistics for EM, aligned with the circuit's parameter
/// array and pooled over tied blocks.
///
/// For a sample `x`, the statistic of a sum edge is `θ · ∂p(x)/∂θ / p(x)`. The
/// polynomial is linear in every individual edge weight, so the derivative is
/// `p(x)|θ=1 − p(x)|θ=0`; input nodes are handled the same way through their value.
pub fn expected_flows<T: Real>(c: &Circuit<T>, data: &[Vec<u16>]) -> Vec<f64> {
    let mut stats = vec![KahanSum::default(); c.all_params().len()];
    for x in data {
        let leaf = |n: NodeId, var: usize| c.params(n)[x[var] as usize].to_f64_lossy();
        let p = evaluate(c, &leaf, Override::None);
        for n in 0..c.num_nodes() as NodeId {
            let Some(start) = c.param_start(n) else { continue };
            match c.kind(n) {
                NodeKind::Sum => {
                    for (slot, th) in c.params(n).iter().enumerate() {
                        let hi = evaluate(c, &leaf, Override::Edge(n, slot, 1.0));
                        let lo = evaluate(c, &leaf, Override::Edge(n, slot, 0.0));
                        stats[start + slot].add(th.to_f64_lossy() * (hi - lo) / p);
                    }
                }
                NodeKind::Input { var } => {
                    let v = leaf(n, var as usize);
                    let hi = evaluate(c, &leaf, Override::Node(n, 1.0));
                    let lo = evaluate(c, &leaf, Override::Node(n, 0.0));
                    stats[start + x[var as usize] as usize].add(v * (hi - lo) / p);
                }
                NodeKind::Product => {}
            }
        }
    }
    stats.iter().map(KahanSum::total).collect()
}

/// Soft evidence weights for the oracle, value space, from log weights.
pub fn weights_from_logs(log_weights: &[f64], num_cats: usize) -> Vec<Vec<f64>> {
    log_weights.chunks(num_cats).map(|r| r.iter().map(|l| l.exp()).collect()).collect()
}

/// Patch codec as seen by the latent oracle: a codebook of flat patches over a
/// grid of latent cells, with pixel values on a uniform grid.
#[derive(Clone, Debug)]
pub struct CodecView<'a> {
    pub image_width: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// `K` embeddings of `patch_h · patch_w` values each.
    pub embeddings: &'a [Vec<f64>],
    /// Category index → pixel value.
    pub value_grid: &'a [f64],
    /// Soft-assignment temperature; `None` for hard nearest-neighbour assignment.
    pub temperature: Option<f64>,
}

impl CodecView<'_> {
    fn cell_pixels(&self, cell: usize) -> Vec<usize> {
        let (gr, gc) = (cell / self.grid_w, cell % self.grid_w);
        let mut out = Vec::with_capacity(self.patch_h * self.patch_w);
        for r in 0..self.patch_h {
            for col in 0..self.patch_w {
                out.push((gr * self.patch_h + r) * self.image_width + gc * self.patch_w + col);
            }
        }
        out
    }

    fn distances(&self, patch: &[f64]) -> Vec<f64> {
        self.embeddings
            .iter()
            .map(|e| e.iter().zip(patch).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
            .collect()
    }

    /// `q(z | patch)`.
    fn assign(&self, patch: &[f64]) -> Vec<f64> {
        let d = self.distances(patch);
        match self.temperature {
            None => {
                let mut best = 0;
                for (j, &dj) in d.iter().enumerate() {
                    if dj < d[best] {
                        best = j;
                    }
                }
                let mut q = vec![0.0; d.len()];
                q[best] = 1.0;
                q
            }
            Some(lambda) => {
                let m = d.iter().copied().fold(f64::INFINITY, f64::min);
                let e: Vec<f64> = d.iter().map(|dj| (-(dj - m) / lambda).exp()).collect();
                let s: f64 = e.iter().sum();
                e.iter().map(|v| v / s).collect()
            }
        }
    }

    /// Pixel categories of a decoded code: nearest grid value, ties to the lower index.
    fn decode_cell(&self, code: usize) -> Vec<usize> {
        self.embeddings[code]
            .iter()
            .map(|&v| {
                let mut best = 0;
                for (k, g) in self.value_grid.iter().enumerate() {
                    if (g - v).abs() < (self.value_grid[best] - v).abs() {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }
}

/// Exact pixel distributions of the latent pipeline: latent evidence is the
/// exact expectation of `q(z | patch)` under the factorized pixel evidence,
/// the latent posterior is enumerated over all `K^cells` assignments, and the
/// pixel table is the posterior expectation of the one-hot decode.
///
/// `pixel_weights[pixel][category]` are value-space weights; the result is
/// `[pixel][category]`.
pub fn latent_pipeline_oracle<T: Real>(
    codec: &CodecView<'_>,
    latent_circuit: &Circuit<T>,
    pixel_weights: &[Vec<f64>],
    budget: &EnumerationBudget,
) -> Result<Vec<Vec<f64>>, OracleError> {
    let cells = codec.grid_h * codec.grid_w;
    let k = codec.embeddings.len();
    let nc = codec.value_grid.len();
    if latent_circuit.num_vars() != cells || latent_circuit.num_cats() != k {
        return Err(OracleError::DimMismatch("latent circuit does not match the codebook grid".into()));
    }
    let num_pixels = cells * codec.patch_h * codec.patch_w;
    if pixel_weights.len() != num_pixels {
        return Err(OracleError::DimMismatch(format!("expected {num_pixels} pixel rows")));
    }
    budget.admit(k, cells)?;
    let patch_len = codec.patch_h * codec.patch_w;
    budget.admit(nc, patch_len)?;

    let mut latent_weights = Vec::with_capacity(cells);
    for cell in 0..cells {
        let pix = codec.cell_pixels(cell);
        let probs: Vec<Vec<f64>> = pix
            .iter()
            .map(|&p| {
                let s: f64 = pixel_weights[p].iter().sum();
                pixel_weights[p].iter().map(|w| w / s).collect()
            })
            .collect();
        let mut acc = vec![KahanSum::default(); k];
        let mut cats = vec![0u16; patch_len];
        for i in 0..(nc as u64).pow(patch_len as u32) {
            assignment(i, patch_len, nc, &mut cats);
            let mut pr = 1.0;
            for (j, &c) in cats.iter().enumerate() {
                pr *= probs[j][c as usize];
            }
            if pr == 0.0 {
                continue;
            }
            let values: Vec<f64> = cats.iter().map(|&c| codec.value_grid[c as usize]).collect();
            for (slot, q) in acc.iter_mut().zip(codec.assign(&values)) {
                slot.add(pr * q);
            }
        }
        latent_weights.push(acc.iter().map(KahanSum::total).collect::<Vec<f64>>());
    }

    let mut out = vec![vec![KahanSum::default(); nc]; num_pixels];
    let mut z = KahanSum::default();
    let mut codes = vec![0u16; cells];
    let decoded: Vec<Vec<usize>> = (0..k).map(|j| codec.decode_cell(j)).collect();
    for i in 0..(k as u64).pow(cells as u32) {
        assignment(i, cells, k, &mut codes);
        let mut w = 1.0;
        for (cell, &code) in codes.iter().enumerate() {
            w *= latent_weights[cell][code as usize];
        }
        if w == 0.0 {
            continue;
        }
        let mass = w * probability(latent_circuit, &codes);
        z.add(mass);
        for (cell, &code) in codes.iter().enumerate() {
            for (slot, &pixel) in codec.cell_pixels(cell).iter().enumerate() {
                out[pixel][decoded[code as usize][slot]].add(mass);
            }
        }
    }
    let z = z.total();
    if z <= 0.0 {
        return Err(OracleError::ZeroNormalizer);
    }
    Ok(out.iter().map(|row| row.iter().map(|s| s.total() / z).collect()).collect())
}
