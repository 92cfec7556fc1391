use rayon::prelude::*;

use crate::circuit::{Circuit, NodeId, NodeKind};
use crate::scalar::Real;
use crate::table::CategoricalTable;

use super::{InferenceError, SoftEvidence};

/// Log forward value of every node, indexed by node id.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardValues<T> {
    pub log_fw: Vec<T>,
    pub log_z: T,
}

/// Posterior marginals `p'(x_i)` and the evidence normalizer `log Z`.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorMarginals<T> {
    pub marginals: CategoricalTable<T>,
    pub log_z: T,
}

impl<T: Real> PosteriorMarginals<T> {
    /// `variable,category,probability` lines with a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("variable,category,probability\n");
        for v in 0..self.marginals.num_vars() {
            for (k, p) in self.marginals.row(v).iter().enumerate() {
                s.push_str(&format!("{v},{k},{p}\n"));
            }
        }
        s
    }
}

/// Forward pass in topological order; `input_log(node, var)` supplies input values.
#[inline]
pub(crate) fn forward_into<T: Real>(c: &Circuit<T>, input_log: impl Fn(NodeId, usize) -> T, out: &mut [T]) -> T {
    let edges = c.edge_array();
    let log_params = c.all_log_params();
    for &n in c.topological_order() {
        out[n as usize] = match c.kind(n) {
            NodeKind::Input { var } => input_log(n, var as usize),
            NodeKind::Product => {
                let mut acc = T::zero();
                for &ch in &edges[c.child_range(n)] {
                    acc += out[ch as usize];
                }
                acc
            }
            NodeKind::Sum => {
                let range = c.child_range(n);
                let p0 = c.param_start(n).expect("sum nodes carry parameters");
                let mut m = T::neg_infinity();
                for (k, &ch) in edges[range.clone()].iter().enumerate() {
                    m = m.max(log_params[p0 + k] + out[ch as usize]);
                }
                if m == T::neg_infinity() {
                    m
                } else {
                    let mut s = T::zero();
                    for (k, &ch) in edges[range].iter().enumerate() {
                        s += (log_params[p0 + k] + out[ch as usize] - m).exp();
                    }
                    m + s.ln()
                }
            }
        };
    }
    out[c.root() as usize]
}

/// Normalized flows pushed from the root; `bk` is overwritten.
#[inline]
pub(crate) fn backward_into<T: Real>(c: &Circuit<T>, log_fw: &[T], bk: &mut [T]) -> Result<(), InferenceError> {
    bk.fill(T::zero());
    bk[c.root() as usize] = T::one();
    let edges = c.edge_array();
    let log_params = c.all_log_params();
    for &n in c.topological_order().iter().rev() {
        let b = bk[n as usize];
        if b == T::zero() {
            continue;
        }
        let lf = log_fw[n as usize];
        if lf == T::neg_infinity() {
            return Err(InferenceError::NumericalUnderflow { node: n });
        }
        match c.kind(n) {
            NodeKind::Input { .. } => {}
            NodeKind::Product => {
                for &ch in &edges[c.child_range(n)] {
                    bk[ch as usize] += b;
                }
            }
            NodeKind::Sum => {
                let p0 = c.param_start(n).expect("sum nodes carry parameters");
                for (k, &ch) in edges[c.child_range(n)].iter().enumerate() {
                    let lc = log_fw[ch as usize];
                    // A child with zero forward value carries no posterior mass.
                    if lc == T::neg_infinity() {
                        continue;
                    }
                    bk[ch as usize] += (log_params[p0 + k] + lc - lf).exp() * b;
                }
            }
        }
    }
    Ok(())
}

fn check_evidence<T: Real>(c: &Circuit<T>, ev: &SoftEvidence<T>) -> Result<(), InferenceError> {
    if ev.num_vars() != c.num_vars() {
        return Err(InferenceError::DimMismatch { what: "evidence variables", expected: c.num_vars(), found: ev.num_vars() });
    }
    if ev.num_cats() != c.num_cats() {
        return Err(InferenceError::DimMismatch { what: "evidence categories", expected: c.num_cats(), found: ev.num_cats() });
    }
    if let Some(v) = ev.first_all_zero() {
        return Err(InferenceError::AllZeroEvidence { var: Some(v) });
    }
    Ok(())
}

pub(crate) fn check_sample<T: Real>(c: &Circuit<T>, x: &[u16]) -> Result<(), InferenceError> {
    if x.len() != c.num_vars() {
        return Err(InferenceError::DimMismatch { what: "sample entries", expected: c.num_vars(), found: x.len() });
    }
    if let Some((var, &value)) = x.iter().enumerate().find(|(_, &v)| v as usize >= c.num_cats()) {
        return Err(InferenceError::CategoryOutOfRange { var, value, num_cats: c.num_cats() });
    }
    Ok(())
}

/// `log p(x)` for one complete assignment.
pub fn log_likelihood<T: Real>(c: &Circuit<T>, x: &[u16]) -> Result<T, InferenceError> {
    check_sample(c, x)?;
    let mut buf = vec![T::zero(); c.num_nodes()];
    Ok(forward_into(c, |n, var| c.log_params(n)[x[var] as usize], &mut buf))
}

/// `log p(x)` for every row of a row-major sample matrix, in parallel.
pub fn log_likelihood_batch<T: Real>(c: &Circuit<T>, rows: &[u16]) -> Result<Vec<T>, InferenceError> {
    let nv = c.num_vars().max(1);
    if !rows.len().is_multiple_of(nv) {
        return Err(InferenceError::DimMismatch { what: "matrix entries (multiple of)", expected: nv, found: rows.len() });
    }
    rows.par_chunks(nv)
        .map_init(
            || vec![T::zero(); c.num_nodes()],
            |buf, x| {
                check_sample(c, x)?;
                Ok(forward_into(c, |n, var| c.log_params(n)[x[var] as usize], buf))
            },
        )
        .collect()
}

#[inline]
fn input_log_soft<T: Real>(c: &Circuit<T>, ev: &SoftEvidence<T>, n: NodeId, var: usize) -> T {
    let lf = c.log_params(n);
    let lw = ev.row(var);
    let mut m = T::neg_infinity();
    for (a, b) in lf.iter().zip(lw) {
        m = m.max(*a + *b);
    }
    if m == T::neg_infinity() {
        return m;
    }
    let mut s = T::zero();
    for (a, b) in lf.iter().zip(lw) {
        s += (*a + *b - m).exp();
    }
    m + s.ln()
}

/// Forward pass with the evidence folded into every input node.
pub fn forward_soft_evidence<T: Real>(c: &Circuit<T>, ev: &SoftEvidence<T>) -> Result<ForwardValues<T>, InferenceError> {
    check_evidence(c, ev)?;
    let mut log_fw = vec![T::zero(); c.num_nodes()];
    let log_z = forward_into(c, |n, var| input_log_soft(c, ev, n, var), &mut log_fw);
    if log_z == T::neg_infinity() {
        return Err(InferenceError::AllZeroEvidence { var: None });
    }
    if log_z.is_nan() {
        return Err(InferenceError::NumericalUnderflow { node: c.root() });
    }
    Ok(ForwardValues { log_fw, log_z })
}

/// Normalized backward values `bk_n` for every node.
pub fn backward_flows<T: Real>(c: &Circuit<T>, fw: &ForwardValues<T>) -> Result<Vec<T>, InferenceError> {
    if fw.log_fw.len() != c.num_nodes() {
        return Err(InferenceError::DimMismatch { what: "forward values", expected: c.num_nodes(), found: fw.log_fw.len() });
    }
    let mut bk = vec![T::zero(); c.num_nodes()];
    backward_into(c, &fw.log_fw, &mut bk)?;
    Ok(bk)
}

/// `p'(x_i = x) = Σ_{n ∈ S_i} bk_n · f_n(x) · w_i(x) / fw_n` for every variable.
pub fn backward_marginals<T: Real>(
    c: &Circuit<T>,
    ev: &SoftEvidence<T>,
    fw: &ForwardValues<T>,
) -> Result<PosteriorMarginals<T>, InferenceError> {
    check_evidence(c, ev)?;
    let bk = backward_flows(c, fw)?;
    let mut table = CategoricalTable::zeros(c.num_vars(), c.num_cats());
    for n in c.layer(0).iter().copied() {
        let Some(var) = c.input_var(n) else { continue };
        let b = bk[n as usize];
        if b == T::zero() {
            continue;
        }
        let lf = fw.log_fw[n as usize];
        let row = table.row_mut(var);
        for ((slot, &lp), &lw) in row.iter_mut().zip(c.log_params(n)).zip(ev.row(var)) {
            let v = lp + lw;
            if v != T::neg_infinity() {
                *slot += b * (v - lf).exp();
            }
        }
    }
    Ok(PosteriorMarginals { marginals: table, log_z: fw.log_z })
}

/// Forward then backward pass.
pub fn posterior_marginals<T: Real>(c: &Circuit<T>, ev: &SoftEvidence<T>) -> Result<PosteriorMarginals<T>, InferenceError> {
    let fw = forward_soft_evidence(c, ev)?;
    backward_marginals(c, ev, &fw)
}

/// Independent evidence vectors evaluated in parallel.
pub fn posterior_marginals_batch<T: Real>(
    c: &Circuit<T>,
    evidence: &[SoftEvidence<T>],
) -> Vec<Result<PosteriorMarginals<T>, InferenceError>> {
    evidence.par_iter().map(|ev| posterior_marginals(c, ev)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::tests::figure_two_like;
    use crate::circuit::CircuitBuilder;

    #[test]
    fn uniform_factorized_likelihood() {
        let mut b = CircuitBuilder::new(4, 2);
        let xs: Vec<NodeId> = (0..4).map(|v| b.input(v, &[0.5, 0.5])).collect();
        b.product(&xs);
        let c = b.build().unwrap();
        let ll = log_likelihood(&c, &[0, 1, 1, 0]).unwrap();
        assert!((ll - (1.0f64 / 16.0).ln()).abs() < 1e-15);
    }

    #[test]
    fn single_input_likelihood() {
        let mut b = CircuitBuilder::new(1, 2);
        b.input(0, &[0.3, 0.7]);
        let c = b.build().unwrap();
        assert_eq!(log_likelihood(&c, &[1]).unwrap(), 0.7f64.ln());
        assert_eq!(
            log_likelihood(&c, &[2]).unwrap_err(),
            InferenceError::CategoryOutOfRange { var: 0, value: 2, num_cats: 2 }
        );
        assert!(matches!(log_likelihood(&c, &[0, 0]), Err(InferenceError::DimMismatch { .. })));
    }

    #[test]
    fn no_evidence_normalizes_and_hard_evidence_is_likelihood() {
        let c = figure_two_like();
        let fw = forward_soft_evidence(&c, &SoftEvidence::uniform(4, 2)).unwrap();
        assert!(fw.log_z.abs() < 1e-12);
        let x = [1, 0, 0, 1];
        let fw = forward_soft_evidence(&c, &SoftEvidence::from_hard(&x, 2)).unwrap();
        assert!((fw.log_z - log_likelihood(&c, &x).unwrap()).abs() < 1e-14);
        let m = backward_marginals(&c, &SoftEvidence::from_hard(&x, 2), &fw).unwrap();
        for (v, &xv) in x.iter().enumerate() {
            assert_eq!(m.marginals.argmax()[v], xv);
            assert!((m.marginals.row(v)[xv as usize] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_weight_rows_and_impossible_evidence_are_errors() {
        let c = figure_two_like();
        let mut ev = SoftEvidence::uniform(4, 2);
        ev.set_log_weights(2, &[f64::NEG_INFINITY, f64::NEG_INFINITY]);
        assert_eq!(forward_soft_evidence(&c, &ev).unwrap_err(), InferenceError::AllZeroEvidence { var: Some(2) });

        let mut b = CircuitBuilder::new(1, 2);
        let i = b.input(0, &[1.0, 0.0]);
        b.product(&[i]);
        let c = b.build().unwrap();
        let ev = SoftEvidence::from_hard(&[1], 2);
        assert_eq!(forward_soft_evidence(&c, &ev).unwrap_err(), InferenceError::AllZeroEvidence { var: None });
    }

    #[test]
    fn dead_branches_get_no_flow() {
        // The second mixture component cannot produce X0 = 0.
        let mut b = CircuitBuilder::new(1, 2);
        let a = b.input(0, &[0.6, 0.4]);
        let z = b.input(0, &[0.0, 1.0]);
        let pa = b.product(&[a]);
        let pz = b.product(&[z]);
        b.sum(&[pa, pz], &[0.5, 0.5]);
        let c = b.build().unwrap();
        let ev = SoftEvidence::from_hard(&[0], 2);
        let fw = forward_soft_evidence(&c, &ev).unwrap();
        let bk = backward_flows(&c, &fw).unwrap();
        assert_eq!(bk[z as usize], 0.0);
        assert!((bk[a as usize] - 1.0f64).abs() < 1e-15);
    }

    #[test]
    fn underflowing_forward_values_are_reported() {
        let c = figure_two_like();
        let mut fw = forward_soft_evidence(&c, &SoftEvidence::uniform(4, 2)).unwrap();
        let s0 = c.children(c.root())[0];
        fw.log_fw[s0 as usize] = f64::NEG_INFINITY;
        assert_eq!(backward_flows(&c, &fw).unwrap_err(), InferenceError::NumericalUnderflow { node: s0 });
    }

    #[test]
    fn f32_agrees_with_f64() {
        let c = figure_two_like();
        let c32: Circuit<f32> = c.cast();
        let ev = SoftEvidence::from_weights(4, 2, &[0.2, 1.5, 1.0, 1.0, 3.0, 0.1, 0.5, 0.5]).unwrap();
        let m64 = posterior_marginals(&c, &ev).unwrap();
        let m32 = posterior_marginals(&c32, &ev.cast()).unwrap();
        for (a, b) in m64.marginals.as_slice().iter().zip(m32.marginals.as_slice()) {
            assert!((a - *b as f64).abs() < 1e-5);
        }
    }

    #[test]
    fn csv_export_lists_every_entry() {
        let c = figure_two_like();
        let m = posterior_marginals(&c, &SoftEvidence::uniform(4, 2)).unwrap();
        let csv = m.to_csv();
        assert_eq!(csv.lines().count(), 1 + 8);
        assert!(csv.starts_with("variable,category,probability\n0,0,"));
    }

    #[test]
    fn batch_matches_single() {
        let c = figure_two_like();
        let rows = [0u16, 1, 1, 0, 1, 1, 1, 1];
        let lls = log_likelihood_batch(&c, &rows).unwrap();
        assert_eq!(lls[1], log_likelihood(&c, &rows[4..]).unwrap());
    }
}
