use rand::Rng as _;

use crate::circuit::{Circuit, NodeKind};
use crate::rng::{seeded, Rng};
use crate::scalar::Real;

use super::{forward_soft_evidence, ForwardValues, InferenceError, SoftEvidence};

/// Index drawn from unnormalized log weights shifted by `log_norm`.
fn pick<T: Real>(weights: impl Iterator<Item = T> + Clone, log_norm: T, rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (k, lw) in weights.enumerate() {
        if lw == T::neg_infinity() {
            continue;
        }
        acc += (lw - log_norm).to_f64_lossy().exp();
        last = k;
        if u < acc {
            return k;
        }
    }
    // Rounding left a sliver above the cumulative total.
    last
}

/// Exact samples from `p(x) ∏ w_i(x_i) / Z` given a finished forward pass.
pub fn conditional_sample_with<T: Real>(
    c: &Circuit<T>,
    ev: &SoftEvidence<T>,
    fw: &ForwardValues<T>,
    rng: &mut Rng,
    count: usize,
) -> Vec<Vec<u16>> {
    let mut out = Vec::with_capacity(count);
    let mut stack = Vec::new();
    for _ in 0..count {
        let mut x = vec![0u16; c.num_vars()];
        stack.clear();
        stack.push(c.root());
        while let Some(n) = stack.pop() {
            let lf = fw.log_fw[n as usize];
            match c.kind(n) {
                NodeKind::Product => stack.extend_from_slice(c.children(n)),
                NodeKind::Sum => {
                    let ch = c.children(n);
                    let terms = ch.iter().zip(c.log_params(n)).map(|(&k, &lt)| lt + fw.log_fw[k as usize]);
                    stack.push(ch[pick(terms, lf, rng)]);
                }
                NodeKind::Input { var } => {
                    let var = var as usize;
                    let terms = c.log_params(n).iter().zip(ev.row(var)).map(|(&a, &b)| a + b);
                    x[var] = pick(terms, lf, rng) as u16;
                }
            }
        }
        out.push(x);
    }
    out
}

/// `count` samples under the evidence, reproducible from `seed`.
pub fn conditional_sample<T: Real>(
    c: &Circuit<T>,
    ev: &SoftEvidence<T>,
    seed: u64,
    count: usize,
) -> Result<Vec<Vec<u16>>, InferenceError> {
    let fw = forward_soft_evidence(c, ev)?;
    Ok(conditional_sample_with(c, ev, &fw, &mut seeded(seed), count))
}

/// Unconditional ancestral samples.
pub fn sample<T: Real>(c: &Circuit<T>, seed: u64, count: usize) -> Vec<Vec<u16>> {
    conditional_sample(c, &SoftEvidence::uniform(c.num_vars(), c.num_cats()), seed, count)
        .expect("a normalized circuit has positive mass without evidence")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::tests::figure_two_like;
    use crate::inference::posterior_marginals;

    #[test]
    fn full_hard_evidence_is_reproduced() {
        let c = figure_two_like();
        let ev = SoftEvidence::from_hard(&[1, 0, 1, 1], 2);
        for x in conditional_sample(&c, &ev, 3, 50).unwrap() {
            assert_eq!(x, vec![1, 0, 1, 1]);
        }
    }

    #[test]
    fn seeds_fix_the_sequence() {
        let c = figure_two_like();
        let ev = SoftEvidence::from_weights(4, 2, &[1.0, 2.0, 0.3, 1.0, 1.0, 1.0, 5.0, 1.0]).unwrap();
        assert_eq!(conditional_sample(&c, &ev, 11, 20).unwrap(), conditional_sample(&c, &ev, 11, 20).unwrap());
        assert_ne!(conditional_sample(&c, &ev, 11, 20).unwrap(), conditional_sample(&c, &ev, 12, 20).unwrap());
    }

    #[test]
    fn empirical_marginals_are_within_three_sigma() {
        let c = figure_two_like();
        let ev = SoftEvidence::from_weights(4, 2, &[1.0, 2.0, 0.3, 1.0, 1.0, 1.0, 5.0, 1.0]).unwrap();
        let m = posterior_marginals(&c, &ev).unwrap();
        let n = 100_000;
        let xs = conditional_sample(&c, &ev, 5, n).unwrap();
        for v in 0..4 {
            let p = m.marginals.row(v)[1];
            let hat = xs.iter().filter(|x| x[v] == 1).count() as f64 / n as f64;
            let sigma = (p * (1.0 - p) / n as f64).sqrt();
            assert!((hat - p).abs() <= 3.0 * sigma, "var {v}: {hat} vs {p}");
        }
    }
}
