//! Variable scopes.

/// Circuits with at most this many variables store scopes as bitsets.
pub const BITSET_MAX_VARS: usize = 1024;

/// A set of variable ids. Fixed-width bitset for small circuits, sorted ids otherwise.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum VarSet {
    Bits(Vec<u64>),
    Sorted(Vec<u32>),
}

impl VarSet {
    pub fn empty(num_vars: usize) -> Self {
        if num_vars <= BITSET_MAX_VARS {
            VarSet::Bits(vec![0; num_vars.div_ceil(64).max(1)])
        } else {
            VarSet::Sorted(Vec::new())
        }
    }

    pub fn singleton(num_vars: usize, var: u32) -> Self {
        let mut s = Self::empty(num_vars);
        s.insert(var);
        s
    }

    pub fn from_vars(num_vars: usize, vars: impl IntoIterator<Item = u32>) -> Self {
        let mut s = Self::empty(num_vars);
        for v in vars {
            s.insert(v);
        }
        s
    }

    pub fn insert(&mut self, var: u32) {
        match self {
            VarSet::Bits(w) => w[var as usize / 64] |= 1u64 << (var % 64),
            VarSet::Sorted(v) => {
                if let Err(pos) = v.binary_search(&var) {
                    v.insert(pos, var);
                }
            }
        }
    }

    pub fn contains(&self, var: u32) -> bool {
        match self {
            VarSet::Bits(w) => w.get(var as usize / 64).is_some_and(|x| x >> (var % 64) & 1 == 1),
            VarSet::Sorted(v) => v.binary_search(&var).is_ok(),
        }
    }

    pub fn union_with(&mut self, other: &VarSet) {
        match (self, other) {
            (VarSet::Bits(a), VarSet::Bits(b)) => {
                for (x, y) in a.iter_mut().zip(b) {
                    *x |= *y;
                }
            }
            (VarSet::Sorted(a), VarSet::Sorted(b)) => {
                let mut out = Vec::with_capacity(a.len() + b.len());
                let (mut i, mut j) = (0, 0);
                while i < a.len() && j < b.len() {
                    match a[i].cmp(&b[j]) {
                        std::cmp::Ordering::Less => {
                            out.push(a[i]);
                            i += 1;
                        }
                        std::cmp::Ordering::Greater => {
                            out.push(b[j]);
                            j += 1;
                        }
                        std::cmp::Ordering::Equal => {
                            out.push(a[i]);
                            i += 1;
                            j += 1;
                        }
                    }
                }
                out.extend_from_slice(&a[i..]);
                out.extend_from_slice(&b[j..]);
                *a = out;
            }
            _ => panic!("mixed scope representations"),
        }
    }

    pub fn is_disjoint(&self, other: &VarSet) -> bool {
        match (self, other) {
            (VarSet::Bits(a), VarSet::Bits(b)) => a.iter().zip(b).all(|(x, y)| x & y == 0),
            (VarSet::Sorted(a), VarSet::Sorted(b)) => {
                let (mut i, mut j) = (0, 0);
                while i < a.len() && j < b.len() {
                    match a[i].cmp(&b[j]) {
                        std::cmp::Ordering::Less => i += 1,
                        std::cmp::Ordering::Greater => j += 1,
                        std::cmp::Ordering::Equal => return false,
                    }
                }
                true
            }
            _ => panic!("mixed scope representations"),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            VarSet::Bits(w) => w.iter().map(|x| x.count_ones() as usize).sum(),
            VarSet::Sorted(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Ascending variable ids.
    pub fn to_vec(&self) -> Vec<u32> {
        match self {
            VarSet::Bits(w) => {
                let mut out = Vec::new();
                for (k, &word) in w.iter().enumerate() {
                    let mut x = word;
                    while x != 0 {
                        let b = x.trailing_zeros();
                        out.push(k as u32 * 64 + b);
                        x &= x - 1;
                    }
                }
                out
            }
            VarSet::Sorted(v) => v.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn both_representations_agree(
            a in proptest::collection::btree_set(0u32..1500, 0..40),
            b in proptest::collection::btree_set(0u32..1500, 0..40),
        ) {
            let bits_a = VarSet::from_vars(1500.min(BITSET_MAX_VARS), a.iter().copied().filter(|&v| v < 1024));
            let bits_b = VarSet::from_vars(1500.min(BITSET_MAX_VARS), b.iter().copied().filter(|&v| v < 1024));
            let sa: std::collections::BTreeSet<u32> = a.iter().copied().filter(|&v| v < 1024).collect();
            let sb: std::collections::BTreeSet<u32> = b.iter().copied().filter(|&v| v < 1024).collect();
            prop_assert_eq!(bits_a.is_disjoint(&bits_b), sa.is_disjoint(&sb));

            let sorted_a = VarSet::from_vars(1500, a.iter().copied());
            let sorted_b = VarSet::from_vars(1500, b.iter().copied());
            prop_assert_eq!(sorted_a.is_disjoint(&sorted_b), a.is_disjoint(&b));
            let mut u = sorted_a.clone();
            u.union_with(&sorted_b);
            prop_assert_eq!(u.to_vec(), a.union(&b).copied().collect::<Vec<_>>());

            let mut ub = bits_a.clone();
            ub.union_with(&bits_b);
            prop_assert_eq!(ub.to_vec(), sa.union(&sb).copied().collect::<Vec<_>>());
            prop_assert_eq!(ub.len(), sa.union(&sb).count());
        }
    }

    #[test]
    fn large_circuits_use_sorted_ids() {
        assert!(matches!(VarSet::empty(2000), VarSet::Sorted(_)));
        assert!(matches!(VarSet::empty(1024), VarSet::Bits(_)));
        let s = VarSet::singleton(2000, 1999);
        assert!(s.contains(1999) && !s.contains(3));
    }
}
