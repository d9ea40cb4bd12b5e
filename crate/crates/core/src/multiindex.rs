//! Multi-indices over `N_0^n` and the graded lexicographic order.
//!
//! Ties between indices of equal total degree are broken lexicographically on
//! the raw exponent tuple, left to right, ascending. So `(0,1) < (1,0)` and
//! `(1,1) < (2,0)`.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MultiIndex(Vec<u32>);

impl MultiIndex {
    pub fn new(exponents: Vec<u32>) -> Self {
        MultiIndex(exponents)
    }

    pub fn zero(dim: usize) -> Self {
        MultiIndex(vec![0; dim])
    }

    /// The unit index `e_i`.
    pub fn unit(dim: usize, i: usize) -> Self {
        let mut e = vec![0; dim];
        e[i] = 1;
        MultiIndex(e)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn exponents(&self) -> &[u32] {
        &self.0
    }

    pub fn degree(&self) -> u32 {
        self.0.iter().sum()
    }

    /// Component `i` when this is a unit index `e_i`.
    pub fn unit_axis(&self) -> Option<usize> {
        if self.degree() != 1 {
            return None;
        }
        self.0.iter().position(|&e| e == 1)
    }

    /// Componentwise sum `p + q`.
    pub fn add(&self, other: &MultiIndex) -> MultiIndex {
        debug_assert_eq!(self.dim(), other.dim());
        MultiIndex(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    /// The monomial `x^p`.
    pub fn monomial(&self, x: &[f64]) -> f64 {
        self.0
            .iter()
            .zip(x)
            .filter(|(&e, _)| e > 0)
            .map(|(&e, &xi)| xi.powi(e as i32))
            .product()
    }
}

impl fmt::Debug for MultiIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl fmt::Display for MultiIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{e}")?;
        }
        write!(f, ")")
    }
}

/// Graded lexicographic comparison.
pub fn graded_lex_compare(p: &MultiIndex, q: &MultiIndex) -> Result<Ordering> {
    if p.dim() != q.dim() {
        return Err(Error::DimensionMismatch {
            expected: p.dim(),
            got: q.dim(),
        });
    }
    Ok(graded_lex(p, q))
}

fn graded_lex(p: &MultiIndex, q: &MultiIndex) -> Ordering {
    p.degree()
        .cmp(&q.degree())
        .then_with(|| p.0.cmp(&q.0))
}

impl PartialOrd for MultiIndex {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Graded lexicographic order. Indices of different dimension fall back to
/// comparing their lengths first so that the order stays total.
impl Ord for MultiIndex {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dim()
            .cmp(&other.dim())
            .then_with(|| graded_lex(self, other))
    }
}

/// All `p` in `N_0^n` with `1 <= |p| <= max_degree`, in graded lexicographic order.
pub fn enumerate_multiindices(n: usize, max_degree: u32) -> Vec<MultiIndex> {
    let mut out = Vec::new();
    if n == 0 {
        return out;
    }
    for d in 1..=max_degree {
        let mut level = Vec::new();
        let mut current = vec![0u32; n];
        compositions(d, 0, &mut current, &mut level);
        level.sort();
        out.extend(level.into_iter().map(MultiIndex));
    }
    out
}

/// Every multi-index with total degree exactly `d` (unsorted, used for moment tables).
pub fn indices_of_degree(n: usize, d: u32) -> Vec<MultiIndex> {
    let mut level = Vec::new();
    let mut current = vec![0u32; n];
    compositions(d, 0, &mut current, &mut level);
    level.sort();
    level.into_iter().map(MultiIndex).collect()
}

fn compositions(remaining: u32, pos: usize, current: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
    let n = current.len();
    if pos == n - 1 {
        current[pos] = remaining;
        out.push(current.clone());
        return;
    }
    for e in 0..=remaining {
        current[pos] = e;
        compositions(remaining - e, pos + 1, current, out);
    }
    current[pos] = 0;
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mi(e: &[u32]) -> MultiIndex {
        MultiIndex::new(e.to_vec())
    }

    fn binomial(n: u64, k: u64) -> u64 {
        (1..=k).fold(1, |acc, i| acc * (n - k + i) / i)
    }

    #[test]
    fn compare_examples() {
        assert_eq!(graded_lex_compare(&mi(&[1, 0]), &mi(&[1, 0])).unwrap(), Ordering::Equal);
        assert_eq!(graded_lex_compare(&mi(&[0, 1]), &mi(&[1, 0])).unwrap(), Ordering::Less);
        assert_eq!(graded_lex_compare(&mi(&[2, 0]), &mi(&[0, 1])).unwrap(), Ordering::Greater);
    }

    #[test]
    fn compare_rejects_dimension_mismatch() {
        assert!(matches!(
            graded_lex_compare(&mi(&[1]), &mi(&[1, 0])),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn enumeration_examples() {
        assert_eq!(enumerate_multiindices(1, 3), vec![mi(&[1]), mi(&[2]), mi(&[3])]);
        assert_eq!(
            enumerate_multiindices(2, 2),
            vec![mi(&[0, 1]), mi(&[1, 0]), mi(&[0, 2]), mi(&[1, 1]), mi(&[2, 0])]
        );
        assert_eq!(
            enumerate_multiindices(3, 1),
            vec![mi(&[0, 0, 1]), mi(&[0, 1, 0]), mi(&[1, 0, 0])]
        );
    }

    #[test]
    fn enumeration_count_is_binomial() {
        for n in 1..=4usize {
            for d in 1..=4u32 {
                let count = enumerate_multiindices(n, d).len() as u64;
                assert_eq!(count, binomial(n as u64 + d as u64, d as u64) - 1, "n={n} d={d}");
            }
        }
    }

    fn arb_index(n: usize) -> impl Strategy<Value = MultiIndex> {
        proptest::collection::vec(0u32..4, n).prop_map(MultiIndex::new)
    }

    proptest! {
        #[test]
        fn order_is_total_and_transitive(a in arb_index(3), b in arb_index(3), c in arb_index(3)) {
            let ab = graded_lex_compare(&a, &b).unwrap();
            let ba = graded_lex_compare(&b, &a).unwrap();
            prop_assert_eq!(ab, ba.reverse());
            prop_assert_eq!(ab == Ordering::Equal, a == b);
            let bc = graded_lex_compare(&b, &c).unwrap();
            let ac = graded_lex_compare(&a, &c).unwrap();
            if ab != Ordering::Greater && bc != Ordering::Greater {
                prop_assert_ne!(ac, Ordering::Greater);
            }
        }

        #[test]
        fn enumeration_is_strictly_increasing(n in 1usize..4, d in 1u32..5) {
            let idx = enumerate_multiindices(n, d);
            for w in idx.windows(2) {
                prop_assert_eq!(graded_lex_compare(&w[0], &w[1]).unwrap(), Ordering::Less);
            }
        }
    }
}
