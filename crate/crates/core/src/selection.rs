//! Index selection shared by every policy: nucleus truncation on
//! probabilities, row-wise top-k on logits, and mask union.
//!
//! Ties are always broken toward the lower index.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Sorted, unique token positions drawn from `0..universe`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CandidateSet {
    indices: Vec<usize>,
    universe: usize,
}

impl CandidateSet {
    pub fn new(indices: Vec<usize>, universe: usize) -> Result<Self> {
        if let Some(w) = indices.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::domain(format!(
                "candidate indices must be strictly increasing, found {} then {}",
                w[0], w[1]
            )));
        }
        if let Some(&last) = indices.last() {
            if last >= universe {
                return Err(Error::IndexOutOfRange {
                    index: last,
                    len: universe,
                });
            }
        }
        Ok(Self { indices, universe })
    }

    /// Sorts and deduplicates arbitrary indices.
    pub fn from_unsorted(mut indices: Vec<usize>, universe: usize) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        Self::new(indices, universe)
    }

    pub fn full(universe: usize) -> Self {
        Self {
            indices: (0..universe).collect(),
            universe,
        }
    }

    pub fn empty(universe: usize) -> Self {
        Self {
            indices: Vec::new(),
            universe,
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn universe(&self) -> usize {
        self.universe
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.indices.binary_search(&index).is_ok()
    }

    pub fn is_subset(&self, other: &CandidateSet) -> bool {
        self.indices.iter().all(|&i| other.contains(i))
    }

    pub fn to_mask(&self) -> KeepMask {
        let mut bits = vec![false; self.universe];
        for &i in &self.indices {
            bits[i] = true;
        }
        KeepMask { bits }
    }
}

/// Boolean keep flags over a sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeepMask {
    bits: Vec<bool>,
}

impl KeepMask {
    pub fn new(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn to_set(&self) -> CandidateSet {
        CandidateSet {
            indices: self
                .bits
                .iter()
                .enumerate()
                .filter_map(|(i, &b)| b.then_some(i))
                .collect(),
            universe: self.bits.len(),
        }
    }
}

/// Descending by value, then ascending by index.
fn rank_order(values: &[f32]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    }
}

/// Smallest set whose probabilities, taken in descending order, reach `p_nuc`.
///
/// Zero-probability entries are never selected. If rounding leaves the total
/// short of `p_nuc`, every nonzero entry is returned.
pub fn top_p_select(probs: &[f32], p_nuc: f64) -> Result<CandidateSet> {
    if probs.is_empty() {
        return Err(Error::domain("top_p_select on empty distribution"));
    }
    if !(p_nuc > 0.0 && p_nuc <= 1.0) {
        return Err(Error::domain(format!("p_nuc must be in (0, 1], got {p_nuc}")));
    }
    if let Some(p) = probs.iter().find(|p| !(**p >= 0.0) || !p.is_finite()) {
        return Err(Error::domain(format!("probabilities must be finite and nonnegative, got {p}")));
    }
    let total: f64 = probs.iter().map(|&p| f64::from(p)).sum();
    if (total - 1.0).abs() > 1e-4 {
        return Err(Error::domain(format!("probabilities sum to {total}, expected 1")));
    }

    let mut order: Vec<usize> = (0..probs.len()).filter(|&i| probs[i] > 0.0).collect();
    order.sort_unstable_by(rank_order(probs));
    let mut cumulative = 0.0f64;
    let mut cut = order.len();
    if p_nuc < 1.0 {
        for (n, &i) in order.iter().enumerate() {
            cumulative += f64::from(probs[i]);
            if cumulative >= p_nuc {
                cut = n + 1;
                break;
            }
        }
    }
    order.truncate(cut);
    order.sort_unstable();
    Ok(CandidateSet {
        indices: order,
        universe: probs.len(),
    })
}

/// Indices of the `k` largest entries of one row (`k` clamped to the row length).
pub fn top_k(values: &[f32], k: usize) -> CandidateSet {
    let n = values.len();
    let k = k.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    if k < n && k > 0 {
        order.select_nth_unstable_by(k - 1, rank_order(values));
    }
    order.truncate(k);
    order.sort_unstable();
    CandidateSet {
        indices: order,
        universe: n,
    }
}

/// Row-wise [`top_k`] over a logit matrix.
pub fn top_k_rows(logits: &Tensor, k: usize) -> Result<Vec<CandidateSet>> {
    if k == 0 {
        return Err(Error::domain("top_k_rows requires k >= 1"));
    }
    Ok(logits.iter_rows().take(logits.rows()).map(|r| top_k(r, k)).collect())
}

/// Elementwise OR of the sets' masks.
pub fn union_sets(sets: &[CandidateSet]) -> Result<(KeepMask, CandidateSet)> {
    let universe = sets
        .first()
        .map(CandidateSet::universe)
        .ok_or_else(|| Error::domain("union of zero candidate sets"))?;
    let mut bits = vec![false; universe];
    for s in sets {
        if s.universe != universe {
            return Err(Error::domain(format!(
                "mixed universes in union: {} vs {}",
                universe, s.universe
            )));
        }
        for &i in &s.indices {
            bits[i] = true;
        }
    }
    let mask = KeepMask { bits };
    let set = mask.to_set();
    Ok((mask, set))
}
