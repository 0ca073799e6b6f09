//! Fixed-budget baselines: attention sinks plus a recent window, tail-window
//! attention scoring, and global top-B allocation across heads.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::selection::{top_k, CandidateSet};
use crate::tensor::Tensor;

use super::KeepSetPerHead;

/// Keeps `[0, n_sink) ∪ [seq_len - window, seq_len)`.
pub fn policy_streamllm(seq_len: usize, n_sink: usize, window: usize) -> Result<CandidateSet> {
    if n_sink + window == 0 {
        return Err(Error::domain("streaming policy needs n_sink + window >= 1"));
    }
    let tail_start = seq_len.saturating_sub(window);
    let indices = (0..seq_len)
        .filter(|&i| i < n_sink || i >= tail_start)
        .collect();
    CandidateSet::new(indices, seq_len)
}

/// Mean attention each position receives over the rows of `attn`.
pub fn window_scores(attn: &Tensor) -> Vec<f32> {
    let rows = attn.rows() as f64;
    (0..attn.cols())
        .map(|j| {
            let s: f64 = attn.iter_rows().map(|r| f64::from(r[j])).sum();
            (s / rows) as f32
        })
        .collect()
}

/// Tail-window scoring: the last `obs_window` positions are always kept and
/// the rest of the budget goes to the prefix positions with the highest mean
/// attention from the window's queries.
pub fn policy_snapkv(attn_window: &Tensor, budget: usize, obs_window: usize) -> Result<CandidateSet> {
    let seq_len = attn_window.cols();
    if obs_window == 0 || attn_window.rows() != obs_window || attn_window.shape().len() != 2 {
        return Err(Error::Dimension {
            op: "policy_snapkv",
            left: attn_window.shape().to_vec(),
            right: vec![obs_window],
        });
    }
    if budget < obs_window {
        return Err(Error::domain(format!(
            "budget {budget} smaller than observation window {obs_window}"
        )));
    }
    if budget >= seq_len {
        return Ok(CandidateSet::full(seq_len));
    }
    let prefix_len = seq_len.saturating_sub(obs_window);
    let scores = window_scores(attn_window);
    let mut keep = top_k(&scores[..prefix_len], budget - obs_window)
        .indices()
        .to_vec();
    keep.extend(prefix_len..seq_len);
    CandidateSet::new(keep, seq_len)
}

/// Nonnegative per-head token scores, `H × L_seq`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTensor(Tensor);

impl ScoreTensor {
    pub fn new(scores: Tensor) -> Result<Self> {
        if scores.shape().len() != 2 {
            return Err(Error::Dimension {
                op: "ScoreTensor",
                left: scores.shape().to_vec(),
                right: vec![],
            });
        }
        if let Some(v) = scores.data().iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::domain(format!("scores must be finite and nonnegative, got {v}")));
        }
        Ok(Self(scores))
    }

    pub fn from_heads(heads: &[Vec<f32>]) -> Result<Self> {
        Self::new(Tensor::from_rows(heads)?)
    }

    pub fn heads(&self) -> usize {
        self.0.rows()
    }

    pub fn seq_len(&self) -> usize {
        self.0.cols()
    }

    pub fn head(&self, h: usize) -> &[f32] {
        self.0.row(h)
    }
}

/// Keeps the global top-`budget` (head, token) cells, regrouped per head.
/// Ties go to the lower head, then the lower token index.
pub fn policy_adakv(scores: &ScoreTensor, budget: usize) -> Result<KeepSetPerHead> {
    let (heads, seq_len) = (scores.heads(), scores.seq_len());
    if budget > heads * seq_len {
        return Err(Error::domain(format!(
            "budget {budget} exceeds {heads} heads × {seq_len} tokens"
        )));
    }
    let flat = scores.0.data();
    let mut cells: Vec<usize> = (0..flat.len()).collect();
    if budget > 0 && budget < cells.len() {
        cells.select_nth_unstable_by(budget - 1, |&a, &b| {
            flat[b]
                .partial_cmp(&flat[a])
                .unwrap_or(Ordering::Equal)
                .then(a.cmp(&b))
        });
    }
    cells.truncate(budget);
    let mut per_head = vec![Vec::new(); heads];
    for cell in cells {
        per_head[cell / seq_len].push(cell % seq_len);
    }
    let sets = per_head
        .into_iter()
        .map(|ix| CandidateSet::from_unsorted(ix, seq_len))
        .collect::<Result<Vec<_>>>()?;
    Ok(KeepSetPerHead::new(sets))
}
