//! Budget-free compression by Monte-Carlo voting of synthetic future queries.
//!
//! For one kv-head:
//! 1. the current query's attention is truncated by nucleus selection; the
//!    size of that set becomes the per-query step budget;
//! 2. a diagonal Gaussian is fitted to the layer's hidden states, ignoring
//!    the first `n_sink` rows;
//! 3. `samples` hidden states are drawn, projected through each query head's
//!    `W_q`, and rotated with cos/sin averaged over `n_future` upcoming
//!    positions;
//! 4. each synthetic query keeps its top step-budget keys by logit, and the
//!    keep-set is the union of those selections.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::selection::{top_k_rows, top_p_select, union_sets, CandidateSet};
use crate::tensor::{
    attention_logits, avg_future_cos_sin, gaussian_sample, matmul, rope_apply, row_mean_var,
    softmax, RngSeed, RopeParams, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GVoteConfig {
    pub p_nuc: f64,
    pub samples: usize,
    pub n_future: usize,
    pub n_sink: usize,
    pub seed: RngSeed,
    /// Adds the current query's nucleus set to the union.
    pub include_current: bool,
}

impl Default for GVoteConfig {
    fn default() -> Self {
        Self {
            p_nuc: 0.95,
            samples: 8,
            n_future: 64,
            n_sink: 4,
            seed: RngSeed(0),
            include_current: true,
        }
    }
}

impl GVoteConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_nuc > 0.0 && self.p_nuc <= 1.0) {
            return Err(Error::domain(format!("p_nuc must be in (0, 1], got {}", self.p_nuc)));
        }
        if self.samples == 0 {
            return Err(Error::domain("samples must be at least 1"));
        }
        if self.n_future == 0 {
            return Err(Error::domain("n_future must be at least 1"));
        }
        Ok(())
    }
}

/// One query head attached to the kv-head being compressed.
#[derive(Debug, Clone, Copy)]
pub struct QueryHead<'a> {
    /// `d_h × d_k` query projection slice.
    pub w_q: &'a Tensor,
    /// Post-RoPE query of the last prompt token, length `d_k`.
    pub q_current: &'a [f32],
}

/// Everything one kv-head's compression reads.
#[derive(Debug, Clone)]
pub struct HeadInputs<'a> {
    /// `L_seq × d_k`, post-RoPE as cached.
    pub keys: &'a Tensor,
    pub values: &'a Tensor,
    /// `L_seq × d_h` normalised hidden states feeding `W_q`.
    pub hidden: &'a Tensor,
    /// The kv-head's query group; a single entry for multi-head attention.
    pub queries: Vec<QueryHead<'a>>,
    pub rope: RopeParams,
}

impl HeadInputs<'_> {
    pub fn seq_len(&self) -> usize {
        self.keys.rows()
    }

    fn validate(&self) -> Result<()> {
        let n = self.keys.rows();
        if n == 0 {
            return Err(Error::domain("empty key cache"));
        }
        for (what, t) in [("values", self.values), ("hidden", self.hidden)] {
            if t.rows() != n {
                return Err(Error::Dimension {
                    op: what,
                    left: self.keys.shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
        }
        if self.queries.is_empty() {
            return Err(Error::domain("kv-head has no query heads"));
        }
        let d_k = self.keys.cols();
        for q in &self.queries {
            if q.q_current.len() != d_k || q.w_q.cols() != d_k || q.w_q.rows() != self.hidden.cols() {
                return Err(Error::Dimension {
                    op: "query head",
                    left: q.w_q.shape().to_vec(),
                    right: self.keys.shape().to_vec(),
                });
            }
        }
        if self.rope.head_dim != d_k {
            return Err(Error::Dimension {
                op: "rope head_dim",
                left: vec![self.rope.head_dim],
                right: vec![d_k],
            });
        }
        Ok(())
    }

    /// Current-query attention over the cache, averaged across the query group.
    pub fn current_attention(&self) -> Result<Vec<f32>> {
        let rows = self
            .queries
            .iter()
            .map(|q| {
                let q = Tensor::new(vec![1, q.q_current.len()], q.q_current.to_vec())?;
                Ok(softmax(attention_logits(&q, self.keys)?.row(0)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(mean_rows(&rows))
    }
}

/// Elementwise mean of equal-length rows; a single row is returned unchanged.
pub(crate) fn mean_rows(rows: &[Vec<f32>]) -> Vec<f32> {
    if rows.len() == 1 {
        return rows[0].clone();
    }
    let n = rows.len() as f64;
    (0..rows[0].len())
        .map(|j| (rows.iter().map(|r| f64::from(r[j])).sum::<f64>() / n) as f32)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GVoteOutcome {
    pub keep: CandidateSet,
    /// Nucleus set of the current query.
    pub current: CandidateSet,
    pub step_budget: usize,
    /// Synthetic queries that voted (`samples × group size`).
    pub voters: usize,
    /// Set when the statistics window was too short and everything was kept.
    pub fallback: bool,
}

/// `samples × d_k` synthetic queries for each member of the query group:
/// Gaussian hidden draws projected by `W_q` and rotated with cos/sin
/// averaged over the next `n_future` positions.
pub fn synthetic_queries(inputs: &HeadInputs<'_>, cfg: &GVoteConfig) -> Result<Vec<Tensor>> {
    let (mu, var) = row_mean_var(inputs.hidden, cfg.n_sink)?;
    let hidden_samples = gaussian_sample(&mu, &var, cfg.samples, cfg.seed)?;
    let (cos, sin) = avg_future_cos_sin(&inputs.rope, cfg.n_future)?;
    inputs
        .queries
        .iter()
        .map(|q| rope_apply(&matmul(&hidden_samples, q.w_q)?, &cos, &sin))
        .collect()
}

pub fn gvote_compress(inputs: &HeadInputs<'_>, cfg: &GVoteConfig) -> Result<GVoteOutcome> {
    cfg.validate()?;
    inputs.validate()?;
    let seq_len = inputs.seq_len();

    let current_attn = inputs.current_attention()?;
    let current = top_p_select(&current_attn, cfg.p_nuc)?;
    let step_budget = current.len();

    if seq_len < cfg.n_sink + 2 {
        return Ok(GVoteOutcome {
            keep: CandidateSet::full(seq_len),
            current,
            step_budget,
            voters: 0,
            fallback: true,
        });
    }

    let mut votes = Vec::with_capacity(cfg.samples * inputs.queries.len() + 1);
    if step_budget > 0 {
        for synthetic in synthetic_queries(inputs, cfg)? {
            let logits = attention_logits(&synthetic, inputs.keys)?;
            votes.extend(top_k_rows(&logits, step_budget)?);
        }
    }
    let voters = votes.len();
    if cfg.include_current || votes.is_empty() {
        votes.push(current.clone());
    }
    let (_, keep) = union_sets(&votes)?;

    debug_assert!(keep.len() >= step_budget.min(seq_len));
    debug_assert!(keep.len() <= (voters * step_budget + step_budget).min(seq_len));

    Ok(GVoteOutcome {
        keep,
        current,
        step_budget,
        voters,
        fallback: false,
    })
}
