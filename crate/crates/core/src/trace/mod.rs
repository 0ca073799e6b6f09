//! Attention traces: the per-layer inputs a compression policy reads plus
//! ground-truth future queries to score it against.

mod format;
mod synth;

pub use format::{load_trace, save_trace, Manifest, TensorEntry, TRACE_VERSION};
pub use synth::{generate_synth, generate_synth_with_truth, SynthSpec, SynthTruth};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{RopeConvention, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub model: String,
    pub n_layers: usize,
    pub n_kv_heads: usize,
    /// Query heads per kv-head.
    pub group_size: usize,
    pub head_dim: usize,
    pub hidden_dim: usize,
    pub seq_len: usize,
    pub rope_theta: f64,
    pub rope_convention: RopeConvention,
    /// Ground-truth decode steps recorded after the prompt.
    pub n_gt: usize,
    /// Trailing prompt positions whose queries are recorded.
    pub n_obs: usize,
}

impl TraceMeta {
    pub fn n_query_heads(&self) -> usize {
        self.n_kv_heads * self.group_size
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.n_layers >= 1, "n_layers must be >= 1"),
            (self.n_kv_heads >= 1, "n_kv_heads must be >= 1"),
            (self.group_size >= 1, "group_size must be >= 1"),
            (self.head_dim >= 2 && self.head_dim % 2 == 0, "head_dim must be even and >= 2"),
            (self.hidden_dim >= 1, "hidden_dim must be >= 1"),
            (self.seq_len >= 1, "seq_len must be >= 1"),
            (self.rope_theta > 0.0, "rope_theta must be positive"),
            (self.n_gt >= 1, "n_gt must be >= 1"),
            (self.n_obs >= 1 && self.n_obs <= self.seq_len, "n_obs must be in 1..=seq_len"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::InvalidTrace((*msg).to_string())),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KvHeadTrace {
    /// `L_seq × d_k`, post-RoPE.
    pub keys: Tensor,
    /// `L_seq × d_k`.
    pub values: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryHeadTrace {
    /// `d_h × d_k`.
    pub w_q: Tensor,
    /// `n_obs × d_k` post-RoPE queries of the last prompt positions; the
    /// final row is the current query.
    pub prompt_queries: Tensor,
    /// `n_gt × d_k` post-RoPE queries of the decode steps.
    pub gt_queries: Tensor,
    /// `n_gt × L_seq` attention of each decode step over the prompt.
    pub gt_attn: Tensor,
}

impl QueryHeadTrace {
    pub fn current_query(&self) -> Tensor {
        let last = self.prompt_queries.rows() - 1;
        Tensor::from_rows(&[self.prompt_queries.row(last).to_vec()]).expect("single row")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    /// `L_seq × d_h` normalised hidden states.
    pub hidden: Tensor,
    pub kv_heads: Vec<KvHeadTrace>,
    /// Query head `q` belongs to kv-head `q / group_size`.
    pub query_heads: Vec<QueryHeadTrace>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceBundle {
    pub meta: TraceMeta,
    pub layers: Vec<LayerTrace>,
}

impl TraceBundle {
    /// Query heads that share kv-head `kv`.
    pub fn group(&self, kv: usize) -> std::ops::Range<usize> {
        let g = self.meta.group_size;
        kv * g..(kv + 1) * g
    }

    /// Every tensor with its canonical name and the shape the metadata implies.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layers.{l}.hidden"), &layer.hidden));
            for (h, kv) in layer.kv_heads.iter().enumerate() {
                out.push((format!("layers.{l}.kv.{h}.keys"), &kv.keys));
                out.push((format!("layers.{l}.kv.{h}.values"), &kv.values));
            }
            for (q, qh) in layer.query_heads.iter().enumerate() {
                out.push((format!("layers.{l}.q.{q}.w_q"), &qh.w_q));
                out.push((format!("layers.{l}.q.{q}.prompt_queries"), &qh.prompt_queries));
                out.push((format!("layers.{l}.q.{q}.gt_queries"), &qh.gt_queries));
                out.push((format!("layers.{l}.q.{q}.gt_attn"), &qh.gt_attn));
            }
        }
        out
    }

    /// Checks every shape against the metadata, finiteness, and that each
    /// ground-truth attention row sums to one within 1e-4.
    pub fn validate(&self) -> Result<()> {
        let m = &self.meta;
        m.validate()?;
        if self.layers.len() != m.n_layers {
            return Err(Error::InvalidTrace(format!(
                "expected {} layers, found {}",
                m.n_layers,
                self.layers.len()
            )));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.kv_heads.len() != m.n_kv_heads || layer.query_heads.len() != m.n_query_heads() {
                return Err(Error::InvalidTrace(format!("layer {l}: wrong head count")));
            }
        }
        for (name, t) in self.named_tensors() {
            let expected = expected_shape(m, &name);
            if t.shape() != expected.as_slice() {
                return Err(Error::ShapeMismatch {
                    name,
                    detail: format!("expected {:?}, found {:?}", expected, t.shape()),
                });
            }
            if !t.is_finite() {
                return Err(Error::InvalidTrace(format!("tensor {name:?} has non-finite values")));
            }
            if name.ends_with(".gt_attn") {
                for (r, row) in t.iter_rows().enumerate() {
                    let s: f64 = row.iter().map(|&x| f64::from(x)).sum();
                    if (s - 1.0).abs() > 1e-4 || row.iter().any(|&x| x < 0.0) {
                        return Err(Error::InvalidTrace(format!(
                            "tensor {name:?} row {r} is not a distribution (sum {s})"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Rewrites rotary channels into the interleaved convention.
    ///
    /// Keys, recorded queries and `W_q` columns are permuted together, so
    /// every attention logit is unchanged. Values carry no rotation and are
    /// left alone.
    pub fn normalize_rope(mut self) -> Self {
        let perm = self
            .meta
            .rope_convention
            .to_interleaved_permutation(self.meta.head_dim);
        if self.meta.rope_convention != RopeConvention::Interleaved {
            self.permute_rotary_channels(&perm);
            self.meta.rope_convention = RopeConvention::Interleaved;
        }
        self
    }

    /// Re-expresses an interleaved bundle in `convention` (inverse of
    /// [`normalize_rope`](Self::normalize_rope)).
    pub fn into_convention(self, convention: RopeConvention) -> Self {
        let mut out = self.normalize_rope();
        let forward = convention.to_interleaved_permutation(out.meta.head_dim);
        let mut inverse = vec![0; forward.len()];
        for (dst, &src) in forward.iter().enumerate() {
            inverse[src] = dst;
        }
        out.permute_rotary_channels(&inverse);
        out.meta.rope_convention = convention;
        out
    }

    fn permute_rotary_channels(&mut self, perm: &[usize]) {
        let permute = |t: &Tensor| {
            Tensor::from_fn(t.rows(), t.cols(), |r, c| t.row(r)[perm[c]])
        };
        for layer in &mut self.layers {
            for kv in &mut layer.kv_heads {
                kv.keys = permute(&kv.keys);
            }
            for q in &mut layer.query_heads {
                q.w_q = permute(&q.w_q);
                q.prompt_queries = permute(&q.prompt_queries);
                q.gt_queries = permute(&q.gt_queries);
            }
        }
    }
}

/// Shape a tensor name must have under `meta`.
pub(crate) fn expected_shape(meta: &TraceMeta, name: &str) -> Vec<usize> {
    let (n, dk, dh) = (meta.seq_len, meta.head_dim, meta.hidden_dim);
    match name.rsplit('.').next().unwrap_or_default() {
        "hidden" => vec![n, dh],
        "keys" | "values" => vec![n, dk],
        "w_q" => vec![dh, dk],
        "prompt_queries" => vec![meta.n_obs, dk],
        "gt_queries" => vec![meta.n_gt, dk],
        "gt_attn" => vec![meta.n_gt, n],
        _ => vec![],
    }
}

/// Canonical tensor names implied by `meta`, in file order.
pub(crate) fn expected_names(meta: &TraceMeta) -> Vec<String> {
    let mut out = Vec::new();
    for l in 0..meta.n_layers {
        out.push(format!("layers.{l}.hidden"));
        for h in 0..meta.n_kv_heads {
            out.push(format!("layers.{l}.kv.{h}.keys"));
            out.push(format!("layers.{l}.kv.{h}.values"));
        }
        for q in 0..meta.n_query_heads() {
            for part in ["w_q", "prompt_queries", "gt_queries", "gt_attn"] {
                out.push(format!("layers.{l}.q.{q}.{part}"));
            }
        }
    }
    out
}
