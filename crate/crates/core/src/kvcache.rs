//! Non-uniform pruned cache: each head keeps its own number of rows, stored
//! back to back with prefix-sum offsets, the layout varlen attention kernels
//! consume.

use crate::error::{Error, Result};
use crate::policies::KeepSetPerHead;
use crate::tensor::{dot_f64, softmax, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct NonUniformCache {
    head_offsets: Vec<usize>,
    keys_flat: Tensor,
    values_flat: Tensor,
    kept_indices: Vec<Vec<usize>>,
    seq_len: usize,
}

/// Gathers each head's kept rows in ascending original position.
pub fn prune(keys: &[&Tensor], values: &[&Tensor], keep: &KeepSetPerHead) -> Result<NonUniformCache> {
    if keys.len() != keep.heads() || values.len() != keep.heads() {
        return Err(Error::Dimension {
            op: "prune",
            left: vec![keys.len(), values.len()],
            right: vec![keep.heads()],
        });
    }
    let seq_len = keys.first().map_or(0, |k| k.rows());
    let d = keys.first().map_or(0, |k| k.cols());
    let mut head_offsets = Vec::with_capacity(keep.heads() + 1);
    head_offsets.push(0);
    let total = keep.budget();
    let mut kflat = Vec::with_capacity(total * d);
    let mut vflat = Vec::with_capacity(total * d);
    let mut kept_indices = Vec::with_capacity(keep.heads());
    for (h, set) in keep.sets().iter().enumerate() {
        let (k, v) = (keys[h], values[h]);
        if k.rows() != seq_len || v.rows() != seq_len || k.cols() != d || v.cols() != d {
            return Err(Error::Dimension {
                op: "prune",
                left: k.shape().to_vec(),
                right: v.shape().to_vec(),
            });
        }
        if set.universe() != seq_len {
            return Err(Error::domain(format!(
                "head {h}: keep-set over {} positions, cache has {seq_len}",
                set.universe()
            )));
        }
        for &i in set.indices() {
            if i >= seq_len {
                return Err(Error::IndexOutOfRange { index: i, len: seq_len });
            }
            kflat.extend_from_slice(k.row(i));
            vflat.extend_from_slice(v.row(i));
        }
        head_offsets.push(head_offsets[h] + set.len());
        kept_indices.push(set.indices().to_vec());
    }
    Ok(NonUniformCache {
        keys_flat: Tensor::new(vec![total, d], kflat)?,
        values_flat: Tensor::new(vec![total, d], vflat)?,
        head_offsets,
        kept_indices,
        seq_len,
    })
}

impl NonUniformCache {
    pub fn heads(&self) -> usize {
        self.kept_indices.len()
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn head_offsets(&self) -> &[usize] {
        &self.head_offsets
    }

    pub fn keys_flat(&self) -> &Tensor {
        &self.keys_flat
    }

    pub fn values_flat(&self) -> &Tensor {
        &self.values_flat
    }

    pub fn kept_indices(&self, head: usize) -> &[usize] {
        &self.kept_indices[head]
    }

    pub fn kept(&self, head: usize) -> usize {
        self.head_offsets[head + 1] - self.head_offsets[head]
    }

    /// `Σ_h kept_h / (H · L_seq)`.
    pub fn usage_ratio(&self) -> f64 {
        let total = self.heads() * self.seq_len;
        if total == 0 {
            return 0.0;
        }
        *self.head_offsets.last().unwrap_or(&0) as f64 / total as f64
    }

    fn head_rows<'a>(&self, t: &'a Tensor, head: usize) -> &'a [f32] {
        let d = t.cols();
        &t.data()[self.head_offsets[head] * d..self.head_offsets[head + 1] * d]
    }

    /// Softmax weights of `query` over the head's kept rows, renormalised.
    pub fn attention_weights(&self, head: usize, query: &[f32]) -> Result<Vec<f32>> {
        self.check(head, query)?;
        Ok(attention_probs(query, self.head_rows(&self.keys_flat, head)))
    }

    /// Attention output of `query` against the head's kept rows.
    pub fn attend(&self, head: usize, query: &[f32]) -> Result<Vec<f32>> {
        self.check(head, query)?;
        Ok(attend_flat(
            query,
            self.head_rows(&self.keys_flat, head),
            self.head_rows(&self.values_flat, head),
        ))
    }

    fn check(&self, head: usize, query: &[f32]) -> Result<()> {
        if head >= self.heads() {
            return Err(Error::IndexOutOfRange {
                index: head,
                len: self.heads(),
            });
        }
        if query.len() != self.keys_flat.cols() {
            return Err(Error::Dimension {
                op: "varlen_attention",
                left: vec![query.len()],
                right: self.keys_flat.shape().to_vec(),
            });
        }
        if self.kept(head) == 0 {
            return Err(Error::EmptyCache { head });
        }
        Ok(())
    }
}

fn attention_probs(query: &[f32], keys: &[f32]) -> Vec<f32> {
    let d = query.len();
    let scale = (d as f64).sqrt();
    let logits: Vec<f32> = keys
        .chunks_exact(d)
        .map(|k| (dot_f64(query, k) / scale) as f32)
        .collect();
    softmax(&logits)
}

fn attend_flat(query: &[f32], keys: &[f32], values: &[f32]) -> Vec<f32> {
    let d = query.len();
    let probs = attention_probs(query, keys);
    let mut out = vec![0.0f64; d];
    for (p, v) in probs.iter().zip(values.chunks_exact(d)) {
        for (o, &x) in out.iter_mut().zip(v) {
            *o += f64::from(*p) * f64::from(x);
        }
    }
    out.into_iter().map(|x| x as f32).collect()
}

/// Per-head attention outputs, one `1 × d_k` query per head.
pub fn varlen_attention(cache: &NonUniformCache, queries: &[Tensor]) -> Result<Vec<Tensor>> {
    if queries.len() != cache.heads() {
        return Err(Error::Dimension {
            op: "varlen_attention",
            left: vec![queries.len()],
            right: vec![cache.heads()],
        });
    }
    queries
        .iter()
        .enumerate()
        .map(|(h, q)| {
            let out = cache.attend(h, q.data())?;
            Tensor::new(vec![1, out.len()], out)
        })
        .collect()
}

/// Unpruned attention `softmax(q·Kᵀ/√d)·V` for one query.
pub fn dense_attention(query: &[f32], keys: &Tensor, values: &Tensor) -> Result<Vec<f32>> {
    if query.len() != keys.cols() || keys.rows() != values.rows() || keys.cols() != values.cols() {
        return Err(Error::Dimension {
            op: "dense_attention",
            left: keys.shape().to_vec(),
            right: values.shape().to_vec(),
        });
    }
    if keys.rows() == 0 {
        return Err(Error::EmptyCache { head: 0 });
    }
    Ok(attend_flat(query, keys.data(), values.data()))
}
