//! Desk-scale synthetic traces with known structure.
//!
//! Hidden states are drawn per channel from `N(mu_c, sigma_c^2)`; the first
//! `n_sink` rows are shifted by `sink_strength` so they contaminate a naive
//! fit. Keys and values are random projections of the hidden states, keys
//! RoPE'd at their true positions. `clusters` spans of `cluster_span` tokens
//! per kv-head receive an extra key component aligned with the head's mean
//! query as seen from the first decode position, worth about `salience`
//! logits; sinks receive a similar component worth `sink_strength` logits.
//! Decode-step queries are fresh draws from the hidden distribution,
//! projected and RoPE'd at `seq_len, seq_len + 1, …`.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{KvHeadTrace, LayerTrace, QueryHeadTrace, TraceBundle, TraceMeta};
use crate::error::{Error, Result};
use crate::tensor::{
    attention_logits, cos_sin_at, matmul, rope_apply, softmax, stream_seed, RngSeed, RopeConvention,
    RopeParams, Tensor,
};

/// How far each cluster's direction strays from the head's mean query.
const CLUSTER_SPREAD: f64 = 0.5;
/// Per-token multiplicative jitter on the cluster component.
const CLUSTER_JITTER: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_layers: usize,
    pub n_kv_heads: usize,
    pub group_size: usize,
    pub head_dim: usize,
    pub hidden_dim: usize,
    pub seq_len: usize,
    pub n_gt: usize,
    pub n_obs: usize,
    pub n_sink: usize,
    pub sink_strength: f64,
    pub clusters: usize,
    pub cluster_span: usize,
    pub salience: f64,
    pub noise_scale: f64,
    pub rope_theta: f64,
    pub seed: RngSeed,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_layers: 1,
            n_kv_heads: 2,
            group_size: 1,
            head_dim: 32,
            hidden_dim: 64,
            seq_len: 1024,
            n_gt: 8,
            n_obs: 8,
            n_sink: 4,
            sink_strength: 4.0,
            clusters: 1,
            cluster_span: 16,
            salience: 10.0,
            noise_scale: 0.5,
            rope_theta: 10000.0,
            seed: RngSeed(0),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("n_kv_heads", self.n_kv_heads),
            ("group_size", self.group_size),
            ("head_dim", self.head_dim),
            ("hidden_dim", self.hidden_dim),
            ("seq_len", self.seq_len),
            ("n_gt", self.n_gt),
            ("n_obs", self.n_obs),
            ("clusters", self.clusters),
            ("cluster_span", self.cluster_span),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::domain(format!("synth spec: {name} must be >= 1")));
        }
        if self.head_dim % 2 != 0 {
            return Err(Error::domain("synth spec: head_dim must be even"));
        }
        for (name, v) in [
            ("sink_strength", self.sink_strength),
            ("salience", self.salience),
            ("noise_scale", self.noise_scale),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::domain(format!("synth spec: {name} must be finite and >= 0")));
            }
        }
        if !(self.rope_theta > 0.0) {
            return Err(Error::domain("synth spec: rope_theta must be positive"));
        }
        let needed = self.n_sink + self.clusters * self.cluster_span + self.n_obs;
        if needed > self.seq_len {
            return Err(Error::domain(format!(
                "synth spec: sinks, clusters and observation window need {needed} tokens, seq_len is {}",
                self.seq_len
            )));
        }
        Ok(())
    }

    fn meta(&self) -> TraceMeta {
        TraceMeta {
            model: "synthetic".into(),
            n_layers: self.n_layers,
            n_kv_heads: self.n_kv_heads,
            group_size: self.group_size,
            head_dim: self.head_dim,
            hidden_dim: self.hidden_dim,
            seq_len: self.seq_len,
            rope_theta: self.rope_theta,
            rope_convention: RopeConvention::Interleaved,
            n_gt: self.n_gt,
            n_obs: self.n_obs,
        }
    }
}

/// Generator parameters hidden from the bundle itself.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthTruth {
    /// Per layer, the per-channel hidden-state mean.
    pub hidden_mu: Vec<Vec<f64>>,
    /// Per layer, the per-channel hidden-state standard deviation.
    pub hidden_sigma: Vec<Vec<f64>>,
    /// Per layer and kv-head, the salient token spans.
    pub clusters: Vec<Vec<Vec<Range<usize>>>>,
}

pub fn generate_synth(spec: &SynthSpec) -> Result<TraceBundle> {
    generate_synth_with_truth(spec).map(|(b, _)| b)
}

struct Sampler(ChaCha8Rng);

impl Sampler {
    fn normal(&mut self) -> f64 {
        self.0.sample(StandardNormal)
    }

    fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.0.random_range(lo..hi)
    }

    /// `rows × cols` with entries `N(0, scale²)`.
    fn matrix(&mut self, rows: usize, cols: usize, scale: f64) -> Tensor {
        Tensor::from_fn(rows, cols, |_, _| (self.normal() * scale) as f32)
    }

    fn unit(&mut self, d: usize) -> Vec<f64> {
        normalized((0..d).map(|_| self.normal()).collect())
    }
}

fn normalized(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return v;
    }
    v.into_iter().map(|x| x / n).collect()
}

fn rope_at(rows: &Tensor, rope: &RopeParams, positions: impl Iterator<Item = i64>) -> Result<Tensor> {
    let mut out = rows.clone();
    for (r, pos) in positions.enumerate() {
        let (cos, sin) = cos_sin_at(rope, pos)?;
        let one = Tensor::from_rows(&[rows.row(r).to_vec()])?;
        out.row_mut(r).copy_from_slice(rope_apply(&one, &cos, &sin)?.data());
    }
    Ok(out)
}

fn place_clusters(s: &mut Sampler, spec: &SynthSpec) -> Vec<Range<usize>> {
    let region = spec.seq_len - spec.n_obs - spec.n_sink;
    let free = region - spec.clusters * spec.cluster_span;
    let mut offsets: Vec<usize> = (0..spec.clusters)
        .map(|_| s.0.random_range(0..=free))
        .collect();
    offsets.sort_unstable();
    offsets
        .iter()
        .enumerate()
        .map(|(j, off)| {
            let start = spec.n_sink + off + j * spec.cluster_span;
            start..start + spec.cluster_span
        })
        .collect()
}

pub fn generate_synth_with_truth(spec: &SynthSpec) -> Result<(TraceBundle, SynthTruth)> {
    spec.validate()?;
    let meta = spec.meta();
    let (n, dk, dh, g) = (spec.seq_len, spec.head_dim, spec.hidden_dim, spec.group_size);
    let rope = RopeParams::new(spec.rope_theta, dk, n as i64 - 1)?;
    let proj_scale = 1.0 / (dh as f64).sqrt();
    let (first_future_cos, first_future_sin) = cos_sin_at(&rope, n as i64)?;

    let mut truth = SynthTruth {
        hidden_mu: Vec::new(),
        hidden_sigma: Vec::new(),
        clusters: Vec::new(),
    };
    let mut layers = Vec::with_capacity(spec.n_layers);
    for l in 0..spec.n_layers {
        let mut s = Sampler(ChaCha8Rng::seed_from_u64(stream_seed(spec.seed, l, usize::MAX).0));
        let mu: Vec<f64> = (0..dh).map(|_| s.normal()).collect();
        let sigma: Vec<f64> = (0..dh).map(|_| spec.noise_scale * s.uniform(0.25, 0.75)).collect();

        let draw_hidden = |s: &mut Sampler| -> Vec<f32> {
            mu.iter()
                .zip(&sigma)
                .map(|(m, sd)| (m + sd * s.normal()) as f32)
                .collect()
        };
        let hidden = Tensor::from_rows(
            &(0..n)
                .map(|i| {
                    if i < spec.n_sink {
                        mu.iter().map(|m| (m + spec.sink_strength) as f32).collect()
                    } else {
                        draw_hidden(&mut s)
                    }
                })
                .collect::<Vec<_>>(),
        )?;
        let gt_hidden = Tensor::from_rows(&(0..spec.n_gt).map(|_| draw_hidden(&mut s)).collect::<Vec<_>>())?;
        let mu_row = Tensor::from_rows(&[mu.iter().map(|&m| m as f32).collect()])?;

        let mut kv_heads = Vec::with_capacity(spec.n_kv_heads);
        let mut query_heads = Vec::with_capacity(spec.n_kv_heads * g);
        let mut layer_clusters = Vec::with_capacity(spec.n_kv_heads);
        for _ in 0..spec.n_kv_heads {
            let w_k = s.matrix(dh, dk, proj_scale);
            let w_v = s.matrix(dh, dk, proj_scale);
            let w_base = s.matrix(dh, dk, proj_scale);
            let w_qs: Vec<Tensor> = (0..g)
                .map(|_| {
                    let own = s.matrix(dh, dk, proj_scale);
                    Tensor::from_fn(dh, dk, |r, c| {
                        ((f64::from(w_base.row(r)[c]) + 0.5 * f64::from(own.row(r)[c])) / 1.25f64.sqrt())
                            as f32
                    })
                })
                .collect();

            // Mean query direction of the group and its typical projection.
            let mean_queries: Vec<Vec<f64>> = w_qs
                .iter()
                .map(|w| Ok(matmul(&mu_row, w)?.data().iter().map(|&x| f64::from(x)).collect()))
                .collect::<Result<_>>()?;
            let u = normalized((0..dk).map(|c| mean_queries.iter().map(|q| q[c]).sum()).collect());
            let along: f64 = mean_queries
                .iter()
                .map(|q| q.iter().zip(&u).map(|(a, b)| a * b).sum::<f64>())
                .sum::<f64>()
                / g as f64;
            let along = if along > 1e-6 { along } else { 1.0 };
            let logit_unit = (dk as f64).sqrt() / along;

            // Post-RoPE direction as seen from the first decode position.
            let rotate = |v: &[f64]| -> Result<Vec<f64>> {
                let t = Tensor::from_rows(&[v.iter().map(|&x| x as f32).collect()])?;
                Ok(rope_apply(&t, &first_future_cos, &first_future_sin)?
                    .data()
                    .iter()
                    .map(|&x| f64::from(x))
                    .collect())
            };

            let spans = place_clusters(&mut s, spec);
            let mut keys = rope_at(&matmul(&hidden, &w_k)?, &rope, 0..n as i64)?;
            let sink_dir = rotate(&u)?;
            for i in 0..spec.n_sink {
                for (k, d) in keys.row_mut(i).iter_mut().zip(&sink_dir) {
                    *k += (spec.sink_strength * logit_unit * d) as f32;
                }
            }
            for span in &spans {
                let r = s.unit(dk);
                let dir = normalized(u.iter().zip(&r).map(|(a, b)| a + CLUSTER_SPREAD * b).collect());
                let dir = rotate(&dir)?;
                for i in span.clone() {
                    let scale = spec.salience * logit_unit * (1.0 + CLUSTER_JITTER * s.normal());
                    for (k, d) in keys.row_mut(i).iter_mut().zip(&dir) {
                        *k += (scale * d) as f32;
                    }
                }
            }

            let noise = s.matrix(n, dk, 1.0);
            let projected = matmul(&hidden, &w_v)?;
            let values = Tensor::from_fn(n, dk, |r, c| projected.row(r)[c] + noise.row(r)[c]);

            for w_q in w_qs {
                let tail: Vec<usize> = (n - spec.n_obs..n).collect();
                let prompt_queries = rope_at(
                    &matmul(&hidden.select_rows(&tail)?, &w_q)?,
                    &rope,
                    tail.iter().map(|&p| p as i64),
                )?;
                let gt_queries = rope_at(
                    &matmul(&gt_hidden, &w_q)?,
                    &rope,
                    (0..spec.n_gt as i64).map(|s| n as i64 + s),
                )?;
                let logits = attention_logits(&gt_queries, &keys)?;
                let gt_attn = Tensor::from_rows(&logits.iter_rows().map(softmax).collect::<Vec<_>>())?;
                query_heads.push(QueryHeadTrace {
                    w_q,
                    prompt_queries,
                    gt_queries,
                    gt_attn,
                });
            }
            kv_heads.push(KvHeadTrace { keys, values });
            layer_clusters.push(spans);
        }
        truth.hidden_mu.push(mu);
        truth.hidden_sigma.push(sigma);
        truth.clusters.push(layer_clusters);
        layers.push(LayerTrace {
            hidden,
            kv_heads,
            query_heads,
        });
    }
    let bundle = TraceBundle { meta, layers };
    bundle.validate()?;
    Ok((bundle, truth))
}
