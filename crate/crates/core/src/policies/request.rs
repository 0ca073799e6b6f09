use rayon::prelude::*;

use super::baselines::{policy_adakv, policy_snapkv, policy_streamllm, window_scores, ScoreTensor};
use super::gvote::{gvote_compress, mean_rows, GVoteConfig, HeadInputs, QueryHead};
use super::{ratio_budget, KeepSetPerHead, PolicyConfig};
use crate::error::{Error, Result};
use crate::selection::CandidateSet;
use crate::tensor::{attention_logits, softmax, stream_seed, RopeParams, Tensor};
use crate::trace::TraceBundle;

/// Diagnostics for one GVote head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadStats {
    pub step_budget: usize,
    pub current_size: usize,
    pub voters: usize,
    pub kept: usize,
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedRequest {
    pub seq_len: usize,
    /// Keep-sets indexed by layer, then kv-head.
    pub layers: Vec<KeepSetPerHead>,
    /// Filled for GVote only, indexed like `layers`.
    pub gvote: Vec<Vec<HeadStats>>,
}

impl CompressedRequest {
    pub fn kept(&self) -> usize {
        self.layers.iter().map(KeepSetPerHead::budget).sum()
    }

    pub fn total(&self) -> usize {
        self.layers.iter().map(|l| l.heads() * self.seq_len).sum()
    }

    /// Retained entries over all entries.
    pub fn usage_ratio(&self) -> f64 {
        self.kept() as f64 / self.total() as f64
    }
}

/// Borrowed GVote inputs for `(layer, kv)`, with the rotary offset at the
/// last prompt position.
pub fn head_inputs(trace: &TraceBundle, layer: usize, kv: usize) -> Result<HeadInputs<'_>> {
    let m = &trace.meta;
    let lt = &trace.layers[layer];
    let queries = trace
        .group(kv)
        .map(|q| {
            let qh = &lt.query_heads[q];
            QueryHead {
                w_q: &qh.w_q,
                q_current: qh.prompt_queries.row(qh.prompt_queries.rows() - 1),
            }
        })
        .collect();
    Ok(HeadInputs {
        keys: &lt.kv_heads[kv].keys,
        values: &lt.kv_heads[kv].values,
        hidden: &lt.hidden,
        queries,
        rope: RopeParams::new(m.rope_theta, m.head_dim, m.seq_len as i64 - 1)?,
    })
}

/// Current-query attention for `(layer, kv)`, averaged over the query group.
pub fn current_attention(trace: &TraceBundle, layer: usize, kv: usize) -> Result<Vec<f32>> {
    head_inputs(trace, layer, kv)?.current_attention()
}

/// Causal attention of the last `window` prompt queries, `window × L_seq`,
/// averaged over the query group.
pub fn tail_attention(trace: &TraceBundle, layer: usize, kv: usize, window: usize) -> Result<Tensor> {
    let m = &trace.meta;
    if window == 0 || window > m.n_obs {
        return Err(Error::domain(format!(
            "observation window {window} must be in 1..={}",
            m.n_obs
        )));
    }
    let lt = &trace.layers[layer];
    let keys = &lt.kv_heads[kv].keys;
    let n = m.seq_len;
    let first = m.n_obs - window;
    let mut per_query = Vec::with_capacity(m.group_size);
    for q in trace.group(kv) {
        let pq = &lt.query_heads[q].prompt_queries;
        let logits = attention_logits(&pq.select_rows(&(first..m.n_obs).collect::<Vec<_>>())?, keys)?;
        let rows: Vec<Vec<f32>> = logits
            .iter_rows()
            .enumerate()
            .map(|(r, row)| {
                let pos = n - window + r;
                let mut p = softmax(&row[..=pos]);
                p.resize(n, 0.0);
                p
            })
            .collect();
        per_query.push(rows);
    }
    let averaged: Vec<Vec<f32>> = (0..window)
        .map(|r| mean_rows(&per_query.iter().map(|rows| rows[r].clone()).collect::<Vec<_>>()))
        .collect();
    Tensor::from_rows(&averaged)
}

fn compress_head(
    trace: &TraceBundle,
    policy: &PolicyConfig,
    layer: usize,
    kv: usize,
) -> Result<(CandidateSet, Option<HeadStats>)> {
    let n = trace.meta.seq_len;
    match policy {
        PolicyConfig::KeepAll => Ok((CandidateSet::full(n), None)),
        PolicyConfig::GVote(cfg) => {
            let inputs = head_inputs(trace, layer, kv)?;
            let head_cfg = GVoteConfig {
                seed: stream_seed(cfg.seed, layer, kv),
                ..*cfg
            };
            let out = gvote_compress(&inputs, &head_cfg)?;
            let stats = HeadStats {
                step_budget: out.step_budget,
                current_size: out.current.len(),
                voters: out.voters,
                kept: out.keep.len(),
                fallback: out.fallback,
            };
            Ok((out.keep, Some(stats)))
        }
        PolicyConfig::StreamingLlm { ratio, n_sink } => {
            let budget = ratio_budget(*ratio, n);
            let sinks = (*n_sink).min(budget);
            Ok((policy_streamllm(n, sinks, budget - sinks)?, None))
        }
        PolicyConfig::SnapKv { ratio, obs_window } => {
            let budget = ratio_budget(*ratio, n);
            let window = (*obs_window).min(trace.meta.n_obs).min(budget).max(1);
            let attn = tail_attention(trace, layer, kv, window)?;
            Ok((policy_snapkv(&attn, budget, window)?, None))
        }
        PolicyConfig::AdaKv { .. } => unreachable!("allocated per layer"),
    }
}

fn compress_adakv_layer(trace: &TraceBundle, layer: usize, ratio: f64, obs_window: usize) -> Result<KeepSetPerHead> {
    let m = &trace.meta;
    let window = obs_window.min(m.n_obs).max(1);
    let scores = (0..m.n_kv_heads)
        .map(|kv| {
            tail_attention(trace, layer, kv, window)
                .map(|attn| window_scores(&attn))
                .map_err(|e| e.at_head(layer, kv))
        })
        .collect::<Result<Vec<_>>>()?;
    let budget = ratio_budget(ratio, m.n_kv_heads * m.seq_len);
    policy_adakv(&ScoreTensor::from_heads(&scores)?, budget)
}

/// Applies `policy` to every (layer, kv-head) of `trace`. Heads are
/// processed in parallel; results come back in layer/head order.
pub fn compress_request(trace: &TraceBundle, policy: &PolicyConfig) -> Result<CompressedRequest> {
    policy.validate()?;
    let m = &trace.meta;
    if let PolicyConfig::AdaKv { ratio, obs_window } = policy {
        let layers = (0..m.n_layers)
            .into_par_iter()
            .map(|l| compress_adakv_layer(trace, l, *ratio, *obs_window))
            .collect::<Result<Vec<_>>>()?;
        return Ok(CompressedRequest {
            seq_len: m.seq_len,
            layers,
            gvote: Vec::new(),
        });
    }

    let cells: Vec<(usize, usize)> = (0..m.n_layers)
        .flat_map(|l| (0..m.n_kv_heads).map(move |h| (l, h)))
        .collect();
    let results = cells
        .par_iter()
        .map(|&(l, h)| compress_head(trace, policy, l, h).map_err(|e| e.at_head(l, h)))
        .collect::<Result<Vec<_>>>()?;

    let mut layers = Vec::with_capacity(m.n_layers);
    let mut gvote = Vec::new();
    for chunk in results.chunks(m.n_kv_heads) {
        let (sets, stats): (Vec<_>, Vec<_>) = chunk.iter().cloned().unzip();
        layers.push(KeepSetPerHead::new(sets));
        if matches!(policy, PolicyConfig::GVote(_)) {
            gvote.push(stats.into_iter().flatten().collect());
        }
    }
    Ok(CompressedRequest {
        seq_len: m.seq_len,
        layers,
        gvote,
    })
}
