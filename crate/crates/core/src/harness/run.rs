use rayon::prelude::*;

use super::metrics::{attention_overlap, output_error, pearson};
use crate::error::{Error, Result};
use crate::kvcache::{dense_attention, prune, NonUniformCache};
use crate::policies::{
    compress_request, head_inputs, synthetic_queries, CompressedRequest, GVoteConfig, PolicyConfig,
    PolicyKind,
};
use crate::selection::{top_p_select, CandidateSet};
use crate::tensor::{attention_logits, softmax, stream_seed, Tensor};
use crate::trace::TraceBundle;

/// Metrics for one layer, averaged with equal weight over
/// (query head, ground-truth step) cells.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMetrics {
    pub layer: usize,
    pub usage_ratio: f64,
    pub attention_overlap: f64,
    /// Overlap of each kv-head's keep-set with its current-query attention.
    pub current_overlap: f64,
    /// `None` when no cell had a defined correlation.
    pub pearson_r: Option<f64>,
    pub output_cosine: f64,
    pub degenerate_outputs: usize,
}

/// One (trace, policy, config) evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub policy: PolicyKind,
    pub config: String,
    pub ratio: Option<f64>,
    pub usage_ratio: f64,
    pub attention_overlap: f64,
    pub current_overlap: f64,
    pub pearson_r: Option<f64>,
    pub output_cosine: f64,
    pub degenerate_outputs: usize,
    pub per_layer: Vec<LayerMetrics>,
}

#[derive(Default)]
struct Accum {
    overlap: Vec<f64>,
    current: Vec<f64>,
    pearson: Vec<f64>,
    cosine: Vec<f64>,
    degenerate: usize,
}

impl Accum {
    fn merge(&mut self, other: &Accum) {
        self.overlap.extend_from_slice(&other.overlap);
        self.current.extend_from_slice(&other.current);
        self.pearson.extend_from_slice(&other.pearson);
        self.cosine.extend_from_slice(&other.cosine);
        self.degenerate += other.degenerate;
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn mean_opt(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| mean(xs))
}

/// Pruned attention weights scattered back onto the full sequence.
fn scattered_weights(cache: &NonUniformCache, head: usize, query: &[f32]) -> Result<Vec<f32>> {
    let mut full = vec![0.0f32; cache.seq_len()];
    for (&i, w) in cache
        .kept_indices(head)
        .iter()
        .zip(cache.attention_weights(head, query)?)
    {
        full[i] = w;
    }
    Ok(full)
}

fn evaluate_layer(trace: &TraceBundle, compressed: &CompressedRequest, layer: usize) -> Result<Accum> {
    let m = &trace.meta;
    let lt = &trace.layers[layer];
    let keep = &compressed.layers[layer];
    let keys: Vec<&Tensor> = lt.kv_heads.iter().map(|h| &h.keys).collect();
    let values: Vec<&Tensor> = lt.kv_heads.iter().map(|h| &h.values).collect();
    let cache = prune(&keys, &values, keep)?;
    let mut acc = Accum::default();

    for kv in 0..m.n_kv_heads {
        let current = head_inputs(trace, layer, kv)?.current_attention()?;
        acc.current
            .push(attention_overlap(keep.head(kv), &current).map_err(|e| e.at_head(layer, kv))?);
    }

    for (q, qh) in lt.query_heads.iter().enumerate() {
        let kv = q / m.group_size;
        let set = keep.head(kv);
        for s in 0..m.n_gt {
            let mut cell = || -> Result<()> {
                let query = qh.gt_queries.row(s);
                let gt = qh.gt_attn.row(s);
                acc.overlap.push(attention_overlap(set, gt)?);
                let full_out = dense_attention(query, keys[kv], values[kv])?;
                let cosine = if set.is_empty() {
                    output_error(&full_out, None)?
                } else {
                    let pruned_out = cache.attend(kv, query)?;
                    output_error(&full_out, Some(&pruned_out))?
                };
                acc.cosine.push(cosine.value);
                acc.degenerate += usize::from(cosine.degenerate);
                if !set.is_empty() {
                    match pearson(&scattered_weights(&cache, kv, query)?, gt) {
                        Ok(r) => acc.pearson.push(r),
                        Err(Error::UndefinedCorrelation(_)) => {}
                        Err(e) => return Err(e),
                    }
                }
                Ok(())
            };
            cell().map_err(|e| e.at_head(layer, q))?;
        }
    }
    Ok(acc)
}

/// Compresses `trace` with `policy`, builds the pruned cache and scores every
/// ground-truth future query against the full and the pruned cache.
pub fn run_policy(trace: &TraceBundle, policy: &PolicyConfig) -> Result<MetricsRecord> {
    trace.validate()?;
    let compressed = compress_request(trace, policy)?;
    let per_layer_acc = (0..trace.meta.n_layers)
        .into_par_iter()
        .map(|l| evaluate_layer(trace, &compressed, l))
        .collect::<Result<Vec<_>>>()?;

    let mut total = Accum::default();
    let per_layer = per_layer_acc
        .iter()
        .enumerate()
        .map(|(l, acc)| {
            total.merge(acc);
            let kl = &compressed.layers[l];
            LayerMetrics {
                layer: l,
                usage_ratio: kl.budget() as f64 / (kl.heads() * compressed.seq_len) as f64,
                attention_overlap: mean(&acc.overlap),
                current_overlap: mean(&acc.current),
                pearson_r: mean_opt(&acc.pearson),
                output_cosine: mean(&acc.cosine),
                degenerate_outputs: acc.degenerate,
            }
        })
        .collect();

    Ok(MetricsRecord {
        policy: policy.kind(),
        config: policy.describe(),
        ratio: policy.ratio(),
        usage_ratio: compressed.usage_ratio(),
        attention_overlap: mean(&total.overlap),
        current_overlap: mean(&total.current),
        pearson_r: mean_opt(&total.pearson),
        output_cosine: mean(&total.cosine),
        degenerate_outputs: total.degenerate,
        per_layer,
    })
}

/// One record per ratio, in the order given. Ratios run concurrently.
pub fn sweep(trace: &TraceBundle, policy: &PolicyConfig, ratios: &[f64]) -> Result<Vec<MetricsRecord>> {
    if policy.kind() == PolicyKind::GVote {
        return Err(Error::domain("gvote chooses its own budget and cannot be swept by ratio"));
    }
    if let Some(r) = ratios.iter().find(|&&r| !(r > 0.0 && r <= 1.0)) {
        return Err(Error::domain(format!("ratio must be in (0, 1], got {r}")));
    }
    ratios
        .par_iter()
        .map(|&r| run_policy(trace, &policy.with_ratio(r)))
        .collect()
}

/// Agreement between synthetic and real future queries for one query head.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlapRecord {
    pub layer: usize,
    pub kv_head: usize,
    pub query_head: usize,
    pub samples: usize,
    /// Mean ground-truth mass captured by each synthetic query's nucleus set.
    pub mean_overlap: f64,
    /// Mean nucleus-set size of the synthetic queries over `L_seq`.
    pub token_usage: f64,
    /// Nucleus-set size of the ground-truth attention over `L_seq`.
    pub gt_usage: f64,
    /// Correlation of the averaged synthetic attention with the ground truth.
    pub pearson_r: Option<f64>,
}

const ANALYSIS_P_NUC: f64 = 0.95;

fn overlap_head(trace: &TraceBundle, cfg: &GVoteConfig, layer: usize, kv: usize) -> Result<Vec<OverlapRecord>> {
    let inputs = head_inputs(trace, layer, kv)?;
    let head_cfg = GVoteConfig {
        seed: stream_seed(cfg.seed, layer, kv),
        ..*cfg
    };
    let n = trace.meta.seq_len;
    let synthetic = synthetic_queries(&inputs, &head_cfg)?;
    trace
        .group(kv)
        .zip(synthetic)
        .map(|(q, queries)| {
            let gt = trace.layers[layer].query_heads[q].gt_attn.row(0);
            let attn: Vec<Vec<f32>> = attention_logits(&queries, inputs.keys)?
                .iter_rows()
                .map(softmax)
                .collect();
            let mut overlaps = Vec::with_capacity(attn.len());
            let mut sizes = Vec::with_capacity(attn.len());
            for row in &attn {
                let set: CandidateSet = top_p_select(row, ANALYSIS_P_NUC)?;
                overlaps.push(attention_overlap(&set, gt)?);
                sizes.push(set.len() as f64 / n as f64);
            }
            let aggregate: Vec<f64> = (0..n)
                .map(|j| attn.iter().map(|r| f64::from(r[j])).sum::<f64>() / attn.len() as f64)
                .collect();
            let gt64: Vec<f64> = gt.iter().map(|&x| f64::from(x)).collect();
            let pearson_r = match pearson(&aggregate, &gt64) {
                Ok(r) => Some(r),
                Err(Error::UndefinedCorrelation(_)) => None,
                Err(e) => return Err(e),
            };
            Ok(OverlapRecord {
                layer,
                kv_head: kv,
                query_head: q,
                samples: cfg.samples,
                mean_overlap: mean(&overlaps),
                token_usage: mean(&sizes),
                gt_usage: top_p_select(gt, ANALYSIS_P_NUC)?.len() as f64 / n as f64,
                pearson_r,
            })
        })
        .collect()
}

/// For every query head: how much of the first ground-truth step's attention
/// the nucleus sets of GVote's synthetic queries capture.
pub fn overlap_analysis(trace: &TraceBundle, cfg: &GVoteConfig) -> Result<Vec<OverlapRecord>> {
    cfg.validate()?;
    trace.validate()?;
    let m = &trace.meta;
    let cells: Vec<(usize, usize)> = (0..m.n_layers)
        .flat_map(|l| (0..m.n_kv_heads).map(move |h| (l, h)))
        .collect();
    let nested = cells
        .par_iter()
        .map(|&(l, h)| overlap_head(trace, cfg, l, h).map_err(|e| e.at_head(l, h)))
        .collect::<Result<Vec<_>>>()?;
    Ok(nested.into_iter().flatten().collect())
}
