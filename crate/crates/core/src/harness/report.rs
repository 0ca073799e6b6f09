//! CSV emission. Headers are stable; empty cells mean "undefined".

use std::io::Write;

use serde::Serialize;

use super::run::{MetricsRecord, OverlapRecord};
use crate::error::Result;

pub const METRICS_HEADER: [&str; 10] = [
    "policy",
    "config",
    "ratio",
    "layer",
    "usage_ratio",
    "attention_overlap",
    "current_overlap",
    "pearson_r",
    "output_cosine",
    "degenerate_outputs",
];

pub const OVERLAP_HEADER: [&str; 8] = [
    "layer",
    "kv_head",
    "query_head",
    "samples",
    "mean_overlap",
    "token_usage",
    "gt_usage",
    "pearson_r",
];

#[derive(Serialize)]
struct MetricsRow<'a> {
    policy: &'a str,
    config: &'a str,
    ratio: Option<f64>,
    layer: String,
    usage_ratio: f64,
    attention_overlap: f64,
    current_overlap: f64,
    pearson_r: Option<f64>,
    output_cosine: f64,
    degenerate_outputs: usize,
}

/// One aggregate row per record (`layer = all`), followed by its per-layer
/// rows when `per_layer` is set.
pub fn write_metrics<W: Write>(out: W, records: &[MetricsRecord], per_layer: bool) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(METRICS_HEADER)?;
    for r in records {
        w.serialize(MetricsRow {
            policy: r.policy.name(),
            config: &r.config,
            ratio: r.ratio,
            layer: "all".to_string(),
            usage_ratio: r.usage_ratio,
            attention_overlap: r.attention_overlap,
            current_overlap: r.current_overlap,
            pearson_r: r.pearson_r,
            output_cosine: r.output_cosine,
            degenerate_outputs: r.degenerate_outputs,
        })?;
        if per_layer {
            for l in &r.per_layer {
                w.serialize(MetricsRow {
                    policy: r.policy.name(),
                    config: &r.config,
                    ratio: r.ratio,
                    layer: l.layer.to_string(),
                    usage_ratio: l.usage_ratio,
                    attention_overlap: l.attention_overlap,
                    current_overlap: l.current_overlap,
                    pearson_r: l.pearson_r,
                    output_cosine: l.output_cosine,
                    degenerate_outputs: l.degenerate_outputs,
                })?;
            }
        }
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[derive(Serialize)]
struct OverlapRow {
    layer: usize,
    kv_head: usize,
    query_head: usize,
    samples: usize,
    mean_overlap: f64,
    token_usage: f64,
    gt_usage: f64,
    pearson_r: Option<f64>,
}

pub fn write_overlap<W: Write>(out: W, records: &[OverlapRecord]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(OVERLAP_HEADER)?;
    for r in records {
        w.serialize(OverlapRow {
            layer: r.layer,
            kv_head: r.kv_head,
            query_head: r.query_head,
            samples: r.samples,
            mean_overlap: r.mean_overlap,
            token_usage: r.token_usage,
            gt_usage: r.gt_usage,
            pearson_r: r.pearson_r,
        })?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
