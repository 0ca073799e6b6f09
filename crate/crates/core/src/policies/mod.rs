//! Compression policies. Each maps one request's cache to a keep-set per
//! (layer, kv-head).

mod baselines;
mod gvote;
mod request;

use std::fmt;
use std::str::FromStr;

pub use baselines::{policy_adakv, policy_snapkv, policy_streamllm, window_scores, ScoreTensor};
pub use gvote::{gvote_compress, synthetic_queries, GVoteConfig, GVoteOutcome, HeadInputs, QueryHead};
pub use request::{
    compress_request, current_attention, head_inputs, tail_attention, CompressedRequest, HeadStats,
};

use crate::error::{Error, Result};
use crate::selection::CandidateSet;

/// Keep-sets for the heads of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct KeepSetPerHead {
    sets: Vec<CandidateSet>,
}

impl KeepSetPerHead {
    pub fn new(sets: Vec<CandidateSet>) -> Self {
        Self { sets }
    }

    pub fn heads(&self) -> usize {
        self.sets.len()
    }

    pub fn head(&self, h: usize) -> &CandidateSet {
        &self.sets[h]
    }

    pub fn sets(&self) -> &[CandidateSet] {
        &self.sets
    }

    /// Total retained entries, `Σ_h |set_h|`.
    pub fn budget(&self) -> usize {
        self.sets.iter().map(CandidateSet::len).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PolicyKind {
    KeepAll,
    GVote,
    StreamingLlm,
    SnapKv,
    AdaKv,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::KeepAll => "keepall",
            PolicyKind::GVote => "gvote",
            PolicyKind::StreamingLlm => "streamllm",
            PolicyKind::SnapKv => "snapkv",
            PolicyKind::AdaKv => "adakv",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "keepall" | "keep-all" | "full" => PolicyKind::KeepAll,
            "gvote" => PolicyKind::GVote,
            "streamllm" | "streamingllm" => PolicyKind::StreamingLlm,
            "snapkv" => PolicyKind::SnapKv,
            "adakv" => PolicyKind::AdaKv,
            other => return Err(Error::domain(format!("unknown policy {other:?}"))),
        })
    }
}

/// A policy together with its knobs.
#[derive(Debug, Clone, PartialEq)]
pub enum PolicyConfig {
    KeepAll,
    GVote(GVoteConfig),
    /// `n_sink` sinks plus a recent window filling the rest of the budget.
    StreamingLlm { ratio: f64, n_sink: usize },
    SnapKv { ratio: f64, obs_window: usize },
    AdaKv { ratio: f64, obs_window: usize },
}

impl PolicyConfig {
    pub fn kind(&self) -> PolicyKind {
        match self {
            PolicyConfig::KeepAll => PolicyKind::KeepAll,
            PolicyConfig::GVote(_) => PolicyKind::GVote,
            PolicyConfig::StreamingLlm { .. } => PolicyKind::StreamingLlm,
            PolicyConfig::SnapKv { .. } => PolicyKind::SnapKv,
            PolicyConfig::AdaKv { .. } => PolicyKind::AdaKv,
        }
    }

    pub fn ratio(&self) -> Option<f64> {
        match *self {
            PolicyConfig::StreamingLlm { ratio, .. }
            | PolicyConfig::SnapKv { ratio, .. }
            | PolicyConfig::AdaKv { ratio, .. } => Some(ratio),
            PolicyConfig::KeepAll | PolicyConfig::GVote(_) => None,
        }
    }

    /// Same policy at a different compression ratio. Budget-free policies
    /// are returned unchanged.
    pub fn with_ratio(&self, new_ratio: f64) -> Self {
        let mut out = self.clone();
        match &mut out {
            PolicyConfig::StreamingLlm { ratio, .. }
            | PolicyConfig::SnapKv { ratio, .. }
            | PolicyConfig::AdaKv { ratio, .. } => *ratio = new_ratio,
            PolicyConfig::KeepAll | PolicyConfig::GVote(_) => {}
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            PolicyConfig::KeepAll => Ok(()),
            PolicyConfig::GVote(cfg) => cfg.validate(),
            PolicyConfig::StreamingLlm { ratio, .. }
            | PolicyConfig::SnapKv { ratio, .. }
            | PolicyConfig::AdaKv { ratio, .. } => {
                if *ratio > 0.0 && *ratio <= 1.0 {
                    Ok(())
                } else {
                    Err(Error::domain(format!("ratio must be in (0, 1], got {ratio}")))
                }
            }
        }
    }

    /// Compact `key=value;…` echo of the configuration.
    pub fn describe(&self) -> String {
        match self {
            PolicyConfig::KeepAll => String::new(),
            PolicyConfig::GVote(c) => format!(
                "p_nuc={};samples={};n_future={};n_sink={};seed={};include_current={}",
                c.p_nuc, c.samples, c.n_future, c.n_sink, c.seed.0, c.include_current
            ),
            PolicyConfig::StreamingLlm { ratio, n_sink } => format!("ratio={ratio};n_sink={n_sink}"),
            PolicyConfig::SnapKv { ratio, obs_window } | PolicyConfig::AdaKv { ratio, obs_window } => {
                format!("ratio={ratio};obs_window={obs_window}")
            }
        }
    }
}

/// Per-head budget for a ratio: `round(ratio · n)`, at least one entry.
pub fn ratio_budget(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64).round() as usize).clamp(1, n.max(1))
}
