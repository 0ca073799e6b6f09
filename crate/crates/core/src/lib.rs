//! Adaptive KV-cache compression.
//!
//! GVote samples plausible future queries from a Gaussian fitted to the
//! prompt's hidden states and keeps the union of the keys those queries would
//! attend to, so the cache budget follows the request instead of a fixed
//! ratio. StreamingLLM, SnapKV and AdaKV are provided as fixed-budget
//! baselines, together with a per-head variable-length cache, a portable
//! attention-trace format, a synthetic trace generator and an evaluation
//! harness.

pub mod error;
pub mod harness;
pub mod kvcache;
pub mod policies;
pub mod selection;
pub mod tensor;
pub mod trace;

pub use error::{Error, Result};
