//! Brute-force reference implementations shared by the integration tests.
//!
//! Every oracle works on plain `Vec<f32>` rows with scalar loops. Values are
//! stored in `f32` and accumulated in `f64` at the same points as the
//! library, so keep-sets can be compared exactly.

#![allow(dead_code)]

use std::collections::BTreeSet;

use kvgauge::policies::{GVoteConfig, HeadInputs, QueryHead};
use kvgauge::tensor::{RopeParams, Tensor};
use kvgauge::trace::{generate_synth, SynthSpec, TraceBundle};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type Rows = Vec<Vec<f32>>;

pub fn rows_of(t: &Tensor) -> Rows {
    t.iter_rows().map(<[f32]>::to_vec).collect()
}

pub fn tensor(rows: &Rows) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

pub fn logit(q: &[f32], k: &[f32]) -> f32 {
    let mut acc = 0.0f64;
    for i in 0..q.len() {
        acc += f64::from(q[i]) * f64::from(k[i]);
    }
    (acc / (q.len() as f64).sqrt()) as f32
}

pub fn softmax_oracle(x: &[f32]) -> Vec<f32> {
    let mut max = f64::NEG_INFINITY;
    for &v in x {
        if f64::from(v) > max {
            max = f64::from(v);
        }
    }
    let mut exps = Vec::with_capacity(x.len());
    let mut sum = 0.0f64;
    for &v in x {
        let e = (f64::from(v) - max).exp();
        exps.push(e);
        sum += e;
    }
    exps.iter().map(|e| (e / sum) as f32).collect()
}

/// Indices sorted by value descending, ties by lower index.
pub fn ranked(values: &[f32]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx
}

pub fn top_k_oracle(values: &[f32], k: usize) -> Vec<usize> {
    let mut out: Vec<usize> = ranked(values).into_iter().take(k).collect();
    out.sort_unstable();
    out
}

pub fn top_p_oracle(probs: &[f32], p: f64) -> Vec<usize> {
    let mut out = Vec::new();
    let mut cum = 0.0f64;
    for i in ranked(probs) {
        if probs[i] <= 0.0 {
            break;
        }
        out.push(i);
        cum += f64::from(probs[i]);
        if p < 1.0 && cum >= p {
            break;
        }
    }
    out.sort_unstable();
    out
}

/// A self-contained GVote instance.
#[derive(Debug, Clone)]
pub struct Instance {
    pub keys: Rows,
    pub values: Rows,
    pub hidden: Rows,
    pub w_q: Vec<Rows>,
    pub q_current: Vec<Vec<f32>>,
    pub theta: f64,
    pub offset: i64,
}

pub struct OwnedInputs {
    keys: Tensor,
    values: Tensor,
    hidden: Tensor,
    w_q: Vec<Tensor>,
    q_current: Vec<Vec<f32>>,
    rope: RopeParams,
}

impl OwnedInputs {
    pub fn inputs(&self) -> HeadInputs<'_> {
        HeadInputs {
            keys: &self.keys,
            values: &self.values,
            hidden: &self.hidden,
            queries: self
                .w_q
                .iter()
                .zip(&self.q_current)
                .map(|(w_q, q)| QueryHead { w_q, q_current: q })
                .collect(),
            rope: self.rope,
        }
    }
}

fn gauss_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Rows {
    (0..rows)
        .map(|_| {
            (0..cols)
                .map(|_| (rng.sample::<f64, _>(StandardNormal) * scale) as f32)
                .collect()
        })
        .collect()
}

impl Instance {
    /// Random instance with `seq_len` tokens, head dim `d`, hidden dim `d_h`
    /// and `group` query heads. `temperature` scales the query norms.
    pub fn random(seed: u64, seq_len: usize, d: usize, d_h: usize, group: usize, temperature: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w_scale = temperature / (d_h as f64).sqrt();
        Self {
            keys: gauss_rows(&mut rng, seq_len, d, 1.0),
            values: gauss_rows(&mut rng, seq_len, d, 1.0),
            hidden: gauss_rows(&mut rng, seq_len, d_h, 1.0),
            w_q: (0..group).map(|_| gauss_rows(&mut rng, d_h, d, w_scale)).collect(),
            q_current: (0..group)
                .map(|_| gauss_rows(&mut rng, 1, d, temperature).remove(0))
                .collect(),
            theta: 10000.0,
            offset: seq_len as i64 - 1,
        }
    }

    pub fn owned(&self) -> OwnedInputs {
        OwnedInputs {
            keys: tensor(&self.keys),
            values: tensor(&self.values),
            hidden: tensor(&self.hidden),
            w_q: self.w_q.iter().map(tensor).collect(),
            q_current: self.q_current.clone(),
            rope: RopeParams::new(self.theta, self.keys[0].len(), self.offset).unwrap(),
        }
    }
}

/// Group-averaged current-query attention.
pub fn current_attention_oracle(inst: &Instance) -> Vec<f32> {
    let per: Vec<Vec<f32>> = inst
        .q_current
        .iter()
        .map(|q| softmax_oracle(&inst.keys.iter().map(|k| logit(q, k)).collect::<Vec<_>>()))
        .collect();
    if per.len() == 1 {
        return per[0].clone();
    }
    let n = per.len() as f64;
    (0..inst.keys.len())
        .map(|j| {
            let mut s = 0.0f64;
            for p in &per {
                s += f64::from(p[j]);
            }
            (s / n) as f32
        })
        .collect()
}

/// Draw `index` of the per-row normal stream.
pub fn normal_row(seed: u64, index: u64, d: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

pub struct OracleOutcome {
    pub keep: Vec<usize>,
    pub current: Vec<usize>,
    pub step_budget: usize,
    pub fallback: bool,
}

/// Scalar GVote for one kv-head.
pub fn gvote_oracle(inst: &Instance, cfg: &GVoteConfig) -> OracleOutcome {
    let n = inst.keys.len();
    let d = inst.keys[0].len();
    let d_h = inst.hidden[0].len();
    let a0 = current_attention_oracle(inst);
    let current = top_p_oracle(&a0, cfg.p_nuc);
    let b = current.len();
    if n < cfg.n_sink + 2 {
        return OracleOutcome {
            keep: (0..n).collect(),
            current,
            step_budget: b,
            fallback: true,
        };
    }

    let count = (n - cfg.n_sink) as f64;
    let mut mu = vec![0.0f32; d_h];
    let mut var = vec![0.0f32; d_h];
    for c in 0..d_h {
        let mut s = 0.0f64;
        for r in cfg.n_sink..n {
            s += f64::from(inst.hidden[r][c]);
        }
        let m = s / count;
        let mut ss = 0.0f64;
        for r in cfg.n_sink..n {
            let dev = f64::from(inst.hidden[r][c]) - m;
            ss += dev * dev;
        }
        mu[c] = m as f32;
        var[c] = (ss / count) as f32;
    }

    let mut cos = vec![0.0f32; d / 2];
    let mut sin = vec![0.0f32; d / 2];
    for i in 0..d / 2 {
        let w = inst.theta.powf(-2.0 * i as f64 / d as f64);
        let (mut c, mut s) = (0.0f64, 0.0f64);
        for j in 1..=cfg.n_future as i64 {
            let a = w * (inst.offset + j) as f64;
            c += a.cos();
            s += a.sin();
        }
        cos[i] = (c / cfg.n_future as f64) as f32;
        sin[i] = (s / cfg.n_future as f64) as f32;
    }

    let mut samples = Vec::with_capacity(cfg.samples);
    for s in 0..cfg.samples {
        let z = normal_row(cfg.seed.0, s as u64, d_h);
        let row: Vec<f32> = (0..d_h)
            .map(|c| {
                let sd = f64::from(var[c]).sqrt();
                if sd == 0.0 {
                    mu[c]
                } else {
                    (f64::from(mu[c]) + sd * z[c]) as f32
                }
            })
            .collect();
        samples.push(row);
    }

    let mut keep = BTreeSet::new();
    if b > 0 {
        for w_q in &inst.w_q {
            for h in &samples {
                let mut q = vec![0.0f32; d];
                for (j, slot) in q.iter_mut().enumerate() {
                    let mut acc = 0.0f64;
                    for c in 0..d_h {
                        acc += f64::from(h[c]) * f64::from(w_q[c][j]);
                    }
                    *slot = acc as f32;
                }
                let mut rq = vec![0.0f32; d];
                for i in 0..d / 2 {
                    let (x, y) = (f64::from(q[2 * i]), f64::from(q[2 * i + 1]));
                    let (c, s) = (f64::from(cos[i]), f64::from(sin[i]));
                    rq[2 * i] = (x * c - y * s) as f32;
                    rq[2 * i + 1] = (x * s + y * c) as f32;
                }
                let logits: Vec<f32> = inst.keys.iter().map(|k| logit(&rq, k)).collect();
                keep.extend(top_k_oracle(&logits, b));
            }
        }
    }
    if cfg.include_current || keep.is_empty() {
        keep.extend(current.iter().copied());
    }
    OracleOutcome {
        keep: keep.into_iter().collect(),
        current,
        step_budget: b,
        fallback: false,
    }
}

/// Small synthetic trace suitable for quick integration tests.
pub fn small_trace(seed: u64) -> TraceBundle {
    generate_synth(&small_spec(seed)).unwrap()
}

pub fn small_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        n_layers: 2,
        n_kv_heads: 2,
        group_size: 2,
        head_dim: 8,
        hidden_dim: 16,
        seq_len: 96,
        n_gt: 3,
        n_obs: 4,
        cluster_span: 6,
        seed: kvgauge::tensor::RngSeed(seed),
        ..SynthSpec::default()
    }
}
