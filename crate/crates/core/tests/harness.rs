mod common;

use std::collections::BTreeSet;
use std::process::Command;

use common::{
    gvote_oracle, logit, normal_row, rows_of, small_spec, small_trace, softmax_oracle, top_p_oracle,
    Instance,
};
use kvgauge::harness::{
    attention_overlap, overlap_analysis, pearson, run_policy, sweep, write_metrics, METRICS_HEADER,
};
use kvgauge::policies::{GVoteConfig, PolicyConfig, PolicyKind};
use kvgauge::selection::CandidateSet;
use kvgauge::tensor::{stream_seed, RngSeed};
use kvgauge::trace::{generate_synth, SynthSpec, TraceBundle};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};

proptest! {
    #[test]
    fn overlap_matches_scalar_sum(logits in prop::collection::vec(-5.0f32..5.0, 1..80), bits in any::<u64>()) {
        let probs = softmax_oracle(&logits);
        let idx: Vec<usize> = (0..probs.len()).filter(|i| bits >> (i % 64) & 1 == 1).collect();
        let mut want = 0.0f64;
        for &i in &idx {
            want += f64::from(probs[i]);
        }
        let set = CandidateSet::new(idx, probs.len()).unwrap();
        prop_assert_eq!(attention_overlap(&set, &probs).unwrap(), want);
        prop_assert!(want <= attention_overlap(&CandidateSet::full(probs.len()), &probs).unwrap());
    }

    #[test]
    fn pearson_matches_two_pass(pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..60)) {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let sa: f64 = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>().sqrt();
        let sb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum::<f64>().sqrt();
        prop_assume!(sa > 1e-9 && sb > 1e-9);
        let r = pearson(&a, &b).unwrap();
        prop_assert!((r - cov / (sa * sb)).abs() < 1e-6);
        prop_assert!((-1.0..=1.0).contains(&r));
    }
}

#[test]
fn keep_all_record_is_exact() {
    let trace = small_trace(1);
    let r = run_policy(&trace, &PolicyConfig::KeepAll).unwrap();
    assert_eq!(r.policy, PolicyKind::KeepAll);
    assert_eq!(r.usage_ratio, 1.0);
    assert!((r.attention_overlap - 1.0).abs() <= 1e-6);
    assert!((r.current_overlap - 1.0).abs() <= 1e-6);
    assert!((r.output_cosine - 1.0).abs() <= 1e-6);
    assert!((r.pearson_r.unwrap() - 1.0).abs() <= 1e-6);
    assert_eq!(r.degenerate_outputs, 0);
    assert_eq!(r.per_layer.len(), trace.meta.n_layers);
}

#[test]
fn streamllm_with_full_window_equals_keep_all() {
    let trace = small_trace(2);
    let full = run_policy(&trace, &PolicyConfig::KeepAll).unwrap();
    let stream = run_policy(&trace, &PolicyConfig::StreamingLlm { ratio: 1.0, n_sink: 4 }).unwrap();
    assert_eq!(stream.usage_ratio, full.usage_ratio);
    assert_eq!(stream.attention_overlap, full.attention_overlap);
    assert_eq!(stream.output_cosine, full.output_cosine);
    assert_eq!(stream.per_layer, full.per_layer);
}

#[test]
fn sweep_is_monotone_and_composes() {
    let trace = small_trace(3);
    let ratios = [0.1, 0.2, 0.3, 0.4, 0.5];
    for policy in [
        PolicyConfig::StreamingLlm { ratio: 0.1, n_sink: 4 },
        PolicyConfig::SnapKv { ratio: 0.1, obs_window: 4 },
        PolicyConfig::AdaKv { ratio: 0.1, obs_window: 4 },
    ] {
        let records = sweep(&trace, &policy, &ratios).unwrap();
        assert_eq!(records.len(), ratios.len());
        for (r, &ratio) in records.iter().zip(&ratios) {
            assert_eq!(r, &run_policy(&trace, &policy.with_ratio(ratio)).unwrap());
            assert_eq!(r.ratio, Some(ratio));
        }
        for w in records.windows(2) {
            assert!(w[0].usage_ratio <= w[1].usage_ratio);
        }
    }
    let one = sweep(&trace, &PolicyConfig::SnapKv { ratio: 0.1, obs_window: 4 }, &[1.0]).unwrap();
    assert_eq!(one.len(), 1);
    assert_eq!(one[0].usage_ratio, 1.0);
    assert!((one[0].attention_overlap - 1.0).abs() <= 1e-6);
    assert!(sweep(&trace, &PolicyConfig::GVote(GVoteConfig::default()), &[0.5]).is_err());
    assert!(sweep(&trace, &PolicyConfig::SnapKv { ratio: 0.1, obs_window: 4 }, &[0.0]).is_err());
}

fn instance_from(trace: &TraceBundle, layer: usize, kv: usize) -> Instance {
    let lt = &trace.layers[layer];
    Instance {
        keys: rows_of(&lt.kv_heads[kv].keys),
        values: rows_of(&lt.kv_heads[kv].values),
        hidden: rows_of(&lt.hidden),
        w_q: trace.group(kv).map(|q| rows_of(&lt.query_heads[q].w_q)).collect(),
        q_current: trace
            .group(kv)
            .map(|q| {
                let pq = &lt.query_heads[q].prompt_queries;
                pq.row(pq.rows() - 1).to_vec()
            })
            .collect(),
        theta: trace.meta.rope_theta,
        offset: trace.meta.seq_len as i64 - 1,
    }
}

/// Scalar evaluation of one GVote run: keep-sets from the scalar oracle,
/// then renormalised attention over the kept rows for every ground-truth step.
#[test]
fn gvote_record_matches_end_to_end_oracle() {
    let trace = small_trace(4);
    let m = &trace.meta;
    let cfg = GVoteConfig {
        p_nuc: 0.95,
        samples: 8,
        seed: RngSeed(42),
        ..GVoteConfig::default()
    };
    let record = run_policy(&trace, &PolicyConfig::GVote(cfg)).unwrap();

    let (mut overlaps, mut cosines, mut kept) = (Vec::new(), Vec::new(), 0usize);
    for l in 0..m.n_layers {
        for kv in 0..m.n_kv_heads {
            let inst = instance_from(&trace, l, kv);
            let keep = gvote_oracle(&inst, &GVoteConfig { seed: stream_seed(cfg.seed, l, kv), ..cfg }).keep;
            kept += keep.len();
            for q in trace.group(kv) {
                let qh = &trace.layers[l].query_heads[q];
                for s in 0..m.n_gt {
                    let gq = qh.gt_queries.row(s);
                    let gt = qh.gt_attn.row(s);
                    overlaps.push(keep.iter().map(|&i| f64::from(gt[i])).sum::<f64>());
                    let attend = |idx: &[usize]| -> Vec<f64> {
                        let p = softmax_oracle(&idx.iter().map(|&i| logit(gq, &inst.keys[i])).collect::<Vec<_>>());
                        let mut out = vec![0.0f64; m.head_dim];
                        for (w, &i) in p.iter().zip(idx) {
                            for (o, &v) in out.iter_mut().zip(&inst.values[i]) {
                                *o += f64::from(*w) * f64::from(v);
                            }
                        }
                        out
                    };
                    let full = attend(&(0..m.seq_len).collect::<Vec<_>>());
                    let pruned = attend(&keep);
                    let dot: f64 = full.iter().zip(&pruned).map(|(a, b)| a * b).sum();
                    let nf = full.iter().map(|a| a * a).sum::<f64>().sqrt();
                    let np = pruned.iter().map(|a| a * a).sum::<f64>().sqrt();
                    cosines.push(dot / (nf * np));
                }
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let usage = kept as f64 / (m.n_layers * m.n_kv_heads * m.seq_len) as f64;
    assert_eq!(record.usage_ratio, usage);
    assert!((record.attention_overlap - mean(&overlaps)).abs() < 1e-9);
    assert!((record.output_cosine - mean(&cosines)).abs() < 1e-5);
    assert!(record.current_overlap >= 0.95);
}

/// Uniformly random keep-set of `size` positions.
fn random_keep(rng: &mut ChaCha8Rng, n: usize, size: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..size {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    let mut out = idx[..size].to_vec();
    out.sort_unstable();
    out
}

#[test]
fn gvote_beats_random_keep_sets_of_equal_size() {
    let mut diffs = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for seed in 0..100u64 {
        let spec = SynthSpec {
            n_kv_heads: 1,
            seq_len: 256,
            n_gt: 4,
            clusters: 1 + (seed as usize % 3),
            seed: RngSeed(500 + seed),
            ..SynthSpec::default()
        };
        let trace = generate_synth(&spec).unwrap();
        let cfg = GVoteConfig {
            seed: RngSeed(seed),
            ..GVoteConfig::default()
        };
        let req = kvgauge::policies::compress_request(&trace, &PolicyConfig::GVote(cfg)).unwrap();
        let keep = req.layers[0].head(0);
        let random = random_keep(&mut rng, spec.seq_len, keep.len());
        let gt = &trace.layers[0].query_heads[0].gt_attn;
        let (mut g, mut r) = (0.0, 0.0);
        for row in gt.iter_rows() {
            g += attention_overlap(keep, row).unwrap();
            r += random.iter().map(|&i| f64::from(row[i])).sum::<f64>();
        }
        diffs.push((g - r) / gt.rows() as f64);
    }
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let t = mean / (sd / n.sqrt());
    let p = 1.0 - StudentsT::new(0.0, 1.0, n - 1.0).unwrap().cdf(t);
    assert!(mean > 0.0 && p < 0.01, "mean diff {mean}, p {p}");
}

#[test]
fn overlap_analysis_reports_every_query_head() {
    let trace = small_trace(5);
    let cfg = GVoteConfig {
        samples: 4,
        seed: RngSeed(3),
        ..GVoteConfig::default()
    };
    let records = overlap_analysis(&trace, &cfg).unwrap();
    assert_eq!(records.len(), trace.meta.n_layers * trace.meta.n_query_heads());
    for r in &records {
        assert!((0.0..=1.0 + 1e-9).contains(&r.mean_overlap));
        assert!(r.token_usage > 0.0 && r.token_usage <= 1.0);
        assert!(r.pearson_r.is_none_or(|p| (-1.0..=1.0).contains(&p)));
        assert_eq!(r.kv_head, r.query_head / trace.meta.group_size);
    }

    // First query head of layer 0 against a scalar re-derivation.
    let inst = instance_from(&trace, 0, 0);
    let d_h = trace.meta.hidden_dim;
    let n = trace.meta.seq_len;
    let seed = stream_seed(cfg.seed, 0, 0).0;
    let hidden = &inst.hidden[cfg.n_sink..];
    let mu: Vec<f64> = (0..d_h).map(|c| hidden.iter().map(|r| f64::from(r[c])).sum::<f64>() / hidden.len() as f64).collect();
    let gt = trace.layers[0].query_heads[0].gt_attn.row(0);
    let mut overlaps = Vec::new();
    for s in 0..cfg.samples {
        let z = normal_row(seed, s as u64, d_h);
        let var: Vec<f64> = (0..d_h)
            .map(|c| hidden.iter().map(|r| (f64::from(r[c]) - mu[c]).powi(2)).sum::<f64>() / hidden.len() as f64)
            .collect();
        let h: Vec<f64> = (0..d_h).map(|c| mu[c] + var[c].sqrt() * z[c]).collect();
        let q: Vec<f64> = (0..trace.meta.head_dim)
            .map(|j| (0..d_h).map(|c| h[c] * f64::from(inst.w_q[0][c][j])).sum())
            .collect();
        let mut rq = vec![0.0f32; q.len()];
        for i in 0..q.len() / 2 {
            let w = inst.theta.powf(-2.0 * i as f64 / q.len() as f64);
            let (mut c, mut sn) = (0.0, 0.0);
            for p in 1..=cfg.n_future as i64 {
                c += (w * (inst.offset + p) as f64).cos();
                sn += (w * (inst.offset + p) as f64).sin();
            }
            let (c, sn) = (c / cfg.n_future as f64, sn / cfg.n_future as f64);
            rq[2 * i] = (q[2 * i] * c - q[2 * i + 1] * sn) as f32;
            rq[2 * i + 1] = (q[2 * i] * sn + q[2 * i + 1] * c) as f32;
        }
        let attn = softmax_oracle(&inst.keys.iter().map(|k| logit(&rq, k)).collect::<Vec<_>>());
        let set: BTreeSet<usize> = top_p_oracle(&attn, 0.95).into_iter().collect();
        overlaps.push(set.iter().map(|&i| f64::from(gt[i])).sum::<f64>());
    }
    let want = overlaps.iter().sum::<f64>() / overlaps.len() as f64;
    assert!((records[0].mean_overlap - want).abs() < 1e-3, "{} vs {want}", records[0].mean_overlap);
    assert!(n > 0);
}

#[test]
fn metrics_csv_has_stable_header_and_layer_rows() {
    let trace = small_trace(6);
    let r = run_policy(&trace, &PolicyConfig::SnapKv { ratio: 0.25, obs_window: 4 }).unwrap();
    let mut buf = Vec::new();
    write_metrics(&mut buf, &[r], true).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER.join(","));
    assert_eq!(lines.len(), 1 + 1 + trace.meta.n_layers);
    assert!(lines[1].starts_with("snapkv,ratio=0.25;obs_window=4,0.25,all,"));
    assert!(lines[2].contains(",0,"));
}

fn kvgauge(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_kvgauge")).args(args).output().unwrap()
}

#[test]
fn cli_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let spec_path = dir.path().join("spec.json");
    std::fs::write(&spec_path, serde_json::to_string(&small_spec(8)).unwrap()).unwrap();
    let trace_dir = dir.path().join("trace");
    let p = |x: &std::path::Path| x.to_str().unwrap().to_string();

    let out = kvgauge(&["synth", "--spec", &p(&spec_path), "--out", &p(&trace_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(trace_dir.join("manifest.json").is_file());

    let results = dir.path().join("results.csv");
    let out = kvgauge(&[
        "run", "--trace", &p(&trace_dir), "--policy", "gvote", "--p-nuc", "0.9", "--samples", "4",
        "--seed", "42", "--per-layer", "--out", &p(&results),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&results).unwrap();
    assert!(text.starts_with("policy,config,ratio,layer,"));
    assert!(text.lines().nth(1).unwrap().starts_with("gvote,p_nuc=0.9;samples=4;"));
    assert_eq!(text.lines().count(), 4);

    let sweep_csv = dir.path().join("sweep.csv");
    let out = kvgauge(&[
        "sweep", "--trace", &p(&trace_dir), "--policy", "adakv", "--window", "4", "--ratios", "0.1,0.3,0.5",
        "--out", &p(&sweep_csv),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_to_string(&sweep_csv).unwrap().lines().count(), 4);

    let overlap_csv = dir.path().join("overlap.csv");
    let out = kvgauge(&["overlap", "--trace", &p(&trace_dir), "--samples", "4", "--out", &p(&overlap_csv)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&overlap_csv).unwrap();
    assert!(text.starts_with("layer,kv_head,query_head,samples,mean_overlap"));
    assert_eq!(text.lines().count(), 1 + 2 * 4);

    let out = kvgauge(&["run", "--trace", &p(&dir.path().join("nope")), "--policy", "snapkv", "--out", &p(&results)]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.starts_with("error: ") && stderr.trim_end().lines().count() == 1, "{stderr}");

    let out = kvgauge(&["sweep", "--trace", &p(&trace_dir), "--policy", "gvote", "--out", &p(&sweep_csv)]);
    assert!(!out.status.success());
}
