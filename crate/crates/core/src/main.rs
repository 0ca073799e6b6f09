use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use kvgauge::harness::{overlap_analysis, run_policy, sweep, write_metrics, write_overlap};
use kvgauge::policies::{GVoteConfig, PolicyConfig, PolicyKind};
use kvgauge::tensor::RngSeed;
use kvgauge::trace::{generate_synth, load_trace, save_trace, SynthSpec};

#[derive(Parser)]
#[command(name = "kvgauge", version, about = "KV-cache compression on attention traces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic trace from a JSON spec.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate one policy on a trace.
    Run {
        #[command(flatten)]
        policy: PolicyArgs,
        /// Budget as a fraction of the cache (fixed-budget policies).
        #[arg(long, default_value_t = 0.2)]
        ratio: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a fixed-budget policy across ratios.
    Sweep {
        #[command(flatten)]
        policy: PolicyArgs,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3,0.4,0.5")]
        ratios: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-head agreement of synthetic queries with ground-truth queries.
    Overlap {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, default_value_t = 8)]
        samples: usize,
        #[arg(long, default_value_t = 64)]
        n_future: usize,
        #[arg(long, default_value_t = 4)]
        sink: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct PolicyArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    policy: PolicyKind,
    #[arg(long, default_value_t = 0.95)]
    p_nuc: f64,
    #[arg(long, default_value_t = 8)]
    samples: usize,
    #[arg(long, default_value_t = 64)]
    n_future: usize,
    /// Attention sinks: kept by StreamingLLM, skipped by GVote's statistics.
    #[arg(long, default_value_t = 4)]
    sink: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Observation window of SnapKV and AdaKV.
    #[arg(long, default_value_t = 8)]
    window: usize,
    /// Leave the current query's nucleus set out of GVote's union.
    #[arg(long)]
    exclude_current: bool,
    /// Also emit one row per layer.
    #[arg(long)]
    per_layer: bool,
}

impl PolicyArgs {
    fn config(&self, ratio: f64) -> PolicyConfig {
        match self.policy {
            PolicyKind::KeepAll => PolicyConfig::KeepAll,
            PolicyKind::GVote => PolicyConfig::GVote(GVoteConfig {
                p_nuc: self.p_nuc,
                samples: self.samples,
                n_future: self.n_future,
                n_sink: self.sink,
                seed: RngSeed(self.seed),
                include_current: !self.exclude_current,
            }),
            PolicyKind::StreamingLlm => PolicyConfig::StreamingLlm {
                ratio,
                n_sink: self.sink,
            },
            PolicyKind::SnapKv => PolicyConfig::SnapKv {
                ratio,
                obs_window: self.window,
            },
            PolicyKind::AdaKv => PolicyConfig::AdaKv {
                ratio,
                obs_window: self.window,
            },
        }
    }
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    let file = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth { spec, out } => {
            let text = std::fs::read_to_string(&spec)
                .with_context(|| format!("cannot read {}", spec.display()))?;
            let spec: SynthSpec = serde_json::from_str(&text)
                .with_context(|| format!("invalid synth spec {}", spec.display()))?;
            save_trace(&generate_synth(&spec)?, &out)?;
        }
        Command::Run { policy, ratio, out } => {
            let trace = load_trace(&policy.trace)?;
            let record = run_policy(&trace, &policy.config(ratio))?;
            write_metrics(create(&out)?, &[record], policy.per_layer)?;
        }
        Command::Sweep { policy, ratios, out } => {
            if ratios.is_empty() {
                bail!("--ratios is empty");
            }
            let trace = load_trace(&policy.trace)?;
            let records = sweep(&trace, &policy.config(ratios[0]), &ratios)?;
            write_metrics(create(&out)?, &records, policy.per_layer)?;
        }
        Command::Overlap {
            trace,
            samples,
            n_future,
            sink,
            seed,
            out,
        } => {
            let trace = load_trace(&trace)?;
            let cfg = GVoteConfig {
                samples,
                n_future,
                n_sink: sink,
                seed: RngSeed(seed),
                ..GVoteConfig::default()
            };
            write_overlap(create(&out)?, &overlap_analysis(&trace, &cfg)?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
