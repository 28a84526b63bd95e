use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use smoothfp8::checkpoint::Checkpoint;
use smoothfp8::numerics::Format;
use smoothfp8_harness::config::{
    Activation, AmaxReduction, L2, Master, Moment, Precision, RunConfig, Schedule, Task,
};
use smoothfp8_harness::data::SpikeStream;
use smoothfp8_harness::experiments::{
    alignment_csv, compare_runs, format_dump, optimizer_sweep, run_alignment, spike_experiment, sweep_csv,
    AlignmentConfig,
};
use smoothfp8_harness::train::run_config;

#[derive(Parser)]
#[command(name = "smoothfp8", version, about = "FP8 training emulation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write its artifacts.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// FP32 moments against the four FP8 moment-format pairs.
    SweepOptimizer {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Weight-alignment study on the teacher regression task.
    Alignment {
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long, value_delimiter = ',', default_values_t = vec![1e-3, 0.0])]
        mu: Vec<f64>,
        #[arg(long, default_value_t = 50_000)]
        max_steps: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-tensor delayed vs per-channel scaling on a stream with one spike.
    Spike {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        iterations: u64,
        #[arg(long, default_value_t = 500)]
        spike_at: u64,
        #[arg(long, default_value_t = 100.0)]
        factor: f64,
    },
    /// Every code of a format as CSV.
    FormatDump {
        #[arg(long, value_parser = parse_format)]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare the artifacts of two run directories.
    Compare { a: PathBuf, b: PathBuf },
}

fn parse_format(s: &str) -> Result<Format, String> {
    Format::parse(s).ok_or_else(|| format!("unknown format {s}; expected e4m3, e5m2, bf16 or fp16"))
}

/// A config file plus per-field overrides.
#[derive(Args)]
struct ConfigArgs {
    /// Flat TOML file; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    task: Option<Task>,
    #[arg(long, value_enum)]
    activation: Option<Activation>,
    #[arg(long, value_enum)]
    precision: Option<Precision>,
    #[arg(long)]
    quantize: Option<bool>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    context: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    d_in: Option<usize>,
    #[arg(long)]
    d_out: Option<usize>,
    #[arg(long)]
    corpus: Option<String>,
    #[arg(long)]
    synthetic_bytes: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    n_samples: Option<usize>,
    #[arg(long)]
    eval_batches: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_enum)]
    schedule: Option<Schedule>,
    #[arg(long)]
    warmup_steps: Option<u64>,
    #[arg(long)]
    min_lr_ratio: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long, value_enum)]
    m_format: Option<Moment>,
    #[arg(long, value_enum)]
    v_format: Option<Moment>,
    #[arg(long, value_enum)]
    master_format: Option<Master>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long, value_enum)]
    l2_mode: Option<L2>,
    #[arg(long)]
    history_len: Option<usize>,
    #[arg(long, value_enum)]
    reduction: Option<AmaxReduction>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    smooth_refresh: Option<usize>,
    #[arg(long)]
    diag_every: Option<u64>,
    #[arg(long)]
    spike_at: Option<u64>,
    #[arg(long)]
    spike_factor: Option<f64>,
    #[arg(long)]
    spike_layer: Option<usize>,
    #[arg(long)]
    divergence_factor: Option<f64>,
    #[arg(long)]
    threads: Option<usize>,
}

macro_rules! apply {
    ($args:ident, $cfg:ident, $changed:ident; $($field:ident),*; $($opt:ident),*) => {
        $(if let Some(v) = $args.$field.clone() { $cfg.$field = v; $changed = true; })*
        $(if let Some(v) = $args.$opt.clone() { $cfg.$opt = Some(v); $changed = true; })*
    };
}

impl ConfigArgs {
    /// The resolved config and the text echoed into the manifest: the file
    /// verbatim when no flag overrides it, else the canonical serialization.
    fn resolve(&self) -> Result<(RunConfig, String)> {
        let (mut cfg, file_text) = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                (RunConfig::from_toml(&text)?, Some(text))
            }
            None => match self.seed {
                Some(s) => (RunConfig::with_seed(s), None),
                None => bail!("a seed is required: pass --seed or set it in --config"),
            },
        };
        let mut changed = false;
        apply!(self, cfg, changed;
            seed, task, activation, precision, quantize, steps, blocks, hidden, context, embed_dim, d_in,
            d_out, synthetic_bytes, batch_size, seq_len, n_samples, eval_batches, lr, schedule, warmup_steps,
            min_lr_ratio, beta1, beta2, eps, m_format, v_format, master_format, mu, l2_mode, history_len,
            reduction, margin, smooth_refresh, diag_every, spike_factor, spike_layer, divergence_factor, threads;
            corpus, spike_at);
        cfg.validate()?;
        let text = match file_text {
            Some(t) if !changed => t,
            _ => cfg.to_toml(),
        };
        Ok((cfg, text))
    }
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run { cfg, out, resume } => {
            let (cfg, text) = cfg.resolve()?;
            let ck = resume
                .map(|p| -> Result<Checkpoint> {
                    let f = std::fs::File::open(&p).with_context(|| format!("opening {}", p.display()))?;
                    Ok(Checkpoint::read_from(std::io::BufReader::new(f))?)
                })
                .transpose()?;
            let art = run_config(&cfg, &text, ck.as_ref(), Some(&out))?;
            println!("{}", serde_json::to_string_pretty(&art.summary)?);
        }
        Command::SweepOptimizer { cfg, out } => {
            let (cfg, _) = cfg.resolve()?;
            std::fs::create_dir_all(&out)?;
            let entries = optimizer_sweep(&cfg, Some(&out))?;
            print!("{}", sweep_csv(&entries));
        }
        Command::Alignment { seeds, mu, max_steps, out } => {
            let cfg = AlignmentConfig { max_steps, ..Default::default() };
            let mut runs = Vec::new();
            for &m in &mu {
                for seed in 0..seeds {
                    let r = run_alignment(&cfg, seed, m)?;
                    eprintln!("mu={m} seed={seed} steps={} grad_norm={:.2e} loss={:.5}", r.steps, r.grad_norm, r.loss);
                    runs.push(r);
                }
            }
            write_or_print(out.as_deref(), &alignment_csv(&runs))?;
        }
        Command::Spike { seed, iterations, spike_at, factor } => {
            let stream = SpikeStream { tokens: 256, channels: 64, spike_at, factor, seed };
            let r = spike_experiment(&stream, iterations, 16)?;
            println!("iteration,amax,delayed_saturations,smooth_saturations");
            for i in 0..iterations as usize {
                println!("{},{},{},{}", i, r.amax[i], r.delayed_saturations[i], r.smooth_saturations[i]);
            }
        }
        Command::FormatDump { format, out } => write_or_print(out.as_deref(), &format_dump(format))?,
        Command::Compare { a, b } => println!("{}", serde_json::to_string_pretty(&compare_runs(&a, &b)?)?),
    }
    Ok(())
}
