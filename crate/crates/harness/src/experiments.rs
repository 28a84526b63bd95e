//! Experiments built on the training stack.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use rand::Rng;
use serde::Serialize;
use smoothfp8::diagnostics::channel_correlation;
use smoothfp8::nn::l2_penalty_grad;
use smoothfp8::numerics::{enumerate_values, Format};
use smoothfp8::optimizer::{Adam, AdamConfig};
use smoothfp8::scaling::{fake_quantize, per_channel_scales, QuantSite, Reduction, Scale, ScalingMode};
use smoothfp8::swiglu::{sigmoid, SCALE_CLAMP};
use smoothfp8::Tensor;

use crate::config::{Moment, RunConfig};
use crate::data::{stream_rng, SpikeStream, TeacherSpec};
use crate::train::{run_config, Summary};

/// Teacher-student setup for the weight-alignment study.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AlignmentConfig {
    pub d: usize,
    pub h: usize,
    pub lr: f64,
    pub max_steps: u64,
    /// Stop once the full-batch gradient norm falls below this.
    pub grad_tol: f64,
    /// Channels with mean `|w2ᵀx|` above this are examined.
    pub magnitude_threshold: f64,
    pub cos_threshold: f64,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        AlignmentConfig {
            d: 4,
            h: 8,
            lr: 1e-2,
            max_steps: 50_000,
            grad_tol: 1e-5,
            magnitude_threshold: 2.0,
            cos_threshold: 0.95,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChannelAlignment {
    pub channel: usize,
    pub cos: f64,
    /// Mean over samples of `|w2ᵀx|`.
    pub magnitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AlignmentRun {
    pub seed: u64,
    pub mu: f64,
    pub steps: u64,
    pub grad_norm: f64,
    pub loss: f64,
    pub converged: bool,
    pub channels: Vec<ChannelAlignment>,
}

impl AlignmentRun {
    /// Channels above the magnitude threshold.
    pub fn large(&self, cfg: &AlignmentConfig) -> impl Iterator<Item = &ChannelAlignment> {
        let th = cfg.magnitude_threshold;
        self.channels.iter().filter(move |c| c.magnitude > th)
    }
}

/// Single-layer SwiGLU regressor `y = Σⱼ w3ⱼ·(xᵀw1ⱼ)·swish(xᵀw2ⱼ)` with a
/// fused full-batch loss and gradient. `SwiGluBlock` computes the same
/// function; this loop avoids its per-op allocations on the long runs.
#[derive(Clone, Debug, PartialEq)]
pub struct ToySwiGlu {
    pub w1: Tensor,
    pub w2: Tensor,
    pub w3: Tensor,
}

impl ToySwiGlu {
    /// `0.5·mean((y − t)²)` and its gradients `(dw1, dw2, dw3)`.
    pub fn loss_and_grad(&self, x: &Tensor, t: &Tensor) -> Result<(f64, [Tensor; 3])> {
        let (n, d) = x.dims2()?;
        let h = self.w1.shape()[1];
        let (w1, w2, w3) = (self.w1.data(), self.w2.data(), self.w3.data());
        let mut g1 = vec![0.0; d * h];
        let mut g2 = vec![0.0; d * h];
        let mut g3 = vec![0.0; h];
        let (mut a1, mut a2) = (vec![0.0; h], vec![0.0; h]);
        let (mut da1, mut da2) = (vec![0.0; h], vec![0.0; h]);
        let mut loss = 0.0;
        let inv_n = 1.0 / n as f64;
        for i in 0..n {
            let xi = x.row(i);
            a1.iter_mut().for_each(|v| *v = 0.0);
            a2.iter_mut().for_each(|v| *v = 0.0);
            for (k, &xv) in xi.iter().enumerate() {
                for j in 0..h {
                    a1[j] += xv * w1[k * h + j];
                    a2[j] += xv * w2[k * h + j];
                }
            }
            let mut y = 0.0;
            for j in 0..h {
                let s = sigmoid(a2[j]);
                let sw = a2[j] * s;
                let u = a1[j] * sw;
                y += u * w3[j];
                da1[j] = sw;
                da2[j] = a1[j] * (s + a2[j] * s * (1.0 - s));
                // Stash u in a1 for the w3 gradient.
                a1[j] = u;
            }
            let diff = y - t.at(i, 0);
            loss += 0.5 * diff * diff * inv_n;
            let r = diff * inv_n;
            for j in 0..h {
                g3[j] += a1[j] * r;
                let du = r * w3[j];
                da1[j] *= du;
                da2[j] *= du;
            }
            for (k, &xv) in xi.iter().enumerate() {
                for j in 0..h {
                    g1[k * h + j] += xv * da1[j];
                    g2[k * h + j] += xv * da2[j];
                }
            }
        }
        Ok((
            loss,
            [
                Tensor::from_vec(vec![d, h], g1)?,
                Tensor::from_vec(vec![d, h], g2)?,
                Tensor::from_vec(vec![h, 1], g3)?,
            ],
        ))
    }
}

/// Train the toy SwiGLU regressor on the teacher task with full-batch Adam,
/// coupled ℓ2 of strength `mu` and a cosine learning-rate decay.
pub fn run_alignment(cfg: &AlignmentConfig, seed: u64, mu: f64) -> Result<AlignmentRun> {
    let (d, h) = (cfg.d, cfg.h);
    let k = 2 * d * h + h;
    let data = TeacherSpec::new(d, 1, 50 * k).generate(seed);
    let mut rng = stream_rng(seed, 1000);
    let mut init = |r: usize, c: usize, fan: usize| {
        let b = 1.0 / (fan as f64).sqrt();
        Tensor::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0) * b)
    };
    let mut net = ToySwiGlu { w1: init(d, h, d), w2: init(d, h, d), w3: init(h, 1, h) };
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, ..Default::default() }, &[d * h, d * h, h])?;
    let mut steps = 0;
    let mut grad_norm = f64::INFINITY;
    let mut loss = f64::NAN;
    for t in 1..=cfg.max_steps {
        let (l, mut grads) = net.loss_and_grad(&data.x, &data.y)?;
        loss = l;
        for (gr, p) in grads.iter_mut().zip([&net.w1, &net.w2, &net.w3]) {
            l2_penalty_grad(p.data(), mu, gr.data_mut())?;
        }
        grad_norm = grads.iter().map(|g| g.sum_squares()).sum::<f64>().sqrt();
        steps = t;
        if grad_norm < cfg.grad_tol {
            break;
        }
        let lr = cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / cfg.max_steps as f64).cos());
        let refs: Vec<&Tensor> = grads.iter().collect();
        let ToySwiGlu { w1, w2, w3 } = &mut net;
        adam.step(&mut [w1, w2, w3], &refs, lr)?;
    }
    let a2 = data.x.matmul(&net.w2)?;
    let n = a2.shape()[0] as f64;
    let channels = (0..h)
        .map(|c| {
            let cos = channel_correlation(&net.w1.column(c), &net.w2.column(c))?;
            let magnitude = a2.column(c).iter().map(|v| v.abs()).sum::<f64>() / n;
            Ok(ChannelAlignment { channel: c, cos, magnitude })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AlignmentRun { seed, mu, steps, grad_norm, loss, converged: grad_norm < cfg.grad_tol, channels })
}

pub fn alignment_csv(runs: &[AlignmentRun]) -> String {
    let mut s = String::from("mu,seed,steps,converged,grad_norm,loss,channel,cos_w1w2,mean_abs_w2x\n");
    for r in runs {
        for c in &r.channels {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.mu, r.seed, r.steps, r.converged, r.grad_norm, r.loss, c.channel, c.cos, c.magnitude
            )
            .expect("writing to a string");
        }
    }
    s
}

/// One cell of the optimizer-moment sweep.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepEntry {
    pub name: String,
    pub m_format: Moment,
    pub v_format: Moment,
    pub summary: Summary,
}

/// The FP32 baseline and the four FP8 moment-format pairs.
pub const SWEEP: [(&str, Moment, Moment); 5] = [
    ("fp32_fp32", Moment::Fp32, Moment::Fp32),
    ("e4m3_e4m3", Moment::E4m3, Moment::E4m3),
    ("e4m3_e5m2", Moment::E4m3, Moment::E5m2),
    ("e5m2_e4m3", Moment::E5m2, Moment::E4m3),
    ("e5m2_e5m2", Moment::E5m2, Moment::E5m2),
];

/// Run `base` once per moment-format pair. With `out`, each run writes its
/// artifacts into a subdirectory and a `sweep.csv` table is added.
pub fn optimizer_sweep(base: &RunConfig, out: Option<&Path>) -> Result<Vec<SweepEntry>> {
    let mut entries = Vec::new();
    for (name, m, v) in SWEEP {
        let cfg = RunConfig { m_format: m, v_format: v, ..base.clone() };
        let text = cfg.to_toml();
        let dir = out.map(|o| o.join(name));
        let art = run_config(&cfg, &text, None, dir.as_deref()).with_context(|| format!("sweep run {name}"))?;
        entries.push(SweepEntry { name: name.to_string(), m_format: m, v_format: v, summary: art.summary });
    }
    if let Some(o) = out {
        std::fs::write(o.join("sweep.csv"), sweep_csv(&entries))?;
    }
    Ok(entries)
}

pub fn sweep_csv(entries: &[SweepEntry]) -> String {
    let mut s = String::from(
        "name,final_loss,eval_loss,diverged_at,m_underflows,v_underflows,m_saturations,v_saturations,bytes_per_param\n",
    );
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    for e in entries {
        let sm = &e.summary;
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            e.name,
            opt(sm.final_loss),
            opt(sm.eval_loss),
            sm.diverged.as_ref().map_or(String::new(), |d| d.step.to_string()),
            sm.m_moment.underflows,
            sm.v_moment.underflows,
            sm.m_moment.saturations,
            sm.v_moment.saturations,
            sm.memory.bytes_per_param
        )
        .expect("writing to a string");
    }
    s
}

/// Saturation counts of two quantizers of the same activation stream.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpikeReport {
    pub amax: Vec<f64>,
    /// Per-tensor E4M3 with delayed scaling, per iteration.
    pub delayed_saturations: Vec<u64>,
    /// Per-channel E4M3 scales taken from the batch being quantized.
    pub smooth_saturations: Vec<u64>,
}

pub fn spike_experiment(stream: &SpikeStream, iterations: u64, history_len: usize) -> Result<SpikeReport> {
    let mut site = QuantSite::scaled(Format::E4M3, ScalingMode::Delayed, 1.0, history_len, Reduction::Max)?;
    let mut report = SpikeReport { amax: Vec::new(), delayed_saturations: Vec::new(), smooth_saturations: Vec::new() };
    for it in 0..iterations {
        let u = stream.batch(it);
        report.amax.push(u.amax());
        let (_, st) = site.apply(&u)?;
        report.delayed_saturations.push(st.stats.saturations);
        let s = per_channel_scales(&u, Format::E4M3, 1.0)?.clamped(SCALE_CLAMP.0, SCALE_CLAMP.1);
        let (_, sm) = fake_quantize(&u, &Scale::Channel(s), Format::E4M3)?;
        report.smooth_saturations.push(sm.saturations);
    }
    Ok(report)
}

/// Every code of `format` with its value, one row per code.
pub fn format_dump(format: Format) -> String {
    let mut s = String::from("format,code,hex,value,class\n");
    for (c, v) in enumerate_values(format) {
        let class = if c.is_nan() {
            "nan"
        } else if v.is_infinite() {
            "inf"
        } else if v == 0.0 {
            "zero"
        } else if c.exponent_field() == 0 {
            "subnormal"
        } else {
            "normal"
        };
        writeln!(s, "{},{},{:#06x},{:e},{}", format, c.bits, c.bits, v, class).expect("writing to a string");
    }
    s
}

/// Side-by-side view of two run directories.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Comparison {
    pub loss_identical: bool,
    pub diagnostics_identical: bool,
    pub final_loss: [Option<f64>; 2],
    pub eval_loss: [Option<f64>; 2],
    pub diverged: [bool; 2],
}

pub fn compare_runs(a: &Path, b: &Path) -> Result<Comparison> {
    let read = |d: &Path, f: &str| std::fs::read(d.join(f)).with_context(|| format!("reading {}", d.join(f).display()));
    let summary = |d: &Path| -> Result<serde_json::Value> {
        let m: serde_json::Value = serde_json::from_slice(&read(d, "manifest.json")?)?;
        Ok(m["summary"].clone())
    };
    let (sa, sb) = (summary(a)?, summary(b)?);
    Ok(Comparison {
        loss_identical: read(a, "loss.csv")? == read(b, "loss.csv")?,
        diagnostics_identical: read(a, "diagnostics.csv")? == read(b, "diagnostics.csv")?,
        final_loss: [sa["final_loss"].as_f64(), sb["final_loss"].as_f64()],
        eval_loss: [sa["eval_loss"].as_f64(), sb["eval_loss"].as_f64()],
        diverged: [!sa["diverged"].is_null(), !sb["diverged"].is_null()],
    })
}
