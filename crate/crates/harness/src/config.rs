//! Run configuration: a flat key-value TOML document.

use std::fmt;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use smoothfp8::nn::{L2Mode, PrecisionPolicy, SiteConfig};
use smoothfp8::optimizer::{AdamConfig, MasterFormat, MomentFormat};
use smoothfp8::scaling::Reduction;
use smoothfp8::swiglu::SwiGluMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Task {
    /// Byte-level next-token prediction.
    Lm,
    /// Synthetic teacher regression.
    Regression,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Activation {
    Swiglu,
    SmoothSwiglu,
    Gelu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Precision {
    Bf16Baseline,
    Fp8Full,
    Fp8SwigluOutBf16,
    Fp8SmoothSwiglu,
}

impl Precision {
    pub const ALL: [Precision; 4] =
        [Precision::Bf16Baseline, Precision::Fp8Full, Precision::Fp8SwigluOutBf16, Precision::Fp8SmoothSwiglu];

    pub fn name(self) -> &'static str {
        match self {
            Precision::Bf16Baseline => "bf16_baseline",
            Precision::Fp8Full => "fp8_full",
            Precision::Fp8SwigluOutBf16 => "fp8_swiglu_out_bf16",
            Precision::Fp8SmoothSwiglu => "fp8_smooth_swiglu",
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Linear warmup, then cosine decay to `lr * min_lr_ratio`.
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum L2 {
    Coupled,
    Decoupled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum AmaxReduction {
    Max,
    MostRecent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Moment {
    Fp32,
    Fp16,
    E4m3,
    E5m2,
}

impl From<Moment> for MomentFormat {
    fn from(m: Moment) -> Self {
        match m {
            Moment::Fp32 => MomentFormat::Fp32,
            Moment::Fp16 => MomentFormat::Fp16,
            Moment::E4m3 => MomentFormat::E4M3,
            Moment::E5m2 => MomentFormat::E5M2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Master {
    Fp32,
    Fp16,
}

/// Everything that determines a run. `seed` has no default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default = "d::task")]
    pub task: Task,
    #[serde(default = "d::activation")]
    pub activation: Activation,
    #[serde(default = "d::precision")]
    pub precision: Precision,
    /// `false` turns every quantizer into a no-op.
    #[serde(default = "d::yes")]
    pub quantize: bool,
    #[serde(default = "d::steps")]
    pub steps: u64,

    // Model.
    #[serde(default = "d::blocks")]
    pub blocks: usize,
    #[serde(default = "d::hidden")]
    pub hidden: usize,
    #[serde(default = "d::context")]
    pub context: usize,
    #[serde(default = "d::embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "d::d_in")]
    pub d_in: usize,
    #[serde(default = "d::d_out")]
    pub d_out: usize,

    // Data.
    #[serde(default)]
    pub corpus: Option<String>,
    #[serde(default = "d::corpus_bytes")]
    pub synthetic_bytes: usize,
    #[serde(default = "d::batch_size")]
    pub batch_size: usize,
    #[serde(default = "d::seq_len")]
    pub seq_len: usize,
    #[serde(default = "d::n_samples")]
    pub n_samples: usize,
    #[serde(default = "d::eval_batches")]
    pub eval_batches: usize,

    // Optimizer.
    #[serde(default = "d::lr")]
    pub lr: f64,
    #[serde(default = "d::schedule")]
    pub schedule: Schedule,
    #[serde(default)]
    pub warmup_steps: u64,
    #[serde(default = "d::min_lr_ratio")]
    pub min_lr_ratio: f64,
    #[serde(default = "d::beta1")]
    pub beta1: f64,
    #[serde(default = "d::beta2")]
    pub beta2: f64,
    #[serde(default = "d::eps")]
    pub eps: f64,
    #[serde(default = "d::fp32")]
    pub m_format: Moment,
    #[serde(default = "d::fp32")]
    pub v_format: Moment,
    #[serde(default = "d::master")]
    pub master_format: Master,
    #[serde(default)]
    pub mu: f64,
    #[serde(default = "d::l2")]
    pub l2_mode: L2,

    // Scaling.
    #[serde(default = "d::history_len")]
    pub history_len: usize,
    #[serde(default = "d::reduction")]
    pub reduction: AmaxReduction,
    #[serde(default = "d::margin")]
    pub margin: f64,
    #[serde(default = "d::one")]
    pub smooth_refresh: usize,

    // Diagnostics and perturbations.
    #[serde(default = "d::diag_every")]
    pub diag_every: u64,
    #[serde(default)]
    pub spike_at: Option<u64>,
    #[serde(default = "d::spike_factor")]
    pub spike_factor: f64,
    #[serde(default)]
    pub spike_layer: usize,
    /// A loss above this multiple of the first step's loss counts as divergence.
    #[serde(default = "d::divergence_factor")]
    pub divergence_factor: f64,
    /// Worker threads for the internal pool; results do not depend on it.
    #[serde(default = "d::one")]
    pub threads: usize,
}

mod d {
    use super::*;
    pub fn task() -> Task {
        Task::Lm
    }
    pub fn activation() -> Activation {
        Activation::Swiglu
    }
    pub fn precision() -> Precision {
        Precision::Bf16Baseline
    }
    pub fn yes() -> bool {
        true
    }
    pub fn steps() -> u64 {
        200
    }
    pub fn blocks() -> usize {
        2
    }
    pub fn hidden() -> usize {
        256
    }
    pub fn context() -> usize {
        4
    }
    pub fn embed_dim() -> usize {
        24
    }
    pub fn d_in() -> usize {
        8
    }
    pub fn d_out() -> usize {
        1
    }
    pub fn corpus_bytes() -> usize {
        1 << 17
    }
    pub fn batch_size() -> usize {
        8
    }
    pub fn seq_len() -> usize {
        8
    }
    pub fn n_samples() -> usize {
        4096
    }
    pub fn eval_batches() -> usize {
        8
    }
    pub fn lr() -> f64 {
        1e-3
    }
    pub fn schedule() -> Schedule {
        Schedule::Cosine
    }
    pub fn min_lr_ratio() -> f64 {
        0.1
    }
    pub fn beta1() -> f64 {
        0.9
    }
    pub fn beta2() -> f64 {
        0.999
    }
    pub fn eps() -> f64 {
        1e-8
    }
    pub fn fp32() -> Moment {
        Moment::Fp32
    }
    pub fn master() -> Master {
        Master::Fp32
    }
    pub fn l2() -> L2 {
        L2::Coupled
    }
    pub fn history_len() -> usize {
        16
    }
    pub fn reduction() -> AmaxReduction {
        AmaxReduction::Max
    }
    pub fn margin() -> f64 {
        1.0
    }
    pub fn one() -> usize {
        1
    }
    pub fn diag_every() -> u64 {
        10
    }
    pub fn spike_factor() -> f64 {
        100.0
    }
    pub fn divergence_factor() -> f64 {
        100.0
    }
}

impl RunConfig {
    /// Defaults for everything except the seed.
    pub fn with_seed(seed: u64) -> Self {
        toml::from_str(&format!("seed = {seed}")).expect("defaults deserialize")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).context("parsing run configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("steps", self.steps as usize),
            ("hidden", self.hidden),
            ("batch_size", self.batch_size),
            ("seq_len", self.seq_len),
            ("history_len", self.history_len),
            ("smooth_refresh", self.smooth_refresh),
            ("diag_every", self.diag_every as usize),
            ("threads", self.threads),
            ("eval_batches", self.eval_batches),
        ];
        for (name, v) in positive {
            if v == 0 {
                bail!("{name} must be positive");
            }
        }
        match self.task {
            Task::Lm => {
                if self.context == 0 || self.embed_dim == 0 {
                    bail!("context and embed_dim must be positive for the lm task");
                }
            }
            Task::Regression => {
                if self.d_in == 0 || self.d_out == 0 || self.n_samples == 0 {
                    bail!("d_in, d_out and n_samples must be positive for the regression task");
                }
            }
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            bail!("lr must be positive, got {}", self.lr);
        }
        if !(0.0..=1.0).contains(&self.min_lr_ratio) {
            bail!("min_lr_ratio must be in [0, 1]");
        }
        if !(self.mu.is_finite() && self.mu >= 0.0) {
            bail!("mu must be >= 0, got {}", self.mu);
        }
        if !(self.margin > 0.0 && self.margin <= 1.0) {
            bail!("margin must be in (0, 1], got {}", self.margin);
        }
        if !(self.divergence_factor > 1.0) {
            bail!("divergence_factor must exceed 1, got {}", self.divergence_factor);
        }
        if !(self.spike_factor.is_finite() && self.spike_factor > 0.0) {
            bail!("spike_factor must be positive");
        }
        if self.spike_at.is_some() && self.spike_layer >= self.blocks {
            bail!("spike_layer {} but only {} blocks", self.spike_layer, self.blocks);
        }
        if self.spike_at.is_some() && self.activation == Activation::Gelu {
            bail!("spike injection targets SwiGLU outputs; activation is gelu");
        }
        if self.activation == Activation::Gelu
            && matches!(self.precision, Precision::Fp8SmoothSwiglu | Precision::Fp8SwigluOutBf16)
        {
            bail!("precision {} needs a SwiGLU activation", self.precision);
        }
        if self.activation == Activation::SmoothSwiglu && self.precision == Precision::Fp8SwigluOutBf16 {
            bail!("fp8_swiglu_out_bf16 is an ablation of plain SwiGLU");
        }
        self.adam().validate().map_err(anyhow::Error::from)?;
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: if self.l2_mode == L2::Decoupled { self.mu } else { 0.0 },
            m_format: self.m_format.into(),
            v_format: self.v_format.into(),
            master: match self.master_format {
                Master::Fp32 => MasterFormat::Fp32,
                Master::Fp16 => MasterFormat::Fp16,
            },
        }
    }

    pub fn l2(&self) -> L2Mode {
        match self.l2_mode {
            L2::Coupled => L2Mode::Coupled,
            L2::Decoupled => L2Mode::Decoupled,
        }
    }

    /// Quantization policy inside the MLP blocks.
    pub fn block_policy(&self) -> PrecisionPolicy {
        if !self.quantize {
            return PrecisionPolicy::WIDE;
        }
        match self.precision {
            Precision::Bf16Baseline => PrecisionPolicy::BF16,
            _ => PrecisionPolicy::FP8,
        }
    }

    /// Policy for embedding and output head, which stay in BF16.
    pub fn edge_policy(&self) -> PrecisionPolicy {
        if self.quantize {
            PrecisionPolicy::BF16
        } else {
            PrecisionPolicy::WIDE
        }
    }

    /// SwiGLU mode. Per-channel smoothing is part of the quantization policy,
    /// so it is dropped when quantization is off.
    pub fn swiglu_mode(&self) -> SwiGluMode {
        if !self.quantize {
            return SwiGluMode::Swiglu;
        }
        match (self.precision, self.activation) {
            (Precision::Fp8SmoothSwiglu, _) | (_, Activation::SmoothSwiglu) => SwiGluMode::SmoothSwiglu,
            (Precision::Fp8SwigluOutBf16, _) => SwiGluMode::SwigluOutBf16,
            _ => SwiGluMode::Swiglu,
        }
    }

    pub fn site_config(&self) -> SiteConfig {
        SiteConfig {
            margin: self.margin,
            history_len: self.history_len,
            reduction: match self.reduction {
                AmaxReduction::Max => Reduction::Max,
                AmaxReduction::MostRecent => Reduction::MostRecent,
            },
        }
    }

    /// Learning rate at `step` (0-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine => {
                let span = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
                let t = ((step - self.warmup_steps) as f64 / span).min(1.0);
                let floor = self.lr * self.min_lr_ratio;
                floor + 0.5 * (self.lr - floor) * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_is_required() {
        assert!(RunConfig::from_toml("steps = 3").is_err());
        let c = RunConfig::from_toml("seed = 9").unwrap();
        assert_eq!(c, RunConfig::with_seed(9));
    }

    #[test]
    fn canonical_text_round_trips() {
        let mut c = RunConfig::with_seed(1);
        c.spike_at = Some(5);
        c.precision = Precision::Fp8SmoothSwiglu;
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_bad_values() {
        for bad in [
            "seed = 1\nmu = -0.1",
            "seed = 1\nmargin = 1.5",
            "seed = 1\nprecision = \"fp9\"",
            "seed = 1\nunknown_key = 3",
            "seed = 1\nactivation = \"gelu\"\nprecision = \"fp8_smooth_swiglu\"",
            "seed = 1\nbeta2 = 1.0",
            "seed = 1\nspike_at = 3\nspike_layer = 7",
        ] {
            assert!(RunConfig::from_toml(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn schedule_shape() {
        let mut c = RunConfig::with_seed(0);
        c.steps = 100;
        c.warmup_steps = 10;
        assert!((c.lr_at(0) - c.lr / 10.0).abs() < 1e-18);
        assert_eq!(c.lr_at(10), c.lr);
        assert!((c.lr_at(100) - c.lr * c.min_lr_ratio).abs() < 1e-15);
        assert!(c.lr_at(50) < c.lr && c.lr_at(50) > c.lr * c.min_lr_ratio);
    }

    #[test]
    fn quantize_off_collapses_modes() {
        for p in Precision::ALL {
            let mut c = RunConfig::with_seed(0);
            c.precision = p;
            c.quantize = false;
            assert_eq!(c.block_policy(), PrecisionPolicy::WIDE);
            assert_eq!(c.swiglu_mode(), SwiGluMode::Swiglu);
        }
    }
}
