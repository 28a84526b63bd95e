//! Adam with low-precision moment storage and byte accounting.
//!
//! Each step decodes the stored moments, applies the usual exponential
//! averages in wide precision, re-encodes the new moments with fresh per-tensor
//! just-in-time scales, and updates the master weights from the re-encoded
//! values. `Fp32` moments are held unrounded.

use std::fmt;

use crate::error::{Error, Result};
use crate::numerics::{Format, OverflowMode};
use crate::scaling::{jit_scale, quantize, QuantStats, Scale, ScaledTensor};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MomentFormat {
    Fp32,
    Fp16,
    E4M3,
    E5M2,
}

impl MomentFormat {
    pub const ALL: [MomentFormat; 4] = [MomentFormat::Fp32, MomentFormat::Fp16, MomentFormat::E4M3, MomentFormat::E5M2];

    /// Storage format, `None` for wide storage.
    pub fn format(self) -> Option<Format> {
        match self {
            MomentFormat::Fp32 => None,
            MomentFormat::Fp16 => Some(Format::FP16),
            MomentFormat::E4M3 => Some(Format::E4M3),
            MomentFormat::E5M2 => Some(Format::E5M2),
        }
    }

    pub fn bytes(self) -> u64 {
        match self {
            MomentFormat::Fp32 => 4,
            MomentFormat::Fp16 => 2,
            MomentFormat::E4M3 | MomentFormat::E5M2 => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MomentFormat::Fp32 => "fp32",
            MomentFormat::Fp16 => "fp16",
            MomentFormat::E4M3 => "e4m3",
            MomentFormat::E5M2 => "e5m2",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        MomentFormat::ALL.into_iter().find(|f| f.name().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for MomentFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum MasterFormat {
    #[default]
    Fp32,
    Fp16,
}

impl MasterFormat {
    pub fn bytes(self) -> u64 {
        match self {
            MasterFormat::Fp32 => 4,
            MasterFormat::Fp16 => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MasterFormat::Fp32 => "fp32",
            MasterFormat::Fp16 => "fp16",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [MasterFormat::Fp32, MasterFormat::Fp16].into_iter().find(|f| f.name().eq_ignore_ascii_case(s))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay (AdamW style); 0 disables it.
    pub weight_decay: f64,
    pub m_format: MomentFormat,
    pub v_format: MomentFormat,
    pub master: MasterFormat,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            m_format: MomentFormat::Fp32,
            v_format: MomentFormat::Fp32,
            master: MasterFormat::Fp32,
        }
    }
}

impl AdamConfig {
    /// First moment E4M3, second moment E5M2.
    pub fn fp8() -> Self {
        AdamConfig { m_format: MomentFormat::E4M3, v_format: MomentFormat::E5M2, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr.is_finite()
            && self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps.is_finite()
            && self.eps > 0.0
            && self.weight_decay.is_finite()
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::validation(format!("invalid Adam configuration {self:?}")))
        }
    }
}

/// A stored moment tensor.
#[derive(Clone, Debug, PartialEq)]
pub enum Moment {
    Wide(Vec<f64>),
    Quantized(ScaledTensor),
}

impl Moment {
    fn zeros(n: usize, format: MomentFormat) -> Moment {
        match format.format() {
            None => Moment::Wide(vec![0.0; n]),
            Some(f) => Moment::Quantized(ScaledTensor {
                codes: vec![0; n],
                scale: Scale::Tensor(1.0),
                format: f,
                shape: vec![n],
                stats: QuantStats::default(),
            }),
        }
    }

    pub fn values(&self) -> Vec<f64> {
        match self {
            Moment::Wide(v) => v.clone(),
            Moment::Quantized(q) => q.dequantize().into_data(),
        }
    }

    pub fn scale(&self) -> f64 {
        match self {
            Moment::Quantized(ScaledTensor { scale: Scale::Tensor(s), .. }) => *s,
            _ => 1.0,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Moment::Wide(v) => v.len(),
            Moment::Quantized(q) => q.codes.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Encode a moment with a just-in-time per-tensor scale under saturating RNE,
/// counting saturations and nonzero values flushed to zero.
pub fn moment_quantize(values: &[f64], format: Format) -> Result<ScaledTensor> {
    let s = jit_scale(values, format, 1.0)?;
    quantize(&Tensor::from_vec(vec![values.len()], values.to_vec())?, &Scale::Tensor(s), format)
}

fn store(values: Vec<f64>, format: MomentFormat) -> Result<(Moment, QuantStats)> {
    match format.format() {
        None => Ok((Moment::Wide(values), QuantStats::default())),
        Some(f) => {
            let q = moment_quantize(&values, f)?;
            let stats = q.stats;
            Ok((Moment::Quantized(q), stats))
        }
    }
}

/// Adam state for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Fp8AdamState {
    pub m: Moment,
    pub v: Moment,
    pub step: u64,
    /// Cumulative quantization counters for each moment.
    pub m_stats: QuantStats,
    pub v_stats: QuantStats,
}

impl Fp8AdamState {
    pub fn new(n: usize, config: &AdamConfig) -> Self {
        Fp8AdamState {
            m: Moment::zeros(n, config.m_format),
            v: Moment::zeros(n, config.v_format),
            step: 0,
            m_stats: QuantStats::default(),
            v_stats: QuantStats::default(),
        }
    }
}

/// One Adam update of `params` in place.
pub fn adam_step(params: &mut Tensor, grads: &Tensor, state: &mut Fp8AdamState, config: &AdamConfig) -> Result<()> {
    if params.shape() != grads.shape() {
        return Err(Error::shape(format!("params {:?} vs grads {:?}", params.shape(), grads.shape())));
    }
    if state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::shape(format!("optimizer state for {} elements, params have {}", state.m.len(), params.len())));
    }
    if let Some(i) = grads.data().iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient element {i} is {}", grads.data()[i])));
    }
    let (b1, b2) = (config.beta1, config.beta2);
    let m_prev = state.m.values();
    let v_prev = state.v.values();
    let g = grads.data();
    let m_new: Vec<f64> = m_prev.iter().zip(g).map(|(m, g)| b1 * m + (1.0 - b1) * g).collect();
    let v_new: Vec<f64> = v_prev.iter().zip(g).map(|(v, g)| b2 * v + (1.0 - b2) * g * g).collect();
    let (m_store, ms) = store(m_new, config.m_format)?;
    let (v_store, vs) = store(v_new, config.v_format)?;
    state.m = m_store;
    state.v = v_store;
    state.m_stats.merge(ms);
    state.v_stats.merge(vs);
    state.step += 1;

    let t = state.step as i32;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let m = state.m.values();
    let v = state.v.values();
    let master = config.master;
    for ((p, m), v) in params.data_mut().iter_mut().zip(&m).zip(&v) {
        let mut w = *p;
        if config.weight_decay > 0.0 {
            w -= config.lr * config.weight_decay * w;
        }
        w -= config.lr * (m / c1) / ((v / c2).sqrt() + config.eps);
        if master == MasterFormat::Fp16 {
            w = Format::FP16.spec().round(w, OverflowMode::Saturate);
        }
        *p = w;
    }
    if !params.all_finite() {
        return Err(Error::NonFinite("parameter update produced a non-finite value".into()));
    }
    Ok(())
}

/// Adam over a list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub states: Vec<Fp8AdamState>,
}

impl Adam {
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Result<Self> {
        config.validate()?;
        Ok(Adam { config, states: sizes.iter().map(|&n| Fp8AdamState::new(n, &config)).collect() })
    }

    /// Update every tensor with the given learning rate.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor], lr: f64) -> Result<()> {
        if params.len() != self.states.len() || grads.len() != self.states.len() {
            return Err(Error::shape(format!(
                "{} states, {} params, {} grads",
                self.states.len(),
                params.len(),
                grads.len()
            )));
        }
        let cfg = AdamConfig { lr, ..self.config };
        for ((p, g), s) in params.iter_mut().zip(grads).zip(&mut self.states) {
            adam_step(p, g, s, &cfg)?;
        }
        Ok(())
    }

    pub fn step_count(&self) -> u64 {
        self.states.first().map_or(0, |s| s.step)
    }

    /// Counters summed over tensors: (first moment, second moment).
    pub fn totals(&self) -> (QuantStats, QuantStats) {
        let mut m = QuantStats::default();
        let mut v = QuantStats::default();
        for s in &self.states {
            m.merge(s.m_stats);
            v.merge(s.v_stats);
        }
        (m, v)
    }
}

/// Bytes of optimizer-related state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MemoryReport {
    pub master: u64,
    pub m: u64,
    pub v: u64,
    /// One f32 scale per quantized moment tensor.
    pub scales: u64,
    pub total: u64,
}

impl MemoryReport {
    /// `(master + m + v) / n_params`, scales excluded.
    pub fn bytes_per_param(&self, n_params: u64) -> f64 {
        (self.master + self.m + self.v) as f64 / n_params as f64
    }
}

pub fn memory_report(n_params: u64, n_tensors: u64, config: &AdamConfig) -> MemoryReport {
    let master = n_params * config.master.bytes();
    let m = n_params * config.m_format.bytes();
    let v = n_params * config.v_format.bytes();
    let quantized = config.m_format.format().is_some() as u64 + config.v_format.format().is_some() as u64;
    let scales = quantized * n_tensors * 4;
    MemoryReport { master, m, v, scales, total: master + m + v + scales }
}
