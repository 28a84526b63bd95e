//! Scale-factor selection and scaled quantization.
//!
//! Convention: a scale `s` multiplies a value before encoding and divides it
//! after decoding, so `dequantize(quantize(x, s)) = decode(encode(s * x)) / s`.

use std::collections::VecDeque;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{Format, OverflowMode};
use crate::tensor::Tensor;

/// How the amax history collapses to one value.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Reduction {
    #[default]
    Max,
    MostRecent,
}

/// Rolling record of per-iteration amax values for one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AmaxHistory {
    window: VecDeque<f64>,
    capacity: usize,
    reduction: Reduction,
}

pub const DEFAULT_HISTORY_LEN: usize = 16;

impl Default for AmaxHistory {
    fn default() -> Self {
        AmaxHistory::new(DEFAULT_HISTORY_LEN, Reduction::Max).expect("non-zero capacity")
    }
}

impl AmaxHistory {
    pub fn new(capacity: usize, reduction: Reduction) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::validation("amax history capacity must be at least 1"));
        }
        Ok(AmaxHistory { window: VecDeque::with_capacity(capacity), capacity, reduction })
    }

    /// Append one iteration's amax, evicting the oldest entry when full.
    pub fn record(&mut self, amax: f64) -> Result<()> {
        if !amax.is_finite() || amax < 0.0 {
            return Err(Error::validation(format!("amax must be finite and >= 0, got {amax}")));
        }
        if self.window.len() == self.capacity {
            self.window.pop_front();
        }
        self.window.push_back(amax);
        Ok(())
    }

    /// Functional form of [`AmaxHistory::record`].
    pub fn updated(mut self, amax: f64) -> Result<Self> {
        self.record(amax)?;
        Ok(self)
    }

    pub fn effective_amax(&self) -> Option<f64> {
        match self.reduction {
            Reduction::Max => self.window.iter().copied().reduce(f64::max),
            Reduction::MostRecent => self.window.back().copied(),
        }
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.window.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.window.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn reduction(&self) -> Reduction {
        self.reduction
    }

    pub fn clear(&mut self) {
        self.window.clear();
    }
}

fn check_margin(margin: f64) -> Result<()> {
    if margin > 0.0 && margin <= 1.0 {
        Ok(())
    } else {
        Err(Error::validation(format!("margin must lie in (0, 1], got {margin}")))
    }
}

/// `margin * max_normal / amax`, or 1 for an all-zero tensor.
pub fn scale_for_amax(amax: f64, format: Format, margin: f64) -> f64 {
    if amax == 0.0 {
        1.0
    } else {
        margin * format.spec().max_normal / amax
    }
}

/// Scale from preceding iterations' amax values.
pub fn delayed_scale(history: &AmaxHistory, format: Format, margin: f64) -> Result<f64> {
    check_margin(margin)?;
    let amax = history.effective_amax().ok_or_else(|| {
        Error::validation("delayed scaling needs a non-empty amax history; seed it with a just-in-time pass")
    })?;
    Ok(scale_for_amax(amax, format, margin))
}

/// Largest absolute value; errors on non-finite input.
pub fn amax(values: &[f64]) -> Result<f64> {
    let mut m = 0.0f64;
    for &v in values {
        if !v.is_finite() {
            return Err(Error::NonFinite("tensor contains a non-finite value".into()));
        }
        m = m.max(v.abs());
    }
    Ok(m)
}

/// Scale from the tensor's own amax.
pub fn jit_scale(values: &[f64], format: Format, margin: f64) -> Result<f64> {
    check_margin(margin)?;
    Ok(scale_for_amax(amax(values)?, format, margin))
}

/// One positive scale per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelScales(Vec<f64>);

impl ChannelScales {
    pub fn new(scales: Vec<f64>) -> Result<Self> {
        if let Some(bad) = scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::validation(format!("channel scale must be positive and finite, got {bad}")));
        }
        Ok(ChannelScales(scales))
    }

    pub fn ones(n: usize) -> Self {
        ChannelScales(vec![1.0; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Clamp every scale into `[lo, hi]`.
    pub fn clamped(mut self, lo: f64, hi: f64) -> Self {
        for s in &mut self.0 {
            *s = s.clamp(lo, hi);
        }
        self
    }
}

/// Per-channel maxima of a `[tokens x channels]` tensor. Each channel is
/// reduced independently; `max` is exact so results do not depend on how the
/// channels are split across workers.
pub fn channel_amax(t: &Tensor) -> Result<Vec<f64>> {
    let (rows, cols) = t.dims2()?;
    let data = t.data();
    let col_max = |c: usize| -> Result<f64> {
        let mut m = 0.0f64;
        for r in 0..rows {
            let v = data[r * cols + c];
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("channel {c} contains a non-finite value")));
            }
            m = m.max(v.abs());
        }
        Ok(m)
    };
    if rayon::current_num_threads() > 1 && rows * cols >= 1 << 14 {
        (0..cols).into_par_iter().map(col_max).collect()
    } else {
        (0..cols).map(col_max).collect()
    }
}

pub fn per_channel_scales(t: &Tensor, format: Format, margin: f64) -> Result<ChannelScales> {
    check_margin(margin)?;
    let maxima = channel_amax(t)?;
    ChannelScales::new(maxima.into_iter().map(|a| scale_for_amax(a, format, margin)).collect())
}

/// Scale applied by a quantization.
#[derive(Clone, Debug, PartialEq)]
pub enum Scale {
    Tensor(f64),
    /// One scale per column of a `[tokens x channels]` tensor.
    Channel(ChannelScales),
}

impl Scale {
    fn validate(&self, cols: usize) -> Result<()> {
        match self {
            Scale::Tensor(s) if s.is_finite() && *s > 0.0 => Ok(()),
            Scale::Tensor(s) => Err(Error::validation(format!("scale must be positive and finite, got {s}"))),
            Scale::Channel(c) if c.len() == cols => Ok(()),
            Scale::Channel(c) => Err(Error::shape(format!(
                "{} channel scales for a tensor with {cols} channels",
                c.len()
            ))),
        }
    }

    #[inline]
    fn at(&self, col: usize) -> f64 {
        match self {
            Scale::Tensor(s) => *s,
            Scale::Channel(c) => c.0[col],
        }
    }
}

/// Saturation and underflow counts of one quantization.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct QuantStats {
    pub saturations: u64,
    pub underflows: u64,
}

impl QuantStats {
    pub fn merge(&mut self, other: QuantStats) {
        self.saturations += other.saturations;
        self.underflows += other.underflows;
    }
}

/// Quantized payload plus the scale used to produce it.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaledTensor {
    pub codes: Vec<u16>,
    pub scale: Scale,
    pub format: Format,
    pub shape: Vec<usize>,
    pub stats: QuantStats,
}

impl ScaledTensor {
    pub fn dequantize(&self) -> Tensor {
        let spec = self.format.spec();
        let cols = *self.shape.last().unwrap_or(&1);
        let data = self
            .codes
            .iter()
            .enumerate()
            .map(|(i, &c)| spec.decode_bits(c) / self.scale.at(i % cols.max(1)))
            .collect();
        Tensor::from_vec(self.shape.clone(), data).expect("shape preserved")
    }
}

fn columns(t: &Tensor) -> usize {
    t.shape().last().copied().unwrap_or(1).max(1)
}

/// Encode `scale * x` for every element under saturating RNE.
pub fn quantize(t: &Tensor, scale: &Scale, format: Format) -> Result<ScaledTensor> {
    let cols = columns(t);
    scale.validate(cols)?;
    let spec = format.spec();
    let mut stats = QuantStats::default();
    let mut codes = Vec::with_capacity(t.len());
    for (i, &x) in t.data().iter().enumerate() {
        let (bits, sat, under) = spec.encode_counted(scale.at(i % cols) * x, OverflowMode::Saturate);
        stats.saturations += sat as u64;
        stats.underflows += (under && x != 0.0) as u64;
        codes.push(bits);
    }
    Ok(ScaledTensor { codes, scale: scale.clone(), format, shape: t.shape().to_vec(), stats })
}

/// `dequantize(quantize(t))` without materializing codes.
pub fn fake_quantize(t: &Tensor, scale: &Scale, format: Format) -> Result<(Tensor, QuantStats)> {
    let cols = columns(t);
    scale.validate(cols)?;
    let spec = format.spec();
    let mut stats = QuantStats::default();
    let data = t
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let s = scale.at(i % cols);
            let r = spec.round_counted(s * x, OverflowMode::Saturate);
            stats.saturations += r.saturated as u64;
            stats.underflows += (r.underflowed && x != 0.0) as u64;
            r.value / s
        })
        .collect();
    Ok((Tensor::from_vec(t.shape().to_vec(), data)?, stats))
}

/// Where a quantization site gets its per-tensor scale.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScalingMode {
    JustInTime,
    Delayed,
}

/// Statistics of the most recent pass through a quantization site.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SiteStats {
    /// amax before quantization.
    pub amax_pre: f64,
    /// amax of the dequantized result.
    pub amax_post: f64,
    pub scale: f64,
    pub stats: QuantStats,
}

/// A per-tensor quantization point inside a layer, e.g. "activation input of
/// w3". Owns the amax history when delayed scaling is used.
#[derive(Clone, Debug, PartialEq)]
pub enum QuantSite {
    Identity,
    /// Plain cast with scale 1 (BF16 emulation).
    Cast(Format),
    Scaled { format: Format, mode: ScalingMode, margin: f64, history: AmaxHistory },
}

impl QuantSite {
    pub fn scaled(format: Format, mode: ScalingMode, margin: f64, history_len: usize, reduction: Reduction) -> Result<Self> {
        check_margin(margin)?;
        Ok(QuantSite::Scaled { format, mode, margin, history: AmaxHistory::new(history_len, reduction)? })
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, QuantSite::Identity)
    }

    /// Scale the next call would use for a tensor with the given amax.
    fn scale_for(&self, current_amax: f64) -> Result<f64> {
        match self {
            QuantSite::Identity | QuantSite::Cast(_) => Ok(1.0),
            QuantSite::Scaled { format, mode, margin, history } => match mode {
                ScalingMode::JustInTime => Ok(scale_for_amax(current_amax, *format, *margin)),
                // First iteration: no history yet, so seed with a just-in-time pass.
                ScalingMode::Delayed if history.is_empty() => Ok(scale_for_amax(current_amax, *format, *margin)),
                ScalingMode::Delayed => delayed_scale(history, *format, *margin),
            },
        }
    }

    /// Quantize-dequantize `t`, advancing the amax history.
    pub fn apply(&mut self, t: &Tensor) -> Result<(Tensor, SiteStats)> {
        let amax_pre = amax(t.data())?;
        let scale = self.scale_for(amax_pre)?;
        let (out, stats) = match self {
            QuantSite::Identity => (t.clone(), QuantStats::default()),
            QuantSite::Cast(format) => fake_quantize(t, &Scale::Tensor(1.0), *format)?,
            QuantSite::Scaled { format, .. } => fake_quantize(t, &Scale::Tensor(scale), *format)?,
        };
        if let QuantSite::Scaled { history, .. } = self {
            history.record(amax_pre)?;
        }
        let amax_post = out.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        Ok((out, SiteStats { amax_pre, amax_post, scale, stats }))
    }

    pub fn history(&self) -> Option<&AmaxHistory> {
        match self {
            QuantSite::Scaled { history, .. } => Some(history),
            _ => None,
        }
    }

    pub fn history_mut(&mut self) -> Option<&mut AmaxHistory> {
        match self {
            QuantSite::Scaled { history, .. } => Some(history),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const M: f64 = 448.0;

    #[test]
    fn history_basics() {
        let h = AmaxHistory::new(4, Reduction::Max).unwrap().updated(3.0).unwrap();
        assert_eq!(h.values().collect::<Vec<_>>(), vec![3.0]);

        let mut h = AmaxHistory::new(2, Reduction::Max).unwrap();
        h.record(1.0).unwrap();
        h.record(2.0).unwrap();
        h.record(5.0).unwrap();
        assert_eq!(h.values().collect::<Vec<_>>(), vec![2.0, 5.0]);

        let mut h = AmaxHistory::new(8, Reduction::Max).unwrap();
        for a in [100.0, 200.0, 150.0] {
            h.record(a).unwrap();
        }
        assert_eq!(h.effective_amax(), Some(200.0));
        let mut recent = AmaxHistory::new(8, Reduction::MostRecent).unwrap();
        for a in [100.0, 200.0, 150.0] {
            recent.record(a).unwrap();
        }
        assert_eq!(recent.effective_amax(), Some(150.0));
    }

    #[test]
    fn history_rejects_bad_amax() {
        let mut h = AmaxHistory::default();
        assert!(h.record(-1.0).is_err());
        assert!(h.record(f64::NAN).is_err());
        assert!(h.record(f64::INFINITY).is_err());
        assert!(h.is_empty());
        assert!(AmaxHistory::new(0, Reduction::Max).is_err());
    }

    #[test]
    fn delayed_scale_cases() {
        let empty = AmaxHistory::default();
        assert!(delayed_scale(&empty, Format::E4M3, 1.0).is_err());

        let h = AmaxHistory::default().updated(M).unwrap();
        assert_eq!(delayed_scale(&h, Format::E4M3, 1.0).unwrap(), 1.0);
        let h = AmaxHistory::default().updated(0.0).unwrap();
        assert_eq!(delayed_scale(&h, Format::E4M3, 1.0).unwrap(), 1.0);
        let h = AmaxHistory::default().updated(200.0).unwrap();
        assert_eq!(delayed_scale(&h, Format::E4M3, 1.0).unwrap(), M / 200.0);
        assert!(delayed_scale(&h, Format::E4M3, 0.0).is_err());
        assert!(delayed_scale(&h, Format::E4M3, 1.5).is_err());
    }

    #[test]
    fn jit_scale_cases() {
        assert_eq!(jit_scale(&[0.0; 5], Format::E4M3, 1.0).unwrap(), 1.0);
        assert_eq!(jit_scale(&[1.0, -M], Format::E4M3, 1.0).unwrap(), 1.0);
        assert_eq!(jit_scale(&[2.0 * M, 3.0], Format::E4M3, 1.0).unwrap(), 0.5);
        assert!(jit_scale(&[1.0, f64::NAN], Format::E4M3, 1.0).is_err());
    }

    #[test]
    fn per_channel_cases() {
        let z = Tensor::zeros(vec![3, 4]);
        assert_eq!(per_channel_scales(&z, Format::E4M3, 1.0).unwrap().as_slice(), &[1.0; 4]);
        let one = Tensor::from_vec(vec![2, 1], vec![-M, 3.0]).unwrap();
        assert_eq!(per_channel_scales(&one, Format::E4M3, 1.0).unwrap().as_slice(), &[1.0]);
        let two = Tensor::from_vec(vec![2, 2], vec![M, 1.0, -3.0, -2.0 * M]).unwrap();
        assert_eq!(per_channel_scales(&two, Format::E4M3, 1.0).unwrap().as_slice(), &[1.0, 0.5]);
        let bad = Tensor::from_vec(vec![1, 2], vec![1.0, f64::INFINITY]).unwrap();
        assert!(per_channel_scales(&bad, Format::E4M3, 1.0).is_err());
    }

    #[test]
    fn quantize_counts_saturation() {
        let z = Tensor::zeros(vec![2, 3]);
        let q = quantize(&z, &Scale::Tensor(1.0), Format::E4M3).unwrap();
        assert!(q.codes.iter().all(|&c| c == 0));
        assert_eq!(q.stats.saturations, 0);

        let t = Tensor::from_vec(vec![1, 3], vec![1.0, 10.0 * M, -2.0]).unwrap();
        let q = quantize(&t, &Scale::Tensor(1.0), Format::E4M3).unwrap();
        assert_eq!(q.stats.saturations, 1);
        assert_eq!(q.dequantize().data(), &[1.0, M, -2.0]);

        let s = jit_scale(t.data(), Format::E4M3, 1.0).unwrap();
        let q = quantize(&t, &Scale::Tensor(s), Format::E4M3).unwrap();
        assert_eq!(q.stats.saturations, 0);

        assert!(quantize(&t, &Scale::Tensor(0.0), Format::E4M3).is_err());
        assert!(quantize(&t, &Scale::Channel(ChannelScales::ones(2)), Format::E4M3).is_err());
    }

    #[test]
    fn underflow_counted_only_for_nonzero() {
        let t = Tensor::from_vec(vec![1, 3], vec![0.0, 1e-6, 1.0]).unwrap();
        let q = quantize(&t, &Scale::Tensor(1.0), Format::E4M3).unwrap();
        assert_eq!(q.stats.underflows, 1);
    }

    #[test]
    fn delayed_site_seeds_then_lags() {
        let mut site = QuantSite::scaled(Format::E4M3, ScalingMode::Delayed, 1.0, 4, Reduction::Max).unwrap();
        let small = Tensor::from_vec(vec![1, 2], vec![1.0, -2.0]).unwrap();
        let (_, s0) = site.apply(&small).unwrap();
        assert_eq!(s0.scale, M / 2.0);
        assert_eq!(s0.stats.saturations, 0);
        // A 100x spike is quantized with the stale scale and saturates.
        let spike = Tensor::from_vec(vec![1, 2], vec![200.0, -2.0]).unwrap();
        let (out, s1) = site.apply(&spike).unwrap();
        assert_eq!(s1.scale, M / 2.0);
        assert_eq!(s1.stats.saturations, 1);
        assert_eq!(out.data()[0], 2.0);
        assert_eq!(site.history().unwrap().effective_amax(), Some(200.0));
    }

    #[test]
    fn channel_scales_validate() {
        assert!(ChannelScales::new(vec![1.0, 0.0]).is_err());
        assert!(ChannelScales::new(vec![1.0, f64::NAN]).is_err());
        let c = ChannelScales::new(vec![1e-40, 1e40]).unwrap().clamped(2f64.powi(-30), 2f64.powi(30));
        assert_eq!(c.as_slice(), &[2f64.powi(-30), 2f64.powi(30)]);
    }
}
