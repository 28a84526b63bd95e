//! SwiGLU, Smooth-SwiGLU and GeLU MLP blocks.
//!
//! Layout: `x: [tokens x d]`, `w1, w2: [d x h]` (channel `i` is column `i`),
//! `w3: [h x d_out]` (channel `i` is row `i`). For each channel
//! `u_i = (x·w1_i) · swish(x·w2_i)` and the block output is `y = u · w3`.
//!
//! Smooth-SwiGLU multiplies each channel of `u` by a scale `s_i` derived
//! from the channel maximum before the w3 input is quantized, and applies
//! `1/s_i` to the matching rows of the (quantized) w3, so with quantization
//! disabled it computes the same function as SwiGLU.

use crate::error::{Error, Result};
use crate::nn::{PrecisionPolicy, SiteConfig, TensorPrecision};
use crate::numerics::Format;
use crate::scaling::{
    channel_amax, fake_quantize, jit_scale, per_channel_scales, quantize, ChannelScales, QuantSite, QuantStats,
    Scale, ScaledTensor, SiteStats,
};
use crate::tensor::Tensor;

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn swish(z: f64) -> f64 {
    z * sigmoid(z)
}

/// d/dz swish(z) = σ(z) + z·σ'(z).
#[inline]
pub fn swish_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s + z * s * (1.0 - s)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GeLU.
#[inline]
pub fn gelu(z: f64) -> f64 {
    0.5 * z * (1.0 + (GELU_C * (z + 0.044715 * z * z * z)).tanh())
}

#[inline]
pub fn gelu_grad(z: f64) -> f64 {
    let inner = GELU_C * (z + 0.044715 * z * z * z);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * z * z)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SwiGluMode {
    /// w3 input quantized per tensor like every other activation.
    Swiglu,
    /// w3 input scaled per channel before quantization.
    SmoothSwiglu,
    /// w3 input kept in BF16, everything else per the policy.
    SwigluOutBf16,
}

/// Lower and upper clamp for Smooth-SwiGLU scales, keeping folded weights finite.
pub const SCALE_CLAMP: (f64, f64) = (9.313_225_746_154_785e-10, 1_073_741_824.0);

/// Smooth-SwiGLU scale settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SmoothSettings {
    /// Format whose `max_normal` the per-channel maxima are mapped to.
    pub scale_format: Format,
    pub margin: f64,
    /// Recompute scales every `refresh_every` forward passes (1 = every step).
    pub refresh_every: usize,
}

impl Default for SmoothSettings {
    fn default() -> Self {
        SmoothSettings { scale_format: Format::E4M3, margin: 1.0, refresh_every: 1 }
    }
}

/// Quantization sites of a SwiGLU block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockSites {
    pub x: QuantSite,
    pub w1: QuantSite,
    pub w2: QuantSite,
    pub w3: QuantSite,
    /// w3 input in the per-tensor modes.
    pub out: QuantSite,
    /// Cast applied after per-channel scaling in smooth mode; `None` = identity.
    pub smooth_cast: Option<Format>,
    pub grad_out: QuantSite,
    pub grad_a1: QuantSite,
    pub grad_a2: QuantSite,
}

impl BlockSites {
    pub fn new(policy: &PrecisionPolicy, mode: SwiGluMode, cfg: &SiteConfig) -> Result<Self> {
        let out = match mode {
            SwiGluMode::SwigluOutBf16 => QuantSite::Cast(Format::BF16),
            _ => policy.activations.site(cfg)?,
        };
        let smooth_cast = match policy.activations {
            TensorPrecision::Wide => None,
            TensorPrecision::Cast(f) | TensorPrecision::Scaled(f, _) => Some(f),
        };
        Ok(BlockSites {
            x: policy.activations.site(cfg)?,
            w1: policy.weights.site(cfg)?,
            w2: policy.weights.site(cfg)?,
            w3: policy.weights.site(cfg)?,
            out,
            smooth_cast,
            grad_out: policy.gradients.site(cfg)?,
            grad_a1: policy.gradients.site(cfg)?,
            grad_a2: policy.gradients.site(cfg)?,
        })
    }

    pub fn wide() -> Self {
        BlockSites::new(&PrecisionPolicy::WIDE, SwiGluMode::Swiglu, &SiteConfig::default()).expect("wide sites")
    }

    /// All delayed-scaling sites with their names, for checkpointing.
    pub fn named_sites_mut(&mut self) -> Vec<(&'static str, &mut QuantSite)> {
        vec![
            ("x", &mut self.x),
            ("w1", &mut self.w1),
            ("w2", &mut self.w2),
            ("w3", &mut self.w3),
            ("out", &mut self.out),
            ("grad_out", &mut self.grad_out),
            ("grad_a1", &mut self.grad_a1),
            ("grad_a2", &mut self.grad_a2),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SwiGluBlock {
    pub w1: Tensor,
    pub w2: Tensor,
    pub w3: Tensor,
    pub mode: SwiGluMode,
    pub channel_scales: Option<ChannelScales>,
    pub smooth: SmoothSettings,
    pub sites: BlockSites,
    forwards: usize,
    spike: Option<f64>,
}

/// Saved activations of the gated part.
#[derive(Clone, Debug)]
pub struct SwiGluCache {
    x_q: Tensor,
    w1_q: Tensor,
    w2_q: Tensor,
    a1: Tensor,
    a2: Tensor,
    /// σ(a2), shared by forward and backward.
    sig: Vec<f64>,
    pub x_stats: SiteStats,
}

/// Per-channel-scaled w3 input of a smooth forward.
#[derive(Clone, Debug)]
pub struct SmoothOutput {
    /// Quantized `s ⊙ u`, still in the scaled domain.
    pub v_q: Tensor,
    pub scales: ChannelScales,
    pub stats: QuantStats,
}

/// Everything the block backward needs, plus what diagnostics read.
#[derive(Clone, Debug)]
pub struct BlockCache {
    pub gate: SwiGluCache,
    /// Raw SwiGLU output before any w3-input quantization.
    pub u: Tensor,
    /// The w3 matmul input as used (scaled domain in smooth mode).
    w3_in: Tensor,
    w3_q: Tensor,
    /// Smooth scales, if the forward ran in smooth mode.
    pub scales: Option<ChannelScales>,
    /// Stats of the w3-input quantizer.
    pub out_stats: SiteStats,
}

#[derive(Clone, Debug)]
pub struct BlockGrads {
    pub dx: Tensor,
    pub dw1: Tensor,
    pub dw2: Tensor,
    pub dw3: Tensor,
}

impl SwiGluBlock {
    pub fn new(w1: Tensor, w2: Tensor, w3: Tensor, mode: SwiGluMode, sites: BlockSites) -> Result<Self> {
        if w1.shape() != w2.shape() {
            return Err(Error::shape(format!("w1 {:?} and w2 {:?} differ", w1.shape(), w2.shape())));
        }
        let (_, h) = w1.dims2()?;
        let (h3, _) = w3.dims2()?;
        if h3 != h {
            return Err(Error::shape(format!("w3 has {h3} input channels, expected {h}")));
        }
        Ok(SwiGluBlock { w1, w2, w3, mode, channel_scales: None, smooth: SmoothSettings::default(), sites, forwards: 0, spike: None })
    }

    /// Wide precision, plain SwiGLU.
    pub fn wide(w1: Tensor, w2: Tensor, w3: Tensor) -> Result<Self> {
        SwiGluBlock::new(w1, w2, w3, SwiGluMode::Swiglu, BlockSites::wide())
    }

    pub fn with_smooth(mut self, smooth: SmoothSettings) -> Self {
        self.smooth = smooth;
        self
    }

    pub fn input_dim(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn hidden(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.w3.shape()[1]
    }

    /// Gated part: quantizes x, w1, w2 and returns the raw SwiGLU output `u`.
    pub fn swiglu_forward(&mut self, x: &Tensor) -> Result<(Tensor, SwiGluCache)> {
        let (_, d) = x.dims2()?;
        if d != self.input_dim() {
            return Err(Error::shape(format!("input has {d} features, block expects {}", self.input_dim())));
        }
        let (x_q, x_stats) = self.sites.x.apply(x)?;
        let (w1_q, _) = self.sites.w1.apply(&self.w1)?;
        let (w2_q, _) = self.sites.w2.apply(&self.w2)?;
        let a1 = x_q.matmul(&w1_q)?;
        let a2 = x_q.matmul(&w2_q)?;
        let sig: Vec<f64> = a2.data().iter().map(|&g| sigmoid(g)).collect();
        let u_data = a1.data().iter().zip(a2.data()).zip(&sig).map(|((p, g), s)| p * (g * s)).collect();
        let mut u = Tensor::from_vec(a1.shape().to_vec(), u_data)?;
        if let Some(k) = self.spike.take() {
            let data = u.data_mut();
            let i = (0..data.len()).fold(0, |b, i| if data[i].abs() > data[b].abs() { i } else { b });
            if let Some(v) = data.get_mut(i) {
                *v *= k;
            }
        }
        self.forwards += 1;
        Ok((u, SwiGluCache { x_q, w1_q, w2_q, a1, a2, sig, x_stats }))
    }

    /// Current smooth scales, recomputing them from `u` when due. Scales set
    /// by the caller are kept until the next refresh.
    fn smooth_scales(&mut self, u: &Tensor) -> Result<ChannelScales> {
        let refresh = self.smooth.refresh_every.max(1);
        // Index of the current pass; swiglu_forward has already counted it.
        let n = self.forwards - 1;
        let due = self.channel_scales.is_none() || (n > 0 && n % refresh == 0);
        if due {
            let s = per_channel_scales(u, self.smooth.scale_format, self.smooth.margin)?
                .clamped(SCALE_CLAMP.0, SCALE_CLAMP.1);
            self.channel_scales = Some(s);
        }
        Ok(self.channel_scales.clone().expect("set above"))
    }

    /// Gated part plus per-channel scaling and quantization of `s ⊙ u`.
    pub fn smooth_swiglu_forward(&mut self, x: &Tensor) -> Result<(SmoothOutput, Tensor, SwiGluCache)> {
        let (u, cache) = self.swiglu_forward(x)?;
        let scales = self.smooth_scales(&u)?;
        let (v_q, stats) = match self.sites.smooth_cast {
            Some(f) => {
                let v = u.scale_columns(scales.as_slice())?;
                fake_quantize(&v, &Scale::Tensor(1.0), f)?
            }
            None => (u.scale_columns(scales.as_slice())?, QuantStats::default()),
        };
        Ok((SmoothOutput { v_q, scales, stats }, u, cache))
    }

    /// Full block forward `y = Q(u) · w3`.
    pub fn forward(&mut self, x: &Tensor) -> Result<(Tensor, BlockCache)> {
        let (w3_q, _) = self.sites.w3.apply(&self.w3)?;
        let out = match self.mode {
            SwiGluMode::Swiglu | SwiGluMode::SwigluOutBf16 => {
                let (u, gate) = self.swiglu_forward(x)?;
                let (u_q, out_stats) = self.sites.out.apply(&u)?;
                let y = u_q.matmul(&w3_q)?;
                (y, BlockCache { gate, u, w3_in: u_q, w3_q, scales: None, out_stats })
            }
            SwiGluMode::SmoothSwiglu => {
                let (smooth, u, gate) = self.smooth_swiglu_forward(x)?;
                let inv: Vec<f64> = smooth.scales.as_slice().iter().map(|s| 1.0 / s).collect();
                // 1/s folded into the w3 rows instead of a separate pass over v.
                let w3_eff = w3_q.scale_rows(&inv)?;
                let y = smooth.v_q.matmul(&w3_eff)?;
                let out_stats = SiteStats {
                    amax_pre: u.amax(),
                    amax_post: smooth.v_q.amax(),
                    scale: 1.0,
                    stats: smooth.stats,
                };
                (y, BlockCache { gate, u, w3_in: smooth.v_q, w3_q, scales: Some(smooth.scales), out_stats })
            }
        };
        Ok(out)
    }

    /// Backward through the gated part: returns `(dx, dw1, dw2)` for `du`.
    pub fn swiglu_backward(&mut self, du: &Tensor, cache: &SwiGluCache) -> Result<(Tensor, Tensor, Tensor)> {
        if du.shape() != cache.a1.shape() {
            return Err(Error::shape(format!("du {:?} does not match saved state {:?}", du.shape(), cache.a1.shape())));
        }
        let mut da1 = Vec::with_capacity(du.len());
        let mut da2 = Vec::with_capacity(du.len());
        for (((&g, &p), &z), &s) in du.data().iter().zip(cache.a1.data()).zip(cache.a2.data()).zip(&cache.sig) {
            da1.push(g * (z * s));
            da2.push(g * p * (s + z * s * (1.0 - s)));
        }
        let shape = du.shape().to_vec();
        let (da1, _) = self.sites.grad_a1.apply(&Tensor::from_vec(shape.clone(), da1)?)?;
        let (da2, _) = self.sites.grad_a2.apply(&Tensor::from_vec(shape, da2)?)?;
        let dw1 = cache.x_q.matmul_tn(&da1)?;
        let dw2 = cache.x_q.matmul_tn(&da2)?;
        let mut dx = da1.matmul_nt(&cache.w1_q)?;
        dx.add_assign(&da2.matmul_nt(&cache.w2_q)?)?;
        Ok((dx, dw1, dw2))
    }

    /// Full block backward. The w3-input quantizer is treated as identity
    /// (straight-through).
    pub fn backward(&mut self, dy: &Tensor, cache: &BlockCache) -> Result<BlockGrads> {
        let (t, o) = dy.dims2()?;
        if o != self.output_dim() || t != cache.u.shape()[0] {
            return Err(Error::shape(format!("upstream gradient {:?} does not match block", dy.shape())));
        }
        let (dy_q, _) = self.sites.grad_out.apply(dy)?;
        let dw3 = match &cache.scales {
            None => cache.w3_in.matmul_tn(&dy_q)?,
            Some(s) => {
                let inv: Vec<f64> = s.as_slice().iter().map(|v| 1.0 / v).collect();
                cache.w3_in.matmul_tn(&dy_q)?.scale_rows(&inv)?
            }
        };
        // Smooth mode: du = s ⊙ (dy · (w3/s)ᵀ) = dy · w3ᵀ.
        let du = dy_q.matmul_nt(&cache.w3_q)?;
        let (dx, dw1, dw2) = self.swiglu_backward(&du, &cache.gate)?;
        Ok(BlockGrads { dx, dw1, dw2, dw3 })
    }

    /// Per-channel maxima of the raw SwiGLU output on a batch.
    pub fn channel_maxima(u: &Tensor) -> Result<Vec<f64>> {
        channel_amax(u)
    }

    pub fn forward_count(&self) -> usize {
        self.forwards
    }

    /// Restore the pass counter, e.g. when resuming from a checkpoint.
    pub fn set_forward_count(&mut self, n: usize) {
        self.forwards = n;
    }

    /// Multiply the largest-magnitude element of the next SwiGLU output by
    /// `factor`. The backward pass does not see the perturbation.
    pub fn arm_spike(&mut self, factor: f64) {
        self.spike = Some(factor);
    }
}

/// Inference weights with the smooth scales absorbed into w1 and w3.
#[derive(Clone, Debug)]
pub struct FoldedBlock {
    /// `Q(s ⊙ w1)` (columns scaled, per-column quantization scales), dequantized.
    pub w1: Tensor,
    /// `Q(w2)`, dequantized.
    pub w2: Tensor,
    /// `Q(s⁻¹ ⊙ w3)` (rows scaled), dequantized.
    pub w3: Tensor,
    /// Encoded payloads when a format was given.
    pub w1_q: Option<ScaledTensor>,
    pub w2_q: Option<ScaledTensor>,
    pub w3_q: Option<ScaledTensor>,
    /// Format of the inference-time casts; `None` = no quantization.
    pub format: Option<Format>,
}

fn quantize_jit(t: &Tensor, format: Format, margin: f64) -> Result<(Tensor, ScaledTensor)> {
    let s = jit_scale(t.data(), format, margin)?;
    let q = quantize(t, &Scale::Tensor(s), format)?;
    Ok((q.dequantize(), q))
}

fn site_margin(site: &QuantSite) -> f64 {
    match site {
        QuantSite::Scaled { margin, .. } => *margin,
        _ => 1.0,
    }
}

/// Absorb the smooth scales into w1 (columns) and w3 (rows).
///
/// With a `format`, `s ⊙ w1` is quantized with column scales `σ/sᵢ`, where
/// `σ` is the just-in-time tensor scale the runtime path uses for w1. Its
/// codes are then the runtime codes of w1, so folding adds no rounding on
/// the gated path. `w2` and `s⁻¹ ⊙ w3` get plain per-tensor scales.
pub fn fold_scales(block: &SwiGluBlock, format: Option<Format>) -> Result<FoldedBlock> {
    let scales = block
        .channel_scales
        .as_ref()
        .ok_or_else(|| Error::validation("fold_scales needs a smooth block with computed channel scales"))?;
    if scales.len() != block.hidden() {
        return Err(Error::shape(format!("{} scales for {} channels", scales.len(), block.hidden())));
    }
    let inv: Vec<f64> = scales.as_slice().iter().map(|s| 1.0 / s).collect();
    let w1 = block.w1.scale_columns(scales.as_slice())?;
    let w3 = block.w3.scale_rows(&inv)?;
    if !w1.all_finite() || !w3.all_finite() {
        return Err(Error::NonFinite("folded weights overflowed; re-derive the channel scales".into()));
    }
    Ok(match format {
        None => FoldedBlock { w1, w2: block.w2.clone(), w3, w1_q: None, w2_q: None, w3_q: None, format },
        Some(f) => {
            let sigma = jit_scale(block.w1.data(), f, site_margin(&block.sites.w1))?;
            let col: Vec<f64> = scales.as_slice().iter().map(|s| sigma / s).collect();
            let w1q = quantize(&w1, &Scale::Channel(ChannelScales::new(col)?), f)?;
            let (w2d, w2q) = quantize_jit(&block.w2, f, site_margin(&block.sites.w2))?;
            let (w3d, w3q) = quantize_jit(&w3, f, site_margin(&block.sites.w3))?;
            FoldedBlock { w1: w1q.dequantize(), w2: w2d, w3: w3d, w1_q: Some(w1q), w2_q: Some(w2q), w3_q: Some(w3q), format }
        }
    })
}

/// Output of [`FoldedBlock::forward`] with its intermediates.
#[derive(Clone, Debug)]
pub struct FoldedForward {
    pub x_q: Tensor,
    /// Raw gated output computed with the folded w1 (already in the scaled domain).
    pub u: Tensor,
    /// `u` after the plain cast, i.e. the w3 input.
    pub u_q: Tensor,
    pub y: Tensor,
    pub stats: QuantStats,
}

impl FoldedBlock {
    /// Inference with no runtime scaling: the w3 input is cast with scale 1.
    pub fn forward(&self, x: &Tensor) -> Result<FoldedForward> {
        let x_q = match self.format {
            Some(f) => quantize_jit(x, f, 1.0)?.0,
            None => x.clone(),
        };
        let a1 = x_q.matmul(&self.w1)?;
        let a2 = x_q.matmul(&self.w2)?;
        let u = a1.zip_map(&a2, |p, g| p * swish(g))?;
        let (u_q, stats) = match self.format {
            Some(f) => fake_quantize(&u, &Scale::Tensor(1.0), f)?,
            None => (u.clone(), QuantStats::default()),
        };
        let y = u_q.matmul(&self.w3)?;
        Ok(FoldedForward { x_q, u, u_q, y, stats })
    }
}

/// Two-matrix MLP with GeLU: `y = Q(gelu(x·wa)) · wb`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeluBlock {
    pub wa: Tensor,
    pub wb: Tensor,
    pub sites: GeluSites,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeluSites {
    pub x: QuantSite,
    pub wa: QuantSite,
    pub wb: QuantSite,
    pub hidden: QuantSite,
    pub grad_out: QuantSite,
    pub grad_hidden: QuantSite,
}

impl GeluSites {
    pub fn new(policy: &PrecisionPolicy, cfg: &SiteConfig) -> Result<Self> {
        Ok(GeluSites {
            x: policy.activations.site(cfg)?,
            wa: policy.weights.site(cfg)?,
            wb: policy.weights.site(cfg)?,
            hidden: policy.activations.site(cfg)?,
            grad_out: policy.gradients.site(cfg)?,
            grad_hidden: policy.gradients.site(cfg)?,
        })
    }

    pub fn named_sites_mut(&mut self) -> Vec<(&'static str, &mut QuantSite)> {
        vec![
            ("x", &mut self.x),
            ("wa", &mut self.wa),
            ("wb", &mut self.wb),
            ("hidden", &mut self.hidden),
            ("grad_out", &mut self.grad_out),
            ("grad_hidden", &mut self.grad_hidden),
        ]
    }
}

#[derive(Clone, Debug)]
pub struct GeluCache {
    x_q: Tensor,
    wa_q: Tensor,
    wb_q: Tensor,
    pre: Tensor,
    pub hidden_q: Tensor,
    pub hidden_stats: SiteStats,
}

impl GeluBlock {
    pub fn new(wa: Tensor, wb: Tensor, sites: GeluSites) -> Result<Self> {
        let (_, h) = wa.dims2()?;
        let (hb, _) = wb.dims2()?;
        if h != hb {
            return Err(Error::shape(format!("wa has {h} outputs but wb expects {hb}")));
        }
        Ok(GeluBlock { wa, wb, sites })
    }

    pub fn wide(wa: Tensor, wb: Tensor) -> Result<Self> {
        GeluBlock::new(wa, wb, GeluSites::new(&PrecisionPolicy::WIDE, &SiteConfig::default())?)
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<(Tensor, GeluCache)> {
        let (_, d) = x.dims2()?;
        if d != self.wa.shape()[0] {
            return Err(Error::shape(format!("input has {d} features, block expects {}", self.wa.shape()[0])));
        }
        let (x_q, _) = self.sites.x.apply(x)?;
        let (wa_q, _) = self.sites.wa.apply(&self.wa)?;
        let (wb_q, _) = self.sites.wb.apply(&self.wb)?;
        let pre = x_q.matmul(&wa_q)?;
        let (hidden_q, hidden_stats) = self.sites.hidden.apply(&pre.map(gelu))?;
        let y = hidden_q.matmul(&wb_q)?;
        Ok((y, GeluCache { x_q, wa_q, wb_q, pre, hidden_q, hidden_stats }))
    }

    /// Returns `(dx, dwa, dwb)`.
    pub fn backward(&mut self, dy: &Tensor, cache: &GeluCache) -> Result<(Tensor, Tensor, Tensor)> {
        let (t, o) = dy.dims2()?;
        if o != self.wb.shape()[1] || t != cache.pre.shape()[0] {
            return Err(Error::shape(format!("upstream gradient {:?} does not match block", dy.shape())));
        }
        let (dy_q, _) = self.sites.grad_out.apply(dy)?;
        let dwb = cache.hidden_q.matmul_tn(&dy_q)?;
        let dh = dy_q.matmul_nt(&cache.wb_q)?;
        let dpre = dh.zip_map(&cache.pre, |g, z| g * gelu_grad(z))?;
        let (dpre, _) = self.sites.grad_hidden.apply(&dpre)?;
        let dwa = cache.x_q.matmul_tn(&dpre)?;
        let dx = dpre.matmul_nt(&cache.wa_q)?;
        Ok((dx, dwa, dwb))
    }
}
