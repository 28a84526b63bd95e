//! Linear layers with emulated low-precision inputs and weights, losses,
//! ℓ2 regularization and a central-difference gradient checker.

use crate::error::{Error, Result};
use crate::numerics::Format;
use crate::scaling::{QuantSite, Reduction, ScalingMode, SiteStats};
use crate::tensor::Tensor;

/// Precision used for one class of tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorPrecision {
    /// Full emulation precision, no rounding.
    Wide,
    /// Plain cast, scale 1 (BF16/FP16 emulation).
    Cast(Format),
    /// Scaled FP8 with the given per-tensor scaling mode.
    Scaled(Format, ScalingMode),
}

/// Settings shared by all quantization sites a layer builds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SiteConfig {
    pub margin: f64,
    pub history_len: usize,
    pub reduction: Reduction,
}

impl Default for SiteConfig {
    fn default() -> Self {
        SiteConfig { margin: 1.0, history_len: crate::scaling::DEFAULT_HISTORY_LEN, reduction: Reduction::Max }
    }
}

impl TensorPrecision {
    pub fn site(self, cfg: &SiteConfig) -> Result<QuantSite> {
        Ok(match self {
            TensorPrecision::Wide => QuantSite::Identity,
            TensorPrecision::Cast(f) => QuantSite::Cast(f),
            TensorPrecision::Scaled(f, mode) => QuantSite::scaled(f, mode, cfg.margin, cfg.history_len, cfg.reduction)?,
        })
    }
}

/// Precision of each tensor class in a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PrecisionPolicy {
    pub weights: TensorPrecision,
    pub activations: TensorPrecision,
    pub gradients: TensorPrecision,
}

impl PrecisionPolicy {
    /// No quantization anywhere.
    pub const WIDE: PrecisionPolicy = PrecisionPolicy {
        weights: TensorPrecision::Wide,
        activations: TensorPrecision::Wide,
        gradients: TensorPrecision::Wide,
    };

    /// E4M3 forward (weights just-in-time, activations delayed) and E5M2
    /// backward with delayed scaling.
    pub const FP8: PrecisionPolicy = PrecisionPolicy {
        weights: TensorPrecision::Scaled(Format::E4M3, ScalingMode::JustInTime),
        activations: TensorPrecision::Scaled(Format::E4M3, ScalingMode::Delayed),
        gradients: TensorPrecision::Scaled(Format::E5M2, ScalingMode::Delayed),
    };

    pub const BF16: PrecisionPolicy = PrecisionPolicy {
        weights: TensorPrecision::Cast(Format::BF16),
        activations: TensorPrecision::Cast(Format::BF16),
        gradients: TensorPrecision::Cast(Format::BF16),
    };
}

/// The layer-level policy names.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantPolicy {
    None,
    Bf16,
    Fp8ForwardE4m3BackwardE5m2,
}

impl QuantPolicy {
    pub fn precision(self) -> PrecisionPolicy {
        match self {
            QuantPolicy::None => PrecisionPolicy::WIDE,
            QuantPolicy::Bf16 => PrecisionPolicy::BF16,
            QuantPolicy::Fp8ForwardE4m3BackwardE5m2 => PrecisionPolicy::FP8,
        }
    }
}

/// Quantization sites of a linear layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearSites {
    pub input: QuantSite,
    pub weight: QuantSite,
    pub grad_output: QuantSite,
}

impl LinearSites {
    pub fn new(policy: &PrecisionPolicy, cfg: &SiteConfig) -> Result<Self> {
        Ok(LinearSites {
            input: policy.activations.site(cfg)?,
            weight: policy.weights.site(cfg)?,
            grad_output: policy.gradients.site(cfg)?,
        })
    }

    pub fn wide() -> Self {
        LinearSites { input: QuantSite::Identity, weight: QuantSite::Identity, grad_output: QuantSite::Identity }
    }
}

/// `y = x · Wᵀ + b` with `W: [out x in]`. Master weights stay in wide
/// precision; quantization happens on use.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearLayer {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub sites: LinearSites,
}

/// Values saved by [`LinearLayer::forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct LinearCache {
    x_q: Tensor,
    w_q: Tensor,
    pub input_stats: SiteStats,
    pub weight_stats: SiteStats,
}

#[derive(Clone, Debug)]
pub struct LinearGrads {
    pub dx: Tensor,
    pub dw: Tensor,
    pub dbias: Option<Vec<f64>>,
    pub grad_stats: SiteStats,
}

impl LinearLayer {
    pub fn new(weight: Tensor, bias: Option<Tensor>, sites: LinearSites) -> Result<Self> {
        let (out, _) = weight.dims2()?;
        if let Some(b) = &bias {
            if b.len() != out {
                return Err(Error::shape(format!("bias of length {} for {out} outputs", b.len())));
            }
        }
        Ok(LinearLayer { weight, bias, sites })
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<(Tensor, LinearCache)> {
        let (_, d) = x.dims2()?;
        if d != self.in_features() {
            return Err(Error::shape(format!("input has {d} features, layer expects {}", self.in_features())));
        }
        let (x_q, input_stats) = self.sites.input.apply(x)?;
        let (w_q, weight_stats) = self.sites.weight.apply(&self.weight)?;
        let mut y = x_q.matmul_nt(&w_q)?;
        if let Some(b) = &self.bias {
            y.add_row_vector(b.data())?;
        }
        Ok((y, LinearCache { x_q, w_q, input_stats, weight_stats }))
    }

    /// Gradients of the forward composition. `dy` passes through the gradient
    /// site once and feeds both matmuls.
    pub fn backward(&mut self, dy: &Tensor, cache: &LinearCache) -> Result<LinearGrads> {
        let (t, o) = dy.dims2()?;
        if o != self.out_features() || t != cache.x_q.shape()[0] {
            return Err(Error::shape(format!("upstream gradient {:?} does not match layer", dy.shape())));
        }
        let (dy_q, grad_stats) = self.sites.grad_output.apply(dy)?;
        let dx = dy_q.matmul(&cache.w_q)?;
        let dw = dy_q.matmul_tn(&cache.x_q)?;
        let dbias = self.bias.as_ref().map(|_| dy_q.sum_rows()).transpose()?;
        Ok(LinearGrads { dx, dw, dbias, grad_stats })
    }
}

/// `0.5 * mean((y - target)^2)` over all elements, and its gradient.
pub fn mse_loss(y: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    let n = y.len() as f64;
    let diff = y.zip_map(target, |a, b| a - b)?;
    let loss = 0.5 * diff.sum_squares() / n;
    Ok((loss, diff.map(|d| d / n)))
}

/// Mean softmax cross-entropy of `[tokens x classes]` logits, and its gradient.
pub fn cross_entropy_loss(logits: &Tensor, targets: &[usize]) -> Result<(f64, Tensor)> {
    let (t, c) = logits.dims2()?;
    if targets.len() != t {
        return Err(Error::shape(format!("{} targets for {t} rows", targets.len())));
    }
    let mut grad = Vec::with_capacity(t * c);
    let mut loss = 0.0;
    for (r, &target) in targets.iter().enumerate() {
        if target >= c {
            return Err(Error::validation(format!("target {target} out of range for {c} classes")));
        }
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[target];
        for (j, v) in row.iter().enumerate() {
            let p = (v - log_z).exp();
            grad.push((p - if j == target { 1.0 } else { 0.0 }) / t as f64);
        }
    }
    Ok((loss / t as f64, Tensor::from_vec(vec![t, c], grad)?))
}

/// Where the ℓ2 term enters the update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum L2Mode {
    /// `(mu/2)·‖w‖²` added to the loss, so `mu·w` joins the gradient.
    #[default]
    Coupled,
    /// Decoupled weight decay applied by the optimizer.
    Decoupled,
}

/// `(mu/2)·Σw²`.
pub fn l2_penalty(params: &[f64], mu: f64) -> f64 {
    0.5 * mu * params.iter().map(|w| w * w).sum::<f64>()
}

/// Add `mu·w` to `grads`.
pub fn l2_penalty_grad(params: &[f64], mu: f64, grads: &mut [f64]) -> Result<()> {
    if !(mu >= 0.0) {
        return Err(Error::validation(format!("regularization strength must be >= 0, got {mu}")));
    }
    if params.len() != grads.len() {
        return Err(Error::shape("parameter and gradient lengths differ"));
    }
    if mu == 0.0 {
        return Ok(());
    }
    for (g, w) in grads.iter_mut().zip(params) {
        *g += mu * w;
    }
    Ok(())
}

/// Relative discrepancy with a small absolute floor so that exact zeros do
/// not blow up the ratio.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compare `analytic` against central differences of `loss` at `params`.
/// Returns the worst relative error. `params` is restored on return.
pub fn grad_check(
    params: &mut [f64],
    analytic: &[f64],
    epsilon: f64,
    mut loss: impl FnMut(&[f64]) -> f64,
) -> Result<f64> {
    if params.len() != analytic.len() {
        return Err(Error::shape("parameter and gradient lengths differ"));
    }
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        let orig = params[i];
        params[i] = orig + epsilon;
        let up = loss(params);
        params[i] = orig - epsilon;
        let down = loss(params);
        params[i] = orig;
        let numeric = (up - down) / (2.0 * epsilon);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}
