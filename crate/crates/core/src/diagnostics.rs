//! Per-layer amax traces, per-channel weight correlation and norms, gate
//! pre-activation histograms, outlier-channel detection and CSV output.

use std::collections::BTreeMap;
use std::io::Write;

use crate::error::{Error, Result};
use crate::tensor::{dot, norm, Tensor};

/// Cosine similarity, 0 when either vector is zero.
pub fn channel_correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Correlation and norms of one SwiGLU channel (`w1`, `w2` column `i`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelStats {
    pub cos_w1w2: f64,
    pub norm_w1: f64,
    pub norm_w2: f64,
}

pub fn channel_stats(w1: &Tensor, w2: &Tensor) -> Result<Vec<ChannelStats>> {
    if w1.shape() != w2.shape() {
        return Err(Error::shape(format!("w1 {:?} vs w2 {:?}", w1.shape(), w2.shape())));
    }
    let (_, h) = w1.dims2()?;
    (0..h)
        .map(|i| {
            let (a, b) = (w1.column(i), w2.column(i));
            Ok(ChannelStats { cos_w1w2: channel_correlation(&a, &b)?, norm_w1: norm(&a), norm_w2: norm(&b) })
        })
        .collect()
}

/// One amax observation; `None` marks a diverged (non-finite) tensor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AmaxSample {
    pub iteration: u64,
    pub amax: Option<f64>,
}

/// Append-only amax time series per layer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AmaxTrace {
    series: BTreeMap<String, Vec<AmaxSample>>,
    diverged: bool,
}

impl AmaxTrace {
    pub fn new() -> Self {
        Self::default()
    }

    /// Record max |x|, or a divergence flag when `x` has a non-finite entry.
    pub fn record_amax(&mut self, layer: &str, iteration: u64, x: &[f64]) -> Option<f64> {
        let amax = if x.iter().all(|v| v.is_finite()) {
            Some(x.iter().fold(0.0f64, |m, v| m.max(v.abs())))
        } else {
            self.diverged = true;
            None
        };
        self.series.entry(layer.to_string()).or_default().push(AmaxSample { iteration, amax });
        amax
    }

    pub fn series(&self, layer: &str) -> &[AmaxSample] {
        self.series.get(layer).map_or(&[], Vec::as_slice)
    }

    pub fn layers(&self) -> impl Iterator<Item = &str> {
        self.series.keys().map(String::as_str)
    }

    pub fn diverged(&self) -> bool {
        self.diverged
    }
}

/// `|w2ᵀx|` per token, binned on a natural-log axis.
#[derive(Clone, Debug, PartialEq)]
pub struct MagnitudeHistogram {
    /// Bin edges in ln units, `counts.len() + 1` of them.
    pub edges: Vec<f64>,
    /// Values below the first edge (including exact zeros) land in bin 0,
    /// values above the last edge in the last bin.
    pub counts: Vec<u64>,
    pub total: u64,
    pub fraction_below_1: f64,
    pub fraction_below_e: f64,
}

pub fn input_magnitude_histogram(x: &Tensor, w2_col: &[f64], ln_min: f64, ln_max: f64, bins: usize) -> Result<MagnitudeHistogram> {
    let (t, d) = x.dims2()?;
    if t == 0 {
        return Err(Error::validation("histogram needs a nonempty batch"));
    }
    if d != w2_col.len() {
        return Err(Error::shape(format!("batch has {d} features, w2 column has {}", w2_col.len())));
    }
    if bins == 0 || !(ln_max > ln_min) {
        return Err(Error::validation(format!("bad histogram range [{ln_min}, {ln_max}] with {bins} bins")));
    }
    let width = (ln_max - ln_min) / bins as f64;
    let edges = (0..=bins).map(|i| ln_min + i as f64 * width).collect();
    let mut counts = vec![0u64; bins];
    let (mut below_1, mut below_e) = (0u64, 0u64);
    for r in 0..t {
        let z = dot(x.row(r), w2_col).abs();
        below_1 += (z < 1.0) as u64;
        below_e += (z < std::f64::consts::E) as u64;
        let l = z.ln();
        let idx = if l.is_nan() || l < ln_min {
            0
        } else {
            (((l - ln_min) / width) as usize).min(bins - 1)
        };
        counts[idx] += 1;
    }
    let n = t as f64;
    Ok(MagnitudeHistogram {
        edges,
        counts,
        total: t as u64,
        fraction_below_1: below_1 as f64 / n,
        fraction_below_e: below_e as f64 / n,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OutlierThresholds {
    pub amax_ratio: f64,
    pub cos: f64,
}

impl Default for OutlierThresholds {
    fn default() -> Self {
        OutlierThresholds { amax_ratio: 10.0, cos: 0.9 }
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Channels whose latest amax exceeds `amax_ratio` times the median of all
/// recorded channel amaxes of the layer and whose `|cos(w1, w2)|` exceeds
/// `cos`. `series[t][i]` is the amax of channel `i` at observation `t`.
pub fn detect_outlier_channels(series: &[Vec<f64>], cos: &[f64], th: OutlierThresholds) -> Result<Vec<usize>> {
    let latest = series.last().ok_or_else(|| Error::validation("empty amax series"))?;
    if latest.len() != cos.len() || series.iter().any(|s| s.len() != cos.len()) {
        return Err(Error::shape(format!("amax series and {} correlations disagree on channel count", cos.len())));
    }
    let mut all: Vec<f64> = series.iter().flatten().copied().collect();
    let med = median(&mut all);
    Ok((0..cos.len())
        .filter(|&i| latest[i] > th.amax_ratio * med && cos[i].abs() > th.cos)
        .collect())
}

/// One row of `diagnostics.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagnosticsRow {
    pub iteration: u64,
    pub layer: String,
    pub tensor: String,
    /// `None` for per-tensor rows.
    pub channel: Option<usize>,
    pub cos_w1w2: Option<f64>,
    pub norm_w1: Option<f64>,
    pub norm_w2: Option<f64>,
    pub amax_pre: Option<f64>,
    pub amax_post: Option<f64>,
    pub scale: Option<f64>,
    pub saturations: Option<u64>,
}

impl DiagnosticsRow {
    pub fn tensor(iteration: u64, layer: &str, tensor: &str) -> Self {
        DiagnosticsRow {
            iteration,
            layer: layer.to_string(),
            tensor: tensor.to_string(),
            channel: None,
            cos_w1w2: None,
            norm_w1: None,
            norm_w2: None,
            amax_pre: None,
            amax_post: None,
            scale: None,
            saturations: None,
        }
    }
}

pub const CSV_HEADER: &str = "iteration,layer,tensor,channel,cos_w1w2,norm_w1,norm_w2,amax_pre,amax_post,scale,saturations";

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Write rows as CSV. Floats use Rust's shortest round-trip formatting, so
/// equal values always produce equal bytes.
pub fn write_csv<W: Write>(mut w: W, rows: &[DiagnosticsRow]) -> Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.iteration,
            r.layer,
            r.tensor,
            opt(r.channel),
            opt(r.cos_w1w2),
            opt(r.norm_w1),
            opt(r.norm_w2),
            opt(r.amax_pre),
            opt(r.amax_post),
            opt(r.scale),
            opt(r.saturations)
        )?;
    }
    Ok(())
}

pub fn write_histogram_csv<W: Write>(mut w: W, h: &MagnitudeHistogram) -> Result<()> {
    writeln!(w, "ln_lo,ln_hi,count")?;
    for (i, c) in h.counts.iter().enumerate() {
        writeln!(w, "{},{},{}", h.edges[i], h.edges[i + 1], c)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn correlation_cases() {
        let a = [1.0, 2.0, -3.0];
        assert!((channel_correlation(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!((channel_correlation(&a, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(channel_correlation(&[1.0, 0.0], &[0.0, 5.0]).unwrap(), 0.0);
        assert_eq!(channel_correlation(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 0.0);
        assert!(channel_correlation(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn amax_recording() {
        let mut tr = AmaxTrace::new();
        assert_eq!(tr.record_amax("l0", 0, &[0.0, 0.0]), Some(0.0));
        assert_eq!(tr.record_amax("l0", 1, &[7.5]), Some(7.5));
        assert_eq!(tr.record_amax("l0", 2, &[1.0, -9.0, 3.0]), Some(9.0));
        assert!(!tr.diverged());
        assert_eq!(tr.record_amax("l1", 2, &[1.0, f64::NAN]), None);
        assert!(tr.diverged());
        assert_eq!(tr.series("l0").len(), 3);
        assert_eq!(tr.series("l1")[0].amax, None);
    }

    #[test]
    fn histogram_cases() {
        let w2 = [1.0, 0.0];
        let ortho = Tensor::from_fn(10, 2, |_, c| if c == 1 { 3.0 } else { 0.0 });
        let h = input_magnitude_histogram(&ortho, &w2, -4.0, 8.0, 24).unwrap();
        assert_eq!(h.fraction_below_1, 1.0);
        assert_eq!(h.total, 10);
        assert_eq!(h.counts.iter().sum::<u64>(), 10);

        let twos = Tensor::from_fn(6, 2, |_, c| if c == 0 { 2.0 } else { 0.0 });
        let h = input_magnitude_histogram(&twos, &w2, -4.0, 8.0, 24).unwrap();
        assert_eq!(h.fraction_below_1, 0.0);
        assert_eq!(h.fraction_below_e, 1.0);
        // ln 2 ≈ 0.693 sits in bin floor((0.693 + 4) / 0.5) = 9.
        assert_eq!(h.counts[9], 6);
        assert!(input_magnitude_histogram(&Tensor::zeros(vec![0, 2]), &w2, 0.0, 1.0, 2).is_err());
    }

    #[test]
    fn outlier_detection() {
        let flat = vec![vec![1.0; 4]; 5];
        assert!(detect_outlier_channels(&flat, &[1.0; 4], OutlierThresholds::default()).unwrap().is_empty());
        let mut spiky = flat.clone();
        spiky.push(vec![1.0, 100.0, 1.0, 100.0]);
        let found = detect_outlier_channels(&spiky, &[0.2, 0.98, 0.95, 0.1], OutlierThresholds::default()).unwrap();
        assert_eq!(found, vec![1]);
        assert!(detect_outlier_channels(&[], &[], OutlierThresholds::default()).is_err());
    }

    #[test]
    fn csv_layout() {
        let mut row = DiagnosticsRow::tensor(3, "block0", "w3_in");
        row.amax_pre = Some(1.5);
        row.saturations = Some(0);
        let mut buf = Vec::new();
        write_csv(&mut buf, &[row]).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s, format!("{CSV_HEADER}\n3,block0,w3_in,,,,,1.5,,,0\n"));
    }
}
