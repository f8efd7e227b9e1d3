//! Per-filter weight quantizers and their straight-through gradients.
//!
//! Every quantizer works on one flattened output filter `W[i, :]` of length
//! `d = C_in * K_h * K_w` and never looks at other filters. Quantization is
//! simulated in `f64`: callers keep the real-valued master weights and only
//! use the returned values in the forward pass.
//!
//! | bits  | scheme                                                     |
//! |-------|------------------------------------------------------------|
//! | none  | identity                                                   |
//! | 1     | `sign(w) * mean|w|`                                        |
//! | 2     | ternary `{-s, 0, +s}`, `s = mean|w|`, cutoff `0.7 * s`     |
//! | 3..=8 | symmetric uniform grid, clip `a = mean|w| / c`             |

use serde::{Deserialize, Serialize};

use crate::calib::CalibTable;
use crate::error::{Error, Result};

/// Default ternary cutoff as a fraction of `mean|w|`.
pub const DEFAULT_TERNARY_THRESHOLD: f64 = 0.7;

/// A validated, non-empty row of finite weights belonging to one output filter.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterRow(Vec<f64>);

impl FilterRow {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_row(&values)?;
        Ok(Self(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for FilterRow {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl std::ops::Deref for FilterRow {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

fn check_row(row: &[f64]) -> Result<()> {
    if row.is_empty() {
        return Err(Error::EmptyFilter);
    }
    if let Some(idx) = row.iter().position(|w| !w.is_finite()) {
        return Err(Error::NonFiniteWeight(idx));
    }
    Ok(())
}

/// Rounding rule for the nearest-integer operator of the uniform quantizer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TieBreak {
    #[default]
    HalfAwayFromZero,
}

impl TieBreak {
    #[inline]
    pub fn round(self, x: f64) -> f64 {
        match self {
            // f64::round rounds halfway cases away from zero.
            TieBreak::HalfAwayFromZero => x.round(),
        }
    }
}

/// How the ternary mask compares a weight against the cutoff.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TernaryMask {
    /// Zero the weight when `|w| < cutoff`.
    #[default]
    Magnitude,
    /// Zero the weight when `w < cutoff` (signed comparison). Every negative
    /// weight is dropped; kept only for comparison runs.
    Signed,
}

/// `sign` with `sign(0) = +1`.
#[inline]
pub fn sign(w: f64) -> f64 {
    if w < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// Mean absolute value of a filter row.
pub fn mean_abs(row: &[f64]) -> Result<f64> {
    check_row(row)?;
    Ok(mean_abs_unchecked(row))
}

#[inline]
pub(crate) fn mean_abs_unchecked(row: &[f64]) -> f64 {
    row.iter().map(|w| w.abs()).sum::<f64>() / row.len() as f64
}

/// Largest grid index of a symmetric `bits`-bit quantizer: `2^(bits-1) - 1`.
pub fn max_level(bits: u8) -> u32 {
    (1u32 << (bits - 1)) - 1
}

/// Grid spacing `r = a / (2^(b-1) - 1)`.
pub fn uniform_step(bits: u8, clip: f64) -> f64 {
    clip / max_level(bits) as f64
}

fn check_uniform(bits: u8, clip: f64) -> Result<()> {
    if bits < 3 {
        return Err(Error::WrongScheme(bits));
    }
    if bits > 16 {
        return Err(Error::UnsupportedBitwidth(bits));
    }
    if !(clip > 0.0 && clip.is_finite()) {
        return Err(Error::InvalidClip(clip));
    }
    Ok(())
}

/// Symmetric uniform quantizer: `round(clamp(w, -a, a) / r) * r`.
pub fn quantize_uniform(row: &[f64], bits: u8, clip: f64, tie_break: TieBreak) -> Result<Vec<f64>> {
    check_uniform(bits, clip)?;
    check_row(row)?;
    let mut out = row.to_vec();
    uniform_in_place(&mut out, bits, clip, tie_break);
    Ok(out)
}

/// Same as [`quantize_uniform`] on a single scalar; no validation.
/// `inv_step` is `levels / clip` and `step` is `clip / levels`.
#[inline]
pub(crate) fn uniform_scalar(w: f64, clip: f64, inv_step: f64, step: f64, tie_break: TieBreak) -> f64 {
    let k = tie_break.round(w.clamp(-clip, clip) * inv_step);
    (k * step).clamp(-clip, clip)
}

fn uniform_in_place(row: &mut [f64], bits: u8, clip: f64, tie_break: TieBreak) {
    let levels = max_level(bits) as f64;
    let (step, inv_step) = (clip / levels, levels / clip);
    for w in row.iter_mut() {
        *w = uniform_scalar(*w, clip, inv_step, step, tie_break);
    }
}

/// Scale and cutoff of the ternary quantizer, estimated from one filter row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TernaryParams {
    pub scale: f64,
    pub cutoff: f64,
    pub mask: TernaryMask,
}

impl TernaryParams {
    pub fn from_row(row: &[f64], threshold: f64, mask: TernaryMask) -> Result<Self> {
        if !(threshold > 0.0 && threshold <= 1.0) {
            return Err(Error::InvalidArgument(format!("ternary threshold {threshold} outside (0, 1]")));
        }
        let scale = mean_abs(row)?;
        Ok(Self { scale, cutoff: threshold * scale, mask })
    }

    /// Projects one value onto `{-scale, 0, +scale}` with these frozen parameters.
    #[inline]
    pub fn project(&self, w: f64) -> f64 {
        let dropped = match self.mask {
            TernaryMask::Magnitude => w.abs() < self.cutoff,
            TernaryMask::Signed => w < self.cutoff,
        };
        if dropped {
            0.0
        } else {
            sign(w) * self.scale
        }
    }

    pub fn project_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter().map(|&w| self.project(w)).collect()
    }
}

/// Ternary quantizer with the magnitude mask.
pub fn quantize_ternary(row: &[f64], threshold: f64) -> Result<Vec<f64>> {
    quantize_ternary_with(row, threshold, TernaryMask::Magnitude)
}

pub fn quantize_ternary_with(row: &[f64], threshold: f64, mask: TernaryMask) -> Result<Vec<f64>> {
    let params = TernaryParams::from_row(row, threshold, mask)?;
    Ok(params.project_row(row))
}

/// Binary quantizer: `sign(w) * mean|w|`.
pub fn quantize_binary(row: &[f64]) -> Result<Vec<f64>> {
    let scale = mean_abs(row)?;
    Ok(row.iter().map(|&w| sign(w) * scale).collect())
}

/// Per-layer quantization recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    /// `None` keeps the layer in full precision.
    pub bits: Option<u8>,
    /// Overrides the calibration table's `c = mean|w| / a*` for uniform bitwidths.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_ratio: Option<f64>,
    #[serde(default = "default_threshold")]
    pub ternary_threshold: f64,
    #[serde(default)]
    pub ternary_mask: TernaryMask,
    #[serde(default)]
    pub tie_break: TieBreak,
}

fn default_threshold() -> f64 {
    DEFAULT_TERNARY_THRESHOLD
}

impl Default for QuantSpec {
    fn default() -> Self {
        Self::full_precision()
    }
}

impl QuantSpec {
    pub fn full_precision() -> Self {
        Self {
            bits: None,
            clip_ratio: None,
            ternary_threshold: DEFAULT_TERNARY_THRESHOLD,
            ternary_mask: TernaryMask::Magnitude,
            tie_break: TieBreak::HalfAwayFromZero,
        }
    }

    pub fn with_bits(bits: u8) -> Self {
        Self { bits: Some(bits), ..Self::full_precision() }
    }

    /// Bits charged per weight in the model-size formula; full precision counts as 32.
    pub fn storage_bits(&self) -> u64 {
        self.bits.map_or(32, u64::from)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(b) = self.bits {
            if !(1..=8).contains(&b) {
                return Err(Error::UnsupportedBitwidth(b));
            }
        }
        if !(self.ternary_threshold > 0.0 && self.ternary_threshold <= 1.0) {
            return Err(Error::InvalidArgument(format!("ternary threshold {} outside (0, 1]", self.ternary_threshold)));
        }
        if let Some(c) = self.clip_ratio {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::InvalidArgument(format!("clip ratio {c} must be positive")));
            }
        }
        Ok(())
    }

    /// Clip ratio `c` for a uniform bitwidth, from the override or the table.
    pub fn resolve_clip_ratio(&self, calib: &CalibTable) -> Result<Option<f64>> {
        match self.bits {
            Some(b) if b >= 3 => match self.clip_ratio {
                Some(c) => Ok(Some(c)),
                None => calib.ratio(b).map(Some),
            },
            _ => Ok(None),
        }
    }
}

/// Picks the scheme for `spec.bits` and quantizes one filter row.
pub fn quantize_dispatch(row: &[f64], spec: &QuantSpec, calib: &CalibTable) -> Result<Vec<f64>> {
    spec.validate()?;
    check_row(row)?;
    let c = spec.resolve_clip_ratio(calib)?;
    let mut out = row.to_vec();
    quantize_row_in_place(&mut out, spec, c);
    Ok(out)
}

/// Quantizes in place. `clip_ratio` must be resolved when `bits >= 3`.
pub(crate) fn quantize_row_in_place(row: &mut [f64], spec: &QuantSpec, clip_ratio: Option<f64>) {
    match spec.bits {
        None => {}
        Some(1) => {
            let s = mean_abs_unchecked(row);
            row.iter_mut().for_each(|w| *w = sign(*w) * s);
        }
        Some(2) => {
            let s = mean_abs_unchecked(row);
            let params = TernaryParams { scale: s, cutoff: spec.ternary_threshold * s, mask: spec.ternary_mask };
            row.iter_mut().for_each(|w| *w = params.project(*w));
        }
        Some(b) => {
            let c = clip_ratio.expect("clip ratio resolved for uniform bitwidth");
            let clip = mean_abs_unchecked(row) / c;
            if clip > 0.0 {
                uniform_in_place(row, b, clip, spec.tie_break);
            } else {
                row.iter_mut().for_each(|w| *w = 0.0);
            }
        }
    }
}

/// Quantizes a `[C_out, fan_in]` weight matrix filter by filter.
pub fn quantize_filters(weights: &[f64], fan_in: usize, spec: &QuantSpec, calib: &CalibTable) -> Result<Vec<f64>> {
    spec.validate()?;
    if fan_in == 0 || !weights.len().is_multiple_of(fan_in) {
        return Err(Error::shape(
            "quantize_filters",
            format!("{} weights do not split into rows of {fan_in}", weights.len()),
        ));
    }
    let c = spec.resolve_clip_ratio(calib)?;
    let mut out = weights.to_vec();
    for row in out.chunks_mut(fan_in) {
        quantize_row_in_place(row, spec, c);
    }
    Ok(out)
}

/// Straight-through estimator: `dQ/dW = I`, so the upstream gradient passes unchanged.
pub fn ste_backward(upstream: &[f64], d: usize) -> Result<Vec<f64>> {
    if upstream.len() != d {
        return Err(Error::shape("ste_backward", format!("gradient has {} elements, filter has {d}", upstream.len())));
    }
    Ok(upstream.to_vec())
}

fn activation_levels(bits: u8) -> Result<f64> {
    if !(2..=16).contains(&bits) {
        return Err(Error::UnsupportedBitwidth(bits));
    }
    Ok(((1u32 << bits) - 1) as f64)
}

/// Per-tensor affine fake quantization onto `2^bits` levels spanning `[min, max]`.
///
/// A degenerate range (`max <= min`) passes the input through unchanged.
pub fn fake_quantize_activation(x: &[f64], bits: u8, min: f64, max: f64) -> Result<Vec<f64>> {
    let levels = activation_levels(bits)?;
    if max.is_nan() || min.is_nan() || max <= min {
        log::warn!("degenerate activation range [{min}, {max}], passing through");
        return Ok(x.to_vec());
    }
    let scale = (max - min) / levels;
    Ok(x.iter()
        .map(|&v| {
            let k = ((v.clamp(min, max) - min) / scale).round();
            (min + k * scale).clamp(min, max)
        })
        .collect())
}

/// Clipped STE for [`fake_quantize_activation`]: identity inside `[min, max]`, zero outside.
pub fn fake_quantize_activation_backward(x: &[f64], grad: &[f64], min: f64, max: f64) -> Result<Vec<f64>> {
    if x.len() != grad.len() {
        return Err(Error::shape(
            "fake_quantize_activation_backward",
            format!("input has {} elements, gradient {}", x.len(), grad.len()),
        ));
    }
    if max.is_nan() || min.is_nan() || max <= min {
        return Ok(grad.to_vec());
    }
    Ok(x.iter().zip(grad).map(|(&v, &g)| if v >= min && v <= max { g } else { 0.0 }).collect())
}

/// Exponential-moving-average min/max tracker for one activation tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationRange {
    pub min: f64,
    pub max: f64,
    pub decay: f64,
    pub initialized: bool,
}

impl Default for ActivationRange {
    fn default() -> Self {
        Self::new(0.99)
    }
}

impl ActivationRange {
    pub fn new(decay: f64) -> Self {
        Self { min: 0.0, max: 0.0, decay, initialized: false }
    }

    /// Folds one batch's extrema into the running range.
    pub fn observe(&mut self, x: &[f64]) {
        let (lo, hi) = x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        if !lo.is_finite() || !hi.is_finite() {
            return;
        }
        if self.initialized {
            self.min = self.decay * self.min + (1.0 - self.decay) * lo;
            self.max = self.decay * self.max + (1.0 - self.decay) * hi;
        } else {
            self.min = lo;
            self.max = hi;
            self.initialized = true;
        }
    }
}
