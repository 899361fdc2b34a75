//! Inline outlier trimming: split a window into fixed-width patches, score
//! each patch by its data-fidelity error, threshold the scores, and exclude
//! flagged patches from the objective and the dictionary gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::SignalTensor;

/// Per-patch squared reconstruction errors over a non-overlapping grid.
/// The grid tiles `[0, T)`; a trailing partial patch is kept.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchErrorSeries {
    patch_width: usize,
    signal_len: usize,
    errors: Vec<f64>,
}

impl PatchErrorSeries {
    pub fn patch_width(&self) -> usize {
        self.patch_width
    }

    pub fn signal_len(&self) -> usize {
        self.signal_len
    }

    pub fn errors(&self) -> &[f64] {
        &self.errors
    }

    pub fn n_patches(&self) -> usize {
        self.errors.len()
    }

    /// `[start, end)` sample range of patch `i`.
    pub fn patch_bounds(&self, i: usize) -> (usize, usize) {
        let start = i * self.patch_width;
        (start, (start + self.patch_width).min(self.signal_len))
    }
}

fn patch_count(signal_len: usize, patch_width: usize) -> usize {
    signal_len.div_ceil(patch_width)
}

/// Squared-error energy `0.5 * sum (x - recon)^2` of every patch.
pub fn patch_errors(
    x: &SignalTensor,
    recon: &SignalTensor,
    patch_width: usize,
) -> Result<PatchErrorSeries> {
    if x.channels() != recon.channels() || x.length() != recon.length() {
        return Err(Error::DimensionMismatch(format!(
            "signal is {}x{} but reconstruction is {}x{}",
            x.channels(),
            x.length(),
            recon.channels(),
            recon.length()
        )));
    }
    if patch_width == 0 || patch_width > x.length() {
        return Err(Error::OutOfRange(format!(
            "patch width {patch_width} invalid for signal length {}",
            x.length()
        )));
    }
    let n = patch_count(x.length(), patch_width);
    let mut errors = vec![0.0; n];
    for p in 0..x.channels() {
        let xr = x.row(p);
        let rr = recon.row(p);
        for (t, (a, b)) in xr.iter().zip(rr).enumerate() {
            let d = a - b;
            errors[t / patch_width] += 0.5 * d * d;
        }
    }
    Ok(PatchErrorSeries { patch_width, signal_len: x.length(), errors })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdKind {
    /// Flag the top `alpha` fraction: threshold at the empirical
    /// `(1 - alpha)`-quantile (nearest rank, rounding up).
    Quantile,
    /// `mean + alpha * population standard deviation`.
    ZScore,
    /// `median + alpha * MAD / 0.6745` (MAD rescaled to estimate sigma
    /// under a normal model).
    Mad,
}

/// A trimming rule: which statistic to threshold on and its level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdRule {
    pub kind: ThresholdKind,
    pub alpha: f64,
}

impl ThresholdRule {
    pub fn quantile(alpha: f64) -> Self {
        ThresholdRule { kind: ThresholdKind::Quantile, alpha }
    }

    pub fn z_score(alpha: f64) -> Self {
        ThresholdRule { kind: ThresholdKind::ZScore, alpha }
    }

    pub fn mad(alpha: f64) -> Self {
        ThresholdRule { kind: ThresholdKind::Mad, alpha }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() || self.alpha <= 0.0 {
            return Err(Error::Config(format!(
                "threshold alpha must be finite and > 0, got {}",
                self.alpha
            )));
        }
        if self.kind == ThresholdKind::Quantile && self.alpha >= 1.0 {
            return Err(Error::Config(format!(
                "quantile trim fraction must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Lower median of already-sorted values (no interpolation for even counts).
fn sorted_median(sorted: &[f64]) -> f64 {
    sorted[(sorted.len() - 1) / 2]
}

/// Threshold for the pooled error sample under `rule`. Needs at least two
/// values; patches with error strictly above the result are outliers.
pub fn compute_threshold(errors: &[f64], rule: &ThresholdRule) -> Result<f64> {
    rule.validate()?;
    if errors.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "need at least 2 error values to compute a threshold, got {}",
            errors.len()
        )));
    }
    let n = errors.len();
    Ok(match rule.kind {
        ThresholdKind::Quantile => {
            let mut sorted = errors.to_vec();
            sorted.sort_by(f64::total_cmp);
            // nearest rank up, with a relative epsilon so float artifacts
            // like 0.9 * 10 = 9.000000000000002 do not bump the rank
            let q = (1.0 - rule.alpha) * n as f64;
            let rank = (q - q.abs() * 1e-12 - 1e-12).ceil().max(1.0) as usize;
            sorted[rank.min(n) - 1]
        }
        ThresholdKind::ZScore => {
            let mean = errors.iter().sum::<f64>() / n as f64;
            let var = errors.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n as f64;
            mean + rule.alpha * var.sqrt()
        }
        ThresholdKind::Mad => {
            let mut sorted = errors.to_vec();
            sorted.sort_by(f64::total_cmp);
            let med = sorted_median(&sorted);
            let mut dev: Vec<f64> = errors.iter().map(|e| (e - med).abs()).collect();
            dev.sort_by(f64::total_cmp);
            med + rule.alpha * sorted_median(&dev) / 0.6745
        }
    })
}

/// Outlier flags over a patch grid. `flags[i]` is true when patch `i` was
/// trimmed.
#[derive(Debug, Clone, PartialEq)]
pub struct OutlierMask {
    patch_width: usize,
    signal_len: usize,
    flags: Vec<bool>,
    threshold_used: f64,
}

impl OutlierMask {
    /// All-inlier mask (no trimming).
    pub fn all_inlier(signal_len: usize, patch_width: usize) -> Self {
        OutlierMask {
            patch_width,
            signal_len,
            flags: vec![false; patch_count(signal_len, patch_width)],
            threshold_used: f64::INFINITY,
        }
    }

    /// Mask from explicit patch flags (e.g. ground truth).
    pub fn from_patch_flags(
        signal_len: usize,
        patch_width: usize,
        flags: Vec<bool>,
    ) -> Result<Self> {
        if patch_width == 0 || patch_width > signal_len {
            return Err(Error::OutOfRange(format!(
                "patch width {patch_width} invalid for signal length {signal_len}"
            )));
        }
        if flags.len() != patch_count(signal_len, patch_width) {
            return Err(Error::DimensionMismatch(format!(
                "{} flags do not cover {signal_len} samples in patches of {patch_width}",
                flags.len()
            )));
        }
        Ok(OutlierMask { patch_width, signal_len, flags, threshold_used: f64::NAN })
    }

    pub fn patch_width(&self) -> usize {
        self.patch_width
    }

    pub fn signal_len(&self) -> usize {
        self.signal_len
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn threshold_used(&self) -> f64 {
        self.threshold_used
    }

    pub fn n_flagged(&self) -> usize {
        self.flags.iter().filter(|f| **f).count()
    }

    /// `[start, end)` sample range of patch `i`.
    pub fn patch_bounds(&self, i: usize) -> (usize, usize) {
        let start = i * self.patch_width;
        (start, (start + self.patch_width).min(self.signal_len))
    }

    /// Per-sample expansion of the patch flags.
    pub fn sample_flags(&self) -> Vec<bool> {
        let mut out = vec![false; self.signal_len];
        for (i, &f) in self.flags.iter().enumerate() {
            if f {
                let (s, e) = self.patch_bounds(i);
                out[s..e].iter_mut().for_each(|v| *v = true);
            }
        }
        out
    }

    fn check_grid(&self, x: &SignalTensor) -> Result<()> {
        if self.signal_len != x.length()
            || self.flags.len() != patch_count(x.length(), self.patch_width)
        {
            return Err(Error::DimensionMismatch(format!(
                "mask grid ({} patches of width {} over {}) does not match signal length {}",
                self.flags.len(),
                self.patch_width,
                self.signal_len,
                x.length()
            )));
        }
        Ok(())
    }
}

/// Collapses per-sample flags onto a patch grid: a patch is flagged when
/// any of its samples is.
pub fn sample_flags_to_patches(flags: &[bool], patch_width: usize) -> Result<Vec<bool>> {
    if patch_width == 0 || patch_width > flags.len() {
        return Err(Error::OutOfRange(format!(
            "patch width {patch_width} invalid for {} samples",
            flags.len()
        )));
    }
    let mut out = vec![false; patch_count(flags.len(), patch_width)];
    for (t, &f) in flags.iter().enumerate() {
        if f {
            out[t / patch_width] = true;
        }
    }
    Ok(out)
}

/// Flags every patch whose error is strictly above `beta` (ties stay
/// inliers).
pub fn build_mask(errors: &PatchErrorSeries, beta: f64) -> OutlierMask {
    OutlierMask {
        patch_width: errors.patch_width,
        signal_len: errors.signal_len,
        flags: errors.errors.iter().map(|e| *e > beta).collect(),
        threshold_used: beta,
    }
}

/// Trimmed objective: mean patch data error over inlier patches scaled by
/// `1 / patch_width`, plus the untrimmed l1 penalty:
/// `(1 / W) * sum_{inlier} 0.5 ||(x - recon)_patch||^2 + lambda * z_l1`.
pub fn trimmed_objective(
    x: &SignalTensor,
    recon: &SignalTensor,
    mask: &OutlierMask,
    z_l1: f64,
    lambda: f64,
) -> Result<f64> {
    mask.check_grid(x)?;
    let errs = patch_errors(x, recon, mask.patch_width)?;
    let data: f64 = errs
        .errors
        .iter()
        .zip(&mask.flags)
        .filter(|(_, f)| !**f)
        .map(|(e, _)| e)
        .sum();
    Ok(data / mask.patch_width as f64 + lambda * z_l1)
}

/// `x - recon` with every flagged patch zeroed on all channels.
pub fn masked_residual(
    x: &SignalTensor,
    recon: &SignalTensor,
    mask: &OutlierMask,
) -> Result<SignalTensor> {
    mask.check_grid(x)?;
    if x.channels() != recon.channels() || x.length() != recon.length() {
        return Err(Error::DimensionMismatch(format!(
            "signal is {}x{} but reconstruction is {}x{}",
            x.channels(),
            x.length(),
            recon.channels(),
            recon.length()
        )));
    }
    let mut out = SignalTensor::zeros(x.channels(), x.length());
    for p in 0..x.channels() {
        let xr = x.row(p);
        let rr = recon.row(p);
        let orow = out.row_mut(p);
        for (i, &flagged) in mask.flags.iter().enumerate() {
            if !flagged {
                let s = i * mask.patch_width;
                let e = (s + mask.patch_width).min(x.length());
                for t in s..e {
                    orow[t] = xr[t] - rr[t];
                }
            }
        }
    }
    Ok(out)
}
