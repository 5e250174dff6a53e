//! Soft Dice overlap between mask volumes, single-scale and averaged over a
//! schedule of Gaussian smoothing scales.

use crate::error::{Error, Result};
use crate::loss::gauss::gaussian_smooth;
use crate::volume::{Volume, VolumeKind};

/// Stabilizer added to the Dice denominator so empty unions are well-defined.
pub const DICE_EPSILON: f64 = 1e-7;

fn check_mask_pair(context: &'static str, p: &Volume, g: &Volume) -> Result<()> {
    if p.grid() != g.grid() {
        return Err(Error::GridMismatch { context });
    }
    for vol in [p, g] {
        match vol.kind() {
            VolumeKind::BinaryMask | VolumeKind::SoftMask => {}
            other => {
                return Err(Error::KindMismatch {
                    context,
                    expected: "binary-mask or soft-mask",
                    actual: other.name(),
                });
            }
        }
    }
    Ok(())
}

/// Raw Dice from precomputed sums: `2 * sum(p * g) / (sum(p) + sum(g) + eps)`.
pub(crate) fn dice_from_sums(intersection: f64, sum_p: f64, sum_g: f64) -> f64 {
    2.0 * intersection / (sum_p + sum_g + DICE_EPSILON)
}

/// Soft Dice overlap of two masks on the same grid; in `[0, 1)` and equal to
/// 1 within `1e-6` for identical nonempty masks.
pub fn soft_dice(p: &Volume, g: &Volume) -> Result<f64> {
    check_mask_pair("soft_dice", p, g)?;
    let mut intersection = 0.0;
    let mut sum_p = 0.0;
    let mut sum_g = 0.0;
    for (a, b) in p.values().iter().zip(g.values()) {
        intersection += a * b;
        sum_p += a;
        sum_g += b;
    }
    Ok(dice_from_sums(intersection, sum_p, sum_g))
}

/// Checks a smoothing-scale schedule: non-empty, every entry finite and >= 0.
pub(crate) fn validate_sigmas(context: &'static str, sigmas: &[f64]) -> Result<()> {
    if sigmas.is_empty() {
        return Err(Error::ValueOutOfRange {
            context,
            detail: "empty smoothing-scale schedule".into(),
        });
    }
    for &s in sigmas {
        if !s.is_finite() || s < 0.0 {
            return Err(Error::ValueOutOfRange {
                context,
                detail: format!("smoothing scale {s}"),
            });
        }
    }
    Ok(())
}

/// Mean of [`soft_dice`] over Gaussian-smoothed copies of both masks, one
/// term per scale in `sigmas` (voxel units; 0 means no smoothing).
pub fn multiscale_dice(p: &Volume, g: &Volume, sigmas: &[f64]) -> Result<f64> {
    check_mask_pair("multiscale_dice", p, g)?;
    validate_sigmas("multiscale_dice", sigmas)?;
    let mut acc = 0.0;
    for &sigma in sigmas {
        acc += soft_dice(&gaussian_smooth(p, sigma)?, &gaussian_smooth(g, sigma)?)?;
    }
    Ok(acc / sigmas.len() as f64)
}
