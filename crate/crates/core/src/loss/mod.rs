//! The weakly-supervised registration objective: a weighted sum of a
//! multiscale soft-Dice mismatch, a signed-distance log error, and a bending
//! energy regularizer, with analytic gradients with respect to the
//! displacement field.

pub mod bending;
pub mod dice;
pub mod gauss;
pub mod msle;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::DisplacementField;
use crate::grid::Grid;
use crate::interp::{warp, warp_with_grad};
use crate::loss::bending::{bending_value, bending_with_grad};
use crate::loss::dice::{dice_from_sums, validate_sigmas, DICE_EPSILON};
use crate::loss::gauss::{smooth_raw, smooth_transpose_raw};
use crate::loss::msle::rectified_log;
use crate::volume::{Volume, VolumeKind};

/// Default smoothing-scale schedule (voxel units) for the multiscale Dice
/// term: the raw masks plus four progressively coarser blurs.
pub const DEFAULT_SIGMAS: [f64; 5] = [0.0, 1.0, 2.0, 4.0, 8.0];

/// Relative weights of the objective. `alpha` scales the Dice mismatch,
/// `beta` the signed-distance error, and the remainder `1 - alpha - beta`
/// the bending energy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl LossWeights {
    /// Overlap-driven preset: Dice plus regularization only.
    pub const MDSC: LossWeights = LossWeights { alpha: 0.3, beta: 0.0 };
    /// Distance-driven preset: signed-distance error plus regularization.
    pub const SDM: LossWeights = LossWeights { alpha: 0.0, beta: 0.8 };
    /// Combined preset using both data terms.
    pub const MIX: LossWeights = LossWeights { alpha: 0.05, beta: 0.45 };

    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let w = LossWeights { alpha, beta };
        w.validate()?;
        Ok(w)
    }

    /// Weight of the bending-energy term.
    pub fn gamma(&self) -> f64 {
        1.0 - self.alpha - self.beta
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha.is_finite()
            && self.beta.is_finite()
            && self.alpha >= 0.0
            && self.beta >= 0.0
            && self.alpha + self.beta <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::ValueOutOfRange {
                context: "loss weights",
                detail: format!("alpha {} beta {}", self.alpha, self.beta),
            })
        }
    }

    /// Resolves a preset by its mode name (case-insensitive).
    pub fn preset(name: &str) -> Option<LossWeights> {
        match name.to_ascii_lowercase().as_str() {
            "mdsc" => Some(Self::MDSC),
            "sdm" => Some(Self::SDM),
            "mix" => Some(Self::MIX),
            _ => None,
        }
    }
}

/// The objective value and its three components for one evaluation.
/// `mdsc` is the multiscale Dice similarity (higher is better); the other
/// fields are penalties. `total = alpha * (1 - mdsc) + beta * msle +
/// gamma * bending`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub mdsc: f64,
    pub msle: f64,
    pub bending: f64,
}

/// Precomputed fixed-image state for repeated objective evaluations against
/// changing displacement fields: the smoothed fixed masks with their sums,
/// and the rectified log of the fixed signed distance map.
pub(crate) struct LossEngine {
    moving_mask: Volume,
    moving_sdm: Volume,
    weights: LossWeights,
    sigmas: Vec<f64>,
    include_mixed: bool,
    grid: Grid,
    smoothed_fixed: Vec<Vec<f64>>,
    sum_fixed: Vec<f64>,
    fixed_log: Vec<f64>,
}

fn check_mask_kind(context: &'static str, vol: &Volume) -> Result<()> {
    match vol.kind() {
        VolumeKind::BinaryMask | VolumeKind::SoftMask => Ok(()),
        other => Err(Error::KindMismatch {
            context,
            expected: "binary-mask or soft-mask",
            actual: other.name(),
        }),
    }
}

fn check_sdm_kind(context: &'static str, vol: &Volume) -> Result<()> {
    if vol.kind() == VolumeKind::SdmMm {
        Ok(())
    } else {
        Err(Error::KindMismatch {
            context,
            expected: "sdm-mm",
            actual: vol.kind().name(),
        })
    }
}

impl LossEngine {
    pub(crate) fn new(
        moving_mask: &Volume,
        fixed_mask: &Volume,
        moving_sdm: &Volume,
        fixed_sdm: &Volume,
        weights: LossWeights,
        sigmas: &[f64],
        include_mixed: bool,
    ) -> Result<Self> {
        weights.validate()?;
        validate_sigmas("total_loss", sigmas)?;
        check_mask_kind("total_loss moving mask", moving_mask)?;
        check_mask_kind("total_loss fixed mask", fixed_mask)?;
        check_sdm_kind("total_loss moving sdm", moving_sdm)?;
        check_sdm_kind("total_loss fixed sdm", fixed_sdm)?;
        if moving_mask.grid() != moving_sdm.grid() {
            return Err(Error::GridMismatch {
                context: "total_loss moving mask vs moving sdm",
            });
        }
        if fixed_mask.grid() != fixed_sdm.grid() {
            return Err(Error::GridMismatch {
                context: "total_loss fixed mask vs fixed sdm",
            });
        }
        let grid = fixed_mask.grid().clone();
        let mut smoothed_fixed = Vec::with_capacity(sigmas.len());
        let mut sum_fixed = Vec::with_capacity(sigmas.len());
        for &sigma in sigmas {
            let g = smooth_raw(&grid, fixed_mask.values(), sigma);
            sum_fixed.push(g.iter().sum());
            smoothed_fixed.push(g);
        }
        let fixed_log = fixed_sdm.values().iter().map(|&d| rectified_log(d)).collect();
        Ok(LossEngine {
            moving_mask: moving_mask.clone(),
            moving_sdm: moving_sdm.clone(),
            weights,
            sigmas: sigmas.to_vec(),
            include_mixed,
            grid,
            smoothed_fixed,
            sum_fixed,
            fixed_log,
        })
    }

    fn check_ddf(&self, ddf: &DisplacementField) -> Result<()> {
        if ddf.grid() != &self.grid {
            return Err(Error::GridMismatch {
                context: "total_loss displacement field vs fixed grid",
            });
        }
        Ok(())
    }

    fn breakdown(&self, mdsc: f64, msle: f64, bending: f64) -> LossBreakdown {
        let w = &self.weights;
        LossBreakdown {
            total: w.alpha * (1.0 - mdsc) + w.beta * msle + w.gamma() * bending,
            mdsc,
            msle,
            bending,
        }
    }

    fn mdsc_value(&self, warped_mask: &[f64]) -> f64 {
        let mut mdsc = 0.0;
        for (s, &sigma) in self.sigmas.iter().enumerate() {
            let sp = smooth_raw(&self.grid, warped_mask, sigma);
            let g = &self.smoothed_fixed[s];
            let mut intersection = 0.0;
            let mut sum_p = 0.0;
            for (a, b) in sp.iter().zip(g) {
                intersection += a * b;
                sum_p += a;
            }
            mdsc += dice_from_sums(intersection, sum_p, self.sum_fixed[s]);
        }
        mdsc / self.sigmas.len() as f64
    }

    fn msle_value(&self, warped_sdm: &[f64]) -> f64 {
        let sum: f64 = warped_sdm
            .iter()
            .zip(&self.fixed_log)
            .map(|(&q, &gl)| {
                let d = rectified_log(q) - gl;
                d * d
            })
            .sum();
        sum / warped_sdm.len() as f64
    }

    /// Objective value with its component breakdown.
    pub(crate) fn evaluate(&self, ddf: &DisplacementField) -> Result<LossBreakdown> {
        self.check_ddf(ddf)?;
        let warped_mask = warp(&self.moving_mask, ddf);
        let mdsc = self.mdsc_value(warped_mask.values());
        let warped_sdm = warp(&self.moving_sdm, ddf);
        let msle = self.msle_value(warped_sdm.values());
        let be = bending_value(ddf, self.include_mixed)?;
        Ok(self.breakdown(mdsc, msle, be))
    }

    /// Objective value plus its gradient with respect to every displacement
    /// vector (mm^-1 per component).
    pub(crate) fn evaluate_with_grad(
        &self,
        ddf: &DisplacementField,
    ) -> Result<(LossBreakdown, Vec<[f64; 3]>)> {
        self.check_ddf(ddf)?;
        let n = self.grid.num_voxels();
        let w = &self.weights;
        let n_scales = self.sigmas.len() as f64;

        // Dice term: forward smoothing always (the breakdown reports it);
        // the transpose back-propagation only when the term is weighted.
        let (mask_values, mask_grads) = warp_with_grad(&self.moving_mask, ddf);
        let mut mdsc = 0.0;
        let mut upstream_mask = vec![0.0; n];
        for (s, &sigma) in self.sigmas.iter().enumerate() {
            let sp = smooth_raw(&self.grid, &mask_values, sigma);
            let g = &self.smoothed_fixed[s];
            let mut intersection = 0.0;
            let mut sum_p = 0.0;
            for (a, b) in sp.iter().zip(g) {
                intersection += a * b;
                sum_p += a;
            }
            let union = sum_p + self.sum_fixed[s] + DICE_EPSILON;
            mdsc += 2.0 * intersection / union;
            if w.alpha > 0.0 {
                // d(dice_s)/d(smoothed p)_i = 2 g_i / U - 2 I / U^2.
                let c1 = 2.0 / union;
                let c2 = 2.0 * intersection / (union * union);
                let a_s: Vec<f64> = g.iter().map(|&gi| c1 * gi - c2).collect();
                let pulled = smooth_transpose_raw(&self.grid, &a_s, sigma);
                for (u, p) in upstream_mask.iter_mut().zip(&pulled) {
                    *u += p;
                }
            }
        }
        mdsc /= n_scales;
        // total contains alpha * (1 - mdsc): the sign flips here.
        let dice_factor = -w.alpha / n_scales;

        // Signed-distance term.
        let mut msle = 0.0;
        let mut grad = vec![[0.0; 3]; n];
        if w.beta > 0.0 {
            let (sdm_values, sdm_grads) = warp_with_grad(&self.moving_sdm, ddf);
            let inv_n = 1.0 / n as f64;
            for idx in 0..n {
                let q = sdm_values[idx];
                let diff = rectified_log(q) - self.fixed_log[idx];
                msle += diff * diff;
                if q > 0.0 {
                    let up = w.beta * 2.0 * inv_n * diff / (1.0 + q);
                    let g = sdm_grads[idx];
                    grad[idx] = [up * g[0], up * g[1], up * g[2]];
                }
            }
            msle *= inv_n;
        } else {
            let warped_sdm = warp(&self.moving_sdm, ddf);
            msle = self.msle_value(warped_sdm.values());
        }

        // Chain the Dice upstream through the warp, then add the bending
        // gradient.
        let (be, be_grad) = bending_with_grad(ddf, self.include_mixed)?;
        let gamma = w.gamma();
        for idx in 0..n {
            let up = dice_factor * upstream_mask[idx];
            let mg = mask_grads[idx];
            let bg = be_grad[idx];
            for c in 0..3 {
                grad[idx][c] += up * mg[c] + gamma * bg[c];
            }
        }

        Ok((self.breakdown(mdsc, msle, be), grad))
    }
}

/// Evaluates the full objective for a displacement field on the fixed grid:
/// warps the moving mask and moving signed distance map by `ddf`, compares
/// them to their fixed counterparts, and adds the bending energy of the
/// field itself.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    moving_mask: &Volume,
    fixed_mask: &Volume,
    moving_sdm: &Volume,
    fixed_sdm: &Volume,
    ddf: &DisplacementField,
    weights: LossWeights,
    sigmas: &[f64],
) -> Result<LossBreakdown> {
    LossEngine::new(
        moving_mask, fixed_mask, moving_sdm, fixed_sdm, weights, sigmas, false,
    )?
    .evaluate(ddf)
}

/// [`total_loss`] plus the analytic gradient of the total with respect to
/// every displacement vector.
#[allow(clippy::too_many_arguments)]
pub fn total_loss_grad(
    moving_mask: &Volume,
    fixed_mask: &Volume,
    moving_sdm: &Volume,
    fixed_sdm: &Volume,
    ddf: &DisplacementField,
    weights: LossWeights,
    sigmas: &[f64],
) -> Result<(LossBreakdown, Vec<[f64; 3]>)> {
    LossEngine::new(
        moving_mask, fixed_mask, moving_sdm, fixed_sdm, weights, sigmas, false,
    )?
    .evaluate_with_grad(ddf)
}
