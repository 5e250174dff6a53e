//! Adam optimization of the displacement-field pyramid against the
//! registration objective.
//!
//! Optimization runs in stages, one per pyramid level, coarsest first. At
//! stage `s` the parameters are the displacement vectors of levels `0..=s`
//! (coarser levels keep refining while finer ones join), each stage starts
//! with fresh Adam state, and every iteration evaluates the objective on
//! the composed full-resolution field with analytic gradients pulled back
//! to each active level through the upsampling adjoint. The best parameters
//! ever evaluated are restored at the end, so the final objective is never
//! worse than the initial one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::DisplacementField;
use crate::loss::{LossBreakdown, LossEngine, LossWeights, DEFAULT_SIGMAS};
use crate::metrics::{compute_metrics, MetricsReport};
use crate::pyramid::DdfPyramid;
use crate::sdm::signed_distance_map;
use crate::volume::{Volume, VolumeKind};

/// Adam optimizer state over a flat parameter vector: first/second moment
/// running averages with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl Adam {
    pub fn new(num_params: usize, learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Adam {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    /// One descent step in place. The very first step moves each parameter
    /// by almost exactly `learning_rate * sign(gradient)`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::LengthMismatch {
                context: "adam step",
                expected: self.m.len(),
                actual: params.len().max(grads.len()),
            });
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

/// Full configuration of a registration run. Serializable so runs can be
/// driven from JSON config files; unspecified fields take the defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegistrationConfig {
    /// Number of pyramid levels (and optimization stages).
    pub levels: usize,
    /// Maximum iterations per stage; stages may stop earlier on convergence.
    pub iters_per_level: usize,
    /// Adam step size in mm.
    pub learning_rate_mm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Objective term weights.
    pub weights: LossWeights,
    /// Smoothing scales (voxel units) of the multiscale Dice term.
    pub sigmas: Vec<f64>,
    /// Include the cross-derivative terms in the bending energy.
    pub include_mixed_bending: bool,
    /// A stage stops once the objective changed by less than
    /// `convergence_tol` (relatively) over the last `convergence_window`
    /// iterations.
    pub convergence_window: usize,
    pub convergence_tol: f64,
    /// Recorded with the run for provenance. The optimization itself draws
    /// no randomness and produces identical results for every seed.
    pub seed: u64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            levels: 5,
            iters_per_level: 150,
            learning_rate_mm: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weights: LossWeights::MIX,
            sigmas: DEFAULT_SIGMAS.to_vec(),
            include_mixed_bending: false,
            convergence_window: 10,
            convergence_tol: 1e-6,
            seed: 0,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Error::ValueOutOfRange {
            context: "registration config",
            detail,
        };
        if self.levels == 0 {
            return Err(bad("levels must be at least 1".into()));
        }
        if self.iters_per_level == 0 {
            return Err(bad("iters_per_level must be at least 1".into()));
        }
        if !(self.learning_rate_mm.is_finite() && self.learning_rate_mm > 0.0) {
            return Err(bad(format!("learning_rate_mm {}", self.learning_rate_mm)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b.is_finite() && (0.0..1.0).contains(&b)) {
                return Err(bad(format!("{name} {b}")));
            }
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(bad(format!("epsilon {}", self.epsilon)));
        }
        if self.convergence_window == 0 {
            return Err(bad("convergence_window must be at least 1".into()));
        }
        if !(self.convergence_tol.is_finite() && self.convergence_tol >= 0.0) {
            return Err(bad(format!("convergence_tol {}", self.convergence_tol)));
        }
        self.weights.validate()?;
        crate::loss::dice::validate_sigmas("registration config", &self.sigmas)?;
        Ok(())
    }
}

/// Outcome of [`register`]: the recovered field (best parameters over the
/// whole run, composed at full resolution), its pyramid, the objective
/// breakdown per evaluated iteration, how many iterations each stage
/// actually ran, and quality metrics of the recovered field (without
/// landmark error; see [`crate::metrics::tre`] for that).
#[derive(Clone, Debug)]
pub struct RegistrationResult {
    pub ddf: DisplacementField,
    pub pyramid: DdfPyramid,
    pub final_loss: LossBreakdown,
    pub loss_trace: Vec<LossBreakdown>,
    pub iterations_used: Vec<usize>,
    pub metrics: MetricsReport,
}

fn gather_params(pyramid: &DdfPyramid, active_levels: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for k in 0..active_levels {
        for v in pyramid.level(k).vectors() {
            out.extend_from_slice(v);
        }
    }
    out
}

fn scatter_params(pyramid: &mut DdfPyramid, active_levels: usize, params: &[f64]) {
    let mut pos = 0;
    for k in 0..active_levels {
        let vectors = pyramid.level_mut(k).vectors_mut();
        for v in vectors {
            v[0] = params[pos];
            v[1] = params[pos + 1];
            v[2] = params[pos + 2];
            pos += 3;
        }
    }
    debug_assert_eq!(pos, params.len());
}

/// Aligns `moving_mask` to `fixed_mask` (binary masks on the same grid) by
/// optimizing a displacement-field pyramid against the weighted objective.
/// Signed distance maps of both masks are computed once up front. The run
/// is fully deterministic.
pub fn register(
    moving_mask: &Volume,
    fixed_mask: &Volume,
    config: &RegistrationConfig,
) -> Result<RegistrationResult> {
    config.validate()?;
    if moving_mask.grid() != fixed_mask.grid() {
        return Err(Error::GridMismatch {
            context: "register moving vs fixed mask",
        });
    }
    for (name, vol) in [("moving", moving_mask), ("fixed", fixed_mask)] {
        if vol.kind() != VolumeKind::BinaryMask {
            return Err(Error::KindMismatch {
                context: "register masks",
                expected: "binary-mask",
                actual: vol.kind().name(),
            });
        }
        if vol.foreground_count() == 0 {
            return Err(Error::EmptyMask {
                context: match name {
                    "moving" => "register moving mask",
                    _ => "register fixed mask",
                },
            });
        }
    }

    let moving_sdm = signed_distance_map(moving_mask)?;
    let fixed_sdm = signed_distance_map(fixed_mask)?;
    let engine = LossEngine::new(
        moving_mask,
        fixed_mask,
        &moving_sdm,
        &fixed_sdm,
        config.weights,
        &config.sigmas,
        config.include_mixed_bending,
    )?;

    let full_grid = fixed_mask.grid();
    let mut pyramid = DdfPyramid::zeros(full_grid, config.levels)?;
    let mut best_pyramid = pyramid.clone();
    let mut best_loss: Option<LossBreakdown> = None;
    let mut loss_trace = Vec::new();
    let mut iterations_used = Vec::with_capacity(config.levels);

    for stage in 0..config.levels {
        let active = stage + 1;
        let mut params = gather_params(&pyramid, active);
        let mut adam = Adam::new(
            params.len(),
            config.learning_rate_mm,
            config.beta1,
            config.beta2,
            config.epsilon,
        );
        let stage_start = loss_trace.len();
        let mut used = 0;

        for iteration in 0..config.iters_per_level {
            let composed = pyramid.compose();
            let (breakdown, grad_full) = engine.evaluate_with_grad(&composed)?;
            if !breakdown.total.is_finite() {
                return Err(Error::NanLoss { stage, iteration });
            }
            loss_trace.push(breakdown);
            used = iteration + 1;
            if best_loss.is_none_or(|b| breakdown.total < b.total) {
                best_loss = Some(breakdown);
                best_pyramid = pyramid.clone();
            }

            if iteration >= config.convergence_window {
                let prev = loss_trace[stage_start + iteration - config.convergence_window].total;
                let rel = (breakdown.total - prev).abs() / prev.abs().max(1e-12);
                if rel < config.convergence_tol {
                    break;
                }
            }

            let level_grads = pyramid.compose_grad(&grad_full);
            let mut grad_flat = Vec::with_capacity(params.len());
            for level_grad in level_grads.iter().take(active) {
                for g in level_grad {
                    grad_flat.extend_from_slice(g);
                }
            }
            adam.step(&mut params, &grad_flat)?;
            scatter_params(&mut pyramid, active, &params);
        }
        iterations_used.push(used);
    }

    let final_loss = best_loss.expect("at least one iteration ran");
    let ddf = best_pyramid.compose();
    let metrics = compute_metrics(moving_mask, fixed_mask, &ddf, None)?;
    Ok(RegistrationResult {
        ddf,
        pyramid: best_pyramid,
        final_loss,
        loss_trace,
        iterations_used,
        metrics,
    })
}
