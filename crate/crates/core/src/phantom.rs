//! Synthetic test pairs with known ground truth.
//!
//! A phantom is built from an analytic ellipsoid and an analytic smooth
//! deformation `φ(x) = x + u(x)` (an affine part plus Gaussian bumps). The
//! moving mask rasterizes the ellipsoid directly; the fixed mask samples
//! the moving mask through the field (trilinear, re-binarized), so `u` is
//! exactly the field a registration run should recover — no field
//! inversion involved, and the ground-truth warp reproduces the fixed mask
//! by construction. Landmarks are small balls seeded well inside the
//! object, paired through the same sampling.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::DisplacementField;
use crate::grid::Grid;
use crate::interp::warp;
use crate::metrics::{jacobian_grad_stat, Landmark, LandmarkSet};
use crate::volume::{Volume, VolumeKind};

/// How often generation retries with shrunken bumps before giving up on a
/// fold-free field.
const MAX_ATTEMPTS: usize = 10;

/// Per-attempt shrink factor applied to the bump amplitudes.
const RETRY_SHRINK: f64 = 0.7;

/// Affine part of the synthetic deformation, applied about the grid center:
/// `u_affine(x) = (matrix - I)(x - center) + translation_mm`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffinePart {
    pub matrix: [[f64; 3]; 3],
    pub translation_mm: [f64; 3],
}

impl AffinePart {
    pub const IDENTITY: AffinePart = AffinePart {
        matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        translation_mm: [0.0; 3],
    };

    fn det(&self) -> f64 {
        let m = &self.matrix;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }
}

/// Everything that defines one phantom: grid shape, ellipsoid size, the
/// deformation's affine part and bump population, landmark count, and the
/// seed driving all random draws.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// Ellipsoid semi-axes in mm; must fit inside the grid extent.
    pub semi_axes_mm: [f64; 3],
    pub affine: AffinePart,
    pub bump_count: usize,
    /// Peak displacement scale of each Gaussian bump in mm.
    pub bump_amplitude_mm: f64,
    /// Width of each Gaussian bump in mm.
    pub bump_sigma_mm: f64,
    pub landmark_count: usize,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [64, 64, 64],
            spacing: [1.0; 3],
            semi_axes_mm: [20.0, 17.0, 15.0],
            affine: AffinePart::IDENTITY,
            bump_count: 6,
            bump_amplitude_mm: 3.0,
            bump_sigma_mm: 7.0,
            landmark_count: 4,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    /// Default spec with a seeded near-identity affine part (entries jittered
    /// by up to 5%, translation up to 2.5 mm) on top of the default bumps.
    pub fn randomized(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_AFF1_4E00_0000);
        let mut matrix = [[0.0; 3]; 3];
        for (r, row) in matrix.iter_mut().enumerate() {
            for (c, entry) in row.iter_mut().enumerate() {
                let base = if r == c { 1.0 } else { 0.0 };
                *entry = base + rng.random_range(-0.05..0.05);
            }
        }
        let translation_mm = std::array::from_fn(|_| rng.random_range(-2.5..2.5));
        PhantomSpec {
            affine: AffinePart {
                matrix,
                translation_mm,
            },
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Error::ValueOutOfRange {
            context: "phantom spec",
            detail,
        };
        if self.dims.iter().any(|d| *d < 8) {
            return Err(bad(format!("dims {:?} below the minimum of 8", self.dims)));
        }
        for c in 0..3 {
            if !(self.spacing[c].is_finite() && self.spacing[c] > 0.0) {
                return Err(bad(format!("spacing {:?}", self.spacing)));
            }
            if !(self.semi_axes_mm[c].is_finite() && self.semi_axes_mm[c] > 0.0) {
                return Err(bad(format!("semi-axes {:?}", self.semi_axes_mm)));
            }
            let half_extent = 0.5 * (self.dims[c] - 1) as f64 * self.spacing[c];
            if self.semi_axes_mm[c] >= half_extent {
                return Err(bad(format!(
                    "semi-axis {} mm does not fit the half-extent {half_extent} mm on axis {c}",
                    self.semi_axes_mm[c]
                )));
            }
        }
        let flat = self
            .affine
            .matrix
            .iter()
            .flatten()
            .chain(&self.affine.translation_mm);
        if flat.clone().any(|v| !v.is_finite()) {
            return Err(bad("non-finite affine part".into()));
        }
        if self.affine.det() <= 0.0 {
            return Err(bad(format!(
                "affine matrix determinant {} is not positive",
                self.affine.det()
            )));
        }
        if !(self.bump_amplitude_mm.is_finite() && self.bump_amplitude_mm >= 0.0) {
            return Err(bad(format!("bump amplitude {}", self.bump_amplitude_mm)));
        }
        if !(self.bump_sigma_mm.is_finite() && self.bump_sigma_mm > 0.0) {
            return Err(bad(format!("bump sigma {}", self.bump_sigma_mm)));
        }
        Ok(())
    }
}

/// A generated pair: masks, the ground-truth field on the fixed grid, and
/// id-paired landmark sets.
#[derive(Clone, Debug)]
pub struct PhantomPair {
    pub fixed_mask: Volume,
    pub moving_mask: Volume,
    pub true_ddf: DisplacementField,
    pub moving_landmarks: LandmarkSet,
    pub fixed_landmarks: LandmarkSet,
}

/// One Gaussian displacement bump: center, vector amplitude.
struct Bump {
    center: [f64; 3],
    amplitude: [f64; 3],
}

fn sample_in_ellipsoid(
    rng: &mut ChaCha8Rng,
    center: [f64; 3],
    semi_axes: [f64; 3],
) -> [f64; 3] {
    loop {
        let offsets: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        if offsets.iter().map(|t| t * t).sum::<f64>() <= 1.0 {
            return std::array::from_fn(|c| center[c] + semi_axes[c] * offsets[c]);
        }
    }
}

fn random_unit(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let norm = v.iter().map(|t| t * t).sum::<f64>().sqrt();
        if norm > 1e-3 && norm <= 1.0 {
            return std::array::from_fn(|c| v[c] / norm);
        }
    }
}

fn build(spec: &PhantomSpec, grid: &Grid, bump_scale: f64) -> Result<PhantomPair> {
    let center = grid.world_center();
    let axes = spec.semi_axes_mm;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let bump_field_axes: [f64; 3] = std::array::from_fn(|c| 1.1 * axes[c]);
    let bumps: Vec<Bump> = (0..spec.bump_count)
        .map(|_| {
            let bump_center = sample_in_ellipsoid(&mut rng, center, bump_field_axes);
            let direction = random_unit(&mut rng);
            let magnitude =
                spec.bump_amplitude_mm * bump_scale * rng.random_range(0.5..1.0);
            Bump {
                center: bump_center,
                amplitude: std::array::from_fn(|c| magnitude * direction[c]),
            }
        })
        .collect();

    let landmark_axes: [f64; 3] = std::array::from_fn(|c| 0.65 * axes[c]);
    let landmark_points: Vec<[f64; 3]> = (0..spec.landmark_count)
        .map(|_| sample_in_ellipsoid(&mut rng, center, landmark_axes))
        .collect();

    let inv_two_sigma2 = 1.0 / (2.0 * spec.bump_sigma_mm * spec.bump_sigma_mm);
    let displace = |x: [f64; 3]| -> [f64; 3] {
        let d: [f64; 3] = std::array::from_fn(|c| x[c] - center[c]);
        let m = &spec.affine.matrix;
        let mut u: [f64; 3] = std::array::from_fn(|r| {
            m[r][0] * d[0] + m[r][1] * d[1] + m[r][2] * d[2] - d[r]
                + spec.affine.translation_mm[r]
        });
        for bump in &bumps {
            let r2: f64 = (0..3).map(|c| (x[c] - bump.center[c]).powi(2)).sum();
            let w = (-r2 * inv_two_sigma2).exp();
            for c in 0..3 {
                u[c] += w * bump.amplitude[c];
            }
        }
        u
    };
    let inside = |y: [f64; 3]| -> bool {
        (0..3)
            .map(|c| ((y[c] - center[c]) / axes[c]).powi(2))
            .sum::<f64>()
            <= 1.0
    };

    let n = grid.num_voxels();
    let mut moving = vec![0.0; n];
    let mut vectors = vec![[0.0; 3]; n];
    let mut idx = 0;
    for k in 0..grid.dims[2] {
        for j in 0..grid.dims[1] {
            for i in 0..grid.dims[0] {
                let w = grid.world(i, j, k);
                moving[idx] = inside(w) as u8 as f64;
                vectors[idx] = displace(w);
                idx += 1;
            }
        }
    }
    let moving_mask = Volume::new_unchecked(grid.clone(), VolumeKind::BinaryMask, moving);
    let true_ddf = DisplacementField::new(grid.clone(), vectors)?;
    // The fixed mask is the moving mask carried through the ground-truth
    // field, so that field is exactly what a registration run has to
    // recover.
    let fixed_mask = warp(&moving_mask, &true_ddf).binarized();

    let radius = 2.0 * spec.spacing.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut moving_landmarks = Vec::with_capacity(landmark_points.len());
    let mut fixed_landmarks = Vec::with_capacity(landmark_points.len());
    for (l, q) in landmark_points.iter().enumerate() {
        let id = format!("lm{l:02}");
        let mut m_vals = vec![0.0; n];
        let mut idx = 0;
        for k in 0..grid.dims[2] {
            for j in 0..grid.dims[1] {
                for i in 0..grid.dims[0] {
                    let w = grid.world(i, j, k);
                    let d2: f64 = (0..3).map(|c| (w[c] - q[c]).powi(2)).sum();
                    if d2 <= radius * radius {
                        m_vals[idx] = 1.0;
                    }
                    idx += 1;
                }
            }
        }
        let m_mask = Volume::new_unchecked(grid.clone(), VolumeKind::BinaryMask, m_vals);
        let f_mask = warp(&m_mask, &true_ddf).binarized();
        moving_landmarks.push(Landmark {
            id: id.clone(),
            mask: m_mask,
        });
        fixed_landmarks.push(Landmark { id, mask: f_mask });
    }

    Ok(PhantomPair {
        fixed_mask,
        moving_mask,
        true_ddf,
        moving_landmarks: LandmarkSet::new(moving_landmarks)?,
        fixed_landmarks: LandmarkSet::new(fixed_landmarks)?,
    })
}

/// Both masks must be nonempty and keep clear of the grid's boundary faces;
/// otherwise the object (or its deformed image) does not fit the field of
/// view and the pair would silently lose mass at the edges.
fn check_fit(pair: &PhantomPair) -> Result<()> {
    for (name, mask) in [("moving", &pair.moving_mask), ("fixed", &pair.fixed_mask)] {
        if mask.foreground_count() == 0 {
            return Err(Error::EmptyMask {
                context: "phantom generation",
            });
        }
        let dims = mask.grid().dims;
        let on_boundary = |i: usize, j: usize, k: usize| {
            i == 0 || j == 0 || k == 0 || i == dims[0] - 1 || j == dims[1] - 1 || k == dims[2] - 1
        };
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    if on_boundary(i, j, k) && mask.at(i, j, k) != 0.0 {
                        return Err(Error::ValueOutOfRange {
                            context: "phantom generation",
                            detail: format!("{name} mask touches the grid boundary"),
                        });
                    }
                }
            }
        }
    }
    Ok(())
}

/// Generates a phantom pair from a spec. If the sampled deformation folds
/// (any interior Jacobian determinant <= 0), the bumps are shrunk by 30%
/// and the same seed is redrawn, up to 10 attempts. Bitwise deterministic
/// for a given spec.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<PhantomPair> {
    spec.validate()?;
    let grid = Grid::new(spec.dims, spec.spacing, [0.0; 3])?;
    for attempt in 0..MAX_ATTEMPTS {
        let pair = build(spec, &grid, RETRY_SHRINK.powi(attempt as i32))?;
        let (_, folding) = jacobian_grad_stat(&pair.true_ddf)?;
        if folding == 0.0 {
            check_fit(&pair)?;
            return Ok(pair);
        }
    }
    Err(Error::FoldedField {
        attempts: MAX_ATTEMPTS,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interp::warp;
    use crate::metrics::{dice_binary, tre};
    use proptest::prelude::*;

    #[test]
    fn identity_spec_yields_equal_masks_and_a_zero_field() {
        let spec = PhantomSpec {
            bump_count: 0,
            ..Default::default()
        };
        let pair = generate_phantom(&spec).unwrap();
        assert_eq!(pair.moving_mask.values(), pair.fixed_mask.values());
        assert!(pair.true_ddf.vectors().iter().all(|v| *v == [0.0; 3]));
        assert!(pair.moving_mask.foreground_count() > 1000);
    }

    #[test]
    fn pure_translation_spec_gives_a_constant_field() {
        let t = [1.5, -2.25, 0.75];
        let spec = PhantomSpec {
            affine: AffinePart {
                translation_mm: t,
                ..AffinePart::IDENTITY
            },
            bump_count: 0,
            ..Default::default()
        };
        let pair = generate_phantom(&spec).unwrap();
        assert!(pair.true_ddf.vectors().iter().all(|v| *v == t));
    }

    #[test]
    fn randomized_phantom_satisfies_the_ground_truth_contract() {
        let spec = PhantomSpec::randomized(7);
        let pair = generate_phantom(&spec).unwrap();

        // Warping the moving mask by the ground-truth field reproduces the
        // fixed mask.
        let warped = warp(&pair.moving_mask, &pair.true_ddf).binarized();
        let dsc = dice_binary(&warped, &pair.fixed_mask).unwrap();
        assert!(dsc > 0.99, "ground-truth warp dice {dsc}");

        // The fixed mask also tracks the analytic deformed ellipsoid: a
        // voxel is foreground roughly when its pulled-back position lies
        // inside the ellipsoid. Interpolation only moves the boundary by a
        // fraction of a voxel.
        let grid = pair.fixed_mask.grid();
        let c0 = grid.world_center();
        let mut analytic = vec![0.0; grid.num_voxels()];
        for (idx, u) in pair.true_ddf.vectors().iter().enumerate() {
            let [i, j, k] = grid.coords(idx);
            let w = grid.world(i, j, k);
            let inside: f64 = (0..3)
                .map(|c| ((w[c] + u[c] - c0[c]) / spec.semi_axes_mm[c]).powi(2))
                .sum();
            analytic[idx] = (inside <= 1.0) as u8 as f64;
        }
        let analytic_fixed =
            Volume::new(grid.clone(), VolumeKind::BinaryMask, analytic).unwrap();
        let cross = dice_binary(&pair.fixed_mask, &analytic_fixed).unwrap();
        assert!(cross > 0.97, "analytic cross-check dice {cross}");

        let (_, folding) = jacobian_grad_stat(&pair.true_ddf).unwrap();
        assert_eq!(folding, 0.0);

        let err = tre(&pair.moving_landmarks, &pair.fixed_landmarks, &pair.true_ddf).unwrap();
        let min_spacing = spec.spacing.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(err < 0.5 * min_spacing, "ground-truth tre {err}");

        assert_eq!(pair.moving_landmarks.len(), spec.landmark_count);
        assert_eq!(pair.fixed_landmarks.len(), spec.landmark_count);
        // Landmarks sit well inside the object.
        for lm in pair.moving_landmarks.entries() {
            for idx in 0..lm.mask.values().len() {
                if lm.mask.values()[idx] != 0.0 {
                    assert_ne!(pair.moving_mask.values()[idx], 0.0);
                }
            }
        }
    }

    #[test]
    fn generation_is_bitwise_deterministic() {
        let spec = PhantomSpec::randomized(42);
        let a = generate_phantom(&spec).unwrap();
        let b = generate_phantom(&spec).unwrap();
        assert_eq!(a.moving_mask.values(), b.moving_mask.values());
        assert_eq!(a.fixed_mask.values(), b.fixed_mask.values());
        assert_eq!(a.true_ddf.vectors(), b.true_ddf.vectors());
        for (x, y) in a
            .moving_landmarks
            .entries()
            .iter()
            .zip(b.moving_landmarks.entries())
        {
            assert_eq!(x.id, y.id);
            assert_eq!(x.mask.values(), y.mask.values());
        }
    }

    #[test]
    fn different_seeds_give_different_fields() {
        let a = generate_phantom(&PhantomSpec::randomized(1)).unwrap();
        let b = generate_phantom(&PhantomSpec::randomized(2)).unwrap();
        assert_ne!(a.true_ddf.vectors(), b.true_ddf.vectors());
    }

    #[test]
    fn hopeless_amplitudes_error_out_after_ten_attempts() {
        let spec = PhantomSpec {
            dims: [24, 24, 24],
            semi_axes_mm: [8.0, 7.0, 6.0],
            bump_count: 3,
            bump_amplitude_mm: 200.0,
            bump_sigma_mm: 2.0,
            ..Default::default()
        };
        match generate_phantom(&spec) {
            Err(Error::FoldedField { attempts: 10 }) => {}
            other => panic!("expected FoldedField, got {other:?}"),
        }
    }

    #[test]
    fn oversized_translation_fails_the_fit_check() {
        let spec = PhantomSpec {
            dims: [24, 24, 24],
            semi_axes_mm: [8.0, 7.0, 6.0],
            affine: AffinePart {
                translation_mm: [12.0, 0.0, 0.0],
                ..AffinePart::IDENTITY
            },
            bump_count: 0,
            ..Default::default()
        };
        assert!(matches!(
            generate_phantom(&spec).unwrap_err(),
            Error::ValueOutOfRange { .. }
        ));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        for mutate in [
            |s: &mut PhantomSpec| s.dims = [4, 64, 64],
            |s: &mut PhantomSpec| s.spacing = [0.0, 1.0, 1.0],
            |s: &mut PhantomSpec| s.semi_axes_mm = [40.0, 17.0, 15.0],
            |s: &mut PhantomSpec| s.affine.matrix[0][0] = -1.0,
            |s: &mut PhantomSpec| s.affine.matrix[1][2] = f64::NAN,
            |s: &mut PhantomSpec| s.bump_sigma_mm = 0.0,
            |s: &mut PhantomSpec| s.bump_amplitude_mm = -1.0,
        ] {
            let mut spec = PhantomSpec::default();
            mutate(&mut spec);
            assert!(spec.validate().is_err(), "mutation should be rejected");
        }
    }

    #[test]
    fn spec_serializes_by_field_name_and_rejects_unknown_keys() {
        let spec: PhantomSpec = serde_json::from_str(
            r#"{"dims": [32, 32, 32], "semi_axes_mm": [10.0, 9.0, 8.0], "seed": 3}"#,
        )
        .unwrap();
        assert_eq!(spec.dims, [32, 32, 32]);
        assert_eq!(spec.seed, 3);
        assert_eq!(spec.bump_count, 6);
        assert!(serde_json::from_str::<PhantomSpec>(r#"{"dimz": [32, 32, 32]}"#).is_err());
        let text = serde_json::to_string(&PhantomSpec::default()).unwrap();
        assert!(text.contains("\"semi_axes_mm\""));
        assert!(text.contains("\"bump_amplitude_mm\""));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(6))]

        /// Every seed produces a pair honoring the ground-truth contract.
        #[test]
        fn any_seed_satisfies_the_warp_invariant(seed in 0u64..10_000) {
            let spec = PhantomSpec {
                dims: [32, 32, 32],
                semi_axes_mm: [11.0, 9.5, 8.5],
                bump_amplitude_mm: 2.0,
                bump_sigma_mm: 5.0,
                ..PhantomSpec::randomized(seed)
            };
            let pair = generate_phantom(&spec).unwrap();
            let warped = warp(&pair.moving_mask, &pair.true_ddf).binarized();
            let dsc = dice_binary(&warped, &pair.fixed_mask).unwrap();
            prop_assert!(dsc > 0.99, "dice {}", dsc);
            let (_, folding) = jacobian_grad_stat(&pair.true_ddf).unwrap();
            prop_assert!(folding == 0.0);
            prop_assert!(pair.fixed_mask.foreground_count() > 0);
        }
    }
}
