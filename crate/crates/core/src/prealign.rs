//! Preprocessing and coarse pre-alignment.
//!
//! Registration starts from a translation-only initialization: both image
//! pairs are resampled onto one common grid centered on the fixed volume,
//! and the moving pair is additionally shifted so the center of mass of its
//! segmentation lands on the center of that grid. Intensity volumes are
//! normalized to [0, 1] against a high percentile beforehand so outlier
//! voxels do not dominate the scale.

use crate::error::{Error, Result};
use crate::field::DisplacementField;
use crate::grid::Grid;
use crate::interp::{resample_to_grid, warp, Interp};
use crate::volume::{Volume, VolumeKind};

/// Default common-grid shape for pre-alignment.
pub const DEFAULT_TARGET_DIMS: [usize; 3] = [96, 96, 80];

/// Default common-grid voxel size in mm (isotropic).
pub const DEFAULT_TARGET_SPACING_MM: [f64; 3] = [0.88, 0.88, 0.88];

/// Normalizes a non-negative intensity volume to [0, 1] against the given
/// percentile: every value is divided by the percentile value (linearly
/// interpolated over the sorted voxels) and clamped to [0, 1]. An all-zero
/// volume stays all zeros.
pub fn normalize_intensity(vol: &Volume, percentile: f64) -> Result<Volume> {
    if vol.kind() != VolumeKind::Intensity {
        return Err(Error::KindMismatch {
            context: "intensity normalization",
            expected: "intensity",
            actual: vol.kind().name(),
        });
    }
    if !(percentile.is_finite() && percentile > 0.0 && percentile <= 100.0) {
        return Err(Error::ValueOutOfRange {
            context: "intensity normalization",
            detail: format!("percentile {percentile} outside (0, 100]"),
        });
    }
    if let Some(v) = vol.values().iter().find(|v| **v < 0.0) {
        return Err(Error::ValueOutOfRange {
            context: "intensity normalization",
            detail: format!("negative intensity {v}"),
        });
    }
    let q = percentile_linear(vol.values(), percentile);
    let values = if q == 0.0 {
        vec![0.0; vol.values().len()]
    } else {
        vol.values().iter().map(|v| (v / q).clamp(0.0, 1.0)).collect()
    };
    Ok(Volume::new_unchecked(
        vol.grid().clone(),
        VolumeKind::Intensity,
        values,
    ))
}

/// Percentile with linear interpolation between the two nearest order
/// statistics (rank `p/100 * (n - 1)`).
fn percentile_linear(values: &[f64], percentile: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = percentile / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    if frac == 0.0 {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    }
}

/// Value-weighted mean of the voxel-center world coordinates of a binary or
/// soft mask. Errors if the total mass is zero.
pub fn center_of_mass(mask: &Volume) -> Result<[f64; 3]> {
    if !matches!(mask.kind(), VolumeKind::BinaryMask | VolumeKind::SoftMask) {
        return Err(Error::KindMismatch {
            context: "center of mass",
            expected: "binary-mask or soft-mask",
            actual: mask.kind().name(),
        });
    }
    let grid = mask.grid();
    let mut mass = 0.0;
    let mut acc = [0.0; 3];
    let mut idx = 0;
    for k in 0..grid.dims[2] {
        for j in 0..grid.dims[1] {
            for i in 0..grid.dims[0] {
                let v = mask.values()[idx];
                if v != 0.0 {
                    let w = grid.world(i, j, k);
                    mass += v;
                    for c in 0..3 {
                        acc[c] += v * w[c];
                    }
                }
                idx += 1;
            }
        }
    }
    if mass <= 0.0 {
        return Err(Error::ZeroMass {
            context: "center of mass",
        });
    }
    Ok([acc[0] / mass, acc[1] / mass, acc[2] / mass])
}

/// Everything [`coarse_align`] produces: the applied translation and the
/// four volumes resampled onto one common target grid.
#[derive(Clone, Debug)]
pub struct PrealignResult {
    /// Translation in mm that carries the moving segmentation's center of
    /// mass onto the target-grid center: the moving volumes are sampled at
    /// `world(v) - translation_mm`.
    pub translation_mm: [f64; 3],
    pub moving: Volume,
    pub moving_mask: Volume,
    pub fixed: Volume,
    pub fixed_mask: Volume,
}

/// Grid of the given shape whose world center coincides with `center`.
fn centered_grid(dims: [usize; 3], spacing: [f64; 3], center: [f64; 3]) -> Result<Grid> {
    let origin = std::array::from_fn(|c| center[c] - 0.5 * (dims[c] - 1) as f64 * spacing[c]);
    Grid::new(dims, spacing, origin)
}

/// Translation-only initialization. Builds a target grid of the requested
/// shape centered on the fixed grid's world center, resamples the fixed
/// pair onto it, and samples the moving pair shifted so the moving mask's
/// center of mass lands on the target center. Masks are interpolated
/// trilinearly and re-binarized; no rotation or scaling is applied.
pub fn coarse_align(
    moving: &Volume,
    moving_mask: &Volume,
    fixed: &Volume,
    fixed_mask: &Volume,
    target_dims: [usize; 3],
    target_spacing: [f64; 3],
) -> Result<PrealignResult> {
    for (img, mask) in [(moving, moving_mask), (fixed, fixed_mask)] {
        if mask.kind() != VolumeKind::BinaryMask {
            return Err(Error::KindMismatch {
                context: "coarse alignment masks",
                expected: "binary-mask",
                actual: mask.kind().name(),
            });
        }
        if img.grid() != mask.grid() {
            return Err(Error::GridMismatch {
                context: "coarse alignment image vs its mask",
            });
        }
    }
    let target = centered_grid(target_dims, target_spacing, fixed.grid().world_center())?;
    let com = center_of_mass(moving_mask)?;
    let target_center = target.world_center();
    let translation_mm: [f64; 3] = std::array::from_fn(|c| target_center[c] - com[c]);

    // Sampling the moving volumes at world(v) - t is a warp by the constant
    // field -t evaluated on the target grid.
    let shift = DisplacementField::new(
        target.clone(),
        vec![
            [-translation_mm[0], -translation_mm[1], -translation_mm[2]];
            target.num_voxels()
        ],
    )?;
    let moving_out = warp(moving, &shift);
    let moving_mask_out = warp(moving_mask, &shift).binarized();
    let fixed_out = resample_to_grid(fixed, &target, Interp::Trilinear);
    let fixed_mask_out = resample_to_grid(fixed_mask, &target, Interp::Trilinear);

    Ok(PrealignResult {
        translation_mm,
        moving: moving_out,
        moving_mask: moving_mask_out,
        fixed: fixed_out,
        fixed_mask: fixed_mask_out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ball_mask(grid: &Grid, center: [f64; 3], radius: f64) -> Volume {
        let mut values = vec![0.0; grid.num_voxels()];
        for k in 0..grid.dims[2] {
            for j in 0..grid.dims[1] {
                for i in 0..grid.dims[0] {
                    let p = grid.world(i, j, k);
                    let d2: f64 = (0..3).map(|c| (p[c] - center[c]).powi(2)).sum();
                    if d2 <= radius * radius {
                        values[grid.index(i, j, k)] = 1.0;
                    }
                }
            }
        }
        Volume::new(grid.clone(), VolumeKind::BinaryMask, values).unwrap()
    }

    fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
        (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn constant_positive_volume_normalizes_to_all_ones() {
        let grid = Grid::isotropic([4, 3, 2], 1.0).unwrap();
        let vol = Volume::new(grid, VolumeKind::Intensity, vec![5.0; 24]).unwrap();
        let out = normalize_intensity(&vol, 99.0).unwrap();
        assert!(out.values().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn percentile_matches_linear_interpolation_oracle() {
        // Values 1..=100: the 99th-percentile rank is 0.99 * 99 = 98.01,
        // interpolating between the order statistics 99 and 100 to 99.01.
        let grid = Grid::new([100, 1, 1], [1.0; 3], [0.0; 3]).unwrap();
        let values: Vec<f64> = (1..=100).map(f64::from).collect();
        let vol = Volume::new(grid, VolumeKind::Intensity, values).unwrap();
        let out = normalize_intensity(&vol, 99.0).unwrap();
        let q = 99.01;
        assert!((out.values()[49] - 50.0 / q).abs() < 1e-12);
        assert!((out.values()[98] - 99.0 / q).abs() < 1e-12);
        // Values above the percentile clamp to 1.
        assert_eq!(out.values()[99], 1.0);
    }

    #[test]
    fn all_zero_volume_stays_zero_without_division_error() {
        let grid = Grid::isotropic([3, 3, 3], 1.0).unwrap();
        let vol = Volume::zeros(grid, VolumeKind::Intensity);
        let out = normalize_intensity(&vol, 99.0).unwrap();
        assert!(out.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn percentile_one_hundred_divides_by_the_maximum() {
        let grid = Grid::new([4, 1, 1], [1.0; 3], [0.0; 3]).unwrap();
        let vol = Volume::new(grid, VolumeKind::Intensity, vec![1.0, 8.0, 2.0, 4.0]).unwrap();
        let out = normalize_intensity(&vol, 100.0).unwrap();
        assert_eq!(out.values(), &[0.125, 1.0, 0.25, 0.5]);
    }

    #[test]
    fn normalization_rejects_bad_inputs() {
        let grid = Grid::isotropic([3, 3, 3], 1.0).unwrap();
        let vol = Volume::zeros(grid.clone(), VolumeKind::Intensity);
        assert!(matches!(
            normalize_intensity(&vol, 0.0).unwrap_err(),
            Error::ValueOutOfRange { .. }
        ));
        assert!(matches!(
            normalize_intensity(&vol, 100.5).unwrap_err(),
            Error::ValueOutOfRange { .. }
        ));
        let mut values = vec![0.0; 27];
        values[3] = -0.25;
        let negative = Volume::new(grid.clone(), VolumeKind::Intensity, values).unwrap();
        assert!(matches!(
            normalize_intensity(&negative, 99.0).unwrap_err(),
            Error::ValueOutOfRange { .. }
        ));
        let mask = Volume::zeros(grid, VolumeKind::BinaryMask);
        assert!(matches!(
            normalize_intensity(&mask, 99.0).unwrap_err(),
            Error::KindMismatch { .. }
        ));
    }

    #[test]
    fn center_of_mass_of_a_single_voxel_is_its_world_coordinate() {
        let grid = Grid::new([5, 5, 5], [1.0, 2.0, 0.5], [10.0, -4.0, 0.25]).unwrap();
        let mut values = vec![0.0; 125];
        values[grid.index(2, 3, 1)] = 1.0;
        let mask = Volume::new(grid.clone(), VolumeKind::BinaryMask, values).unwrap();
        assert_eq!(center_of_mass(&mask).unwrap(), grid.world(2, 3, 1));
    }

    #[test]
    fn center_of_mass_weights_by_value() {
        let grid = Grid::new([4, 1, 1], [1.0; 3], [0.0; 3]).unwrap();
        let soft = Volume::new(
            grid,
            VolumeKind::SoftMask,
            vec![0.0, 0.25, 0.0, 0.75],
        )
        .unwrap();
        // Weighted mean of x = 1 (mass 0.25) and x = 3 (mass 0.75) is 2.5.
        let com = center_of_mass(&soft).unwrap();
        assert!((com[0] - 2.5).abs() < 1e-12);
        assert_eq!(com[1], 0.0);
        assert_eq!(com[2], 0.0);
    }

    #[test]
    fn center_of_mass_of_a_symmetric_ball_is_the_grid_center() {
        let grid = Grid::isotropic([20, 20, 20], 1.0).unwrap();
        let mask = ball_mask(&grid, grid.world_center(), 6.0);
        let com = center_of_mass(&mask).unwrap();
        assert!(dist(com, grid.world_center()) < 1e-9);
    }

    #[test]
    fn center_of_mass_rejects_empty_and_wrong_kind() {
        let grid = Grid::isotropic([3, 3, 3], 1.0).unwrap();
        let empty = Volume::zeros(grid.clone(), VolumeKind::BinaryMask);
        assert!(matches!(
            center_of_mass(&empty).unwrap_err(),
            Error::ZeroMass { .. }
        ));
        let intensity = Volume::zeros(grid, VolumeKind::Intensity);
        assert!(matches!(
            center_of_mass(&intensity).unwrap_err(),
            Error::KindMismatch { .. }
        ));
    }

    #[test]
    fn aligned_moving_mass_lands_on_the_target_center() {
        let moving_grid = Grid::isotropic([40, 40, 40], 1.0).unwrap();
        let fixed_grid = Grid::new([36, 36, 30], [1.2; 3], [5.0, -3.0, 2.0]).unwrap();
        let mc = moving_grid.world_center();
        let moving_mask = ball_mask(&moving_grid, [mc[0] + 6.3, mc[1] - 4.1, mc[2] + 2.7], 8.0);
        let fixed_mask = ball_mask(&fixed_grid, fixed_grid.world_center(), 9.0);
        let moving = moving_mask.with_kind(VolumeKind::Intensity).unwrap();
        let fixed = fixed_mask.with_kind(VolumeKind::Intensity).unwrap();

        let result = coarse_align(
            &moving,
            &moving_mask,
            &fixed,
            &fixed_mask,
            [24, 24, 20],
            [1.5; 3],
        )
        .unwrap();

        let target = result.fixed.grid().clone();
        assert_eq!(target.dims, [24, 24, 20]);
        assert_eq!(target.spacing, [1.5; 3]);
        assert!(dist(target.world_center(), fixed_grid.world_center()) < 1e-12);
        for vol in [
            &result.moving,
            &result.moving_mask,
            &result.fixed,
            &result.fixed_mask,
        ] {
            assert_eq!(vol.grid(), &target);
        }
        assert_eq!(result.moving.kind(), VolumeKind::Intensity);
        assert_eq!(result.moving_mask.kind(), VolumeKind::BinaryMask);
        assert_eq!(result.fixed_mask.kind(), VolumeKind::BinaryMask);

        let com = center_of_mass(&result.moving_mask).unwrap();
        assert!(
            dist(com, target.world_center()) < target.voxel_diagonal(),
            "COM {com:?} vs center {:?}",
            target.world_center()
        );
        assert!(result.fixed_mask.foreground_count() > 0);
    }

    #[test]
    fn recovers_a_known_pure_offset_exactly() {
        let grid = Grid::isotropic([40, 40, 40], 1.0).unwrap();
        let c = grid.world_center();
        let offset = [3.0, -2.0, 1.0];
        let fixed_mask = ball_mask(&grid, c, 8.0);
        let moving_mask = ball_mask(&grid, [c[0] + offset[0], c[1] + offset[1], c[2] + offset[2]], 8.0);
        let moving = moving_mask.with_kind(VolumeKind::Intensity).unwrap();
        let fixed = fixed_mask.with_kind(VolumeKind::Intensity).unwrap();

        let result = coarse_align(
            &moving,
            &moving_mask,
            &fixed,
            &fixed_mask,
            DEFAULT_TARGET_DIMS,
            [1.0; 3],
        )
        .unwrap();
        // Integer-voxel translation of an otherwise identical mask shifts
        // its center of mass by exactly that offset, so the recovered
        // translation is its exact negation.
        for c in 0..3 {
            assert!(
                (result.translation_mm[c] + offset[c]).abs() < 1e-9,
                "translation {:?}",
                result.translation_mm
            );
        }
    }

    #[test]
    fn second_application_is_near_identity() {
        let moving_grid = Grid::isotropic([40, 40, 40], 1.0).unwrap();
        let fixed_grid = Grid::isotropic([40, 40, 40], 1.0).unwrap();
        let mc = moving_grid.world_center();
        let moving_mask = ball_mask(&moving_grid, [mc[0] - 5.4, mc[1] + 3.2, mc[2] - 1.9], 7.0);
        let fixed_mask = ball_mask(&fixed_grid, fixed_grid.world_center(), 7.5);
        let moving = moving_mask.with_kind(VolumeKind::Intensity).unwrap();
        let fixed = fixed_mask.with_kind(VolumeKind::Intensity).unwrap();

        let dims = [32, 32, 28];
        let spacing = [1.25; 3];
        let first = coarse_align(&moving, &moving_mask, &fixed, &fixed_mask, dims, spacing).unwrap();
        let second = coarse_align(
            &first.moving,
            &first.moving_mask,
            &first.fixed,
            &first.fixed_mask,
            dims,
            spacing,
        )
        .unwrap();
        let norm = dist(second.translation_mm, [0.0; 3]);
        assert!(
            norm < first.fixed.grid().voxel_diagonal(),
            "second translation {:?}",
            second.translation_mm
        );
    }

    #[test]
    fn empty_moving_mask_is_rejected() {
        let grid = Grid::isotropic([10, 10, 10], 1.0).unwrap();
        let empty = Volume::zeros(grid.clone(), VolumeKind::BinaryMask);
        let fixed_mask = ball_mask(&grid, grid.world_center(), 3.0);
        let img = Volume::zeros(grid.clone(), VolumeKind::Intensity);
        assert!(matches!(
            coarse_align(&img, &empty, &img, &fixed_mask, [8, 8, 8], [1.0; 3]).unwrap_err(),
            Error::ZeroMass { .. }
        ));
    }

    #[test]
    fn mismatched_image_and_mask_grids_are_rejected() {
        let grid = Grid::isotropic([10, 10, 10], 1.0).unwrap();
        let other = Grid::isotropic([11, 10, 10], 1.0).unwrap();
        let mask = ball_mask(&grid, grid.world_center(), 3.0);
        let img = Volume::zeros(other, VolumeKind::Intensity);
        let fixed_img = Volume::zeros(grid.clone(), VolumeKind::Intensity);
        assert!(matches!(
            coarse_align(&img, &mask, &fixed_img, &mask, [8, 8, 8], [1.0; 3]).unwrap_err(),
            Error::GridMismatch { .. }
        ));
        let soft = mask.with_kind(VolumeKind::SoftMask).unwrap();
        assert!(matches!(
            coarse_align(&fixed_img, &soft, &fixed_img, &mask, [8, 8, 8], [1.0; 3]).unwrap_err(),
            Error::KindMismatch { .. }
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        /// Wherever the moving mass starts, alignment puts its center of
        /// mass within one voxel diagonal of the target-grid center.
        #[test]
        fn aligned_com_is_always_near_the_center(
            dx in -8.0..8.0f64,
            dy in -8.0..8.0f64,
            dz in -6.0..6.0f64,
            radius in 4.0..9.0f64,
        ) {
            let moving_grid = Grid::isotropic([48, 48, 40], 1.0).unwrap();
            let fixed_grid = Grid::isotropic([40, 40, 36], 1.1).unwrap();
            let mc = moving_grid.world_center();
            let moving_mask = ball_mask(&moving_grid, [mc[0] + dx, mc[1] + dy, mc[2] + dz], radius);
            let fixed_mask = ball_mask(&fixed_grid, fixed_grid.world_center(), radius);
            let moving = moving_mask.with_kind(VolumeKind::Intensity).unwrap();
            let fixed = fixed_mask.with_kind(VolumeKind::Intensity).unwrap();
            let result = coarse_align(
                &moving, &moving_mask, &fixed, &fixed_mask, [36, 36, 32], [1.0; 3],
            ).unwrap();
            let com = center_of_mass(&result.moving_mask).unwrap();
            let center = result.moving_mask.grid().world_center();
            prop_assert!(dist(com, center) < result.moving_mask.grid().voxel_diagonal());
        }
    }
}
