//! Registration quality metrics: whole and regional overlap, landmark
//! target registration error, and deformation-regularity statistics
//! derived from the Jacobian determinant of the transform.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::DisplacementField;
use crate::interp::warp;
use crate::prealign::center_of_mass;
use crate::volume::{Volume, VolumeKind};

/// Dice similarity coefficient `2|P∩G| / (|P| + |G|)` between two binary
/// masks on the same grid. Two empty masks agree perfectly and score 1.
pub fn dice_binary(p: &Volume, g: &Volume) -> Result<f64> {
    for vol in [p, g] {
        if vol.kind() != VolumeKind::BinaryMask {
            return Err(Error::KindMismatch {
                context: "binary Dice",
                expected: "binary-mask",
                actual: vol.kind().name(),
            });
        }
    }
    if p.grid() != g.grid() {
        return Err(Error::GridMismatch {
            context: "binary Dice",
        });
    }
    Ok(dice_in_slab(p, g, 0, p.grid().dims[2]))
}

/// Binary Dice restricted to the half-open slice range `z0..z1`.
fn dice_in_slab(p: &Volume, g: &Volume, z0: usize, z1: usize) -> f64 {
    let dims = p.grid().dims;
    let slice = dims[0] * dims[1];
    let (mut intersection, mut sum) = (0u64, 0u64);
    for k in z0..z1 {
        let base = k * slice;
        for idx in base..base + slice {
            let a = p.values()[idx] != 0.0;
            let b = g.values()[idx] != 0.0;
            intersection += (a && b) as u64;
            sum += a as u64 + b as u64;
        }
    }
    if sum == 0 {
        1.0
    } else {
        2.0 * intersection as f64 / sum as f64
    }
}

/// Inclusive z-slice range of a mask's foreground, or None if empty.
fn z_extent(mask: &Volume) -> Option<(usize, usize)> {
    let dims = mask.grid().dims;
    let slice = dims[0] * dims[1];
    let mut range: Option<(usize, usize)> = None;
    for k in 0..dims[2] {
        let occupied = mask.values()[k * slice..(k + 1) * slice]
            .iter()
            .any(|v| *v != 0.0);
        if occupied {
            range = Some(match range {
                None => (k, k),
                Some((lo, _)) => (lo, k),
            });
        }
    }
    range
}

/// Slab boundaries splitting an inclusive z-range into three equal thirds:
/// returns `[z0, a, b, z1]` with half-open slabs `z0..a`, `a..b`, `b..z1`.
fn third_boundaries(zmin: usize, zmax: usize) -> [usize; 4] {
    let n = (zmax - zmin + 1) as f64;
    let a = zmin + (n / 3.0).round() as usize;
    let b = zmin + (2.0 * n / 3.0).round() as usize;
    [zmin, a, b, zmax + 1]
}

/// Splits a nonempty binary mask into three disjoint masks covering equal
/// thirds of the z-extent of its own bounding box, ordered from the lowest
/// slice index upward (base, mid, apex). Their union is the input mask.
pub fn region_split(mask: &Volume) -> Result<[Volume; 3]> {
    if mask.kind() != VolumeKind::BinaryMask {
        return Err(Error::KindMismatch {
            context: "region split",
            expected: "binary-mask",
            actual: mask.kind().name(),
        });
    }
    let (zmin, zmax) = z_extent(mask).ok_or(Error::EmptyMask {
        context: "region split",
    })?;
    let bounds = third_boundaries(zmin, zmax);
    let dims = mask.grid().dims;
    let slice = dims[0] * dims[1];
    Ok(std::array::from_fn(|r| {
        let mut values = vec![0.0; mask.values().len()];
        let (z0, z1) = (bounds[r], bounds[r + 1]);
        values[z0 * slice..z1 * slice].copy_from_slice(&mask.values()[z0 * slice..z1 * slice]);
        Volume::new_unchecked(mask.grid().clone(), VolumeKind::BinaryMask, values)
    }))
}

/// One labeled landmark: a small binary mask identified by a unique id.
#[derive(Clone, Debug)]
pub struct Landmark {
    pub id: String,
    pub mask: Volume,
}

/// A collection of landmarks with unique ids and nonempty binary masks.
#[derive(Clone, Debug)]
pub struct LandmarkSet {
    entries: Vec<Landmark>,
}

impl LandmarkSet {
    pub fn new(entries: Vec<Landmark>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for lm in &entries {
            if lm.mask.kind() != VolumeKind::BinaryMask {
                return Err(Error::KindMismatch {
                    context: "landmark set",
                    expected: "binary-mask",
                    actual: lm.mask.kind().name(),
                });
            }
            if lm.mask.foreground_count() == 0 {
                return Err(Error::EmptyMask {
                    context: "landmark set",
                });
            }
            if !seen.insert(lm.id.as_str()) {
                return Err(Error::ValueOutOfRange {
                    context: "landmark set",
                    detail: format!("duplicate landmark id {:?}", lm.id),
                });
            }
        }
        Ok(LandmarkSet { entries })
    }

    pub fn entries(&self) -> &[Landmark] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Landmark> {
        self.entries.iter().find(|lm| lm.id == id)
    }
}

/// Target registration error in mm: the mean, over id-paired landmarks, of
/// the distance between the center of mass of the warped moving landmark
/// and that of its fixed partner. Errors if any id lacks a partner or a
/// warped landmark carries no mass on the field's grid.
pub fn tre(moving: &LandmarkSet, fixed: &LandmarkSet, ddf: &DisplacementField) -> Result<f64> {
    for lm in fixed.entries() {
        if moving.get(&lm.id).is_none() {
            return Err(Error::UnpairedLandmark { id: lm.id.clone() });
        }
    }
    if moving.is_empty() {
        return Err(Error::EmptyMask {
            context: "landmark pairing",
        });
    }
    let mut sum = 0.0;
    for lm in moving.entries() {
        let partner = fixed
            .get(&lm.id)
            .ok_or_else(|| Error::UnpairedLandmark { id: lm.id.clone() })?;
        let warped = warp(&lm.mask, ddf);
        let wc = center_of_mass(&warped).map_err(|_| Error::ZeroMass {
            context: "warped landmark",
        })?;
        let fc = center_of_mass(&partner.mask)?;
        sum += (0..3).map(|c| (wc[c] - fc[c]).powi(2)).sum::<f64>().sqrt();
    }
    Ok(sum / moving.len() as f64)
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Deformation-regularity statistics of a displacement field. The Jacobian
/// determinant `J = det(I + ∂u/∂x)` is evaluated with spacing-aware central
/// differences at every interior voxel. Returns:
///
/// - `jac_grad`: the mean magnitude (per mm) of the central-difference
///   gradient of the `|J|` field, over voxels where that stencil stays
///   interior (0 when no such voxel exists) — a smoothness statistic of the
///   local volume change;
/// - `folding_fraction`: the fraction of interior voxels with `J <= 0`.
///
/// Both statistics are invariant under adding a constant to the field.
pub fn jacobian_grad_stat(ddf: &DisplacementField) -> Result<(f64, f64)> {
    let grid = ddf.grid();
    if grid.dims.iter().any(|d| *d < 3) {
        return Err(Error::GridTooSmall {
            context: "jacobian statistics",
            min: 3,
        });
    }
    let [nx, ny, nz] = grid.dims;
    let vectors = ddf.vectors();
    let strides = [1, nx, nx * ny];
    let inv2h: [f64; 3] = std::array::from_fn(|c| 1.0 / (2.0 * grid.spacing[c]));

    let mut abs_det = vec![0.0; vectors.len()];
    let mut folded = 0usize;
    let mut interior = 0usize;
    for k in 1..nz - 1 {
        for j in 1..ny - 1 {
            for i in 1..nx - 1 {
                let idx = i + nx * (j + ny * k);
                let mut m = [[0.0; 3]; 3];
                for c in 0..3 {
                    let fwd = vectors[idx + strides[c]];
                    let bwd = vectors[idx - strides[c]];
                    for r in 0..3 {
                        m[r][c] = (fwd[r] - bwd[r]) * inv2h[c];
                    }
                }
                for r in 0..3 {
                    m[r][r] += 1.0;
                }
                let det = det3(&m);
                interior += 1;
                folded += (det <= 0.0) as usize;
                abs_det[idx] = det.abs();
            }
        }
    }
    let folding_fraction = folded as f64 / interior as f64;

    let mut grad_sum = 0.0;
    let mut grad_count = 0usize;
    for k in 2..nz.saturating_sub(2) {
        for j in 2..ny.saturating_sub(2) {
            for i in 2..nx.saturating_sub(2) {
                let idx = i + nx * (j + ny * k);
                let mut g2 = 0.0;
                for c in 0..3 {
                    let d = (abs_det[idx + strides[c]] - abs_det[idx - strides[c]]) * inv2h[c];
                    g2 += d * d;
                }
                grad_sum += g2.sqrt();
                grad_count += 1;
            }
        }
    }
    let jac_grad = if grad_count == 0 {
        0.0
    } else {
        grad_sum / grad_count as f64
    };
    Ok((jac_grad, folding_fraction))
}

/// Full quality report for one registered case. `tre_mm` is present only
/// when landmarks were supplied.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dsc_whole: f64,
    pub dsc_base: f64,
    pub dsc_mid: f64,
    pub dsc_apex: f64,
    pub tre_mm: Option<f64>,
    pub jac_grad: f64,
    pub folding_fraction: f64,
}

/// Evaluates a displacement field: warps the moving mask, scores whole and
/// regional overlap against the fixed mask (regions are thirds of the fixed
/// mask's bounding-box z-extent, applied to both masks), computes Jacobian
/// statistics, and — when landmark sets are given — the target registration
/// error.
pub fn compute_metrics(
    moving_mask: &Volume,
    fixed_mask: &Volume,
    ddf: &DisplacementField,
    landmarks: Option<(&LandmarkSet, &LandmarkSet)>,
) -> Result<MetricsReport> {
    for vol in [moving_mask, fixed_mask] {
        if vol.kind() != VolumeKind::BinaryMask {
            return Err(Error::KindMismatch {
                context: "metrics",
                expected: "binary-mask",
                actual: vol.kind().name(),
            });
        }
    }
    if fixed_mask.grid() != ddf.grid() {
        return Err(Error::GridMismatch {
            context: "metrics fixed mask vs field",
        });
    }
    let (zmin, zmax) = z_extent(fixed_mask).ok_or(Error::EmptyMask {
        context: "metrics fixed mask",
    })?;

    let warped = warp(moving_mask, ddf).binarized();
    let dsc_whole = dice_binary(&warped, fixed_mask)?;
    let bounds = third_boundaries(zmin, zmax);
    let dsc_base = dice_in_slab(&warped, fixed_mask, bounds[0], bounds[1]);
    let dsc_mid = dice_in_slab(&warped, fixed_mask, bounds[1], bounds[2]);
    let dsc_apex = dice_in_slab(&warped, fixed_mask, bounds[2], bounds[3]);
    let (jac_grad, folding_fraction) = jacobian_grad_stat(ddf)?;
    let tre_mm = match landmarks {
        Some((m, f)) => Some(tre(m, f, ddf)?),
        None => None,
    };
    Ok(MetricsReport {
        dsc_whole,
        dsc_base,
        dsc_mid,
        dsc_apex,
        tre_mm,
        jac_grad,
        folding_fraction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
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

    fn box_mask(grid: &Grid, lo: [usize; 3], hi: [usize; 3]) -> Volume {
        let mut values = vec![0.0; grid.num_voxels()];
        for k in lo[2]..=hi[2] {
            for j in lo[1]..=hi[1] {
                for i in lo[0]..=hi[0] {
                    values[grid.index(i, j, k)] = 1.0;
                }
            }
        }
        Volume::new(grid.clone(), VolumeKind::BinaryMask, values).unwrap()
    }

    fn constant_field(grid: &Grid, v: [f64; 3]) -> DisplacementField {
        DisplacementField::new(grid.clone(), vec![v; grid.num_voxels()]).unwrap()
    }

    #[test]
    fn dice_of_identical_masks_is_one() {
        let grid = Grid::isotropic([16, 16, 16], 1.0).unwrap();
        let mask = ball_mask(&grid, grid.world_center(), 5.0);
        assert_eq!(dice_binary(&mask, &mask).unwrap(), 1.0);
    }

    #[test]
    fn dice_of_disjoint_masks_is_zero() {
        let grid = Grid::isotropic([20, 10, 10], 1.0).unwrap();
        let a = box_mask(&grid, [0, 0, 0], [3, 3, 3]);
        let b = box_mask(&grid, [10, 0, 0], [13, 3, 3]);
        assert_eq!(dice_binary(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn dice_matches_hand_count() {
        // p covers x 0..=2, g covers x 1..=3 on one row: 3 + 3 voxels with
        // an overlap of 2 gives 2*2/6 = 2/3.
        let grid = Grid::new([5, 1, 1], [1.0; 3], [0.0; 3]).unwrap();
        let p = box_mask(&grid, [0, 0, 0], [2, 0, 0]);
        let g = box_mask(&grid, [1, 0, 0], [3, 0, 0]);
        let d = dice_binary(&p, &g).unwrap();
        assert!((d - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn dice_of_two_empty_masks_is_one() {
        let grid = Grid::isotropic([4, 4, 4], 1.0).unwrap();
        let empty = Volume::zeros(grid, VolumeKind::BinaryMask);
        assert_eq!(dice_binary(&empty, &empty.clone()).unwrap(), 1.0);
    }

    #[test]
    fn dice_rejects_soft_masks_and_mismatched_grids() {
        let grid = Grid::isotropic([4, 4, 4], 1.0).unwrap();
        let other = Grid::isotropic([5, 4, 4], 1.0).unwrap();
        let mask = box_mask(&grid, [0, 0, 0], [1, 1, 1]);
        let soft = mask.with_kind(VolumeKind::SoftMask).unwrap();
        assert!(matches!(
            dice_binary(&mask, &soft).unwrap_err(),
            Error::KindMismatch { .. }
        ));
        let off = Volume::zeros(other, VolumeKind::BinaryMask);
        assert!(matches!(
            dice_binary(&mask, &off).unwrap_err(),
            Error::GridMismatch { .. }
        ));
    }

    #[test]
    fn thirty_slice_mask_splits_into_ten_slice_thirds() {
        let grid = Grid::isotropic([6, 6, 32], 1.0).unwrap();
        let mask = box_mask(&grid, [1, 1, 0], [4, 4, 29]);
        let [base, mid, apex] = region_split(&mask).unwrap();
        let per_slice = 16;
        assert_eq!(base.foreground_count(), 10 * per_slice);
        assert_eq!(mid.foreground_count(), 10 * per_slice);
        assert_eq!(apex.foreground_count(), 10 * per_slice);
        assert_eq!(z_extent(&base).unwrap(), (0, 9));
        assert_eq!(z_extent(&mid).unwrap(), (10, 19));
        assert_eq!(z_extent(&apex).unwrap(), (20, 29));
    }

    #[test]
    fn split_follows_the_masks_own_bounding_box() {
        // Foreground on z 5..=14 (10 slices): thirds round to 3/4/3.
        let grid = Grid::isotropic([5, 5, 20], 1.0).unwrap();
        let mask = box_mask(&grid, [0, 0, 5], [4, 4, 14]);
        let [base, mid, apex] = region_split(&mask).unwrap();
        assert_eq!(z_extent(&base).unwrap(), (5, 7));
        assert_eq!(z_extent(&mid).unwrap(), (8, 11));
        assert_eq!(z_extent(&apex).unwrap(), (12, 14));
    }

    #[test]
    fn split_rejects_empty_masks() {
        let grid = Grid::isotropic([4, 4, 4], 1.0).unwrap();
        let empty = Volume::zeros(grid, VolumeKind::BinaryMask);
        assert!(matches!(
            region_split(&empty).unwrap_err(),
            Error::EmptyMask { .. }
        ));
    }

    #[test]
    fn landmark_set_enforces_unique_ids_and_nonempty_binary_masks() {
        let grid = Grid::isotropic([8, 8, 8], 1.0).unwrap();
        let ball = ball_mask(&grid, grid.world_center(), 2.0);
        let lm = |id: &str| Landmark {
            id: id.into(),
            mask: ball.clone(),
        };
        assert_eq!(LandmarkSet::new(vec![lm("a"), lm("b")]).unwrap().len(), 2);
        assert!(matches!(
            LandmarkSet::new(vec![lm("a"), lm("a")]).unwrap_err(),
            Error::ValueOutOfRange { .. }
        ));
        let empty = Landmark {
            id: "e".into(),
            mask: Volume::zeros(grid.clone(), VolumeKind::BinaryMask),
        };
        assert!(matches!(
            LandmarkSet::new(vec![empty]).unwrap_err(),
            Error::EmptyMask { .. }
        ));
        let soft = Landmark {
            id: "s".into(),
            mask: ball.with_kind(VolumeKind::SoftMask).unwrap(),
        };
        assert!(matches!(
            LandmarkSet::new(vec![soft]).unwrap_err(),
            Error::KindMismatch { .. }
        ));
    }

    #[test]
    fn tre_is_exact_for_integer_shifts() {
        // warp samples the moving landmark at world + t, moving its mass by
        // exactly -t. With integer t the fixed landmark at a - t is the
        // same rasterization shifted whole voxels, so the error is zero;
        // a second landmark offset by one extra voxel contributes exactly
        // 1 mm, making the mean 0.5.
        let grid = Grid::isotropic([24, 24, 24], 1.0).unwrap();
        let c = grid.world_center();
        let a = [c[0] + 2.0, c[1] - 3.0, c[2] + 1.0];
        let t = [2.0, -1.0, 3.0];
        let ddf = constant_field(&grid, t);
        let lm_moving = |center: [f64; 3], id: &str| Landmark {
            id: id.into(),
            mask: ball_mask(&grid, center, 2.2),
        };
        let moving = LandmarkSet::new(vec![lm_moving(a, "p0"), lm_moving(c, "p1")]).unwrap();
        let fixed = LandmarkSet::new(vec![
            Landmark {
                id: "p0".into(),
                mask: ball_mask(&grid, [a[0] - t[0], a[1] - t[1], a[2] - t[2]], 2.2),
            },
            Landmark {
                id: "p1".into(),
                mask: ball_mask(
                    &grid,
                    [c[0] - t[0] + 1.0, c[1] - t[1], c[2] - t[2]],
                    2.2,
                ),
            },
        ])
        .unwrap();
        let err = tre(&moving, &fixed, &ddf).unwrap();
        assert!((err - 0.5).abs() < 1e-9, "tre {err}");
    }

    #[test]
    fn tre_pairs_by_id_not_by_order() {
        let grid = Grid::isotropic([20, 20, 20], 1.0).unwrap();
        let c = grid.world_center();
        let ddf = constant_field(&grid, [0.0; 3]);
        let ball_at = |center: [f64; 3]| ball_mask(&grid, center, 2.0);
        let moving = LandmarkSet::new(vec![
            Landmark { id: "a".into(), mask: ball_at([c[0] - 4.0, c[1], c[2]]) },
            Landmark { id: "b".into(), mask: ball_at([c[0] + 4.0, c[1], c[2]]) },
        ])
        .unwrap();
        let fixed = LandmarkSet::new(vec![
            Landmark { id: "b".into(), mask: ball_at([c[0] + 4.0, c[1], c[2]]) },
            Landmark { id: "a".into(), mask: ball_at([c[0] - 4.0, c[1], c[2]]) },
        ])
        .unwrap();
        let err = tre(&moving, &fixed, &ddf).unwrap();
        assert!(err < 1e-12, "tre {err}");
    }

    #[test]
    fn tre_errors_on_unpaired_ids_and_vanished_mass() {
        let grid = Grid::isotropic([32, 32, 32], 1.0).unwrap();
        let c = grid.world_center();
        let ball = ball_mask(&grid, c, 2.0);
        let set = |id: &str| {
            LandmarkSet::new(vec![Landmark {
                id: id.into(),
                mask: ball.clone(),
            }])
            .unwrap()
        };
        let ddf = constant_field(&grid, [0.0; 3]);
        match tre(&set("a"), &set("z"), &ddf).unwrap_err() {
            Error::UnpairedLandmark { id } => assert_eq!(id, "z"),
            other => panic!("expected UnpairedLandmark, got {other:?}"),
        }
        // A huge shift samples the landmark entirely outside its support
        // (edge-clamped to background), leaving zero warped mass.
        let corner = LandmarkSet::new(vec![Landmark {
            id: "a".into(),
            mask: ball_mask(&grid, [5.0, 5.0, 5.0], 1.5),
        }])
        .unwrap();
        let far = constant_field(&grid, [100.0, 0.0, 0.0]);
        assert!(matches!(
            tre(&corner, &set("a"), &far).unwrap_err(),
            Error::ZeroMass { .. }
        ));
    }

    #[test]
    fn zero_field_has_unit_jacobian_everywhere() {
        let grid = Grid::new([8, 7, 6], [1.0, 1.25, 2.0], [0.0; 3]).unwrap();
        let ddf = DisplacementField::zeros(grid);
        let (jac_grad, folding) = jacobian_grad_stat(&ddf).unwrap();
        assert_eq!(jac_grad, 0.0);
        assert_eq!(folding, 0.0);
    }

    #[test]
    fn linear_contraction_past_inversion_folds_everywhere() {
        // u_x = -2.1 (x - x0) gives J = det(I + A) = -1.1 < 0 at every
        // interior voxel, and |J| is constant so its gradient vanishes.
        let grid = Grid::isotropic([10, 10, 10], 1.0).unwrap();
        let c = grid.world_center();
        let mut vectors = vec![[0.0; 3]; grid.num_voxels()];
        for k in 0..10 {
            for j in 0..10 {
                for i in 0..10 {
                    let w = grid.world(i, j, k);
                    vectors[grid.index(i, j, k)] = [-2.1 * (w[0] - c[0]), 0.0, 0.0];
                }
            }
        }
        let ddf = DisplacementField::new(grid, vectors).unwrap();
        let (jac_grad, folding) = jacobian_grad_stat(&ddf).unwrap();
        assert_eq!(folding, 1.0);
        assert!(jac_grad < 1e-9, "jac_grad {jac_grad}");
    }

    /// Reference implementation with independent index arithmetic and a
    /// cofactor expansion along the first column.
    fn reference_jac(ddf: &DisplacementField) -> (f64, f64) {
        let grid = ddf.grid();
        let [nx, ny, nz] = grid.dims;
        let at = |i: usize, j: usize, k: usize| ddf.vectors()[grid.index(i, j, k)];
        let mut abs_det = std::collections::HashMap::new();
        let (mut folded, mut interior) = (0usize, 0usize);
        for k in 1..nz - 1 {
            for j in 1..ny - 1 {
                for i in 1..nx - 1 {
                    let dx: [f64; 3] = std::array::from_fn(|r| {
                        (at(i + 1, j, k)[r] - at(i - 1, j, k)[r]) / (2.0 * grid.spacing[0])
                    });
                    let dy: [f64; 3] = std::array::from_fn(|r| {
                        (at(i, j + 1, k)[r] - at(i, j - 1, k)[r]) / (2.0 * grid.spacing[1])
                    });
                    let dz: [f64; 3] = std::array::from_fn(|r| {
                        (at(i, j, k + 1)[r] - at(i, j, k - 1)[r]) / (2.0 * grid.spacing[2])
                    });
                    let m = [
                        [1.0 + dx[0], dy[0], dz[0]],
                        [dx[1], 1.0 + dy[1], dz[1]],
                        [dx[2], dy[2], 1.0 + dz[2]],
                    ];
                    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                        - m[1][0] * (m[0][1] * m[2][2] - m[0][2] * m[2][1])
                        + m[2][0] * (m[0][1] * m[1][2] - m[0][2] * m[1][1]);
                    interior += 1;
                    if det <= 0.0 {
                        folded += 1;
                    }
                    abs_det.insert((i, j, k), det.abs());
                }
            }
        }
        let (mut gsum, mut gcount) = (0.0, 0usize);
        for k in 2..nz.max(2) - 2 {
            for j in 2..ny.max(2) - 2 {
                for i in 2..nx.max(2) - 2 {
                    let mut g2 = 0.0;
                    for (c, (lo, hi)) in [
                        ((i - 1, j, k), (i + 1, j, k)),
                        ((i, j - 1, k), (i, j + 1, k)),
                        ((i, j, k - 1), (i, j, k + 1)),
                    ]
                    .iter()
                    .enumerate()
                    {
                        let d = (abs_det[hi] - abs_det[lo]) / (2.0 * grid.spacing[c]);
                        g2 += d * d;
                    }
                    gsum += g2.sqrt();
                    gcount += 1;
                }
            }
        }
        let jac_grad = if gcount == 0 { 0.0 } else { gsum / gcount as f64 };
        (jac_grad, folded as f64 / interior as f64)
    }

    #[test]
    fn jacobian_statistics_match_an_independent_reference() {
        let grid = Grid::new([12, 10, 9], [1.0, 1.2, 2.75], [0.0; 3]).unwrap();
        let mut vectors = vec![[0.0; 3]; grid.num_voxels()];
        for k in 0..grid.dims[2] {
            for j in 0..grid.dims[1] {
                for i in 0..grid.dims[0] {
                    let w = grid.world(i, j, k);
                    vectors[grid.index(i, j, k)] = [
                        4.6 * (0.31 * w[0]).sin() * (0.21 * w[1]).cos(),
                        3.4 * (0.24 * w[1]).sin() * (0.4 * w[2]).cos(),
                        4.4 * (0.23 * w[2]).sin() * (0.12 * w[0]).sin(),
                    ];
                }
            }
        }
        let ddf = DisplacementField::new(grid, vectors).unwrap();
        let (jac_grad, folding) = jacobian_grad_stat(&ddf).unwrap();
        let (ref_grad, ref_fold) = reference_jac(&ddf);
        assert!((jac_grad - ref_grad).abs() < 1e-12, "{jac_grad} vs {ref_grad}");
        assert_eq!(folding, ref_fold);
        // The field was chosen strong enough to actually fold somewhere.
        assert!(folding > 0.0);
        assert!(jac_grad > 0.0);
    }

    #[test]
    fn jacobian_needs_three_voxels_per_axis() {
        let grid = Grid::new([2, 8, 8], [1.0; 3], [0.0; 3]).unwrap();
        let ddf = DisplacementField::zeros(grid);
        assert!(matches!(
            jacobian_grad_stat(&ddf).unwrap_err(),
            Error::GridTooSmall { min: 3, .. }
        ));
    }

    #[test]
    fn metrics_report_combines_the_individual_scores() {
        let grid = Grid::isotropic([20, 20, 20], 1.0).unwrap();
        let fixed = box_mask(&grid, [4, 4, 4], [15, 15, 15]);
        let moving = box_mask(&grid, [4, 4, 6], [15, 15, 17]);
        let ddf = constant_field(&grid, [0.0; 3]);
        let report = compute_metrics(&moving, &fixed, &ddf, None).unwrap();
        assert_eq!(
            report.dsc_whole,
            dice_binary(&moving, &fixed).unwrap()
        );
        // Fixed spans z 4..=15 (12 slices, thirds of 4). Slab z 4..8: the
        // zero-warped moving covers z 6..7 there -> dice = 2*2/(2+4) = 2/3.
        let area = 12.0 * 12.0;
        let expect_base = 2.0 * (2.0 * area) / (2.0 * area + 4.0 * area);
        assert!((report.dsc_base - expect_base).abs() < 1e-12);
        assert_eq!(report.dsc_mid, 1.0);
        assert_eq!(report.dsc_apex, 1.0);
        assert_eq!(report.tre_mm, None);
        assert_eq!(report.folding_fraction, 0.0);
        assert_eq!(report.jac_grad, 0.0);

        let lms = LandmarkSet::new(vec![Landmark {
            id: "m".into(),
            mask: ball_mask(&grid, grid.world_center(), 2.0),
        }])
        .unwrap();
        let with_tre = compute_metrics(&moving, &fixed, &ddf, Some((&lms, &lms))).unwrap();
        assert!(with_tre.tre_mm.unwrap() < 1e-12);
    }

    #[test]
    fn metrics_validate_kinds_grids_and_nonempty_fixed() {
        let grid = Grid::isotropic([10, 10, 10], 1.0).unwrap();
        let other = Grid::isotropic([11, 10, 10], 1.0).unwrap();
        let mask = ball_mask(&grid, grid.world_center(), 3.0);
        let ddf = constant_field(&grid, [0.0; 3]);
        let soft = mask.with_kind(VolumeKind::SoftMask).unwrap();
        assert!(matches!(
            compute_metrics(&soft, &mask, &ddf, None).unwrap_err(),
            Error::KindMismatch { .. }
        ));
        let off = Volume::zeros(other, VolumeKind::BinaryMask);
        assert!(matches!(
            compute_metrics(&mask, &off, &ddf, None).unwrap_err(),
            Error::GridMismatch { .. }
        ));
        let empty = Volume::zeros(grid, VolumeKind::BinaryMask);
        assert!(matches!(
            compute_metrics(&mask, &empty, &ddf, None).unwrap_err(),
            Error::EmptyMask { .. }
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn dice_is_symmetric(seed in 0u64..1000) {
            let grid = Grid::isotropic([8, 8, 8], 1.0).unwrap();
            let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
            let mut next = move || {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                state
            };
            let a_vals: Vec<f64> = (0..512).map(|_| (next() % 2) as f64).collect();
            let b_vals: Vec<f64> = (0..512).map(|_| (next() % 2) as f64).collect();
            let a = Volume::new(grid.clone(), VolumeKind::BinaryMask, a_vals).unwrap();
            let b = Volume::new(grid, VolumeKind::BinaryMask, b_vals).unwrap();
            prop_assert_eq!(dice_binary(&a, &b).unwrap(), dice_binary(&b, &a).unwrap());
        }

        #[test]
        fn region_split_partitions_the_mask(
            z0 in 0usize..10,
            depth in 1usize..14,
            x0 in 0usize..4,
        ) {
            let grid = Grid::isotropic([8, 8, 24], 1.0).unwrap();
            let mask = box_mask(&grid, [x0, 1, z0], [x0 + 3, 5, z0 + depth.min(23 - z0)]);
            let parts = region_split(&mask).unwrap();
            let total: usize = parts.iter().map(|p| p.foreground_count()).sum();
            prop_assert_eq!(total, mask.foreground_count());
            for idx in 0..mask.values().len() {
                let covered: usize = parts.iter().map(|p| (p.values()[idx] != 0.0) as usize).sum();
                let expect = (mask.values()[idx] != 0.0) as usize;
                prop_assert_eq!(covered, expect);
            }
        }

        #[test]
        fn jacobian_statistics_ignore_constant_shifts(
            shift_x in -5.0..5.0f64,
            shift_y in -5.0..5.0f64,
            amp in 0.1..2.0f64,
        ) {
            let grid = Grid::isotropic([9, 9, 9], 1.0).unwrap();
            let mut vectors = vec![[0.0; 3]; grid.num_voxels()];
            for k in 0..9 {
                for j in 0..9 {
                    for i in 0..9 {
                        let w = grid.world(i, j, k);
                        vectors[grid.index(i, j, k)] = [
                            amp * (0.5 * w[0]).sin(),
                            amp * (0.4 * w[1] + 0.2 * w[2]).cos(),
                            amp * (0.3 * w[2]).sin(),
                        ];
                    }
                }
            }
            let base = DisplacementField::new(grid.clone(), vectors.clone()).unwrap();
            for v in &mut vectors {
                v[0] += shift_x;
                v[1] += shift_y;
                v[2] += 0.5 * shift_x;
            }
            let shifted = DisplacementField::new(grid, vectors).unwrap();
            let a = jacobian_grad_stat(&base).unwrap();
            let b = jacobian_grad_stat(&shifted).unwrap();
            // Mathematically identical; rounding of (u + s) leaves only
            // ulp-level residue in the differences.
            prop_assert!((a.0 - b.0).abs() < 1e-9);
            prop_assert!((a.1 - b.1).abs() < 1e-12);
        }
    }
}
