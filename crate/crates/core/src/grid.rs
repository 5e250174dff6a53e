//! Voxel grid geometry: dimensions, spacing and origin in millimeters.
//!
//! World coordinates follow the voxel-center model: voxel `(i, j, k)` sits at
//! `origin + (i, j, k) * spacing`, with no rotation component.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Regular axis-aligned 3D grid.
///
/// Values attached to a grid are stored row-major with x fastest:
/// `index = i + dims[0] * (j + dims[1] * k)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    /// Voxel counts per axis, all positive.
    pub dims: [usize; 3],
    /// Voxel spacing in mm per axis, all positive.
    pub spacing: [f64; 3],
    /// World position of voxel (0, 0, 0) in mm.
    pub origin: [f64; 3],
}

impl Grid {
    /// Builds a grid, validating that dims are positive and spacing/origin
    /// are finite with positive spacing.
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        for a in 0..3 {
            if dims[a] == 0 {
                return Err(Error::ValueOutOfRange {
                    context: "grid dims",
                    detail: format!("axis {a} has zero voxels"),
                });
            }
            if !spacing[a].is_finite() || spacing[a] <= 0.0 {
                return Err(Error::ValueOutOfRange {
                    context: "grid spacing",
                    detail: format!("axis {a}: {}", spacing[a]),
                });
            }
            if !origin[a].is_finite() {
                return Err(Error::NonFinite { context: "grid origin" });
            }
        }
        Ok(Self { dims, spacing, origin })
    }

    /// Isotropic grid at the given spacing with origin 0.
    pub fn isotropic(dims: [usize; 3], spacing: f64) -> Result<Self> {
        Self::new(dims, [spacing; 3], [0.0; 3])
    }

    /// Total number of voxels.
    pub fn num_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// Flat index of voxel (i, j, k); x fastest.
    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    /// Inverse of [`Grid::index`].
    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let rest = idx / self.dims[0];
        [i, rest % self.dims[1], rest / self.dims[1]]
    }

    /// World position (mm) of the center of voxel (i, j, k).
    #[inline]
    pub fn world(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [
            self.origin[0] + i as f64 * self.spacing[0],
            self.origin[1] + j as f64 * self.spacing[1],
            self.origin[2] + k as f64 * self.spacing[2],
        ]
    }

    /// Continuous voxel index of a world point: `(p - origin) / spacing`.
    /// Not clamped; callers decide how to treat out-of-grid positions.
    #[inline]
    pub fn continuous_index(&self, p: [f64; 3]) -> [f64; 3] {
        [
            (p[0] - self.origin[0]) / self.spacing[0],
            (p[1] - self.origin[1]) / self.spacing[1],
            (p[2] - self.origin[2]) / self.spacing[2],
        ]
    }

    /// World position of the grid center, `origin + (dims - 1) / 2 * spacing`.
    pub fn world_center(&self) -> [f64; 3] {
        [
            self.origin[0] + (self.dims[0] - 1) as f64 * 0.5 * self.spacing[0],
            self.origin[1] + (self.dims[1] - 1) as f64 * 0.5 * self.spacing[1],
            self.origin[2] + (self.dims[2] - 1) as f64 * 0.5 * self.spacing[2],
        ]
    }

    /// Length of the voxel diagonal in mm.
    pub fn voxel_diagonal(&self) -> f64 {
        (self.spacing[0] * self.spacing[0]
            + self.spacing[1] * self.spacing[1]
            + self.spacing[2] * self.spacing[2])
            .sqrt()
    }
}
