//! Dense displacement fields: one 3-vector in millimeters per grid voxel.

use crate::error::{Error, Result};
use crate::grid::Grid;

/// Per-voxel displacement in mm, defined on the fixed grid. The field maps
/// each fixed voxel center `x` to the sample position `x + u(x)` in the
/// moving image's world frame.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    grid: Grid,
    vectors: Vec<[f64; 3]>,
}

impl DisplacementField {
    /// Builds a field, checking length and that every component is finite.
    pub fn new(grid: Grid, vectors: Vec<[f64; 3]>) -> Result<Self> {
        if vectors.len() != grid.num_voxels() {
            return Err(Error::LengthMismatch {
                context: "displacement vectors",
                expected: grid.num_voxels(),
                actual: vectors.len(),
            });
        }
        for v in &vectors {
            if !(v[0].is_finite() && v[1].is_finite() && v[2].is_finite()) {
                return Err(Error::NonFinite { context: "displacement vectors" });
            }
        }
        Ok(Self { grid, vectors })
    }

    pub(crate) fn new_unchecked(grid: Grid, vectors: Vec<[f64; 3]>) -> Self {
        debug_assert_eq!(vectors.len(), grid.num_voxels());
        Self { grid, vectors }
    }

    /// Identity (all-zero) field.
    pub fn zeros(grid: Grid) -> Self {
        let n = grid.num_voxels();
        Self::new_unchecked(grid, vec![[0.0; 3]; n])
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn vectors(&self) -> &[[f64; 3]] {
        &self.vectors
    }

    pub(crate) fn vectors_mut(&mut self) -> &mut [[f64; 3]] {
        &mut self.vectors
    }

    /// Displacement at voxel (i, j, k).
    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        self.vectors[self.grid.index(i, j, k)]
    }

    /// Largest displacement magnitude in mm.
    pub fn max_magnitude(&self) -> f64 {
        self.vectors
            .iter()
            .map(|v| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_length_and_non_finite() {
        let g = Grid::new([2, 2, 2], [1.0; 3], [0.0; 3]).unwrap();
        assert!(matches!(
            DisplacementField::new(g.clone(), vec![[0.0; 3]; 5]).unwrap_err(),
            Error::LengthMismatch { .. }
        ));
        let mut v = vec![[0.0; 3]; 8];
        v[4][1] = f64::INFINITY;
        assert!(matches!(
            DisplacementField::new(g, v).unwrap_err(),
            Error::NonFinite { .. }
        ));
    }

    #[test]
    fn zeros_has_zero_magnitude() {
        let g = Grid::new([3, 3, 3], [1.0; 3], [0.0; 3]).unwrap();
        let f = DisplacementField::zeros(g);
        assert_eq!(f.max_magnitude(), 0.0);
        assert_eq!(f.at(2, 1, 0), [0.0; 3]);
    }
}
