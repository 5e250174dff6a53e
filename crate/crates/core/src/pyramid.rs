//! Multi-resolution displacement-field pyramid.
//!
//! A pyramid holds one displacement field per resolution level, coarsest
//! first. Level `k` of an `L`-level pyramid over a full-resolution grid with
//! `n` voxels and spacing `h` per axis uses the downsampling factor
//! `f = 2^(L - 1 - k)`: dimensions `ceil(n / f)`, spacing `h * f`, and the
//! same origin, so level `L - 1` is the full-resolution grid itself. The
//! effective field is the sum of every level trilinearly upsampled to full
//! resolution, which lets coarse levels move large structures while fine
//! levels add local detail.

use crate::error::{Error, Result};
use crate::field::DisplacementField;
use crate::grid::Grid;
use crate::interp::{axis_cell, sample_vec_raw};

/// A stack of displacement fields, coarsest first, whose upsampled sum is
/// the effective full-resolution field.
#[derive(Clone, Debug)]
pub struct DdfPyramid {
    levels: Vec<DisplacementField>,
    full_grid: Grid,
}

/// The grid of level `k` (0 = coarsest) of an `num_levels`-level pyramid
/// over `full`: factor `f = 2^(num_levels - 1 - k)`, dimensions rounded up.
pub fn level_grid(full: &Grid, num_levels: usize, k: usize) -> Result<Grid> {
    if num_levels == 0 || k >= num_levels {
        return Err(Error::ValueOutOfRange {
            context: "pyramid level",
            detail: format!("level {k} of {num_levels}"),
        });
    }
    let f = 1usize << (num_levels - 1 - k);
    let dims = std::array::from_fn(|a| full.dims[a].div_ceil(f));
    let spacing = std::array::from_fn(|a| full.spacing[a] * f as f64);
    Grid::new(dims, spacing, full.origin)
}

impl DdfPyramid {
    /// An all-zero pyramid with `num_levels` levels over `full_grid`.
    pub fn zeros(full_grid: &Grid, num_levels: usize) -> Result<Self> {
        let levels = (0..num_levels)
            .map(|k| Ok(DisplacementField::zeros(level_grid(full_grid, num_levels, k)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(DdfPyramid {
            levels,
            full_grid: full_grid.clone(),
        })
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn full_grid(&self) -> &Grid {
        &self.full_grid
    }

    pub fn level(&self, k: usize) -> &DisplacementField {
        &self.levels[k]
    }

    pub(crate) fn level_mut(&mut self, k: usize) -> &mut DisplacementField {
        &mut self.levels[k]
    }

    /// The effective full-resolution field: starting from the coarsest
    /// level, the running sum is upsampled to the next level's grid and
    /// that level's field added, ending on the full-resolution grid.
    pub fn compose(&self) -> DisplacementField {
        let mut acc = self.levels[0].clone();
        for level in &self.levels[1..] {
            let mut up = upsample_ddf(&acc, level.grid())
                .expect("pyramid level grids are nested coarse to fine");
            for (a, v) in up.vectors_mut().iter_mut().zip(level.vectors()) {
                for c in 0..3 {
                    a[c] += v[c];
                }
            }
            acc = up;
        }
        acc
    }

    /// Reverse-mode gradient of [`Self::compose`]: given the derivative of a
    /// scalar objective with respect to the composed full-resolution field,
    /// returns its derivative with respect to every level's field, by
    /// scattering backwards through the chain of upsampling stages.
    pub(crate) fn compose_grad(&self, upstream: &[[f64; 3]]) -> Vec<Vec<[f64; 3]>> {
        debug_assert_eq!(upstream.len(), self.full_grid.num_voxels());
        let l = self.levels.len();
        let mut out: Vec<Vec<[f64; 3]>> = Vec::with_capacity(l);
        out.resize(l, Vec::new());
        out[l - 1] = upstream.to_vec();
        for k in (0..l - 1).rev() {
            let pulled = upsample_adjoint(
                self.levels[k].grid(),
                self.levels[k + 1].grid(),
                &out[k + 1],
            );
            out[k] = pulled;
        }
        out
    }
}

/// Trilinearly upsamples a displacement field onto a finer (or equal) grid.
/// The target must have at least as many voxels along every axis.
pub fn upsample_ddf(field: &DisplacementField, target: &Grid) -> Result<DisplacementField> {
    for axis in 0..3 {
        if target.dims[axis] < field.grid().dims[axis] {
            return Err(Error::TargetCoarser { axis });
        }
    }
    let mut vectors = Vec::with_capacity(target.num_voxels());
    for k in 0..target.dims[2] {
        for j in 0..target.dims[1] {
            for i in 0..target.dims[0] {
                let p = target.world(i, j, k);
                vectors.push(sample_vec_raw(field.grid(), field.vectors(), p));
            }
        }
    }
    Ok(DisplacementField::new_unchecked(target.clone(), vectors))
}

/// Adjoint of [`upsample_ddf`]: scatters a per-voxel derivative on the
/// target grid back onto the source grid using exactly the interpolation
/// weights the forward upsample reads with. Satisfies
/// `dot(upsample(x), y) == dot(x, upsample_adjoint(y))`.
pub(crate) fn upsample_adjoint(
    source: &Grid,
    target: &Grid,
    upstream: &[[f64; 3]],
) -> Vec<[f64; 3]> {
    debug_assert_eq!(upstream.len(), target.num_voxels());
    let mut out = vec![[0.0f64; 3]; source.num_voxels()];
    let nx = source.dims[0];
    let nxy = nx * source.dims[1];
    let mut idx = 0;
    for k in 0..target.dims[2] {
        for j in 0..target.dims[1] {
            for i in 0..target.dims[0] {
                let u = source.continuous_index(target.world(i, j, k));
                let cx = axis_cell(u[0], source.dims[0]);
                let cy = axis_cell(u[1], source.dims[1]);
                let cz = axis_cell(u[2], source.dims[2]);
                let up = upstream[idx];
                let (wx1, wy1, wz1) = (cx.frac, cy.frac, cz.frac);
                let (wx0, wy0, wz0) = (1.0 - wx1, 1.0 - wy1, 1.0 - wz1);
                for (iz, wz) in [(cz.i0, wz0), (cz.i1, wz1)] {
                    for (iy, wy) in [(cy.i0, wy0), (cy.i1, wy1)] {
                        let base = iy * nx + iz * nxy;
                        let wyz = wy * wz;
                        for (ix, wx) in [(cx.i0, wx0), (cx.i1, wx1)] {
                            let w = wx * wyz;
                            if w != 0.0 {
                                let o = &mut out[ix + base];
                                for c in 0..3 {
                                    o[c] += w * up[c];
                                }
                            }
                        }
                    }
                }
                idx += 1;
            }
        }
    }
    out
}
