//! Trilinear sampling, warping and resampling.
//!
//! Sampling clamps to the edge: positions outside the grid take the nearest
//! border value. Interpolation is written in nested-lerp form
//! `a + t * (b - a)` so constant fields are reproduced exactly, and
//! continuous indices within 1e-9 of a voxel center are snapped onto it so
//! identity warps and identity resamples are bit-exact.

use crate::error::{Error, Result};
use crate::field::DisplacementField;
use crate::grid::Grid;
use crate::volume::{Volume, VolumeKind};

/// Snapping tolerance in continuous-index units.
const SNAP_EPS: f64 = 1e-9;

/// Interpolation scheme for [`resample_to_grid`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interp {
    Trilinear,
    /// Nearest voxel center; ties round away from zero.
    Nearest,
}

/// Per-axis interpolation cell: corner indices, fractional position and
/// whether the raw coordinate fell outside the grid (clamped to the edge,
/// where the interpolant is constant and its derivative zero).
#[derive(Clone, Copy)]
pub(crate) struct AxisCell {
    pub(crate) i0: usize,
    pub(crate) i1: usize,
    pub(crate) frac: f64,
    pub(crate) clamped: bool,
}

#[inline]
pub(crate) fn axis_cell(u_raw: f64, n: usize) -> AxisCell {
    if n == 1 {
        // A single-voxel axis is constant; any coordinate maps onto it.
        return AxisCell { i0: 0, i1: 0, frac: 0.0, clamped: true };
    }
    let mut u = u_raw;
    let r = u.round();
    if (u - r).abs() <= SNAP_EPS {
        u = r;
    }
    let max = (n - 1) as f64;
    let clamped = u < 0.0 || u > max;
    let uc = u.clamp(0.0, max);
    let mut i0 = uc.floor() as usize;
    if i0 > n - 2 {
        i0 = n - 2;
    }
    AxisCell { i0, i1: i0 + 1, frac: uc - i0 as f64, clamped }
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    // t == 1.0 only happens when a coordinate sits exactly on the top grid
    // edge; `a + (b - a)` would lose bit-exactness there.
    if t == 1.0 {
        b
    } else {
        a + t * (b - a)
    }
}

/// Trilinear sample of raw values at a world point (mm).
#[inline]
pub(crate) fn sample_raw(grid: &Grid, values: &[f64], point: [f64; 3]) -> f64 {
    let u = grid.continuous_index(point);
    let cx = axis_cell(u[0], grid.dims[0]);
    let cy = axis_cell(u[1], grid.dims[1]);
    let cz = axis_cell(u[2], grid.dims[2]);

    let nx = grid.dims[0];
    let nxy = nx * grid.dims[1];
    let base00 = cy.i0 * nx + cz.i0 * nxy;
    let base10 = cy.i1 * nx + cz.i0 * nxy;
    let base01 = cy.i0 * nx + cz.i1 * nxy;
    let base11 = cy.i1 * nx + cz.i1 * nxy;

    let c00 = lerp(values[cx.i0 + base00], values[cx.i1 + base00], cx.frac);
    let c10 = lerp(values[cx.i0 + base10], values[cx.i1 + base10], cx.frac);
    let c01 = lerp(values[cx.i0 + base01], values[cx.i1 + base01], cx.frac);
    let c11 = lerp(values[cx.i0 + base11], values[cx.i1 + base11], cx.frac);
    let c0 = lerp(c00, c10, cy.frac);
    let c1 = lerp(c01, c11, cy.frac);
    lerp(c0, c1, cz.frac)
}

/// Trilinear sample plus its gradient with respect to the world point,
/// in 1/mm. Components along clamped axes are zero.
#[inline]
pub(crate) fn sample_grad_raw(grid: &Grid, values: &[f64], point: [f64; 3]) -> (f64, [f64; 3]) {
    let u = grid.continuous_index(point);
    let cx = axis_cell(u[0], grid.dims[0]);
    let cy = axis_cell(u[1], grid.dims[1]);
    let cz = axis_cell(u[2], grid.dims[2]);

    let nx = grid.dims[0];
    let nxy = nx * grid.dims[1];
    let v = |ix: usize, iy: usize, iz: usize| values[ix + iy * nx + iz * nxy];

    let v000 = v(cx.i0, cy.i0, cz.i0);
    let v100 = v(cx.i1, cy.i0, cz.i0);
    let v010 = v(cx.i0, cy.i1, cz.i0);
    let v110 = v(cx.i1, cy.i1, cz.i0);
    let v001 = v(cx.i0, cy.i0, cz.i1);
    let v101 = v(cx.i1, cy.i0, cz.i1);
    let v011 = v(cx.i0, cy.i1, cz.i1);
    let v111 = v(cx.i1, cy.i1, cz.i1);

    let c00 = lerp(v000, v100, cx.frac);
    let c10 = lerp(v010, v110, cx.frac);
    let c01 = lerp(v001, v101, cx.frac);
    let c11 = lerp(v011, v111, cx.frac);
    let c0 = lerp(c00, c10, cy.frac);
    let c1 = lerp(c01, c11, cy.frac);
    let value = lerp(c0, c1, cz.frac);

    // d/dx: x-differences, bilinear in (y, z).
    let gx = lerp(
        lerp(v100 - v000, v110 - v010, cy.frac),
        lerp(v101 - v001, v111 - v011, cy.frac),
        cz.frac,
    );
    // d/dy: y-differences of the x-interpolated values, linear in z.
    let gy = lerp(c10 - c00, c11 - c01, cz.frac);
    // d/dz: z-difference of the xy-interpolated values.
    let gz = c1 - c0;

    let grad = [
        if cx.clamped { 0.0 } else { gx / grid.spacing[0] },
        if cy.clamped { 0.0 } else { gy / grid.spacing[1] },
        if cz.clamped { 0.0 } else { gz / grid.spacing[2] },
    ];
    (value, grad)
}

/// Trilinear sample of a vector field's components at a world point (mm),
/// sharing one cell computation across the three components.
#[inline]
pub(crate) fn sample_vec_raw(grid: &Grid, vectors: &[[f64; 3]], point: [f64; 3]) -> [f64; 3] {
    let u = grid.continuous_index(point);
    let cx = axis_cell(u[0], grid.dims[0]);
    let cy = axis_cell(u[1], grid.dims[1]);
    let cz = axis_cell(u[2], grid.dims[2]);

    let nx = grid.dims[0];
    let nxy = nx * grid.dims[1];
    let base00 = cy.i0 * nx + cz.i0 * nxy;
    let base10 = cy.i1 * nx + cz.i0 * nxy;
    let base01 = cy.i0 * nx + cz.i1 * nxy;
    let base11 = cy.i1 * nx + cz.i1 * nxy;

    std::array::from_fn(|c| {
        let c00 = lerp(vectors[cx.i0 + base00][c], vectors[cx.i1 + base00][c], cx.frac);
        let c10 = lerp(vectors[cx.i0 + base10][c], vectors[cx.i1 + base10][c], cx.frac);
        let c01 = lerp(vectors[cx.i0 + base01][c], vectors[cx.i1 + base01][c], cx.frac);
        let c11 = lerp(vectors[cx.i0 + base11][c], vectors[cx.i1 + base11][c], cx.frac);
        let c0 = lerp(c00, c10, cy.frac);
        let c1 = lerp(c01, c11, cy.frac);
        lerp(c0, c1, cz.frac)
    })
}

/// Trilinear sample of a volume at a world point (mm), clamped to the edge.
pub fn trilinear_sample(vol: &Volume, point: [f64; 3]) -> Result<f64> {
    if !(point[0].is_finite() && point[1].is_finite() && point[2].is_finite()) {
        return Err(Error::NonFinite { context: "sample point" });
    }
    Ok(sample_raw(vol.grid(), vol.values(), point))
}

/// Kind of the volume produced when `kind` is sampled trilinearly.
/// Binary masks yield fractional values and therefore become soft masks.
fn warped_kind(kind: VolumeKind) -> VolumeKind {
    match kind {
        VolumeKind::BinaryMask => VolumeKind::SoftMask,
        k => k,
    }
}

/// Clamps values of soft-mask outputs back into [0, 1]: nested lerps can
/// overshoot the bounds by a rounding ulp, which would violate the kind's
/// invariant downstream.
#[inline]
fn clamp_soft(kind: VolumeKind, v: f64) -> f64 {
    if kind == VolumeKind::SoftMask {
        v.clamp(0.0, 1.0)
    } else {
        v
    }
}

/// Warps a volume by a displacement field: `out(v) = vol(world(v) + ddf(v))`,
/// sampled trilinearly with edge clamping. The output lives on the field's
/// grid; the source may live on any grid.
pub fn warp(vol: &Volume, ddf: &DisplacementField) -> Volume {
    let grid = ddf.grid();
    let out_kind = warped_kind(vol.kind());
    let mut out = vec![0.0; grid.num_voxels()];
    let mut idx = 0;
    for k in 0..grid.dims[2] {
        for j in 0..grid.dims[1] {
            for i in 0..grid.dims[0] {
                let w = grid.world(i, j, k);
                let d = ddf.vectors()[idx];
                let p = [w[0] + d[0], w[1] + d[1], w[2] + d[2]];
                out[idx] = clamp_soft(out_kind, sample_raw(vol.grid(), vol.values(), p));
                idx += 1;
            }
        }
    }
    Volume::new_unchecked(grid.clone(), out_kind, out)
}

/// Warp returning, for every output voxel, both the sampled value and the
/// gradient of that value with respect to the voxel's displacement vector
/// (equal to the spatial gradient of the interpolant, in 1/mm).
pub(crate) fn warp_with_grad(vol: &Volume, ddf: &DisplacementField) -> (Vec<f64>, Vec<[f64; 3]>) {
    let grid = ddf.grid();
    let out_kind = warped_kind(vol.kind());
    let n = grid.num_voxels();
    let mut values = vec![0.0; n];
    let mut grads = vec![[0.0; 3]; n];
    let mut idx = 0;
    for k in 0..grid.dims[2] {
        for j in 0..grid.dims[1] {
            for i in 0..grid.dims[0] {
                let w = grid.world(i, j, k);
                let d = ddf.vectors()[idx];
                let p = [w[0] + d[0], w[1] + d[1], w[2] + d[2]];
                let (v, g) = sample_grad_raw(vol.grid(), vol.values(), p);
                values[idx] = clamp_soft(out_kind, v);
                grads[idx] = g;
                idx += 1;
            }
        }
    }
    (values, grads)
}

/// Back-propagates a per-voxel upstream derivative through [`warp`]:
/// returns `d(sum_v upstream[v] * warp(vol, ddf)[v]) / d ddf[v]` for every
/// voxel, a 3-vector per voxel in 1/mm.
pub fn warp_grad(
    vol: &Volume,
    ddf: &DisplacementField,
    upstream: &[f64],
) -> Result<Vec<[f64; 3]>> {
    if upstream.len() != ddf.grid().num_voxels() {
        return Err(Error::LengthMismatch {
            context: "warp upstream derivative",
            expected: ddf.grid().num_voxels(),
            actual: upstream.len(),
        });
    }
    let (_, grads) = warp_with_grad(vol, ddf);
    Ok(grads
        .iter()
        .zip(upstream)
        .map(|(g, &u)| [g[0] * u, g[1] * u, g[2] * u])
        .collect())
}

/// Resamples a volume onto a target grid. Trilinear resampling of a binary
/// mask is re-binarized at 0.5 so the output stays a binary mask; all other
/// kinds are preserved.
pub fn resample_to_grid(vol: &Volume, target: &Grid, interp: Interp) -> Volume {
    let n = target.num_voxels();
    let mut out = vec![0.0; n];
    match interp {
        Interp::Trilinear => {
            let mut idx = 0;
            for k in 0..target.dims[2] {
                for j in 0..target.dims[1] {
                    for i in 0..target.dims[0] {
                        out[idx] = sample_raw(vol.grid(), vol.values(), target.world(i, j, k));
                        idx += 1;
                    }
                }
            }
            match vol.kind() {
                VolumeKind::BinaryMask => {
                    for v in &mut out {
                        *v = if *v >= 0.5 { 1.0 } else { 0.0 };
                    }
                    Volume::new_unchecked(target.clone(), VolumeKind::BinaryMask, out)
                }
                kind => {
                    if kind == VolumeKind::SoftMask {
                        for v in &mut out {
                            *v = v.clamp(0.0, 1.0);
                        }
                    }
                    Volume::new_unchecked(target.clone(), kind, out)
                }
            }
        }
        Interp::Nearest => {
            let src = vol.grid();
            let mut idx = 0;
            for k in 0..target.dims[2] {
                for j in 0..target.dims[1] {
                    for i in 0..target.dims[0] {
                        let u = src.continuous_index(target.world(i, j, k));
                        let mut s = [0usize; 3];
                        for a in 0..3 {
                            let r = u[a].round();
                            let max = (src.dims[a] - 1) as f64;
                            s[a] = r.clamp(0.0, max) as usize;
                        }
                        out[idx] = vol.values()[src.index(s[0], s[1], s[2])];
                        idx += 1;
                    }
                }
            }
            Volume::new_unchecked(target.clone(), vol.kind(), out)
        }
    }
}
