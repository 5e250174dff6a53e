//! Bending energy of a displacement field: the mean squared second spatial
//! derivative over interior voxels, the smoothness penalty of the
//! registration objective.
//!
//! The reported energy uses the pure (unmixed) second derivatives only:
//! `mean over interior voxels and components of sum_axis (d2 u_c / d x_a^2)^2`
//! with central differences in 1/mm^2 units. The cross-derivative terms of
//! the full thin-plate energy can be enabled separately; they are excluded
//! from the default objective.

use crate::error::{Error, Result};
use crate::field::DisplacementField;

fn check_dims(ddf: &DisplacementField) -> Result<()> {
    if ddf.grid().dims.iter().any(|&n| n < 3) {
        return Err(Error::GridTooSmall {
            context: "bending_energy",
            min: 3,
        });
    }
    Ok(())
}

fn bending_impl(
    ddf: &DisplacementField,
    include_mixed: bool,
    want_grad: bool,
) -> Result<(f64, Vec<[f64; 3]>)> {
    check_dims(ddf)?;
    let grid = ddf.grid();
    let [nx, ny, nz] = grid.dims;
    let h = grid.spacing;
    let strides = [1usize, nx, nx * ny];
    let n = grid.num_voxels();
    let n_interior = ((nx - 2) * (ny - 2) * (nz - 2)) as f64;
    let vectors = ddf.vectors();

    let mut sum = 0.0;
    let mut grad = if want_grad { vec![[0.0; 3]; n] } else { Vec::new() };
    // Second-difference field for one (component, axis) at a time; zero
    // outside the interior so the gradient gather can read it unguarded by
    // value (bounds still guarded by coordinate).
    let mut d2 = vec![0.0; n];

    for c in 0..3 {
        for axis in 0..3 {
            let s = strides[axis];
            let inv_h2 = 1.0 / (h[axis] * h[axis]);
            d2.fill(0.0);
            for k in 1..nz - 1 {
                for j in 1..ny - 1 {
                    let row = grid.index(1, j, k);
                    for idx in row..row + nx - 2 {
                        let d =
                            (vectors[idx + s][c] - 2.0 * vectors[idx][c] + vectors[idx - s][c])
                                * inv_h2;
                        d2[idx] = d;
                        sum += d * d;
                    }
                }
            }
            if want_grad {
                let scale = 2.0 * inv_h2;
                for k in 0..nz {
                    for j in 0..ny {
                        for i in 0..nx {
                            let idx = grid.index(i, j, k);
                            let coord = [i, j, k][axis];
                            let axis_len = [nx, ny, nz][axis];
                            let mut acc = -2.0 * d2[idx];
                            if coord > 0 {
                                acc += d2[idx - s];
                            }
                            if coord + 1 < axis_len {
                                acc += d2[idx + s];
                            }
                            grad[idx][c] += scale * acc;
                        }
                    }
                }
            }
        }
        if include_mixed {
            for (a, b) in [(0usize, 1usize), (0, 2), (1, 2)] {
                let (sa, sb) = (strides[a], strides[b]);
                let inv_4h = 1.0 / (4.0 * h[a] * h[b]);
                d2.fill(0.0);
                for k in 1..nz - 1 {
                    for j in 1..ny - 1 {
                        for i in 1..nx - 1 {
                            let idx = grid.index(i, j, k);
                            let m = (vectors[idx + sa + sb][c] - vectors[idx + sa - sb][c]
                                - vectors[idx - sa + sb][c]
                                + vectors[idx - sa - sb][c])
                                * inv_4h;
                            d2[idx] = m;
                            sum += 2.0 * m * m;
                        }
                    }
                }
                if want_grad {
                    let scale = 1.0 / (h[a] * h[b]);
                    let lens = [nx, ny, nz];
                    for k in 0..nz {
                        for j in 0..ny {
                            for i in 0..nx {
                                let idx = grid.index(i, j, k);
                                let ca = [i, j, k][a];
                                let cb = [i, j, k][b];
                                let mut acc = 0.0;
                                if ca > 0 && cb > 0 {
                                    acc += d2[idx - sa - sb];
                                }
                                if ca + 1 < lens[a] && cb + 1 < lens[b] {
                                    acc += d2[idx + sa + sb];
                                }
                                if ca > 0 && cb + 1 < lens[b] {
                                    acc -= d2[idx - sa + sb];
                                }
                                if ca + 1 < lens[a] && cb > 0 {
                                    acc -= d2[idx + sa - sb];
                                }
                                grad[idx][c] += scale * acc;
                            }
                        }
                    }
                }
            }
        }
    }

    let norm = 1.0 / (3.0 * n_interior);
    sum *= norm;
    for g in &mut grad {
        for c in 0..3 {
            g[c] *= norm;
        }
    }
    Ok((sum, grad))
}

/// Bending energy value only (pure second derivatives).
pub fn bending_energy(ddf: &DisplacementField) -> Result<f64> {
    Ok(bending_impl(ddf, false, false)?.0)
}

/// Value plus d(energy)/d(displacement vector) per voxel.
pub(crate) fn bending_with_grad(
    ddf: &DisplacementField,
    include_mixed: bool,
) -> Result<(f64, Vec<[f64; 3]>)> {
    bending_impl(ddf, include_mixed, true)
}

/// Value only, with the cross-term flag exposed for the loss engine.
pub(crate) fn bending_value(ddf: &DisplacementField, include_mixed: bool) -> Result<f64> {
    Ok(bending_impl(ddf, include_mixed, false)?.0)
}
