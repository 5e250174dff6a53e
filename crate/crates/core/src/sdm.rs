//! Signed Euclidean distance maps of binary masks.
//!
//! Distances are exact (not chamfer approximations), measured in mm between
//! voxel centers with anisotropic spacing honored, computed with the
//! separable lower-envelope-of-parabolas transform. Inside the mask the sign
//! is negative. Because distances run between voxel centers of opposite
//! classes, no voxel is ever exactly 0.

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::volume::{Volume, VolumeKind};

/// Signed distance map of a binary mask, in mm.
///
/// Fails on non-binary input and on masks that are entirely one class
/// (distance to the absent class would be undefined).
pub fn signed_distance_map(mask: &Volume) -> Result<Volume> {
    if mask.kind() != VolumeKind::BinaryMask {
        return Err(Error::KindMismatch {
            context: "signed_distance_map",
            expected: VolumeKind::BinaryMask.name(),
            actual: mask.kind().name(),
        });
    }
    let fg = mask.foreground_count();
    if fg == 0 {
        return Err(Error::EmptyMask { context: "signed_distance_map (all background)" });
    }
    if fg == mask.grid().num_voxels() {
        return Err(Error::EmptyMask { context: "signed_distance_map (all foreground)" });
    }

    let grid = mask.grid();
    let is_fg: Vec<bool> = mask.values().iter().map(|&v| v >= 0.5).collect();
    let dist_sq_to_fg = edt_squared(grid, |idx| is_fg[idx]);
    let dist_sq_to_bg = edt_squared(grid, |idx| !is_fg[idx]);

    let values = is_fg
        .iter()
        .zip(dist_sq_to_fg.iter().zip(&dist_sq_to_bg))
        .map(|(&inside, (&d_fg, &d_bg))| {
            if inside {
                -d_bg.sqrt()
            } else {
                d_fg.sqrt()
            }
        })
        .collect();
    Ok(Volume::new_unchecked(grid.clone(), VolumeKind::SdmMm, values))
}

/// Squared Euclidean distance (mm^2) from every voxel center to the nearest
/// site voxel center, via three separable 1D transforms.
fn edt_squared(grid: &Grid, is_site: impl Fn(usize) -> bool) -> Vec<f64> {
    let [nx, ny, nz] = grid.dims;
    let n = grid.num_voxels();
    let mut dist = vec![f64::INFINITY; n];
    for idx in 0..n {
        if is_site(idx) {
            dist[idx] = 0.0;
        }
    }

    let max_axis = nx.max(ny).max(nz);
    let mut line = vec![0.0; max_axis];
    let mut out = vec![0.0; max_axis];
    let mut scratch = Scratch::new(max_axis);

    // Pass along x.
    for k in 0..nz {
        for j in 0..ny {
            let base = grid.index(0, j, k);
            line[..nx].copy_from_slice(&dist[base..base + nx]);
            transform_1d(&line[..nx], grid.spacing[0], &mut out[..nx], &mut scratch);
            dist[base..base + nx].copy_from_slice(&out[..nx]);
        }
    }
    // Pass along y.
    for k in 0..nz {
        for i in 0..nx {
            for j in 0..ny {
                line[j] = dist[grid.index(i, j, k)];
            }
            transform_1d(&line[..ny], grid.spacing[1], &mut out[..ny], &mut scratch);
            for j in 0..ny {
                dist[grid.index(i, j, k)] = out[j];
            }
        }
    }
    // Pass along z.
    for j in 0..ny {
        for i in 0..nx {
            for k in 0..nz {
                line[k] = dist[grid.index(i, j, k)];
            }
            transform_1d(&line[..nz], grid.spacing[2], &mut out[..nz], &mut scratch);
            for k in 0..nz {
                dist[grid.index(i, j, k)] = out[k];
            }
        }
    }
    dist
}

struct Scratch {
    /// Index of the parabola owning each envelope segment.
    v: Vec<usize>,
    /// Segment boundaries in mm.
    z: Vec<f64>,
}

impl Scratch {
    fn new(n: usize) -> Self {
        Scratch { v: vec![0; n + 1], z: vec![0.0; n + 2] }
    }
}

/// 1D squared-distance transform at spacing `h`:
/// `out[q] = min_p (f[p] + ((q - p) * h)^2)`, with `f` allowed to contain
/// infinities (rows that have not seen a site yet).
fn transform_1d(f: &[f64], h: f64, out: &mut [f64], s: &mut Scratch) {
    let n = f.len();
    let mut k = 0usize;
    let mut any = false;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let xq = q as f64 * h;
        if !any {
            any = true;
            s.v[0] = q;
            s.z[0] = f64::NEG_INFINITY;
            s.z[1] = f64::INFINITY;
            continue;
        }
        // Pop envelope parabolas dominated by the new one, then append it.
        // The intersection is recomputed against the segment owner after
        // every pop; it can never sink below z[0] = -inf, so k >= 0 holds.
        let inter = loop {
            let p = s.v[k];
            let xp = p as f64 * h;
            let inter = ((f[q] + xq * xq) - (f[p] + xp * xp)) / (2.0 * xq - 2.0 * xp);
            if k > 0 && inter <= s.z[k] {
                k -= 1;
            } else {
                break inter;
            }
        };
        k += 1;
        s.v[k] = q;
        s.z[k] = inter;
        s.z[k + 1] = f64::INFINITY;
    }
    if !any {
        out[..n].fill(f64::INFINITY);
        return;
    }
    let mut seg = 0usize;
    for q in 0..n {
        let xq = q as f64 * h;
        while s.z[seg + 1] < xq {
            seg += 1;
        }
        let p = s.v[seg];
        let d = xq - p as f64 * h;
        out[q] = d * d + f[p];
    }
}
