//! Mean squared logarithmic error between signed distance maps, computed on
//! the rectified exterior distances only.
//!
//! Both maps are rectified with `max(d, 0)` before the `log1p`, so voxels
//! inside the structure (negative distance) contribute through their
//! rectified value 0: disagreement deep in the interior is ignored and the
//! loss concentrates on the exterior distance ramp near the boundary, with
//! the `log1p` compressing far-field distances.

use crate::error::{Error, Result};
use crate::volume::{Volume, VolumeKind};

fn check_sdm_pair(context: &'static str, p: &Volume, g: &Volume) -> Result<()> {
    if p.grid() != g.grid() {
        return Err(Error::GridMismatch { context });
    }
    for vol in [p, g] {
        if vol.kind() != VolumeKind::SdmMm {
            return Err(Error::KindMismatch {
                context,
                expected: "sdm-mm",
                actual: vol.kind().name(),
            });
        }
    }
    Ok(())
}

/// `log1p(max(d, 0))`: the rectified log-distance a single voxel contributes.
#[inline]
pub(crate) fn rectified_log(d: f64) -> f64 {
    d.max(0.0).ln_1p()
}

/// Mean over voxels of `(log1p(max(p, 0)) - log1p(max(g, 0)))^2` for two
/// signed distance maps (in mm) on the same grid.
pub fn msle_sdm(p: &Volume, g: &Volume) -> Result<f64> {
    check_sdm_pair("msle_sdm", p, g)?;
    let n = p.values().len() as f64;
    let sum: f64 = p
        .values()
        .iter()
        .zip(g.values())
        .map(|(&a, &b)| {
            let d = rectified_log(a) - rectified_log(b);
            d * d
        })
        .sum();
    Ok(sum / n)
}
