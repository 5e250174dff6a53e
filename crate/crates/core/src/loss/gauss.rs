//! Separable Gaussian smoothing of mask volumes, plus the transpose of the
//! smoothing operator for gradient back-propagation.
//!
//! The kernel is a sampled Gaussian of radius `ceil(3 * sigma)` (sigma in
//! voxel units, per axis, regardless of spacing), normalized to sum 1.
//! Near the borders the weights that fall outside the grid are dropped and
//! the remainder renormalized, so constants are preserved exactly and no
//! mass is invented.

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::volume::{Volume, VolumeKind};

/// Normalized sampled-Gaussian taps for one axis; length `2 * r + 1` with
/// `r = ceil(3 * sigma)`. Caller guarantees `sigma > 0`.
pub(crate) fn kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-r..=r)
        .map(|t| (-(t as f64) * (t as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Sum of in-range kernel weights for every position along an axis of
/// length `n` — the border renormalization factors.
fn border_norms(n: usize, kernel: &[f64]) -> Vec<f64> {
    let r = kernel.len() / 2;
    (0..n)
        .map(|i| {
            let lo = r.saturating_sub(i);
            let hi = (kernel.len()).min(n + r - i);
            kernel[lo..hi].iter().sum()
        })
        .collect()
}

enum PassMode {
    /// out = (K * in) / N  — the forward renormalized smoothing.
    Renormalize,
    /// out = K * (in / N)  — the transpose of the forward pass.
    PreScale,
}

/// One correlation pass along a line. `kernel` is symmetric, so correlation
/// and convolution coincide.
fn convolve_line(
    input: &[f64],
    kernel: &[f64],
    norms: &[f64],
    mode: &PassMode,
    scratch: &mut Vec<f64>,
    out: &mut [f64],
) {
    let n = input.len();
    let r = kernel.len() / 2;
    let src: &[f64] = match mode {
        PassMode::Renormalize => input,
        PassMode::PreScale => {
            scratch.clear();
            scratch.extend(input.iter().zip(norms).map(|(v, nm)| v / nm));
            scratch
        }
    };
    for i in 0..n {
        let lo = r.saturating_sub(i);
        let hi = kernel.len().min(n + r - i);
        let base = i + lo - r;
        let kseg = &kernel[lo..hi];
        let sseg = &src[base..base + (hi - lo)];
        // Four independent accumulators hide the floating-point add latency;
        // this loop dominates every registration iteration.
        let (mut a0, mut a1, mut a2, mut a3) = (0.0, 0.0, 0.0, 0.0);
        for (kc, sc) in kseg.chunks_exact(4).zip(sseg.chunks_exact(4)) {
            a0 += kc[0] * sc[0];
            a1 += kc[1] * sc[1];
            a2 += kc[2] * sc[2];
            a3 += kc[3] * sc[3];
        }
        for (kv, sv) in kseg
            .chunks_exact(4)
            .remainder()
            .iter()
            .zip(sseg.chunks_exact(4).remainder())
        {
            a0 += kv * sv;
        }
        let acc = (a0 + a1) + (a2 + a3);
        out[i] = match mode {
            PassMode::Renormalize => acc / norms[i],
            PassMode::PreScale => acc,
        };
    }
}

fn separable_pass(grid: &Grid, values: &[f64], sigma: f64, mode: PassMode) -> Vec<f64> {
    let kern = kernel(sigma);
    let [nx, ny, nz] = grid.dims;
    let norms: [Vec<f64>; 3] = [
        border_norms(nx, &kern),
        border_norms(ny, &kern),
        border_norms(nz, &kern),
    ];
    let mut cur = values.to_vec();
    let mut line = vec![0.0; nx.max(ny).max(nz)];
    let mut out_line = vec![0.0; nx.max(ny).max(nz)];
    let mut scratch = Vec::new();

    // x pass
    for k in 0..nz {
        for j in 0..ny {
            let base = grid.index(0, j, k);
            line[..nx].copy_from_slice(&cur[base..base + nx]);
            convolve_line(&line[..nx], &kern, &norms[0], &mode, &mut scratch, &mut out_line[..nx]);
            cur[base..base + nx].copy_from_slice(&out_line[..nx]);
        }
    }
    // y pass
    for k in 0..nz {
        for i in 0..nx {
            for j in 0..ny {
                line[j] = cur[grid.index(i, j, k)];
            }
            convolve_line(&line[..ny], &kern, &norms[1], &mode, &mut scratch, &mut out_line[..ny]);
            for j in 0..ny {
                cur[grid.index(i, j, k)] = out_line[j];
            }
        }
    }
    // z pass
    for j in 0..ny {
        for i in 0..nx {
            for k in 0..nz {
                line[k] = cur[grid.index(i, j, k)];
            }
            convolve_line(&line[..nz], &kern, &norms[2], &mode, &mut scratch, &mut out_line[..nz]);
            for k in 0..nz {
                cur[grid.index(i, j, k)] = out_line[k];
            }
        }
    }
    cur
}

/// Raw smoothing used by the loss engine; `sigma == 0` is the identity.
pub(crate) fn smooth_raw(grid: &Grid, values: &[f64], sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return values.to_vec();
    }
    separable_pass(grid, values, sigma, PassMode::Renormalize)
}

/// Transpose of [`smooth_raw`] (exact adjoint of the renormalized-border
/// operator), used to pull loss derivatives back through the smoothing.
pub(crate) fn smooth_transpose_raw(grid: &Grid, values: &[f64], sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return values.to_vec();
    }
    separable_pass(grid, values, sigma, PassMode::PreScale)
}

/// Gaussian-smooths a binary or soft mask with sigma in voxel units.
/// `sigma == 0` returns the input values unchanged (as a soft mask).
pub fn gaussian_smooth(mask: &Volume, sigma: f64) -> Result<Volume> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(Error::ValueOutOfRange {
            context: "gaussian_smooth sigma",
            detail: format!("{sigma}"),
        });
    }
    match mask.kind() {
        VolumeKind::BinaryMask | VolumeKind::SoftMask => {}
        other => {
            return Err(Error::KindMismatch {
                context: "gaussian_smooth",
                expected: "binary-mask or soft-mask",
                actual: other.name(),
            });
        }
    }
    let mut values = smooth_raw(mask.grid(), mask.values(), sigma);
    // Renormalized averaging of [0, 1] values stays in [0, 1] up to rounding;
    // clamp the stray ulp so the soft-mask invariant holds.
    for v in &mut values {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(Volume::new_unchecked(
        mask.grid().clone(),
        VolumeKind::SoftMask,
        values,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn delta_mask(dims: [usize; 3], at: [usize; 3]) -> Volume {
        let grid = Grid::isotropic(dims, 1.0).unwrap();
        let mut values = vec![0.0; grid.num_voxels()];
        values[grid.index(at[0], at[1], at[2])] = 1.0;
        Volume::new(grid, VolumeKind::BinaryMask, values).unwrap()
    }

    /// Reference taps computed directly from the Gaussian formula.
    fn reference_kernel(sigma: f64) -> Vec<f64> {
        let r = (3.0 * sigma).ceil() as i64;
        let raw: Vec<f64> = (-r..=r)
            .map(|t| (-((t * t) as f64) / (2.0 * sigma * sigma)).exp())
            .collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    }

    #[test]
    fn sigma_zero_is_identity_with_soft_kind() {
        let mask = delta_mask([5, 5, 5], [2, 2, 2]);
        let out = gaussian_smooth(&mask, 0.0).unwrap();
        assert_eq!(out.kind(), VolumeKind::SoftMask);
        assert_eq!(out.values(), mask.values());
    }

    #[test]
    fn constant_mask_stays_constant_through_borders() {
        let grid = Grid::isotropic([6, 5, 4], 1.0).unwrap();
        let c = 0.37;
        let vol = Volume::new(grid, VolumeKind::SoftMask, vec![c; 120]).unwrap();
        for sigma in [0.5, 1.0, 2.0, 8.0] {
            let out = gaussian_smooth(&vol, sigma).unwrap();
            for &v in out.values() {
                assert!((v - c).abs() < 1e-12, "sigma {sigma}: {v}");
            }
        }
    }

    #[test]
    fn interior_delta_profile_matches_kernel_weights() {
        // sigma = 1 -> radius 3. Every probed response position must keep
        // its full window inside the grid (no border renormalization), which
        // needs the delta at least 2 radii from every face: use a 15-cube.
        let mask = delta_mask([15, 15, 15], [7, 7, 7]);
        let out = gaussian_smooth(&mask, 1.0).unwrap();
        let k = reference_kernel(1.0);
        let k0 = k[3];
        for dx in -3i64..=3 {
            let want = k[(dx + 3) as usize] * k0 * k0;
            let got = out.at((7 + dx) as usize, 7, 7);
            assert!((got - want).abs() < 1e-14, "dx {dx}: {got} vs {want}");
        }
        // Beyond the kernel radius the response is exactly zero.
        assert_eq!(out.at(3, 7, 7), 0.0);
    }

    #[test]
    fn corner_delta_uses_renormalized_weights() {
        // At the corner only the half-kernel [0..=r] is in range per axis.
        let mask = delta_mask([9, 9, 9], [0, 0, 0]);
        let out = gaussian_smooth(&mask, 1.0).unwrap();
        let k = reference_kernel(1.0);
        let half: f64 = k[3..].iter().sum();
        let want = (k[3] / half).powi(3);
        assert!((out.at(0, 0, 0) - want).abs() < 1e-14);
    }

    #[test]
    fn transpose_is_the_adjoint_of_forward() {
        let grid = Grid::new([7, 6, 5], [1.0; 3], [0.0; 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<f64> = (0..grid.num_voxels()).map(|_| rng.random::<f64>()).collect();
        let y: Vec<f64> = (0..grid.num_voxels())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        for sigma in [0.7, 1.0, 2.0, 4.0] {
            let sx = smooth_raw(&grid, &x, sigma);
            let sty = smooth_transpose_raw(&grid, &y, sigma);
            let lhs: f64 = sx.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&sty).map(|(a, b)| a * b).sum();
            assert!(
                (lhs - rhs).abs() <= 1e-12 * lhs.abs().max(rhs.abs()).max(1.0),
                "sigma {sigma}: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn separable_smoothing_matches_naive_three_d_oracle() {
        // Independent oracle: brute-force 3-D kernel with the weights that
        // fall outside the grid dropped and the remainder renormalized over
        // the in-range box. The separable pass is mathematically identical
        // because the box normalizer factors into per-axis normalizers.
        let grid = Grid::isotropic([9, 8, 7], 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let values: Vec<f64> = (0..grid.num_voxels()).map(|_| rng.random::<f64>()).collect();
        let sigma = 1.3;
        let k = reference_kernel(sigma);
        let r = (k.len() / 2) as i64;
        let [nx, ny, nz] = grid.dims;
        let got = smooth_raw(&grid, &values, sigma);
        for kz in 0..nz as i64 {
            for jy in 0..ny as i64 {
                for ix in 0..nx as i64 {
                    let mut num = 0.0;
                    let mut den = 0.0;
                    for dz in -r..=r {
                        for dy in -r..=r {
                            for dx in -r..=r {
                                let (x, y, z) = (ix + dx, jy + dy, kz + dz);
                                if x < 0 || y < 0 || z < 0 {
                                    continue;
                                }
                                let (x, y, z) = (x as usize, y as usize, z as usize);
                                if x >= nx || y >= ny || z >= nz {
                                    continue;
                                }
                                let w = k[(dx + r) as usize]
                                    * k[(dy + r) as usize]
                                    * k[(dz + r) as usize];
                                num += w * values[grid.index(x, y, z)];
                                den += w;
                            }
                        }
                    }
                    let want = num / den;
                    let have = got[grid.index(ix as usize, jy as usize, kz as usize)];
                    assert!(
                        (have - want).abs() <= 1e-10 * want.abs().max(1.0),
                        "({ix},{jy},{kz}): {have} vs {want}"
                    );
                }
            }
        }
    }

    #[test]
    fn soft_output_stays_in_unit_interval() {
        let grid = Grid::isotropic([8, 8, 8], 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let values: Vec<f64> = (0..512)
            .map(|_| if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 })
            .collect();
        let mask = Volume::new(grid, VolumeKind::BinaryMask, values).unwrap();
        for sigma in [0.3, 1.0, 2.0, 8.0] {
            let out = gaussian_smooth(&mask, sigma).unwrap();
            assert!(out.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn invalid_sigma_or_kind_is_rejected() {
        let mask = delta_mask([4, 4, 4], [1, 1, 1]);
        assert!(matches!(
            gaussian_smooth(&mask, -1.0).unwrap_err(),
            Error::ValueOutOfRange { .. }
        ));
        assert!(gaussian_smooth(&mask, f64::NAN).is_err());
        let intensity = mask.with_kind(VolumeKind::Intensity).unwrap();
        assert!(matches!(
            gaussian_smooth(&intensity, 1.0).unwrap_err(),
            Error::KindMismatch { .. }
        ));
    }
}
