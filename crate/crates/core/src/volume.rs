//! Scalar volumes on a [`Grid`], tagged with what their values mean.

use crate::error::{Error, Result};
use crate::grid::Grid;

/// Interpretation of a volume's scalar values.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VolumeKind {
    /// Non-negative image intensities (arbitrary scale, or [0, 1] after
    /// normalization).
    Intensity,
    /// Probabilities/partial-volume values in [0, 1].
    SoftMask,
    /// Hard segmentation, every value exactly 0 or 1.
    BinaryMask,
    /// Signed Euclidean distance in mm, negative inside the segmented object.
    SdmMm,
}

impl VolumeKind {
    /// Stable lowercase name, used by the CLI and Python layers.
    pub fn name(self) -> &'static str {
        match self {
            VolumeKind::Intensity => "intensity",
            VolumeKind::SoftMask => "soft-mask",
            VolumeKind::BinaryMask => "binary-mask",
            VolumeKind::SdmMm => "sdm-mm",
        }
    }
}

/// Dense scalar volume, stored row-major with x fastest.
#[derive(Clone, Debug)]
pub struct Volume {
    grid: Grid,
    kind: VolumeKind,
    values: Vec<f64>,
}

impl Volume {
    /// Builds a volume, checking the buffer length and the value range the
    /// kind implies (binary masks hold exactly {0, 1}, soft masks [0, 1];
    /// every kind must be finite).
    pub fn new(grid: Grid, kind: VolumeKind, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.num_voxels() {
            return Err(Error::LengthMismatch {
                context: "volume values",
                expected: grid.num_voxels(),
                actual: values.len(),
            });
        }
        for &v in &values {
            if !v.is_finite() {
                return Err(Error::NonFinite { context: "volume values" });
            }
            match kind {
                VolumeKind::BinaryMask if v != 0.0 && v != 1.0 => {
                    return Err(Error::ValueOutOfRange {
                        context: "binary mask values",
                        detail: format!("{v}"),
                    });
                }
                VolumeKind::SoftMask if !(0.0..=1.0).contains(&v) => {
                    return Err(Error::ValueOutOfRange {
                        context: "soft mask values",
                        detail: format!("{v}"),
                    });
                }
                _ => {}
            }
        }
        Ok(Self { grid, kind, values })
    }

    /// Internal constructor for values produced by operations that preserve
    /// the kind's invariants by construction.
    pub(crate) fn new_unchecked(grid: Grid, kind: VolumeKind, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.num_voxels());
        Self { grid, kind, values }
    }

    /// All-zero volume of the given kind.
    pub fn zeros(grid: Grid, kind: VolumeKind) -> Self {
        let n = grid.num_voxels();
        Self::new_unchecked(grid, kind, vec![0.0; n])
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn kind(&self) -> VolumeKind {
        self.kind
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Value at voxel (i, j, k).
    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.grid.index(i, j, k)]
    }

    /// Re-tags the volume with a different kind, revalidating the values.
    pub fn with_kind(&self, kind: VolumeKind) -> Result<Self> {
        Self::new(self.grid.clone(), kind, self.values.clone())
    }

    /// Thresholds at 0.5 into a binary mask (values >= 0.5 become 1).
    pub fn binarized(&self) -> Volume {
        let values = self
            .values
            .iter()
            .map(|&v| if v >= 0.5 { 1.0 } else { 0.0 })
            .collect();
        Volume::new_unchecked(self.grid.clone(), VolumeKind::BinaryMask, values)
    }

    /// Number of voxels with value >= 0.5.
    pub fn foreground_count(&self) -> usize {
        self.values.iter().filter(|&&v| v >= 0.5).count()
    }
}
