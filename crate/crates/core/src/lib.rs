//! Deformable 3D registration of segmented volumes.
//!
//! The crate aligns a moving segmented volume to a fixed one by directly
//! optimizing a multi-resolution dense displacement field against a
//! weakly-supervised objective: multiscale soft Dice on warped masks, a
//! squared-log error on signed distance maps, and bending energy as the
//! regularizer. Everything runs in double precision on the CPU with
//! deterministic, seedable behavior.

pub mod error;
pub mod field;
pub mod grid;
pub mod interp;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod phantom;
pub mod prealign;
pub mod pyramid;
pub mod sdm;
pub mod volume;

pub use error::{Error, Result};
pub use field::DisplacementField;
pub use grid::Grid;
pub use interp::{resample_to_grid, trilinear_sample, warp, warp_grad, Interp};
pub use io::{
    load_json, read_field_mhd, read_mhd, read_volume_mhd, save_json, write_field_mhd,
    write_report, write_volume_mhd, CaseManifest, CaseRecord, LandmarkPaths, MhdData,
};
pub use loss::bending::bending_energy;
pub use loss::dice::{multiscale_dice, soft_dice, DICE_EPSILON};
pub use loss::gauss::gaussian_smooth;
pub use loss::msle::msle_sdm;
pub use loss::{total_loss, total_loss_grad, LossBreakdown, LossWeights, DEFAULT_SIGMAS};
pub use metrics::{
    compute_metrics, dice_binary, jacobian_grad_stat, region_split, tre, Landmark, LandmarkSet,
    MetricsReport,
};
pub use optim::{register, Adam, RegistrationConfig, RegistrationResult};
pub use phantom::{generate_phantom, AffinePart, PhantomPair, PhantomSpec};
pub use prealign::{
    center_of_mass, coarse_align, normalize_intensity, PrealignResult, DEFAULT_TARGET_DIMS,
    DEFAULT_TARGET_SPACING_MM,
};
pub use pyramid::{level_grid, upsample_ddf, DdfPyramid};
pub use sdm::signed_distance_map;
pub use volume::{Volume, VolumeKind};
