//! File formats: MetaImage volumes/fields, JSON manifests and configs, and
//! the run-report CSV.

pub mod config;
pub mod mhd;
pub mod report;

pub use config::{load_json, save_json, CaseManifest, LandmarkPaths};
pub use mhd::{
    read_field_mhd, read_mhd, read_volume_mhd, write_field_mhd, write_volume_mhd, MhdData,
};
pub use report::{fmt_sig6, render_report, write_report, CaseRecord, REPORT_COLUMNS};
