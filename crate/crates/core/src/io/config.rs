//! JSON-backed configuration: case manifests plus generic load/save helpers
//! for any serde-serializable settings struct.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::Error;

/// One landmark, stored as a pair of small binary-mask files with a shared id.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct LandmarkPaths {
    pub id: String,
    pub moving: PathBuf,
    pub fixed: PathBuf,
}

/// File inventory of one registration case.
///
/// Relative paths are interpreted relative to the manifest file's directory;
/// [`CaseManifest::load`] resolves them so downstream code can open the
/// files directly.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct CaseManifest {
    pub case_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moving_image: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_image: Option<PathBuf>,
    pub moving_mask: PathBuf,
    pub fixed_mask: PathBuf,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub landmarks: Vec<LandmarkPaths>,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() && !base.as_os_str().is_empty() {
        *p = base.join(&*p);
    }
}

fn check_exists(p: &Path) -> Result<(), Error> {
    if p.is_file() {
        Ok(())
    } else {
        Err(Error::MissingFile {
            path: p.to_path_buf(),
        })
    }
}

impl CaseManifest {
    /// Loads a manifest, resolves its paths against the manifest's own
    /// directory, and verifies every referenced file exists and landmark ids
    /// are unique.
    pub fn load(path: &Path) -> Result<Self, Error> {
        let mut manifest: CaseManifest = load_json(path)?;
        let base = path.parent().unwrap_or_else(|| Path::new(""));

        if let Some(p) = manifest.moving_image.as_mut() {
            resolve(base, p);
        }
        if let Some(p) = manifest.fixed_image.as_mut() {
            resolve(base, p);
        }
        resolve(base, &mut manifest.moving_mask);
        resolve(base, &mut manifest.fixed_mask);
        for lm in &mut manifest.landmarks {
            resolve(base, &mut lm.moving);
            resolve(base, &mut lm.fixed);
        }

        for p in manifest.referenced_files() {
            check_exists(&p)?;
        }
        for (i, lm) in manifest.landmarks.iter().enumerate() {
            if manifest.landmarks[..i].iter().any(|o| o.id == lm.id) {
                return Err(Error::ValueOutOfRange {
                    context: "case manifest landmarks",
                    detail: format!("duplicate landmark id {:?}", lm.id),
                });
            }
        }
        Ok(manifest)
    }

    /// Every file this manifest points at.
    pub fn referenced_files(&self) -> Vec<PathBuf> {
        let mut out = Vec::new();
        if let Some(p) = &self.moving_image {
            out.push(p.clone());
        }
        if let Some(p) = &self.fixed_image {
            out.push(p.clone());
        }
        out.push(self.moving_mask.clone());
        out.push(self.fixed_mask.clone());
        for lm in &self.landmarks {
            out.push(lm.moving.clone());
            out.push(lm.fixed.clone());
        }
        out
    }

    /// Serializes the manifest as pretty-printed JSON.
    pub fn save(&self, path: &Path) -> Result<(), Error> {
        save_json(self, path)
    }
}

/// Reads a JSON file into any deserializable type, with path-tagged errors.
pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T, Error> {
    let text = fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile {
                path: path.to_path_buf(),
            }
        } else {
            Error::Io {
                path: path.to_path_buf(),
                source: e,
            }
        }
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

/// Writes any serializable value as pretty-printed JSON with a trailing
/// newline.  serde_json's output is deterministic for a given value, so
/// repeated saves produce identical bytes.
pub fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<(), Error> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}
