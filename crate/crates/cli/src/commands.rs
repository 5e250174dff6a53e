//! Implementations of the five subcommands.  Each returns the library error
//! type; `main` maps any error to exit code 2.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use maskreg::io::{load_json, save_json, read_volume_mhd, write_field_mhd, write_volume_mhd};
use maskreg::{
    coarse_align, compute_metrics, generate_phantom, normalize_intensity, register as run_register,
    signed_distance_map, warp, CaseManifest, CaseRecord, Error, LandmarkPaths, Landmark,
    LandmarkSet, PhantomSpec, RegistrationConfig, Result, Volume, VolumeKind,
};

use crate::{EvaluateArgs, PhantomArgs, PrealignArgs, RegisterArgs, SdmArgs};

/// Percentile used to normalize intensity images before alignment.
const NORMALIZE_PERCENTILE: f64 = 99.0;

/// Top-level index written next to the generated cases.
#[derive(Debug, Serialize, Deserialize)]
struct PhantomSetManifest {
    cases: Vec<PathBuf>,
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn read_binary_mask(path: &Path, context: &'static str) -> Result<Volume> {
    let vol = read_volume_mhd(path)?;
    if vol.kind() != VolumeKind::BinaryMask {
        return Err(Error::KindMismatch {
            context,
            expected: "binary-mask",
            actual: vol.kind().name(),
        });
    }
    Ok(vol)
}

pub fn phantom(args: &PhantomArgs) -> Result<()> {
    let base_spec: PhantomSpec = load_json(&args.spec)?;
    ensure_dir(&args.out)?;

    let mut cases = Vec::new();
    for index in 0..args.count {
        let mut spec = base_spec.clone();
        spec.seed = base_spec.seed.wrapping_add(index as u64);
        let pair = generate_phantom(&spec)?;

        let case_name = format!("case_{index:03}");
        let case_dir = args.out.join(&case_name);
        ensure_dir(&case_dir)?;

        write_volume_mhd(&pair.moving_mask, &case_dir.join("moving_mask.mhd"))?;
        write_volume_mhd(&pair.fixed_mask, &case_dir.join("fixed_mask.mhd"))?;
        write_field_mhd(&pair.true_ddf, &case_dir.join("true_ddf.mhd"))?;

        let mut landmarks = Vec::new();
        for (moving_lm, fixed_lm) in pair
            .moving_landmarks
            .entries()
            .iter()
            .zip(pair.fixed_landmarks.entries())
        {
            let moving_name = format!("{}_moving.mhd", moving_lm.id);
            let fixed_name = format!("{}_fixed.mhd", fixed_lm.id);
            write_volume_mhd(&moving_lm.mask, &case_dir.join(&moving_name))?;
            write_volume_mhd(&fixed_lm.mask, &case_dir.join(&fixed_name))?;
            landmarks.push(LandmarkPaths {
                id: moving_lm.id.clone(),
                moving: PathBuf::from(moving_name),
                fixed: PathBuf::from(fixed_name),
            });
        }

        let manifest = CaseManifest {
            case_id: case_name.clone(),
            moving_image: None,
            fixed_image: None,
            moving_mask: PathBuf::from("moving_mask.mhd"),
            fixed_mask: PathBuf::from("fixed_mask.mhd"),
            landmarks,
        };
        manifest.save(&case_dir.join("manifest.json"))?;

        println!(
            "{case_name}: seed {}, {} landmarks, {} foreground voxels",
            spec.seed,
            pair.moving_landmarks.len(),
            pair.moving_mask.foreground_count()
        );
        cases.push(PathBuf::from(format!("{case_name}/manifest.json")));
    }

    save_json(&PhantomSetManifest { cases }, &args.out.join("manifest.json"))?;
    Ok(())
}

/// Translation JSON written by `prealign`.
#[derive(Debug, Serialize, Deserialize)]
struct TranslationRecord {
    translation_mm: [f64; 3],
}

pub fn prealign(args: &PrealignArgs) -> Result<()> {
    let moving = normalize_intensity(&read_volume_mhd(&args.moving)?, NORMALIZE_PERCENTILE)?;
    let fixed = normalize_intensity(&read_volume_mhd(&args.fixed)?, NORMALIZE_PERCENTILE)?;
    let moving_mask = read_binary_mask(&args.moving_mask, "prealign moving mask")?;
    let fixed_mask = read_binary_mask(&args.fixed_mask, "prealign fixed mask")?;

    let result = coarse_align(
        &moving,
        &moving_mask,
        &fixed,
        &fixed_mask,
        args.dims,
        args.spacing,
    )?;

    ensure_dir(&args.out)?;
    write_volume_mhd(&result.moving, &args.out.join("moving.mhd"))?;
    write_volume_mhd(&result.moving_mask, &args.out.join("moving_mask.mhd"))?;
    write_volume_mhd(&result.fixed, &args.out.join("fixed.mhd"))?;
    write_volume_mhd(&result.fixed_mask, &args.out.join("fixed_mask.mhd"))?;
    save_json(
        &TranslationRecord {
            translation_mm: result.translation_mm,
        },
        &args.out.join("translation.json"),
    )?;

    let [tx, ty, tz] = result.translation_mm;
    println!(
        "aligned onto {}x{}x{} grid; translation ({tx:.2}, {ty:.2}, {tz:.2}) mm",
        args.dims[0], args.dims[1], args.dims[2]
    );
    Ok(())
}

fn load_landmark_side(paths: &[(String, &Path)]) -> Result<LandmarkSet> {
    let mut entries = Vec::new();
    for (id, path) in paths {
        entries.push(Landmark {
            id: id.clone(),
            mask: read_binary_mask(path, "landmark mask")?,
        });
    }
    LandmarkSet::new(entries)
}

/// Builds the effective settings: the mode preset supplies the loss weights
/// unless the config file explicitly sets its own.
fn effective_config(
    config_path: Option<&Path>,
    mode_weights: maskreg::LossWeights,
) -> Result<RegistrationConfig> {
    let (mut value, origin) = match config_path {
        Some(path) => (
            load_json::<serde_json::Value>(path)?,
            path.to_path_buf(),
        ),
        None => (serde_json::json!({}), PathBuf::from("<defaults>")),
    };
    let Some(obj) = value.as_object_mut() else {
        return Err(Error::Json {
            path: origin,
            detail: "settings root must be a JSON object".to_string(),
        });
    };
    if !obj.contains_key("weights") {
        let weights = serde_json::to_value(mode_weights).map_err(|e| Error::Json {
            path: origin.clone(),
            detail: e.to_string(),
        })?;
        obj.insert("weights".to_string(), weights);
    }
    serde_json::from_value(value).map_err(|e| Error::Json {
        path: origin,
        detail: e.to_string(),
    })
}

fn write_loss_trace(
    path: &Path,
    trace: &[maskreg::LossBreakdown],
    iterations_used: &[usize],
) -> Result<()> {
    let mut text = String::from("stage,iteration,total,mdsc,msle,bending\n");
    let mut offset = 0usize;
    for (stage, &count) in iterations_used.iter().enumerate() {
        for iteration in 0..count {
            let b = &trace[offset + iteration];
            text.push_str(&format!(
                "{stage},{iteration},{},{},{},{}\n",
                b.total, b.mdsc, b.msle, b.bending
            ));
        }
        offset += count;
    }
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn register(args: &RegisterArgs) -> Result<()> {
    let manifest = CaseManifest::load(&args.case)?;
    let moving_mask = read_binary_mask(&manifest.moving_mask, "case moving mask")?;
    let fixed_mask = read_binary_mask(&manifest.fixed_mask, "case fixed mask")?;
    let config = effective_config(args.config.as_deref(), args.mode.weights())?;

    let landmark_sets = if manifest.landmarks.is_empty() {
        None
    } else {
        let moving_paths: Vec<(String, &Path)> = manifest
            .landmarks
            .iter()
            .map(|lm| (lm.id.clone(), lm.moving.as_path()))
            .collect();
        let fixed_paths: Vec<(String, &Path)> = manifest
            .landmarks
            .iter()
            .map(|lm| (lm.id.clone(), lm.fixed.as_path()))
            .collect();
        Some((
            load_landmark_side(&moving_paths)?,
            load_landmark_side(&fixed_paths)?,
        ))
    };

    let started = Instant::now();
    let result = run_register(&moving_mask, &fixed_mask, &config)?;
    let wall_time_s = started.elapsed().as_secs_f64();

    let metrics = match &landmark_sets {
        Some((moving_lms, fixed_lms)) => compute_metrics(
            &moving_mask,
            &fixed_mask,
            &result.ddf,
            Some((moving_lms, fixed_lms)),
        )?,
        None => result.metrics,
    };

    ensure_dir(&args.out)?;
    write_field_mhd(&result.ddf, &args.out.join("ddf.mhd"))?;
    let warped_mask = warp(&moving_mask, &result.ddf).binarized();
    write_volume_mhd(&warped_mask, &args.out.join("warped_mask.mhd"))?;
    write_loss_trace(
        &args.out.join("loss_trace.csv"),
        &result.loss_trace,
        &result.iterations_used,
    )?;

    let record = CaseRecord {
        case_id: manifest.case_id.clone(),
        mode: args.mode.label().to_string(),
        metrics,
        iterations: result.iterations_used.iter().sum(),
        wall_time_s,
    };
    save_json(&record, &args.out.join("metrics.json"))?;

    let tre_text = metrics
        .tre_mm
        .map(|t| format!("{t:.3} mm"))
        .unwrap_or_else(|| "n/a".to_string());
    println!(
        "{} [{}]: dsc_whole {:.4}, tre {}, {} iterations",
        manifest.case_id,
        args.mode.label(),
        metrics.dsc_whole,
        tre_text,
        record.iterations
    );
    Ok(())
}

pub fn sdm(args: &SdmArgs) -> Result<()> {
    let mask = read_binary_mask(&args.mask, "sdm input mask")?;
    let sdm = signed_distance_map(&mask)?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    write_volume_mhd(&sdm, &args.out)?;
    println!(
        "wrote signed distance map for {} foreground voxels",
        mask.foreground_count()
    );
    Ok(())
}

pub fn evaluate(args: &EvaluateArgs) -> Result<()> {
    let entries = fs::read_dir(&args.runs).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile {
                path: args.runs.clone(),
            }
        } else {
            Error::Io {
                path: args.runs.clone(),
                source: e,
            }
        }
    })?;

    let mut run_dirs: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::Io {
            path: args.runs.clone(),
            source: e,
        })?;
        let path = entry.path();
        if path.is_dir() && path.join("metrics.json").is_file() {
            run_dirs.push(path);
        }
    }
    run_dirs.sort();

    if run_dirs.is_empty() {
        return Err(Error::ValueOutOfRange {
            context: "evaluate runs directory",
            detail: format!("no subdirectory of {} holds a metrics.json", args.runs.display()),
        });
    }

    let mut records = Vec::new();
    for dir in &run_dirs {
        records.push(load_json::<CaseRecord>(&dir.join("metrics.json"))?);
    }
    maskreg::write_report(&records, &args.out)?;
    println!("wrote {} with {} case rows", args.out.display(), records.len());
    Ok(())
}
