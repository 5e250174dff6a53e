//! MetaImage (`.mhd` + sibling `.raw`) reading and writing.
//!
//! The format is deliberately narrow: uncompressed little-endian 3-D images
//! with one scalar channel per voxel (volumes) or three (displacement
//! fields).  The reader accepts exactly the header keys the writer emits, so
//! any file this module produces round-trips bitwise, and foreign files are
//! either understood completely or rejected with a typed error.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::Error;
use crate::field::DisplacementField;
use crate::grid::Grid;
use crate::volume::{Volume, VolumeKind};

/// Scalar storage types the reader understands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ElementType {
    UChar,
    Float,
    Double,
}

impl ElementType {
    fn byte_size(self) -> u64 {
        match self {
            ElementType::UChar => 1,
            ElementType::Float => 4,
            ElementType::Double => 8,
        }
    }

    fn parse(path: &Path, value: &str) -> Result<Self, Error> {
        match value {
            "MET_UCHAR" => Ok(ElementType::UChar),
            "MET_FLOAT" => Ok(ElementType::Float),
            "MET_DOUBLE" => Ok(ElementType::Double),
            _ => Err(unsupported(path, "ElementType", value)),
        }
    }
}

/// Payload of a MetaImage file: either a scalar volume or a 3-channel
/// displacement field, decided by `ElementNumberOfChannels`.
#[derive(Debug, Clone)]
pub enum MhdData {
    Volume(Volume),
    Field(DisplacementField),
}

impl MhdData {
    /// Unwraps a scalar volume, rejecting 3-channel payloads.
    pub fn into_volume(self) -> Result<Volume, Error> {
        match self {
            MhdData::Volume(v) => Ok(v),
            MhdData::Field(_) => Err(Error::KindMismatch {
                context: "mhd payload",
                expected: "single-channel volume",
                actual: "3-channel displacement field",
            }),
        }
    }

    /// Unwraps a displacement field, rejecting scalar payloads.
    pub fn into_field(self) -> Result<DisplacementField, Error> {
        match self {
            MhdData::Field(f) => Ok(f),
            MhdData::Volume(_) => Err(Error::KindMismatch {
                context: "mhd payload",
                expected: "3-channel displacement field",
                actual: "single-channel volume",
            }),
        }
    }

    /// The sampling grid of whichever payload is inside.
    pub fn grid(&self) -> &Grid {
        match self {
            MhdData::Volume(v) => v.grid(),
            MhdData::Field(f) => f.grid(),
        }
    }
}

fn unsupported(path: &Path, key: &'static str, value: &str) -> Error {
    Error::MhdUnsupportedValue {
        path: path.to_path_buf(),
        key,
        value: value.to_string(),
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Header keys, in the exact order the writer emits them.
const HEADER_KEYS: [&str; 10] = [
    "ObjectType",
    "NDims",
    "BinaryData",
    "BinaryDataByteOrderMSB",
    "ElementSpacing",
    "Offset",
    "DimSize",
    "ElementNumberOfChannels",
    "ElementType",
    "ElementDataFile",
];

/// Parsed header: every key present exactly once, values still raw strings.
struct Header {
    values: Vec<Option<String>>,
}

impl Header {
    fn parse(path: &Path, text: &str) -> Result<Self, Error> {
        let mut values: Vec<Option<String>> = vec![None; HEADER_KEYS.len()];
        for (idx, raw_line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw_line.trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::MhdMalformedLine {
                    path: path.to_path_buf(),
                    line: line_no,
                });
            };
            let key = key.trim();
            let value = value.trim();
            let Some(slot) = HEADER_KEYS.iter().position(|k| *k == key) else {
                return Err(Error::MhdUnknownKey {
                    path: path.to_path_buf(),
                    key: key.to_string(),
                });
            };
            if values[slot].is_some() {
                // A repeated key makes the header ambiguous; treat the second
                // occurrence as malformed rather than silently overwriting.
                return Err(Error::MhdMalformedLine {
                    path: path.to_path_buf(),
                    line: line_no,
                });
            }
            values[slot] = Some(value.to_string());
        }
        Ok(Header { values })
    }

    fn require(&self, path: &Path, key: &'static str) -> Result<&str, Error> {
        let slot = HEADER_KEYS
            .iter()
            .position(|k| *k == key)
            .expect("key is in HEADER_KEYS");
        self.values[slot]
            .as_deref()
            .ok_or_else(|| Error::MhdMissingKey {
                path: path.to_path_buf(),
                key,
            })
    }
}

fn require_value(path: &Path, header: &Header, key: &'static str, expect: &str) -> Result<(), Error> {
    let got = header.require(path, key)?;
    if got == expect {
        Ok(())
    } else {
        Err(unsupported(path, key, got))
    }
}

fn parse_triplet_u32(path: &Path, key: &'static str, value: &str) -> Result<[usize; 3], Error> {
    let parts: Vec<&str> = value.split_whitespace().collect();
    if parts.len() != 3 {
        return Err(unsupported(path, key, value));
    }
    let mut out = [0usize; 3];
    for (slot, part) in out.iter_mut().zip(&parts) {
        *slot = part
            .parse::<u32>()
            .map_err(|_| unsupported(path, key, value))? as usize;
    }
    Ok(out)
}

fn parse_triplet_f64(path: &Path, key: &'static str, value: &str) -> Result<[f64; 3], Error> {
    let parts: Vec<&str> = value.split_whitespace().collect();
    if parts.len() != 3 {
        return Err(unsupported(path, key, value));
    }
    let mut out = [0f64; 3];
    for (slot, part) in out.iter_mut().zip(&parts) {
        *slot = part
            .parse::<f64>()
            .map_err(|_| unsupported(path, key, value))?;
    }
    Ok(out)
}

/// Reads a MetaImage header plus its sibling raw payload.
///
/// One scalar channel yields a [`Volume`] (8-bit payloads whose values are
/// all 0/1 come back as binary masks, anything else as intensity data);
/// three channels yield a [`DisplacementField`] in millimetres.
pub fn read_mhd(path: &Path) -> Result<MhdData, Error> {
    let text = fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile {
                path: path.to_path_buf(),
            }
        } else {
            io_err(path, e)
        }
    })?;
    let header = Header::parse(path, &text)?;

    require_value(path, &header, "ObjectType", "Image")?;
    require_value(path, &header, "NDims", "3")?;
    require_value(path, &header, "BinaryData", "True")?;
    require_value(path, &header, "BinaryDataByteOrderMSB", "False")?;

    let dims = parse_triplet_u32(path, "DimSize", header.require(path, "DimSize")?)?;
    let spacing = parse_triplet_f64(
        path,
        "ElementSpacing",
        header.require(path, "ElementSpacing")?,
    )?;
    let origin = parse_triplet_f64(path, "Offset", header.require(path, "Offset")?)?;

    let channels_raw = header.require(path, "ElementNumberOfChannels")?;
    let channels: usize = match channels_raw {
        "1" => 1,
        "3" => 3,
        _ => return Err(unsupported(path, "ElementNumberOfChannels", channels_raw)),
    };

    let elem = ElementType::parse(path, header.require(path, "ElementType")?)?;
    if channels == 3 && elem == ElementType::UChar {
        return Err(unsupported(path, "ElementType", "MET_UCHAR (3 channels)"));
    }

    let data_file = header.require(path, "ElementDataFile")?;
    if data_file == "LOCAL" || data_file.contains(['/', '\\']) {
        // Only a plain sibling file name is supported; in-file payloads and
        // path traversal are rejected.
        return Err(unsupported(path, "ElementDataFile", data_file));
    }
    let raw_path = match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => dir.join(data_file),
        _ => PathBuf::from(data_file),
    };

    let grid = Grid::new(dims, spacing, origin)?;
    let num_values = (grid.num_voxels() as u64) * (channels as u64);
    let expected_bytes = num_values * elem.byte_size();

    let raw = fs::read(&raw_path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile {
                path: raw_path.clone(),
            }
        } else {
            io_err(&raw_path, e)
        }
    })?;
    if raw.len() as u64 != expected_bytes {
        return Err(Error::MhdPayloadSize {
            path: raw_path,
            expected: expected_bytes,
            actual: raw.len() as u64,
        });
    }

    let values = decode_values(&raw, elem);

    if channels == 1 {
        let kind = infer_scalar_kind(elem, &values);
        Ok(MhdData::Volume(Volume::new(grid, kind, values)?))
    } else {
        let vectors: Vec<[f64; 3]> = values
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect();
        Ok(MhdData::Field(DisplacementField::new(grid, vectors)?))
    }
}

fn decode_values(raw: &[u8], elem: ElementType) -> Vec<f64> {
    match elem {
        ElementType::UChar => raw.iter().map(|&b| f64::from(b)).collect(),
        ElementType::Float => raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect(),
        ElementType::Double => raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect(),
    }
}

/// 8-bit payloads that only ever hold 0/1 are masks; everything else is
/// intensity data.  Distance maps and soft masks lose their tag on disk and
/// come back as intensity volumes, which every consumer treats identically.
fn infer_scalar_kind(elem: ElementType, values: &[f64]) -> VolumeKind {
    if elem == ElementType::UChar && values.iter().all(|&v| v == 0.0 || v == 1.0) {
        VolumeKind::BinaryMask
    } else {
        VolumeKind::Intensity
    }
}

/// Reads a MetaImage file that must contain a scalar volume.
pub fn read_volume_mhd(path: &Path) -> Result<Volume, Error> {
    read_mhd(path)?.into_volume()
}

/// Reads a MetaImage file that must contain a displacement field.
pub fn read_field_mhd(path: &Path) -> Result<DisplacementField, Error> {
    read_mhd(path)?.into_field()
}

fn raw_sibling(path: &Path) -> Result<(PathBuf, String), Error> {
    let stem = path.file_stem().and_then(|s| s.to_str());
    let Some(stem) = stem else {
        return Err(Error::ValueOutOfRange {
            context: "mhd output path",
            detail: format!("{} has no usable file stem", path.display()),
        });
    };
    let raw_name = format!("{stem}.raw");
    let raw_path = match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => dir.join(&raw_name),
        _ => PathBuf::from(&raw_name),
    };
    Ok((raw_path, raw_name))
}

fn write_pair(
    path: &Path,
    grid: &Grid,
    channels: usize,
    elem_name: &str,
    raw: &[u8],
) -> Result<(), Error> {
    let (raw_path, raw_name) = raw_sibling(path)?;
    let [nx, ny, nz] = grid.dims;
    let [sx, sy, sz] = grid.spacing;
    let [ox, oy, oz] = grid.origin;
    let mut header = String::new();
    header.push_str("ObjectType = Image\n");
    header.push_str("NDims = 3\n");
    header.push_str("BinaryData = True\n");
    header.push_str("BinaryDataByteOrderMSB = False\n");
    header.push_str(&format!("ElementSpacing = {sx} {sy} {sz}\n"));
    header.push_str(&format!("Offset = {ox} {oy} {oz}\n"));
    header.push_str(&format!("DimSize = {nx} {ny} {nz}\n"));
    header.push_str(&format!("ElementNumberOfChannels = {channels}\n"));
    header.push_str(&format!("ElementType = {elem_name}\n"));
    header.push_str(&format!("ElementDataFile = {raw_name}\n"));

    fs::write(path, header).map_err(|e| io_err(path, e))?;
    fs::write(&raw_path, raw).map_err(|e| io_err(&raw_path, e))?;
    Ok(())
}

/// Writes a volume as `.mhd` + sibling `.raw`.
///
/// Binary masks are stored as 8-bit 0/1; soft masks, intensities and
/// distance maps as 32-bit floats.  Output bytes are a pure function of the
/// input, so identical volumes always serialize identically.
pub fn write_volume_mhd(volume: &Volume, path: &Path) -> Result<(), Error> {
    let (elem_name, raw): (&str, Vec<u8>) = match volume.kind() {
        VolumeKind::BinaryMask => (
            "MET_UCHAR",
            volume.values().iter().map(|&v| v as u8).collect(),
        ),
        _ => (
            "MET_FLOAT",
            volume
                .values()
                .iter()
                .flat_map(|&v| (v as f32).to_le_bytes())
                .collect(),
        ),
    };
    write_pair(path, volume.grid(), 1, elem_name, &raw)
}

/// Writes a displacement field as a 3-channel 32-bit float `.mhd` pair,
/// channel-interleaved (x, y, z millimetre components per voxel).
pub fn write_field_mhd(field: &DisplacementField, path: &Path) -> Result<(), Error> {
    let raw: Vec<u8> = field
        .vectors()
        .iter()
        .flat_map(|v| v.iter().flat_map(|&c| (c as f32).to_le_bytes()).collect::<Vec<u8>>())
        .collect();
    write_pair(path, field.grid(), 3, "MET_FLOAT", &raw)
}
