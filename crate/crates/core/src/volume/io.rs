//! Sidecar header format.
//!
//! A volume is a pair of files: `<name>.hdr`, a UTF-8 `key: value` text file,
//! and a raw little-endian payload, x-fastest. Example header:
//!
//! ```text
//! dims: 64 64 32
//! spacing: 1 1 2.5
//! origin: 0 0 0
//! dtype: u16
//! payload: anatomy.raw
//! label.0=background
//! label.1=LA
//! ```
//!
//! `f32` payloads load as [`ScalarVolume`]s and `u16` payloads as
//! [`LabelVolume`]s. Blank lines and lines starting with `#` are ignored.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{validate_label_name, Geometry, LabelVolume, ScalarVolume, Volume};
use crate::{Error, Result};

/// Upper bound on voxels accepted from a header, so a hostile header cannot
/// trigger a huge allocation before the payload size is checked.
const MAX_VOXELS: usize = 1 << 31;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    U16,
}

impl Dtype {
    pub fn bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U16 => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::U16 => "u16",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Header {
    pub geometry: Geometry,
    pub dtype: Dtype,
    /// Payload path relative to the header's directory.
    pub payload: String,
    pub label_table: BTreeMap<u16, String>,
}

fn parse_triple<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<[T; 3]> {
    let parts: Vec<&str> = value.split_whitespace().collect();
    if parts.len() != 3 {
        return Err(Error::parse(line, format!("{key} needs 3 values")));
    }
    let mut out = Vec::with_capacity(3);
    for p in parts {
        out.push(
            p.parse::<T>()
                .map_err(|_| Error::parse(line, format!("bad {key} value {p:?}")))?,
        );
    }
    match <[T; 3]>::try_from(out) {
        Ok(a) => Ok(a),
        Err(_) => unreachable!(),
    }
}

impl Header {
    pub fn parse(text: &str) -> Result<Header> {
        let mut dims: Option<[usize; 3]> = None;
        let mut spacing: Option<[f64; 3]> = None;
        let mut origin: Option<[f64; 3]> = None;
        let mut dtype: Option<Dtype> = None;
        let mut payload: Option<String> = None;
        let mut label_table = BTreeMap::new();

        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            if let Some(rest) = trimmed.strip_prefix("label.") {
                let (id, name) = rest
                    .split_once('=')
                    .ok_or_else(|| Error::parse(line, "label entry needs label.<id>=<name>"))?;
                let id: u16 = id
                    .parse()
                    .map_err(|_| Error::parse(line, format!("bad label id {id:?}")))?;
                validate_label_name(id, name).map_err(|e| Error::parse(line, e.to_string()))?;
                if label_table.insert(id, name.to_string()).is_some() {
                    return Err(Error::parse(line, format!("duplicate label {id}")));
                }
                continue;
            }
            let (key, value) = trimmed
                .split_once(':')
                .ok_or_else(|| Error::parse(line, "expected key: value"))?;
            let (key, value) = (key.trim(), value.trim());
            let dup = match key {
                "dims" => dims.replace(parse_triple(line, key, value)?).is_some(),
                "spacing" => spacing.replace(parse_triple(line, key, value)?).is_some(),
                "origin" => origin.replace(parse_triple(line, key, value)?).is_some(),
                "dtype" => {
                    let d = match value {
                        "f32" => Dtype::F32,
                        "u16" => Dtype::U16,
                        other => {
                            return Err(Error::parse(line, format!("unsupported dtype {other:?}")))
                        }
                    };
                    dtype.replace(d).is_some()
                }
                "payload" => {
                    if value.is_empty() {
                        return Err(Error::parse(line, "empty payload path"));
                    }
                    payload.replace(value.to_string()).is_some()
                }
                other => return Err(Error::parse(line, format!("unknown key {other:?}"))),
            };
            if dup {
                return Err(Error::parse(line, format!("duplicate key {key:?}")));
            }
        }

        let missing = |k: &str| Error::parse(0, format!("missing key {k:?}"));
        let geometry = Geometry::new(
            dims.ok_or_else(|| missing("dims"))?,
            spacing.ok_or_else(|| missing("spacing"))?,
            origin.ok_or_else(|| missing("origin"))?,
        )?;
        if geometry.len() > MAX_VOXELS {
            return Err(Error::Geometry(format!(
                "{} voxels exceeds the supported maximum",
                geometry.len()
            )));
        }
        let dtype = dtype.ok_or_else(|| missing("dtype"))?;
        if dtype == Dtype::F32 && !label_table.is_empty() {
            return Err(Error::parse(
                0,
                "label entries are only valid for u16 volumes",
            ));
        }
        Ok(Header {
            geometry,
            dtype,
            payload: payload.ok_or_else(|| missing("payload"))?,
            label_table,
        })
    }

    pub fn to_text(&self) -> String {
        let g = &self.geometry;
        let mut s = String::new();
        let _ = writeln!(s, "dims: {} {} {}", g.dims[0], g.dims[1], g.dims[2]);
        let _ = writeln!(
            s,
            "spacing: {} {} {}",
            g.spacing[0], g.spacing[1], g.spacing[2]
        );
        let _ = writeln!(s, "origin: {} {} {}", g.origin[0], g.origin[1], g.origin[2]);
        let _ = writeln!(s, "dtype: {}", self.dtype.as_str());
        let _ = writeln!(s, "payload: {}", self.payload);
        for (id, name) in &self.label_table {
            let _ = writeln!(s, "label.{id}={name}");
        }
        s
    }

    pub fn payload_len(&self) -> usize {
        self.geometry.len() * self.dtype.bytes()
    }

    /// Decodes a raw payload against this header.
    pub fn decode(&self, bytes: &[u8]) -> Result<Volume> {
        let expected = self.payload_len();
        if bytes.len() != expected {
            return Err(Error::PayloadSize {
                expected,
                found: bytes.len(),
            });
        }
        match self.dtype {
            Dtype::F32 => {
                let data = bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                    .collect();
                Ok(Volume::Scalar(ScalarVolume::new(
                    self.geometry.clone(),
                    data,
                )?))
            }
            Dtype::U16 => {
                let data: Vec<u16> = bytes
                    .chunks_exact(2)
                    .map(|c| u16::from_le_bytes([c[0], c[1]]))
                    .collect();
                let table = if self.label_table.is_empty() {
                    let mut t = BTreeMap::new();
                    for &l in &data {
                        t.entry(l).or_insert_with(|| {
                            if l == 0 {
                                "background".to_string()
                            } else {
                                format!("label{l}")
                            }
                        });
                    }
                    t
                } else {
                    self.label_table.clone()
                };
                Ok(Volume::Labels(LabelVolume::new(
                    self.geometry.clone(),
                    data,
                    table,
                )?))
            }
        }
    }
}

/// Encodes voxel data for the payload file.
fn encode(volume: &Volume) -> Vec<u8> {
    match volume {
        Volume::Scalar(v) => v
            .data()
            .iter()
            .flat_map(|&x| (x as f32).to_le_bytes())
            .collect(),
        Volume::Labels(v) => v.data().iter().flat_map(|&l| l.to_le_bytes()).collect(),
    }
}

fn payload_name(header_path: &Path) -> Result<String> {
    let stem = header_path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::InvalidParameter(format!("bad header path {header_path:?}")))?;
    Ok(format!("{stem}.raw"))
}

/// Reads a volume from its `.hdr` file.
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header = Header::parse(&text)?;
    let payload_path: PathBuf = path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&header.payload);
    let meta = fs::metadata(&payload_path).map_err(|e| Error::io(&payload_path, e))?;
    if meta.len() != header.payload_len() as u64 {
        return Err(Error::PayloadSize {
            expected: header.payload_len(),
            found: meta.len() as usize,
        });
    }
    let bytes = fs::read(&payload_path).map_err(|e| Error::io(&payload_path, e))?;
    header.decode(&bytes)
}

/// Writes `volume` as `path` (the header) plus a `.raw` payload beside it.
///
/// Intensities are stored as `f32`; values that are not exactly representable
/// are rounded.
pub fn write_volume(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (dtype, label_table) = match volume {
        Volume::Scalar(_) => (Dtype::F32, BTreeMap::new()),
        Volume::Labels(v) => (Dtype::U16, v.label_table().clone()),
    };
    let header = Header {
        geometry: volume.geometry().clone(),
        dtype,
        payload: payload_name(path)?,
        label_table,
    };
    let payload_path = path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&header.payload);
    fs::write(&payload_path, encode(volume)).map_err(|e| Error::io(&payload_path, e))?;
    fs::write(path, header.to_text()).map_err(|e| Error::io(path, e))?;
    Ok(())
}
