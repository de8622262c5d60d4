//! Volume files: a raw little-endian `f32` payload in `(t, z, y, x)` order
//! next to a JSON sidecar.
//!
//! `case.raw` holds exactly `T*Z*Y*X*4` bytes. `case.meta.json` holds the
//! shape and the normalization state. A 2D+t slice is stored as a volume of
//! shape `(T, 1, Y, X)` whose sidecar also records where it came from.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tssc_core::volume::{Slice2Dt, Volume4D};

use crate::error::{Result, TsscError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SliceOrigin {
    pub z_index: usize,
    pub parent_shape: [usize; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeMeta {
    /// `(T, Z, Y, X)`.
    pub shape: [usize; 4],
    #[serde(default)]
    pub spacing: Option<[f64; 3]>,
    /// Raw `(lo, hi)` before normalization.
    #[serde(default)]
    pub intensity_range: Option<[f32; 2]>,
    #[serde(default)]
    pub normalized: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slice_of: Option<SliceOrigin>,
}

impl VolumeMeta {
    pub fn of(v: &Volume4D) -> Self {
        Self {
            shape: v.shape,
            spacing: v.spacing,
            intensity_range: v.intensity_range,
            normalized: v.normalized,
            slice_of: None,
        }
    }

    pub fn payload_bytes(&self) -> Option<usize> {
        self.shape.iter().try_fold(4usize, |acc, &d| acc.checked_mul(d))
    }
}

/// `(payload, sidecar)` for a path given as `x`, `x.raw` or `x.meta.json`.
pub fn file_pair(path: &Path) -> (PathBuf, PathBuf) {
    let s = path.to_string_lossy();
    let stem = s
        .strip_suffix(".meta.json")
        .or_else(|| s.strip_suffix(".raw"))
        .unwrap_or(&s)
        .to_string();
    (PathBuf::from(format!("{stem}.raw")), PathBuf::from(format!("{stem}.meta.json")))
}

/// Case name of a volume path: the file name without `.raw`.
pub fn case_name(path: &Path) -> String {
    let (raw, _) = file_pair(path);
    raw.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn encode(data: &[f32]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn decode(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| TsscError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| TsscError::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| TsscError::io(path, e))
}

fn save_with_meta(path: &Path, meta: &VolumeMeta, data: &[f32]) -> Result<()> {
    let (raw, side) = file_pair(path);
    let json = serde_json::to_vec_pretty(meta).expect("metadata serializes");
    write_file(&raw, &encode(data))?;
    write_file(&side, &json)
}

fn load_with_meta(path: &Path) -> Result<(VolumeMeta, Vec<f32>)> {
    let (raw, side) = file_pair(path);
    let meta: VolumeMeta =
        serde_json::from_slice(&read_file(&side)?).map_err(|e| TsscError::format(&side, format!("bad sidecar: {e}")))?;
    if meta.shape.contains(&0) {
        return Err(TsscError::format(&side, format!("shape {:?} has a zero extent", meta.shape)));
    }
    let expected = meta
        .payload_bytes()
        .ok_or_else(|| TsscError::format(&side, format!("shape {:?} overflows", meta.shape)))?;
    let bytes = read_file(&raw)?;
    if bytes.len() != expected {
        return Err(TsscError::format(
            &raw,
            format!(
                "payload length mismatch for shape {:?}: expected {expected} bytes, found {}",
                meta.shape,
                bytes.len()
            ),
        ));
    }
    Ok((meta, decode(&bytes)))
}

pub fn save_volume4d(v: &Volume4D, path: &Path) -> Result<()> {
    v.validate()?;
    save_with_meta(path, &VolumeMeta::of(v), &v.data)
}

pub fn load_volume4d(path: &Path) -> Result<Volume4D> {
    let (meta, data) = load_with_meta(path)?;
    let mut v = Volume4D::new(meta.shape, data)?;
    v.spacing = meta.spacing;
    v.intensity_range = meta.intensity_range;
    v.normalized = meta.normalized;
    v.validate().map_err(|e| TsscError::format(file_pair(path).1, e.to_string()))?;
    Ok(v)
}

/// Stores a slice with the metadata of its parent volume.
pub fn save_slice(s: &Slice2Dt, parent: &VolumeMeta, path: &Path) -> Result<()> {
    let p = s.parent_shape;
    let meta = VolumeMeta {
        shape: [p[0], 1, p[2], p[3]],
        slice_of: Some(SliceOrigin {
            z_index: s.z_index,
            parent_shape: p,
        }),
        ..parent.clone()
    };
    save_with_meta(path, &meta, &s.data)
}

/// Loads a slice and the metadata it was stored with.
pub fn load_slice(path: &Path) -> Result<(Slice2Dt, VolumeMeta)> {
    let (meta, data) = load_with_meta(path)?;
    let side = file_pair(path).1;
    let origin = meta
        .slice_of
        .ok_or_else(|| TsscError::format(&side, "not a slice file (no slice_of record)"))?;
    let p = origin.parent_shape;
    if meta.shape != [p[0], 1, p[2], p[3]] || origin.z_index >= p[1] {
        return Err(TsscError::format(
            &side,
            format!("slice shape {:?} inconsistent with parent {:?} at z = {}", meta.shape, p, origin.z_index),
        ));
    }
    let s = Slice2Dt {
        data,
        z_index: origin.z_index,
        parent_shape: p,
    };
    Ok((s, meta))
}

/// Payload files in `dir`, sorted by name.
pub fn list_volumes(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| TsscError::io(dir, e))? {
        let p = entry.map_err(|e| TsscError::io(dir, e))?.path();
        if p.extension().is_some_and(|e| e == "raw") {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// A single volume file, or every volume in a directory.
pub fn load_cases(path: &Path) -> Result<Vec<(String, Volume4D)>> {
    let files = if path.is_dir() {
        let f = list_volumes(path)?;
        if f.is_empty() {
            return Err(TsscError::format(path, "no .raw volumes in directory"));
        }
        f
    } else {
        vec![path.to_path_buf()]
    };
    files.iter().map(|f| Ok((case_name(f), load_volume4d(f)?))).collect()
}
