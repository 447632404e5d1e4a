//! On-disk formats.
//!
//! A volume or projection stack is stored as two files sharing a stem:
//! `<stem>.f32` holds raw little-endian `f32` values in the in-memory
//! linear order (x-fastest for volumes, u-fastest then v then view for
//! projections) and `<stem>.json` holds the metadata sidecar including a
//! SHA-256 of the raw bytes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::{Grid3, ProjectionSet, Volume};

pub const DATA_EXT: &str = "f32";
pub const META_EXT: &str = "json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Metadata {
    Volume {
        dims: [usize; 3],
        pitch: f64,
        origin: [f64; 3],
        role: String,
        dtype: String,
        byte_order: String,
        checksum: String,
        #[serde(default, skip_serializing_if = "Map::is_empty")]
        extra: Map<String, Value>,
    },
    Projections {
        n_views: usize,
        det_u: usize,
        det_v: usize,
        pixel_pitch: f64,
        angles: Vec<f64>,
        role: String,
        dtype: String,
        byte_order: String,
        checksum: String,
        #[serde(default, skip_serializing_if = "Map::is_empty")]
        extra: Map<String, Value>,
    },
}

impl Metadata {
    pub fn role(&self) -> &str {
        match self {
            Metadata::Volume { role, .. } | Metadata::Projections { role, .. } => role,
        }
    }

    pub fn extra(&self) -> &Map<String, Value> {
        match self {
            Metadata::Volume { extra, .. } | Metadata::Projections { extra, .. } => extra,
        }
    }
}

pub fn data_path(stem: &Path) -> PathBuf {
    with_ext(stem, DATA_EXT)
}

pub fn meta_path(stem: &Path) -> PathBuf {
    with_ext(stem, META_EXT)
}

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn encode_f32(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn decode_f32(bytes: &[u8], path: &Path) -> Result<Vec<f64>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::InvalidData(format!(
            "{}: length {} is not a multiple of 4",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

fn write_pair(stem: &Path, raw: &[u8], meta: &Metadata) -> Result<Vec<PathBuf>> {
    if let Some(parent) = stem.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let dp = data_path(stem);
    let mp = meta_path(stem);
    fs::write(&dp, raw).map_err(|e| Error::io(&dp, e))?;
    let mut text = serde_json::to_string_pretty(meta).map_err(|e| Error::Metadata {
        path: mp.clone(),
        source: e,
    })?;
    text.push('\n');
    fs::write(&mp, text).map_err(|e| Error::io(&mp, e))?;
    Ok(vec![dp, mp])
}

fn read_pair(stem: &Path) -> Result<(Metadata, Vec<f64>)> {
    let mp = meta_path(stem);
    let dp = data_path(stem);
    let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let meta: Metadata = serde_json::from_str(&text).map_err(|e| Error::Metadata {
        path: mp.clone(),
        source: e,
    })?;
    let raw = fs::read(&dp).map_err(|e| Error::io(&dp, e))?;
    let found = sha256_hex(&raw);
    let expected = match &meta {
        Metadata::Volume { checksum, .. } | Metadata::Projections { checksum, .. } => checksum,
    };
    if &found != expected {
        return Err(Error::Checksum {
            path: dp,
            expected: expected.clone(),
            found,
        });
    }
    Ok((meta, decode_f32(&raw, &dp)?))
}

/// Writes `<stem>.f32` and `<stem>.json`; returns both paths.
pub fn write_volume(
    stem: &Path,
    vol: &Volume,
    role: &str,
    extra: Map<String, Value>,
) -> Result<Vec<PathBuf>> {
    let raw = encode_f32(vol.data());
    let g = vol.grid();
    let meta = Metadata::Volume {
        dims: g.dims(),
        pitch: g.pitch,
        origin: g.origin,
        role: role.to_string(),
        dtype: "float32".into(),
        byte_order: "little".into(),
        checksum: sha256_hex(&raw),
        extra,
    };
    write_pair(stem, &raw, &meta)
}

pub fn read_volume(stem: &Path) -> Result<(Volume, Metadata)> {
    let (meta, values) = read_pair(stem)?;
    match &meta {
        Metadata::Volume {
            dims, pitch, origin, ..
        } => {
            let grid = Grid3::new(dims[0], dims[1], dims[2], *pitch, *origin)?;
            let vol = Volume::from_vec(grid, values)?;
            Ok((vol, meta))
        }
        Metadata::Projections { .. } => Err(Error::InvalidData(format!(
            "{} holds projections, expected a volume",
            stem.display()
        ))),
    }
}

pub fn write_projections(
    stem: &Path,
    proj: &ProjectionSet,
    role: &str,
    extra: Map<String, Value>,
) -> Result<Vec<PathBuf>> {
    let raw = encode_f32(proj.data());
    let meta = Metadata::Projections {
        n_views: proj.n_views(),
        det_u: proj.det_u,
        det_v: proj.det_v,
        pixel_pitch: proj.pixel_pitch,
        angles: proj.angles.clone(),
        role: role.to_string(),
        dtype: "float32".into(),
        byte_order: "little".into(),
        checksum: sha256_hex(&raw),
        extra,
    };
    write_pair(stem, &raw, &meta)
}

pub fn read_projections(stem: &Path) -> Result<(ProjectionSet, Metadata)> {
    let (meta, values) = read_pair(stem)?;
    match &meta {
        Metadata::Projections {
            n_views,
            det_u,
            det_v,
            pixel_pitch,
            angles,
            ..
        } => {
            if angles.len() != *n_views {
                return Err(Error::InvalidData(format!(
                    "{}: {} angles for {} views",
                    stem.display(),
                    angles.len(),
                    n_views
                )));
            }
            let p = ProjectionSet::from_vec(*det_u, *det_v, *pixel_pitch, angles.clone(), values)?;
            Ok((p, meta))
        }
        Metadata::Volume { .. } => Err(Error::InvalidData(format!(
            "{} holds a volume, expected projections",
            stem.display()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn volume_round_trip_is_f32_exact() {
        let dir = tempfile::tempdir().unwrap();
        let g = Grid3::centered(5, 4, 3, 2.5).unwrap();
        let vol = Volume::from_fn(g, |i, j, k| (i as f32 * 0.25 + j as f32 - k as f32) as f64);
        let stem = dir.path().join("sub/act");
        let files = write_volume(&stem, &vol, "activity", Map::new()).unwrap();
        assert_eq!(files.len(), 2);
        let (back, meta) = read_volume(&stem).unwrap();
        assert_eq!(back, vol);
        assert_eq!(meta.role(), "activity");
    }

    #[test]
    fn layout_is_x_fastest_little_endian() {
        let dir = tempfile::tempdir().unwrap();
        let g = Grid3::centered(2, 2, 1, 1.0).unwrap();
        let vol = Volume::from_fn(g, |i, j, _| (i + 10 * j) as f64);
        let stem = dir.path().join("v");
        write_volume(&stem, &vol, "test", Map::new()).unwrap();
        let raw = std::fs::read(data_path(&stem)).unwrap();
        let vals: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        assert_eq!(vals, vec![0.0, 1.0, 10.0, 11.0]);
    }

    #[test]
    fn corrupted_data_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let p = ProjectionSet::from_vec(2, 1, 1.0, vec![0.0, 90.0], vec![1.0, 2.0, 3.0, 4.0])
            .unwrap();
        let stem = dir.path().join("p");
        write_projections(&stem, &p, "counts", Map::new()).unwrap();
        let (back, _) = read_projections(&stem).unwrap();
        assert_eq!(back, p);
        std::fs::write(data_path(&stem), [0u8; 16]).unwrap();
        assert!(matches!(read_projections(&stem), Err(Error::Checksum { .. })));
        assert!(read_volume(&stem).is_err());
    }
}
