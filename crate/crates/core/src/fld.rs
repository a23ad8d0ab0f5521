//! `.fld` container: a little-endian flat-tensor file with a JSON header.
//!
//! Layout: 4-byte magic `FLD0`, u32 header length, UTF-8 JSON header, then
//! `shape.product()` f64 values. The header records dtype, shape and an
//! arbitrary `meta` object so states, residual datasets and network weights
//! all share one reader.

use crate::field::{AtmosphericState, GridSpec};
use ndarray::{Array3, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;
use thiserror::Error;

const MAGIC: &[u8; 4] = b"FLD0";

#[derive(Debug, Error)]
pub enum FldError {
    #[error("io error reading or writing `{path}`: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("`{path}` is not an fld file (bad magic)")]
    BadMagic { path: String },
    #[error("malformed header in `{path}`: {reason}")]
    BadHeader { path: String, reason: String },
    #[error("`{path}` holds {found} values but header shape implies {expected}")]
    PayloadMismatch {
        path: String,
        expected: usize,
        found: usize,
    },
    #[error("`{path}` missing required metadata field `{field}`")]
    MissingMeta { path: String, field: String },
}

fn io_err(path: &Path, source: std::io::Error) -> FldError {
    FldError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dtype: String,
    shape: Vec<usize>,
    #[serde(default)]
    meta: serde_json::Value,
}

/// A decoded `.fld` file.
#[derive(Debug, Clone)]
pub struct FldFile {
    pub shape: Vec<usize>,
    pub meta: serde_json::Value,
    pub data: Vec<f64>,
}

impl FldFile {
    pub fn into_array(self) -> Result<ArrayD<f64>, FldError> {
        let shape = IxDyn(&self.shape);
        ArrayD::from_shape_vec(shape, self.data).map_err(|e| FldError::BadHeader {
            path: String::new(),
            reason: e.to_string(),
        })
    }
}

/// Write a flat f64 tensor with its shape and metadata.
pub fn write_fld(
    path: &Path,
    shape: &[usize],
    data: &[f64],
    meta: serde_json::Value,
) -> Result<(), FldError> {
    let expected: usize = shape.iter().product();
    assert_eq!(
        expected,
        data.len(),
        "shape {shape:?} does not match {} values",
        data.len()
    );
    let header = Header {
        dtype: "f64".into(),
        shape: shape.to_vec(),
        meta,
    };
    let header_bytes = serde_json::to_vec(&header).expect("header serializes");
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC).map_err(|e| io_err(path, e))?;
    w.write_all(&(header_bytes.len() as u32).to_le_bytes())
        .map_err(|e| io_err(path, e))?;
    w.write_all(&header_bytes).map_err(|e| io_err(path, e))?;
    for v in data {
        w.write_all(&v.to_le_bytes()).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Read a `.fld` file, checking magic and payload length.
pub fn read_fld(path: &Path) -> Result<FldFile, FldError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| io_err(path, e))?;
    if &magic != MAGIC {
        return Err(FldError::BadMagic {
            path: path.display().to_string(),
        });
    }
    let mut len_bytes = [0u8; 4];
    r.read_exact(&mut len_bytes).map_err(|e| io_err(path, e))?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)
        .map_err(|e| io_err(path, e))?;
    let header: Header =
        serde_json::from_slice(&header_bytes).map_err(|e| FldError::BadHeader {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
    if header.dtype != "f64" {
        return Err(FldError::BadHeader {
            path: path.display().to_string(),
            reason: format!("unsupported dtype `{}`", header.dtype),
        });
    }
    let expected: usize = header.shape.iter().product();
    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(|e| io_err(path, e))?;
    if payload.len() != expected * 8 {
        return Err(FldError::PayloadMismatch {
            path: path.display().to_string(),
            expected,
            found: payload.len() / 8,
        });
    }
    let data = payload
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(FldFile {
        shape: header.shape,
        meta: header.meta,
        data,
    })
}

/// Persist a sequence of states from one trajectory as a single
/// `steps x height x width x channels` tensor. The grid spec and the time
/// index of the first state ride along in the metadata.
pub fn write_trajectory(
    path: &Path,
    spec: &GridSpec,
    states: &[AtmosphericState],
) -> Result<(), FldError> {
    assert!(!states.is_empty(), "trajectory must hold at least one state");
    let (h, w, c) = (spec.height, spec.width, spec.num_channels());
    let mut data = Vec::with_capacity(states.len() * h * w * c);
    for s in states {
        debug_assert_eq!(s.data.dim(), (h, w, c));
        data.extend(s.data.iter().copied());
    }
    let meta = serde_json::json!({
        "kind": "trajectory",
        "grid": spec,
        "start_time_index": states[0].time_index,
    });
    write_fld(path, &[states.len(), h, w, c], &data, meta)
}

/// Load a trajectory written by [`write_trajectory`].
pub fn read_trajectory(path: &Path) -> Result<(Arc<GridSpec>, Vec<AtmosphericState>), FldError> {
    let fld = read_fld(path)?;
    let path_str = path.display().to_string();
    let grid_value = fld
        .meta
        .get("grid")
        .cloned()
        .ok_or_else(|| FldError::MissingMeta {
            path: path_str.clone(),
            field: "grid".into(),
        })?;
    let spec: GridSpec = serde_json::from_value(grid_value).map_err(|e| FldError::BadHeader {
        path: path_str.clone(),
        reason: format!("grid metadata: {e}"),
    })?;
    let start = fld
        .meta
        .get("start_time_index")
        .and_then(|v| v.as_i64())
        .ok_or_else(|| FldError::MissingMeta {
            path: path_str.clone(),
            field: "start_time_index".into(),
        })?;
    if fld.shape.len() != 4
        || fld.shape[1] != spec.height
        || fld.shape[2] != spec.width
        || fld.shape[3] != spec.num_channels()
    {
        return Err(FldError::BadHeader {
            path: path_str,
            reason: format!("shape {:?} inconsistent with grid metadata", fld.shape),
        });
    }
    let (steps, h, w, c) = (fld.shape[0], fld.shape[1], fld.shape[2], fld.shape[3]);
    let spec = Arc::new(spec);
    let frame = h * w * c;
    let states = (0..steps)
        .map(|i| {
            let slice = &fld.data[i * frame..(i + 1) * frame];
            let arr = Array3::from_shape_vec((h, w, c), slice.to_vec()).expect("shape checked");
            AtmosphericState::new(spec.clone(), arr, start + i as i64)
        })
        .collect();
    Ok((spec, states))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::GridSpec;
    use tempfile::tempdir;

    #[test]
    fn round_trip_preserves_bytes() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.fld");
        let data: Vec<f64> = (0..24).map(|i| (i as f64) * 0.5 - 3.0).collect();
        write_fld(&path, &[2, 3, 4], &data, serde_json::json!({"tag": "x"})).unwrap();
        let fld = read_fld(&path).unwrap();
        assert_eq!(fld.shape, vec![2, 3, 4]);
        assert_eq!(fld.data, data);
        assert_eq!(fld.meta["tag"], "x");
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.fld");
        std::fs::write(&path, b"NOPE....").unwrap();
        assert!(matches!(read_fld(&path), Err(FldError::BadMagic { .. })));
    }

    #[test]
    fn truncated_payload_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("short.fld");
        write_fld(&path, &[4], &[1.0, 2.0, 3.0, 4.0], serde_json::Value::Null).unwrap();
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() - 8]).unwrap();
        assert!(matches!(
            read_fld(&path),
            Err(FldError::PayloadMismatch { .. })
        ));
    }

    #[test]
    fn trajectory_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("traj.fld");
        let spec = Arc::new(GridSpec::new(8, 10, 2, true, false).unwrap());
        let mut states = Vec::new();
        for t in 0..3 {
            let mut s = AtmosphericState::zeros(spec.clone(), 7 + t);
            s.data[(1, 2, 3)] = t as f64 + 0.25;
            states.push(s);
        }
        write_trajectory(&path, &spec, &states).unwrap();
        let (spec2, loaded) = read_trajectory(&path).unwrap();
        assert_eq!(*spec2, *spec);
        assert_eq!(loaded.len(), 3);
        assert_eq!(loaded[0].time_index, 7);
        assert_eq!(loaded[2].time_index, 9);
        assert_eq!(loaded[1].data[(1, 2, 3)], 1.25);
        assert_eq!(loaded[1].data[(0, 0, 0)], 0.0);
    }
}
