//! Parameter archives: `FDCK`, a little-endian `u32` manifest length, a
//! JSON manifest of `{name, shape, role}` entries, then every tensor as
//! little-endian `f64` in manifest order.

use std::path::Path;

use feddis_core::params::{role_of, ParamSet};
use feddis_core::Matrix;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

const MAGIC: &[u8; 4] = b"FDCK";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub shape: [usize; 2],
    pub role: String,
}

pub fn encode(params: &ParamSet) -> Vec<u8> {
    let manifest: Vec<Entry> = params
        .iter()
        .map(|(name, m)| Entry {
            name: name.to_string(),
            shape: [m.rows(), m.cols()],
            role: role_of(name).name().to_string(),
        })
        .collect();
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let floats: usize = params.iter().map(|(_, m)| m.len()).sum();
    let mut out = Vec::with_capacity(8 + json.len() + 8 * floats);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, m) in params.iter() {
        for v in m.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> std::result::Result<ParamSet, String> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err("not a checkpoint archive".into());
    }
    let len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let json = bytes.get(8..8 + len).ok_or("truncated manifest")?;
    let manifest: Vec<Entry> = serde_json::from_slice(json).map_err(|e| format!("manifest: {e}"))?;
    let mut rest = &bytes[8 + len..];
    let mut params = ParamSet::new();
    for e in manifest {
        if role_of(&e.name).name() != e.role {
            return Err(format!("{} recorded with role {}", e.name, e.role));
        }
        let [rows, cols] = e.shape;
        let n = rows.checked_mul(cols).ok_or("shape overflow")?;
        let take = n.checked_mul(8).filter(|&b| b <= rest.len()).ok_or_else(|| format!("{} truncated", e.name))?;
        let data = rest[..take]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        rest = &rest[take..];
        let m = Matrix::from_vec(rows, cols, data).map_err(|err| err.to_string())?;
        if params.insert(e.name.clone(), m).is_some() {
            return Err(format!("{} listed twice", e.name));
        }
    }
    if !rest.is_empty() {
        return Err(format!("{} trailing bytes", rest.len()));
    }
    Ok(params)
}

pub fn save(path: &Path, params: &ParamSet) -> Result<()> {
    std::fs::write(path, encode(params)).map_err(|e| LabError::io(path, e))
}

pub fn load(path: &Path) -> Result<ParamSet> {
    let bytes = std::fs::read(path).map_err(|e| LabError::io(path, e))?;
    decode(&bytes).map_err(|msg| LabError::format(path, msg))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("global.head.w", Matrix::from_rows(&[[1.0, -2.5], [0.125, 3.0]]));
        p.insert("personal.bank", Matrix::from_rows(&[[f64::MIN_POSITIVE]]));
        p
    }

    #[test]
    fn round_trip_is_exact() {
        let p = sample();
        assert_eq!(decode(&encode(&p)).unwrap(), p);
    }

    #[test]
    fn damaged_archives_rejected() {
        let bytes = encode(&sample());
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(decode(&magic).is_err());
    }
}
