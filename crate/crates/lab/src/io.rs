//! Dataset and partition files.
//!
//! Matrix-binary: an 8-byte header of two little-endian `u32` (`T_total`,
//! `N`) followed by `T_total * N` little-endian `f32`, row-major. CSV: a
//! header row of node ids, then one row per step.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use feddis_core::data::TrafficSeries;
use feddis_core::Matrix;

use crate::error::{LabError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetFormat {
    MatrixBinary,
    Csv,
}

impl DatasetFormat {
    /// `.csv` is CSV; `.bin` and `.dat` are matrix-binary.
    pub fn from_path(path: &Path) -> Result<Self> {
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        match ext.as_deref() {
            Some("csv") => Ok(DatasetFormat::Csv),
            Some("bin") | Some("dat") => Ok(DatasetFormat::MatrixBinary),
            _ => Err(LabError::format(path, "unknown dataset extension (want .csv, .bin or .dat)")),
        }
    }
}

pub fn load_dataset(path: &Path, format: DatasetFormat, interval_minutes: u32) -> Result<TrafficSeries> {
    match format {
        DatasetFormat::MatrixBinary => {
            let bytes = std::fs::read(path).map_err(|e| LabError::io(path, e))?;
            let values = parse_matrix_binary(&bytes).map_err(|msg| LabError::format(path, msg))?;
            TrafficSeries::with_default_ids(values, interval_minutes).map_err(|e| LabError::format(path, e.to_string()))
        }
        DatasetFormat::Csv => load_csv(path, interval_minutes),
    }
}

fn parse_matrix_binary(bytes: &[u8]) -> std::result::Result<Matrix, String> {
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    if bytes.len() < 8 {
        return Err(format!("{} bytes is shorter than the 8-byte header", bytes.len()));
    }
    let (steps, nodes) = (word(0) as usize, word(4) as usize);
    let expected = steps
        .checked_mul(nodes)
        .and_then(|n| n.checked_mul(4))
        .ok_or("header dimensions overflow")?;
    if bytes.len() - 8 != expected {
        return Err(format!(
            "header declares {steps} x {nodes} ({expected} payload bytes) but file holds {}",
            bytes.len() - 8
        ));
    }
    let data: Vec<f64> = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(format!("non-finite value at step {}, node {}", i / nodes, i % nodes));
    }
    Matrix::from_vec(steps, nodes, data).map_err(|e| e.to_string())
}

fn load_csv(path: &Path, interval_minutes: u32) -> Result<TrafficSeries> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| LabError::format(path, e.to_string()))?;
    let ids: Vec<String> = reader
        .headers()
        .map_err(|e| LabError::format(path, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut data = Vec::new();
    let mut steps = 0;
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| LabError::format(path, e.to_string()))?;
        if record.len() != ids.len() {
            return Err(LabError::format(
                path,
                format!("row {} has {} fields, header has {}", row + 1, record.len(), ids.len()),
            ));
        }
        for (col, field) in record.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                LabError::format(path, format!("row {}, column {}: unparseable value {field:?}", row + 1, col + 1))
            })?;
            if !v.is_finite() {
                return Err(LabError::format(path, format!("row {}, column {}: non-finite value", row + 1, col + 1)));
            }
            data.push(v);
        }
        steps += 1;
    }
    let values = Matrix::from_vec(steps, ids.len(), data)?;
    TrafficSeries::new(values, interval_minutes, ids).map_err(|e| LabError::format(path, e.to_string()))
}

pub fn write_matrix_binary(path: &Path, series: &TrafficSeries) -> Result<()> {
    let values = series.values();
    let dims = |n: usize| u32::try_from(n).map_err(|_| LabError::format(path, "dimension exceeds u32"));
    let mut out = Vec::with_capacity(8 + 4 * values.len());
    out.extend_from_slice(&dims(values.rows())?.to_le_bytes());
    out.extend_from_slice(&dims(values.cols())?.to_le_bytes());
    for &v in values.as_slice() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(path, out).map_err(|e| LabError::io(path, e))
}

pub fn write_csv(path: &Path, series: &TrafficSeries) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| LabError::format(path, e.to_string()))?;
    let err = |e: csv::Error| LabError::format(path, e.to_string());
    w.write_record(series.node_ids()).map_err(err)?;
    let values = series.values();
    for t in 0..values.rows() {
        w.write_record(values.row(t).iter().map(|v| v.to_string())).map_err(err)?;
    }
    w.flush().map_err(|e| LabError::io(path, e))
}

/// Reads a node assignment: one line per client, `client_id: i j k ...`
/// (indices separated by whitespace or commas). Blank lines and lines
/// starting with `#` are ignored. Client ids must be exactly `0..M`.
pub fn read_partition_file(path: &Path) -> Result<Vec<Vec<usize>>> {
    let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    parse_partition(&text).map_err(|msg| LabError::format(path, msg))
}

pub fn parse_partition(text: &str) -> std::result::Result<Vec<Vec<usize>>, String> {
    let mut clients: Vec<Option<Vec<usize>>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let at = |msg: String| format!("line {}: {msg}", lineno + 1);
        let (id, rest) = line.split_once(':').ok_or_else(|| at("expected `client_id: nodes`".into()))?;
        let id: usize = id.trim().parse().map_err(|_| at(format!("bad client id {:?}", id.trim())))?;
        let nodes = rest
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<usize>().map_err(|_| at(format!("bad node index {s:?}"))))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        if clients.len() <= id {
            clients.resize(id + 1, None);
        }
        if clients[id].replace(nodes).is_some() {
            return Err(at(format!("client {id} listed twice")));
        }
    }
    clients
        .into_iter()
        .enumerate()
        .map(|(m, nodes)| nodes.ok_or_else(|| format!("client {m} missing")))
        .collect()
}

pub fn write_partition_file(path: &Path, assignment: &[Vec<usize>]) -> Result<()> {
    let file = File::create(path).map_err(|e| LabError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (m, nodes) in assignment.iter().enumerate() {
        let list: Vec<String> = nodes.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{m}: {}", list.join(" ")).map_err(|e| LabError::io(path, e))?;
    }
    w.flush().map_err(|e| LabError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_text_parses() {
        let p = parse_partition("# two clients\n1: 2, 3\n0: 0 1\n\n").unwrap();
        assert_eq!(p, vec![vec![0, 1], vec![2, 3]]);
        assert!(parse_partition("0: 1\n2: 0").unwrap_err().contains("client 1 missing"));
        assert!(parse_partition("0: 1\n0: 2").is_err());
        assert!(parse_partition("0 1 2").is_err());
        assert!(parse_partition("0: x").is_err());
    }

    #[test]
    fn binary_header_mismatch_rejected() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&[0u8; 12]);
        assert!(parse_matrix_binary(&bytes).unwrap_err().contains("declares"));
        assert!(parse_matrix_binary(&[1, 2, 3]).is_err());
        bytes.extend_from_slice(&f32::NAN.to_le_bytes());
        assert!(parse_matrix_binary(&bytes).unwrap_err().contains("non-finite"));
    }
}
