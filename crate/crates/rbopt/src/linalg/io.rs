//! File formats: Matrix Market for sparse operators, flat binary blocks with
//! a JSON header for dense bases and vectors.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::csr::CsrMatrix;
use crate::linalg::space::{BasisMatrix, MetricTag};

/// Write in Matrix Market coordinate format (1-based, `real general`).
pub fn write_matrix_market(path: &Path, m: &CsrMatrix) -> Result<()> {
    let mut out = String::new();
    out.push_str("%%MatrixMarket matrix coordinate real general\n");
    out.push_str(&format!("{} {} {}\n", m.rows(), m.cols(), m.nnz()));
    for (r, c, v) in m.triplets() {
        out.push_str(&format!("{} {} {:.17e}\n", r + 1, c + 1, v));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_matrix_market(path: &Path) -> Result<CsrMatrix> {
    let file = fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty Matrix Market file".into()))??;
    if !header.starts_with("%%MatrixMarket matrix coordinate real") {
        return Err(Error::Format(format!("unsupported Matrix Market header: {header}")));
    }
    let symmetric = header.contains("symmetric");
    let mut dims: Option<(usize, usize, usize)> = None;
    let mut triplets: Vec<(usize, usize, f64)> = Vec::new();
    for line in lines {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('%') {
            continue;
        }
        let mut it = line.split_whitespace();
        if dims.is_none() {
            let r: usize = parse(it.next(), "rows")?;
            let c: usize = parse(it.next(), "cols")?;
            let nnz: usize = parse(it.next(), "nnz")?;
            dims = Some((r, c, nnz));
            triplets.reserve(nnz);
            continue;
        }
        let r: usize = parse(it.next(), "entry row")?;
        let c: usize = parse(it.next(), "entry col")?;
        let v: f64 = parse(it.next(), "entry value")?;
        triplets.push((r - 1, c - 1, v));
        if symmetric && r != c {
            triplets.push((c - 1, r - 1, v));
        }
    }
    let (rows, cols, _) = dims.ok_or_else(|| Error::Format("missing size line".into()))?;
    Ok(CsrMatrix::from_triplets(rows, cols, &triplets))
}

fn parse<T: std::str::FromStr>(tok: Option<&str>, what: &str) -> Result<T> {
    tok.ok_or_else(|| Error::Format(format!("missing {what}")))?
        .parse::<T>()
        .map_err(|_| Error::Format(format!("cannot parse {what}")))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BlockHeader {
    pub rows: usize,
    pub cols: usize,
    pub metric: String,
    pub endianness: String,
    pub dtype: String,
}

fn metric_to_str(m: MetricTag) -> &'static str {
    match m {
        MetricTag::Gram => "gram",
        MetricTag::Mass => "mass",
        MetricTag::None => "none",
    }
}

fn metric_from_str(s: &str) -> Result<MetricTag> {
    match s {
        "gram" => Ok(MetricTag::Gram),
        "mass" => Ok(MetricTag::Mass),
        "none" => Ok(MetricTag::None),
        other => Err(Error::Format(format!("unknown metric tag {other}"))),
    }
}

/// Write a dense block as `<stem>.json` + `<stem>.bin` (column-major f64 LE).
pub fn write_block(stem: &Path, m: &DMatrix<f64>, metric: MetricTag) -> Result<()> {
    let header = BlockHeader {
        rows: m.nrows(),
        cols: m.ncols(),
        metric: metric_to_str(metric).to_string(),
        endianness: "little".to_string(),
        dtype: "f64".to_string(),
    };
    let json = serde_json::to_string_pretty(&header)
        .map_err(|e| Error::Format(format!("header serialization: {e}")))?;
    fs::write(stem.with_extension("json"), json)?;
    let mut bytes = Vec::with_capacity(8 * m.len());
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            bytes.extend_from_slice(&m[(i, j)].to_le_bytes());
        }
    }
    let mut f = fs::File::create(stem.with_extension("bin"))?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_block(stem: &Path) -> Result<(DMatrix<f64>, MetricTag)> {
    let json = fs::read_to_string(stem.with_extension("json"))?;
    let header: BlockHeader =
        serde_json::from_str(&json).map_err(|e| Error::Format(format!("header parse: {e}")))?;
    if header.endianness != "little" || header.dtype != "f64" {
        return Err(Error::Format("unsupported block encoding".into()));
    }
    let bytes = fs::read(stem.with_extension("bin"))?;
    if bytes.len() != 8 * header.rows * header.cols {
        return Err(Error::Format(format!(
            "block size mismatch: {} bytes for {}x{}",
            bytes.len(),
            header.rows,
            header.cols
        )));
    }
    let mut m = DMatrix::zeros(header.rows, header.cols);
    let mut idx = 0;
    for j in 0..header.cols {
        for i in 0..header.rows {
            let mut buf = [0u8; 8];
            buf.copy_from_slice(&bytes[idx..idx + 8]);
            m[(i, j)] = f64::from_le_bytes(buf);
            idx += 8;
        }
    }
    Ok((m, metric_from_str(&header.metric)?))
}

pub fn write_basis(stem: &Path, basis: &BasisMatrix) -> Result<()> {
    write_block(stem, basis.columns(), basis.metric())
}

pub fn read_basis(stem: &Path) -> Result<BasisMatrix> {
    let (m, metric) = read_block(stem)?;
    Ok(BasisMatrix::new(m, metric))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_market_roundtrip() {
        let dir = std::env::temp_dir().join("rbopt_mm_test");
        std::fs::create_dir_all(&dir).unwrap();
        let m = CsrMatrix::from_triplets(3, 4, &[(0, 0, 1.25), (2, 3, -7.5e-3), (1, 1, 3.0)]);
        let path = dir.join("m.mtx");
        write_matrix_market(&path, &m).unwrap();
        let back = read_matrix_market(&path).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn block_roundtrip_bitexact() {
        let dir = std::env::temp_dir().join("rbopt_blk_test");
        std::fs::create_dir_all(&dir).unwrap();
        let m = DMatrix::from_fn(4, 2, |i, j| (i as f64 + 0.1) * (j as f64 - 0.7));
        let stem = dir.join("block");
        write_block(&stem, &m, MetricTag::Gram).unwrap();
        let (back, tag) = read_block(&stem).unwrap();
        assert_eq!(tag, MetricTag::Gram);
        assert_eq!(m, back);
    }
}
