//! Dataset and weight file formats.
//!
//! CSV: header `y,a,g,x0,...,x{d-1}` with `g` written as `a|y`.
//! Binary: `DSPL`, u32 version, u64 n, u64 d, n*d little-endian f32 row-major,
//! then n records of (i8 y, i8 a).

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use crate::dataset::{Dataset, GroupId};
use crate::error::{Error, Result};
use crate::linmodel::ModelWeights;

pub const MAGIC: &[u8; 4] = b"DSPL";
pub const VERSION: u32 = 1;
const HEADER_LEN: u64 = 4 + 4 + 8 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Bin,
}

impl Format {
    /// `.bin` selects binary, anything else CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("bin") => Format::Bin,
            _ => Format::Csv,
        }
    }

    /// Binary when the file starts with the binary magic, CSV otherwise.
    pub fn detect(path: &Path) -> Result<Self> {
        let mut head = [0u8; 4];
        let mut f = File::open(path)?;
        let mut read = 0;
        while read < head.len() {
            match f.read(&mut head[read..])? {
                0 => break,
                k => read += k,
            }
        }
        Ok(if read == 4 && &head == MAGIC { Format::Bin } else { Format::Csv })
    }
}

impl FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "csv" => Ok(Format::Csv),
            "bin" => Ok(Format::Bin),
            other => Err(format!("unknown format `{other}` (expected csv or bin)")),
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Format::Csv => "csv",
            Format::Bin => "bin",
        })
    }
}

pub fn save_dataset(data: &Dataset, path: &Path, format: Format) -> Result<()> {
    match format {
        Format::Csv => save_csv(data, path),
        Format::Bin => save_bin(data, path),
    }
}

pub fn load_embeddings(path: &Path, format: Format) -> Result<Dataset> {
    match format {
        Format::Csv => load_csv(path),
        Format::Bin => load_bin(path),
    }
}

pub fn save_csv(data: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "y,a,g")?;
    for j in 0..data.dim() {
        write!(w, ",x{j}")?;
    }
    w.write_all(b"\n")?;
    for (i, row) in data.rows().enumerate() {
        write!(w, "{},{},{}", data.label(i), data.attribute(i), data.group(i))?;
        for v in row {
            write!(w, ",{v}")?;
        }
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_csv(path: &Path) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)?;
    let header = rdr.headers()?.clone();
    let bad_header = |reason: String| Error::BadHeader {
        path: path.to_path_buf(),
        reason,
    };
    if header.len() < 4 {
        return Err(bad_header(format!(
            "expected `y,a,g,x0,...`, found {} columns",
            header.len()
        )));
    }
    for (k, want) in ["y", "a", "g"].iter().enumerate() {
        if &header[k] != *want {
            return Err(bad_header(format!("column {k} is `{}`, expected `{want}`", &header[k])));
        }
    }
    let dim = header.len() - 3;
    for j in 0..dim {
        if header[j + 3] != *format!("x{j}") {
            return Err(bad_header(format!(
                "column {} is `{}`, expected `x{j}`",
                j + 3,
                &header[j + 3]
            )));
        }
    }

    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut a = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != dim + 3 {
            return Err(Error::RowLength {
                path: path.to_path_buf(),
                row,
                expected: dim + 3,
                found: rec.len(),
            });
        }
        let field = |k: usize, what: &str| Error::BadField {
            path: path.to_path_buf(),
            row,
            reason: format!("cannot parse {what} `{}`", &rec[k]),
        };
        let yi: i8 = rec[0].trim().parse().map_err(|_| field(0, "label"))?;
        let ai: i8 = rec[1].trim().parse().map_err(|_| field(1, "attribute"))?;
        let g: GroupId = rec[2].parse().map_err(|_| Error::BadGroup {
            path: path.to_path_buf(),
            row,
            value: rec[2].to_string(),
        })?;
        if g != GroupId::new(ai, yi) {
            return Err(Error::BadGroup {
                path: path.to_path_buf(),
                row,
                value: rec[2].to_string(),
            });
        }
        for k in 3..dim + 3 {
            x.push(rec[k].trim().parse::<f32>().map_err(|_| field(k, "feature"))?);
        }
        y.push(yi);
        a.push(ai);
    }
    Dataset::new(dim, x, y, a)
}

pub fn save_bin(data: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(data.len() as u64).to_le_bytes())?;
    w.write_all(&(data.dim() as u64).to_le_bytes())?;
    for v in data.features() {
        w.write_all(&v.to_le_bytes())?;
    }
    for i in 0..data.len() {
        w.write_all(&[data.label(i) as u8, data.attribute(i) as u8])?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_bin(path: &Path) -> Result<Dataset> {
    let file_len = std::fs::metadata(path)?.len();
    let mut r = BufReader::new(File::open(path)?);
    let bad = |offset: u64, reason: String| Error::BadBinary {
        path: path.to_path_buf(),
        offset,
        reason,
    };
    if file_len < HEADER_LEN {
        return Err(bad(file_len, format!("truncated header ({file_len} bytes)")));
    }
    let mut head = [0u8; HEADER_LEN as usize];
    r.read_exact(&mut head)?;
    if &head[0..4] != MAGIC {
        return Err(bad(0, "bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(bad(4, format!("unsupported version {version}")));
    }
    let n = u64::from_le_bytes(head[8..16].try_into().unwrap());
    let d = u64::from_le_bytes(head[16..24].try_into().unwrap());
    if d == 0 {
        return Err(bad(16, "dimension is zero".into()));
    }
    let expected = n
        .checked_mul(d)
        .and_then(|nd| nd.checked_mul(4))
        .and_then(|b| b.checked_add(2 * n + HEADER_LEN))
        .ok_or_else(|| bad(8, format!("size overflow for n={n}, d={d}")))?;
    if file_len != expected {
        return Err(bad(
            file_len.min(expected),
            format!("file is {file_len} bytes, header implies {expected}"),
        ));
    }
    let (n, d) = (n as usize, d as usize);
    let mut buf = vec![0u8; n * d * 4];
    r.read_exact(&mut buf)?;
    let x: Vec<f32> = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut meta = vec![0u8; 2 * n];
    r.read_exact(&mut meta)?;
    let y = meta.iter().step_by(2).map(|&b| b as i8).collect();
    let a = meta.iter().skip(1).step_by(2).map(|&b| b as i8).collect();
    Dataset::new(d, x, y, a)
}

/// Writes weights as `w0..w{d-1},b`, one row per head (an empty `b` means
/// no bias).
pub fn save_weights(heads: &[ModelWeights], path: &Path) -> Result<()> {
    let d = heads.first().map_or(0, |h| h.w.len());
    let mut w = BufWriter::new(File::create(path)?);
    for j in 0..d {
        write!(w, "w{j},")?;
    }
    w.write_all(b"b\n")?;
    for h in heads {
        if h.w.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: h.w.len(),
            });
        }
        for v in &h.w {
            write!(w, "{v},")?;
        }
        if let Some(b) = h.b {
            write!(w, "{b}")?;
        }
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<Vec<ModelWeights>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)?;
    let header = rdr.headers()?.clone();
    let bad_header = |reason: String| Error::BadHeader {
        path: path.to_path_buf(),
        reason,
    };
    if header.is_empty() || &header[header.len() - 1] != "b" {
        return Err(bad_header("last column must be `b`".into()));
    }
    let d = header.len() - 1;
    for j in 0..d {
        if header[j] != *format!("w{j}") {
            return Err(bad_header(format!("column {j} is `{}`, expected `w{j}`", &header[j])));
        }
    }
    let mut out = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != d + 1 {
            return Err(Error::RowLength {
                path: path.to_path_buf(),
                row,
                expected: d + 1,
                found: rec.len(),
            });
        }
        let parse = |k: usize| {
            rec[k].trim().parse::<f64>().map_err(|_| Error::BadField {
                path: path.to_path_buf(),
                row,
                reason: format!("cannot parse weight `{}`", &rec[k]),
            })
        };
        let w = (0..d).map(parse).collect::<Result<Vec<_>>>()?;
        let b = if rec[d].trim().is_empty() {
            None
        } else {
            Some(parse(d)?)
        };
        out.push(ModelWeights { w, b });
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset("weights file has no rows"));
    }
    Ok(out)
}
