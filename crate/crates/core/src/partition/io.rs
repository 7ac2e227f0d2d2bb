//! Dataset and partition file formats.
//!
//! - Tabular CSV: feature columns followed by an integer label column. Lines
//!   starting with `#` are comments; a first line that does not parse as
//!   numbers is taken as a header.
//! - Image binary: `"FDRM"`, then `u32` count, channels, height, width (all
//!   little-endian), then `count * C * H * W` bytes, sample-major, planar.
//! - Partition CSV: `sample_index,client_id,split`.

use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::linalg::Matrix;
use crate::{Error, Result};

const IMAGE_MAGIC: &[u8; 4] = b"FDRM";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSet {
    pub count: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl ImageSet {
    pub fn sample_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Bytes scaled to `[0, 1]`, one row per image.
    pub fn to_features(&self) -> Matrix {
        let data = self.data.iter().map(|&b| b as f64 / 255.0).collect();
        Matrix::from_vec(self.count, self.sample_len(), data).expect("sizes agree")
    }

    pub fn select(&self, idx: &[usize]) -> ImageSet {
        let len = self.sample_len();
        let mut data = Vec::with_capacity(idx.len() * len);
        for &i in idx {
            data.extend_from_slice(&self.data[i * len..(i + 1) * len]);
        }
        ImageSet {
            count: idx.len(),
            data,
            ..*self
        }
    }
}

pub fn write_images(path: &Path, images: &ImageSet) -> Result<()> {
    let mut out = Vec::with_capacity(16 + images.data.len());
    out.extend_from_slice(IMAGE_MAGIC);
    for v in [images.count, images.channels, images.height, images.width] {
        let v = u32::try_from(v).map_err(|_| Error::data("image dimension exceeds u32"))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&images.data);
    fs::write(path, out)?;
    Ok(())
}

pub fn read_images(path: &Path) -> Result<ImageSet> {
    let mut file = fs::File::open(path)?;
    let mut header = [0u8; 20];
    file.read_exact(&mut header)
        .map_err(|_| Error::data(format!("{}: truncated image header", path.display())))?;
    if &header[..4] != IMAGE_MAGIC {
        return Err(Error::data(format!("{}: bad magic", path.display())));
    }
    let field = |i: usize| u32::from_le_bytes(header[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (count, channels, height, width) = (field(0), field(1), field(2), field(3));
    let mut data = Vec::new();
    file.read_to_end(&mut data)?;
    let expected = count * channels * height * width;
    if data.len() != expected {
        return Err(Error::data(format!(
            "{}: expected {expected} pixel bytes, found {}",
            path.display(),
            data.len()
        )));
    }
    Ok(ImageSet {
        count,
        channels,
        height,
        width,
        data,
    })
}

pub fn read_tabular_csv(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut first = true;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed: std::result::Result<Vec<f64>, _> =
            fields[..fields.len() - 1].iter().map(|f| f.parse::<f64>()).collect();
        let label = fields[fields.len() - 1].parse::<usize>();
        let (feats, label) = match (parsed, label) {
            (Ok(f), Ok(l)) => (f, l),
            _ if first => {
                first = false;
                continue;
            }
            _ => return Err(Error::data(format!("{}:{}: malformed row", path.display(), lineno + 1))),
        };
        first = false;
        if feats.is_empty() {
            return Err(Error::data(format!(
                "{}:{}: no feature columns",
                path.display(),
                lineno + 1
            )));
        }
        if feats.iter().any(|v| !v.is_finite()) {
            return Err(Error::data(format!(
                "{}:{}: non-finite feature",
                path.display(),
                lineno + 1
            )));
        }
        rows.push(feats);
        labels.push(label);
    }
    if rows.is_empty() {
        return Err(Error::data(format!("{}: no data rows", path.display())));
    }
    let x = Matrix::from_rows(&rows).map_err(|_| Error::data(format!("{}: ragged rows", path.display())))?;
    let classes = labels.iter().max().unwrap() + 1;
    Dataset::new(x, labels, classes)
}

pub fn write_tabular_csv(path: &Path, data: &Dataset) -> Result<()> {
    let mut out = String::new();
    for (row, y) in data.x.iter_rows().zip(&data.y) {
        for v in row {
            write!(out, "{v},").unwrap();
        }
        writeln!(out, "{y}").unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PartitionRow {
    pub sample_index: usize,
    pub client_id: usize,
    pub split: Split,
}

/// Writes the partition with `header` as a leading comment line.
pub fn write_partition_csv(mut out: impl Write, header: &str, rows: &[PartitionRow]) -> Result<()> {
    let mut text = format!("# {header}\nsample_index,client_id,split\n");
    for r in rows {
        writeln!(text, "{},{},{}", r.sample_index, r.client_id, r.split.as_str()).unwrap();
    }
    out.write_all(text.as_bytes())?;
    Ok(())
}

pub fn read_partition_csv(path: &Path) -> Result<Vec<PartitionRow>> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.starts_with("sample_index") || line.trim().is_empty() {
            continue;
        }
        let bad = || Error::data(format!("{}:{}: malformed partition row", path.display(), lineno + 1));
        let mut parts = line.split(',');
        let sample_index = parts.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let client_id = parts.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let split = match parts.next() {
            Some("train") => Split::Train,
            Some("test") => Split::Test,
            _ => return Err(bad()),
        };
        rows.push(PartitionRow {
            sample_index,
            client_id,
            split,
        });
    }
    Ok(rows)
}
