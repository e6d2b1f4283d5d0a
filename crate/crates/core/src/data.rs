//! IDX and CSV dataset readers.
//!
//! IDX files start with a big-endian magic (`0x00000803` for `u8` images,
//! `0x00000801` for `u8` labels) followed by one big-endian `u32` per
//! dimension and the raw payload. CSV files carry a header row and one sample
//! per line with the label in the last column.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::InputShape;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Row-major `[n, channels * height * width]`, scaled to `[0, 1]`.
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub shape: InputShape,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let d = self.shape.len();
        &self.features[i * d..(i + 1) * d]
    }

    /// Gather samples by index into one batch.
    pub fn batch(&self, idx: &[usize]) -> (Vec<f64>, Vec<usize>) {
        let mut x = Vec::with_capacity(idx.len() * self.shape.len());
        for &i in idx {
            x.extend_from_slice(self.sample(i));
        }
        (x, idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// First `n` samples.
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            features: self.features[..n * self.shape.len()].to_vec(),
            labels: self.labels[..n].to_vec(),
            shape: self.shape,
            classes: self.classes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Idx,
    Csv,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            offset: offset as u64,
            message: format!("header truncated: need 4 bytes at offset {offset}, file has {}", bytes.len()),
        })
}

/// Parse an IDX buffer, returning its dimensions and payload.
pub fn parse_idx(bytes: &[u8], expected_magic: u32) -> Result<(Vec<usize>, &[u8])> {
    let magic = be_u32(bytes, 0)?;
    if magic != expected_magic {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}"),
        });
    }
    let ndim = (magic & 0xff) as usize;
    let mut dims = Vec::with_capacity(ndim);
    for d in 0..ndim {
        dims.push(be_u32(bytes, 4 + 4 * d)? as usize);
    }
    let start = 4 + 4 * ndim;
    let need: usize = dims.iter().product();
    let have = bytes.len() - start;
    if have < need {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            message: format!("payload truncated: expected {need} bytes after the header, found {have}"),
        });
    }
    if have > need {
        return Err(Error::Format {
            offset: (start + need) as u64,
            message: format!("{} trailing bytes after the payload", have - need),
        });
    }
    Ok((dims, &bytes[start..]))
}

/// Load an IDX image/label pair.
pub fn load_idx(images: &Path, labels: &Path, classes: usize) -> Result<Dataset> {
    let img_bytes = read(images)?;
    let (dims, pixels) = parse_idx(&img_bytes, IDX_IMAGES_MAGIC).map_err(|e| at(images, e))?;
    let lab_bytes = read(labels)?;
    let (ldims, raw_labels) = parse_idx(&lab_bytes, IDX_LABELS_MAGIC).map_err(|e| at(labels, e))?;
    if dims[0] != ldims[0] {
        return Err(Error::Data(format!(
            "{} has {} images but {} has {} labels",
            images.display(),
            dims[0],
            labels.display(),
            ldims[0]
        )));
    }
    let shape = InputShape {
        channels: 1,
        height: dims[1],
        width: dims[2],
    };
    let labels = check_labels(raw_labels.iter().map(|&l| l as usize).collect(), classes)?;
    Ok(Dataset {
        features: pixels.iter().map(|&p| p as f64 / 255.0).collect(),
        labels,
        shape,
        classes,
    })
}

fn at(path: &Path, e: Error) -> Error {
    match e {
        Error::Format { offset, message } => Error::Format {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    }
}

fn check_labels(labels: Vec<usize>, classes: usize) -> Result<Vec<usize>> {
    if let Some((i, l)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        return Err(Error::Data(format!("label {l} of sample {i} outside [0, {classes})")));
    }
    Ok(labels)
}

/// Load a headered CSV with the label in the last column.
///
/// Features already in `[0, 1]` are kept; features in `[0, 255]` are divided by 255.
pub fn load_csv(path: &Path, shape: InputShape, classes: usize) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, shape, classes).map_err(|e| at(path, e))
}

pub fn parse_csv(text: &str, shape: InputShape, classes: usize) -> Result<Dataset> {
    let d = shape.len();
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut offset = 0u64;
    let mut lines = text.split_inclusive('\n');
    if let Some(h) = lines.next() {
        offset += h.len() as u64;
    }
    for line in lines {
        let row = line.trim_end_matches(['\n', '\r']);
        if row.trim().is_empty() {
            offset += line.len() as u64;
            continue;
        }
        let cells: Vec<&str> = row.split(',').collect();
        if cells.len() != d + 1 {
            return Err(Error::Format {
                offset,
                message: format!("row has {} columns, expected {} features and a label", cells.len(), d),
            });
        }
        for c in &cells[..d] {
            let v: f64 = c.trim().parse().map_err(|_| Error::Format {
                offset,
                message: format!("feature {c:?} is not a number"),
            })?;
            features.push(v);
        }
        let label = cells[d].trim();
        let l: usize = label.parse().map_err(|_| Error::Format {
            offset,
            message: format!("label {label:?} is not a class index"),
        })?;
        labels.push(l);
        offset += line.len() as u64;
    }
    if labels.is_empty() {
        return Err(Error::Data("CSV has no samples".into()));
    }
    let (lo, hi) = features.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, &v| (a.0.min(v), a.1.max(v)));
    if !(lo >= 0.0) {
        return Err(Error::Data(format!("feature value {lo} below 0")));
    }
    if hi > 255.0 {
        return Err(Error::Data(format!("feature value {hi} above 255")));
    }
    if hi > 1.0 {
        features.iter_mut().for_each(|v| *v /= 255.0);
    }
    Ok(Dataset {
        features,
        labels: check_labels(labels, classes)?,
        shape,
        classes,
    })
}

/// Label file conventionally paired with an IDX image file.
pub fn paired_labels(images: &Path) -> Option<PathBuf> {
    let name = images.file_name()?.to_str()?;
    let swapped = name.replace("images.idx3", "labels.idx1").replace("images-idx3", "labels-idx1");
    (swapped != name).then(|| images.with_file_name(swapped))
}

/// Load by extension: `.csv` as CSV, anything else as an IDX image file.
pub fn load(path: &Path, labels: Option<&Path>, shape: InputShape, classes: usize) -> Result<Dataset> {
    let ds = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        load_csv(path, shape, classes)?
    } else {
        let lab = match labels {
            Some(p) => p.to_path_buf(),
            None => paired_labels(path)
                .ok_or_else(|| Error::invalid(format!("no label file given for {}", path.display())))?,
        };
        load_idx(path, &lab, classes)?
    };
    if ds.shape.len() != shape.len() {
        return Err(Error::invalid(format!(
            "dataset samples have {} values, the model expects {}",
            ds.shape.len(),
            shape.len()
        )));
    }
    Ok(ds)
}
