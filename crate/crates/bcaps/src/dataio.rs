//! IDX dataset files, normalization, and the flat-file outputs (PGM grids,
//! CSV tables).

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const IDX_MAGIC_LABELS: u32 = 0x0000_0801;
pub const IDX_MAGIC_IMAGES: u32 = 0x0000_0803;

/// Raw IDX container: big-endian header, unsigned byte payload. The low
/// byte of the magic is the dimension count (1 for labels, 3 for images).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxFile {
    pub magic: u32,
    pub dims: Vec<u32>,
    pub payload: Vec<u8>,
}

impl IdxFile {
    pub fn items(&self) -> usize {
        self.dims.first().copied().unwrap_or(0) as usize
    }

    /// Flattened per-item length (product of the non-leading dims).
    pub fn item_len(&self) -> usize {
        self.dims.iter().skip(1).map(|&d| d as usize).product()
    }
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxFile> {
    if bytes.len() < 4 {
        return Err(Error::IdxParse {
            offset: bytes.len(),
            msg: format!("truncated magic: need 4 bytes, have {}", bytes.len()),
        });
    }
    let magic = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    if magic != IDX_MAGIC_LABELS && magic != IDX_MAGIC_IMAGES {
        return Err(Error::IdxParse {
            offset: 0,
            msg: format!("bad magic 0x{magic:08x} (expected 0x00000801 or 0x00000803)"),
        });
    }
    let ndims = (magic & 0xff) as usize;
    let header_len = 4 + 4 * ndims;
    if bytes.len() < header_len {
        return Err(Error::IdxParse {
            offset: bytes.len(),
            msg: format!("truncated header: need {header_len} bytes, have {}", bytes.len()),
        });
    }
    let mut dims = Vec::with_capacity(ndims);
    for i in 0..ndims {
        let o = 4 + 4 * i;
        dims.push(u32::from_be_bytes([
            bytes[o],
            bytes[o + 1],
            bytes[o + 2],
            bytes[o + 3],
        ]));
    }
    let expected: usize = dims.iter().map(|&d| d as usize).product();
    let actual = bytes.len() - header_len;
    if actual != expected {
        return Err(Error::IdxParse {
            offset: header_len,
            msg: format!("payload length {actual}, dims say {expected}"),
        });
    }
    Ok(IdxFile {
        magic,
        dims,
        payload: bytes[header_len..].to_vec(),
    })
}

pub fn serialize_idx(idx: &IdxFile) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * idx.dims.len() + idx.payload.len());
    out.extend_from_slice(&idx.magic.to_be_bytes());
    for &d in &idx.dims {
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(&idx.payload);
    out
}

/// Normalized, flattened images with labels.
#[derive(Clone, Debug)]
pub struct Dataset<S> {
    /// [n, item_len], every pixel in [0,1]
    pub images: Tensor<S>,
    pub labels: Vec<u8>,
    pub name: String,
    pub split: String,
}

impl<S: Scalar> Dataset<S> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_dim(&self) -> usize {
        self.images.shape()[1]
    }

    /// First n items (deterministic desk-scale subsetting).
    pub fn subset(&self, n: usize) -> Dataset<S> {
        let n = n.min(self.len());
        let dim = self.image_dim();
        Dataset {
            images: Tensor::new(&[n, dim], self.images.data()[..n * dim].to_vec())
                .expect("subset shape"),
            labels: self.labels[..n].to_vec(),
            name: self.name.clone(),
            split: self.split.clone(),
        }
    }

    /// Rows `idx` gathered into a batch tensor.
    pub fn batch(&self, idx: &[usize]) -> Tensor<S> {
        let dim = self.image_dim();
        let mut data = Vec::with_capacity(idx.len() * dim);
        for &i in idx {
            data.extend_from_slice(&self.images.data()[i * dim..(i + 1) * dim]);
        }
        Tensor::new(&[idx.len(), dim], data).expect("batch shape")
    }
}

/// Pairs an image file with a label file; pixels map p → p/255.
pub fn to_dataset<S: Scalar>(images: &IdxFile, labels: &IdxFile) -> Result<Dataset<S>> {
    if images.magic != IDX_MAGIC_IMAGES {
        return Err(Error::Contract(format!(
            "image file has magic 0x{:08x}, expected 0x00000803",
            images.magic
        )));
    }
    if labels.magic != IDX_MAGIC_LABELS {
        return Err(Error::Contract(format!(
            "label file has magic 0x{:08x}, expected 0x00000801",
            labels.magic
        )));
    }
    if images.items() != labels.items() {
        return Err(Error::Contract(format!(
            "item count mismatch: {} images vs {} labels",
            images.items(),
            labels.items()
        )));
    }
    for &l in &labels.payload {
        if l > 9 {
            return Err(Error::LabelRange {
                label: l as usize,
                num_classes: 10,
            });
        }
    }
    let dim = images.item_len();
    let data: Vec<S> = images
        .payload
        .iter()
        .map(|&p| S::from_f64(p as f64 / 255.0))
        .collect();
    Ok(Dataset {
        images: Tensor::new(&[images.items(), dim], data)?,
        labels: labels.payload.clone(),
        name: String::new(),
        split: String::new(),
    })
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn files(self) -> (&'static str, &'static str) {
        match self {
            Split::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
            Split::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Loads one split from a directory holding the four standard IDX files.
pub fn load_dataset<S: Scalar>(dir: &Path, split: Split) -> Result<Dataset<S>> {
    let (img_name, lbl_name) = split.files();
    let images = parse_idx(&fs::read(dir.join(img_name))?)?;
    let labels = parse_idx(&fs::read(dir.join(lbl_name))?)?;
    let mut ds = to_dataset(&images, &labels)?;
    ds.name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    ds.split = split.name().into();
    Ok(ds)
}

/// Square side of a flattened image, or an error for non-square lengths.
fn image_side(dim: usize) -> Result<usize> {
    let side = (dim as f64).sqrt().round() as usize;
    if side * side != dim {
        return Err(Error::Contract(format!(
            "image length {dim} is not a perfect square"
        )));
    }
    Ok(side)
}

/// Tiles images row-major into one binary PGM (P5), pixels quantized
/// round(p·255), cells separated by 1-pixel white lines. Missing cells in
/// the last row render black.
pub fn write_image_grid<S: Scalar>(images: &Tensor<S>, cols: usize, path: &Path) -> Result<()> {
    if images.rank() != 2 || cols == 0 {
        return Err(Error::Contract(
            "image grid needs a [n, pixels] tensor and cols >= 1".into(),
        ));
    }
    let n = images.shape()[0];
    if n == 0 {
        return Err(Error::EmptyInput("write_image_grid"));
    }
    let dim = images.shape()[1];
    let side = image_side(dim)?;
    let cols = cols.min(n);
    let rows = n.div_ceil(cols);
    let width = cols * side + (cols - 1);
    let height = rows * side + (rows - 1);
    let mut pixels = vec![255u8; width * height];
    for (i, img) in images.data().chunks_exact(dim).enumerate() {
        let (gr, gc) = (i / cols, i % cols);
        let (top, left) = (gr * (side + 1), gc * (side + 1));
        for r in 0..side {
            for c in 0..side {
                let p = img[r * side + c].to_f64().clamp(0.0, 1.0);
                pixels[(top + r) * width + (left + c)] = (p * 255.0).round() as u8;
            }
        }
    }
    // Blank the unused cells of a ragged last row.
    for i in n..rows * cols {
        let (gr, gc) = (i / cols, i % cols);
        let (top, left) = (gr * (side + 1), gc * (side + 1));
        for r in 0..side {
            for c in 0..side {
                pixels[(top + r) * width + (left + c)] = 0;
            }
        }
    }
    let mut out = fs::File::create(path)?;
    write!(out, "P5\n{width} {height}\n255\n")?;
    out.write_all(&pixels)?;
    Ok(())
}

/// Shortest text that parses back to exactly the same f64 (17 significant
/// digits suffice for round-tripping).
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Header line plus comma-joined rows; every row must match the header
/// width.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for (i, row) in rows.iter().enumerate() {
        if row.len() != header.len() {
            return Err(Error::Contract(format!(
                "csv row {i} has {} cells, header has {}",
                row.len(),
                header.len()
            )));
        }
        out.push_str(&row.join(","));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}
