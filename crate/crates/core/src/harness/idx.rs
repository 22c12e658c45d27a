//! MNIST IDX files: big-endian header, then raw unsigned bytes.

use std::fs;
use std::path::Path;

use crate::corruption::Bounds;
use crate::error::{Error, Result};
use crate::harness::data::{Dataset, Provenance};
use crate::harness::write_atomic;
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    match bytes.get(offset..offset + 4) {
        Some(b) => Ok(u32::from_be_bytes(b.try_into().expect("4 bytes"))),
        None => Err(Error::Format {
            offset: bytes.len() as u64,
            message: format!("file ends before the {what} field at byte {offset}"),
        }),
    }
}

fn expect_magic(bytes: &[u8], magic: u32) -> Result<()> {
    let found = read_u32(bytes, 0, "magic number")?;
    if found != magic {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic number {found:#010x}, expected {magic:#010x}"),
        });
    }
    Ok(())
}

fn expect_len(bytes: &[u8], expected: usize) -> Result<()> {
    if bytes.len() != expected {
        return Err(Error::Format {
            offset: bytes.len().min(expected) as u64,
            message: format!("expected {expected} bytes, file has {}", bytes.len()),
        });
    }
    Ok(())
}

/// Parses an image file into `(count, rows, cols, pixels)`.
pub fn parse_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    expect_magic(bytes, IMAGES_MAGIC)?;
    let n = read_u32(bytes, 4, "image count")? as usize;
    let rows = read_u32(bytes, 8, "row count")? as usize;
    let cols = read_u32(bytes, 12, "column count")? as usize;
    expect_len(bytes, 16 + n * rows * cols)?;
    Ok((n, rows, cols, &bytes[16..]))
}

pub fn parse_labels(bytes: &[u8]) -> Result<&[u8]> {
    expect_magic(bytes, LABELS_MAGIC)?;
    let n = read_u32(bytes, 4, "label count")? as usize;
    expect_len(bytes, 8 + n)?;
    Ok(&bytes[8..])
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads an image/label file pair; pixels are scaled to `[0, 1]`.
pub fn load_mnist_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let image_bytes = read(images)?;
    let label_bytes = read(labels)?;
    let (n, rows, cols, pixels) = parse_images(&image_bytes)?;
    let raw_labels = parse_labels(&label_bytes)?;
    if raw_labels.len() != n {
        return Err(Error::Format {
            offset: 4,
            message: format!("{} labels for {n} images", raw_labels.len()),
        });
    }
    if let Some(pos) = raw_labels.iter().position(|&y| y > 9) {
        return Err(Error::Format {
            offset: 8 + pos as u64,
            message: format!("label {} is not a digit", raw_labels[pos]),
        });
    }
    let data: Vec<f64> = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let mut d = Dataset::new(
        Tensor::new(vec![n, rows * cols], data)?,
        raw_labels.iter().map(|&y| usize::from(y)).collect(),
        10,
        Bounds::default(),
        Provenance::MnistIdx,
    )?;
    d.image = Some([1, rows, cols]);
    Ok(d)
}

/// Loads `train-*` or `t10k-*` files from a directory with the official names.
pub fn load_mnist_dir(dir: &Path, train: bool) -> Result<Dataset> {
    let prefix = if train { "train" } else { "t10k" };
    let d = load_mnist_idx(
        &dir.join(format!("{prefix}-images-idx3-ubyte")),
        &dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )?;
    Ok(d.with_split(if train { "train" } else { "test" }))
}

/// Encodes `[n, rows·cols]` pixels in `[0, 1]` and their labels as IDX bytes.
pub fn encode_idx(pixels: &Tensor, labels: &[usize], rows: usize, cols: usize) -> Result<(Vec<u8>, Vec<u8>)> {
    let n = labels.len();
    if pixels.rows() != n || pixels.row_len() != rows * cols {
        return Err(Error::Shape(format!(
            "{:?} pixels for {n} images of {rows}x{cols}",
            pixels.shape()
        )));
    }
    let mut img = Vec::with_capacity(16 + pixels.numel());
    for v in [IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(pixels.data().iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    let mut lab = Vec::with_capacity(8 + n);
    for v in [LABELS_MAGIC, n as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    for &y in labels {
        let b = u8::try_from(y).map_err(|_| Error::Argument(format!("label {y} does not fit a byte")))?;
        lab.push(b);
    }
    Ok((img, lab))
}

pub fn write_idx(images: &Path, labels: &Path, pixels: &Tensor, ys: &[usize], rows: usize, cols: usize) -> Result<()> {
    let (img, lab) = encode_idx(pixels, ys, rows, cols)?;
    write_atomic(images, &img)?;
    write_atomic(labels, &lab)
}
