//! IDX container files (the MNIST / Fashion-MNIST distribution format).
//!
//! Layout: a big-endian u32 magic `0x0000_08NN` where `08` marks unsigned
//! bytes and `NN` is the number of dimensions, then `NN` big-endian u32
//! sizes, then the raw payload.

use std::fs;
use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numerics::ImageShape;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

fn format_err(path: &Path, offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset,
        msg: msg.into(),
    }
}

fn read_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| format_err(path, offset, "truncated header"))
}

/// Parses an IDX byte buffer, requiring `expected_magic`.
pub fn parse_idx(bytes: &[u8], expected_magic: u32, path: &Path) -> Result<IdxArray> {
    let magic = read_u32(bytes, 0, path)?;
    if magic != expected_magic {
        return Err(format_err(
            path,
            0,
            format!("bad magic number {magic:#010x}, expected {expected_magic:#010x}"),
        ));
    }
    let ndims = (magic & 0xff) as usize;
    let dims = (0..ndims)
        .map(|i| read_u32(bytes, 4 + 4 * i, path).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let header = 4 + 4 * ndims;
    let payload: usize = dims.iter().product();
    let have = bytes.len() - header;
    if have < payload {
        return Err(format_err(
            path,
            bytes.len(),
            format!("truncated payload: {payload} bytes declared, {have} present"),
        ));
    }
    if have > payload {
        return Err(format_err(path, header + payload, format!("{} trailing bytes", have - payload)));
    }
    Ok(IdxArray {
        dims,
        data: bytes[header..].to_vec(),
    })
}

pub fn read_idx(path: &Path, expected_magic: u32) -> Result<IdxArray> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx(&bytes, expected_magic, path)
}

/// Encodes an unsigned-byte IDX array.
pub fn encode_idx(dims: &[usize], data: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * dims.len() + data.len());
    out.extend_from_slice(&(0x0800u32 | dims.len() as u32).to_be_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(data);
    out
}

/// Loads an image/label IDX pair. Pixels are scaled to `[0, 1]`.
pub fn load_idx_dataset(image_path: &Path, label_path: &Path) -> Result<Dataset> {
    let images = read_idx(image_path, IMAGES_MAGIC)?;
    let labels = read_idx(label_path, LABELS_MAGIC)?;
    let n = images.dims[0];
    if labels.dims[0] != n {
        return Err(format_err(
            label_path,
            4,
            format!("{} labels for {} images in {}", labels.dims[0], n, image_path.display()),
        ));
    }
    if n == 0 {
        return Err(format_err(image_path, 4, "no images"));
    }
    let (h, w) = (images.dims[1], images.dims[2]);
    let features = images.data.iter().map(|&b| f64::from(b) / 255.0).collect();
    let labels: Vec<usize> = labels.data.iter().map(|&b| usize::from(b)).collect();
    Dataset::from_labels(features, h * w, labels)?.with_image_shape(ImageShape {
        channels: 1,
        height: h,
        width: w,
    })
}
