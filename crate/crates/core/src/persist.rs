//! Model binaries: an 8-byte little-endian header length, a JSON header,
//! then every parameter value as a little-endian `f64` in parameter order.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub fn encode<H: Serialize>(header: &H, params: &[&Tensor]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header).map_err(|e| Error::Invalid(e.to_string()))?;
    let count: usize = params.iter().map(|p| p.len()).sum();
    let mut out = Vec::with_capacity(8 + json.len() + 8 * count);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in params {
        for v in p.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Splits a model binary into its header and raw parameter values.
pub fn decode<H: DeserializeOwned>(bytes: &[u8], path: &Path) -> Result<(H, Vec<f64>)> {
    let bad = |offset: usize, msg: String| Error::Format {
        path: path.to_path_buf(),
        offset,
        msg,
    };
    let len_bytes: [u8; 8] = bytes
        .get(..8)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| bad(0, "missing header length".into()))?;
    let hlen = u64::from_le_bytes(len_bytes) as usize;
    let json = bytes
        .get(8..8 + hlen)
        .ok_or_else(|| bad(8, format!("header of {hlen} bytes truncated")))?;
    let header = serde_json::from_slice(json).map_err(|e| bad(8, format!("bad header: {e}")))?;
    let body = &bytes[8 + hlen..];
    if !body.len().is_multiple_of(8) {
        return Err(bad(8 + hlen + body.len() - body.len() % 8, "parameter block is not a multiple of 8 bytes".into()));
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((header, values))
}

/// Copies decoded values into `params` in order, checking the total count.
pub fn fill(params: Vec<&mut Tensor>, values: &[f64], path: &Path) -> Result<()> {
    let need: usize = params.iter().map(|p| p.len()).sum();
    if need != values.len() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            msg: format!("header describes {need} parameters, file holds {}", values.len()),
        });
    }
    let mut at = 0;
    for p in params {
        let n = p.len();
        p.values_mut().copy_from_slice(&values[at..at + n]);
        at += n;
    }
    Ok(())
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Serialize, Deserialize, PartialEq)]
    struct H {
        dims: Vec<usize>,
    }

    #[test]
    fn round_trip() {
        let a = Tensor::vector(&[1.5, -2.0]);
        let b = Tensor::scalar(f64::MIN_POSITIVE);
        let bytes = encode(&H { dims: vec![2, 1] }, &[&a, &b]).unwrap();
        let (h, vals): (H, Vec<f64>) = decode(&bytes, Path::new("m")).unwrap();
        assert_eq!(h.dims, vec![2, 1]);
        let mut a2 = Tensor::zeros(vec![2]);
        let mut b2 = Tensor::zeros(vec![]);
        fill(vec![&mut a2, &mut b2], &vals, Path::new("m")).unwrap();
        assert_eq!((a2, b2), (a, b));
    }

    #[test]
    fn truncated_rejected() {
        let bytes = encode(&H { dims: vec![] }, &[&Tensor::vector(&[1.0])]).unwrap();
        assert!(decode::<H>(&bytes[..bytes.len() - 3], Path::new("m")).is_err());
        assert!(decode::<H>(&bytes[..4], Path::new("m")).is_err());
    }
}
