use std::fs;
use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numerics::ImageShape;

pub const CIFAR_PIXELS: usize = 3 * 32 * 32;
const ROW: usize = 1 + CIFAR_PIXELS;

/// Reads CIFAR-10 binary batches: rows of one label byte followed by 3072
/// channel-major pixel bytes. Several batch files are concatenated.
pub fn load_cifar_binary(paths: &[&Path]) -> Result<Dataset> {
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for &path in paths {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.is_empty() || bytes.len() % ROW != 0 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: bytes.len() - bytes.len() % ROW,
                msg: format!("size {} is not a multiple of the {ROW}-byte row", bytes.len()),
            });
        }
        for (r, row) in bytes.chunks_exact(ROW).enumerate() {
            if row[0] > 9 {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    offset: r * ROW,
                    msg: format!("label byte {} out of range", row[0]),
                });
            }
            labels.push(usize::from(row[0]));
            features.extend(row[1..].iter().map(|&b| f64::from(b) / 255.0));
        }
    }
    Dataset::from_labels(features, CIFAR_PIXELS, labels)?.with_image_shape(ImageShape {
        channels: 3,
        height: 32,
        width: 32,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_rows() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = Vec::new();
        for label in [0u8, 1] {
            bytes.push(label);
            bytes.extend(std::iter::repeat_n(255u8, CIFAR_PIXELS));
        }
        let p = dir.path().join("data_batch_1.bin");
        fs::write(&p, &bytes).unwrap();
        let ds = load_cifar_binary(&[&p]).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.dim(), 3072);
        assert_eq!(ds.image_shape().unwrap().channels, 3);
        assert!(ds.features().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn ragged_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.bin");
        fs::write(&p, vec![0u8; ROW + 5]).unwrap();
        assert!(matches!(load_cifar_binary(&[&p]), Err(Error::Format { .. })));
    }
}
