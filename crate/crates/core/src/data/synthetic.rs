//! Gaussian blob datasets for tests and smoke runs.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{encode_idx, Dataset};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    /// Standard deviation of each blob, in the `[0, 1]` feature range.
    pub spread: f64,
    pub seed: u64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        BlobSpec {
            classes: 2,
            per_class: 40,
            dim: 8,
            spread: 0.05,
            seed: 0,
        }
    }
}

fn centers(spec: &BlobSpec) -> Vec<Vec<f64>> {
    let mut rng = seed::rng(spec.seed, seed::stream::SYNTHETIC, 0);
    (0..spec.classes)
        .map(|_| (0..spec.dim).map(|_| rng.random_range(0.15..0.85)).collect())
        .collect()
}

/// Labels cycle through the classes; features are clamped to `[0, 1]`.
/// `split` selects an independent draw around the same centres.
pub fn blobs(spec: &BlobSpec, split: u64) -> Result<Dataset> {
    let centers = centers(spec);
    let noise = Normal::new(0.0, spec.spread).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = seed::rng(spec.seed, seed::stream::SYNTHETIC, 1 + split);
    let n = spec.classes * spec.per_class;
    let mut features = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % spec.classes;
        labels.push(c);
        features.extend(centers[c].iter().map(|m| (m + noise.sample(&mut rng)).clamp(0.0, 1.0)));
    }
    Dataset::new(features, spec.dim, labels, spec.classes)
}

/// Writes a blob split as an IDX image/label pair (`1 x dim` images),
/// returning `(images, labels)` paths.
pub fn write_blobs_idx(spec: &BlobSpec, split: u64, dir: &Path, prefix: &str) -> Result<(PathBuf, PathBuf)> {
    let ds = blobs(spec, split)?;
    let pixels: Vec<u8> = ds.features().iter().map(|&v| (v * 255.0).round() as u8).collect();
    let labels: Vec<u8> = ds.labels().iter().map(|&l| l as u8).collect();
    let img = dir.join(format!("{prefix}-images-idx3-ubyte"));
    let lab = dir.join(format!("{prefix}-labels-idx1-ubyte"));
    std::fs::write(&img, encode_idx(&[ds.len(), 1, spec.dim], &pixels)).map_err(|e| Error::io(&img, e))?;
    std::fs::write(&lab, encode_idx(&[ds.len()], &labels)).map_err(|e| Error::io(&lab, e))?;
    Ok((img, lab))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_idx_dataset;

    #[test]
    fn splits_share_centres() {
        let spec = BlobSpec::default();
        let a = blobs(&spec, 0).unwrap();
        let b = blobs(&spec, 1).unwrap();
        assert_eq!(a.len(), 80);
        assert_ne!(a.features(), b.features());
        let mean = |d: &Dataset, c: usize| d.row(d.class_members(c)[0])[0];
        assert!((mean(&a, 0) - mean(&b, 0)).abs() < 0.3);
    }

    #[test]
    fn idx_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = BlobSpec::default();
        let (img, lab) = write_blobs_idx(&spec, 0, dir.path(), "train").unwrap();
        let ds = load_idx_dataset(&img, &lab).unwrap();
        assert_eq!(ds.len(), 80);
        assert_eq!(ds.dim(), 8);
        let orig = blobs(&spec, 0).unwrap();
        for (a, b) in ds.features().iter().zip(orig.features()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
}
