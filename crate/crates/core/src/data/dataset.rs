use crate::error::{Error, Result};
use crate::numerics::ImageShape;

/// One sample's view into a [`Dataset`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledSample<'a> {
    pub features: &'a [f64],
    pub label: usize,
}

/// Labelled feature vectors stored as one row-major `[n, dim]` block.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
    class_count: usize,
    class_index: Vec<Vec<usize>>,
    image_shape: Option<ImageShape>,
}

impl Dataset {
    /// Builds a dataset, checking that every label is below `class_count`
    /// and every class has at least one sample.
    pub fn new(features: Vec<f64>, dim: usize, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if dim == 0 || features.len() != dim * labels.len() {
            return Err(Error::LengthMismatch {
                what: "feature values vs dim * labels",
                left: features.len(),
                right: dim * labels.len(),
            });
        }
        if labels.is_empty() {
            return Err(Error::Invalid("dataset is empty".into()));
        }
        if let Some(i) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("non-finite feature in sample {}", i / dim)));
        }
        let mut class_index = vec![Vec::new(); class_count];
        for (i, &y) in labels.iter().enumerate() {
            if y >= class_count {
                return Err(Error::InvalidClass {
                    class: y,
                    count: class_count,
                });
            }
            class_index[y].push(i);
        }
        if let Some(c) = class_index.iter().position(Vec::is_empty) {
            return Err(Error::ClassTooSmall {
                class: c,
                have: 0,
                need: 1,
            });
        }
        Ok(Dataset {
            features,
            dim,
            labels,
            class_count,
            class_index,
            image_shape: None,
        })
    }

    /// Like [`Dataset::new`] with `class_count = max(label) + 1`.
    pub fn from_labels(features: Vec<f64>, dim: usize, labels: Vec<usize>) -> Result<Self> {
        let c = labels.iter().max().map_or(0, |m| m + 1);
        Dataset::new(features, dim, labels, c)
    }

    pub fn with_image_shape(mut self, shape: ImageShape) -> Result<Self> {
        if shape.dim() != self.dim {
            return Err(Error::ShapeMismatch {
                op: "image shape",
                lhs: vec![shape.channels, shape.height, shape.width],
                rhs: vec![self.dim],
            });
        }
        self.image_shape = Some(shape);
        Ok(self)
    }

    pub fn image_shape(&self) -> Option<ImageShape> {
        self.image_shape
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn sample(&self, i: usize) -> LabeledSample<'_> {
        LabeledSample {
            features: self.row(i),
            label: self.labels[i],
        }
    }

    pub fn class_members(&self, class: usize) -> &[usize] {
        &self.class_index[class]
    }

    pub fn class_index(&self) -> &[Vec<usize>] {
        &self.class_index
    }

    /// Concatenates the rows at `indices` into one `[len, dim]` buffer.
    pub fn gather(&self, indices: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            out.extend_from_slice(self.row(i));
        }
        out
    }

    pub(crate) fn map_features(&self, f: impl Fn(f64) -> f64) -> Dataset {
        Dataset {
            features: self.features.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    /// Keeps the first `n` samples of every class, preserving file order.
    pub fn subset_per_class(&self, n: usize) -> Result<Dataset> {
        let mut keep: Vec<usize> = self.class_index.iter().flat_map(|m| m.iter().take(n).copied()).collect();
        keep.sort_unstable();
        self.select(&keep)
    }

    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        let ds = Dataset::new(self.gather(indices), self.dim, labels, self.class_count)?;
        Ok(Dataset {
            image_shape: self.image_shape,
            ..ds
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Dataset {
        Dataset::from_labels(vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0], 2, vec![1, 0, 1]).unwrap()
    }

    #[test]
    fn class_index_partitions_positions() {
        let ds = toy();
        assert_eq!(ds.class_count(), 2);
        assert_eq!(ds.class_members(0), &[1]);
        assert_eq!(ds.class_members(1), &[0, 2]);
        let total: usize = ds.class_index().iter().map(Vec::len).sum();
        assert_eq!(total, ds.len());
    }

    #[test]
    fn empty_class_rejected() {
        let err = Dataset::new(vec![0.0, 1.0], 1, vec![0, 2], 3).unwrap_err();
        assert!(matches!(err, Error::ClassTooSmall { class: 1, .. }));
    }

    #[test]
    fn label_out_of_range_rejected() {
        assert!(Dataset::new(vec![0.0], 1, vec![4], 2).is_err());
    }

    #[test]
    fn subset_keeps_first_per_class() {
        let ds = toy().subset_per_class(1).unwrap();
        assert_eq!(ds.labels(), &[1, 0]);
        assert_eq!(ds.row(0), &[0.0, 1.0]);
    }
}
