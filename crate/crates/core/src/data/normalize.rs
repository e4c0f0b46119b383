use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Pooled scalar statistics over every feature entry of a training set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mu: f64,
    pub sigma: f64,
}

impl NormStats {
    /// Population mean and standard deviation of all entries.
    pub fn fit(ds: &Dataset) -> Result<Self> {
        let v = ds.features();
        let n = v.len() as f64;
        let mu = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n;
        if !(var > 0.0) {
            return Err(Error::ZeroVariance);
        }
        Ok(NormStats { mu, sigma: var.sqrt() })
    }

    pub fn apply(&self, ds: &Dataset) -> Dataset {
        let (mu, sigma) = (self.mu, self.sigma);
        ds.map_features(|v| (v - mu) / sigma)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Invalid(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&s).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            msg: e.to_string(),
        })
    }
}

/// Maps every entry to `(v - mu) / sigma` with statistics pooled over the
/// whole dataset, returning the statistics for reuse on held-out data.
pub fn normalize_global(ds: &Dataset) -> Result<(Dataset, NormStats)> {
    let stats = NormStats::fit(ds)?;
    Ok((stats.apply(ds), stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_two_value_set() {
        let ds = Dataset::from_labels(vec![0.0, 0.0, 2.0, 2.0], 2, vec![0, 1]).unwrap();
        let (n, stats) = normalize_global(&ds).unwrap();
        assert_eq!(n.features(), &[-1.0, -1.0, 1.0, 1.0]);
        assert_eq!(stats, NormStats { mu: 1.0, sigma: 1.0 });
    }

    #[test]
    fn stored_stats_standardise_a_copy() {
        let vals: Vec<f64> = (0..60).map(|i| ((i * 37) % 11) as f64 * 0.3 + 1.0).collect();
        let labels = (0..20).map(|i| i % 2).collect();
        let ds = Dataset::from_labels(vals, 3, labels).unwrap();
        let (_, stats) = normalize_global(&ds).unwrap();
        let copy = stats.apply(&ds.clone());
        let v = copy.features();
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-9);
    }

    #[test]
    fn constant_dataset_rejected() {
        let ds = Dataset::from_labels(vec![0.5; 4], 2, vec![0, 1]).unwrap();
        assert!(matches!(normalize_global(&ds), Err(Error::ZeroVariance)));
    }

    #[test]
    fn json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("norm.json");
        let s = NormStats { mu: 0.13, sigma: 0.31 };
        s.save(&p).unwrap();
        assert_eq!(NormStats::load(&p).unwrap(), s);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.contains("\"mu\"") && text.contains("\"sigma\""));
    }
}
