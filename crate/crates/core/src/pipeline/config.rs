use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baseline::BaselineConfig;
use crate::data::{blobs, load_cifar_binary, load_idx_dataset, BlobSpec, Dataset, NormStats};
use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::gemini::GeminiConfig;
use crate::metrics::NmiSource;

/// Where the train and test splits come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    Cifar {
        train: Vec<PathBuf>,
        test: Vec<PathBuf>,
    },
    /// Synthetic Gaussian blobs; the test split is an independent draw.
    Blobs(BlobSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Keep the first N samples of each class (file order).
    #[serde(default)]
    pub train_per_class: Option<usize>,
    #[serde(default)]
    pub test_per_class: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub ks: Vec<usize>,
    pub nmi_source: NmiSource,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            ks: vec![1, 2, 4, 8],
            nmi_source: NmiSource::Knn,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub data: DataConfig,
    #[serde(default)]
    pub gemini: GeminiConfig,
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default)]
    pub baseline: BaselineConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

/// Normalised splits plus the training statistics applied to both.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
    pub stats: NormStats,
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))
    }

    /// Reads a config; relative data paths are taken relative to its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = PipelineConfig::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.data.source.rebase(base);
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.gemini.validate()?;
        self.distill.validate()?;
        self.baseline.validate()?;
        if self.metrics.ks.is_empty() || self.metrics.ks.contains(&0) {
            return Err(Error::Config("metrics.ks must list positive K values".into()));
        }
        if self.baseline.output_dim != self.gemini.output_dim {
            return Err(Error::Config("baseline and gemini output_dim must match for a fair comparison".into()));
        }
        for p in self.data.source.paths() {
            if !p.is_file() {
                return Err(Error::Config(format!("data file not found: {}", p.display())));
            }
        }
        Ok(())
    }

    /// Loads, subsets and normalises both splits with the training statistics.
    pub fn load_splits(&self) -> Result<Splits> {
        let (train, test) = match &self.data.source {
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => (
                load_idx_dataset(train_images, train_labels)?,
                load_idx_dataset(test_images, test_labels)?,
            ),
            DataSource::Cifar { train, test } => {
                let train: Vec<&Path> = train.iter().map(PathBuf::as_path).collect();
                let test: Vec<&Path> = test.iter().map(PathBuf::as_path).collect();
                (load_cifar_binary(&train)?, load_cifar_binary(&test)?)
            }
            DataSource::Blobs(spec) => (blobs(spec, 0)?, blobs(spec, 1)?),
        };
        let train = match self.data.train_per_class {
            Some(n) => train.subset_per_class(n)?,
            None => train,
        };
        let test = match self.data.test_per_class {
            Some(n) => test.subset_per_class(n)?,
            None => test,
        };
        if test.dim() != train.dim() {
            return Err(Error::LengthMismatch {
                what: "test vs train feature dim",
                left: test.dim(),
                right: train.dim(),
            });
        }
        let stats = NormStats::fit(&train)?;
        Ok(Splits {
            train: stats.apply(&train),
            test: stats.apply(&test),
            stats,
        })
    }
}

impl DataSource {
    pub fn paths(&self) -> Vec<&Path> {
        match self {
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => vec![train_images, train_labels, test_images, test_labels]
                .into_iter()
                .map(PathBuf::as_path)
                .collect(),
            DataSource::Cifar { train, test } => train.iter().chain(test).map(PathBuf::as_path).collect(),
            DataSource::Blobs(_) => vec![],
        }
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match self {
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => [train_images, train_labels, test_images, test_labels].into_iter().for_each(fix),
            DataSource::Cifar { train, test } => train.iter_mut().chain(test.iter_mut()).for_each(fix),
            DataSource::Blobs(_) => {}
        }
    }
}
