use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::gemini::StreamCondition;
use crate::metrics::MetricsReport;
use crate::pipeline::PipelineConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub name: String,
    /// Path relative to the run directory.
    pub file: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub seconds: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub loss_curve: Vec<f64>,
}

/// What a command produced, with enough detail to check it later.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub config: PipelineConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm_stats: Option<NormStats>,
    pub stages: Vec<StageRecord>,
    pub artifacts: Vec<Artifact>,
    pub metrics: BTreeMap<String, MetricsReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stream_condition: Option<StreamCondition>,
}

pub fn sha256_file(path: &Path) -> Result<(String, u64)> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    let mut total = 0u64;
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
        total += n as u64;
    }
    Ok((hex::encode(hasher.finalize()), total))
}

impl RunManifest {
    pub fn new(command: &str, config: &PipelineConfig) -> Self {
        RunManifest {
            command: command.to_string(),
            seed: config.seed,
            config: config.clone(),
            norm_stats: None,
            stages: Vec::new(),
            artifacts: Vec::new(),
            metrics: BTreeMap::new(),
            stream_condition: None,
        }
    }

    pub fn record_artifact(&mut self, dir: &Path, name: &str, file: &str) -> Result<()> {
        let (sha256, bytes) = sha256_file(&dir.join(file))?;
        self.artifacts.retain(|a| a.name != name);
        self.artifacts.push(Artifact {
            name: name.to_string(),
            file: file.to_string(),
            sha256,
            bytes,
        });
        Ok(())
    }

    pub fn artifact(&self, name: &str) -> Option<&Artifact> {
        self.artifacts.iter().find(|a| a.name == name)
    }

    /// Re-hashes every artifact under `dir`; errors name the first mismatch.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for a in &self.artifacts {
            let (hash, _) = sha256_file(&dir.join(&a.file))?;
            if hash != a.sha256 {
                return Err(Error::Invalid(format!("artifact {} ({}) does not match its recorded hash", a.name, a.file)));
            }
        }
        Ok(())
    }

    pub fn file_name(command: &str) -> String {
        format!("manifest-{command}.json")
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(RunManifest::file_name(&self.command));
        let json = serde_json::to_string_pretty(self).expect("manifest serialises");
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            msg: e.to_string(),
        })
    }
}
