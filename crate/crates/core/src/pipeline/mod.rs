//! End-to-end commands: train the master, distill the student, evaluate,
//! and the triplet baseline. Each command writes its artifacts and a
//! manifest into the configured output directory.

mod config;
mod manifest;

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};

use crate::baseline::train_triplet_baseline;
use crate::distill::{distill_student, StudentModel};
use crate::embedding::{EmbeddingSet, EmbeddingSource};
use crate::error::{Error, Result};
use crate::gemini::{check_stream_condition, train_gemini};
use crate::metrics::{evaluate, MetricsReport};

pub use config::{DataConfig, DataSource, MetricsConfig, PipelineConfig, Splits};
pub use manifest::{sha256_file, Artifact, RunManifest, StageRecord};

pub const MASTER_MODEL: &str = "gemini.bin";
pub const MASTER_EMBEDDINGS: &str = "z_hat_train.csv";
pub const STUDENT_MODEL: &str = "student.bin";
pub const NORM_STATS: &str = "norm_stats.json";

const STREAM_PAIRS_PER_CLASS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Data,
    Gemini,
    Distill,
    Evaluate,
    Baseline,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Config => "config",
            Stage::Data => "data",
            Stage::Gemini => "train-gemini",
            Stage::Distill => "distill",
            Stage::Evaluate => "evaluate",
            Stage::Baseline => "baseline-triplet",
        };
        f.write_str(s)
    }
}

/// An error tagged with the stage that raised it.
#[derive(Debug)]
pub struct StageFailure {
    pub stage: Stage,
    pub error: Error,
}

impl fmt::Display for StageFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}", self.stage, self.error)
    }
}

impl std::error::Error for StageFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

pub type StageResult<T> = std::result::Result<T, StageFailure>;

trait AtStage<T> {
    fn at(self, stage: Stage) -> StageResult<T>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: Stage) -> StageResult<T> {
        self.map_err(|error| StageFailure { stage, error })
    }
}

/// Shared state of one command run.
struct Run<'c> {
    cfg: &'c PipelineConfig,
    dir: PathBuf,
    manifest: RunManifest,
}

impl<'c> Run<'c> {
    fn start(command: &str, cfg: &'c PipelineConfig) -> StageResult<Self> {
        cfg.validate().at(Stage::Config)?;
        let dir = cfg.out_dir.clone();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e)).at(Stage::Config)?;
        let snapshot = dir.join("config.json");
        std::fs::write(&snapshot, cfg.to_json()).map_err(|e| Error::io(&snapshot, e)).at(Stage::Config)?;
        info!("{command}: writing to {}", dir.display());
        Ok(Run {
            cfg,
            dir,
            manifest: RunManifest::new(command, cfg),
        })
    }

    fn splits(&mut self) -> StageResult<Splits> {
        let t = Instant::now();
        let splits = self.cfg.load_splits().at(Stage::Data)?;
        info!(
            "data: {} train / {} test samples, dim {}, {} classes",
            splits.train.len(),
            splits.test.len(),
            splits.train.dim(),
            splits.train.class_count()
        );
        splits.stats.save(&self.dir.join(NORM_STATS)).at(Stage::Data)?;
        self.artifact("norm_stats", NORM_STATS, Stage::Data)?;
        self.manifest.norm_stats = Some(splits.stats);
        self.stage(Stage::Data, t, Vec::new());
        Ok(splits)
    }

    fn artifact(&mut self, name: &str, file: &str, stage: Stage) -> StageResult<()> {
        self.manifest.record_artifact(&self.dir, name, file).at(stage)
    }

    fn stage(&mut self, stage: Stage, started: Instant, loss_curve: Vec<f64>) {
        self.manifest.stages.push(StageRecord {
            stage: stage.to_string(),
            seconds: started.elapsed().as_secs_f64(),
            loss_curve,
        });
    }

    fn save_embeddings(&mut self, name: &str, e: &EmbeddingSet, stage: Stage) -> StageResult<()> {
        let file = format!("{name}.csv");
        e.save_csv(&self.dir.join(&file)).at(stage)?;
        self.artifact(name, &file, stage)
    }

    fn gemini(&mut self, splits: &Splits) -> StageResult<EmbeddingSet> {
        let t = Instant::now();
        let run = train_gemini(&splits.train, &self.cfg.gemini, self.cfg.seed).at(Stage::Gemini)?;
        run.model.save(&self.dir.join(MASTER_MODEL), self.cfg.seed).at(Stage::Gemini)?;
        self.artifact("gemini_model", MASTER_MODEL, Stage::Gemini)?;
        let z_hat = run.model.embed_dataset(&splits.train).at(Stage::Gemini)?;
        self.save_embeddings("z_hat_train", &z_hat, Stage::Gemini)?;
        let cond = check_stream_condition(
            &run.model,
            &splits.train,
            self.cfg.gemini.stream_epsilon,
            STREAM_PAIRS_PER_CLASS,
            self.cfg.seed,
        )
        .at(Stage::Gemini)?;
        info!("gemini: {:.3} of same-class stream pairs within {}", cond.fraction, cond.epsilon);
        self.manifest.stream_condition = Some(cond);
        self.stage(Stage::Gemini, t, run.epoch_losses);
        Ok(z_hat)
    }

    fn distill(&mut self, splits: &Splits, z_hat: &EmbeddingSet) -> StageResult<(EmbeddingSet, EmbeddingSet)> {
        let t = Instant::now();
        if z_hat.labels() != splits.train.labels() {
            return Err(Error::Invalid(format!(
                "targets ({} rows) are not aligned with the training set ({} samples)",
                z_hat.len(),
                splits.train.len()
            )))
            .at(Stage::Distill);
        }
        let run = distill_student(&splits.train, z_hat, &self.cfg.distill, self.cfg.seed).at(Stage::Distill)?;
        run.model.save(&self.dir.join(STUDENT_MODEL), self.cfg.seed).at(Stage::Distill)?;
        self.artifact("student_model", STUDENT_MODEL, Stage::Distill)?;
        let z_test = run.model.embed_dataset(&splits.test).at(Stage::Distill)?;
        self.save_embeddings("z_train", &run.embeddings, Stage::Distill)?;
        self.save_embeddings("z_test", &z_test, Stage::Distill)?;
        self.stage(Stage::Distill, t, run.epoch_losses);
        Ok((run.embeddings, z_test))
    }

    fn evaluate(&mut self, name: &str, e: &EmbeddingSet) -> StageResult<()> {
        let t = Instant::now();
        let report = evaluate_set(e, &self.cfg.metrics, self.cfg.seed).at(Stage::Evaluate)?;
        let file = format!("metrics_{name}.json");
        write_report(&self.dir.join(&file), &report).at(Stage::Evaluate)?;
        self.artifact(&format!("metrics_{name}"), &file, Stage::Evaluate)?;
        let scatter = format!("scatter_{name}.csv");
        write_scatter(&self.dir.join(&scatter), e).at(Stage::Evaluate)?;
        info!("{name}: {}", summary(&report));
        self.manifest.metrics.insert(name.to_string(), report);
        self.stage(Stage::Evaluate, t, Vec::new());
        Ok(())
    }

    fn finish(self) -> StageResult<RunManifest> {
        self.manifest.save(&self.dir).at(Stage::Evaluate)?;
        Ok(self.manifest)
    }
}

fn summary(r: &MetricsReport) -> String {
    let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    format!(
        "R@1 {} F1 {:.4} NMI {:.4} RP {} MAP@R {}",
        opt(r.recall_at_1()),
        r.f1,
        r.nmi,
        opt(r.r_precision),
        opt(r.map_at_r)
    )
}

/// Evaluates with the configured Ks, dropping any K that is not below n.
pub fn evaluate_set(e: &EmbeddingSet, cfg: &MetricsConfig, seed: u64) -> Result<MetricsReport> {
    let ks: Vec<usize> = cfg.ks.iter().copied().filter(|&k| k < e.len()).collect();
    if ks.len() < cfg.ks.len() {
        warn!("dropping Recall@K values with K >= n = {}", e.len());
    }
    let report = evaluate(e, &ks, cfg.nmi_source, seed)?;
    if report.r_precision.is_none() {
        warn!("a class has a single member; R-Precision and MAP@R omitted");
    }
    Ok(report)
}

pub fn write_report(path: &Path, r: &MetricsReport) -> Result<()> {
    let json = serde_json::to_string_pretty(r).expect("report serialises");
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

/// `x,y,label` rows of the first two embedding coordinates (`y = 0` in 1-D).
pub fn write_scatter(path: &Path, e: &EmbeddingSet) -> Result<()> {
    let mut s = String::from("x,y,label\n");
    for i in 0..e.len() {
        let r = e.row(i);
        s.push_str(&format!("{},{},{}\n", r[0], r.get(1).copied().unwrap_or(0.0), e.labels()[i]));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Trains the master and exports its training-set embeddings.
pub fn cmd_train_gemini(cfg: &PipelineConfig) -> StageResult<RunManifest> {
    let mut run = Run::start("train-gemini", cfg)?;
    let splits = run.splits()?;
    run.gemini(&splits)?;
    run.finish()
}

/// Distills a student from `targets` (default: the master embeddings in the run directory).
pub fn cmd_distill(cfg: &PipelineConfig, targets: Option<&Path>) -> StageResult<RunManifest> {
    let mut run = Run::start("distill", cfg)?;
    let splits = run.splits()?;
    let path = targets.map_or_else(|| cfg.out_dir.join(MASTER_EMBEDDINGS), Path::to_path_buf);
    let mut z_hat = EmbeddingSet::load_csv(&path).at(Stage::Distill)?;
    z_hat.source = EmbeddingSource::Master;
    let (z_train, z_test) = run.distill(&splits, &z_hat)?;
    run.evaluate("train", &z_train)?;
    run.evaluate("test", &z_test)?;
    run.finish()
}

/// Evaluates an embedding CSV, writing the report JSON and a scatter file beside it.
pub fn cmd_evaluate(csv: &Path, out: Option<&Path>, metrics: &MetricsConfig, seed: u64) -> StageResult<MetricsReport> {
    let e = EmbeddingSet::load_csv(csv).at(Stage::Evaluate)?;
    let report = evaluate_set(&e, metrics, seed).at(Stage::Evaluate)?;
    let json = out.map_or_else(|| csv.with_extension("metrics.json"), Path::to_path_buf);
    write_report(&json, &report).at(Stage::Evaluate)?;
    write_scatter(&csv.with_extension("scatter.csv"), &e).at(Stage::Evaluate)?;
    info!("{}: {}", csv.display(), summary(&report));
    Ok(report)
}

/// Master training, distillation and evaluation on both splits. With
/// `skip_distill` the master embeddings are evaluated directly.
pub fn cmd_run_all(cfg: &PipelineConfig, skip_distill: bool) -> StageResult<RunManifest> {
    let mut run = Run::start("run-all", cfg)?;
    let splits = run.splits()?;
    let z_hat = run.gemini(&splits)?;
    run.evaluate("master_train", &z_hat)?;
    if !skip_distill {
        let (z_train, z_test) = run.distill(&splits, &z_hat)?;
        run.evaluate("train", &z_train)?;
        run.evaluate("test", &z_test)?;
    }
    run.finish()
}

/// The student architecture trained directly with a triplet loss.
pub fn cmd_baseline_triplet(cfg: &PipelineConfig) -> StageResult<RunManifest> {
    let mut run = Run::start("baseline-triplet", cfg)?;
    let splits = run.splits()?;
    let t = Instant::now();
    let base = train_triplet_baseline(&splits.train, &cfg.baseline, cfg.seed).at(Stage::Baseline)?;
    base.model.save(&run.dir.join("baseline.bin"), cfg.seed).at(Stage::Baseline)?;
    run.artifact("baseline_model", "baseline.bin", Stage::Baseline)?;
    let mut z_test = base.model.embed_dataset(&splits.test).at(Stage::Baseline)?;
    z_test.source = EmbeddingSource::Baseline;
    run.save_embeddings("baseline_z_train", &base.embeddings, Stage::Baseline)?;
    run.save_embeddings("baseline_z_test", &z_test, Stage::Baseline)?;
    run.stage(Stage::Baseline, t, base.epoch_losses);
    run.evaluate("baseline_train", &base.embeddings)?;
    run.evaluate("baseline_test", &z_test)?;
    run.finish()
}

/// Loads a saved student and embeds a split of the configured data.
pub fn embed_with_student(model: &Path, cfg: &PipelineConfig, test: bool) -> StageResult<EmbeddingSet> {
    let (student, _) = StudentModel::load(model).at(Stage::Evaluate)?;
    let splits = cfg.load_splits().at(Stage::Data)?;
    student
        .embed_dataset(if test { &splits.test } else { &splits.train })
        .at(Stage::Evaluate)
}
