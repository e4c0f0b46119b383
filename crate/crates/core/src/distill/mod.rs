//! Offline distillation of master embeddings into a label-free student.
//!
//! The student regresses each training sample onto its master embedding
//! `z_hat` by minimising the mean per-sample distance `s(student(x), z_hat)`.

mod student;

use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::embedding::EmbeddingSet;
use crate::error::{Error, Result};
use crate::numerics::{sgd_step, ClipMode, SgdConfig, Tape};
use crate::seed;

pub use student::{StudentModel, StudentSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    #[default]
    L2,
    SquaredL2,
}

/// `||z - z_hat||`, or its square.
pub fn similarity_with(kind: Similarity, z: &[f64], z_hat: &[f64]) -> Result<f64> {
    if z.len() != z_hat.len() {
        return Err(Error::LengthMismatch {
            what: "embedding dims",
            left: z.len(),
            right: z_hat.len(),
        });
    }
    let sq: f64 = z.iter().zip(z_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(match kind {
        Similarity::L2 => sq.sqrt(),
        Similarity::SquaredL2 => sq,
    })
}

pub fn similarity(z: &[f64], z_hat: &[f64]) -> Result<f64> {
    similarity_with(Similarity::L2, z, z_hat)
}

/// Stop once the epoch loss has improved by less than `min_improvement`
/// (relative) across the last `window` epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyStop {
    pub window: usize,
    pub min_improvement: f64,
}

impl Default for EarlyStop {
    fn default() -> Self {
        EarlyStop {
            window: 3,
            min_improvement: 0.01,
        }
    }
}

impl EarlyStop {
    pub fn should_stop(&self, losses: &[f64]) -> bool {
        let n = losses.len();
        if self.window == 0 || n <= self.window {
            return false;
        }
        let before = losses[n - 1 - self.window];
        before - losses[n - 1] < self.min_improvement * before.abs()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub student: StudentSpec,
    pub similarity: Similarity,
    pub weight_decay: f64,
    pub clip: f64,
    pub clip_mode: ClipMode,
    pub early_stop: Option<EarlyStop>,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            learning_rate: 0.1,
            batch_size: 32,
            epochs: 20,
            student: StudentSpec::Auto,
            similarity: Similarity::L2,
            weight_decay: 1e-4,
            clip: 0.1,
            clip_mode: ClipMode::Value,
            early_stop: Some(EarlyStop::default()),
        }
    }
}

impl DistillConfig {
    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            clip_norm: self.clip,
            clip_mode: self.clip_mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sgd().validate()?;
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("distill batch size and epochs must be positive".into()));
        }
        Ok(())
    }

    pub fn build_student(&self, ds: &Dataset, output_dim: usize, seed: u64) -> Result<StudentModel> {
        let mut rng = seed::rng(seed, seed::stream::STUDENT_INIT, 0);
        StudentModel::new(&mut rng, &self.student, ds.dim(), ds.image_shape(), output_dim)
    }
}

#[derive(Debug, Clone)]
pub struct DistillRun {
    pub model: StudentModel,
    /// Student embeddings of the training set.
    pub embeddings: EmbeddingSet,
    /// Mean per-sample similarity over each epoch's batches.
    pub epoch_losses: Vec<f64>,
    pub stopped_early: bool,
}

/// Mean similarity of one batch, with gradients added into the student's grad buffers.
pub fn accumulate_distill_grads(
    model: &mut StudentModel,
    x: &[f64],
    targets: &[f64],
    kind: Similarity,
) -> Result<f64> {
    let (d, m) = (model.input_dim(), model.output_dim());
    let n = targets.len() / m;
    let (grads, vars, loss) = {
        let tape = Tape::new();
        let vars = model.bind(&tape);
        let xv = tape.constant_slice(vec![n, d], x)?;
        let t = tape.constant_slice(vec![n, m], targets)?;
        let z = model.forward(&tape, &vars, xv)?;
        let dist = match kind {
            Similarity::L2 => tape.row_distance(z, t)?,
            Similarity::SquaredL2 => tape.row_sq_distance(z, t)?,
        };
        let loss = tape.mean(dist);
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite("distillation loss"));
        }
        (tape.backward(loss)?, vars, value)
    };
    let vars: Vec<_> = vars.into_iter().map(Some).collect();
    grads.accumulate_into(&vars, model.parameters_mut())?;
    Ok(loss)
}

/// Trains a fresh student on `(ds, targets)`; targets must align row for row.
pub fn distill_student(ds: &Dataset, targets: &EmbeddingSet, cfg: &DistillConfig, seed: u64) -> Result<DistillRun> {
    cfg.validate()?;
    if targets.len() != ds.len() {
        return Err(Error::LengthMismatch {
            what: "distillation targets vs samples",
            left: targets.len(),
            right: ds.len(),
        });
    }
    let mut model = cfg.build_student(ds, targets.dim(), seed)?;
    let m = targets.dim();
    let sgd = cfg.sgd();
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut stopped_early = false;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut seed::rng(seed, seed::stream::DISTILL_SHUFFLE, epoch as u64));
        let (mut sum, mut count) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let x = ds.gather(batch);
            let t: Vec<f64> = batch.iter().flat_map(|&i| targets.row(i).iter().copied()).collect();
            let loss = accumulate_distill_grads(&mut model, &x, &t, cfg.similarity)?;
            sgd_step(&mut model.parameters_mut(), &sgd)?;
            sum += loss * batch.len() as f64;
            count += batch.len();
        }
        let mean = sum / count as f64;
        info!("distill epoch {}/{}: similarity {mean:.5}", epoch + 1, cfg.epochs);
        epoch_losses.push(mean);
        if cfg.early_stop.is_some_and(|e| e.should_stop(&epoch_losses)) {
            info!("distill: early stop after epoch {}", epoch + 1);
            stopped_early = true;
            break;
        }
    }
    let embeddings = model.embed_dataset(ds)?;
    debug_assert_eq!(embeddings.dim(), m);
    Ok(DistillRun {
        model,
        embeddings,
        epoch_losses,
        stopped_early,
    })
}

/// Mean similarity between two aligned embedding sets.
pub fn mean_similarity(a: &EmbeddingSet, b: &EmbeddingSet, kind: Similarity) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            what: "embedding rows",
            left: a.len(),
            right: b.len(),
        });
    }
    let mut total = 0.0;
    for i in 0..a.len() {
        total += similarity_with(kind, a.row(i), b.row(i))?;
    }
    Ok(total / a.len() as f64)
}
