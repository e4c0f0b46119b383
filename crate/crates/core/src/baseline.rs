//! Standard triplet-loss training of the student architecture, used as the
//! reference point for the guided pipeline.
//!
//! Per triplet the loss is `max(0, d(a, p) - d(a, n) + margin)` on the
//! student's embeddings. Batches come from the same [`TripletSampler`]
//! schedule as the master network.

use log::info;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, TripletBatch, TripletSampler};
use crate::distill::{StudentModel, StudentSpec};
use crate::embedding::{EmbeddingSet, EmbeddingSource};
use crate::error::{Error, Result};
use crate::numerics::{sgd_step, ClipMode, SgdConfig, Tape, Tensor};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub margin: f64,
    pub output_dim: usize,
    pub student: StudentSpec,
    pub batches_per_pair: Option<usize>,
    pub weight_decay: f64,
    pub clip: f64,
    pub clip_mode: ClipMode,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            learning_rate: 0.1,
            batch_size: 32,
            epochs: 20,
            margin: 1.0,
            output_dim: 2,
            student: StudentSpec::Auto,
            batches_per_pair: None,
            weight_decay: 1e-4,
            clip: 0.1,
            clip_mode: ClipMode::Value,
        }
    }
}

impl BaselineConfig {
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
        if self.batch_size == 0 || self.output_dim == 0 || self.batches_per_pair == Some(0) {
            return Err(Error::Config("baseline batch size, output dim and batches per pair must be positive".into()));
        }
        if !(self.margin.is_finite() && self.margin >= 0.0) {
            return Err(Error::Config("baseline margin must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Same schedule as the master for equal seed, batch size and batches per pair.
    pub fn sampler(&self, ds: &Dataset, seed: u64) -> TripletSampler {
        TripletSampler {
            seed,
            batch_size: self.batch_size,
            batches_per_pair: self
                .batches_per_pair
                .unwrap_or_else(|| TripletSampler::covering_batches_per_pair(ds, self.batch_size)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BaselineRun {
    pub model: StudentModel,
    pub embeddings: EmbeddingSet,
    pub epoch_losses: Vec<f64>,
}

/// Mean triplet hinge of one batch, with gradients added into the model.
pub fn accumulate_triplet_grads(model: &mut StudentModel, ds: &Dataset, batch: &TripletBatch, margin: f64) -> Result<f64> {
    let shape = vec![batch.len(), ds.dim()];
    let (grads, vars, loss) = {
        let tape = Tape::new();
        let vars = model.bind(&tape);
        let embed = |idx: &[usize]| -> Result<_> {
            let x = tape.constant(Tensor::new(shape.clone(), ds.gather(idx))?);
            model.forward(&tape, &vars, x)
        };
        let za = embed(&batch.anchors)?;
        let zp = embed(&batch.positives)?;
        let zn = embed(&batch.negatives)?;
        let gap = tape.sub(tape.row_distance(za, zp)?, tape.row_distance(za, zn)?)?;
        let loss = tape.mean(tape.hinge(tape.add_scalar(gap, margin)));
        let value = tape.scalar(loss);
        if !value.is_finite() {
            let (k, l) = batch.pair;
            return Err(Error::NonFiniteLoss { k, l });
        }
        (tape.backward(loss)?, vars, value)
    };
    let vars: Vec<_> = vars.into_iter().map(Some).collect();
    grads.accumulate_into(&vars, model.parameters_mut())?;
    Ok(loss)
}

pub fn train_triplet_baseline(ds: &Dataset, cfg: &BaselineConfig, seed: u64) -> Result<BaselineRun> {
    cfg.validate()?;
    let mut rng = seed::rng(seed, seed::stream::STUDENT_INIT, 0);
    let mut model = StudentModel::new(&mut rng, &cfg.student, ds.dim(), ds.image_shape(), cfg.output_dim)?;
    let sampler = cfg.sampler(ds, seed);
    let sgd = cfg.sgd();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let batches = sampler.epoch(ds, epoch)?;
        let mut total = 0.0;
        for batch in &batches {
            total += accumulate_triplet_grads(&mut model, ds, batch, cfg.margin)?;
            sgd_step(&mut model.parameters_mut(), &sgd)?;
        }
        let mean = total / batches.len() as f64;
        info!("triplet baseline epoch {}/{}: loss {mean:.5}", epoch + 1, cfg.epochs);
        epoch_losses.push(mean);
    }
    let mut embeddings = model.embed_dataset(ds)?;
    embeddings.source = EmbeddingSource::Baseline;
    Ok(BaselineRun {
        model,
        embeddings,
        epoch_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{blobs, BlobSpec};
    use crate::numerics::Dense;

    #[test]
    fn hinge_value_on_fixed_map() {
        // Identity student: anchor 0, positive 3 away, negative 1 away, margin 1 -> 3.
        let ds = Dataset::new(vec![0.0, 0.0, 3.0, 0.0, 1.0, 0.0], 2, vec![0, 0, 1], 2).unwrap();
        let mut s = StudentModel::linear(Dense::identity(2));
        let batch = TripletBatch {
            pair: (0, 1),
            anchors: vec![0],
            positives: vec![1],
            negatives: vec![2],
        };
        let loss = accumulate_triplet_grads(&mut s, &ds, &batch, 1.0).unwrap();
        assert!((loss - 3.0).abs() < 1e-12);
    }

    #[test]
    fn learns_blobs() {
        let ds = blobs(&BlobSpec::default(), 0).unwrap();
        let cfg = BaselineConfig {
            epochs: 10,
            student: StudentSpec::Mlp { hidden: vec![16] },
            ..BaselineConfig::default()
        };
        let run = train_triplet_baseline(&ds, &cfg, 2).unwrap();
        assert!(run.epoch_losses.last().unwrap() < run.epoch_losses.first().unwrap());
        assert_eq!(run.embeddings.len(), ds.len());
    }
}
