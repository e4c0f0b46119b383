use log::{debug, info};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, TripletBatch, TripletSampler};
use crate::error::{Error, Result};
use crate::gemini::{GeminiModel, Repel};
use crate::numerics::{sgd_step, ClipMode, SgdConfig, Tape, Tensor};
use crate::seed;

/// Fixed embedding-space vectors that anchors of `class` are pushed away from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassConstraint {
    pub class: usize,
    pub vectors: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeminiConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta: f64,
    pub margin: f64,
    pub output_dim: usize,
    pub stream_hidden: Vec<usize>,
    pub head_hidden: Vec<usize>,
    /// Batches per ordered class pair each epoch; `None` draws enough to
    /// cover the dataset once.
    pub batches_per_pair: Option<usize>,
    pub weight_decay: f64,
    pub clip: f64,
    pub clip_mode: ClipMode,
    pub stream_epsilon: f64,
    pub constraints: Vec<ClassConstraint>,
}

impl Default for GeminiConfig {
    fn default() -> Self {
        GeminiConfig {
            learning_rate: 0.001,
            batch_size: 32,
            epochs: 15,
            beta: 0.005,
            margin: 3.0,
            output_dim: 2,
            stream_hidden: vec![128, 64],
            head_hidden: vec![],
            batches_per_pair: None,
            weight_decay: 1e-4,
            clip: 0.1,
            clip_mode: ClipMode::Value,
            stream_epsilon: 0.5,
            constraints: Vec::new(),
        }
    }
}

impl GeminiConfig {
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
            return Err(Error::Config("batch size, output dim and batches per pair must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta must lie in [0, 1], got {}", self.beta)));
        }
        if !(self.stream_epsilon > 0.0) {
            return Err(Error::Config("stream epsilon must be positive".into()));
        }
        if self.constraints.iter().any(|c| c.vectors.iter().any(|v| v.len() != self.output_dim)) {
            return Err(Error::Config("constraint vectors must have output_dim entries".into()));
        }
        Ok(())
    }

    pub fn build_model(&self, input_dim: usize, classes: usize, seed: u64) -> Result<GeminiModel> {
        let mut rng = seed::rng(seed, seed::stream::GEMINI_INIT, 0);
        let mut head = self.head_hidden.clone();
        head.push(self.output_dim);
        GeminiModel::new(&mut rng, input_dim, classes, &self.stream_hidden, &head, self.beta, self.margin)
    }

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
pub struct GeminiRun {
    pub model: GeminiModel,
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

impl GeminiModel {
    /// Adds the gradient of one batch's mean loss into the parameter grad
    /// buffers and returns the loss. Streams other than `k` and `l` get
    /// exactly zero gradient.
    pub fn accumulate_batch_grads(
        &mut self,
        ds: &Dataset,
        batch: &TripletBatch,
        constraints: &[ClassConstraint],
    ) -> Result<f64> {
        let (k, l) = batch.pair;
        let (grads, vars, loss) = {
            let tape = Tape::new();
            let vars = self.bind(&tape, &[k, l]);
            let shape = vec![batch.len(), ds.dim()];
            let xa = tape.constant(Tensor::new(shape.clone(), ds.gather(&batch.anchors))?);
            let xp = tape.constant(Tensor::new(shape.clone(), ds.gather(&batch.positives))?);
            let xn = tape.constant(Tensor::new(shape, ds.gather(&batch.negatives))?);
            let extra: Vec<Vec<f64>> = constraints
                .iter()
                .filter(|c| c.class == k)
                .flat_map(|c| c.vectors.iter().cloned())
                .collect();
            let repel = Repel {
                negatives: Some((l, xn)),
                vectors: &extra,
            };
            let out = self.batch_loss(&tape, &vars, k, xa, xp, repel)?;
            let loss = tape.scalar(out.loss);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { k, l });
            }
            (tape.backward(out.loss)?, vars, loss)
        };
        grads.accumulate_into(&vars, self.parameters_mut())?;
        Ok(loss)
    }
}

/// Trains a fresh model on `ds`; fully determined by `(ds, cfg, seed)`.
pub fn train_gemini(ds: &Dataset, cfg: &GeminiConfig, seed: u64) -> Result<GeminiRun> {
    cfg.validate()?;
    let model = cfg.build_model(ds.dim(), ds.class_count(), seed)?;
    train_from(model, ds, cfg, seed)
}

/// Continues training `model` with the schedule that `seed` implies.
pub fn train_from(mut model: GeminiModel, ds: &Dataset, cfg: &GeminiConfig, seed: u64) -> Result<GeminiRun> {
    cfg.validate()?;
    if model.class_count() != ds.class_count() || model.input_dim() != ds.dim() {
        return Err(Error::Config(format!(
            "model expects {} classes of dim {}, data has {} of dim {}",
            model.class_count(),
            model.input_dim(),
            ds.class_count(),
            ds.dim()
        )));
    }
    let sampler = cfg.sampler(ds, seed);
    let sgd = cfg.sgd();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut steps = 0;
    info!(
        "gemini: {} samples, {} classes, {} batches per epoch",
        ds.len(),
        ds.class_count(),
        sampler.batches_per_epoch(ds.class_count())
    );
    for epoch in 0..cfg.epochs {
        let batches = sampler.epoch(ds, epoch)?;
        let mut total = 0.0;
        for batch in &batches {
            total += model.accumulate_batch_grads(ds, batch, &cfg.constraints)?;
            let (k, l) = batch.pair;
            sgd_step(&mut model.active_parameters_mut(k, l), &sgd)?;
            steps += 1;
        }
        let mean = total / batches.len() as f64;
        info!("gemini epoch {}/{}: loss {mean:.5}", epoch + 1, cfg.epochs);
        epoch_losses.push(mean);
    }
    Ok(GeminiRun {
        model,
        epoch_losses,
        steps,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamCondition {
    pub epsilon: f64,
    /// Fraction of sampled same-class pairs closer than `epsilon` in stream space.
    pub fraction: f64,
    /// Per-class fraction; `None` for classes with fewer than two samples.
    pub per_class: Vec<Option<f64>>,
    pub pairs_per_class: usize,
}

/// Samples same-class pairs and measures how often their stream outputs
/// lie within `epsilon` of each other.
pub fn check_stream_condition(
    model: &GeminiModel,
    ds: &Dataset,
    epsilon: f64,
    pairs_per_class: usize,
    seed: u64,
) -> Result<StreamCondition> {
    if ds.class_count() > model.class_count() {
        return Err(Error::InvalidClass {
            class: ds.class_count() - 1,
            count: model.class_count(),
        });
    }
    let mut rng = seed::rng(seed, seed::stream::DIAGNOSTIC, 0);
    let mut per_class = Vec::with_capacity(ds.class_count());
    let (mut hits, mut total) = (0usize, 0usize);
    for (c, members) in ds.class_index().iter().enumerate() {
        if members.len() < 2 || pairs_per_class == 0 {
            per_class.push(None);
            continue;
        }
        let mut a = Vec::with_capacity(pairs_per_class);
        let mut b = Vec::with_capacity(pairs_per_class);
        for _ in 0..pairs_per_class {
            let i = rng.random_range(0..members.len());
            let mut j = rng.random_range(0..members.len() - 1);
            if j >= i {
                j += 1;
            }
            a.push(members[i]);
            b.push(members[j]);
        }
        let fa = model.stream_forward(&ds.gather(&a), a.len(), c)?;
        let fb = model.stream_forward(&ds.gather(&b), b.len(), c)?;
        let h = fa.len() / pairs_per_class;
        let close = fa
            .chunks(h)
            .zip(fb.chunks(h))
            .filter(|(x, y)| x.iter().zip(*y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt() < epsilon)
            .count();
        debug!("stream {c}: {close}/{pairs_per_class} pairs within {epsilon}");
        hits += close;
        total += pairs_per_class;
        per_class.push(Some(close as f64 / pairs_per_class as f64));
    }
    if total == 0 {
        return Err(Error::Invalid("no class has two samples to compare".into()));
    }
    Ok(StreamCondition {
        epsilon,
        fraction: hits as f64 / total as f64,
        per_class,
        pairs_per_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{blobs, BlobSpec};

    fn small_cfg() -> GeminiConfig {
        GeminiConfig {
            stream_hidden: vec![16, 8],
            head_hidden: vec![8],
            epochs: 3,
            batch_size: 8,
            ..GeminiConfig::default()
        }
    }

    #[test]
    fn inactive_streams_get_zero_grad() {
        let ds = blobs(&BlobSpec { classes: 4, per_class: 10, ..BlobSpec::default() }, 0).unwrap();
        let cfg = small_cfg();
        let mut model = cfg.build_model(ds.dim(), 4, 3).unwrap();
        let batch = cfg.sampler(&ds, 3).epoch(&ds, 0).unwrap().remove(0);
        let (k, l) = batch.pair;
        model.accumulate_batch_grads(&ds, &batch, &[]).unwrap();
        for c in 0..4 {
            let range = model.stream_param_range(c);
            let params = model.parameters();
            let nonzero = params[range].iter().any(|p| p.grad().unwrap().iter().any(|&g| g != 0.0));
            assert_eq!(nonzero, c == k || c == l, "stream {c} for pair {:?}", (k, l));
        }
    }

    #[test]
    fn non_finite_loss_names_pair() {
        let ds = blobs(&BlobSpec::default(), 0).unwrap();
        let cfg = small_cfg();
        let mut model = cfg.build_model(ds.dim(), 2, 0).unwrap();
        model.head.layers.last_mut().unwrap().bias.values_mut()[0] = f64::NAN;
        let batch = cfg.sampler(&ds, 0).epoch(&ds, 0).unwrap().remove(0);
        let err = model.accumulate_batch_grads(&ds, &batch, &[]).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { k, l } if (k, l) == batch.pair));
    }

    #[test]
    fn constraints_add_repulsion() {
        let ds = blobs(&BlobSpec::default(), 0).unwrap();
        let cfg = small_cfg();
        let batch = cfg.sampler(&ds, 0).epoch(&ds, 0).unwrap().remove(0);
        let mut a = cfg.build_model(ds.dim(), 2, 0).unwrap();
        let mut b = a.clone();
        let plain = a.accumulate_batch_grads(&ds, &batch, &[]).unwrap();
        let embed = b.embed(&ds.gather(&batch.anchors[..1]), 1, batch.pair.0).unwrap();
        let c = ClassConstraint {
            class: batch.pair.0,
            vectors: vec![embed],
        };
        let with = b.accumulate_batch_grads(&ds, &batch, &[c]).unwrap();
        assert!(with > plain);
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let ds = blobs(&BlobSpec::default(), 0).unwrap();
        let cfg = GeminiConfig {
            learning_rate: 0.01,
            epochs: 20,
            ..small_cfg()
        };
        let a = train_gemini(&ds, &cfg, 9).unwrap();
        let b = train_gemini(&ds, &cfg, 9).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.epoch_losses, b.epoch_losses);
        assert!(a.epoch_losses.last().unwrap() < a.epoch_losses.first().unwrap());
    }
}

#[cfg(test)]
mod blob_tests {
    use super::*;
    use crate::data::{blobs, BlobSpec};

    fn nearest_label(z: &crate::embedding::EmbeddingSet, i: usize) -> usize {
        let d = |j: usize| z.row(i).iter().zip(z.row(j)).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        let j = (0..z.len()).filter(|&j| j != i).min_by(|&a, &b| d(a).total_cmp(&d(b))).unwrap();
        z.labels()[j]
    }

    #[test]
    fn two_blobs_separate_and_streams_contract() {
        let ds = blobs(&BlobSpec::default(), 0).unwrap();
        let cfg = GeminiConfig {
            epochs: 10,
            ..GeminiConfig::default()
        };
        let untrained = cfg.build_model(ds.dim(), 2, 1).unwrap();
        let run = train_gemini(&ds, &cfg, 1).unwrap();
        let z = run.model.embed_dataset(&ds).unwrap();
        assert!((0..z.len()).all(|i| nearest_label(&z, i) == z.labels()[i]));
        let before = check_stream_condition(&untrained, &ds, 1e-3, 100, 0).unwrap();
        let after = check_stream_condition(&run.model, &ds, 0.5, 100, 0).unwrap();
        assert!(before.fraction < 0.05);
        assert!(after.fraction >= 0.9, "{after:?}");
    }

    #[test]
    fn collapsed_streams_satisfy_condition() {
        let ds = blobs(&BlobSpec { classes: 3, ..BlobSpec::default() }, 0).unwrap();
        let mut model = GeminiConfig::default().build_model(ds.dim(), 3, 0).unwrap();
        model.collapse_outputs();
        let c = check_stream_condition(&model, &ds, 1e-9, 50, 0).unwrap();
        assert_eq!(c.fraction, 1.0);
        assert_eq!(c.per_class, vec![Some(1.0); 3]);
    }

    #[test]
    fn literal_schedule_visits_each_pair_once() {
        let ds = blobs(&BlobSpec { classes: 10, per_class: 5, ..BlobSpec::default() }, 0).unwrap();
        let cfg = GeminiConfig {
            batches_per_pair: Some(1),
            ..GeminiConfig::default()
        };
        let batches = cfg.sampler(&ds, 0).epoch(&ds, 0).unwrap();
        assert_eq!(batches.len(), 90);
        let mut pairs: Vec<_> = batches.iter().map(|b| b.pair).collect();
        pairs.sort_unstable();
        pairs.dedup();
        assert_eq!(pairs.len(), 90);
    }
}
