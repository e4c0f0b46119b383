//! Triplet mini-batches drawn from ordered class pairs.
//!
//! Each batch is built in two steps: pick an ordered pair `(k, l)` with
//! `k != l`, then draw anchors and positives from class `k` and negatives
//! from class `l`. An epoch visits every ordered pair the same number of
//! times in a seeded shuffled order.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::seed;

/// Sample indices for one batch; every anchor/positive belongs to
/// `pair.0` and every negative to `pair.1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripletBatch {
    pub pair: (usize, usize),
    pub anchors: Vec<usize>,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl TripletBatch {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// All `C·(C−1)` ordered pairs of distinct classes, shuffled by `rng`.
pub fn enumerate_permutations<R: Rng>(class_count: usize, rng: &mut R) -> Result<Vec<(usize, usize)>> {
    if class_count < 2 {
        return Err(Error::TooFewClasses(class_count));
    }
    let mut pairs: Vec<(usize, usize)> = (0..class_count)
        .flat_map(|k| (0..class_count).filter(move |&l| l != k).map(move |l| (k, l)))
        .collect();
    pairs.shuffle(rng);
    Ok(pairs)
}

/// Draws `n` triplets for `pair`, with anchor and positive distinct samples.
pub fn sample_triplet_batch<R: Rng>(
    ds: &Dataset,
    pair: (usize, usize),
    n: usize,
    rng: &mut R,
) -> Result<TripletBatch> {
    let (k, l) = pair;
    let c = ds.class_count();
    for class in [k, l] {
        if class >= c {
            return Err(Error::InvalidClass { class, count: c });
        }
    }
    if k == l {
        return Err(Error::SameClassTriplet(k));
    }
    let pos = ds.class_members(k);
    let neg = ds.class_members(l);
    if pos.len() < 2 {
        return Err(Error::ClassTooSmall {
            class: k,
            have: pos.len(),
            need: 2,
        });
    }
    let mut batch = TripletBatch {
        pair,
        anchors: Vec::with_capacity(n),
        positives: Vec::with_capacity(n),
        negatives: Vec::with_capacity(n),
    };
    for _ in 0..n {
        let a = rng.random_range(0..pos.len());
        let mut p = rng.random_range(0..pos.len() - 1);
        if p >= a {
            p += 1;
        }
        batch.anchors.push(pos[a]);
        batch.positives.push(pos[p]);
        batch.negatives.push(neg[rng.random_range(0..neg.len())]);
    }
    Ok(batch)
}

/// Seeded per-epoch triplet schedule shared by every triplet-trained model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TripletSampler {
    pub seed: u64,
    pub batch_size: usize,
    pub batches_per_pair: usize,
}

impl TripletSampler {
    /// Batches per pair so that one epoch draws about as many anchors as
    /// the dataset has samples (at least one per pair).
    pub fn covering_batches_per_pair(ds: &Dataset, batch_size: usize) -> usize {
        let c = ds.class_count();
        let per_epoch = batch_size * c * c.saturating_sub(1);
        ds.len().div_ceil(per_epoch.max(1)).max(1)
    }

    pub fn batches_per_epoch(&self, class_count: usize) -> usize {
        class_count * (class_count - 1) * self.batches_per_pair
    }

    /// The ordered-pair visiting order for `epoch`.
    pub fn schedule(&self, class_count: usize, epoch: usize) -> Result<Vec<(usize, usize)>> {
        let mut rng = seed::rng(self.seed, seed::stream::TRIPLETS, epoch as u64);
        let mut pairs = enumerate_permutations(class_count, &mut rng)?;
        if self.batches_per_pair > 1 {
            pairs = pairs
                .iter()
                .flat_map(|&p| std::iter::repeat_n(p, self.batches_per_pair))
                .collect();
            pairs.shuffle(&mut rng);
        }
        Ok(pairs)
    }

    /// Every batch of `epoch`, fully determined by `(seed, epoch)`.
    pub fn epoch(&self, ds: &Dataset, epoch: usize) -> Result<Vec<TripletBatch>> {
        let schedule = self.schedule(ds.class_count(), epoch)?;
        let mut rng = seed::rng(self.seed, seed::stream::TRIPLETS, (1 << 32) | epoch as u64);
        schedule
            .into_iter()
            .map(|pair| sample_triplet_batch(ds, pair, self.batch_size, &mut rng))
            .collect()
    }
}
