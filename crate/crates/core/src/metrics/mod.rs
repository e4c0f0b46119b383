//! Leave-one-out retrieval and 1-NN classification metrics.
//!
//! Every query ranks all other points by Euclidean distance, breaking exact
//! ties by the lower index. Recall@K, R-Precision and MAP@R read that
//! ranking directly; F1 and NMI compare true labels with the labels of each
//! query's nearest neighbour.

mod kmeans;

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingSet, EmbeddingSource};
use crate::error::{Error, Result};

pub use kmeans::kmeans;

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Full pairwise distances; only practical for small sets.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    values: Vec<f64>,
}

impl DistanceMatrix {
    pub fn new(e: &EmbeddingSet) -> Self {
        let n = e.len();
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let d = distance(e.row(i), e.row(j));
                values[i * n + j] = d;
                values[j * n + i] = d;
            }
        }
        DistanceMatrix { n, values }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }
}

fn check_len(e: &EmbeddingSet) -> Result<()> {
    if e.len() < 2 {
        return Err(Error::Invalid(format!("need at least 2 embeddings, got {}", e.len())));
    }
    Ok(())
}

/// The `take` nearest other points of query `i`, nearest first.
fn ranked(e: &EmbeddingSet, i: usize, take: usize, dist: &mut Vec<(f64, usize)>) -> Vec<usize> {
    dist.clear();
    let q = e.row(i);
    dist.extend((0..e.len()).filter(|&j| j != i).map(|j| (distance(q, e.row(j)), j)));
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    let take = take.min(dist.len());
    if take == 0 {
        return Vec::new();
    }
    if take < dist.len() {
        dist.select_nth_unstable_by(take - 1, cmp);
        dist.truncate(take);
    }
    dist.sort_unstable_by(cmp);
    dist.iter().map(|&(_, j)| j).collect()
}

/// Label of the nearest other point to query `i`.
pub fn knn_predict(e: &EmbeddingSet, i: usize) -> Result<usize> {
    check_len(e)?;
    if i >= e.len() {
        return Err(Error::Invalid(format!("query index {i} out of range for {} points", e.len())));
    }
    let q = e.row(i);
    let mut best: Option<(f64, usize)> = None;
    for j in (0..e.len()).filter(|&j| j != i) {
        let d = distance(q, e.row(j));
        if best.is_none_or(|(bd, _)| d.total_cmp(&bd) == Ordering::Less) {
            best = Some((d, j));
        }
    }
    Ok(e.labels()[best.expect("n >= 2").1])
}

pub fn knn_predictions(e: &EmbeddingSet) -> Result<Vec<usize>> {
    (0..e.len()).map(|i| knn_predict(e, i)).collect()
}

pub fn recall_at_k(e: &EmbeddingSet, k: usize) -> Result<f64> {
    check_len(e)?;
    check_k(k, e.len())?;
    let labels = e.labels();
    let mut buf = Vec::new();
    let hits = (0..e.len())
        .filter(|&i| ranked(e, i, k, &mut buf).iter().any(|&j| labels[j] == labels[i]))
        .count();
    Ok(hits as f64 / e.len() as f64)
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k == 0 || k >= n {
        return Err(Error::Invalid(format!("K must satisfy 1 <= K < n = {n}, got {k}")));
    }
    Ok(())
}

fn check_lengths(truth: &[usize], pred: &[usize]) -> Result<()> {
    if truth.len() != pred.len() {
        return Err(Error::LengthMismatch {
            what: "true vs predicted labels",
            left: truth.len(),
            right: pred.len(),
        });
    }
    if truth.is_empty() {
        return Err(Error::Invalid("no labels to score".into()));
    }
    Ok(())
}

/// Micro-averaged F1, which for single-label predictions is accuracy.
pub fn f1_score(truth: &[usize], pred: &[usize]) -> Result<f64> {
    check_lengths(truth, pred)?;
    let tp = truth.iter().zip(pred).filter(|(a, b)| a == b).count() as f64;
    let n = truth.len() as f64;
    // Each wrong prediction is one false positive and one false negative.
    let (fp, fneg) = (n - tp, n - tp);
    Ok(2.0 * tp / (2.0 * tp + fp + fneg))
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// `I(T;P) / sqrt(H(T) H(P))` over the contingency table of two labelings.
pub fn nmi(truth: &[usize], pred: &[usize]) -> Result<f64> {
    check_lengths(truth, pred)?;
    let n = truth.len() as f64;
    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut tc: BTreeMap<usize, usize> = BTreeMap::new();
    let mut pc: BTreeMap<usize, usize> = BTreeMap::new();
    for (&t, &p) in truth.iter().zip(pred) {
        *joint.entry((t, p)).or_default() += 1;
        *tc.entry(t).or_default() += 1;
        *pc.entry(p).or_default() += 1;
    }
    let ht = entropy(tc.values().copied(), n);
    let hp = entropy(pc.values().copied(), n);
    if ht == 0.0 || hp == 0.0 {
        // A constant labeling: identical partitions only if both are constant.
        return Ok(if ht == hp { 1.0 } else { 0.0 });
    }
    let mi: f64 = joint
        .iter()
        .map(|(&(t, p), &c)| {
            let pj = c as f64 / n;
            pj * (pj / (tc[&t] as f64 / n * (pc[&p] as f64 / n))).ln()
        })
        .sum();
    Ok((mi / (ht * hp).sqrt()).clamp(0.0, 1.0))
}

fn class_sizes(e: &EmbeddingSet) -> Result<BTreeMap<usize, usize>> {
    let mut sizes = BTreeMap::new();
    for &l in e.labels() {
        *sizes.entry(l).or_default() += 1;
    }
    if let Some((&c, _)) = sizes.iter().find(|(_, &s)| s < 2) {
        return Err(Error::SingletonClass(c));
    }
    Ok(sizes)
}

/// Precision at `R` and average precision at `R` for one ranked query.
fn rp_and_ap(ranking: &[usize], labels: &[usize], label: usize, r: usize) -> (f64, f64) {
    let (mut hits, mut ap) = (0usize, 0.0);
    for (pos, &j) in ranking.iter().take(r).enumerate() {
        if labels[j] == label {
            hits += 1;
            ap += hits as f64 / (pos + 1) as f64;
        }
    }
    (hits as f64 / r as f64, ap / r as f64)
}

pub fn r_precision(e: &EmbeddingSet) -> Result<f64> {
    Ok(retrieval(e)?.0)
}

pub fn map_at_r(e: &EmbeddingSet) -> Result<f64> {
    Ok(retrieval(e)?.1)
}

fn retrieval(e: &EmbeddingSet) -> Result<(f64, f64)> {
    check_len(e)?;
    let sizes = class_sizes(e)?;
    let labels = e.labels();
    let mut buf = Vec::new();
    let (mut rp, mut map) = (0.0, 0.0);
    for i in 0..e.len() {
        let r = sizes[&labels[i]] - 1;
        let (p, ap) = rp_and_ap(&ranked(e, i, r, &mut buf), labels, labels[i], r);
        rp += p;
        map += ap;
    }
    Ok((rp / e.len() as f64, map / e.len() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NmiSource {
    /// True labels against 1-NN predictions.
    #[default]
    Knn,
    /// True labels against a seeded k-means clustering with one cluster per class.
    Kmeans,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub source: EmbeddingSource,
    pub n: usize,
    pub m_out: usize,
    pub seed: u64,
    pub k_for_knn: usize,
    pub recall_at_k: BTreeMap<usize, f64>,
    pub f1: f64,
    pub nmi: f64,
    pub nmi_source: NmiSource,
    /// `None` when some class has a single member.
    pub r_precision: Option<f64>,
    pub map_at_r: Option<f64>,
    pub timing: Timing,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Timing {
    pub seconds: f64,
}

/// Every metric from a single ranking pass per query. R-Precision and
/// MAP@R are left out when a class has a single member.
pub fn evaluate(e: &EmbeddingSet, ks: &[usize], nmi_source: NmiSource, seed: u64) -> Result<MetricsReport> {
    let start = std::time::Instant::now();
    check_len(e)?;
    for &k in ks {
        check_k(k, e.len())?;
    }
    let labels = e.labels();
    let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *sizes.entry(l).or_default() += 1;
    }
    let retrieval_ok = sizes.values().all(|&s| s >= 2);
    let max_k = ks.iter().copied().max().unwrap_or(1);
    let mut recall_hits = vec![0usize; ks.len()];
    let (mut rp, mut map) = (0.0, 0.0);
    let mut pred = Vec::with_capacity(e.len());
    let mut buf = Vec::new();
    for i in 0..e.len() {
        let r = sizes[&labels[i]] - 1;
        let ranking = ranked(e, i, r.max(max_k).max(1), &mut buf);
        pred.push(labels[ranking[0]]);
        for (h, &k) in recall_hits.iter_mut().zip(ks) {
            if ranking[..k].iter().any(|&j| labels[j] == labels[i]) {
                *h += 1;
            }
        }
        if retrieval_ok {
            let (p, ap) = rp_and_ap(&ranking, labels, labels[i], r);
            rp += p;
            map += ap;
        }
    }
    let n = e.len() as f64;
    let clusters = match nmi_source {
        NmiSource::Knn => pred.clone(),
        NmiSource::Kmeans => kmeans(e, sizes.len(), seed)?,
    };
    Ok(MetricsReport {
        source: e.source,
        n: e.len(),
        m_out: e.dim(),
        seed,
        k_for_knn: 1,
        recall_at_k: ks.iter().zip(&recall_hits).map(|(&k, &h)| (k, h as f64 / n)).collect(),
        f1: f1_score(labels, &pred)?,
        nmi: nmi(labels, &clusters)?,
        nmi_source,
        r_precision: retrieval_ok.then_some(rp / n),
        map_at_r: retrieval_ok.then_some(map / n),
        timing: Timing {
            seconds: start.elapsed().as_secs_f64(),
        },
    })
}

impl MetricsReport {
    pub fn recall_at_1(&self) -> Option<f64> {
        self.recall_at_k.get(&1).copied()
    }

    /// The report as pretty JSON without timing, for reproducibility checks.
    pub fn to_json_untimed(&self) -> String {
        let mut r = self.clone();
        r.timing = Timing::default();
        serde_json::to_string_pretty(&r).expect("report serialises")
    }
}
