use rand::Rng;

use crate::embedding::EmbeddingSet;
use crate::error::{Error, Result};
use crate::seed;

const MAX_ITERS: usize = 100;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f64], centers: &[Vec<f64>]) -> usize {
    let mut best = 0;
    for (c, center) in centers.iter().enumerate().skip(1) {
        if sq_dist(x, center) < sq_dist(x, &centers[best]) {
            best = c;
        }
    }
    best
}

/// Lloyd's algorithm with k-means++ seeding; returns a cluster id per row.
pub fn kmeans(e: &EmbeddingSet, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 || k > e.len() {
        return Err(Error::Invalid(format!("cannot form {k} clusters from {} points", e.len())));
    }
    let mut rng = seed::rng(seed, seed::stream::KMEANS, 0);
    let mut centers = vec![e.row(rng.random_range(0..e.len())).to_vec()];
    let mut d2: Vec<f64> = (0..e.len()).map(|i| sq_dist(e.row(i), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut t = rng.random_range(0.0..total);
            d2.iter().position(|&w| {
                t -= w;
                t < 0.0
            })
            .unwrap_or(e.len() - 1)
        } else {
            rng.random_range(0..e.len())
        };
        centers.push(e.row(pick).to_vec());
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(e.row(i), centers.last().unwrap()));
        }
    }
    let mut assign: Vec<usize> = (0..e.len()).map(|i| nearest(e.row(i), &centers)).collect();
    for _ in 0..MAX_ITERS {
        let mut sums = vec![vec![0.0; e.dim()]; k];
        let mut counts = vec![0usize; k];
        for (i, &c) in assign.iter().enumerate() {
            counts[c] += 1;
            sums[c].iter_mut().zip(e.row(i)).for_each(|(s, v)| *s += v);
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        let next: Vec<usize> = (0..e.len()).map(|i| nearest(e.row(i), &centers)).collect();
        if next == assign {
            break;
        }
        assign = next;
    }
    Ok(assign)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separates_two_clusters() {
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![if i < 10 { 0.0 } else { 50.0 } + (i % 10) as f64 * 0.1]).collect();
        let e = EmbeddingSet::from_rows(&rows, (0..20).map(|i| i / 10).collect()).unwrap();
        let a = kmeans(&e, 2, 3).unwrap();
        assert!(a[..10].iter().all(|&c| c == a[0]));
        assert!(a[10..].iter().all(|&c| c == a[10]));
        assert_ne!(a[0], a[10]);
    }
}
