//! Lloyd's k-means with k-means++ seeding and independent seeded restarts.

use rand::Rng;

use crate::seed;

pub const DEFAULT_RESTARTS: usize = 50;
pub const DEFAULT_MAX_ITER: usize = 300;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means++: first centroid uniform, then proportional to squared distance to
/// the nearest chosen centroid.
pub fn plus_plus_init<R: Rng>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = Vec::with_capacity(k);
    centroids.push(points[rng.random_range(0..n)].clone());
    let mut dist: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 && total.is_finite() {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &d) in dist.iter().enumerate() {
                acc += d;
                if acc > target && d > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = points[pick].clone();
        for (d, p) in dist.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Lloyd iterations from the given centroids. An empty cluster is reseeded at
/// the point farthest from its currently assigned centroid.
pub fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>, max_iter: usize) -> KMeansFit {
    let k = centroids.len();
    let dim = points.first().map_or(0, Vec::len);
    let mut labels = vec![usize::MAX; points.len()];
    let mut iterations = 0;
    loop {
        let mut changed = false;
        for (label, p) in labels.iter_mut().zip(points) {
            let (c, _) = nearest(p, &centroids);
            if *label != c {
                *label = c;
                changed = true;
            }
        }
        if !changed || iterations >= max_iter {
            break;
        }
        iterations += 1;

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (&label, p) in labels.iter().zip(points) {
            counts[label] += 1;
            for (s, x) in sums[label].iter_mut().zip(p) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = labels
                    .iter()
                    .zip(points)
                    .enumerate()
                    .map(|(i, (&l, p))| (i, sq_dist(p, &centroids[l])))
                    .fold((0, -1.0), |best, cand| if cand.1 > best.1 { cand } else { best })
                    .0;
                centroids[c] = points[far].clone();
                labels[far] = c;
                counts[c] = 1;
            }
        }
    }
    let inertia = labels.iter().zip(points).map(|(&l, p)| sq_dist(p, &centroids[l])).sum();
    KMeansFit { labels, centroids, inertia, iterations }
}

/// Best-inertia fit over `restarts` runs; restart `r` draws from the stream
/// derived from `(seed, r)`, so the result does not depend on run order.
pub fn kmeans(points: &[Vec<f64>], k: usize, restarts: usize, max_iter: usize, seed: u64) -> KMeansFit {
    assert!(!points.is_empty(), "k-means needs at least one point");
    let k = k.clamp(1, points.len());
    let mut best: Option<KMeansFit> = None;
    for restart in 0..restarts.max(1) {
        let mut rng = seed::rng(seed, "kmeans", restart as u64);
        let init = plus_plus_init(points, k, &mut rng);
        let fit = lloyd(points, init, max_iter);
        if best.as_ref().is_none_or(|b| fit.inertia < b.inertia) {
            best = Some(fit);
        }
    }
    best.expect("at least one restart")
}
