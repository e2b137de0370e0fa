//! Feature-only comparison: k-means on L2-normalized raw patch keys, with no
//! attention, spatial or background information.

use crate::kmeans;
use crate::seed;
use crate::trace::TraceBundle;

/// Labels every patch token (no background class) into `k` key clusters.
pub fn key_kmeans_labels(bundle: &TraceBundle, k: usize, restarts: usize, max_iter: usize, seed: u64) -> Vec<i32> {
    let points: Vec<Vec<f64>> = (0..bundle.token_count())
        .map(|t| {
            let key = bundle.patch_key(t);
            let n = key.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                key.iter().map(|x| x / n).collect()
            } else {
                key
            }
        })
        .collect();
    let k = k.clamp(1, points.len().max(1));
    let fit = kmeans::kmeans(&points, k, restarts, max_iter, seed::derive(seed, "key-baseline", 0));
    fit.labels.into_iter().map(|l| l as i32).collect()
}
