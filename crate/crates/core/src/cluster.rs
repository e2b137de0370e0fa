//! Spectral clustering of foreground tokens with eigengap model selection.

use ndarray::Array2;

use crate::background::ForegroundMask;
use crate::kmeans::{self, DEFAULT_MAX_ITER, DEFAULT_RESTARTS};
use crate::linalg::symmetric_eigen;
use crate::{seed, Error, Result};

pub const DEFAULT_K_MAX: usize = 8;
pub const DEFAULT_MIN_CLUSTER_TOKENS: usize = 2;
/// Eigenvalues below this are treated as exact zeros by the eigengap search.
pub const ZERO_EIGENVALUE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterLabels {
    /// `-1` for background, `0..k` otherwise.
    pub labels: Vec<i32>,
    pub k: usize,
    /// Ascending Laplacian spectrum prefix used for the eigengap.
    pub eigenvalues: Vec<f64>,
}

impl ClusterLabels {
    pub fn token_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.k];
        for &l in &self.labels {
            if l >= 0 {
                counts[l as usize] += 1;
            }
        }
        counts
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterParams {
    pub k_max: usize,
    pub min_cluster_tokens: usize,
    pub restarts: usize,
    pub max_iter: usize,
}

impl Default for ClusterParams {
    fn default() -> Self {
        ClusterParams {
            k_max: DEFAULT_K_MAX,
            min_cluster_tokens: DEFAULT_MIN_CLUSTER_TOKENS,
            restarts: DEFAULT_RESTARTS,
            max_iter: DEFAULT_MAX_ITER,
        }
    }
}

fn check_affinity(affinity: &Array2<f64>) -> Result<()> {
    let n = affinity.nrows();
    if affinity.ncols() != n {
        return Err(Error::DimMismatch { expected: n, got: affinity.ncols() });
    }
    for i in 0..n {
        for j in 0..n {
            let a = affinity[[i, j]];
            if !a.is_finite() || a < 0.0 {
                return Err(Error::Invalid(format!("affinity entry ({i}, {j}) = {a}")));
            }
            if a != affinity[[j, i]] {
                return Err(Error::Invalid(format!("affinity not symmetric at ({i}, {j})")));
            }
        }
    }
    Ok(())
}

fn degrees(affinity: &Array2<f64>) -> Vec<f64> {
    affinity
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, row)| row.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, a)| a).sum())
        .collect()
}

/// `I - D^{-1/2} A D^{-1/2}` with self-loops ignored. Zero-degree tokens get an
/// all-zero row and column (they are singleton components).
pub fn normalized_laplacian(affinity: &Array2<f64>) -> Result<Array2<f64>> {
    check_affinity(affinity)?;
    let n = affinity.nrows();
    if n < 2 {
        return Err(Error::DegenerateScene(n));
    }
    let inv_sqrt: Vec<f64> =
        degrees(affinity).into_iter().map(|d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 }).collect();
    let mut lap = Array2::zeros((n, n));
    for i in 0..n {
        if inv_sqrt[i] > 0.0 {
            lap[[i, i]] = 1.0;
        }
        for j in 0..n {
            if i != j {
                lap[[i, j]] = -affinity[[i, j]] * inv_sqrt[i] * inv_sqrt[j];
            }
        }
    }
    Ok(lap)
}

/// `argmax_{1 <= k <= k_max} (lambda_{k+1} - lambda_k)` over 1-based ascending
/// eigenvalues, ties to the smaller k. Gaps whose upper eigenvalue is still
/// numerically zero are skipped; if every gap is skipped the number of zero
/// eigenvalues (capped at `k_max`) is returned.
pub fn eigengap_select(eigenvalues: &[f64], k_max: usize) -> usize {
    let k_max = k_max.max(1);
    let upper = k_max.min(eigenvalues.len().saturating_sub(1));
    let mut best: Option<(usize, f64)> = None;
    for k in 1..=upper {
        if eigenvalues[k] < ZERO_EIGENVALUE {
            continue;
        }
        let gap = eigenvalues[k] - eigenvalues[k - 1];
        if best.is_none_or(|(_, g)| gap > g) {
            best = Some((k, gap));
        }
    }
    match best {
        Some((k, _)) => k,
        None => eigenvalues.iter().filter(|&&l| l < ZERO_EIGENVALUE).count().clamp(1, k_max),
    }
}

/// Relabels clusters by order of first appearance so equal partitions produce
/// equal label vectors.
fn canonicalize(labels: &mut [i32]) -> usize {
    let mut map: Vec<i32> = vec![];
    let mut next = 0;
    let max = labels.iter().copied().max().unwrap_or(-1);
    map.resize((max + 1).max(0) as usize, -1);
    for l in labels.iter_mut() {
        if *l < 0 {
            continue;
        }
        let slot = &mut map[*l as usize];
        if *slot < 0 {
            *slot = next;
            next += 1;
        }
        *l = *slot;
    }
    next as usize
}

/// Merges clusters smaller than `min_tokens`, and then the smallest clusters
/// until at most `k_max` remain, into the cluster with the highest mean
/// affinity to them.
fn merge_small_clusters(labels: &mut [i32], affinity: &Array2<f64>, min_tokens: usize, k_max: usize) {
    loop {
        let k = canonicalize(labels);
        if k <= 1 {
            return;
        }
        let mut counts = vec![0usize; k];
        for &l in labels.iter() {
            if l >= 0 {
                counts[l as usize] += 1;
            }
        }
        let (small, &size) = counts.iter().enumerate().min_by(|a, b| a.1.cmp(b.1).then(a.0.cmp(&b.0))).expect("k > 1");
        if size >= min_tokens && k <= k_max {
            return;
        }
        let members: Vec<usize> = (0..labels.len()).filter(|&t| labels[t] == small as i32).collect();
        let mut best = (usize::MAX, f64::NEG_INFINITY);
        for (target, &count) in counts.iter().enumerate() {
            if target == small {
                continue;
            }
            let mut total = 0.0;
            for (t, &l) in labels.iter().enumerate() {
                if l == target as i32 {
                    total += members.iter().map(|&u| affinity[[u, t]]).sum::<f64>();
                }
            }
            let mean = total / (count * members.len()) as f64;
            if mean > best.1 {
                best = (target, mean);
            }
        }
        for &u in &members {
            labels[u] = best.0 as i32;
        }
    }
}

/// Spectral clustering of the kept tokens of a patch affinity. Background
/// tokens get `-1`.
pub fn spectral_cluster(
    affinity: &Array2<f64>,
    keep: &ForegroundMask,
    params: &ClusterParams,
    seed: u64,
) -> Result<ClusterLabels> {
    let m = affinity.nrows();
    if keep.keep.len() != m {
        return Err(Error::DimMismatch { expected: m, got: keep.keep.len() });
    }
    check_affinity(affinity)?;
    let kept: Vec<usize> = (0..m).filter(|&t| keep.keep[t]).collect();
    let mut labels = vec![-1i32; m];
    if kept.is_empty() {
        return Ok(ClusterLabels { labels, k: 0, eigenvalues: vec![] });
    }
    if kept.len() == 1 {
        labels[kept[0]] = 0;
        return Ok(ClusterLabels { labels, k: 1, eigenvalues: vec![] });
    }

    let sub = Array2::from_shape_fn((kept.len(), kept.len()), |(i, j)| affinity[[kept[i], kept[j]]]);
    let deg = degrees(&sub);
    let (active, isolated): (Vec<usize>, Vec<usize>) = (0..kept.len()).partition(|&i| deg[i] > 0.0);

    let mut sub_labels = vec![-1i32; kept.len()];
    let mut eigenvalues = vec![];
    let mut next_label = 0i32;
    if !active.is_empty() {
        let act = Array2::from_shape_fn((active.len(), active.len()), |(i, j)| sub[[active[i], active[j]]]);
        let lap = normalized_laplacian(&act)?;
        let eig = symmetric_eigen(&lap)?;
        let prefix = (params.k_max + 1).min(eig.values.len());
        eigenvalues = eig.values[..prefix].to_vec();
        let k = eigengap_select(&eig.values, params.k_max.min(active.len()));

        let embedding: Vec<Vec<f64>> = (0..active.len())
            .map(|i| {
                let row: Vec<f64> = (0..k).map(|c| eig.vectors[[i, c]]).collect();
                let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 0.0 {
                    row.iter().map(|x| x / norm).collect()
                } else {
                    row
                }
            })
            .collect();
        let fit = kmeans::kmeans(&embedding, k, params.restarts, params.max_iter, seed::derive(seed, "spectral", 0));
        for (i, &a) in active.iter().enumerate() {
            sub_labels[a] = fit.labels[i] as i32;
        }
        next_label = k as i32;
    }
    for &i in &isolated {
        sub_labels[i] = next_label;
        next_label += 1;
    }
    merge_small_clusters(&mut sub_labels, &sub, params.min_cluster_tokens, params.k_max);
    let k = canonicalize(&mut sub_labels);
    for (i, &t) in kept.iter().enumerate() {
        labels[t] = sub_labels[i];
    }
    canonicalize(&mut labels);
    Ok(ClusterLabels { labels, k, eigenvalues })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::planted_block_affinity;
    use crate::metrics::adjusted_rand_index;
    use ndarray::array;
    use proptest::prelude::*;

    fn union_find_components(a: &Array2<f64>) -> usize {
        let n = a.nrows();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut Vec<usize>, x: usize) -> usize {
            let mut r = x;
            while p[r] != r {
                r = p[r];
            }
            p[x] = r;
            r
        }
        for i in 0..n {
            for j in 0..n {
                if i != j && a[[i, j]] > 0.0 {
                    let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                    parent[ri] = rj;
                }
            }
        }
        (0..n).filter(|&i| find(&mut parent, i) == i).count()
    }

    #[test]
    fn laplacian_of_edge_pair() {
        let lap = normalized_laplacian(&array![[0.0, 1.0], [1.0, 0.0]]).unwrap();
        assert_eq!(lap, array![[1.0, -1.0], [-1.0, 1.0]]);
        let eig = symmetric_eigen(&lap).unwrap();
        assert!(eig.values[0].abs() < 1e-14 && (eig.values[1] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn laplacian_without_edges_is_zero() {
        let lap = normalized_laplacian(&Array2::eye(4)).unwrap();
        assert_eq!(lap, Array2::<f64>::zeros((4, 4)));
    }

    #[test]
    fn laplacian_rejects_tiny_and_asymmetric() {
        assert!(matches!(normalized_laplacian(&array![[0.0]]), Err(Error::DegenerateScene(1))));
        assert!(normalized_laplacian(&array![[0.0, 1.0], [0.5, 0.0]]).is_err());
    }

    #[test]
    fn zero_multiplicity_counts_components() {
        let mut rng = crate::seed::rng(1, "test", 0);
        use rand::Rng;
        for trial in 0..30 {
            let n = 12;
            let mut a = Array2::zeros((n, n));
            let blocks = 1 + trial % 4;
            for i in 0..n {
                for j in i + 1..n {
                    if i % blocks == j % blocks && rng.random::<f64>() < 0.6 {
                        let w = rng.random_range(0.1..1.0);
                        a[[i, j]] = w;
                        a[[j, i]] = w;
                    }
                }
            }
            let lap = normalized_laplacian(&a).unwrap();
            let eig = symmetric_eigen(&lap).unwrap();
            assert!(eig.values.iter().all(|&l| (-1e-10..=2.0 + 1e-10).contains(&l)));
            let zeros = eig.values.iter().filter(|&&l| l.abs() < 1e-9).count();
            assert_eq!(zeros, union_find_components(&a), "trial {trial}");
        }
    }

    #[test]
    fn eigengap_examples() {
        assert_eq!(eigengap_select(&[0.0, 0.0, 0.0, 0.9, 1.0, 1.1], 5), 3);
        assert_eq!(eigengap_select(&[0.0, 1.0, 1.0, 1.0], 3), 1);
        assert_eq!(eigengap_select(&[0.0, 0.0, 0.0], 5), 3);
        assert_eq!(eigengap_select(&[0.0, 0.1, 0.2, 0.3, 0.4], 2), 1);
    }

    #[test]
    fn eigengap_on_planted_four_blocks() {
        let (a, _) = planted_block_affinity(4, 8, 0.9, 0.01, 0.0, 0);
        let eig = symmetric_eigen(&normalized_laplacian(&a).unwrap()).unwrap();
        assert_eq!(eigengap_select(&eig.values, 8), 4);
    }

    #[test]
    fn recovers_two_blobs() {
        let (a, truth) = planted_block_affinity(2, 10, 0.9, 0.01, 0.02, 3);
        let keep = ForegroundMask::pass_through(20);
        let out = spectral_cluster(&a, &keep, &ClusterParams::default(), 11).unwrap();
        assert_eq!(out.k, 2);
        let pred: Vec<i64> = out.labels.iter().map(|&l| l as i64).collect();
        assert_eq!(adjusted_rand_index(&pred, &truth).unwrap(), 1.0);
    }

    #[test]
    fn complete_graph_is_one_cluster() {
        let mut a = Array2::from_elem((6, 6), 1.0);
        a.diag_mut().fill(0.0);
        let out = spectral_cluster(&a, &ForegroundMask::pass_through(6), &ClusterParams::default(), 0).unwrap();
        assert_eq!(out.k, 1);
        assert!(out.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn background_tokens_get_minus_one() {
        let (a, _) = planted_block_affinity(2, 6, 0.9, 0.01, 0.0, 0);
        let mut keep = ForegroundMask::pass_through(12);
        keep.keep[0] = false;
        keep.keep[7] = false;
        let out = spectral_cluster(&a, &keep, &ClusterParams::default(), 5).unwrap();
        for t in 0..12 {
            assert_eq!(out.labels[t] < 0, !keep.keep[t]);
        }
        assert_eq!(out.token_counts().iter().sum::<usize>(), 10);
    }

    #[test]
    fn deterministic_and_seed_free_on_separated_blocks() {
        let (a, _) = planted_block_affinity(3, 8, 0.9, 0.01, 0.05, 8);
        let keep = ForegroundMask::pass_through(24);
        let p = ClusterParams::default();
        let r1 = spectral_cluster(&a, &keep, &p, 1).unwrap();
        assert_eq!(r1, spectral_cluster(&a, &keep, &p, 1).unwrap());
        let r2 = spectral_cluster(&a, &keep, &p, 999).unwrap();
        let to64 = |l: &ClusterLabels| l.labels.iter().map(|&x| x as i64).collect::<Vec<_>>();
        assert_eq!(adjusted_rand_index(&to64(&r1), &to64(&r2)).unwrap(), 1.0);
    }

    #[test]
    fn isolated_tokens_become_singletons_then_merge() {
        let (mut a, _) = planted_block_affinity(2, 5, 0.9, 0.01, 0.0, 0);
        for j in 0..10 {
            a[[9, j]] = 0.0;
            a[[j, 9]] = 0.0;
        }
        let keep = ForegroundMask::pass_through(10);
        let p = ClusterParams { min_cluster_tokens: 1, ..ClusterParams::default() };
        let out = spectral_cluster(&a, &keep, &p, 0).unwrap();
        assert_eq!(out.k, 3);
        assert_eq!(out.token_counts().iter().filter(|&&c| c == 1).count(), 1);
        let out = spectral_cluster(&a, &keep, &ClusterParams::default(), 0).unwrap();
        assert_eq!(out.k, 2);
    }

    #[test]
    fn k_never_exceeds_k_max() {
        let (a, _) = planted_block_affinity(5, 4, 0.9, 0.001, 0.0, 0);
        let p = ClusterParams { k_max: 3, ..ClusterParams::default() };
        let out = spectral_cluster(&a, &ForegroundMask::pass_through(20), &p, 0).unwrap();
        assert!(out.k <= 3);
        assert!(out.labels.iter().all(|&l| l >= 0));
    }

    proptest! {
        #[test]
        fn eigengap_invariant_under_power_of_two_scaling(
            mut vals in prop::collection::vec(0.0f64..2.0, 2..12),
            exp in -4i32..5,
            k_max in 1usize..10,
        ) {
            vals.sort_by(f64::total_cmp);
            let c = 2f64.powi(exp);
            let scaled: Vec<f64> = vals.iter().map(|v| v * c).collect();
            prop_assume!(vals.iter().chain(&scaled).all(|&v| v == 0.0 || v > 1e-6));
            prop_assert_eq!(eigengap_select(&vals, k_max), eigengap_select(&scaled, k_max));
        }
    }
}
