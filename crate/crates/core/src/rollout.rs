//! Attention rollout and the symmetrized patch affinity.

use ndarray::{s, Array2};

use crate::trace::{head_average, PatchGrid, TraceBundle};
use crate::{Error, Result};

pub const DEFAULT_KEEP_FRACTION: f64 = 0.10;
pub const DEFAULT_SIGMA: f64 = 0.2;

/// Inputwise attention `prod_l (A_l + I)` over a span of layers.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutMatrix {
    pub matrix: Array2<f64>,
    pub layer_span: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    /// `attention + spatial`, patch tokens only.
    pub matrix: Array2<f64>,
    /// Min-max normalized `R + R^T` with zeroed diagonal.
    pub attention: Array2<f64>,
    /// Min-max normalized spatial kernel.
    pub spatial: Array2<f64>,
}

impl AffinityMatrix {
    pub fn len(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.is_empty()
    }
}

fn keep_count(keep_fraction: f64, n: usize) -> usize {
    // The epsilon absorbs representation error such as 0.3 * 10 = 3.0000000000000004.
    ((keep_fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n)
}

/// Zeroes every entry below each row's top `keep_fraction` and renormalizes the
/// row. Entries tied with the cut-off value survive.
pub fn sparsify_topk(attention: &Array2<f64>, keep_fraction: f64) -> Result<Array2<f64>> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("keep_fraction must lie in (0, 1], got {keep_fraction}")));
    }
    let mut out = attention.clone();
    let n = attention.ncols();
    if n == 0 || keep_fraction == 1.0 {
        return Ok(out);
    }
    let keep = keep_count(keep_fraction, n);
    let mut scratch = Vec::with_capacity(n);
    for mut row in out.rows_mut() {
        scratch.clear();
        scratch.extend(row.iter().copied());
        let (_, cutoff, _) = scratch.select_nth_unstable_by(keep - 1, |a, b| b.total_cmp(a));
        let cutoff = *cutoff;
        let mut total = 0.0;
        for v in row.iter_mut() {
            if *v < cutoff {
                *v = 0.0;
            } else {
                total += *v;
            }
        }
        if total > 0.0 {
            row.mapv_inplace(|v| v / total);
        }
    }
    Ok(out)
}

/// Left-to-right product `(A_1 + I)(A_2 + I)...(A_L + I)`.
pub fn attention_rollout(layers: &[Array2<f64>]) -> Result<RolloutMatrix> {
    let first = layers.first().ok_or_else(|| Error::InvalidArgument("rollout needs at least one layer".into()))?;
    let n = first.nrows();
    let mut product: Option<Array2<f64>> = None;
    for layer in layers {
        if layer.dim() != (n, n) {
            return Err(Error::DimMismatch { expected: n, got: layer.nrows().max(layer.ncols()) });
        }
        let mut factor = layer.clone();
        factor.diag_mut().mapv_inplace(|v| v + 1.0);
        product = Some(match product {
            None => factor,
            Some(acc) => acc.dot(&factor),
        });
    }
    Ok(RolloutMatrix { matrix: product.expect("non-empty"), layer_span: layers.len() })
}

/// Head-average, sparsify and roll out every layer of a trace.
pub fn rollout_trace(bundle: &TraceBundle, keep_fraction: f64) -> Result<RolloutMatrix> {
    let layers = bundle
        .layers
        .iter()
        .map(|layer| sparsify_topk(&head_average(layer), keep_fraction))
        .collect::<Result<Vec<_>>>()?;
    attention_rollout(&layers)
}

/// Gaussian kernel on normalized patch centers.
pub fn spatial_similarity(grid: &PatchGrid, sigma: f64) -> Result<Array2<f64>> {
    if !sigma.is_finite() || sigma <= 0.0 {
        return Err(Error::InvalidArgument(format!("sigma must be > 0, got {sigma}")));
    }
    let m = grid.token_count();
    let centers: Vec<(f64, f64)> = (0..m).map(|t| grid.center(t)).collect();
    let denom = 2.0 * sigma * sigma;
    let mut s = Array2::zeros((m, m));
    for i in 0..m {
        s[[i, i]] = 1.0;
        for j in i + 1..m {
            let dr = centers[i].0 - centers[j].0;
            let dc = centers[i].1 - centers[j].1;
            let k = (-(dr * dr + dc * dc) / denom).exp();
            s[[i, j]] = k;
            s[[j, i]] = k;
        }
    }
    Ok(s)
}

fn min_max_normalize(matrix: &Array2<f64>) -> Result<Array2<f64>> {
    let (lo, hi) = matrix.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi - lo).is_finite() || hi <= lo {
        return Err(Error::DegenerateAffinity);
    }
    let range = hi - lo;
    Ok(matrix.mapv(|v| (v - lo) / range))
}

/// Strips the CLS token from the rollout and combines the symmetrized,
/// diagonal-free attention term with the spatial kernel, each min-max
/// normalized over the whole matrix.
pub fn build_affinity(rollout: &RolloutMatrix, spatial: &Array2<f64>, grid: &PatchGrid) -> Result<AffinityMatrix> {
    let m = grid.token_count();
    if rollout.matrix.dim() != (m + 1, m + 1) {
        return Err(Error::DimMismatch { expected: m + 1, got: rollout.matrix.nrows() });
    }
    if spatial.dim() != (m, m) {
        return Err(Error::DimMismatch { expected: m, got: spatial.nrows() });
    }
    let patches = rollout.matrix.slice(s![1.., 1..]);
    let mut sym = Array2::zeros((m, m));
    for i in 0..m {
        for j in i + 1..m {
            let v = patches[[i, j]] + patches[[j, i]];
            sym[[i, j]] = v;
            sym[[j, i]] = v;
        }
    }
    let attention = min_max_normalize(&sym)?;
    let spatial = min_max_normalize(spatial)?;
    let matrix = &attention + &spatial;
    Ok(AffinityMatrix { matrix, attention, spatial })
}

/// Affinity of a trace under the given rollout and spatial parameters.
pub fn trace_affinity(bundle: &TraceBundle, keep_fraction: f64, sigma: f64) -> Result<AffinityMatrix> {
    let rollout = rollout_trace(bundle, keep_fraction)?;
    let spatial = spatial_similarity(&bundle.grid, sigma)?;
    build_affinity(&rollout, &spatial, &bundle.grid)
}
