//! Fixed-order slot binding through optimal assignment to reference slots.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::slots::SlotSet;
use crate::{atomic, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `(row, col)` pairs sorted by row; `min(rows, cols)` of them.
    pub pairs: Vec<(usize, usize)>,
    pub cost: f64,
}

/// Minimum-cost assignment of a rectangular cost matrix (shortest augmenting
/// paths with row/column potentials, O(n^2 m)). Rows are inserted in index
/// order and column scans take the first minimum, so ties resolve toward lower
/// indices deterministically.
pub fn hungarian_assign(cost: &Array2<f64>) -> Result<Assignment> {
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::InvalidArgument("assignment costs must be finite".into()));
    }
    let (rows, cols) = cost.dim();
    if rows == 0 || cols == 0 {
        return Ok(Assignment { pairs: vec![], cost: 0.0 });
    }
    let transposed = rows > cols;
    let c = if transposed { cost.t().to_owned() } else { cost.clone() };
    let (n, m) = c.dim();

    // 1-based potentials and matching; column 0 is the virtual root.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut row_of_col = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        row_of_col[0] = i;
        let mut j0 = 0;
        let mut min_slack = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = row_of_col[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let reduced = c[[i0 - 1, j - 1]] - u[i0] - v[j];
                if reduced < min_slack[j] {
                    min_slack[j] = reduced;
                    way[j] = j0;
                }
                if min_slack[j] < delta {
                    delta = min_slack[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[row_of_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_slack[j] -= delta;
                }
            }
            j0 = j1;
            if row_of_col[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of_col[j0] = row_of_col[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| row_of_col[j] != 0)
        .map(|j| {
            let (r, col) = (row_of_col[j] - 1, j - 1);
            if transposed {
                (col, r)
            } else {
                (r, col)
            }
        })
        .collect();
    pairs.sort_unstable();
    let total = pairs.iter().map(|&(r, col)| cost[[r, col]]).sum();
    Ok(Assignment { pairs, cost: total })
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn distance_matrix(rows: &[&[f64]], cols: &[&[f64]]) -> Array2<f64> {
    Array2::from_shape_fn((rows.len(), cols.len()), |(i, j)| euclidean(rows[i], cols[j]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSlots {
    pub vectors: Vec<Vec<f64>>,
    pub source: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReferenceFile {
    k_star: usize,
    dim: usize,
    vectors: Vec<Vec<f64>>,
    source: String,
}

impl ReferenceSlots {
    pub fn k_star(&self) -> usize {
        self.vectors.len()
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = ReferenceFile {
            k_star: self.k_star(),
            dim: self.dim(),
            vectors: self.vectors.clone(),
            source: self.source.clone(),
        };
        atomic::write_atomic(path, &serde_json::to_vec(&file)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: ReferenceFile = serde_json::from_slice(&fs::read(path)?)?;
        if file.k_star == 0 || file.vectors.len() != file.k_star {
            return Err(Error::Invalid(format!(
                "reference declares k_star = {} with {} vectors",
                file.k_star,
                file.vectors.len()
            )));
        }
        if let Some(v) = file.vectors.iter().find(|v| v.len() != file.dim) {
            return Err(Error::DimMismatch { expected: file.dim, got: v.len() });
        }
        Ok(ReferenceSlots { vectors: file.vectors, source: file.source })
    }
}

/// Tracks frame 0's slots through the demonstration by frame-to-frame
/// assignment and averages each track over the frames where it was matched.
pub fn build_reference_slots(frames: &[SlotSet], source: &str) -> Result<ReferenceSlots> {
    let first = frames.first().ok_or(Error::UnusableReference)?;
    if first.is_empty() {
        return Err(Error::UnusableReference);
    }
    let dim = first.dim().expect("non-empty");
    let mut last: Vec<Vec<f64>> = first.slots.iter().map(|s| s.vector.clone()).collect();
    let mut sums = last.clone();
    let mut counts = vec![1usize; last.len()];
    for frame in &frames[1..] {
        if frame.is_empty() {
            continue;
        }
        if let Some(d) = frame.dim().filter(|&d| d != dim) {
            return Err(Error::DimMismatch { expected: dim, got: d });
        }
        let tracks: Vec<&[f64]> = last.iter().map(Vec::as_slice).collect();
        let current: Vec<&[f64]> = frame.slots.iter().map(|s| s.vector.as_slice()).collect();
        let assignment = hungarian_assign(&distance_matrix(&tracks, &current))?;
        for (track, slot) in assignment.pairs {
            let v = &frame.slots[slot].vector;
            for (s, x) in sums[track].iter_mut().zip(v) {
                *s += x;
            }
            counts[track] += 1;
            last[track] = v.clone();
        }
    }
    let vectors = sums.into_iter().zip(counts).map(|(s, n)| s.into_iter().map(|x| x / n as f64).collect()).collect();
    Ok(ReferenceSlots { vectors, source: source.to_string() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundSlots {
    pub ordered: Vec<Vec<f64>>,
    pub matched: Vec<bool>,
    /// Reference index to current slot index.
    pub assignment: Vec<Option<usize>>,
}

impl BoundSlots {
    /// Concatenation of the ordered slot vectors, length `k* x D`.
    pub fn flatten(&self) -> Vec<f64> {
        self.ordered.iter().flatten().copied().collect()
    }
}

/// Orders `current` by the reference: optimal assignment on Euclidean
/// distances, optional distance gate, carry-over (or zeros) for unmatched
/// reference positions. Unassigned current slots are dropped.
pub fn bind(
    current: &SlotSet,
    reference: &ReferenceSlots,
    previous: Option<&BoundSlots>,
    gate: Option<f64>,
) -> Result<BoundSlots> {
    let k_star = reference.k_star();
    let dim = reference.dim();
    if let Some(d) = current.dim().filter(|&d| d != dim) {
        return Err(Error::DimMismatch { expected: dim, got: d });
    }
    if let Some(prev) = previous {
        if prev.ordered.len() != k_star {
            return Err(Error::DimMismatch { expected: k_star, got: prev.ordered.len() });
        }
    }
    let mut assignment = vec![None; k_star];
    if !current.is_empty() {
        let refs: Vec<&[f64]> = reference.vectors.iter().map(Vec::as_slice).collect();
        let cur: Vec<&[f64]> = current.slots.iter().map(|s| s.vector.as_slice()).collect();
        let dist = distance_matrix(&refs, &cur);
        for (r, c) in hungarian_assign(&dist)?.pairs {
            if gate.is_none_or(|g| dist[[r, c]] <= g) {
                assignment[r] = Some(c);
            }
        }
    }
    let mut ordered = Vec::with_capacity(k_star);
    let mut matched = Vec::with_capacity(k_star);
    for (r, a) in assignment.iter().enumerate() {
        match a {
            Some(c) => {
                ordered.push(current.slots[*c].vector.clone());
                matched.push(true);
            }
            None => {
                ordered.push(previous.map_or_else(|| vec![0.0; dim], |p| p.ordered[r].clone()));
                matched.push(false);
            }
        }
    }
    Ok(BoundSlots { ordered, matched, assignment })
}

/// Binds a trajectory in order, carrying unmatched positions forward.
pub fn bind_sequence(frames: &[SlotSet], reference: &ReferenceSlots, gate: Option<f64>) -> Result<Vec<BoundSlots>> {
    let mut out: Vec<BoundSlots> = Vec::with_capacity(frames.len());
    for frame in frames {
        let bound = bind(frame, reference, out.last(), gate)?;
        out.push(bound);
    }
    Ok(out)
}
