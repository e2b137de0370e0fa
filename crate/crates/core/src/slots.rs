//! Slot pooling: one mean key feature and centroid per token cluster.

use serde::{Deserialize, Serialize};

use crate::cluster::ClusterLabels;
use crate::trace::TraceBundle;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Slot {
    pub vector: Vec<f64>,
    /// Mean patch center `(row, col)` in `[0, 1]^2`.
    pub centroid: [f64; 2],
    #[serde(rename = "tokens")]
    pub mask_tokens: Vec<usize>,
}

impl Slot {
    pub fn token_count(&self) -> usize {
        self.mask_tokens.len()
    }
}

/// Unordered set of slots for one frame; stored in cluster-id order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SlotSet {
    pub slots: Vec<Slot>,
}

#[derive(Serialize, Deserialize)]
struct SlotRecord {
    k: usize,
    slots: Vec<Slot>,
}

impl SlotSet {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.slots.first().map(|s| s.vector.len())
    }

    /// Copy with each slot's centroid appended to its feature vector.
    pub fn with_centroids_appended(&self) -> SlotSet {
        let slots = self
            .slots
            .iter()
            .map(|s| {
                let mut vector = s.vector.clone();
                vector.extend_from_slice(&s.centroid);
                Slot { vector, ..s.clone() }
            })
            .collect();
        SlotSet { slots }
    }

    /// One JSONL record `{k, slots: [{vector, centroid, tokens}]}`.
    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(&SlotRecord { k: self.len(), slots: self.slots.clone() })?)
    }

    pub fn from_json_line(line: &str) -> Result<SlotSet> {
        let record: SlotRecord = serde_json::from_str(line)?;
        if record.k != record.slots.len() {
            return Err(Error::Invalid(format!(
                "slot record declares k = {} but holds {} slots",
                record.k,
                record.slots.len()
            )));
        }
        Ok(SlotSet { slots: record.slots })
    }
}

pub fn pool_slots(bundle: &TraceBundle, labels: &ClusterLabels) -> Result<SlotSet> {
    let m = bundle.token_count();
    if labels.labels.len() != m {
        return Err(Error::DimMismatch { expected: m, got: labels.labels.len() });
    }
    let dim = bundle.feat_dim();
    let k = labels.k;
    let mut sums = vec![vec![0.0f64; dim]; k];
    let mut centers = vec![[0.0f64; 2]; k];
    let mut members: Vec<Vec<usize>> = vec![vec![]; k];
    for (t, &l) in labels.labels.iter().enumerate() {
        if l < 0 {
            continue;
        }
        let c = l as usize;
        if c >= k {
            return Err(Error::Invalid(format!("label {l} out of range for k = {k}")));
        }
        for (s, &v) in sums[c].iter_mut().zip(bundle.key_features.row(t + 1)) {
            *s += v as f64;
        }
        let (r, col) = bundle.grid.center(t);
        centers[c][0] += r;
        centers[c][1] += col;
        members[c].push(t);
    }
    let slots = members
        .into_iter()
        .enumerate()
        .filter(|(_, tokens)| !tokens.is_empty())
        .map(|(c, tokens)| {
            let n = tokens.len() as f64;
            Slot {
                vector: sums[c].iter().map(|s| s / n).collect(),
                centroid: [centers[c][0] / n, centers[c][1] / n],
                mask_tokens: tokens,
            }
        })
        .collect();
    Ok(SlotSet { slots })
}
