//! Segmentation scores: adjusted Rand index and mean segmentation covering.

use std::collections::BTreeMap;

use crate::{Error, Result};

/// Label excluded from every score.
pub const IGNORE: i64 = -2;

fn check_lengths(pred: &[i64], truth: &[i64]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::DimMismatch { expected: truth.len(), got: pred.len() });
    }
    Ok(())
}

fn scored_pairs<'a>(pred: &'a [i64], truth: &'a [i64]) -> impl Iterator<Item = (i64, i64)> + 'a {
    pred.iter().zip(truth).filter(|(&p, &t)| p != IGNORE && t != IGNORE).map(|(&p, &t)| (p, t))
}

fn pairs(n: i128) -> i128 {
    n * (n - 1) / 2
}

/// Chance-corrected pairwise agreement over the contingency table, evaluated
/// in exact integer arithmetic up to the final division. Positions labelled
/// [`IGNORE`] in either argument are skipped.
pub fn adjusted_rand_index(pred: &[i64], truth: &[i64]) -> Result<f64> {
    check_lengths(pred, truth)?;
    let mut table: BTreeMap<(i64, i64), i128> = BTreeMap::new();
    let mut rows: BTreeMap<i64, i128> = BTreeMap::new();
    let mut cols: BTreeMap<i64, i128> = BTreeMap::new();
    let mut n: i128 = 0;
    for (p, t) in scored_pairs(pred, truth) {
        *table.entry((p, t)).or_default() += 1;
        *rows.entry(p).or_default() += 1;
        *cols.entry(t).or_default() += 1;
        n += 1;
    }
    if n == 0 {
        return Err(Error::InvalidArgument("segmentation has no scored elements".into()));
    }
    let index: i128 = table.values().map(|&c| pairs(c)).sum();
    let sum_a: i128 = rows.values().map(|&c| pairs(c)).sum();
    let sum_b: i128 = cols.values().map(|&c| pairs(c)).sum();
    let total = pairs(n);
    // ARI = (index - a*b/total) / ((a+b)/2 - a*b/total), scaled by 2*total.
    let numerator = 2 * (total * index - sum_a * sum_b);
    let denominator = total * (sum_a + sum_b) - 2 * sum_a * sum_b;
    if denominator == 0 {
        return Ok(1.0);
    }
    Ok(numerator as f64 / denominator as f64)
}

/// Covering of the truth segments by the predicted ones: each truth segment's
/// best IoU, weighted by segment size (`weighted`) or averaged uniformly.
/// Not symmetric in its arguments.
pub fn mean_segmentation_covering(pred: &[i64], truth: &[i64], weighted: bool) -> Result<f64> {
    check_lengths(pred, truth)?;
    let mut inter: BTreeMap<(i64, i64), usize> = BTreeMap::new();
    let mut pred_size: BTreeMap<i64, usize> = BTreeMap::new();
    let mut truth_size: BTreeMap<i64, usize> = BTreeMap::new();
    for (p, t) in scored_pairs(pred, truth) {
        *inter.entry((t, p)).or_default() += 1;
        *pred_size.entry(p).or_default() += 1;
        *truth_size.entry(t).or_default() += 1;
    }
    if truth_size.is_empty() {
        return Err(Error::InvalidArgument("segmentation has no scored elements".into()));
    }
    let mut best: BTreeMap<i64, f64> = BTreeMap::new();
    for (&(t, p), &i) in &inter {
        let union = truth_size[&t] + pred_size[&p] - i;
        let iou = i as f64 / union as f64;
        let entry = best.entry(t).or_insert(0.0);
        if iou > *entry {
            *entry = iou;
        }
    }
    let total: usize = truth_size.values().sum();
    let score = if weighted {
        truth_size.iter().map(|(t, &s)| s as f64 * best[t]).sum::<f64>() / total as f64
    } else {
        best.values().sum::<f64>() / best.len() as f64
    };
    Ok(score)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricOptions {
    /// Ground-truth background label, if any.
    pub background: Option<i64>,
    /// Drop truth-background positions from ARI (foreground ARI).
    pub ari_ignore_background: bool,
    /// Score the truth background as a segment to be covered in MSC.
    pub msc_include_background: bool,
    pub msc_weighted: bool,
}

impl Default for MetricOptions {
    fn default() -> Self {
        MetricOptions {
            background: Some(-1),
            ari_ignore_background: true,
            msc_include_background: false,
            msc_weighted: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentationScore {
    pub ari: f64,
    pub msc: f64,
}

fn mask_background(truth: &[i64], background: Option<i64>, drop: bool) -> Vec<i64> {
    match (background, drop) {
        (Some(bg), true) => truth.iter().map(|&t| if t == bg { IGNORE } else { t }).collect(),
        _ => truth.to_vec(),
    }
}

pub fn score(pred: &[i64], truth: &[i64], opts: &MetricOptions) -> Result<SegmentationScore> {
    let ari_truth = mask_background(truth, opts.background, opts.ari_ignore_background);
    let msc_truth = mask_background(truth, opts.background, !opts.msc_include_background);
    Ok(SegmentationScore {
        ari: adjusted_rand_index(pred, &ari_truth)?,
        msc: mean_segmentation_covering(pred, &msc_truth, opts.msc_weighted)?,
    })
}
