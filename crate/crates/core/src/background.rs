//! Background removal against a bank of reference-frame key features.
//!
//! Reference tokens are split into foreground and background by their CLS
//! attention. A current-frame token is scored by how much closer (cosine) it is
//! to the background bank than to the foreground bank.

use std::fs;
use std::path::Path;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::trace::TraceBundle;
use crate::{atomic, seed, Error, Result};

pub const DEFAULT_CLS_QUANTILE: f64 = 0.7;
pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_REFERENCE_FRAMES: usize = 30;

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceBank {
    pub dim: usize,
    pub fg_keys: Vec<Vec<f64>>,
    pub bg_keys: Vec<Vec<f64>>,
    /// Frames that contributed tokens (0 when loaded from disk).
    pub source_count: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BankFile {
    dim: usize,
    fg: Vec<Vec<f64>>,
    bg: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForegroundMask {
    pub keep: Vec<bool>,
    /// Backgroundness in `[0, 1]`.
    pub scores: Vec<f64>,
}

impl ForegroundMask {
    /// Keeps every token; used for backbones without meaningful CLS attention.
    pub fn pass_through(m: usize) -> Self {
        ForegroundMask { keep: vec![true; m], scores: vec![0.0; m] }
    }

    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }
}

/// Indices of tokens whose CLS attention is within the top `1 - cls_quantile`
/// fraction (ties with the cut-off included).
pub fn salient_tokens(cls_attention: &[f32], cls_quantile: f64) -> Vec<bool> {
    let m = cls_attention.len();
    if m == 0 {
        return vec![];
    }
    let count = (((1.0 - cls_quantile) * m as f64 - 1e-9).ceil() as usize).clamp(1, m);
    let mut sorted = cls_attention.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let cutoff = sorted[count - 1];
    cls_attention.iter().map(|&a| a >= cutoff).collect()
}

pub fn build_reference_bank(frames: &[&TraceBundle], cls_quantile: f64) -> Result<ReferenceBank> {
    if !(cls_quantile > 0.0 && cls_quantile < 1.0) {
        return Err(Error::InvalidArgument(format!("cls_quantile must lie in (0, 1), got {cls_quantile}")));
    }
    let first =
        frames.first().ok_or_else(|| Error::InvalidArgument("reference bank needs at least one frame".into()))?;
    let dim = first.feat_dim();
    let mut bank = ReferenceBank { dim, fg_keys: vec![], bg_keys: vec![], source_count: 0 };
    for frame in frames {
        if frame.feat_dim() != dim {
            return Err(Error::DimMismatch { expected: dim, got: frame.feat_dim() });
        }
        let salient = salient_tokens(&frame.cls_attention, cls_quantile);
        if salient.iter().all(|&s| s) || salient.iter().all(|&s| !s) {
            continue;
        }
        for (t, &fg) in salient.iter().enumerate() {
            let key = frame.patch_key(t);
            if fg {
                bank.fg_keys.push(key);
            } else {
                bank.bg_keys.push(key);
            }
        }
        bank.source_count += 1;
    }
    if bank.source_count == 0 {
        return Err(Error::DegenerateReference);
    }
    Ok(bank)
}

/// Uniform sample without replacement of `count` frame indices out of `total`,
/// returned in ascending order.
pub fn sample_reference_frames(total: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = seed::rng(seed, "reference-frames", 0);
    let mut picked = index::sample(&mut rng, total, count.min(total)).into_vec();
    picked.sort_unstable();
    picked
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn cosine(a: &[f64], a_norm: f64, b: &[f64], b_norm: f64) -> f64 {
    if a_norm == 0.0 || b_norm == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (dot / (a_norm * b_norm)).clamp(-1.0, 1.0)
}

fn max_cosine(key: &[f64], key_norm: f64, bank: &[Vec<f64>], norms: &[f64]) -> f64 {
    bank.iter().zip(norms).map(|(b, &n)| cosine(key, key_norm, b, n)).fold(f64::NEG_INFINITY, f64::max)
}

/// `(1 + max cos to bg) / ((1 + max cos to fg) + (1 + max cos to bg))`, with
/// 0.5 when both similarity terms vanish.
pub fn backgroundness(key: &[f64], bank: &ReferenceBank) -> f64 {
    let fg_norms: Vec<f64> = bank.fg_keys.iter().map(|k| norm(k)).collect();
    let bg_norms: Vec<f64> = bank.bg_keys.iter().map(|k| norm(k)).collect();
    score_with_norms(key, bank, &fg_norms, &bg_norms)
}

fn score_with_norms(key: &[f64], bank: &ReferenceBank, fg_norms: &[f64], bg_norms: &[f64]) -> f64 {
    let key_norm = norm(key);
    let s_fg = max_cosine(key, key_norm, &bank.fg_keys, fg_norms) + 1.0;
    let s_bg = max_cosine(key, key_norm, &bank.bg_keys, bg_norms) + 1.0;
    let total = s_fg + s_bg;
    if total <= 0.0 {
        0.5
    } else {
        s_bg / total
    }
}

pub fn score_backgroundness(bundle: &TraceBundle, bank: &ReferenceBank, threshold: f64) -> Result<ForegroundMask> {
    if bank.fg_keys.is_empty() || bank.bg_keys.is_empty() {
        return Err(Error::EmptyBank);
    }
    if bundle.feat_dim() != bank.dim {
        return Err(Error::DimMismatch { expected: bank.dim, got: bundle.feat_dim() });
    }
    let fg_norms: Vec<f64> = bank.fg_keys.iter().map(|k| norm(k)).collect();
    let bg_norms: Vec<f64> = bank.bg_keys.iter().map(|k| norm(k)).collect();
    let scores: Vec<f64> =
        (0..bundle.token_count()).map(|t| score_with_norms(&bundle.patch_key(t), bank, &fg_norms, &bg_norms)).collect();
    let keep = scores.iter().map(|&s| s < threshold).collect();
    Ok(ForegroundMask { keep, scores })
}

impl ReferenceBank {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = BankFile { dim: self.dim, fg: self.fg_keys.clone(), bg: self.bg_keys.clone() };
        atomic::write_atomic(path, &serde_json::to_vec(&file)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: BankFile = serde_json::from_slice(&fs::read(path)?)?;
        if file.fg.is_empty() || file.bg.is_empty() {
            return Err(Error::EmptyBank);
        }
        for key in file.fg.iter().chain(&file.bg) {
            if key.len() != file.dim {
                return Err(Error::DimMismatch { expected: file.dim, got: key.len() });
            }
        }
        Ok(ReferenceBank { dim: file.dim, fg_keys: file.fg, bg_keys: file.bg, source_count: 0 })
    }
}
