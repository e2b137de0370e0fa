//! Per-image composition of the stages: rollout, affinity, background
//! removal, spectral clustering, mask refinement and slot pooling.

use serde::{Deserialize, Serialize};

use crate::background::{self, ForegroundMask, ReferenceBank};
use crate::cluster::{spectral_cluster, ClusterLabels};
use crate::config::PipelineConfig;
use crate::crf::{refine_patch_labels, PixelMask};
use crate::rollout::trace_affinity;
use crate::slots::{pool_slots, SlotSet};
use crate::trace::TraceBundle;
use crate::{seed, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSegmentation {
    pub foreground: ForegroundMask,
    pub clusters: ClusterLabels,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub tokens: TokenSegmentation,
    pub mask: PixelMask,
}

/// Per-image summary written next to the masks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub k: usize,
    pub token_counts: Vec<usize>,
    pub eigenvalues: Vec<f64>,
}

impl From<&ClusterLabels> for ImageRecord {
    fn from(c: &ClusterLabels) -> Self {
        ImageRecord { k: c.k, token_counts: c.token_counts(), eigenvalues: c.eigenvalues.clone() }
    }
}

/// Reference bank from `config.reference_frames` frames sampled out of `frames`.
pub fn build_bank(frames: &[TraceBundle], config: &PipelineConfig) -> Result<ReferenceBank> {
    let picked = background::sample_reference_frames(frames.len(), config.reference_frames, config.seed);
    let refs: Vec<&TraceBundle> = picked.iter().map(|&i| &frames[i]).collect();
    background::build_reference_bank(&refs, config.cls_quantile)
}

/// Token-level grouping. `bank = None` or `bg_removal = false` keeps every token.
pub fn segment_tokens(
    bundle: &TraceBundle,
    bank: Option<&ReferenceBank>,
    config: &PipelineConfig,
    item: u64,
) -> Result<TokenSegmentation> {
    let affinity = trace_affinity(bundle, config.keep_fraction, config.sigma_spatial)?;
    let foreground = match bank {
        Some(bank) if config.bg_removal => background::score_backgroundness(bundle, bank, config.bg_threshold)?,
        _ => ForegroundMask::pass_through(bundle.token_count()),
    };
    let clusters =
        spectral_cluster(&affinity.matrix, &foreground, &config.cluster, seed::derive(config.seed, "cluster", item))?;
    Ok(TokenSegmentation { foreground, clusters })
}

pub fn segment(
    bundle: &TraceBundle,
    bank: Option<&ReferenceBank>,
    config: &PipelineConfig,
    item: u64,
) -> Result<Segmentation> {
    let tokens = segment_tokens(bundle, bank, config, item)?;
    let mask = refine_patch_labels(&tokens.clusters, &bundle.grid, &bundle.rgb, &config.refine)?;
    Ok(Segmentation { tokens, mask })
}

/// Slots for one frame, with centroids appended when configured.
pub fn embed(
    bundle: &TraceBundle,
    bank: Option<&ReferenceBank>,
    config: &PipelineConfig,
    item: u64,
) -> Result<SlotSet> {
    let tokens = segment_tokens(bundle, bank, config, item)?;
    let slots = pool_slots(bundle, &tokens.clusters)?;
    Ok(if config.append_centroid { slots.with_centroids_appended() } else { slots })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{planted_objects, PlantedParams};
    use crate::metrics::adjusted_rand_index;

    #[test]
    fn planted_scene_without_background_removal_finds_objects_plus_background() {
        let scene = planted_objects(&PlantedParams::default(), 21);
        let config = PipelineConfig { bg_removal: false, ..PipelineConfig::default() };
        let seg = segment_tokens(&scene.bundle, None, &config, 0).unwrap();
        assert_eq!(seg.foreground.kept(), 196);
        assert!(seg.clusters.k >= 1);
    }

    #[test]
    fn planted_scene_with_bank() {
        let p = PlantedParams::default();
        let frames: Vec<TraceBundle> = (0..10).map(|s| planted_objects(&p, 500 + s).bundle).collect();
        let config = PipelineConfig { reference_frames: 10, ..PipelineConfig::default() };
        let bank = build_bank(&frames, &config).unwrap();
        let scene = planted_objects(&p, 77);
        let seg = segment(&scene.bundle, Some(&bank), &config, 0).unwrap();
        // Stray background tokens may form an extra cluster; truth background is ignored.
        assert!(seg.tokens.clusters.k >= 3);
        let pred: Vec<i64> = seg.mask.labels.iter().map(|&l| l as i64).collect();
        let truth: Vec<i64> =
            scene.pixel_truth.iter().map(|&t| if t < 0 { crate::metrics::IGNORE } else { t }).collect();
        assert!(adjusted_rand_index(&pred, &truth).unwrap() > 0.95);
        let record = ImageRecord::from(&seg.tokens.clusters);
        assert_eq!(record.token_counts.len(), record.k);
        let slots = embed(&scene.bundle, Some(&bank), &config, 0).unwrap();
        assert_eq!(slots.len(), record.k);
    }
}
