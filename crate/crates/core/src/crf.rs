//! Pixel-level mask refinement with a fully connected CRF.
//!
//! Mean-field inference with a Potts compatibility and two Gaussian pairwise
//! kernels: an appearance kernel over position and color and a smoothness
//! kernel over position only. Messages are computed exactly (no lattice
//! approximation); up to [`DENSE_KERNEL_MAX_PIXELS`] pixels the kernel matrix is
//! materialized once, beyond that rows are recomputed every iteration.

use image::RgbImage;
use ndarray::Array2;

use crate::cluster::ClusterLabels;
use crate::trace::PatchGrid;
use crate::{Error, Result};

pub const DENSE_KERNEL_MAX_PIXELS: usize = 4096;
pub const DEFAULT_ITERATIONS: usize = 10;
pub const DEFAULT_HARDNESS: f64 = 0.9;
pub const DEFAULT_MAX_SIDE: usize = 112;
const UNARY_TOL: f64 = 1e-6;
const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrfParams {
    /// Appearance kernel position std, pixels.
    pub theta_alpha: f64,
    /// Appearance kernel color std, 0-255 units.
    pub theta_beta: f64,
    /// Smoothness kernel position std, pixels.
    pub theta_gamma: f64,
    pub w_app: f64,
    pub w_smooth: f64,
}

impl Default for CrfParams {
    fn default() -> Self {
        CrfParams { theta_alpha: 30.0, theta_beta: 13.0, theta_gamma: 3.0, w_app: 5.0, w_smooth: 3.0 }
    }
}

/// Per-pixel label distribution, `h * w` rows of `labels` probabilities.
/// Channel `k` (the last) is background.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbField {
    pub height: usize,
    pub width: usize,
    pub probs: Array2<f64>,
}

impl ProbField {
    pub fn channels(&self) -> usize {
        self.probs.ncols()
    }

    /// Per-pixel argmax mapped back to cluster labels (`-1` for background).
    pub fn argmax_labels(&self) -> Vec<i32> {
        argmax_rows(&self.probs)
    }
}

fn argmax_rows(probs: &Array2<f64>) -> Vec<i32> {
    let bg = probs.ncols() - 1;
    probs
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (c, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = c;
                }
            }
            if best == bg {
                -1
            } else {
                best as i32
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PixelMask {
    pub height: usize,
    pub width: usize,
    pub k: usize,
    /// Row-major, `-1` background.
    pub labels: Vec<i32>,
}

/// Nearest-patch upsampling of token labels to a `height x width` image.
pub fn upsample_labels(labels: &[i32], grid: &PatchGrid, height: usize, width: usize) -> Vec<i32> {
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        let r = (y * grid.rows / height).min(grid.rows - 1);
        for x in 0..width {
            let c = (x * grid.cols / width).min(grid.cols - 1);
            out.push(labels[r * grid.cols + c]);
        }
    }
    out
}

/// Each pixel takes its patch's label with probability `hardness`; the rest of
/// the mass is spread evenly over the other `k` channels.
pub fn unary_from_patches(
    labels: &ClusterLabels,
    grid: &PatchGrid,
    dims: (usize, usize),
    hardness: f64,
) -> Result<ProbField> {
    if !(hardness > 0.0 && hardness < 1.0) {
        return Err(Error::InvalidArgument(format!("hardness must lie in (0, 1), got {hardness}")));
    }
    if labels.labels.len() != grid.token_count() {
        return Err(Error::DimMismatch { expected: grid.token_count(), got: labels.labels.len() });
    }
    let (height, width) = dims;
    let k = labels.k;
    let channels = k + 1;
    let pixel_labels = upsample_labels(&labels.labels, grid, height, width);
    let rest = if k == 0 { 0.0 } else { (1.0 - hardness) / k as f64 };
    let mut probs = Array2::from_elem((height * width, channels), rest);
    for (mut row, &l) in probs.rows_mut().into_iter().zip(&pixel_labels) {
        let slot = if l < 0 { k } else { l as usize };
        row[slot] = if k == 0 { 1.0 } else { hardness };
    }
    Ok(ProbField { height, width, probs })
}

fn validate_unary(unary: &ProbField, rgb: &RgbImage) -> Result<()> {
    if unary.probs.nrows() != unary.height * unary.width
        || unary.height != rgb.height() as usize
        || unary.width != rgb.width() as usize
    {
        return Err(Error::DimMismatch {
            expected: rgb.height() as usize * rgb.width() as usize,
            got: unary.probs.nrows(),
        });
    }
    if unary.channels() == 0 {
        return Err(Error::InvalidArgument("unary has no label channels".into()));
    }
    for (i, row) in unary.probs.rows().into_iter().enumerate() {
        if row.iter().any(|&p| !p.is_finite() || p < 0.0) || (row.sum() - 1.0).abs() > UNARY_TOL {
            return Err(Error::InvalidArgument(format!("unary at pixel {i} is not normalized")));
        }
    }
    Ok(())
}

struct PixelFeatures {
    pos: Vec<[f64; 2]>,
    color: Vec<[f64; 3]>,
}

impl PixelFeatures {
    fn new(rgb: &RgbImage) -> Self {
        let mut pos = Vec::new();
        let mut color = Vec::new();
        for (x, y, px) in rgb.enumerate_pixels() {
            pos.push([y as f64, x as f64]);
            color.push([px[0] as f64, px[1] as f64, px[2] as f64]);
        }
        // enumerate_pixels is row-major, matching the label layout.
        PixelFeatures { pos, color }
    }

    fn kernel(&self, i: usize, j: usize, p: &CrfParams) -> f64 {
        let dp = (self.pos[i][0] - self.pos[j][0]).powi(2) + (self.pos[i][1] - self.pos[j][1]).powi(2);
        let dc = (0..3).map(|c| (self.color[i][c] - self.color[j][c]).powi(2)).sum::<f64>();
        let mut k = 0.0;
        if p.w_app != 0.0 {
            k += p.w_app
                * (-dp / (2.0 * p.theta_alpha * p.theta_alpha) - dc / (2.0 * p.theta_beta * p.theta_beta)).exp();
        }
        if p.w_smooth != 0.0 {
            k += p.w_smooth * (-dp / (2.0 * p.theta_gamma * p.theta_gamma)).exp();
        }
        k
    }
}

fn softmax_rows(logits: &mut Array2<f64>) {
    for mut row in logits.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
}

/// Mean-field iterations `Q <- softmax(log U + K Q)`; the Potts energy
/// `sum_j k_ij (1 - Q_j(l))` differs from `-K Q` by a per-pixel constant.
/// Returns the final distribution.
pub fn mean_field(unary: &ProbField, rgb: &RgbImage, params: &CrfParams, iterations: usize) -> Result<Array2<f64>> {
    validate_unary(unary, rgb)?;
    let log_unary = unary.probs.mapv(|p| p.max(LOG_FLOOR).ln());
    let mut q = unary.probs.clone();
    if iterations == 0 || (params.w_app == 0.0 && params.w_smooth == 0.0) {
        return Ok(q);
    }
    let n = q.nrows();
    let feats = PixelFeatures::new(rgb);
    let dense = if n <= DENSE_KERNEL_MAX_PIXELS {
        let mut kmat = Array2::<f32>::zeros((n, n));
        for i in 0..n {
            for j in i + 1..n {
                let k = feats.kernel(i, j, params) as f32;
                kmat[[i, j]] = k;
                kmat[[j, i]] = k;
            }
        }
        Some(kmat)
    } else {
        None
    };
    for _ in 0..iterations {
        let messages: Array2<f64> = match &dense {
            Some(kmat) => kmat.dot(&q.mapv(|v| v as f32)).mapv(|v| v as f64),
            None => {
                let mut msg = Array2::zeros(q.dim());
                for i in 0..n {
                    let mut acc = vec![0.0; q.ncols()];
                    for j in 0..n {
                        if i == j {
                            continue;
                        }
                        let k = feats.kernel(i, j, params);
                        for (a, &qj) in acc.iter_mut().zip(q.row(j)) {
                            *a += k * qj;
                        }
                    }
                    msg.row_mut(i).assign(&ndarray::ArrayView1::from(&acc));
                }
                msg
            }
        };
        let mut logits = &log_unary + &messages;
        softmax_rows(&mut logits);
        q = logits;
    }
    Ok(q)
}

pub fn dense_crf_refine(unary: &ProbField, rgb: &RgbImage, params: &CrfParams, iterations: usize) -> Result<PixelMask> {
    let q = mean_field(unary, rgb, params, iterations)?;
    Ok(PixelMask { height: unary.height, width: unary.width, k: unary.channels() - 1, labels: argmax_rows(&q) })
}

fn downscale(rgb: &RgbImage, factor: u32) -> RgbImage {
    let w = rgb.width().div_ceil(factor);
    let h = rgb.height().div_ceil(factor);
    RgbImage::from_fn(w, h, |x, y| {
        let mut acc = [0u32; 3];
        let mut count = 0;
        for yy in y * factor..((y + 1) * factor).min(rgb.height()) {
            for xx in x * factor..((x + 1) * factor).min(rgb.width()) {
                let p = rgb.get_pixel(xx, yy);
                for c in 0..3 {
                    acc[c] += p[c] as u32;
                }
                count += 1;
            }
        }
        image::Rgb([(acc[0] / count) as u8, (acc[1] / count) as u8, (acc[2] / count) as u8])
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineParams {
    pub crf: CrfParams,
    pub iterations: usize,
    pub hardness: f64,
    /// Frames whose longer side exceeds this are refined at reduced resolution.
    pub max_side: usize,
}

impl Default for RefineParams {
    fn default() -> Self {
        RefineParams {
            crf: CrfParams::default(),
            iterations: DEFAULT_ITERATIONS,
            hardness: DEFAULT_HARDNESS,
            max_side: DEFAULT_MAX_SIDE,
        }
    }
}

/// Patch labels to a full-resolution pixel mask. Large frames are block-averaged
/// by an integer factor, refined, then upsampled by nearest neighbour.
pub fn refine_patch_labels(
    labels: &ClusterLabels,
    grid: &PatchGrid,
    rgb: &RgbImage,
    params: &RefineParams,
) -> Result<PixelMask> {
    let (height, width) = (rgb.height() as usize, rgb.width() as usize);
    let longer = height.max(width);
    let factor = longer.div_ceil(params.max_side.max(1)).max(1);
    if factor == 1 {
        let unary = unary_from_patches(labels, grid, (height, width), params.hardness)?;
        return dense_crf_refine(&unary, rgb, &params.crf, params.iterations);
    }
    let small = downscale(rgb, factor as u32);
    let (sh, sw) = (small.height() as usize, small.width() as usize);
    let unary = unary_from_patches(labels, grid, (sh, sw), params.hardness)?;
    let mut crf = params.crf;
    let f = factor as f64;
    crf.theta_alpha /= f;
    crf.theta_gamma /= f;
    let coarse = dense_crf_refine(&unary, &small, &crf, params.iterations)?;
    let mut full = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            full.push(coarse.labels[(y / factor) * sw + x / factor]);
        }
    }
    Ok(PixelMask { height, width, k: coarse.k, labels: full })
}
