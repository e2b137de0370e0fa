//! Synthetic generators with known ground truth: planted-object traces,
//! planted block affinities, two-block CRF scenes and linear behavior-cloning
//! data.

use image::{Rgb, RgbImage};
use ndarray::{Array1, Array2};
use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::crf::{upsample_labels, ProbField};
use crate::policy::BcDataset;
use crate::trace::{head_average, Demonstration, LayerAttention, PatchGrid, TraceBundle};
use crate::{seed, Result};

/// Object key classes shared by every planted scene.
pub const PLANTED_CLASSES: usize = 4;
const DIRECTIONS_SEED: u64 = 0x5eed_d1ec;

const OBJECT_COLORS: [[u8; 3]; 6] =
    [[220, 40, 40], [40, 170, 60], [40, 70, 220], [230, 200, 30], [170, 50, 200], [30, 200, 210]];

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedParams {
    pub rows: usize,
    pub cols: usize,
    pub patch_px: usize,
    pub objects: usize,
    /// Inclusive range of object side lengths in tokens.
    pub min_side: usize,
    pub max_side: usize,
    /// Minimum number of background tokens between two objects.
    pub gap: usize,
    pub layers: usize,
    pub heads: usize,
    pub feat_dim: usize,
    /// Standard deviation of attention-logit noise.
    pub logit_noise: f64,
    /// Per-dimension standard deviation of key noise.
    pub key_noise: f64,
    /// Objects 0 and 1 are two instances of one class (identical key prototype).
    pub shared_class: bool,
    /// Fixes object classes and colors across scenes (one demonstration).
    pub appearance_seed: Option<u64>,
}

impl Default for PlantedParams {
    fn default() -> Self {
        PlantedParams {
            rows: 14,
            cols: 14,
            patch_px: 4,
            objects: 3,
            min_side: 3,
            max_side: 5,
            gap: 2,
            layers: 4,
            heads: 2,
            feat_dim: 16,
            logit_noise: 0.5,
            key_noise: 0.15,
            shared_class: true,
            appearance_seed: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlantedScene {
    pub bundle: TraceBundle,
    /// Per patch token: object index or `-1`.
    pub token_truth: Vec<i64>,
    /// Per rgb pixel, row-major.
    pub pixel_truth: Vec<i64>,
    /// Mean key feature of each object's tokens, in object order.
    pub object_means: Vec<Vec<f64>>,
    pub object_classes: Vec<usize>,
}

fn unit_vector(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

struct Directions {
    fg: Vec<f64>,
    bg: Vec<f64>,
    classes: Vec<Vec<f64>>,
    textures: Vec<Vec<f64>>,
}

fn directions(dim: usize) -> Directions {
    let mut rng = seed::rng(DIRECTIONS_SEED, "planted-directions", dim as u64);
    Directions {
        fg: unit_vector(dim, &mut rng),
        bg: unit_vector(dim, &mut rng),
        classes: (0..PLANTED_CLASSES).map(|_| unit_vector(dim, &mut rng)).collect(),
        textures: (0..3).map(|_| unit_vector(dim, &mut rng)).collect(),
    }
}

/// Non-overlapping rectangles `(r0, c0, h, w)` separated by `gap` tokens.
fn place_objects(p: &PlantedParams, rng: &mut ChaCha8Rng) -> Vec<(usize, usize, usize, usize)> {
    'retry: loop {
        let mut boxes: Vec<(usize, usize, usize, usize)> = vec![];
        for _ in 0..p.objects {
            let mut placed = false;
            for _ in 0..200 {
                let h = rng.random_range(p.min_side..=p.max_side).min(p.rows);
                let w = rng.random_range(p.min_side..=p.max_side).min(p.cols);
                let r0 = rng.random_range(0..=p.rows - h);
                let c0 = rng.random_range(0..=p.cols - w);
                let clear = boxes.iter().all(|&(br, bc, bh, bw)| {
                    r0 >= br + bh + p.gap || br >= r0 + h + p.gap || c0 >= bc + bw + p.gap || bc >= c0 + w + p.gap
                });
                if clear {
                    boxes.push((r0, c0, h, w));
                    placed = true;
                    break;
                }
            }
            if !placed {
                continue 'retry;
            }
        }
        return boxes;
    }
}

fn softmax(logits: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        sum += *l;
    }
    for l in logits.iter_mut() {
        *l /= sum;
    }
}

/// A scene of `objects` rectangular objects on a textured background.
///
/// Attention: object tokens attend to their own object, background tokens to
/// their 8-neighborhood and the CLS token to all object tokens. Keys: a shared
/// foreground or background direction plus a class (objects) or texture
/// (background) direction plus isotropic noise.
pub fn planted_objects(p: &PlantedParams, scene_seed: u64) -> PlantedScene {
    let grid = PatchGrid::new(p.rows, p.cols, p.patch_px).expect("valid planted grid");
    let m = grid.token_count();
    let n = m + 1;
    let dirs = directions(p.feat_dim);
    let mut layout_rng = seed::rng(scene_seed, "planted-layout", 0);
    let boxes = place_objects(p, &mut layout_rng);

    let mut token_truth = vec![-1i64; m];
    for (o, &(r0, c0, h, w)) in boxes.iter().enumerate() {
        for r in r0..r0 + h {
            for c in c0..c0 + w {
                token_truth[r * p.cols + c] = o as i64;
            }
        }
    }

    let mut look_rng = seed::rng(p.appearance_seed.unwrap_or(scene_seed), "planted-appearance", 0);
    let order = index::sample(&mut look_rng, PLANTED_CLASSES, p.objects.min(PLANTED_CLASSES)).into_vec();
    let object_classes: Vec<usize> =
        (0..p.objects).map(|o| if p.shared_class && o == 1 { order[0] } else { order[o % order.len()] }).collect();
    let color_order = index::sample(&mut look_rng, OBJECT_COLORS.len(), p.objects.min(OBJECT_COLORS.len())).into_vec();

    // Attention.
    let mut att_rng = seed::rng(scene_seed, "planted-attention", 0);
    let noise = Normal::new(0.0, p.logit_noise.max(1e-12)).expect("finite sigma");
    let near = |a: usize, b: usize| {
        let (ra, ca) = grid.position(a);
        let (rb, cb) = grid.position(b);
        ra.abs_diff(rb) <= 1 && ca.abs_diff(cb) <= 1
    };
    let mut layers = Vec::with_capacity(p.layers);
    for l in 0..p.layers {
        let mut heads = Vec::with_capacity(p.heads);
        for _ in 0..p.heads {
            let mut mat = Array2::<f32>::zeros((n, n));
            let mut row = vec![0.0f64; n];
            for q in 0..n {
                for (k, v) in row.iter_mut().enumerate() {
                    let base = if q == 0 {
                        match k {
                            0 => 1.0,
                            _ if token_truth[k - 1] >= 0 => 4.0,
                            _ => 0.0,
                        }
                    } else if k == 0 {
                        1.0
                    } else {
                        let (tq, tk) = (token_truth[q - 1], token_truth[k - 1]);
                        if tq >= 0 {
                            if tq == tk {
                                3.5
                            } else if near(q - 1, k - 1) {
                                1.0
                            } else {
                                0.0
                            }
                        } else if near(q - 1, k - 1) {
                            3.0
                        } else {
                            0.0
                        }
                    };
                    *v = base + noise.sample(&mut att_rng);
                }
                softmax(&mut row);
                // Renormalize in f32 so stored rows stay stochastic.
                let row32: Vec<f32> = row.iter().map(|&v| v as f32).collect();
                let s: f32 = row32.iter().sum();
                for (k, v) in row32.iter().enumerate() {
                    mat[[q, k]] = v / s;
                }
            }
            heads.push(mat);
        }
        layers.push(LayerAttention { layer_index: l, heads });
    }

    // Keys.
    let mut key_rng = seed::rng(scene_seed, "planted-keys", 0);
    let key_noise = Normal::new(0.0, p.key_noise.max(1e-12)).expect("finite sigma");
    let d = p.feat_dim;
    let mut keys = Array2::<f32>::zeros((n, d));
    for (j, &v) in dirs.fg.iter().enumerate() {
        keys[[0, j]] = v as f32;
    }
    for t in 0..m {
        let (r, c) = grid.position(t);
        let (base, extra, scale) = match token_truth[t] {
            o if o >= 0 => (&dirs.fg, &dirs.classes[object_classes[o as usize]], 0.8),
            _ => (&dirs.bg, &dirs.textures[(r / 3 + c / 3) % 3], 0.4),
        };
        for j in 0..d {
            keys[[t + 1, j]] = (base[j] + scale * extra[j] + key_noise.sample(&mut key_rng)) as f32;
        }
    }
    let object_means = (0..p.objects)
        .map(|o| {
            let members: Vec<usize> = (0..m).filter(|&t| token_truth[t] == o as i64).collect();
            (0..d)
                .map(|j| members.iter().map(|&t| keys[[t + 1, j]] as f64).sum::<f64>() / members.len() as f64)
                .collect()
        })
        .collect();

    // RGB: flat object colors on a striped, noisy gray background.
    let (h_px, w_px) = (p.rows * p.patch_px, p.cols * p.patch_px);
    let token_i32: Vec<i32> = token_truth.iter().map(|&t| t as i32).collect();
    let pixel_i32 = upsample_labels(&token_i32, &grid, h_px, w_px);
    let mut px_rng = seed::rng(scene_seed, "planted-rgb", 0);
    let rgb = RgbImage::from_fn(w_px as u32, h_px as u32, |x, y| {
        let label = pixel_i32[y as usize * w_px + x as usize];
        let jitter: i32 = px_rng.random_range(-8..=8);
        let base = if label >= 0 {
            OBJECT_COLORS[color_order[label as usize % color_order.len()]]
        } else {
            let stripe = if (x / 3 + y / 5) % 2 == 0 { 120 } else { 96 };
            [stripe, stripe, stripe + 10]
        };
        Rgb(base.map(|c| (c as i32 + jitter).clamp(0, 255) as u8))
    });

    let cls_attention = {
        let avg = head_average(layers.last().expect("at least one layer"));
        (1..n).map(|k| avg[[0, k]] as f32).collect()
    };
    let bundle = TraceBundle::new(grid, layers, keys, cls_attention, rgb).expect("planted bundle is valid");
    PlantedScene {
        bundle,
        token_truth,
        pixel_truth: pixel_i32.into_iter().map(i64::from).collect(),
        object_means,
        object_classes,
    }
}

/// `k` blocks of `per_block` tokens: within-block affinity `within`, across
/// `across`, each entry perturbed by `jitter * U(-1, 1)` and clamped at 0.
/// Symmetric with zero diagonal.
pub fn planted_block_affinity(
    k: usize,
    per_block: usize,
    within: f64,
    across: f64,
    jitter: f64,
    seed: u64,
) -> (Array2<f64>, Vec<i64>) {
    let n = k * per_block;
    let truth: Vec<i64> = (0..n).map(|i| (i / per_block) as i64).collect();
    let mut rng = crate::seed::rng(seed, "planted-blocks", 0);
    let mut a = Array2::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let base = if truth[i] == truth[j] { within } else { across };
            let v = if jitter > 0.0 { base + jitter * rng.random_range(-1.0..1.0) } else { base };
            a[[i, j]] = v.max(0.0);
            a[[j, i]] = v.max(0.0);
        }
    }
    (a, truth)
}

#[derive(Debug, Clone)]
pub struct TwoBlockScene {
    pub rgb: RgbImage,
    /// Left half `0`, right half `1`.
    pub clean: Vec<i32>,
    /// `clean` with a fraction of pixels flipped to another of the 3 labels.
    pub noisy: Vec<i32>,
}

impl TwoBlockScene {
    /// Three channels (two blocks plus background); the noisy label gets
    /// `hardness`, the others split the rest.
    pub fn noisy_unary(&self, hardness: f64) -> ProbField {
        let (w, h) = (self.rgb.width() as usize, self.rgb.height() as usize);
        let mut probs = Array2::from_elem((w * h, 3), (1.0 - hardness) / 2.0);
        for (i, &l) in self.noisy.iter().enumerate() {
            probs[[i, l as usize]] = hardness;
        }
        ProbField { height: h, width: w, probs }
    }
}

/// `size x size` image split into a red left half and a blue right half.
pub fn two_block_scene(size: usize, noise_frac: f64, seed: u64) -> TwoBlockScene {
    let mut rng = crate::seed::rng(seed, "two-block", 0);
    let half = size / 2;
    let clean: Vec<i32> = (0..size * size).map(|i| i32::from(i % size >= half)).collect();
    let rgb = RgbImage::from_fn(size as u32, size as u32, |x, _| {
        let j: i32 = rng.random_range(-6..=6);
        let base = if (x as usize) < half { [200, 40, 40] } else { [40, 60, 200] };
        Rgb(base.map(|c: i32| (c + j).clamp(0, 255) as u8))
    });
    let flips = (noise_frac * (size * size) as f64).round() as usize;
    let mut noisy = clean.clone();
    for i in index::sample(&mut rng, size * size, flips.min(size * size)) {
        noisy[i] = (clean[i] + rng.random_range(1..=2)) % 3;
    }
    TwoBlockScene { rgb, clean, noisy }
}

/// `u = W x + b + noise` with `x ~ N(0, I)`, `W ~ N(0, 1 / in_dim)`,
/// `b ~ N(0, 1)`. Returns the dataset and `W`.
pub fn linear_bc_dataset(n: usize, in_dim: usize, out_dim: usize, noise: f64, seed: u64) -> (BcDataset, Array2<f64>) {
    let mut rng = crate::seed::rng(seed, "linear-bc", 0);
    let w_scale = 1.0 / (in_dim as f64).sqrt();
    let w = Array2::from_shape_fn((out_dim, in_dim), |_| -> f64 {
        w_scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
    });
    let b: Array1<f64> = Array1::from_shape_fn(out_dim, |_| StandardNormal.sample(&mut rng));
    let x = Array2::from_shape_fn((n, in_dim), |_| StandardNormal.sample(&mut rng));
    let mut u = x.dot(&w.t()) + &b;
    if noise > 0.0 {
        let dist = Normal::new(0.0, noise).expect("finite sigma");
        u.mapv_inplace(|v| v + dist.sample(&mut rng));
    }
    (BcDataset::new(x, u).expect("non-empty"), w)
}

/// Random linear action map `A x (objects * feat_dim)`.
pub fn linear_action_map(actions: usize, input: usize, seed: u64) -> Array2<f64> {
    let mut rng = crate::seed::rng(seed, "linear-action-map", 0);
    let scale = 1.0 / (input as f64).sqrt();
    Array2::from_shape_fn((actions, input), |_| {
        scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
    })
}

/// Demonstration of planted scenes sharing one appearance; each action is
/// `W` applied to the concatenated planted object means.
pub fn linear_bc_demonstration(
    params: &PlantedParams,
    frames: usize,
    w: &Array2<f64>,
    seed: u64,
) -> Result<(Demonstration, Vec<PlantedScene>)> {
    let p = PlantedParams { appearance_seed: Some(crate::seed::derive(seed, "demo-appearance", 0)), ..params.clone() };
    let scenes: Vec<PlantedScene> =
        (0..frames).map(|f| planted_objects(&p, crate::seed::derive(seed, "demo-frame", f as u64))).collect();
    let actions = scenes
        .iter()
        .map(|s| {
            let x: Array1<f64> = s.object_means.iter().flatten().copied().collect();
            if x.len() != w.ncols() {
                return Err(crate::Error::DimMismatch { expected: w.ncols(), got: x.len() });
            }
            Ok(w.dot(&x).to_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    let demo = Demonstration::new(scenes.iter().map(|s| s.bundle.clone()).collect(), actions)?;
    Ok((demo, scenes))
}
