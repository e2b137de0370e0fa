//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Runs on `make-fixture` outputs and in-memory generators only.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use soft_core::background::ForegroundMask;
use soft_core::baseline::key_kmeans_labels;
use soft_core::binding::hungarian_assign;
use soft_core::cluster::{eigengap_select, normalized_laplacian, spectral_cluster, ClusterParams};
use soft_core::crf::{dense_crf_refine, upsample_labels, CrfParams};
use soft_core::fixtures::{linear_bc_dataset, planted_block_affinity, two_block_scene};
use soft_core::linalg::symmetric_eigen;
use soft_core::metrics::{adjusted_rand_index, mean_segmentation_covering, score, MetricOptions};
use soft_core::policy::{bc_loss, least_squares_residual, train, Normalizer, PolicyMlp, TrainConfig};
use soft_core::rollout::attention_rollout;
use soft_core::{pnm, trace};

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn soft(args: &[&str]) -> u8 {
    soft_cli::main_with_args(std::iter::once("soft").chain(args.iter().copied()))
}

// 1 ------------------------------------------------------------------------

fn stochastic(n: usize, r: &mut ChaCha8Rng) -> Array2<f64> {
    let mut a = Array2::from_shape_fn((n, n), |_| r.random_range(0.0..1.0));
    for mut row in a.rows_mut() {
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    a
}

/// Triple-loop `(A_1 + I)(A_2 + I)...` on plain vectors.
fn naive_rollout(layers: &[Array2<f64>]) -> Vec<Vec<f64>> {
    let n = layers[0].nrows();
    let mut acc: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    for layer in layers {
        let mut next = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for m in 0..n {
                    s += acc[i][m] * (layer[[m, j]] + f64::from(u8::from(m == j)));
                }
                next[i][j] = s;
            }
        }
        acc = next;
    }
    acc
}

fn criterion_rollout() -> Outcome {
    let mut r = rng(1);
    let mut worst: f64 = 0.0;
    let mut worst_split: f64 = 0.0;
    for _ in 0..100 {
        let depth = r.random_range(1..=6);
        let n = r.random_range(2..=32);
        let layers: Vec<Array2<f64>> = (0..depth).map(|_| stochastic(n, &mut r)).collect();
        let fast = match attention_rollout(&layers) {
            Ok(m) => m.matrix,
            Err(e) => return check(false, format!("rollout failed: {e}")),
        };
        let slow = naive_rollout(&layers);
        for i in 0..n {
            for j in 0..n {
                worst = worst.max((fast[[i, j]] - slow[i][j]).abs());
            }
        }
        for s in 1..depth {
            let left = attention_rollout(&layers[..s]).unwrap().matrix;
            let right = attention_rollout(&layers[s..]).unwrap().matrix;
            let joined = left.dot(&right);
            let err = (&joined - &fast).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            worst_split = worst_split.max(err);
        }
    }
    check(
        worst <= 1e-6 && worst_split <= 1e-6,
        format!("100 stacks, max |fast - naive| = {worst:.2e}, max split error = {worst_split:.2e} (tol 1e-6)"),
    )
}

// 2 ------------------------------------------------------------------------

fn criterion_eigengap() -> Outcome {
    let params = ClusterParams::default();
    let mut details = vec![];
    let mut pass = true;
    for k in 2..=5 {
        let mut hits = 0;
        let mut bad_ari = 0;
        for trial in 0..100u64 {
            let (a, truth) = planted_block_affinity(k, 8, 0.9, 0.01, 0.05, 1000 * k as u64 + trial);
            let eig = symmetric_eigen(&normalized_laplacian(&a).unwrap()).unwrap();
            if eigengap_select(&eig.values, params.k_max) != k {
                continue;
            }
            hits += 1;
            let out = spectral_cluster(&a, &ForegroundMask::pass_through(a.nrows()), &params, trial).unwrap();
            let pred: Vec<i64> = out.labels.iter().map(|&l| l as i64).collect();
            if adjusted_rand_index(&pred, &truth).unwrap() != 1.0 {
                bad_ari += 1;
            }
        }
        pass &= hits >= 99 && bad_ari == 0;
        details.push(format!("k={k}: {hits}/100 exact, {bad_ari} with ARI < 1"));
    }
    check(pass, details.join("; "))
}

// 3 ------------------------------------------------------------------------

/// Minimum over all injections of the smaller side into the larger one.
fn enumerate_min(cost: &Array2<f64>) -> f64 {
    let (r, c) = cost.dim();
    let (small, large, at): (usize, usize, Box<dyn Fn(usize, usize) -> f64>) =
        if r <= c { (r, c, Box::new(|i, j| cost[[i, j]])) } else { (c, r, Box::new(|i, j| cost[[j, i]])) };
    fn go(
        i: usize,
        small: usize,
        large: usize,
        used: &mut Vec<bool>,
        acc: f64,
        at: &dyn Fn(usize, usize) -> f64,
        best: &mut f64,
    ) {
        if i == small {
            *best = best.min(acc);
            return;
        }
        for j in 0..large {
            if !used[j] {
                used[j] = true;
                go(i + 1, small, large, used, acc + at(i, j), at, best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(0, small, large, &mut vec![false; large], 0.0, at.as_ref(), &mut best);
    best
}

fn criterion_hungarian() -> Outcome {
    let mut r = rng(3);
    let mut mismatches = 0;
    let mut invalid = 0;
    for trial in 0..1000 {
        let rows = r.random_range(1..=7);
        let cols = r.random_range(1..=7);
        // Small ranges force ties; integers keep every sum exact.
        let hi = if trial % 2 == 0 { 4 } else { 1000 };
        let cost = Array2::from_shape_fn((rows, cols), |_| r.random_range(0..hi) as f64);
        let got = match hungarian_assign(&cost) {
            Ok(a) => a,
            Err(_) => {
                invalid += 1;
                continue;
            }
        };
        let total: f64 = got.pairs.iter().map(|&(i, j)| cost[[i, j]]).sum();
        let mut seen_r = vec![false; rows];
        let mut seen_c = vec![false; cols];
        let valid = got.pairs.len() == rows.min(cols)
            && got
                .pairs
                .iter()
                .all(|&(i, j)| !std::mem::replace(&mut seen_r[i], true) && !std::mem::replace(&mut seen_c[j], true));
        if !valid || total != got.cost {
            invalid += 1;
        }
        if total != enumerate_min(&cost) {
            mismatches += 1;
        }
    }
    check(
        mismatches == 0 && invalid == 0,
        format!("1000 matrices up to 7x7: {mismatches} cost mismatches, {invalid} invalid assignments"),
    )
}

// 4 ------------------------------------------------------------------------

fn choose2(n: u64) -> f64 {
    (n * n.saturating_sub(1) / 2) as f64
}

/// Adjusted Rand index straight from the contingency table.
fn ari_table(pred: &[i64], truth: &[i64]) -> f64 {
    let mut cells: BTreeMap<(i64, i64), u64> = BTreeMap::new();
    let mut rows: BTreeMap<i64, u64> = BTreeMap::new();
    let mut cols: BTreeMap<i64, u64> = BTreeMap::new();
    for (&p, &t) in pred.iter().zip(truth) {
        *cells.entry((p, t)).or_default() += 1;
        *rows.entry(p).or_default() += 1;
        *cols.entry(t).or_default() += 1;
    }
    let index: f64 = cells.values().map(|&v| choose2(v)).sum();
    let a: f64 = rows.values().map(|&v| choose2(v)).sum();
    let b: f64 = cols.values().map(|&v| choose2(v)).sum();
    let expected = a * b / choose2(pred.len() as u64);
    (index - expected) / ((a + b) / 2.0 - expected)
}

fn criterion_metrics() -> Outcome {
    let mut r = rng(4);
    let mut identical_ok = true;
    for _ in 0..50 {
        let n = r.random_range(2..200);
        let labels = r.random_range(1..8);
        let p: Vec<i64> = (0..n).map(|_| r.random_range(0..labels)).collect();
        let ari = adjusted_rand_index(&p, &p).unwrap();
        let msc_w = mean_segmentation_covering(&p, &p, true).unwrap();
        let msc_u = mean_segmentation_covering(&p, &p, false).unwrap();
        identical_ok &= ari == 1.0 && msc_w == 1.0 && msc_u == 1.0;
    }
    let constant = vec![0i64; 6];
    let split = vec![0, 0, 0, 1, 1, 1];
    let zero = adjusted_rand_index(&constant, &split).unwrap();
    let pred = [0, 0, 1, 1, 2, 2];
    let hand = adjusted_rand_index(&pred, &split).unwrap();
    let oracle = ari_table(&pred, &split);
    let ok = identical_ok && zero == 0.0 && (hand - oracle).abs() <= 1e-12 && (oracle - 8.0 / 33.0).abs() <= 1e-15;
    check(
        ok,
        format!("identical partitions all 1.0: {identical_ok}; constant vs split ARI = {zero}; hand example {hand:.15} vs table {oracle:.15}"),
    )
}

// 5 ------------------------------------------------------------------------

/// Per-row argmax; the last channel is background (`-1`).
fn unary_argmax(probs: &Array2<f64>) -> Vec<i32> {
    let last = probs.ncols() - 1;
    probs
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for c in 1..row.len() {
                if row[c] > row[best] {
                    best = c;
                }
            }
            if best == last {
                -1
            } else {
                best as i32
            }
        })
        .collect()
}

fn criterion_crf() -> Outcome {
    let small = two_block_scene(16, 0.1, 5);
    let unary = small.noisy_unary(0.8);
    let expected = unary_argmax(&unary.probs);
    let no_iter = dense_crf_refine(&unary, &small.rgb, &CrfParams::default(), 0).unwrap().labels;
    let zero_w = CrfParams { w_app: 0.0, w_smooth: 0.0, ..CrfParams::default() };
    let no_pair = dense_crf_refine(&unary, &small.rgb, &zero_w, 10).unwrap().labels;
    let identity_ok = no_iter == expected && no_pair == expected;

    let start = Instant::now();
    let big = two_block_scene(64, 0.1, 6);
    let refined = dense_crf_refine(&big.noisy_unary(0.8), &big.rgb, &CrfParams::default(), 10).unwrap().labels;
    let elapsed = start.elapsed();
    let correct = refined.iter().zip(&big.clean).filter(|(a, b)| a == b).count();
    let accuracy = correct as f64 / big.clean.len() as f64;
    check(
        identity_ok && accuracy >= 0.99 && elapsed < Duration::from_secs(10),
        format!("argmax identities hold: {identity_ok}; 64x64 accuracy {accuracy:.4} (need 0.99) in {elapsed:.2?}"),
    )
}

// 6 ------------------------------------------------------------------------

/// Mean squared residual of the affine least-squares fit via the normal
/// equations `(X^T X) B = X^T Y`.
fn normal_equations_residual(x: &Array2<f64>, y: &Array2<f64>) -> f64 {
    let (n, d) = x.dim();
    let a = DMatrix::from_fn(n, d + 1, |i, j| if j < d { x[[i, j]] } else { 1.0 });
    let b = DMatrix::from_fn(n, y.ncols(), |i, j| y[[i, j]]);
    let gram = a.transpose() * &a;
    let rhs = a.transpose() * &b;
    let coef = gram.cholesky().expect("full rank").solve(&rhs);
    let r = a * coef - b;
    r.iter().map(|v| v * v).sum::<f64>() / n as f64
}

fn max_gradient_error(data: &soft_core::policy::BcDataset) -> f64 {
    let mut p = PolicyMlp::init(&[32, 16, 16, 4], 61).unwrap();
    p.normalizer = Normalizer::fit(&data.inputs);
    for l in &mut p.layers {
        l.bias.mapv_inplace(|_| 0.05);
    }
    let (_, grads) = p.loss_and_gradients(data.inputs.view(), data.targets.view()).unwrap();
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    let mut compare = |fd: f64, an: f64| {
        worst = worst.max((fd - an).abs() / an.abs().max(1e-3));
    };
    for li in 0..p.layers.len() {
        let cols = p.layers[li].weights.ncols();
        for idx in 0..p.layers[li].weights.len() {
            let (r, c) = (idx / cols, idx % cols);
            let mut plus = p.clone();
            plus.layers[li].weights[[r, c]] += eps;
            let mut minus = p.clone();
            minus.layers[li].weights[[r, c]] -= eps;
            let fd = (bc_loss(&plus, data).unwrap() - bc_loss(&minus, data).unwrap()) / (2.0 * eps);
            compare(fd, grads[li].weights[[r, c]]);
        }
        for j in 0..p.layers[li].bias.len() {
            let mut plus = p.clone();
            plus.layers[li].bias[j] += eps;
            let mut minus = p.clone();
            minus.layers[li].bias[j] -= eps;
            let fd = (bc_loss(&plus, data).unwrap() - bc_loss(&minus, data).unwrap()) / (2.0 * eps);
            compare(fd, grads[li].bias[j]);
        }
    }
    worst
}

fn criterion_bc() -> Outcome {
    let start = Instant::now();
    let (data, _) = linear_bc_dataset(2000, 32, 4, 0.5, 7);
    let oracle = normal_equations_residual(&data.inputs, &data.targets);
    let svd = least_squares_residual(&data).unwrap();
    let outcome = match train(&data, &TrainConfig::default()) {
        Ok(o) => o,
        Err(e) => return check(false, format!("training failed: {e}")),
    };
    let (small, _) = linear_bc_dataset(64, 32, 4, 0.5, 8);
    let grad_err = max_gradient_error(&small);
    let elapsed = start.elapsed();
    let ratio = outcome.final_loss / oracle;
    check(
        ratio <= 1.1 && (svd - oracle).abs() <= 1e-8 * oracle && grad_err <= 1e-4 && elapsed < Duration::from_secs(60),
        format!(
            "loss {:.4e} vs normal-equations residual {oracle:.4e} (ratio {ratio:.4}, need 1.1); max relative gradient error {grad_err:.2e}; {elapsed:.1?}",
            outcome.final_loss
        ),
    )
}

// 7, 8 --------------------------------------------------------------------

fn mean_csv_column(path: &Path, column: usize) -> f64 {
    let text = fs::read_to_string(path).unwrap();
    let values: Vec<f64> = text.lines().skip(1).map(|l| l.split(',').nth(column).unwrap().parse().unwrap()).collect();
    values.iter().sum::<f64>() / values.len() as f64
}

fn baseline_ari(fixtures: &Path, objects: usize) -> f64 {
    let opts = MetricOptions::default();
    let mut total = 0.0;
    let mut count = 0;
    for i in 0..50 {
        let bundle = trace::load_trace(&fixtures.join(format!("scene_{i:03}.soft"))).unwrap();
        let (truth, w, h) = pnm::load_label_pgm(&fixtures.join("truth").join(format!("scene_{i:03}.pgm"))).unwrap();
        let tokens = key_kmeans_labels(&bundle, objects + 1, 50, 300, i);
        let pixels = upsample_labels(&tokens, &bundle.grid, h as usize, w as usize);
        let pred: Vec<i64> = pixels.iter().map(|&l| l as i64).collect();
        total += score(&pred, &truth, &opts).unwrap().ari;
        count += 1;
    }
    total / count as f64
}

fn criterion_end_to_end(root: &Path) -> Outcome {
    let start = Instant::now();
    let fx = root.join("fixtures");
    let seg = root.join("seg_a");
    let eval = root.join("eval.csv");
    let codes = [
        soft(&[
            "make-fixture",
            "--kind",
            "planted-objects",
            "--count",
            "50",
            "--seed",
            "0",
            "--out",
            fx.to_str().unwrap(),
        ]),
        soft(&[
            "segment",
            "--traces",
            fx.join("*.soft").to_str().unwrap(),
            "--jobs",
            "0",
            "--seed",
            "0",
            "--out",
            seg.to_str().unwrap(),
        ]),
        soft(&[
            "eval-seg",
            "--pred",
            seg.to_str().unwrap(),
            "--truth",
            fx.join("truth").to_str().unwrap(),
            "--out",
            eval.to_str().unwrap(),
        ]),
    ];
    let elapsed = start.elapsed();
    if codes.iter().any(|&c| c != 0) {
        return check(false, format!("CLI exit codes {codes:?}"));
    }
    let ari = mean_csv_column(&eval, 1);
    let msc = mean_csv_column(&eval, 2);
    let baseline = baseline_ari(&fx, 3);
    check(
        ari >= 0.95 && ari > baseline && elapsed < Duration::from_secs(120),
        format!("50 fixtures: mean ARI {ari:.4} (need 0.95), MSC {msc:.4}; key k-means baseline ARI {baseline:.4}; pipeline {elapsed:.1?}"),
    )
}

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect()
}

fn criterion_determinism(root: &Path) -> Outcome {
    let fx = root.join("fixtures");
    let seg_b = root.join("seg_b");
    let code = soft(&[
        "segment",
        "--traces",
        fx.join("*.soft").to_str().unwrap(),
        "--jobs",
        "3",
        "--seed",
        "0",
        "--out",
        seg_b.to_str().unwrap(),
    ]);
    if code != 0 {
        return check(false, format!("rerun exited {code}"));
    }
    let a = dir_bytes(&root.join("seg_a"));
    let b = dir_bytes(&seg_b);
    let differing: Vec<&String> = a.keys().filter(|k| a.get(*k) != b.get(*k)).collect();
    check(
        a.len() == b.len() && differing.is_empty() && a.len() == 50 * 3 + 2,
        format!("{} files compared across runs with 0 and 3 workers, {} differ", a.len(), differing.len()),
    )
}

fn main() {
    let root = tempfile::tempdir().expect("temp dir");
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("rollout oracle", Box::new(criterion_rollout)),
        ("eigengap planted partition", Box::new(criterion_eigengap)),
        ("hungarian exactness", Box::new(criterion_hungarian)),
        ("ARI/MSC ground truth", Box::new(criterion_metrics)),
        ("CRF contract", Box::new(criterion_crf)),
        ("BC realizability", Box::new(criterion_bc)),
        ("end-to-end planted objects", Box::new(|| criterion_end_to_end(root.path()))),
        ("segment determinism", Box::new(|| criterion_determinism(root.path()))),
    ];
    let mut failures = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(run))
            .unwrap_or_else(|_| check(false, "panicked".into()));
        let verdict = if outcome.pass { "PASS" } else { "FAIL" };
        println!("{verdict} criterion {}: {name} [{:.1?}] {}", i + 1, start.elapsed(), outcome.detail);
        failures += usize::from(!outcome.pass);
    }
    if failures > 0 {
        eprintln!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
