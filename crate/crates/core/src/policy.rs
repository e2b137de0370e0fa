//! Behavior-cloning action head: a ReLU MLP on bound slot vectors trained
//! with mini-batch Adam on the mean squared action error.

use std::fs;
use std::io::Read;
use std::path::Path;

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{atomic, seed, Error, Result};

pub const POLICY_MAGIC: &[u8; 4] = b"SPOL";
pub const POLICY_VERSION: u32 = 1;

/// Affine layer `y = W x + b`, `W` stored `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Per-dimension input standardization; `std` is floored so constant
/// dimensions pass through centered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Normalizer { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    pub fn fit(inputs: &Array2<f64>) -> Self {
        let n = inputs.nrows().max(1) as f64;
        let mean: Vec<f64> = inputs.sum_axis(Axis(0)).iter().map(|s| s / n).collect();
        let std = inputs
            .axis_iter(Axis(1))
            .zip(&mean)
            .map(|(col, m)| {
                let var = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
                if var.sqrt() > 1e-12 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Normalizer { mean, std }
    }

    pub fn apply(&self, inputs: ArrayView2<f64>) -> Array2<f64> {
        let mut out = inputs.to_owned();
        for mut row in out.rows_mut() {
            for ((x, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *x = (*x - m) / s;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyMlp {
    /// `[input, hidden..., output]`.
    pub dims: Vec<usize>,
    pub layers: Vec<Dense>,
    pub normalizer: Normalizer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BcDataset {
    /// One example per row.
    pub inputs: Array2<f64>,
    pub targets: Array2<f64>,
}

impl BcDataset {
    pub fn new(inputs: Array2<f64>, targets: Array2<f64>) -> Result<Self> {
        if inputs.nrows() != targets.nrows() {
            return Err(Error::DimMismatch { expected: inputs.nrows(), got: targets.nrows() });
        }
        if inputs.nrows() == 0 {
            return Err(Error::InvalidArgument("empty behavior-cloning dataset".into()));
        }
        Ok(BcDataset { inputs, targets })
    }

    pub fn from_rows(inputs: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<Self> {
        fn stack(rows: &[Vec<f64>]) -> Result<Array2<f64>> {
            let d = rows.first().map_or(0, Vec::len);
            if let Some(r) = rows.iter().find(|r| r.len() != d) {
                return Err(Error::DimMismatch { expected: d, got: r.len() });
            }
            Ok(Array2::from_shape_vec((rows.len(), d), rows.concat()).expect("sized"))
        }
        Self::new(stack(inputs)?, stack(targets)?)
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }
}

/// Activations of every layer for one batch; `acts[0]` is the normalized input.
struct Trace {
    acts: Vec<Array2<f64>>,
}

impl PolicyMlp {
    /// Fan-in-scaled uniform weights, zero biases.
    pub fn init(dims: &[usize], seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidArgument(format!("bad layer dims {dims:?}")));
        }
        let mut rng = seed::rng(seed, "policy-init", 0);
        let layers = dims
            .windows(2)
            .map(|w| {
                let bound = (6.0 / w[0] as f64).sqrt();
                Dense {
                    weights: Array2::from_shape_fn((w[1], w[0]), |_| rng.random_range(-bound..bound)),
                    bias: Array1::zeros(w[1]),
                }
            })
            .collect();
        Ok(PolicyMlp { dims: dims.to_vec(), layers, normalizer: Normalizer::identity(dims[0]) })
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("non-empty dims")
    }

    fn check_input(&self, dim: usize) -> Result<()> {
        if dim != self.input_dim() {
            return Err(Error::DimMismatch { expected: self.input_dim(), got: dim });
        }
        Ok(())
    }

    /// Forward on rows already standardized.
    fn run(&self, x: Array2<f64>) -> Trace {
        let mut acts = vec![x];
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = acts[i].dot(&layer.weights.t());
            z += &layer.bias;
            if i < last {
                z.mapv_inplace(|v| v.max(0.0));
            }
            acts.push(z);
        }
        Trace { acts }
    }

    pub fn forward_batch(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(inputs.ncols())?;
        Ok(self.run(self.normalizer.apply(inputs)).acts.pop().expect("output layer"))
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let view = ArrayView2::from_shape((1, input.len()), input).expect("row");
        Ok(self.forward_batch(view)?.into_raw_vec_and_offset().0)
    }

    /// Mean squared error and its gradient per layer `(dW, db)` on one batch.
    pub fn loss_and_gradients(&self, inputs: ArrayView2<f64>, targets: ArrayView2<f64>) -> Result<(f64, Vec<Dense>)> {
        self.check_input(inputs.ncols())?;
        if targets.ncols() != self.output_dim() || targets.nrows() != inputs.nrows() {
            return Err(Error::DimMismatch { expected: self.output_dim(), got: targets.ncols() });
        }
        let n = inputs.nrows() as f64;
        let trace = self.run(self.normalizer.apply(inputs));
        let diff = trace.acts.last().expect("output") - &targets;
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;

        let mut delta = diff * (2.0 / n);
        let mut grads = Vec::with_capacity(self.layers.len());
        for i in (0..self.layers.len()).rev() {
            let dw = delta.t().dot(&trace.acts[i]);
            let db = delta.sum_axis(Axis(0));
            if i > 0 {
                let mut back = delta.dot(&self.layers[i].weights);
                back.zip_mut_with(&trace.acts[i], |g, &a| {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                });
                delta = back;
            }
            grads.push(Dense { weights: dw, bias: db });
        }
        grads.reverse();
        Ok((loss, grads))
    }

    fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }
}

/// Mean over examples of the squared L2 action error.
pub fn bc_loss(policy: &PolicyMlp, data: &BcDataset) -> Result<f64> {
    let out = policy.forward_batch(data.inputs.view())?;
    if out.dim() != data.targets.dim() {
        return Err(Error::DimMismatch { expected: out.ncols(), got: data.targets.ncols() });
    }
    Ok((&out - &data.targets).iter().map(|d| d * d).sum::<f64>() / data.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { hidden: vec![256, 256], lr: 1e-3, batch: 64, epochs: 200, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: PolicyMlp,
    /// Mean mini-batch loss per epoch.
    pub losses: Vec<f64>,
    /// Full-dataset loss of the returned policy.
    pub final_loss: f64,
}

struct Adam {
    m: Vec<Dense>,
    v: Vec<Dense>,
    t: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    fn new(policy: &PolicyMlp) -> Self {
        let zeros: Vec<Dense> = policy
            .layers
            .iter()
            .map(|l| Dense { weights: Array2::zeros(l.weights.dim()), bias: Array1::zeros(l.bias.len()) })
            .collect();
        Adam { m: zeros.clone(), v: zeros, t: 0 }
    }

    fn step(&mut self, policy: &mut PolicyMlp, grads: &[Dense], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        };
        for (((layer, g), m), v) in policy.layers.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            ndarray::Zip::from(&mut layer.weights)
                .and(&mut m.weights)
                .and(&mut v.weights)
                .and(&g.weights)
                .for_each(|p, m, v, &g| update(p, m, v, g));
            ndarray::Zip::from(&mut layer.bias)
                .and(&mut m.bias)
                .and(&mut v.bias)
                .and(&g.bias)
                .for_each(|p, m, v, &g| update(p, m, v, g));
        }
    }
}

pub fn train(data: &BcDataset, config: &TrainConfig) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty behavior-cloning dataset".into()));
    }
    if config.batch == 0 || !config.lr.is_finite() || config.lr <= 0.0 {
        return Err(Error::InvalidArgument("batch must be >= 1 and lr > 0".into()));
    }
    let mut dims = vec![data.inputs.ncols()];
    dims.extend(&config.hidden);
    dims.push(data.targets.ncols());
    let mut policy = PolicyMlp::init(&dims, config.seed)?;
    policy.normalizer = Normalizer::fit(&data.inputs);

    let mut adam = Adam::new(&policy);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut seed::rng(config.seed, "policy-shuffle", epoch as u64));
        let mut total = 0.0;
        for chunk in order.chunks(config.batch) {
            let x = data.inputs.select(Axis(0), chunk);
            let y = data.targets.select(Axis(0), chunk);
            let (loss, grads) = policy.loss_and_gradients(x.view(), y.view())?;
            if !loss.is_finite() {
                return Err(Error::Diverged(epoch));
            }
            total += loss * chunk.len() as f64;
            adam.step(&mut policy, &grads, config.lr);
        }
        losses.push(total / data.len() as f64);
    }
    let final_loss = bc_loss(&policy, data)?;
    if !final_loss.is_finite() {
        return Err(Error::Diverged(config.epochs));
    }
    Ok(TrainOutcome { policy, losses, final_loss })
}

/// Minimum mean squared error of an affine map `x -> W x + b` on the dataset.
pub fn least_squares_residual(data: &BcDataset) -> Result<f64> {
    let (n, d) = data.inputs.dim();
    let a = DMatrix::from_fn(n, d + 1, |i, j| if j < d { data.inputs[[i, j]] } else { 1.0 });
    let b = DMatrix::from_fn(n, data.targets.ncols(), |i, j| data.targets[[i, j]]);
    let x = a.clone().svd(true, true).solve(&b, 1e-12).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let r = a * x - b;
    Ok(r.iter().map(|v| v * v).sum::<f64>() / n as f64)
}

#[derive(Serialize, Deserialize)]
struct PolicyHeader {
    dims: Vec<usize>,
    normalizer: Normalizer,
}

impl PolicyMlp {
    /// Magic | u32 version | u32 header length | JSON header | f32 LE
    /// payload (per layer: weights row-major, then bias).
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header =
            serde_json::to_vec(&PolicyHeader { dims: self.dims.clone(), normalizer: self.normalizer.clone() })?;
        let mut out = Vec::with_capacity(12 + header.len() + 4 * self.parameter_count());
        out.extend_from_slice(POLICY_MAGIC);
        out.extend_from_slice(&POLICY_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for layer in &self.layers {
            for &w in layer.weights.iter().chain(layer.bias.iter()) {
                out.extend_from_slice(&(w as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let mut word = [0u8; 4];
        bytes.read_exact(&mut word).map_err(|_| Error::Truncated)?;
        if &word != POLICY_MAGIC {
            return Err(Error::BadMagic);
        }
        bytes.read_exact(&mut word).map_err(|_| Error::Truncated)?;
        let version = u32::from_le_bytes(word);
        if version != POLICY_VERSION {
            return Err(Error::VersionMismatch(version));
        }
        bytes.read_exact(&mut word).map_err(|_| Error::Truncated)?;
        let len = u32::from_le_bytes(word) as usize;
        if bytes.len() < len {
            return Err(Error::Truncated);
        }
        let header: PolicyHeader = serde_json::from_slice(&bytes[..len]).map_err(|e| Error::Header(e.to_string()))?;
        let mut policy = PolicyMlp::init(&header.dims, 0)?;
        if header.normalizer.mean.len() != header.dims[0] || header.normalizer.std.len() != header.dims[0] {
            return Err(Error::Header("normalizer width does not match input dim".into()));
        }
        policy.normalizer = header.normalizer;
        let mut payload =
            bytes[len..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64);
        let expected = 4 * policy.parameter_count();
        if bytes.len() - len < expected {
            return Err(Error::Truncated);
        }
        if bytes.len() - len > expected {
            return Err(Error::Invalid("trailing bytes after policy payload".into()));
        }
        for layer in &mut policy.layers {
            for w in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
                *w = payload.next().expect("length checked");
            }
        }
        Ok(policy)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Copy with weights rounded through f32, as a save/load cycle would.
    pub fn rounded(&self) -> Self {
        let mut p = self.clone();
        for layer in &mut p.layers {
            layer.weights.mapv_inplace(|w| w as f32 as f64);
            layer.bias.mapv_inplace(|w| w as f32 as f64);
        }
        p
    }
}

/// `epoch,loss` CSV with a header row.
pub fn loss_curve_csv(losses: &[f64]) -> String {
    let mut out = String::from("epoch,loss\n");
    for (i, l) in losses.iter().enumerate() {
        out.push_str(&format!("{},{}\n", i + 1, l));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_data(n: usize, d: usize, a: usize, seed: u64) -> BcDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        BcDataset::new(
            Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0)),
            Array2::from_shape_fn((n, a), |_| rng.random_range(-1.0..1.0)),
        )
        .unwrap()
    }

    #[test]
    fn zero_weights_output_bias() {
        let mut p = PolicyMlp::init(&[3, 4, 2], 1).unwrap();
        for l in &mut p.layers {
            l.weights.fill(0.0);
        }
        p.layers[1].bias = array![0.5, -2.0];
        assert_eq!(p.forward(&[9.0, -1.0, 3.0]).unwrap(), vec![0.5, -2.0]);
    }

    #[test]
    fn identity_single_layer() {
        let mut p = PolicyMlp::init(&[3, 3], 1).unwrap();
        p.layers[0].weights = Array2::eye(3);
        assert_eq!(p.forward(&[1.0, -2.0, 3.5]).unwrap(), vec![1.0, -2.0, 3.5]);
    }

    #[test]
    fn hand_forward_two_three_one() {
        let mut p = PolicyMlp::init(&[2, 3, 1], 1).unwrap();
        p.layers[0].weights = array![[1.0, 0.0], [0.0, 1.0], [1.0, -1.0]];
        p.layers[0].bias = array![0.0, -3.0, 0.5];
        p.layers[1].weights = array![[1.0, 2.0, 3.0]];
        p.layers[1].bias = array![0.25];
        // hidden = relu([1, -1, -0.5]) = [1, 0, 0]; out = 1 + 0.25
        assert_eq!(p.forward(&[1.0, 2.0]).unwrap(), vec![1.25]);
    }

    #[test]
    fn loss_of_single_example() {
        let mut p = PolicyMlp::init(&[1, 2], 1).unwrap();
        p.layers[0].weights.fill(0.0);
        let data = BcDataset::new(array![[7.0]], array![[3.0, 4.0]]).unwrap();
        assert_eq!(bc_loss(&p, &data).unwrap(), 25.0);
    }

    #[test]
    fn loss_zero_on_own_outputs() {
        let p = PolicyMlp::init(&[4, 5, 2], 3).unwrap();
        let inputs = random_data(10, 4, 2, 5).inputs;
        let targets = p.forward_batch(inputs.view()).unwrap();
        assert_eq!(bc_loss(&p, &BcDataset::new(inputs, targets).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn loss_matches_double_loop() {
        let p = PolicyMlp::init(&[4, 6, 3], 9).unwrap();
        let data = random_data(17, 4, 3, 10);
        let mut total = 0.0;
        for i in 0..data.len() {
            let out = p.forward(data.inputs.row(i).as_slice().unwrap()).unwrap();
            for j in 0..3 {
                total += (out[j] - data.targets[[i, j]]).powi(2);
            }
        }
        assert!((bc_loss(&p, &data).unwrap() - total / 17.0).abs() < 1e-10);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let data = random_data(12, 3, 2, 21);
        let mut p = PolicyMlp::init(&[3, 5, 4, 2], 22).unwrap();
        p.normalizer = Normalizer::fit(&data.inputs);
        for l in &mut p.layers {
            l.bias.mapv_inplace(|_| 0.1);
        }
        let (_, grads) = p.loss_and_gradients(data.inputs.view(), data.targets.view()).unwrap();
        let eps = 1e-4;
        for li in 0..p.layers.len() {
            for idx in 0..p.layers[li].weights.len() {
                let (r, c) = (idx / p.layers[li].weights.ncols(), idx % p.layers[li].weights.ncols());
                let mut plus = p.clone();
                plus.layers[li].weights[[r, c]] += eps;
                let mut minus = p.clone();
                minus.layers[li].weights[[r, c]] -= eps;
                let fd = (bc_loss(&plus, &data).unwrap() - bc_loss(&minus, &data).unwrap()) / (2.0 * eps);
                let an = grads[li].weights[[r, c]];
                assert!((fd - an).abs() <= 1e-4 * an.abs().max(1e-3), "layer {li} ({r},{c}): {fd} vs {an}");
            }
            for j in 0..p.layers[li].bias.len() {
                let mut plus = p.clone();
                plus.layers[li].bias[j] += eps;
                let mut minus = p.clone();
                minus.layers[li].bias[j] -= eps;
                let fd = (bc_loss(&plus, &data).unwrap() - bc_loss(&minus, &data).unwrap()) / (2.0 * eps);
                let an = grads[li].bias[j];
                assert!((fd - an).abs() <= 1e-4 * an.abs().max(1e-3));
            }
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let data = random_data(8, 3, 2, 1);
        let config = TrainConfig { hidden: vec![4], epochs: 0, seed: 5, ..TrainConfig::default() };
        let out = train(&data, &config).unwrap();
        let init = PolicyMlp::init(&[3, 4, 2], 5).unwrap();
        assert_eq!(out.policy.layers, init.layers);
        assert!(out.losses.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let data = random_data(40, 3, 2, 2);
        let config = TrainConfig { hidden: vec![8], epochs: 5, batch: 7, seed: 11, ..TrainConfig::default() };
        let a = train(&data, &config).unwrap();
        let b = train(&data, &config).unwrap();
        assert_eq!(a.policy, b.policy);
        assert_eq!(a.losses, b.losses);
    }

    #[test]
    fn divergence_is_reported() {
        let mut data = random_data(8, 2, 1, 3);
        data.targets[[0, 0]] = f64::INFINITY;
        let config = TrainConfig { hidden: vec![4], epochs: 3, ..TrainConfig::default() };
        assert!(matches!(train(&data, &config), Err(Error::Diverged(0))));
    }

    #[test]
    fn dimension_mismatch() {
        let p = PolicyMlp::init(&[3, 2], 0).unwrap();
        assert!(p.forward(&[1.0]).is_err());
    }

    #[test]
    fn persistence_round_trip() {
        let data = random_data(20, 3, 2, 4);
        let config = TrainConfig { hidden: vec![5], epochs: 2, ..TrainConfig::default() };
        let p = train(&data, &config).unwrap().policy;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.bin");
        p.save(&path).unwrap();
        let back = PolicyMlp::load(&path).unwrap();
        assert_eq!(back, p.rounded());
        let mut bytes = fs::read(&path).unwrap();
        bytes.pop();
        assert!(matches!(PolicyMlp::from_bytes(&bytes), Err(Error::Truncated)));
        bytes[0] = b'X';
        assert!(matches!(PolicyMlp::from_bytes(&bytes), Err(Error::BadMagic)));
    }

    #[test]
    fn least_squares_exact_fit_is_zero() {
        let x = random_data(30, 3, 1, 8).inputs;
        let y = x.dot(&array![[1.0, -2.0], [0.5, 0.0], [3.0, 1.0]]) + 0.75;
        let r = least_squares_residual(&BcDataset::new(x, y).unwrap()).unwrap();
        assert!(r < 1e-20);
    }

    #[test]
    fn csv_format() {
        assert_eq!(loss_curve_csv(&[0.5, 0.25]), "epoch,loss\n1,0.5\n2,0.25\n");
    }

    proptest! {
        #[test]
        fn zero_bias_relu_is_positively_homogeneous(
            seed in any::<u64>(),
            c in 0.01f64..100.0,
            x in proptest::collection::vec(-10.0f64..10.0, 4),
        ) {
            // Power-of-two scales keep every product exact.
            let c = 2f64.powi(c.log2().round() as i32);
            let p = PolicyMlp::init(&[4, 6, 3], seed).unwrap();
            let fx = p.forward(&x).unwrap();
            let cx: Vec<f64> = x.iter().map(|v| c * v).collect();
            let fcx = p.forward(&cx).unwrap();
            for (a, b) in fx.iter().zip(&fcx) {
                prop_assert_eq!(c * a, *b);
            }
        }
    }
}
