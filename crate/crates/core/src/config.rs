//! Flat `key = value` run configuration with range validation.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! rejected. `bind_gate = none` disables the binding distance gate.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::background::{DEFAULT_CLS_QUANTILE, DEFAULT_REFERENCE_FRAMES, DEFAULT_THRESHOLD};
use crate::cluster::ClusterParams;
use crate::crf::RefineParams;
use crate::policy::TrainConfig;
use crate::rollout::{DEFAULT_KEEP_FRACTION, DEFAULT_SIGMA};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub keep_fraction: f64,
    pub sigma_spatial: f64,
    pub cls_quantile: f64,
    pub bg_threshold: f64,
    pub bg_removal: bool,
    pub reference_frames: usize,
    pub cluster: ClusterParams,
    pub refine: RefineParams,
    pub bind_gate: Option<f64>,
    pub append_centroid: bool,
    pub policy: TrainConfig,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            keep_fraction: DEFAULT_KEEP_FRACTION,
            sigma_spatial: DEFAULT_SIGMA,
            cls_quantile: DEFAULT_CLS_QUANTILE,
            bg_threshold: DEFAULT_THRESHOLD,
            bg_removal: true,
            reference_frames: DEFAULT_REFERENCE_FRAMES,
            cluster: ClusterParams::default(),
            refine: RefineParams::default(),
            bind_gate: None,
            append_centroid: false,
            policy: TrainConfig::default(),
            seed: 0,
        }
    }
}

pub const KEYS: &[&str] = &[
    "keep_fraction",
    "sigma_spatial",
    "cls_quantile",
    "bg_threshold",
    "bg_removal",
    "reference_frames",
    "k_max",
    "min_cluster_tokens",
    "kmeans_restarts",
    "kmeans_max_iter",
    "crf_theta_alpha",
    "crf_theta_beta",
    "crf_theta_gamma",
    "crf_w_app",
    "crf_w_smooth",
    "crf_iterations",
    "crf_hardness",
    "crf_max_side",
    "bind_gate",
    "append_centroid",
    "policy_hidden",
    "policy_lr",
    "policy_batch",
    "policy_epochs",
    "seed",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

fn check(ok: bool, key: &str, rule: &str, value: impl std::fmt::Display) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!("{key} must be {rule}, got {value}")))
    }
}

impl PipelineConfig {
    /// Applies one `key = value` pair; the value is validated later by
    /// [`PipelineConfig::validate`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "keep_fraction" => self.keep_fraction = parse(key, v)?,
            "sigma_spatial" => self.sigma_spatial = parse(key, v)?,
            "cls_quantile" => self.cls_quantile = parse(key, v)?,
            "bg_threshold" => self.bg_threshold = parse(key, v)?,
            "bg_removal" => self.bg_removal = parse_bool(key, v)?,
            "reference_frames" => self.reference_frames = parse(key, v)?,
            "k_max" => self.cluster.k_max = parse(key, v)?,
            "min_cluster_tokens" => self.cluster.min_cluster_tokens = parse(key, v)?,
            "kmeans_restarts" => self.cluster.restarts = parse(key, v)?,
            "kmeans_max_iter" => self.cluster.max_iter = parse(key, v)?,
            "crf_theta_alpha" => self.refine.crf.theta_alpha = parse(key, v)?,
            "crf_theta_beta" => self.refine.crf.theta_beta = parse(key, v)?,
            "crf_theta_gamma" => self.refine.crf.theta_gamma = parse(key, v)?,
            "crf_w_app" => self.refine.crf.w_app = parse(key, v)?,
            "crf_w_smooth" => self.refine.crf.w_smooth = parse(key, v)?,
            "crf_iterations" => self.refine.iterations = parse(key, v)?,
            "crf_hardness" => self.refine.hardness = parse(key, v)?,
            "crf_max_side" => self.refine.max_side = parse(key, v)?,
            "bind_gate" => self.bind_gate = if v.eq_ignore_ascii_case("none") { None } else { Some(parse(key, v)?) },
            "append_centroid" => self.append_centroid = parse_bool(key, v)?,
            "policy_hidden" => {
                self.policy.hidden = if v.is_empty() {
                    vec![]
                } else {
                    v.split(',').map(|s| parse(key, s.trim())).collect::<Result<_>>()?
                }
            }
            "policy_lr" => self.policy.lr = parse(key, v)?,
            "policy_batch" => self.policy.batch = parse(key, v)?,
            "policy_epochs" => self.policy.epochs = parse(key, v)?,
            "seed" => {
                self.seed = parse(key, v)?;
                self.policy.seed = self.seed;
            }
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut config = PipelineConfig::default();
        let mut seen = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) =
                line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            let key = key.trim();
            if seen.insert(key.to_string(), i + 1).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {key:?}", i + 1)));
            }
            config.set(key, value)?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let c = self;
        check(c.keep_fraction > 0.0 && c.keep_fraction <= 1.0, "keep_fraction", "in (0, 1]", c.keep_fraction)?;
        check(c.sigma_spatial > 0.0 && c.sigma_spatial.is_finite(), "sigma_spatial", "> 0", c.sigma_spatial)?;
        check(c.cls_quantile > 0.0 && c.cls_quantile < 1.0, "cls_quantile", "in (0, 1)", c.cls_quantile)?;
        check(c.bg_threshold > 0.0 && c.bg_threshold <= 1.0, "bg_threshold", "in (0, 1]", c.bg_threshold)?;
        check(c.reference_frames >= 1, "reference_frames", ">= 1", c.reference_frames)?;
        check(c.cluster.k_max >= 1, "k_max", ">= 1", c.cluster.k_max)?;
        check(c.cluster.min_cluster_tokens >= 1, "min_cluster_tokens", ">= 1", c.cluster.min_cluster_tokens)?;
        check(c.cluster.restarts >= 1, "kmeans_restarts", ">= 1", c.cluster.restarts)?;
        check(c.cluster.max_iter >= 1, "kmeans_max_iter", ">= 1", c.cluster.max_iter)?;
        let crf = &c.refine.crf;
        check(crf.theta_alpha > 0.0, "crf_theta_alpha", "> 0", crf.theta_alpha)?;
        check(crf.theta_beta > 0.0, "crf_theta_beta", "> 0", crf.theta_beta)?;
        check(crf.theta_gamma > 0.0, "crf_theta_gamma", "> 0", crf.theta_gamma)?;
        check(crf.w_app >= 0.0 && crf.w_app.is_finite(), "crf_w_app", ">= 0", crf.w_app)?;
        check(crf.w_smooth >= 0.0 && crf.w_smooth.is_finite(), "crf_w_smooth", ">= 0", crf.w_smooth)?;
        check(c.refine.hardness > 0.0 && c.refine.hardness < 1.0, "crf_hardness", "in (0, 1)", c.refine.hardness)?;
        check(c.refine.max_side >= 1, "crf_max_side", ">= 1", c.refine.max_side)?;
        if let Some(g) = c.bind_gate {
            check(g >= 0.0 && !g.is_nan(), "bind_gate", ">= 0 or none", g)?;
        }
        check(
            !c.policy.hidden.contains(&0),
            "policy_hidden",
            "a list of positive sizes",
            format!("{:?}", c.policy.hidden),
        )?;
        check(c.policy.lr > 0.0 && c.policy.lr.is_finite(), "policy_lr", "> 0", c.policy.lr)?;
        check(c.policy.batch >= 1, "policy_batch", ">= 1", c.policy.batch)?;
        Ok(())
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let c = self;
        let crf = &c.refine.crf;
        let hidden: Vec<String> = c.policy.hidden.iter().map(ToString::to_string).collect();
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("keep_fraction", c.keep_fraction.to_string());
        put("sigma_spatial", c.sigma_spatial.to_string());
        put("cls_quantile", c.cls_quantile.to_string());
        put("bg_threshold", c.bg_threshold.to_string());
        put("bg_removal", c.bg_removal.to_string());
        put("reference_frames", c.reference_frames.to_string());
        put("k_max", c.cluster.k_max.to_string());
        put("min_cluster_tokens", c.cluster.min_cluster_tokens.to_string());
        put("kmeans_restarts", c.cluster.restarts.to_string());
        put("kmeans_max_iter", c.cluster.max_iter.to_string());
        put("crf_theta_alpha", crf.theta_alpha.to_string());
        put("crf_theta_beta", crf.theta_beta.to_string());
        put("crf_theta_gamma", crf.theta_gamma.to_string());
        put("crf_w_app", crf.w_app.to_string());
        put("crf_w_smooth", crf.w_smooth.to_string());
        put("crf_iterations", c.refine.iterations.to_string());
        put("crf_hardness", c.refine.hardness.to_string());
        put("crf_max_side", c.refine.max_side.to_string());
        put("bind_gate", c.bind_gate.map_or("none".into(), |g| g.to_string()));
        put("append_centroid", c.append_centroid.to_string());
        put("policy_hidden", hidden.join(","));
        put("policy_lr", c.policy.lr.to_string());
        put("policy_batch", c.policy.batch.to_string());
        put("policy_epochs", c.policy.epochs.to_string());
        put("seed", c.seed.to_string());
        out
    }
}
