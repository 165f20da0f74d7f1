//! Run configuration: a flat `key = value` file with `#` comments, merged
//! with command-line overrides and checked against every module's rules.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::data::{AugmentConfig, Modality, PhantomSpec};
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::model::{LossWeights, ModelConfig};
use crate::postprocess::{Connectivity, PostConfig};
use crate::train::{ModDropSettings, TrainConfig};

/// Every recognised key with its default.
pub const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("fusion.n1", "256"),
    ("fusion.p1", "32"),
    ("fusion.p2", "4"),
    ("fusion.d_k", "32"),
    ("fusion.mlp_hidden", "32"),
    ("llstm.n_c", "4"),
    ("llstm.n_l", "9"),
    ("llstm.m", "3"),
    ("llstm.w", "3"),
    ("llstm.forget_bias", "1"),
    ("model.s", "12"),
    ("model.threshold", "0.3"),
    ("model.loss_weights", "0.5,0.5"),
    ("model.stride", "auto"),
    ("moddrop.enabled", "false"),
    ("moddrop.keep_prob", "0.5"),
    ("moddrop.noise_sigma", "0.01"),
    ("moddrop.droppable", "PHASE"),
    ("train.lr", "0.01"),
    ("train.batch_size", "2"),
    ("train.crops_per_image", "4"),
    ("train.epochs", "100"),
    ("train.checkpoint_every", "0"),
    ("train.clip_norm", "5"),
    ("train.extra_epochs_on_resume", "400"),
    ("train.augment", "true"),
    ("train.augment_prob", "0.4"),
    ("train.augment_noise", "0.05"),
    ("post.n_pixels", "20"),
    ("post.n_dist", "20"),
    ("post.threshold", "0.3"),
    ("post.alpha_big", "1"),
    ("post.seed_threshold", "0.5"),
    ("post.connectivity", "26"),
    ("synth.dims", "64,64,32"),
    ("synth.clear_slices", "12"),
    ("synth.noise_sigma", "0.05"),
    ("synth.max_distance", "6"),
    ("synth.lesion_radius", "4,7"),
    ("synth.thrombus_radius", "1.8,2.6"),
];

pub const SEED_ENV: &str = "CLOTSEG_SEED";

/// Parse `key = value` lines. Blank lines and `#` comments are skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)));
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

/// A single `key=value` override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{s}` must look like key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn get<V: FromStr>(map: &BTreeMap<String, String>, key: &str, kind: &str) -> Result<V> {
    let raw = &map[key];
    raw.parse()
        .map_err(|_| Error::Config(format!("{key}: expected {kind}, got `{raw}`")))
}

fn uint(map: &BTreeMap<String, String>, key: &str) -> Result<usize> {
    get(map, key, "a non-negative integer")
}

fn float(map: &BTreeMap<String, String>, key: &str) -> Result<f64> {
    let v: f64 = get(map, key, "a number")?;
    if !v.is_finite() {
        return Err(Error::Config(format!("{key}: must be finite")));
    }
    Ok(v)
}

fn boolean(map: &BTreeMap<String, String>, key: &str) -> Result<bool> {
    get(map, key, "true or false")
}

fn list<V: FromStr>(map: &BTreeMap<String, String>, key: &str, len: usize, kind: &str) -> Result<Vec<V>> {
    let raw = &map[key];
    let items: Vec<V> = raw
        .split(',')
        .map(|p| p.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("{key}: expected {len} comma-separated {kind}, got `{raw}`")))?;
    if items.len() != len {
        return Err(Error::Config(format!("{key}: expected {len} comma-separated {kind}, got `{raw}`")));
    }
    Ok(items)
}

/// Fully resolved settings for one run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    /// Probability above which a voxel is called thrombus at inference.
    pub threshold: f64,
    /// Slice stride of sliding-window inference.
    pub stride: usize,
    pub train: TrainConfig,
    pub post: PostConfig,
    pub phantom: PhantomSpec,
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::resolve(&[], &[], None).expect("defaults are valid")
    }
}

impl RunConfig {
    /// Merge defaults, file pairs, then overrides (last wins). `env_seed`
    /// is used only when neither source sets `seed`.
    pub fn resolve(file: &[(String, String)], overrides: &[(String, String)], env_seed: Option<&str>) -> Result<Self> {
        let mut values: BTreeMap<String, String> =
            DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        let mut seed_given = false;
        for (k, v) in file.iter().chain(overrides) {
            if !values.contains_key(k) {
                return Err(Error::Config(format!("unknown key `{k}`")));
            }
            seed_given |= k == "seed";
            values.insert(k.clone(), v.clone());
        }
        if !seed_given {
            if let Some(s) = env_seed {
                values.insert("seed".into(), s.trim().to_string());
            }
        }
        Self::from_values(values)
    }

    /// Read a config file and apply overrides.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)], env_seed: Option<&str>) -> Result<Self> {
        let file = match path {
            Some(p) => parse_pairs(&std::fs::read_to_string(p)?)?,
            None => Vec::new(),
        };
        Self::resolve(&file, overrides, env_seed)
    }

    fn from_values(values: BTreeMap<String, String>) -> Result<Self> {
        let m = &values;
        let seed: u64 = get(m, "seed", "a non-negative integer")?;
        let fusion = FusionConfig {
            n1: uint(m, "fusion.n1")?,
            p1: uint(m, "fusion.p1")?,
            p2: uint(m, "fusion.p2")?,
            d_k: uint(m, "fusion.d_k")?,
            mlp_hidden: uint(m, "fusion.mlp_hidden")?,
        };
        let model = ModelConfig {
            fusion,
            n_c: uint(m, "llstm.n_c")?,
            n_l: uint(m, "llstm.n_l")?,
            m: uint(m, "llstm.m")?,
            w: uint(m, "llstm.w")?,
            forget_bias: float(m, "llstm.forget_bias")?,
            s: uint(m, "model.s")?,
        };
        model.validate()?;

        let threshold = float(m, "model.threshold")?;
        if !(0.0..1.0).contains(&threshold) {
            return Err(Error::Config(format!("model.threshold={threshold} must lie in [0, 1)")));
        }
        let w: Vec<f64> = list(m, "model.loss_weights", 2, "numbers")?;
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || w[0] + w[1] <= 0.0 {
            return Err(Error::Config("model.loss_weights must be non-negative and not both zero".into()));
        }
        let stride = match m["model.stride"].as_str() {
            "auto" => (model.s / 2).max(1),
            _ => uint(m, "model.stride")?,
        };
        if stride == 0 {
            return Err(Error::Config("model.stride must be positive".into()));
        }

        let droppable = m["moddrop.droppable"]
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                Modality::from_name(s)
                    .map(Modality::index)
                    .ok_or_else(|| Error::Config(format!("moddrop.droppable: unknown modality `{s}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let clip = match m["train.clip_norm"].as_str() {
            "none" | "off" => None,
            _ => Some(float(m, "train.clip_norm")?),
        };
        let augment = boolean(m, "train.augment")?.then_some(AugmentConfig {
            prob: float(m, "train.augment_prob")?,
            noise_sigma: float(m, "train.augment_noise")?,
        });
        if let Some(a) = &augment {
            if !(0.0..=1.0).contains(&a.prob) || a.noise_sigma < 0.0 {
                return Err(Error::Config("train.augment_prob must lie in [0, 1] and noise be >= 0".into()));
            }
        }
        let train = TrainConfig {
            lr: float(m, "train.lr")?,
            batch_size: uint(m, "train.batch_size")?,
            crops_per_image: uint(m, "train.crops_per_image")?,
            epochs: uint(m, "train.epochs")?,
            seed,
            moddrop: ModDropSettings {
                enabled: boolean(m, "moddrop.enabled")?,
                keep_prob: float(m, "moddrop.keep_prob")?,
                noise_sigma: float(m, "moddrop.noise_sigma")?,
                droppable,
            },
            checkpoint_every: uint(m, "train.checkpoint_every")?,
            checkpoint_dir: None,
            clip_norm: clip,
            extra_epochs_on_resume: uint(m, "train.extra_epochs_on_resume")?,
            loss_weights: LossWeights { ce: w[0], dice: w[1] },
            augment,
        };
        train.validate()?;
        // the schedule is checked even when disabled so a later toggle cannot fail
        crate::moddrop::DropoutSchedule {
            keep_prob: train.moddrop.keep_prob,
            total_epochs: train.epochs.max(1),
            noise_sigma: train.moddrop.noise_sigma,
            droppable: train.moddrop.droppable.clone(),
        }
        .validate(crate::model::MODALITIES)
        .map_err(|e| Error::Config(format!("moddrop: {e}")))?;

        let post = PostConfig {
            n_pixels: uint(m, "post.n_pixels")?,
            n_dist: float(m, "post.n_dist")?,
            threshold: float(m, "post.threshold")?,
            alpha_big: float(m, "post.alpha_big")?,
            seed_threshold: float(m, "post.seed_threshold")?,
            connectivity: Connectivity::parse(&m["post.connectivity"])
                .ok_or_else(|| Error::Config(format!("post.connectivity: expected 6 or 26, got `{}`", m["post.connectivity"])))?,
        };
        post.validate()?;

        let dims: Vec<usize> = list(m, "synth.dims", 3, "integers")?;
        let lr: Vec<f64> = list(m, "synth.lesion_radius", 2, "numbers")?;
        let tr: Vec<f64> = list(m, "synth.thrombus_radius", 2, "numbers")?;
        let phantom = PhantomSpec {
            noise_sigma: float(m, "synth.noise_sigma")?,
            max_distance: float(m, "synth.max_distance")?,
            lesion_radius: (lr[0], lr[1]),
            thrombus_radius: (tr[0], tr[1]),
            ..PhantomSpec::for_dims([dims[0], dims[1], dims[2]], uint(m, "synth.clear_slices")?)
        };
        phantom.validate().map_err(|e| Error::Config(format!("synth: {e}")))?;

        Ok(RunConfig {
            seed,
            model,
            threshold,
            stride,
            train,
            post,
            phantom,
            values,
        })
    }

    /// Resolved value of `key`, as text.
    pub fn value(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Every resolved key in sorted order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        self.values.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    /// Config file text that reproduces this run.
    pub fn render(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Override one key and re-validate.
    pub fn with(&self, key: &str, value: impl Display) -> Result<Self> {
        let pairs = self.to_pairs();
        Self::resolve(&pairs, &[(key.to_string(), value.to_string())], None)
    }
}
