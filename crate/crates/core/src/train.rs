//! Adam training loop with gradual modality dropout, checkpoints and the
//! fine-tuning resume used to add dropout to a pretrained model.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{augment, sample_crops, AugmentConfig, Crop, Volume};
use crate::error::{Error, Result};
use crate::moddrop::{self, sample_retention, schedule_value, DropoutSchedule, RetentionSample};
use crate::model::{LossWeights, UpAttLlstm, MODALITIES};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::{io as tio, io::Reader, Graph, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ModDropSettings {
    pub enabled: bool,
    pub keep_prob: f64,
    pub noise_sigma: f64,
    pub droppable: Vec<usize>,
}

impl Default for ModDropSettings {
    fn default() -> Self {
        ModDropSettings {
            enabled: false,
            keep_prob: 0.5,
            noise_sigma: 0.01,
            droppable: vec![crate::data::Modality::Phase.index()],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub crops_per_image: usize,
    pub epochs: usize,
    pub seed: u64,
    pub moddrop: ModDropSettings,
    /// Write a checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
    /// Global gradient norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub extra_epochs_on_resume: usize,
    pub loss_weights: LossWeights,
    pub augment: Option<AugmentConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            batch_size: 2,
            crops_per_image: 4,
            epochs: 100,
            seed: 0,
            moddrop: ModDropSettings::default(),
            checkpoint_every: 0,
            checkpoint_dir: None,
            clip_norm: Some(5.0),
            extra_epochs_on_resume: 400,
            loss_weights: LossWeights::default(),
            augment: Some(AugmentConfig::default()),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr={} must be > 0", self.lr)));
        }
        if self.batch_size == 0 || self.crops_per_image == 0 {
            return Err(Error::Config("train.batch_size and train.crops_per_image must be positive".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config("train.clip_norm must be > 0".into()));
            }
        }
        if self.moddrop.enabled {
            self.schedule(self.epochs.max(1)).validate(MODALITIES)?;
        }
        Ok(())
    }

    fn schedule(&self, total: usize) -> DropoutSchedule {
        DropoutSchedule {
            keep_prob: self.moddrop.keep_prob,
            total_epochs: total,
            noise_sigma: self.moddrop.noise_sigma,
            droppable: self.moddrop.droppable.clone(),
        }
    }
}

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = |p: &ParamStore<T>| p.tensors().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        Adam {
            beta1: BETA1,
            beta2: BETA2,
            eps: ADAM_EPS,
            t: 0,
            m: zeros(params),
            v: zeros(params),
        }
    }

    /// One bias-corrected update. Rejects non-finite gradients without
    /// touching the parameters.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::shape("adam", &[params.len()], &[grads.len()]));
        }
        for (id, g) in params.ids().zip(grads) {
            if g.shape() != params.get(id).shape() {
                return Err(Error::shape("adam", params.get(id).shape(), g.shape()));
            }
            if !g.is_finite() {
                return Err(Error::Diverged {
                    epoch: 0,
                    step: self.t as usize,
                    reason: format!("non-finite gradient for {}", params.name(id)),
                });
            }
        }
        self.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(self.t as i32));
        let c2 = T::lit(1.0 - self.beta2.powi(self.t as i32));
        let (lr, eps) = (T::lit(lr), T::lit(self.eps));
        for (k, p) in params.tensors_mut().iter_mut().enumerate() {
            let g = grads[k].data();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub g_value: f64,
    pub lr: f64,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut out = String::from("epoch,step,loss,g_value,lr\n");
    for r in rows {
        out.push_str(&format!("{},{},{:.9},{},{}\n", r.epoch, r.step, r.loss, r.g_value, r.lr));
    }
    out
}

/// Everything needed to continue or reproduce a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config: Vec<(String, String)>,
    pub params: ParamStore<T>,
    pub adam: Adam<T>,
    /// Epochs completed.
    pub epoch: usize,
    pub rng_seed: [u8; 32],
    pub rng_stream: u64,
    pub rng_word_pos: u128,
}

pub const CKPT_MAGIC: &[u8; 4] = b"CSCK";
pub const CKPT_VERSION: u32 = 1;

fn put_record(out: &mut Vec<u8>, name: &str, blob: &[u8]) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("name too long: {name}")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
    out.extend_from_slice(blob);
    Ok(())
}

impl<T: Scalar> Checkpoint<T> {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        let mut cfg = String::new();
        for (k, v) in &self.config {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Format(format!("config entry {k} cannot be stored")));
            }
            cfg.push_str(&format!("{k}={v}\n"));
        }
        out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&(self.epoch as u64).to_le_bytes());
        out.extend_from_slice(&self.rng_seed);
        out.extend_from_slice(&self.rng_stream.to_le_bytes());
        out.extend_from_slice(&self.rng_word_pos.to_le_bytes());
        for v in [self.adam.beta1, self.adam.beta2, self.adam.eps] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.adam.t.to_le_bytes());
        out.extend_from_slice(&(3 * self.params.len() as u64).to_le_bytes());
        for (k, (name, t)) in self.params.iter().enumerate() {
            put_record(&mut out, name, &tio::encode(t))?;
            put_record(&mut out, &format!("adam.m/{name}"), &tio::encode(&self.adam.m[k]))?;
            put_record(&mut out, &format!("adam.v/{name}"), &tio::encode(&self.adam.v[k]))?;
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != CKPT_MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let cfg_len = usize::try_from(r.u64()?).map_err(|_| Error::Format("config too large".into()))?;
        let cfg = std::str::from_utf8(r.take(cfg_len)?).map_err(|_| Error::Format("config is not UTF-8".into()))?;
        let config = cfg
            .lines()
            .map(|l| {
                l.split_once('=')
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| Error::Format(format!("bad config line {l:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let epoch = r.u64()? as usize;
        let rng_seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let rng_stream = r.u64()?;
        let rng_word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
        let (beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?);
        let t = r.u64()?;
        let n = r.u64()? as usize;
        if n % 3 != 0 {
            return Err(Error::Format("checkpoint record count not a multiple of 3".into()));
        }
        let mut params = ParamStore::new();
        let (mut m, mut v) = (Vec::new(), Vec::new());
        let record = |r: &mut Reader| -> Result<(String, Tensor<T>)> {
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Format("bad record name".into()))?;
            let blob_len = usize::try_from(r.u64()?).map_err(|_| Error::Format("record too large".into()))?;
            Ok((name, tio::decode(r.take(blob_len)?)?))
        };
        for _ in 0..n / 3 {
            let (name, t) = record(&mut r)?;
            let (mn, mt) = record(&mut r)?;
            let (vn, vt) = record(&mut r)?;
            if mn != format!("adam.m/{name}") || vn != format!("adam.v/{name}") {
                return Err(Error::Format(format!("optimizer records out of order near {name}")));
            }
            if mt.shape() != t.shape() || vt.shape() != t.shape() {
                return Err(Error::Format(format!("optimizer moment shape mismatch for {name}")));
            }
            params.add(name, t).map_err(|e| Error::Format(e.to_string()))?;
            m.push(mt);
            v.push(vt);
        }
        if !r.is_empty() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Checkpoint {
            config,
            params,
            adam: Adam { beta1, beta2, eps, t, m, v },
            epoch,
            rng_seed,
            rng_stream,
            rng_word_pos,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    pub fn config_value(&self, key: &str) -> Option<&str> {
        self.config.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

/// Per-epoch summary handed to the training observer.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_loss: f64,
    pub g_value: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub checkpoint: Checkpoint<T>,
    pub log: Vec<LogRow>,
    pub epoch_losses: Vec<f64>,
    pub stopped_early: bool,
}

/// Crops for one epoch: per volume, alternating target / background.
fn epoch_crops(
    model_n1: usize,
    s: usize,
    dataset: &[Volume],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Crop>> {
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(rng);
    let mut crops = Vec::with_capacity(dataset.len() * cfg.crops_per_image);
    for &i in &order {
        let mut k = 0;
        while k < cfg.crops_per_image {
            let (pos, neg) = sample_crops(&dataset[i], model_n1, s, rng)?;
            crops.push(pos);
            k += 1;
            if k < cfg.crops_per_image {
                crops.push(neg);
                k += 1;
            }
        }
    }
    if let Some(aug) = &cfg.augment {
        for c in &mut crops {
            *c = augment(c, aug, rng);
        }
    }
    Ok(crops)
}

/// Forward and backward on one crop; returns the loss and per-parameter
/// gradients in store order.
pub fn crop_gradients<T: Scalar>(
    model: &UpAttLlstm<T>,
    crop: &Crop,
    weights: LossWeights,
) -> Result<(f64, Vec<Tensor<T>>)> {
    let mut g = Graph::new();
    let b = model.params.bind(&mut g, true);
    let logits = model.forward_logits(&mut g, &b, crop)?;
    let loss = model.loss(&mut g, &logits, &crop.gt, weights)?;
    let value = g.value(loss).data()[0].as_f64();
    let mut grads = g.backward(loss)?;
    let out = model
        .params
        .ids()
        .map(|id| {
            grads
                .take(b.var(id))
                .unwrap_or_else(|| Tensor::zeros(model.params.get(id).shape().to_vec()))
        })
        .collect();
    Ok((value, out))
}

fn diverged(epoch: usize, step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Diverged {
            epoch,
            step,
            reason: format!("non-finite value in {op}"),
        },
        Error::Diverged { reason, .. } => Error::Diverged { epoch, step, reason },
        other => other,
    }
}

/// Train `model` in place for `cfg.epochs` epochs.
pub fn train<T: Scalar>(
    model: &mut UpAttLlstm<T>,
    dataset: &[Volume],
    cfg: &TrainConfig,
    config_snapshot: &[(String, String)],
    observer: impl FnMut(&EpochReport, &UpAttLlstm<T>) -> Control,
) -> Result<TrainOutcome<T>> {
    let adam = Adam::new(&model.params);
    let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    run(model, dataset, cfg, cfg.epochs, adam, rng, 0, config_snapshot, observer)
}

/// Load pretrained weights and fine-tune for `cfg.extra_epochs_on_resume`
/// epochs, with the dropout schedule restarted over those epochs and fresh
/// optimizer moments.
pub fn resume_transfer<T: Scalar>(
    model: &mut UpAttLlstm<T>,
    pretrained: &Checkpoint<T>,
    dataset: &[Volume],
    cfg: &TrainConfig,
    config_snapshot: &[(String, String)],
    observer: impl FnMut(&EpochReport, &UpAttLlstm<T>) -> Control,
) -> Result<TrainOutcome<T>> {
    model.params.load_from(&pretrained.params)?;
    let adam = Adam::new(&model.params);
    let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    run(model, dataset, cfg, cfg.extra_epochs_on_resume, adam, rng, 0, config_snapshot, observer)
}

/// Continue an interrupted run from its checkpoint.
pub fn resume<T: Scalar>(
    model: &mut UpAttLlstm<T>,
    ckpt: &Checkpoint<T>,
    dataset: &[Volume],
    cfg: &TrainConfig,
    observer: impl FnMut(&EpochReport, &UpAttLlstm<T>) -> Control,
) -> Result<TrainOutcome<T>> {
    model.params.load_from(&ckpt.params)?;
    let mut rng = ChaCha8Rng::from_seed(ckpt.rng_seed);
    rng.set_stream(ckpt.rng_stream);
    rng.set_word_pos(ckpt.rng_word_pos);
    run(model, dataset, cfg, cfg.epochs, ckpt.adam.clone(), rng, ckpt.epoch, &ckpt.config, observer)
}

#[allow(clippy::too_many_arguments)]
fn run<T: Scalar>(
    model: &mut UpAttLlstm<T>,
    dataset: &[Volume],
    cfg: &TrainConfig,
    total_epochs: usize,
    mut adam: Adam<T>,
    mut rng: ChaCha8Rng,
    start_epoch: usize,
    config_snapshot: &[(String, String)],
    mut observer: impl FnMut(&EpochReport, &UpAttLlstm<T>) -> Control,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("training dataset is empty"));
    }
    let schedule = cfg.schedule(total_epochs.max(1));
    let (n1, s) = (model.cfg.fusion.n1, model.cfg.s);
    let mut log = Vec::new();
    let mut epoch_losses = Vec::new();
    let mut step = 0usize;
    let mut stopped_early = false;
    let mut epoch = start_epoch;
    let snapshot = |model: &UpAttLlstm<T>, adam: &Adam<T>, rng: &ChaCha8Rng, epoch: usize| Checkpoint {
        config: config_snapshot.to_vec(),
        params: model.params.clone(),
        adam: adam.clone(),
        epoch,
        rng_seed: rng.get_seed(),
        rng_stream: rng.get_stream(),
        rng_word_pos: rng.get_word_pos(),
    };
    while epoch < total_epochs {
        let g_value = if cfg.moddrop.enabled { schedule_value(epoch, total_epochs)? } else { 1.0 };
        let crops = epoch_crops(n1, s, dataset, cfg, &mut rng)?;
        let mut epoch_loss = 0.0;
        for batch in crops.chunks(cfg.batch_size) {
            let retention = if cfg.moddrop.enabled {
                sample_retention(&schedule, epoch, MODALITIES, &mut rng)?
            } else {
                RetentionSample::ones(MODALITIES)
            };
            let mut sum: Option<Vec<Tensor<T>>> = None;
            let mut batch_loss = 0.0;
            for crop in batch {
                let x = moddrop::apply(crop, &retention)?;
                let (loss, grads) = crop_gradients(model, &x, cfg.loss_weights).map_err(|e| diverged(epoch, step, e))?;
                if !loss.is_finite() {
                    return Err(Error::Diverged { epoch, step, reason: "loss is not finite".into() });
                }
                batch_loss += loss;
                match &mut sum {
                    None => sum = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            a.data_mut().iter_mut().zip(g.data()).for_each(|(x, &y)| *x += y);
                        }
                    }
                }
            }
            let mut grads = sum.expect("non-empty batch");
            let inv = T::one() / T::lit(batch.len() as f64);
            let mut sq = 0.0;
            for g in &mut grads {
                for v in g.data_mut() {
                    *v *= inv;
                    sq += v.as_f64() * v.as_f64();
                }
            }
            if let Some(clip) = cfg.clip_norm {
                let norm = sq.sqrt();
                if norm > clip {
                    let f = T::lit(clip / norm);
                    grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= f));
                }
            }
            adam.step(&mut model.params, &grads, cfg.lr).map_err(|e| diverged(epoch, step, e))?;
            let loss = batch_loss / batch.len() as f64;
            log.push(LogRow { epoch, step, loss, g_value, lr: cfg.lr });
            epoch_loss += loss * batch.len() as f64;
            step += 1;
        }
        let mean_loss = epoch_loss / crops.len() as f64;
        epoch_losses.push(mean_loss);
        info!("epoch {epoch}: loss {mean_loss:.5}, g {g_value}");
        epoch += 1;
        if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
            if let Some(dir) = &cfg.checkpoint_dir {
                let ck = snapshot(model, &adam, &rng, epoch);
                ck.save(dir.join(format!("epoch_{epoch:05}.ckpt")))?;
                ck.save(dir.join("last.ckpt"))?;
            }
        }
        let report = EpochReport { epoch: epoch - 1, mean_loss, g_value };
        if observer(&report, model) == Control::Stop {
            stopped_early = true;
            break;
        }
    }
    Ok(TrainOutcome {
        checkpoint: snapshot(model, &adam, &rng, epoch),
        log,
        epoch_losses,
        stopped_early,
    })
}
