//! Triplet training: shared-weight forward passes, Adam with per-epoch exponential
//! learning-rate decay, and per-epoch train/test loss logging.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::{Triplet, TripletManifest};
use crate::encoder::{embed, embed_on_tape, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::io;
use crate::loss::{self, LossKind, TripletLossInputs};
use crate::tensor::{kernels, Tape, Tensor};
use crate::volume::VolumeSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub loss_kind: LossKind,
    pub epochs: usize,
    pub lr_initial: f64,
    pub lr_decay_rate: f64,
    pub margin: f64,
    pub seeds: Vec<u64>,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss_kind: LossKind::Weighted,
            epochs: 150,
            lr_initial: 1e-3,
            lr_decay_rate: 0.96,
            margin: loss::DEFAULT_MARGIN,
            seeds: vec![1, 2, 3, 4, 5],
            batch_size: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::TrainConfig(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.lr_initial > 0.0 && self.lr_initial.is_finite()) {
            return bad(format!("lr_initial {} must be positive", self.lr_initial));
        }
        if !(self.lr_decay_rate > 0.0 && self.lr_decay_rate <= 1.0) {
            return bad(format!("lr_decay_rate {} not in (0, 1]", self.lr_decay_rate));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return bad(format!("margin {} must be non-negative", self.margin));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_initial * self.lr_decay_rate.powi(epoch as i32)
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moments per named tensor plus the step count.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

/// One bias-corrected Adam update of every tensor in `params` that has a gradient.
pub fn adam_step(
    params: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads {
        let p = params.get(name).ok_or_else(|| Error::MissingParam(name.clone()))?;
        if p.shape() != g.shape() {
            return Err(Error::shape("adam", format!("{name}: param {:?} vs grad {:?}", p.shape(), g.shape())));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        for (((pi, mi), vi), &gi) in
            p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data())
        {
            *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
            *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *pi -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub seed: u64,
    pub loss_kind: LossKind,
    pub epochs: Vec<EpochLog>,
    pub wall_time_secs: f64,
    pub checkpoint: Option<PathBuf>,
}

/// The JSON run summary. Wall time is left out so re-runs stay byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub loss_kind: LossKind,
    pub epochs: usize,
    pub initial_train_loss: f64,
    pub final_train_loss: f64,
    pub final_test_loss: f64,
    pub checkpoint: Option<PathBuf>,
}

impl RunLog {
    pub fn summary(&self) -> RunSummary {
        let first = self.epochs.first();
        let last = self.epochs.last();
        RunSummary {
            seed: self.seed,
            loss_kind: self.loss_kind,
            epochs: self.epochs.len(),
            initial_train_loss: first.map_or(f64::NAN, |e| e.train_loss),
            final_train_loss: last.map_or(f64::NAN, |e| e.train_loss),
            final_test_loss: last.map_or(f64::NAN, |e| e.test_loss),
            checkpoint: self.checkpoint.clone(),
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        io::write_csv(path, &self.epochs)
    }

    pub fn write_summary(&self, path: &Path) -> Result<()> {
        io::write_json(path, &self.summary())
    }

    pub fn read_csv(path: &Path) -> Result<Vec<EpochLog>> {
        let mut r = csv::Reader::from_path(path)?;
        r.deserialize().map(|row| row.map_err(Error::from)).collect()
    }
}

fn alpha_for(kind: LossKind, t: &Triplet) -> loss::Alpha {
    match kind {
        LossKind::Unweighted => loss::Alpha::ONE,
        LossKind::Weighted => t.alpha,
    }
}

/// Mean per-triplet loss with the given params, no updates. Each distinct scan is
/// embedded once.
pub fn mean_loss(
    params: &EncoderParams,
    manifest: &TripletManifest,
    volumes: &VolumeSet,
    kind: LossKind,
    margin: f64,
) -> Result<f64> {
    if manifest.triplets.is_empty() {
        return Err(Error::TrainConfig(format!("{} manifest has no triplets", manifest.split)));
    }
    let mut cache: BTreeMap<&str, Tensor> = BTreeMap::new();
    for r in manifest.scan_refs() {
        cache.insert(r, embed(params, volumes.get(r)?)?);
    }
    let mut total = 0.0;
    for t in &manifest.triplets {
        let (a, p, n) = (&cache[t.anchor.as_str()], &cache[t.positive.as_str()], &cache[t.negative.as_str()]);
        let inputs = TripletLossInputs::new(
            kernels::euclidean_distance(a, p)?,
            kernels::euclidean_distance(a, n)?,
            margin,
        )?;
        total += loss::weighted_loss(&inputs, alpha_for(kind, t))?.item()?;
    }
    Ok(total / manifest.triplets.len() as f64)
}

/// One optimisation step over `batch`. Returns the summed per-triplet loss.
fn train_batch(
    params: &mut EncoderParams,
    batch: &[&Triplet],
    volumes: &VolumeSet,
    cfg: &TrainConfig,
    adam: &mut AdamState,
    lr: f64,
) -> Result<f64> {
    let enc: EncoderConfig = params.config().clone();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let n_params = tape.param_count();
    let mut losses = Vec::with_capacity(batch.len());
    for t in batch {
        let mut branch = |r: &str| -> Result<_> {
            let v = tape.constant(volumes.get(r)?.clone());
            embed_on_tape(&mut tape, &enc, &bound, v)
        };
        let (ea, ep, en) = (branch(&t.anchor)?, branch(&t.positive)?, branch(&t.negative)?);
        let d_ap = tape.euclidean_distance(ea, ep)?;
        let d_an = tape.euclidean_distance(ea, en)?;
        losses.push(loss::triplet_on_tape(&mut tape, cfg.loss_kind, d_ap, d_an, t.alpha, cfg.margin)?);
    }
    // All three branches must have reused the single bound parameter set.
    assert_eq!(tape.param_count(), n_params);
    let sum = tape.add_n(&losses)?;
    let batch_loss = tape.scale(sum, 1.0 / batch.len() as f64)?;
    let total = tape.value(sum).item()?;
    let grads = tape.backward(batch_loss)?;
    let named: BTreeMap<String, Tensor> = bound
        .iter()
        .map(|(name, var)| (name.to_string(), grads.get(var).expect("bound params get gradients").clone()))
        .collect();
    adam_step(params.tensors_mut(), &named, adam, lr)?;
    Ok(total)
}

/// Trains one encoder from `EncoderParams::init(encoder_cfg, seed)`.
pub fn train_run(
    manifest_train: &TripletManifest,
    manifest_test: &TripletManifest,
    volumes: &VolumeSet,
    encoder_cfg: &EncoderConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(EncoderParams, RunLog)> {
    train_run_with(manifest_train, manifest_test, volumes, encoder_cfg, cfg, seed, |_| {})
}

/// As [`train_run`], calling `on_epoch` after every epoch.
pub fn train_run_with(
    manifest_train: &TripletManifest,
    manifest_test: &TripletManifest,
    volumes: &VolumeSet,
    encoder_cfg: &EncoderConfig,
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(EncoderParams, RunLog)> {
    cfg.validate()?;
    for m in [manifest_train, manifest_test] {
        if m.triplets.is_empty() {
            return Err(Error::TrainConfig(format!("{} manifest has no triplets", m.split)));
        }
        for r in m.scan_refs() {
            volumes.get(r)?;
        }
    }
    let started = Instant::now();
    let mut params = EncoderParams::init(encoder_cfg, seed)?;
    let mut adam = AdamState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut order: Vec<&Triplet> = manifest_train.triplets.iter().collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            total += train_batch(&mut params, batch, volumes, cfg, &mut adam, lr)?;
        }
        let train_loss = total / order.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        let test_loss = mean_loss(&params, manifest_test, volumes, cfg.loss_kind, cfg.margin)?;
        if !test_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        let log = EpochLog { epoch, train_loss, test_loss, lr };
        on_epoch(&log);
        epochs.push(log);
    }
    let log = RunLog {
        seed,
        loss_kind: cfg.loss_kind,
        epochs,
        wall_time_secs: started.elapsed().as_secs_f64(),
        checkpoint: None,
    };
    Ok((params, log))
}
