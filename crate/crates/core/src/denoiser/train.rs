use rand::seq::SliceRandom;

use super::dataset::{augment, PairedPatchSet, PatchPair};
use super::loss::{ha2ha_loss, total_loss};
use super::optim::{AdamW, AdamWConfig, Plateau};
use super::unet::{UNet, UNetConfig};
use crate::autodiff::{Mode, ParamStore, Tape, Tensor4};
use crate::error::{Error, Result};
use crate::rng::{stream, Domain};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda_c: f64,
    pub lambda_1: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub plateau_factor: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub patch: usize,
    pub stride: usize,
    /// Use every k-th frame when building pairs.
    pub frame_stride: usize,
    pub augment: bool,
    /// Adds 90 and 270 degree turns to the augmentation set.
    pub quarter_turns: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_c: 0.5,
            lambda_1: 1e-5,
            batch_size: 16,
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            weight_decay: 0.0,
            plateau_factor: 0.5,
            patience: 10,
            max_epochs: 50,
            patch: 64,
            stride: 64,
            frame_stride: 1,
            augment: true,
            quarter_turns: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Full-scale settings (128 px patches, batch 256).
    pub fn full_scale() -> Self {
        Self {
            batch_size: 256,
            patch: 128,
            stride: 128,
            frame_stride: 10,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(0.0..=1.0).contains(&self.lambda_c) {
            return bad("lambda_c must lie in [0, 1]");
        }
        if !(self.lambda_1 >= 0.0 && self.lambda_1.is_finite()) {
            return bad("lambda_1 must be >= 0");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be > 0");
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad("betas must lie in (0, 1)");
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad("plateau factor must lie in (0, 1)");
        }
        if self.weight_decay < 0.0 {
            return bad("weight decay must be >= 0");
        }
        if self.patience < 1 || self.batch_size < 1 || self.max_epochs < 1 {
            return bad("patience, batch size and epochs must be >= 1");
        }
        if self.patch < 1 || self.stride < 1 || self.frame_stride < 1 {
            return bad("patch, stride and frame stride must be >= 1");
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate used during the epoch.
    pub lr: f64,
    /// Mean total loss over the epoch's samples.
    pub loss: f64,
    /// Mean of the cross-prediction term alone (no L1 penalty).
    pub data_loss: f64,
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub net: UNet,
    pub params: ParamStore,
    pub history: Vec<EpochRecord>,
}

/// Plain-text loss log, one `epoch lr loss data_loss` line per epoch.
pub fn format_loss_log(history: &[EpochRecord]) -> String {
    let mut s = String::from("# epoch lr loss data_loss\n");
    for r in history {
        s.push_str(&format!("{} {:e} {:.9e} {:.9e}\n", r.epoch, r.lr, r.loss, r.data_loss));
    }
    s
}

fn stack(pairs: &[PatchPair], pick: impl Fn(&PatchPair) -> &[f64]) -> Result<Tensor4> {
    let (h, w) = (pairs[0].height, pairs[0].width);
    let mut data = Vec::with_capacity(pairs.len() * h * w);
    for p in pairs {
        if (p.height, p.width) != (h, w) {
            return Err(Error::ShapeMismatch("patches in a batch differ in size".into()));
        }
        data.extend_from_slice(pick(p));
    }
    Tensor4::from_vec([pairs.len(), 1, h, w], data)
}

/// One optimizer step on a batch; returns the batch's total and data loss.
pub fn train_step(
    net: &UNet,
    params: &mut ParamStore,
    opt: &mut AdamW,
    batch: &[PatchPair],
    cfg: &TrainConfig,
) -> Result<(f64, f64)> {
    let x1 = stack(batch, |p| &p.a)?;
    let x2 = stack(batch, |p| &p.b)?;
    params.zero_grad();
    let mut tape = Tape::new();
    let y1 = tape.leaf(x1);
    let y2 = tape.leaf(x2);
    let o1 = net.forward(&mut tape, params, y1, Mode::Train)?;
    let o2 = net.forward(&mut tape, params, y2, Mode::Train)?;
    let l = ha2ha_loss(&mut tape, o1, o2, y1, y2, cfg.lambda_c)?;
    let total = total_loss(&mut tape, params, l, cfg.lambda_1)?;
    let value = tape.value(total).item();
    let data = tape.value(l).item();
    if !value.is_finite() {
        return Ok((value, data));
    }
    tape.backward(total, params)?;
    opt.step(params);
    Ok((value, data))
}

/// Trains a fresh network on the pair set.
pub fn train(dataset: &PairedPatchSet, unet: UNetConfig, cfg: &TrainConfig) -> Result<Trained> {
    train_with(dataset, unet, cfg, |_| {})
}

/// As [`train`], calling `on_epoch` after every epoch.
pub fn train_with(
    dataset: &PairedPatchSet,
    unet: UNetConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Trained> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidConfig("training set is empty".into()));
    }
    let d = unet.divisor();
    let (h, w) = (dataset.pairs[0].height, dataset.pairs[0].width);
    if h % d != 0 || w % d != 0 {
        return Err(Error::InvalidConfig(format!(
            "patch {h}x{w} not divisible by 2^levels = {d}"
        )));
    }
    // the smallest batch whose bottleneck still has two values per channel
    let min_batch = 2usize.div_ceil((h / d) * (w / d));
    let (net, mut params) = UNet::init(unet, cfg.seed)?;
    let mut opt = AdamW::new(cfg.adamw(), &params)?;
    let mut sched = Plateau::new(cfg.lr, cfg.plateau_factor, cfg.patience)?;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::with_capacity(cfg.max_epochs);
    for epoch in 1..=cfg.max_epochs {
        let mut shuffle = stream(cfg.seed, Domain::Shuffle, epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut shuffle);
        let mut aug_rng = stream(cfg.seed, Domain::Augment, epoch as u64);
        let lr = opt.cfg.lr;
        let mut sum = 0.0;
        let mut data_sum = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < min_batch {
                continue;
            }
            let batch: Vec<PatchPair> = chunk
                .iter()
                .map(|&i| {
                    let p = &dataset.pairs[i];
                    if cfg.augment {
                        augment(p, &mut aug_rng, cfg.quarter_turns)
                    } else {
                        Ok(p.clone())
                    }
                })
                .collect::<Result<_>>()?;
            let (l, dl) = train_step(&net, &mut params, &mut opt, &batch, cfg)?;
            if !l.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            sum += l * chunk.len() as f64;
            data_sum += dl * chunk.len() as f64;
            seen += chunk.len();
        }
        if seen == 0 {
            return Err(Error::InvalidConfig(format!(
                "no batch reaches the minimum size {min_batch}"
            )));
        }
        let rec = EpochRecord {
            epoch,
            lr,
            loss: sum / seen as f64,
            data_loss: data_sum / seen as f64,
        };
        on_epoch(&rec);
        history.push(rec);
        opt.cfg.lr = sched.step(rec.loss);
    }
    params.zero_grad();
    Ok(Trained {
        net,
        params,
        history,
    })
}
