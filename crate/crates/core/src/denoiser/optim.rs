use crate::autodiff::ParamStore;
use crate::error::{Error, Result};

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            weight_decay: 0.0,
        }
    }
}

/// Adam with decoupled weight decay. Only trainable parameters move.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, store: &ParamStore) -> Result<Self> {
        if !(cfg.lr > 0.0 && (0.0..1.0).contains(&cfg.beta1) && (0.0..1.0).contains(&cfg.beta2)) {
            return Err(Error::InvalidConfig(format!("invalid AdamW settings {cfg:?}")));
        }
        if cfg.weight_decay < 0.0 {
            return Err(Error::InvalidConfig("weight decay must be >= 0".into()));
        }
        let slots: Vec<Vec<f64>> = store
            .iter()
            .map(|p| vec![0.0; if p.kind.trainable() { p.value.len() } else { 0 }])
            .collect();
        Ok(Self {
            cfg,
            m: slots.clone(),
            v: slots,
            t: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update from the gradients currently in `store`.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.t += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id);
            if !p.kind.trainable() {
                continue;
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (((theta, &g), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *theta -= lr * (mhat / (vhat.sqrt() + ADAM_EPS) + weight_decay * *theta);
            }
        }
    }
}

/// Halves the learning rate after `patience` consecutive epochs without a
/// relative improvement of `threshold` over the best loss so far.
#[derive(Debug, Clone, PartialEq)]
pub struct Plateau {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub threshold: f64,
    pub min_lr: f64,
    best: f64,
    bad_epochs: usize,
}

impl Plateau {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Result<Self> {
        if !(lr > 0.0) || !(factor > 0.0 && factor < 1.0) || patience < 1 {
            return Err(Error::InvalidConfig(format!(
                "plateau schedule: lr {lr}, factor {factor}, patience {patience}"
            )));
        }
        Ok(Self {
            lr,
            factor,
            patience,
            threshold: 1e-4,
            min_lr: 1e-6,
            best: f64::INFINITY,
            bad_epochs: 0,
        })
    }

    /// Records one epoch loss and returns the learning rate for the next
    /// epoch.
    pub fn step(&mut self, loss: f64) -> f64 {
        if loss < self.best * (1.0 - self.threshold) {
            self.best = loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                self.lr = (self.lr * self.factor).max(self.min_lr);
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}
