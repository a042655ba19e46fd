//! SGD with Nesterov momentum and a step learning-rate schedule.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use mstat_tensor::io::{read_tensor, write_tensor};
use mstat_tensor::Element;

use crate::config::KvMap;
use crate::error::{MstatError, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    /// Multiplier applied every `decay_every` epochs.
    pub decay: f64,
    pub decay_every: usize,
    pub weight_decay: f64,
    pub momentum: f64,
    pub nesterov: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-3,
            decay: 0.75,
            decay_every: 25,
            weight_decay: 5e-5,
            momentum: 0.9,
            nesterov: true,
        }
    }
}

impl OptimConfig {
    pub const KEYS: [&'static str; 6] = [
        "optim.lr",
        "optim.decay",
        "optim.decay_every",
        "optim.weight_decay",
        "optim.momentum",
        "optim.nesterov",
    ];

    /// Learning rate during 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let steps = epoch.saturating_sub(1) / self.decay_every.max(1);
        self.lr * self.decay.powi(steps as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(MstatError::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.decay > 0.0) || self.decay_every == 0 {
            return Err(MstatError::Config("bad learning-rate decay".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(MstatError::Config("momentum must be in [0, 1), weight decay >= 0".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("optim.lr", self.lr);
        kv.set("optim.decay", self.decay);
        kv.set("optim.decay_every", self.decay_every);
        kv.set("optim.weight_decay", self.weight_decay);
        kv.set("optim.momentum", self.momentum);
        kv.set("optim.nesterov", self.nesterov);
        kv
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let b = OptimConfig::default();
        let cfg = OptimConfig {
            lr: kv.parse_or("optim.lr", b.lr)?,
            decay: kv.parse_or("optim.decay", b.decay)?,
            decay_every: kv.parse_or("optim.decay_every", b.decay_every)?,
            weight_decay: kv.parse_or("optim.weight_decay", b.weight_decay)?,
            momentum: kv.parse_or("optim.momentum", b.momentum)?,
            nesterov: kv.parse_or("optim.nesterov", b.nesterov)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Momentum buffers, one per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<F> {
    pub config: OptimConfig,
    velocity: Vec<Vec<F>>,
}

impl<F: Element> Sgd<F> {
    pub fn new(config: OptimConfig, store: &ParamStore<F>) -> Self {
        Sgd {
            config,
            velocity: store.entries().iter().map(|e| vec![F::zero(); e.data.len()]).collect(),
        }
    }

    /// One update with learning rate `lr`. Weight decay skips vectors and
    /// scalars (biases, norms, residual weights).
    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &[Vec<F>], lr: f64) -> Result<()> {
        if grads.len() != self.velocity.len() {
            return Err(MstatError::Usage("gradient count does not match parameters".into()));
        }
        let mu = F::lit(self.config.momentum);
        let wd = F::lit(self.config.weight_decay);
        let lr = F::lit(lr);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let decay = !store.entry(id).no_decay;
            let v = &mut self.velocity[i];
            let g = &grads[i];
            let w = store.data_mut(id);
            for k in 0..w.len() {
                let mut gk = g[k];
                if decay {
                    gk = gk + wd * w[k];
                }
                v[k] = mu * v[k] + gk;
                let upd = if self.config.nesterov { gk + mu * v[k] } else { v[k] };
                w[k] = w[k] - lr * upd;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for v in &self.velocity {
            write_tensor(&mut w, &[v.len()], v)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::metadata(path)?.len();
        let mut r = BufReader::new(File::open(path)?);
        for v in &mut self.velocity {
            let raw = read_tensor(&mut r)?;
            if raw.shape != [v.len()] {
                return Err(MstatError::Config(format!(
                    "optimizer state holds {:?}, expected [{}] ({bytes} bytes)",
                    raw.shape,
                    v.len()
                )));
            }
            *v = raw.into_vec();
        }
        Ok(())
    }
}
