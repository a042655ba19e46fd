//! Training losses: label-smoothed cross-entropy and batch-hard triplet,
//! applied to every stage head.

use mstat_tensor::{Element, Tensor};

use crate::config::KvMap;
use crate::error::{MstatError, Result};
use crate::model::{HeadLogits, StageOutputs};

/// Where the smoothing mass goes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Smoothing {
    /// `eps / (C - 1)` on every wrong class, `1 - eps` on the true one.
    #[default]
    ExcludeTrue,
    /// `eps / C` on every class including the true one.
    Uniform,
}

impl Smoothing {
    pub fn name(self) -> &'static str {
        match self {
            Smoothing::ExcludeTrue => "exclude_true",
            Smoothing::Uniform => "uniform",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Smoothing::ExcludeTrue, Smoothing::Uniform].into_iter().find(|m| m.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub smoothing: f64,
    pub smoothing_mode: Smoothing,
    pub margin: f64,
    /// Weights of the Stage I, II and III heads.
    pub head_weights: [f64; 3],
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            smoothing: 0.1,
            smoothing_mode: Smoothing::ExcludeTrue,
            margin: 0.3,
            head_weights: [1.0; 3],
        }
    }
}

impl LossConfig {
    pub const KEYS: [&'static str; 4] = ["loss.smoothing", "loss.smoothing_mode", "loss.margin", "loss.head_weights"];

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(MstatError::Config(format!("smoothing {} outside [0, 1)", self.smoothing)));
        }
        if !(self.margin >= 0.0) {
            return Err(MstatError::Config(format!("negative triplet margin {}", self.margin)));
        }
        if self.head_weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(MstatError::Config("head weights must be non-negative".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("loss.smoothing", self.smoothing);
        kv.set("loss.smoothing_mode", self.smoothing_mode.name());
        kv.set("loss.margin", self.margin);
        let w: Vec<String> = self.head_weights.iter().map(f64::to_string).collect();
        kv.set("loss.head_weights", w.join(","));
        kv
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let base = LossConfig::default();
        let mode = match kv.get("loss.smoothing_mode") {
            None => base.smoothing_mode,
            Some(s) => Smoothing::parse(s).ok_or_else(|| MstatError::Config(format!("unknown smoothing mode `{s}`")))?,
        };
        let head_weights = match kv.get("loss.head_weights") {
            None => base.head_weights,
            Some(s) => {
                let parts: Vec<f64> = s
                    .split(',')
                    .map(|p| p.trim().parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| MstatError::Config(format!("bad loss.head_weights `{s}`: {e}")))?;
                parts
                    .try_into()
                    .map_err(|_| MstatError::Config(format!("loss.head_weights needs 3 values, got `{s}`")))?
            }
        };
        let cfg = LossConfig {
            smoothing: kv.parse_or("loss.smoothing", base.smoothing)?,
            smoothing_mode: mode,
            margin: kv.parse_or("loss.margin", base.margin)?,
            head_weights,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Smoothed target distribution for one sample.
pub fn smoothed_targets(classes: usize, label: usize, eps: f64, mode: Smoothing) -> Vec<f64> {
    if classes == 1 {
        return vec![1.0];
    }
    match mode {
        Smoothing::ExcludeTrue => {
            let mut t = vec![eps / (classes - 1) as f64; classes];
            t[label] = 1.0 - eps;
            t
        }
        Smoothing::Uniform => {
            let mut t = vec![eps / classes as f64; classes];
            t[label] += 1.0 - eps;
            t
        }
    }
}

/// Mean cross-entropy of `logits: [B, C]` against smoothed one-hot labels.
pub fn ce_label_smoothing<F: Element>(logits: &Tensor<F>, labels: &[usize], eps: f64, mode: Smoothing) -> Result<Tensor<F>> {
    let (b, c) = match logits.shape() {
        &[b, c] => (b, c),
        s => return Err(MstatError::Usage(format!("logits must be [B, C], got {s:?}"))),
    };
    if labels.len() != b || b == 0 {
        return Err(MstatError::Usage(format!("{} labels for {b} logit rows", labels.len())));
    }
    let mut targets = Vec::with_capacity(b * c);
    for &y in labels {
        if y >= c {
            return Err(MstatError::Usage(format!("label {y} out of range for {c} classes")));
        }
        targets.extend(smoothed_targets(c, y, eps, mode).into_iter().map(F::lit));
    }
    let t = Tensor::from_vec(targets, &[b, c])?;
    Ok(logits.log_softmax(1)?.mul(&t)?.sum_all()?.scale(F::lit(-1.0 / b as f64))?)
}

/// Indices `(positive, negative)` of the hardest pair for every anchor,
/// chosen from a `B x B` distance table. Ties go to the lowest index.
pub fn hardest_pairs(dist: &[f64], labels: &[usize]) -> Result<Vec<(usize, usize)>> {
    let b = labels.len();
    let mut out = Vec::with_capacity(b);
    for a in 0..b {
        let mut pos: Option<usize> = None;
        let mut neg: Option<usize> = None;
        for j in 0..b {
            let dj = dist[a * b + j];
            if labels[j] == labels[a] {
                if j != a && pos.is_none_or(|p| dj > dist[a * b + p]) {
                    pos = Some(j);
                }
            } else if neg.is_none_or(|n| dj < dist[a * b + n]) {
                neg = Some(j);
            }
        }
        let pos = pos.ok_or_else(|| {
            MstatError::DataContract(format!("label {} has a single instance in the batch", labels[a]))
        })?;
        let neg = neg.ok_or_else(|| MstatError::DataContract("batch holds a single identity".into()))?;
        out.push((pos, neg));
    }
    Ok(out)
}

/// Batch-hard triplet loss on Euclidean distances of `embeddings: [B, D]`.
pub fn batch_hard_triplet<F: Element>(embeddings: &Tensor<F>, labels: &[usize], margin: f64) -> Result<Tensor<F>> {
    let (b, d) = match embeddings.shape() {
        &[b, d] => (b, d),
        s => return Err(MstatError::Usage(format!("embeddings must be [B, D], got {s:?}"))),
    };
    if labels.len() != b {
        return Err(MstatError::Usage(format!("{} labels for {b} embeddings", labels.len())));
    }
    let diff = embeddings.reshape(&[b, 1, d])?.sub(&embeddings.reshape(&[1, b, d])?)?;
    let dist = diff.square()?.sum_axis(2)?.sqrt()?.reshape(&[b * b])?;
    let table: Vec<f64> = dist.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
    let pairs = hardest_pairs(&table, labels)?;
    let pos_idx: Vec<usize> = pairs.iter().enumerate().map(|(a, &(p, _))| a * b + p).collect();
    let neg_idx: Vec<usize> = pairs.iter().enumerate().map(|(a, &(_, n))| a * b + n).collect();
    let d_p = dist.gather(&pos_idx)?;
    let d_n = dist.gather(&neg_idx)?;
    let m = Tensor::full(&[b], F::lit(margin))?;
    Ok(d_p.sub(&d_n)?.add(&m)?.relu()?.mean_all()?)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct HeadLoss {
    pub ce: f64,
    pub triplet: f64,
    pub weight: f64,
}

impl HeadLoss {
    pub fn weighted(&self) -> f64 {
        self.weight * (self.ce + self.triplet)
    }
}

pub struct LossBreakdown<F: Element> {
    pub total: Tensor<F>,
    pub heads: [HeadLoss; 3],
}

impl<F: Element> LossBreakdown<F> {
    pub fn total_value(&self) -> f64 {
        self.total.data()[0].to_f64().unwrap_or(f64::NAN)
    }
}

/// Weighted sum over stage heads of CE on the head logits plus triplet on
/// the head feature. Heads with zero weight are skipped entirely.
pub fn multi_head_loss<F: Element>(
    outs: &StageOutputs<F>,
    logits: &HeadLogits<F>,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<LossBreakdown<F>> {
    cfg.validate()?;
    let mut heads = [HeadLoss::default(); 3];
    let mut total: Option<Tensor<F>> = None;
    for i in 0..3 {
        let w = cfg.head_weights[i];
        heads[i].weight = w;
        if w == 0.0 {
            continue;
        }
        let ce = ce_label_smoothing(&logits[i], labels, cfg.smoothing, cfg.smoothing_mode)?;
        let tri = batch_hard_triplet(outs.stage(i), labels, cfg.margin)?;
        heads[i].ce = ce.item()?.to_f64().unwrap_or(f64::NAN);
        heads[i].triplet = tri.item()?.to_f64().unwrap_or(f64::NAN);
        let term = ce.add(&tri)?.scale(F::lit(w))?;
        total = Some(match total {
            None => term,
            Some(t) => t.add(&term)?,
        });
    }
    let total = total.ok_or_else(|| MstatError::Config("all head weights are zero".into()))?;
    Ok(LossBreakdown { total, heads })
}
