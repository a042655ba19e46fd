//! Finite-difference gradient suites for every differentiable module.
//!
//! Each case builds a small parameter store (inputs are parameters too),
//! reduces the op output to a scalar with fixed random weights, and
//! compares backprop against central differences per parameter tensor.

use mstat_tensor::fault::set_softmax_backward_sign_flip;
use mstat_tensor::{relative_error, Tensor};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{self_attention, spatial_attention, temporal_attention, AttentionParams, TokenSeq};
use crate::error::{MstatError, Result};
use crate::model::{Mode, ModelConfig, MstatModel, StageOutputs};
use crate::objectives::{batch_hard_triplet, ce_label_smoothing, multi_head_loss, LossConfig, Smoothing};
use crate::params::{Bound, Init, ParamStore};
use crate::proxy::{AapBank, DoubleNorm, IapBank};
use crate::sta::{a_sta_block, sta_block, AStaBlock, NormParams, StaBlock};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Tensor,
    Attention,
    Sta,
    Proxy,
    Norm,
    Objectives,
    Model,
}

impl Scope {
    pub const ALL: [Scope; 7] = [
        Scope::Tensor,
        Scope::Attention,
        Scope::Sta,
        Scope::Proxy,
        Scope::Norm,
        Scope::Objectives,
        Scope::Model,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scope::Tensor => "tensor",
            Scope::Attention => "attention",
            Scope::Sta => "sta",
            Scope::Proxy => "proxy",
            Scope::Norm => "norm",
            Scope::Objectives => "objectives",
            Scope::Model => "model",
        }
    }

    /// `"all"` or a comma-separated list of scope names.
    pub fn parse_list(s: &str) -> Result<Vec<Scope>> {
        if s.trim() == "all" {
            return Ok(Scope::ALL.to_vec());
        }
        s.split(',')
            .map(|part| {
                let part = part.trim();
                Scope::ALL
                    .into_iter()
                    .find(|sc| sc.name() == part)
                    .ok_or_else(|| MstatError::Usage(format!("unknown gradcheck scope '{part}'")))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradcheckOptions {
    pub seeds: u64,
    pub tolerance: f64,
    pub step: f64,
    /// Coordinates probed per parameter tensor; larger tensors are sampled.
    pub max_coords: usize,
    /// Mutation hook: flips the sign of the softmax backward pass.
    pub flip_softmax_backward: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            seeds: 5,
            tolerance: 1e-4,
            step: 1e-6,
            max_coords: 24,
            flip_softmax_backward: false,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TensorCheck {
    pub case: String,
    pub seed: u64,
    pub param: String,
    pub coords: usize,
    pub rel_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteSummary {
    pub scope: Scope,
    pub checks: usize,
    pub worst_rel_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub suites: Vec<SuiteSummary>,
    pub failures: Vec<TensorCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed)
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:<12}{:>8}{:>14}  status\n", "scope", "checks", "worst");
        for s in &self.suites {
            out.push_str(&format!(
                "{:<12}{:>8}{:>14.3e}  {}\n",
                s.scope.name(),
                s.checks,
                s.worst_rel_err,
                if s.passed { "PASS" } else { "FAIL" }
            ));
        }
        for f in self.failures.iter().take(20) {
            out.push_str(&format!(
                "  failed: {} seed {} {} rel err {:.3e}\n",
                f.case, f.seed, f.param, f.rel_err
            ));
        }
        out
    }
}

type LossFn = Box<dyn Fn(&Bound<f64>) -> Result<Tensor<f64>>>;

struct Built {
    store: ParamStore<f64>,
    loss: LossFn,
}

struct Case {
    name: &'static str,
    scope: Scope,
    build: fn(u64) -> Result<Built>,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn input(store: &mut ParamStore<f64>, name: &str, shape: &[usize], rng: &mut ChaCha8Rng) -> crate::params::ParamId {
    let v = uniform(rng, shape.iter().product());
    store.add(name, shape, Init::Values(v), rng)
}

/// Moves vectors and scalars off their neutral init so residual weights,
/// gains and biases all carry signal.
fn jitter_small_params(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for id in store.ids().collect::<Vec<_>>() {
        if store.entry(id).shape.len() <= 1 {
            for v in store.data_mut(id) {
                *v += rng.random_range(-0.5..0.5);
            }
        }
    }
}

/// `sum(y * w)` with `w` drawn from `seed`.
fn weighted(y: &Tensor<f64>, seed: u64) -> Result<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f00d ^ y.numel() as u64);
    let w = Tensor::from_vec(uniform(&mut rng, y.numel()), y.shape())?;
    Ok(y.mul(&w)?.sum_all()?)
}

fn seq_loss(seq: &TokenSeq<f64>, seed: u64) -> Result<Tensor<f64>> {
    let mut l = weighted(&seq.tokens, seed)?;
    if let Some(c) = &seq.class_token {
        l = l.add(&weighted(c, seed + 1)?)?;
    }
    Ok(l)
}

const D: usize = 8;
const HEADS: usize = 2;

fn cases() -> Vec<Case> {
    vec![
        Case { name: "matmul", scope: Scope::Tensor, build: |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let a = input(&mut store, "a", &[3, 4], &mut rng);
            let b = input(&mut store, "b", &[4, 5], &mut rng);
            Ok(Built { store, loss: Box::new(move |p| weighted(&p.get(a).matmul(p.get(b))?, seed)) })
        }},
        Case { name: "bmm", scope: Scope::Tensor, build: |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let a = input(&mut store, "a", &[2, 3, 4], &mut rng);
            let b = input(&mut store, "b", &[2, 5, 4], &mut rng);
            Ok(Built { store, loss: Box::new(move |p| weighted(&p.get(a).bmm(p.get(b), false, true)?, seed)) })
        }},
        Case { name: "softmax", scope: Scope::Tensor, build: |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let x = input(&mut store, "x", &[3, 4, 5], &mut rng);
            Ok(Built { store, loss: Box::new(move |p| {
                weighted(&p.get(x).softmax(2)?, seed)?.add(&weighted(&p.get(x).softmax(1)?, seed + 1)?).map_err(Into::into)
            })})
        }},
        Case { name: "log_softmax", scope: Scope::Tensor, build: |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let x = input(&mut store, "x", &[4, 6], &mut rng);
            Ok(Built { store, loss: Box::new(move |p| weighted(&p.get(x).log_softmax(1)?, seed)) })
        }},
        Case { name: "l1_normalize", scope: Scope::Tensor, build: |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let x = input(&mut store, "x", &[3, 5, 4], &mut rng);
            Ok(Built { store, loss: Box::new(move |p| weighted(&p.get(x).l1_normalize(1, 1e-12)?, seed)) })
        }},
        Case { name: "shape_ops", scope: Scope::Tensor, build: |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let x = input(&mut store, "x", &[2, 3, 4], &mut rng);
            Ok(Built { store, loss: Box::new(move |p| {
                let y = p.get(x).permute(&[2, 0, 1])?.reshape(&[4, 6])?;
                let y = y.mul(&y)?.sqrt()?.relu()?.mean_axis(1)?;
                let z = Tensor::concat(&[&p.get(x).narrow(2, 1, 2)?, &p.get(x).narrow(2, 0, 1)?], 2)?.sum_axis(1)?;
                weighted(&y, seed)?.add(&weighted(&z, seed + 1)?).map_err(Into::into)
            })})
        }},
        Case { name: "self_attention", scope: Scope::Attention, build: |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let att = AttentionParams::new(&mut store, "sa", D, HEADS, &mut rng)?;
            let x = input(&mut store, "x", &[2, 5, D], &mut rng);
            jitter_small_params(&mut store, &mut rng);
            Ok(Built { store, loss: Box::new(move |p| weighted(&self_attention(&att, p, p.get(x))?.output, seed)) })
        }},
        Case { name: "temporal_attention", scope: Scope::Attention, build: |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let att = AttentionParams::new(&mut store, "sa_t", D, HEADS, &mut rng)?;
            let x = input(&mut store, "x", &[1, 3, 4, D], &mut rng);
            jitter_small_params(&mut store, &mut rng);
            Ok(Built { store, loss: Box::new(move |p| weighted(&temporal_attention(&att, p, p.get(x))?.output, seed)) })
        }},
        Case { name: "spatial_attention", scope: Scope::Attention, build: |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let att = AttentionParams::new(&mut store, "sa_s", D, HEADS, &mut rng)?;
            let x = input(&mut store, "x", &[1, 3, 4, D], &mut rng);
            jitter_small_params(&mut store, &mut rng);
            Ok(Built { store, loss: Box::new(move |p| weighted(&spatial_attention(&att, p, p.get(x))?.output, seed)) })
        }},
        Case { name: "sta_block", scope: Scope::Sta, build: |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let blk = StaBlock::new(&mut store, "sta", D, HEADS, false, &mut rng)?;
            let x = input(&mut store, "x", &[1, 3, 4, D], &mut rng);
            let c = input(&mut store, "cls", &[1, D], &mut rng);
            jitter_small_params(&mut store, &mut rng);
            Ok(Built { store, loss: Box::new(move |p| {
                let seq = TokenSeq::new(p.get(x).clone(), Some(p.get(c).clone()))?;
                seq_loss(&sta_block(&seq, &blk, p)?, seed)
            })})
        }},
        Case { name: "sta_block_ffn", scope: Scope::Sta, build: |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let blk = StaBlock::new(&mut store, "sta", D, HEADS, true, &mut rng)?;
            let x = input(&mut store, "x", &[1, 2, 3, D], &mut rng);
            let c = input(&mut store, "cls", &[1, D], &mut rng);
            jitter_small_params(&mut store, &mut rng);
            Ok(Built { store, loss: Box::new(move |p| {
                let seq = TokenSeq::new(p.get(x).clone(), Some(p.get(c).clone()))?;
                seq_loss(&sta_block(&seq, &blk, p)?, seed)
            })})
        }},
        Case { name: "a_sta_block", scope: Scope::Sta, build: |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let blk = AStaBlock::new(&mut store, "asta", D, HEADS, 2, 4, false, &mut rng)?;
            let x = input(&mut store, "x", &[1, 3, 4, D], &mut rng);
            let c = input(&mut store, "cls", &[1, D], &mut rng);
            jitter_small_params(&mut store, &mut rng);
            Ok(Built { store, loss: Box::new(move |p| {
                let seq = TokenSeq::new(p.get(x).clone(), Some(p.get(c).clone()))?;
                seq_loss(&a_sta_block(&seq, &blk, p)?, seed)
            })})
        }},
        Case { name: "aap", scope: Scope::Proxy, build: |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let bank = AapBank::new(&mut store, "aap", D, HEADS, 3, &mut rng)?;
            let x = input(&mut store, "x", &[2, 6, D], &mut rng);
            Ok(Built { store, loss: Box::new(move |p| weighted(&bank.forward(p, p.get(x))?.output, seed)) })
        }},
        Case { name: "iap", scope: Scope::Proxy, build: |seed| iap_case(seed, DoubleNorm::TokenL1PrototypeSoftmax) },
        Case { name: "iap_prototype_l1", scope: Scope::Proxy, build: |seed| iap_case(seed, DoubleNorm::PrototypeL1TokenSoftmax) },
        Case { name: "iap_softmax", scope: Scope::Proxy, build: |seed| iap_case(seed, DoubleNorm::PrototypeSoftmax) },
        Case { name: "layer_norm", scope: Scope::Norm, build: |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let ln = NormParams::new(&mut store, "ln", D, &mut rng);
            let x = input(&mut store, "x", &[3, 4, D], &mut rng);
            jitter_small_params(&mut store, &mut rng);
            Ok(Built { store, loss: Box::new(move |p| weighted(&ln.apply(p, p.get(x))?, seed)) })
        }},
        Case { name: "ce_exclude_true", scope: Scope::Objectives, build: |seed| ce_case(seed, Smoothing::ExcludeTrue) },
        Case { name: "ce_uniform", scope: Scope::Objectives, build: |seed| ce_case(seed, Smoothing::Uniform) },
        Case { name: "triplet", scope: Scope::Objectives, build: |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let e = input(&mut store, "emb", &[6, 5], &mut rng);
            let labels = vec![0, 0, 1, 1, 2, 2];
            // A margin well above typical distances keeps every hinge active.
            Ok(Built { store, loss: Box::new(move |p| batch_hard_triplet(p.get(e), &labels, 4.0)) })
        }},
        Case { name: "multi_head_loss", scope: Scope::Objectives, build: |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let a = input(&mut store, "attr", &[4, 6], &mut rng);
            let c2 = input(&mut store, "c2", &[4, 3], &mut rng);
            let c3 = input(&mut store, "c3", &[4, 3], &mut rng);
            let l: Vec<_> = (0..3).map(|i| input(&mut store, &format!("logits{i}"), &[4, 3], &mut rng)).collect();
            let labels = vec![0, 0, 2, 2];
            let cfg = LossConfig { margin: 5.0, head_weights: [1.0, 0.5, 2.0], ..LossConfig::default() };
            Ok(Built { store, loss: Box::new(move |p| {
                let outs = StageOutputs {
                    attr_rep: p.get(a).clone(),
                    c2: p.get(c2).clone(),
                    c3: p.get(c3).clone(),
                    aap_maps: Tensor::zeros(&[1]),
                    iap_maps: [Tensor::zeros(&[1]), Tensor::zeros(&[1])],
                };
                let logits = [p.get(l[0]).clone(), p.get(l[1]).clone(), p.get(l[2]).clone()];
                Ok(multi_head_loss(&outs, &logits, &labels, &cfg)?.total)
            })})
        }},
        Case { name: "tiny_model", scope: Scope::Model, build: |seed| {
            let cfg = ModelConfig::tiny(3);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (model, mut store) = MstatModel::init::<f64>(&cfg, seed)?;
            jitter_small_params(&mut store, &mut rng);
            let video = uniform(&mut rng, 4 * cfg.frames_train * 3 * cfg.height * cfg.width);
            let shape = [4, cfg.frames_train, 3, cfg.height, cfg.width];
            let labels = vec![0, 0, 1, 1];
            let loss_cfg = LossConfig { margin: 5.0, ..LossConfig::default() };
            Ok(Built { store, loss: Box::new(move |p| {
                let v = Tensor::from_vec(video.clone(), &shape)?;
                let outs = model.forward(p, &v, Mode::Eval)?;
                let logits = model.logits(p, &outs)?;
                Ok(multi_head_loss(&outs, &logits, &labels, &loss_cfg)?.total)
            })})
        }},
    ]
}

fn iap_case(seed: u64, norm: DoubleNorm) -> Result<Built> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let bank = IapBank::new(&mut store, "iap", D, HEADS, 3, norm, &mut rng)?;
    let x = input(&mut store, "x", &[2, 5, D], &mut rng);
    jitter_small_params(&mut store, &mut rng);
    Ok(Built {
        store,
        loss: Box::new(move |p| weighted(&bank.forward(p, p.get(x))?.output, seed)),
    })
}

fn ce_case(seed: u64, mode: Smoothing) -> Result<Built> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let x = input(&mut store, "logits", &[5, 4], &mut rng);
    let labels = vec![0, 3, 1, 1, 2];
    Ok(Built {
        store,
        loss: Box::new(move |p| ce_label_smoothing(p.get(x), &labels, 0.1, mode)),
    })
}

fn check_case(case: &Case, seed: u64, opts: &GradcheckOptions) -> Result<Vec<TensorCheck>> {
    let Built { mut store, loss } = (case.build)(seed)?;
    let bound = store.bind(true)?;
    let grads = loss(&bound)?.backward()?;
    let analytic = bound.grads(&grads);
    let mut out = Vec::new();
    let mut pick = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(1));
    for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
        let len = store.entry(id).data.len();
        let coords: Vec<usize> = if len <= opts.max_coords {
            (0..len).collect()
        } else {
            let mut c = sample(&mut pick, len, opts.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        let mut numeric = Vec::with_capacity(coords.len());
        for &k in &coords {
            let orig = store.entry(id).data[k];
            store.data_mut(id)[k] = orig + opts.step;
            let up = loss(&store.bind(false)?)?.item()?;
            store.data_mut(id)[k] = orig - opts.step;
            let down = loss(&store.bind(false)?)?.item()?;
            store.data_mut(id)[k] = orig;
            numeric.push((up - down) / (2.0 * opts.step));
        }
        let picked: Vec<f64> = coords.iter().map(|&k| analytic[i][k]).collect();
        let rel_err = relative_error(&picked, &numeric);
        out.push(TensorCheck {
            case: case.name.to_string(),
            seed,
            param: store.entry(id).name.clone(),
            coords: coords.len(),
            rel_err,
            passed: rel_err <= opts.tolerance,
        });
    }
    Ok(out)
}

/// Names of the cases a scope covers.
pub fn case_names(scope: Scope) -> Vec<&'static str> {
    cases().into_iter().filter(|c| c.scope == scope).map(|c| c.name).collect()
}

/// Runs every case of the selected scopes over `opts.seeds` seeds.
pub fn run_gradcheck(scopes: &[Scope], opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let all = cases();
    let mut suites = Vec::new();
    let mut failures = Vec::new();
    set_softmax_backward_sign_flip(opts.flip_softmax_backward);
    let result = (|| -> Result<()> {
        for &scope in scopes {
            let mut checks = 0;
            let mut worst = 0.0f64;
            let mut passed = true;
            for case in all.iter().filter(|c| c.scope == scope) {
                for seed in 0..opts.seeds {
                    for c in check_case(case, seed, opts)? {
                        checks += 1;
                        worst = worst.max(c.rel_err);
                        if !c.passed || !c.rel_err.is_finite() {
                            passed = false;
                            failures.push(c);
                        }
                    }
                }
            }
            suites.push(SuiteSummary {
                scope,
                checks,
                worst_rel_err: worst,
                passed,
            });
        }
        Ok(())
    })();
    set_softmax_backward_sign_flip(false);
    result?;
    Ok(GradcheckReport {
        tolerance: opts.tolerance,
        suites,
        failures,
    })
}
