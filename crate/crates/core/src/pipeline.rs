//! End-to-end training and evaluation runs.
//!
//! Everything random is derived from the run seed: epoch `e` draws its
//! batches, augmentations and patch shuffles from ChaCha stream `e`, and the
//! evaluation clip of tracklet `i` comes from stream `i` of the eval seed.
//! A run resumed from the checkpoint of epoch `k` therefore replays epochs
//! `k + 1..` exactly like an uninterrupted run.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use mstat_tensor::Tensor;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::KvMap;
use crate::data::{
    load_manifest, load_split, test_clip, test_clip_frames, FrameSampling, PixelAugment, Split, TrainSet, Tracklet,
};
use crate::error::{MstatError, Result};
use crate::model::{Mode, ModelConfig, MstatModel, StageFeatures, StageMask, CHANNELS};
use crate::objectives::{multi_head_loss, LossConfig};
use crate::optim::{OptimConfig, Sgd};
use crate::params::ParamStore;
use crate::proxy::cosine_matrix;
use crate::retrieval::{evaluate, EvalReport, ItemLabel, Protocol};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// `desk` or `full`: the base the `model.*` keys override.
    pub preset: String,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub epochs: usize,
    pub seed: u64,
    pub ids_per_batch: usize,
    pub frame_sampling: FrameSampling,
    pub augment: PixelAugment,
    /// Keep only the newest this many epoch checkpoints (0 keeps all).
    pub keep_checkpoints: usize,
    pub manifest: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
}

const RUN_KEYS: [&str; 12] = [
    "run.epochs",
    "run.seed",
    "run.ids_per_batch",
    "run.frame_sampling",
    "run.keep_checkpoints",
    "augment.flip_prob",
    "augment.crop_prob",
    "augment.crop_padding",
    "augment.erase_prob",
    "paths.manifest",
    "paths.checkpoint_dir",
    "paths.report_dir",
];

impl RunConfig {
    /// Full-scale defaults.
    pub fn full() -> Self {
        RunConfig {
            preset: "full".into(),
            model: ModelConfig::full(1),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            epochs: 200,
            seed: 0,
            ids_per_batch: 12,
            frame_sampling: FrameSampling::Chunked,
            augment: PixelAugment::default(),
            keep_checkpoints: 0,
            manifest: PathBuf::from("data/manifest.jsonl"),
            checkpoint_dir: PathBuf::from("runs/checkpoints"),
            report_dir: PathBuf::from("runs/reports"),
        }
    }

    /// Desk-scale defaults: 32x16 frames, 4-frame clips, 8 ids per batch.
    pub fn desk() -> Self {
        RunConfig {
            preset: "desk".into(),
            model: ModelConfig::desk(1),
            ids_per_batch: 8,
            augment: PixelAugment {
                crop_padding: 2,
                ..PixelAugment::default()
            },
            ..Self::full()
        }
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let known: Vec<&str> = RUN_KEYS
            .iter()
            .chain(&ModelConfig::KEYS)
            .chain(&LossConfig::KEYS)
            .chain(&OptimConfig::KEYS)
            .copied()
            .collect();
        kv.check_known(&known)?;
        let base = match kv.get("model.preset").unwrap_or("full") {
            "full" => RunConfig::full(),
            "desk" => RunConfig::desk(),
            other => return Err(MstatError::Config(format!("unknown preset `{other}`"))),
        };
        let sampling = match kv.get("run.frame_sampling") {
            None => base.frame_sampling,
            Some("chunked") => FrameSampling::Chunked,
            Some("uniform") => FrameSampling::Uniform,
            Some(s) => return Err(MstatError::Config(format!("unknown frame sampling `{s}`"))),
        };
        let a = base.augment;
        let cfg = RunConfig {
            preset: base.preset.clone(),
            model: ModelConfig::from_kv(kv, &base.model)?,
            loss: LossConfig::from_kv(kv)?,
            optim: OptimConfig::from_kv(kv)?,
            epochs: kv.parse_or("run.epochs", base.epochs)?,
            seed: kv.parse_or("run.seed", base.seed)?,
            ids_per_batch: kv.parse_or("run.ids_per_batch", base.ids_per_batch)?,
            frame_sampling: sampling,
            augment: PixelAugment {
                flip_prob: kv.parse_or("augment.flip_prob", a.flip_prob)?,
                crop_prob: kv.parse_or("augment.crop_prob", a.crop_prob)?,
                crop_padding: kv.parse_or("augment.crop_padding", a.crop_padding)?,
                erase_prob: kv.parse_or("augment.erase_prob", a.erase_prob)?,
            },
            keep_checkpoints: kv.parse_or("run.keep_checkpoints", base.keep_checkpoints)?,
            manifest: kv.parse_or("paths.manifest", base.manifest)?,
            checkpoint_dir: kv.parse_or("paths.checkpoint_dir", base.checkpoint_dir)?,
            report_dir: kv.parse_or("paths.report_dir", base.report_dir)?,
        };
        for p in [cfg.augment.flip_prob, cfg.augment.crop_prob, cfg.augment.erase_prob] {
            if !(0.0..=1.0).contains(&p) {
                return Err(MstatError::Config(format!("augmentation probability {p} outside [0, 1]")));
            }
        }
        Ok(cfg)
    }

    /// Effective configuration with every default spelled out.
    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("model.preset", &self.preset);
        kv.merge(&self.model.to_kv());
        kv.merge(&self.loss.to_kv());
        kv.merge(&self.optim.to_kv());
        kv.set("run.epochs", self.epochs);
        kv.set("run.seed", self.seed);
        kv.set("run.ids_per_batch", self.ids_per_batch);
        kv.set(
            "run.frame_sampling",
            match self.frame_sampling {
                FrameSampling::Chunked => "chunked",
                FrameSampling::Uniform => "uniform",
            },
        );
        kv.set("run.keep_checkpoints", self.keep_checkpoints);
        kv.set("augment.flip_prob", self.augment.flip_prob);
        kv.set("augment.crop_prob", self.augment.crop_prob);
        kv.set("augment.crop_padding", self.augment.crop_padding);
        kv.set("augment.erase_prob", self.augment.erase_prob);
        kv.set("paths.manifest", self.manifest.display());
        kv.set("paths.checkpoint_dir", self.checkpoint_dir.display());
        kv.set("paths.report_dir", self.report_dir.display());
        kv
    }
}

/// One machine-readable line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub ce: [f64; 3],
    pub triplet: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub final_checkpoint: PathBuf,
    pub epochs_run: usize,
    pub steps: usize,
    pub last: Option<StepRecord>,
}

pub fn epoch_dir(root: &Path, epoch: usize) -> PathBuf {
    root.join(format!("epoch-{epoch:04}"))
}

fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn save_training_state(
    dir: &Path,
    model: &MstatModel,
    store: &ParamStore<f32>,
    opt: &Sgd<f32>,
    epoch: usize,
    step: usize,
) -> Result<()> {
    model.save_checkpoint(store, dir)?;
    opt.save(&dir.join("optimizer.bin"))?;
    let mut kv = KvMap::new();
    kv.set("epoch", epoch);
    kv.set("step", step);
    fs::write(dir.join("state.txt"), kv.to_text())?;
    Ok(())
}

fn prune_checkpoints(root: &Path, keep: usize, current: usize) -> Result<()> {
    if keep == 0 || current < keep {
        return Ok(());
    }
    let old = current - keep;
    let dir = epoch_dir(root, old);
    if old > 0 && dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    Ok(())
}

/// Trains from scratch, or from `resume` (an epoch checkpoint directory),
/// through `cfg.epochs`. Appends step records to `train_log.jsonl`.
pub fn run_train(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainSummary> {
    cfg.optim.validate()?;
    cfg.loss.validate()?;
    let manifest = load_manifest(&cfg.manifest)?;
    let set = TrainSet::new(load_split(&manifest, Split::Train)?)?;
    let mut model_cfg = cfg.model.clone();
    model_cfg.classes = set.classes();
    let t0 = &set.tracklets[0];
    if (t0.height, t0.width) != (model_cfg.height, model_cfg.width) {
        return Err(MstatError::DataContract(format!(
            "frames are {}x{} but the model expects {}x{}",
            t0.height, t0.width, model_cfg.height, model_cfg.width
        )));
    }
    fs::create_dir_all(&cfg.checkpoint_dir)?;
    fs::create_dir_all(&cfg.report_dir)?;
    let mut effective = cfg.to_kv();
    effective.merge(&model_cfg.to_kv());
    fs::write(cfg.report_dir.join("config.txt"), effective.to_text())?;

    let (model, mut store, mut opt, start, mut step) = match resume {
        Some(dir) => {
            let (model, store) = MstatModel::load_checkpoint::<f32>(dir)?;
            if model.config != model_cfg {
                return Err(MstatError::Config(format!(
                    "checkpoint {} was trained with a different model config",
                    dir.display()
                )));
            }
            let mut opt = Sgd::new(cfg.optim, &store);
            opt.load(&dir.join("optimizer.bin"))?;
            let state = KvMap::parse(&fs::read_to_string(dir.join("state.txt"))?)?;
            let epoch: usize = state.parse_or("epoch", 0)?;
            let step: usize = state.parse_or("step", 0)?;
            (model, store, opt, epoch, step)
        }
        None => {
            let (model, store) = MstatModel::init::<f32>(&model_cfg, cfg.seed)?;
            let opt = Sgd::new(cfg.optim, &store);
            save_training_state(&epoch_dir(&cfg.checkpoint_dir, 0), &model, &store, &opt, 0, 0)?;
            File::create(cfg.report_dir.join("train_log.jsonl"))?;
            (model, store, opt, 0, 0)
        }
    };
    let mut log = BufWriter::new(
        OpenOptions::new()
            .append(true)
            .create(true)
            .open(cfg.report_dir.join("train_log.jsonl"))?,
    );
    let mut last = None;
    let mut last_dir = epoch_dir(&cfg.checkpoint_dir, start);
    for epoch in start + 1..=cfg.epochs {
        let started = Instant::now();
        let lr = cfg.optim.lr_at(epoch);
        let mut rng = stream(cfg.seed, epoch as u64);
        let plan = set.epoch_plan(cfg.ids_per_batch, &mut rng)?;
        for group in plan {
            let batch = set.sample_batch(&group, model_cfg.frames_train, cfg.frame_sampling, &cfg.augment, &mut rng)?;
            let p = store.bind(true)?;
            let x = Tensor::from_vec(batch.clips, &batch.shape)?;
            let outs = model.forward(&p, &x, Mode::Train(&mut rng))?;
            let logits = model.logits(&p, &outs)?;
            let loss = multi_head_loss(&outs, &logits, &batch.labels, &cfg.loss)?;
            let grads = p.grads(&loss.total.backward()?);
            drop(p);
            opt.step(&mut store, &grads, lr)?;
            step += 1;
            let rec = StepRecord {
                epoch,
                step,
                lr,
                total: loss.total_value(),
                ce: loss.heads.map(|h| h.ce),
                triplet: loss.heads.map(|h| h.triplet),
            };
            let line = serde_json::to_string(&rec).map_err(|e| MstatError::Config(e.to_string()))?;
            writeln!(log, "{line}")?;
            last = Some(rec);
        }
        log.flush()?;
        last_dir = epoch_dir(&cfg.checkpoint_dir, epoch);
        save_training_state(&last_dir, &model, &store, &opt, epoch, step)?;
        prune_checkpoints(&cfg.checkpoint_dir, cfg.keep_checkpoints, epoch)?;
        if let Some(r) = &last {
            log::info!(
                "epoch {epoch}/{} lr {lr:.2e} loss {:.4} ({:.1}s)",
                cfg.epochs,
                r.total,
                started.elapsed().as_secs_f64()
            );
        }
    }
    let final_dir = if cfg.epochs == 0 {
        last_dir
    } else {
        let dir = cfg.checkpoint_dir.join("final");
        save_training_state(&dir, &model, &store, &opt, cfg.epochs.max(start), step)?;
        dir
    };
    let sim = proxy_similarity(&model, &store);
    let json = serde_json::to_string_pretty(&sim).map_err(|e| MstatError::Config(e.to_string()))?;
    fs::write(cfg.report_dir.join("aap_cosine.json"), json + "\n")?;
    Ok(TrainSummary {
        final_checkpoint: final_dir,
        epochs_run: cfg.epochs.saturating_sub(start),
        steps: step,
        last,
    })
}

fn clip_seed(seed: u64, index: usize) -> u64 {
    stream(seed, index as u64).next_u64()
}

fn check_frame_size(cfg: &ModelConfig, i: usize, t: &Tracklet) -> Result<()> {
    if (t.height, t.width) != (cfg.height, cfg.width) {
        return Err(MstatError::DataContract(format!(
            "tracklet {i} (id {}) is {}x{}, model expects {}x{}",
            t.id, t.height, t.width, cfg.height, cfg.width
        )));
    }
    Ok(())
}

const GALLERY_SEED: u64 = 0x9a11_e41e;

/// Eval-mode stage features for every tracklet, in parallel. Clip `i` is
/// sampled from stream `i` of `seed`.
pub fn extract_features(
    model: &MstatModel,
    store: &ParamStore<f32>,
    tracklets: &[Tracklet],
    seed: u64,
) -> Result<Vec<StageFeatures>> {
    let cfg = &model.config;
    tracklets
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            check_frame_size(cfg, i, t)?;
            let clip = test_clip(t, cfg.frames_test, clip_seed(seed, i));
            let x = Tensor::from_vec(clip, &[1, cfg.frames_test, CHANNELS, t.height, t.width])?;
            let p = store.bind(false)?;
            let outs = model.forward(&p, &x, Mode::Eval)?;
            Ok(StageFeatures::from_outputs(&outs).remove(0))
        })
        .collect()
}

fn labels(ts: &[Tracklet]) -> Vec<ItemLabel> {
    ts.iter().map(|t| ItemLabel { id: t.id, camera: t.camera }).collect()
}

fn reps(feats: &[StageFeatures], mask: StageMask) -> Result<Vec<Vec<f64>>> {
    feats.iter().map(|f| f.representation(mask)).collect()
}

/// Evaluates a checkpoint on the query and gallery splits, one report per
/// stage mask. With [`Protocol::SelfRetrieval`] every test tracklet is
/// both query and gallery.
pub fn run_eval(
    manifest_path: &Path,
    checkpoint: &Path,
    protocol: Protocol,
    masks: &[StageMask],
    seed: u64,
    keep_cmc: bool,
) -> Result<Vec<EvalReport>> {
    let (model, store) = MstatModel::load_checkpoint::<f32>(checkpoint)?;
    let manifest = load_manifest(manifest_path)?;
    let query = load_split(&manifest, Split::Query)?;
    let gallery = load_split(&manifest, Split::Gallery)?;
    let (query, gallery) = match protocol {
        Protocol::SelfRetrieval => {
            let all: Vec<Tracklet> = query.into_iter().chain(gallery).collect();
            (all.clone(), all)
        }
        _ => (query, gallery),
    };
    if query.is_empty() {
        return Err(MstatError::DataContract("manifest has no query split".into()));
    }
    if gallery.is_empty() {
        return Err(MstatError::DataContract("manifest has no gallery split".into()));
    }
    let q_out = extract_features(&model, &store, &query, seed)?;
    let g_out = if protocol == Protocol::SelfRetrieval {
        q_out.clone()
    } else {
        extract_features(&model, &store, &gallery, seed ^ GALLERY_SEED)?
    };
    masks
        .iter()
        .map(|&m| {
            evaluate(
                &reps(&q_out, m)?,
                &labels(&query),
                &reps(&g_out, m)?,
                &labels(&gallery),
                protocol,
                &m.name(),
                keep_cmc,
            )
        })
        .collect()
}

/// Writes reports as pretty JSON plus an aligned text table.
pub fn write_reports(dir: &Path, reports: &[EvalReport]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(reports).map_err(|e| MstatError::Config(e.to_string()))?;
    fs::write(dir.join("eval_report.json"), json + "\n")?;
    fs::write(dir.join("eval_report.txt"), report_table(reports))?;
    Ok(())
}

pub fn report_table(reports: &[EvalReport]) -> String {
    let mut s = format!(
        "{:<10} {:>7} {:>7} {:>7} {:>7} {:>7}\n",
        "stages", "rank1", "rank5", "rank10", "rank20", "mAP"
    );
    for r in reports {
        s += &format!(
            "{:<10} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4}\n",
            r.mask, r.rank1, r.rank5, r.rank10, r.rank20, r.map
        );
    }
    s
}

/// Sidecar entry for one exported attention tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapRecord {
    pub tracklet: usize,
    pub id: u32,
    pub camera: u32,
    /// `stage1.aap`, `stage2.iap` or `stage3.iap`.
    pub module: String,
    /// Source frame of each clip slot; token `j` of the flattened clip is
    /// slot `j / patches`, patch `j % patches`.
    pub frames: Vec<usize>,
    pub patches: usize,
    /// IAP rows start with the class token.
    pub class_row: bool,
    pub shape: Vec<usize>,
    pub file: String,
}

/// Dumps the proxy attention of the first `limit` tracklets of `split`,
/// using the same clips as evaluation. Writes one raw tensor per module
/// and tracklet plus `maps.jsonl`.
pub fn export_attention_maps(
    manifest_path: &Path,
    checkpoint: &Path,
    split: Split,
    limit: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<MapRecord>> {
    let (model, store) = MstatModel::load_checkpoint::<f32>(checkpoint)?;
    let manifest = load_manifest(manifest_path)?;
    let tracklets = load_split(&manifest, split)?;
    if tracklets.is_empty() {
        return Err(MstatError::DataContract(format!("manifest has no {split:?} split").to_lowercase()));
    }
    let seed = if split == Split::Gallery { seed ^ GALLERY_SEED } else { seed };
    let cfg = &model.config;
    fs::create_dir_all(out_dir)?;
    let mut records = Vec::new();
    for (i, t) in tracklets.iter().enumerate().take(limit) {
        check_frame_size(cfg, i, t)?;
        let cs = clip_seed(seed, i);
        let clip = test_clip(t, cfg.frames_test, cs);
        let x = Tensor::from_vec(clip, &[1, cfg.frames_test, CHANNELS, t.height, t.width])?;
        let p = store.bind(false)?;
        let outs = model.forward(&p, &x, Mode::Eval)?;
        for (module, maps, class_row) in [
            ("stage1.aap", &outs.aap_maps, false),
            ("stage2.iap", &outs.iap_maps[0], true),
            ("stage3.iap", &outs.iap_maps[1], true),
        ] {
            let shape = maps.shape()[1..].to_vec();
            let file = format!("{:?}{i:04}_{module}.mstn", split).to_lowercase();
            let mut w = BufWriter::new(File::create(out_dir.join(&file))?);
            mstat_tensor::io::write_tensor(&mut w, &shape, maps.data())?;
            w.flush()?;
            records.push(MapRecord {
                tracklet: i,
                id: t.id,
                camera: t.camera,
                module: module.into(),
                frames: test_clip_frames(t.len(), cfg.frames_test, cs),
                patches: cfg.patches(),
                class_row,
                shape,
                file,
            });
        }
    }
    let mut side = BufWriter::new(File::create(out_dir.join("maps.jsonl"))?);
    for r in &records {
        let line = serde_json::to_string(r).map_err(|e| MstatError::Config(e.to_string()))?;
        writeln!(side, "{line}")?;
    }
    side.flush()?;
    Ok(records)
}

/// Pairwise cosines of the Stage-I attribute proxies with the largest and
/// mean absolute off-diagonal value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxySimilarity {
    pub max_offdiag: f64,
    pub mean_offdiag: f64,
    pub cosine: Vec<Vec<f64>>,
}

pub fn proxy_similarity(model: &MstatModel, store: &ParamStore<f32>) -> ProxySimilarity {
    let rows = model.aap.proxies(store);
    let (max, mean) = crate::proxy::anisotropy(&rows);
    ProxySimilarity {
        max_offdiag: max,
        mean_offdiag: mean,
        cosine: cosine_matrix(&rows),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trip_and_unknown_keys() {
        let mut kv = KvMap::new();
        kv.set("model.preset", "desk");
        kv.set("run.epochs", 3);
        let cfg = RunConfig::from_kv(&kv).unwrap();
        assert_eq!(cfg.model.patches(), 8);
        assert_eq!(cfg.epochs, 3);
        assert_eq!(RunConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
        kv.set("run.epochz", 1);
        assert!(RunConfig::from_kv(&kv).is_err());
    }
}
