//! Three-stage MSTAT assembly.
//!
//! Stage I runs STA blocks over embedded patch tokens and pools the final
//! tokens into attribute representations with AAP. Stage II continues the
//! same token stream through more STA blocks, then re-codes the class token
//! together with all patch tokens through IAP. Stage III swaps in a fresh
//! class token, runs A-STA blocks on the pre-IAP patch stream, and taps the
//! class token through its own IAP. Each stage feeds a linear classifier.

use std::fs;
use std::path::Path;

use mstat_tensor::{Element, Tensor};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::TokenSeq;
use crate::augment::{tps_apply, TpsConfig};
use crate::config::KvMap;
use crate::error::{MstatError, Result};
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::proxy::{AapBank, DoubleNorm, IapBank};
use crate::sta::{a_sta_block, sta_block, AStaBlock, NormParams, StaBlock};

pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    /// Frames per training clip.
    pub frames_train: usize,
    /// Frames per evaluation clip.
    pub frames_test: usize,
    pub stage1_depth: usize,
    pub stage2_depth: usize,
    pub stage3_depth: usize,
    /// Attribute proxies pooled at the end of Stage I.
    pub stage1_attributes: usize,
    /// Attribute tokens per frame inside A-STA blocks.
    pub asta_attributes: usize,
    /// Identity prototypes per IAP bank.
    pub prototypes: usize,
    pub heads: usize,
    pub classes: usize,
    pub double_norm: DoubleNorm,
    pub ffn: bool,
    pub tps: TpsConfig,
}

impl ModelConfig {
    /// 224x112 frames, 16-pixel patches, 8-frame training clips.
    pub fn full(classes: usize) -> Self {
        ModelConfig {
            height: 224,
            width: 112,
            patch: 16,
            frames_train: 8,
            frames_test: 32,
            stage1_depth: 8,
            stage2_depth: 3,
            stage3_depth: 3,
            stage1_attributes: 24,
            asta_attributes: 24,
            prototypes: 64,
            heads: 12,
            classes,
            double_norm: DoubleNorm::default(),
            ffn: false,
            tps: TpsConfig::default(),
        }
    }

    /// 32x16 frames, 8-pixel patches (N = 8, d = 192), 4-frame clips.
    pub fn desk(classes: usize) -> Self {
        ModelConfig {
            height: 32,
            width: 16,
            patch: 8,
            frames_train: 4,
            frames_test: 8,
            stage1_attributes: 8,
            asta_attributes: 4,
            prototypes: 16,
            heads: 3,
            ..Self::full(classes)
        }
    }

    /// Smallest useful shape, for gradient checks.
    pub fn tiny(classes: usize) -> Self {
        ModelConfig {
            height: 4,
            width: 4,
            patch: 2,
            frames_train: 2,
            frames_test: 2,
            stage1_depth: 1,
            stage2_depth: 1,
            stage3_depth: 1,
            stage1_attributes: 2,
            asta_attributes: 2,
            prototypes: 3,
            heads: 1,
            classes,
            double_norm: DoubleNorm::default(),
            ffn: false,
            tps: TpsConfig::disabled(),
        }
    }

    pub fn patches(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn dim(&self) -> usize {
        CHANNELS * self.patch * self.patch
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || !self.height.is_multiple_of(self.patch) || !self.width.is_multiple_of(self.patch) {
            return Err(MstatError::Config(format!(
                "frame {}x{} is not divisible into {}-pixel patches",
                self.height, self.width, self.patch
            )));
        }
        if self.height == 0 || self.width == 0 {
            return Err(MstatError::Config("frame size must be positive".into()));
        }
        if self.heads == 0 || !self.dim().is_multiple_of(self.heads) {
            return Err(MstatError::Config(format!(
                "embedding width {} is not divisible by {} heads",
                self.dim(),
                self.heads
            )));
        }
        if self.frames_train == 0 || self.frames_test == 0 {
            return Err(MstatError::Config("clips need at least one frame".into()));
        }
        if self.stage1_attributes == 0 || self.asta_attributes == 0 || self.prototypes == 0 {
            return Err(MstatError::Config("proxy counts must be positive".into()));
        }
        if self.classes == 0 {
            return Err(MstatError::Config("need at least one training identity".into()));
        }
        self.tps.validate(self.patches())
    }

    pub const KEYS: [&'static str; 18] = [
        "model.height",
        "model.width",
        "model.patch",
        "model.frames_train",
        "model.frames_test",
        "model.stage1_depth",
        "model.stage2_depth",
        "model.stage3_depth",
        "model.stage1_attributes",
        "model.asta_attributes",
        "model.prototypes",
        "model.heads",
        "model.classes",
        "model.double_norm",
        "model.ffn",
        "model.tps_probability",
        "model.tps_positions",
        "model.preset",
    ];

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("model.height", self.height);
        kv.set("model.width", self.width);
        kv.set("model.patch", self.patch);
        kv.set("model.frames_train", self.frames_train);
        kv.set("model.frames_test", self.frames_test);
        kv.set("model.stage1_depth", self.stage1_depth);
        kv.set("model.stage2_depth", self.stage2_depth);
        kv.set("model.stage3_depth", self.stage3_depth);
        kv.set("model.stage1_attributes", self.stage1_attributes);
        kv.set("model.asta_attributes", self.asta_attributes);
        kv.set("model.prototypes", self.prototypes);
        kv.set("model.heads", self.heads);
        kv.set("model.classes", self.classes);
        kv.set("model.double_norm", self.double_norm.name());
        kv.set("model.ffn", self.ffn);
        kv.set("model.tps_probability", self.tps.probability);
        kv.set("model.tps_positions", self.tps.positions);
        kv
    }

    /// Reads `model.*` keys over `base`; absent keys keep the base values.
    pub fn from_kv(kv: &KvMap, base: &ModelConfig) -> Result<Self> {
        let norm = match kv.get("model.double_norm") {
            None => base.double_norm,
            Some(s) => DoubleNorm::parse(s)
                .ok_or_else(|| MstatError::Config(format!("unknown double normalization `{s}`")))?,
        };
        let cfg = ModelConfig {
            height: kv.parse_or("model.height", base.height)?,
            width: kv.parse_or("model.width", base.width)?,
            patch: kv.parse_or("model.patch", base.patch)?,
            frames_train: kv.parse_or("model.frames_train", base.frames_train)?,
            frames_test: kv.parse_or("model.frames_test", base.frames_test)?,
            stage1_depth: kv.parse_or("model.stage1_depth", base.stage1_depth)?,
            stage2_depth: kv.parse_or("model.stage2_depth", base.stage2_depth)?,
            stage3_depth: kv.parse_or("model.stage3_depth", base.stage3_depth)?,
            stage1_attributes: kv.parse_or("model.stage1_attributes", base.stage1_attributes)?,
            asta_attributes: kv.parse_or("model.asta_attributes", base.asta_attributes)?,
            prototypes: kv.parse_or("model.prototypes", base.prototypes)?,
            heads: kv.parse_or("model.heads", base.heads)?,
            classes: kv.parse_or("model.classes", base.classes)?,
            double_norm: norm,
            ffn: kv.parse_or("model.ffn", base.ffn)?,
            tps: TpsConfig {
                probability: kv.parse_or("model.tps_probability", base.tps.probability)?,
                positions: kv.parse_or("model.tps_positions", base.tps.positions)?,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    fn new<F: Element>(store: &mut ParamStore<F>, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl RngCore) -> Self {
        Linear {
            w: store.add(format!("{name}.w"), &[fan_in, fan_out], Init::Xavier, rng),
            b: store.add(format!("{name}.b"), &[fan_out], Init::Zeros, rng),
        }
    }

    pub fn apply<F: Element>(&self, p: &Bound<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
        Ok(x.matmul(p.get(self.w))?.add(p.get(self.b))?)
    }
}

/// Train mode shuffles patches with TPS using the given stream; eval never does.
pub enum Mode<'a> {
    Train(&'a mut dyn RngCore),
    Eval,
}

/// Per-stage representations for a batch of clips.
#[derive(Debug, Clone)]
pub struct StageOutputs<F: Element> {
    /// Flattened Stage-I attribute tokens, `[B, N_a * d]`.
    pub attr_rep: Tensor<F>,
    /// Stage-II class token after IAP, `[B, d]`.
    pub c2: Tensor<F>,
    /// Stage-III class token after IAP, `[B, d]`.
    pub c3: Tensor<F>,
    /// Stage-I AAP attention, `[B, h, N_a, T * N]`.
    pub aap_maps: Tensor<F>,
    /// IAP affinities of Stage II and III, `[B, h, 1 + T * N, M]`.
    pub iap_maps: [Tensor<F>; 2],
}

impl<F: Element> StageOutputs<F> {
    pub fn stage(&self, i: usize) -> &Tensor<F> {
        match i {
            0 => &self.attr_rep,
            1 => &self.c2,
            _ => &self.c3,
        }
    }
}

/// Classifier logits of the three stage heads, each `[B, classes]`.
pub type HeadLogits<F> = [Tensor<F>; 3];

#[derive(Debug, Clone)]
pub struct MstatModel {
    pub config: ModelConfig,
    pub embed_w: ParamId,
    pub embed_b: ParamId,
    /// Spatial positional table `[N, d]`; there is no temporal encoding.
    pub pos: ParamId,
    pub class_token: ParamId,
    pub stage3_class_token: ParamId,
    pub stage1: Vec<StaBlock>,
    pub aap: AapBank,
    pub stage2: Vec<StaBlock>,
    pub stage2_norm: NormParams,
    pub iap2: IapBank,
    pub stage3: Vec<AStaBlock>,
    pub stage3_norm: NormParams,
    pub iap3: IapBank,
    pub heads: [Linear; 3],
}

impl MstatModel {
    pub fn new<F: Element>(config: &ModelConfig, store: &mut ParamStore<F>, rng: &mut impl RngCore) -> Result<Self> {
        config.validate()?;
        let (n, d, h) = (config.patches(), config.dim(), config.heads);
        let embed_w = store.add("embed.w", &[d, d], Init::Xavier, rng);
        let embed_b = store.add("embed.b", &[d], Init::Zeros, rng);
        let pos = store.add("pos", &[n, d], Init::Normal(0.02), rng);
        let class_token = store.add("cls1", &[d], Init::Normal(0.02), rng);
        let stage3_class_token = store.add("cls3", &[d], Init::Normal(0.02), rng);
        let stage1 = (0..config.stage1_depth)
            .map(|i| StaBlock::new(store, &format!("s1.{i}"), d, h, config.ffn, rng))
            .collect::<Result<Vec<_>>>()?;
        let aap = AapBank::new(store, "s1.aap", d, h, config.stage1_attributes, rng)?;
        let stage2 = (0..config.stage2_depth)
            .map(|i| StaBlock::new(store, &format!("s2.{i}"), d, h, config.ffn, rng))
            .collect::<Result<Vec<_>>>()?;
        let stage2_norm = NormParams::new(store, "s2.ln", d, rng);
        let iap2 = IapBank::new(store, "s2.iap", d, h, config.prototypes, config.double_norm, rng)?;
        let stage3 = (0..config.stage3_depth)
            .map(|i| AStaBlock::new(store, &format!("s3.{i}"), d, h, config.asta_attributes, n, config.ffn, rng))
            .collect::<Result<Vec<_>>>()?;
        let stage3_norm = NormParams::new(store, "s3.ln", d, rng);
        let iap3 = IapBank::new(store, "s3.iap", d, h, config.prototypes, config.double_norm, rng)?;
        let heads = [
            Linear::new(store, "head1", config.stage1_attributes * d, config.classes, rng),
            Linear::new(store, "head2", d, config.classes, rng),
            Linear::new(store, "head3", d, config.classes, rng),
        ];
        Ok(MstatModel {
            config: config.clone(),
            embed_w,
            embed_b,
            pos,
            class_token,
            stage3_class_token,
            stage1,
            aap,
            stage2,
            stage2_norm,
            iap2,
            stage3,
            stage3_norm,
            iap3,
            heads,
        })
    }

    /// Fresh model and parameters from a seed.
    pub fn init<F: Element>(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<F>)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Self::new(config, &mut store, &mut rng)?;
        Ok((model, store))
    }

    /// Runs `video: [B, T, 3, H, W]` (or a single `[T, 3, H, W]` clip).
    pub fn forward<F: Element>(&self, p: &Bound<F>, video: &Tensor<F>, mode: Mode<'_>) -> Result<StageOutputs<F>> {
        let cfg = &self.config;
        let (n, d) = (cfg.patches(), cfg.dim());
        let mut x = patchify_embed(video, cfg.patch, p.get(self.embed_w), p.get(self.embed_b))?;
        if x.rank() == 3 {
            let s = x.shape().to_vec();
            x = x.reshape(&[1, s[0], s[1], s[2]])?;
        }
        let (b, t) = (x.shape()[0], x.shape()[1]);
        if let Mode::Train(rng) = mode {
            x = tps_apply(&x, &cfg.tps, rng)?;
        }
        x = add_spatial_pos(&x, p.get(self.pos))?;

        let mut seq = TokenSeq::new(x, Some(class_batch(p.get(self.class_token), b, d)?))?;
        for blk in &self.stage1 {
            seq = sta_block(&seq, blk, p)?;
        }
        let flat = seq.tokens.reshape(&[b, t * n, d])?;
        let pooled = self.aap.forward(p, &flat)?;
        let attr_rep = pooled.output.reshape(&[b, cfg.stage1_attributes * d])?;

        for blk in &self.stage2 {
            seq = sta_block(&seq, blk, p)?;
        }
        let (c2, iap2_maps) = self.iap_tap(p, &seq, &self.stage2_norm, &self.iap2)?;

        let mut seq3 = TokenSeq::new(seq.tokens, Some(class_batch(p.get(self.stage3_class_token), b, d)?))?;
        for blk in &self.stage3 {
            seq3 = a_sta_block(&seq3, blk, p)?;
        }
        let (c3, iap3_maps) = self.iap_tap(p, &seq3, &self.stage3_norm, &self.iap3)?;

        Ok(StageOutputs {
            attr_rep,
            c2,
            c3,
            aap_maps: pooled.maps,
            iap_maps: [iap2_maps, iap3_maps],
        })
    }

    fn iap_tap<F: Element>(
        &self,
        p: &Bound<F>,
        seq: &TokenSeq<F>,
        norm: &NormParams,
        bank: &IapBank,
    ) -> Result<(Tensor<F>, Tensor<F>)> {
        let (b, t, n, d) = (seq.batch(), seq.frames(), seq.patches(), seq.dim());
        let class = seq
            .class_token
            .as_ref()
            .ok_or_else(|| MstatError::Usage("stage output lost its class token".into()))?
            .reshape(&[b, 1, d])?;
        let patches = seq.tokens.reshape(&[b, t * n, d])?;
        let all = norm.apply(p, &Tensor::concat(&[&class, &patches], 1)?)?;
        let out = bank.forward(p, &all)?;
        let c = out.output.narrow(1, 0, 1)?.reshape(&[b, d])?;
        Ok((c, out.maps))
    }

    pub fn logits<F: Element>(&self, p: &Bound<F>, outs: &StageOutputs<F>) -> Result<HeadLogits<F>> {
        Ok([
            self.heads[0].apply(p, &outs.attr_rep)?,
            self.heads[1].apply(p, &outs.c2)?,
            self.heads[2].apply(p, &outs.c3)?,
        ])
    }

    /// Parameter ids belonging to Stage III (A-STA stack, its class token,
    /// norm, IAP bank and classifier).
    pub fn stage3_params<F: Element>(&self, store: &ParamStore<F>) -> Vec<ParamId> {
        store
            .ids()
            .filter(|&id| {
                let name = &store.entry(id).name;
                name.starts_with("s3.") || name.starts_with("cls3") || name.starts_with("head3")
            })
            .collect()
    }

    /// Writes the config manifest and all parameters to `dir`.
    pub fn save_checkpoint<F: Element>(&self, store: &ParamStore<F>, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.txt"), self.config.to_kv().to_text())?;
        store.save(dir)
    }

    /// Rebuilds the model from a checkpoint written by [`Self::save_checkpoint`].
    pub fn load_checkpoint<F: Element>(dir: &Path) -> Result<(Self, ParamStore<F>)> {
        let text = fs::read_to_string(dir.join("config.txt"))?;
        let kv = KvMap::parse(&text)?;
        let cfg = ModelConfig::from_kv(&kv, &ModelConfig::desk(1))?;
        let (model, mut store) = Self::init::<F>(&cfg, 0)?;
        store.load_into(dir)?;
        Ok((model, store))
    }
}

fn class_batch<F: Element>(c: &Tensor<F>, b: usize, d: usize) -> Result<Tensor<F>> {
    Ok(c.reshape(&[1, d])?.broadcast_to(&[b, d])?)
}

/// Cuts every frame into non-overlapping `patch x patch` squares, flattens
/// each as `(channel, row, col)` and projects it: `[.., T, 3, H, W]` to
/// `[.., T, N, d]` with patches in row-major order.
pub fn patchify_embed<F: Element>(video: &Tensor<F>, patch: usize, w: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let s = video.shape();
    let (lead, rest) = match s.len() {
        4 => (&s[..1], &s[1..]),
        5 => (&s[..2], &s[2..]),
        _ => return Err(MstatError::Usage(format!("video must be [B, T, 3, H, W], got {s:?}"))),
    };
    let (c, h, wd) = (rest[0], rest[1], rest[2]);
    if c != CHANNELS {
        return Err(MstatError::Usage(format!("expected {CHANNELS} channels, got {c}")));
    }
    if patch == 0 || h % patch != 0 || wd % patch != 0 {
        return Err(MstatError::Config(format!("frame {h}x{wd} is not divisible into {patch}-pixel patches")));
    }
    let (hp, wp) = (h / patch, wd / patch);
    let frames: usize = lead.iter().product();
    let d = c * patch * patch;
    let patches = video
        .reshape(&[frames, c, hp, patch, wp, patch])?
        .permute(&[0, 2, 4, 1, 3, 5])?
        .reshape(&[frames, hp * wp, d])?;
    let tokens = mstat_tensor::with_mac_kind(mstat_tensor::MacKind::Projection, || patches.matmul(w))?.add(b)?;
    let mut out_shape = lead.to_vec();
    out_shape.extend([hp * wp, w.shape()[1]]);
    Ok(tokens.reshape(&out_shape)?)
}

/// Adds the same positional row `E[n]` to token `n` of every frame.
pub fn add_spatial_pos<F: Element>(tokens: &Tensor<F>, table: &Tensor<F>) -> Result<Tensor<F>> {
    let s = tokens.shape();
    if s.len() < 2 || table.shape() != &s[s.len() - 2..] {
        return Err(MstatError::Usage(format!(
            "positional table {:?} does not match tokens {:?}",
            table.shape(),
            s
        )));
    }
    Ok(tokens.add(table)?)
}

/// Which stage representations enter the retrieval vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StageMask {
    pub stages: [bool; 3],
}

impl StageMask {
    pub const ALL: StageMask = StageMask { stages: [true; 3] };

    /// All seven non-empty stage subsets, singles first.
    pub fn all_subsets() -> Vec<StageMask> {
        let mut masks: Vec<StageMask> = (1u8..8)
            .map(|bits| StageMask {
                stages: [bits & 1 != 0, bits & 2 != 0, bits & 4 != 0],
            })
            .collect();
        masks.sort_by_key(|m| (m.stages.iter().filter(|&&s| s).count(), m.name()));
        masks
    }

    pub fn single(i: usize) -> StageMask {
        let mut stages = [false; 3];
        stages[i] = true;
        StageMask { stages }
    }

    pub fn name(&self) -> String {
        let parts: Vec<&str> = ["I", "II", "III"]
            .iter()
            .zip(self.stages)
            .filter(|(_, on)| *on)
            .map(|(n, _)| *n)
            .collect();
        parts.join("+")
    }

    pub fn parse(s: &str) -> Result<StageMask> {
        let mut stages = [false; 3];
        for part in s.split('+') {
            let i = match part.trim() {
                "I" | "1" => 0,
                "II" | "2" => 1,
                "III" | "3" => 2,
                other => return Err(MstatError::Config(format!("unknown stage `{other}` in mask `{s}`"))),
            };
            stages[i] = true;
        }
        Ok(StageMask { stages })
    }
}

/// Stage representations of one clip as plain vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct StageFeatures {
    pub attr_rep: Vec<f64>,
    pub c2: Vec<f64>,
    pub c3: Vec<f64>,
}

impl StageFeatures {
    /// Splits batched outputs into one record per clip.
    pub fn from_outputs<F: Element>(outs: &StageOutputs<F>) -> Vec<StageFeatures> {
        let b = outs.attr_rep.shape()[0];
        let rows = |t: &Tensor<F>, k: usize| -> Vec<f64> {
            let w = t.shape()[1];
            t.data()[k * w..(k + 1) * w].iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect()
        };
        (0..b)
            .map(|k| StageFeatures {
                attr_rep: rows(&outs.attr_rep, k),
                c2: rows(&outs.c2, k),
                c3: rows(&outs.c3, k),
            })
            .collect()
    }

    /// Concatenation of the selected stages, L2-normalized.
    pub fn representation(&self, mask: StageMask) -> Result<Vec<f64>> {
        if !mask.stages.iter().any(|&s| s) {
            return Err(MstatError::Config("stage mask selects nothing".into()));
        }
        let mut rep = Vec::new();
        for (part, on) in [&self.attr_rep, &self.c2, &self.c3].into_iter().zip(mask.stages) {
            if on {
                rep.extend_from_slice(part);
            }
        }
        let norm = rep.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(MstatError::Degenerate("representation has zero or non-finite norm".into()));
        }
        rep.iter_mut().for_each(|v| *v /= norm);
        Ok(rep)
    }
}

/// Concatenates the selected stage outputs per clip and L2-normalizes.
pub fn inference_representation<F: Element>(outs: &StageOutputs<F>, mask: StageMask) -> Result<Vec<Vec<f64>>> {
    StageFeatures::from_outputs(outs)
        .iter()
        .map(|f| f.representation(mask))
        .collect()
}
