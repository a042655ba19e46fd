//! Spatio-temporal aggregation blocks.
//!
//! An STA block runs temporal attention on the patch tokens, then spatial
//! attention inside each frame with a copy of the class token appended to
//! every frame; the copies are averaged back into one class token. Both
//! sub-layers are pre-norm and residual, weighted by learnable scalars
//! `alpha` and `beta`. The A-STA variant compresses each frame to a few
//! attribute tokens before temporal attention and expands back after it.

use mstat_tensor::{Element, Tensor, LAYER_NORM_EPS};
use rand::Rng;

use crate::attention::{spatial_attention, temporal_attention, AttentionParams, TokenSeq};
use crate::error::{MstatError, Result};
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::proxy::AapBank;

#[derive(Debug, Clone, Copy)]
pub struct NormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl NormParams {
    pub fn new<F: Element>(store: &mut ParamStore<F>, name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        NormParams {
            gain: store.add(format!("{name}.gain"), &[dim], Init::Const(1.0), rng),
            bias: store.add(format!("{name}.bias"), &[dim], Init::Zeros, rng),
        }
    }

    pub fn apply<F: Element>(&self, p: &Bound<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
        Ok(x.layer_norm(p.get(self.gain), p.get(self.bias), F::lit(LAYER_NORM_EPS))?)
    }
}

/// Optional two-layer ReLU feed-forward sub-layer (off by default).
#[derive(Debug, Clone)]
pub struct FeedForward {
    norm: NormParams,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl FeedForward {
    fn new<F: Element>(store: &mut ParamStore<F>, name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        FeedForward {
            norm: NormParams::new(store, &format!("{name}.ln"), dim, rng),
            w1: store.add(format!("{name}.w1"), &[dim, 4 * dim], Init::Xavier, rng),
            b1: store.add(format!("{name}.b1"), &[4 * dim], Init::Zeros, rng),
            w2: store.add(format!("{name}.w2"), &[4 * dim, dim], Init::Xavier, rng),
            b2: store.add(format!("{name}.b2"), &[dim], Init::Zeros, rng),
        }
    }

    fn residual<F: Element>(&self, p: &Bound<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
        let h = self
            .norm
            .apply(p, x)?
            .matmul(p.get(self.w1))?
            .add(p.get(self.b1))?
            .relu()?
            .matmul(p.get(self.w2))?
            .add(p.get(self.b2))?;
        Ok(x.add(&h)?)
    }
}

#[derive(Debug, Clone)]
pub struct StaBlock {
    pub temporal: AttentionParams,
    pub spatial: AttentionParams,
    pub norm_t: NormParams,
    pub norm_s: NormParams,
    /// Temporal residual weight, shape `[1]`.
    pub alpha: ParamId,
    /// Spatial residual weight, shape `[1]`.
    pub beta: ParamId,
    pub ffn: Option<FeedForward>,
}

impl StaBlock {
    pub fn new<F: Element>(
        store: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        heads: usize,
        with_ffn: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(StaBlock {
            temporal: AttentionParams::new(store, &format!("{name}.attn_t"), dim, heads, rng)?,
            spatial: AttentionParams::new(store, &format!("{name}.attn_s"), dim, heads, rng)?,
            norm_t: NormParams::new(store, &format!("{name}.ln_t"), dim, rng),
            norm_s: NormParams::new(store, &format!("{name}.ln_s"), dim, rng),
            alpha: store.add(format!("{name}.alpha"), &[1], Init::Const(1.0), rng),
            beta: store.add(format!("{name}.beta"), &[1], Init::Const(1.0), rng),
            ffn: with_ffn.then(|| FeedForward::new(store, &format!("{name}.ffn"), dim, rng)),
        })
    }
}

#[derive(Debug, Clone)]
pub struct AStaBlock {
    pub sta: StaBlock,
    /// Compresses each frame's `N` patches into `N_a` attribute tokens.
    pub pre: AapBank,
    /// Expands `N_a` attribute tokens back into `N` tokens per frame.
    pub post: AapBank,
}

impl AStaBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Element>(
        store: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        heads: usize,
        attributes: usize,
        patches: usize,
        with_ffn: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(AStaBlock {
            sta: StaBlock::new(store, name, dim, heads, with_ffn, rng)?,
            pre: AapBank::new(store, &format!("{name}.aap_pre"), dim, heads, attributes, rng)?,
            post: AapBank::new(store, &format!("{name}.aap_post"), dim, heads, patches, rng)?,
        })
    }
}

/// Appends a copy of the class token to every frame: `[B, T, N + 1, d]`.
pub fn broadcast_class_token<F: Element>(seq: &TokenSeq<F>) -> Result<Tensor<F>> {
    let c = seq
        .class_token
        .as_ref()
        .ok_or_else(|| MstatError::Usage("class token broadcast needs a class token".into()))?;
    let (b, t, d) = (seq.batch(), seq.frames(), seq.dim());
    let copies = c.reshape(&[b, 1, 1, d])?.broadcast_to(&[b, t, 1, d])?;
    Ok(Tensor::concat(&[&seq.tokens, &copies], 2)?)
}

/// Mean of the per-frame class copies `[B, T, d] -> [B, d]`.
pub fn average_class_token<F: Element>(copies: &Tensor<F>) -> Result<Tensor<F>> {
    if copies.rank() != 3 || copies.shape()[1] == 0 {
        return Err(MstatError::Degenerate(format!(
            "class token averaging needs [B, T >= 1, d], got {:?}",
            copies.shape()
        )));
    }
    Ok(copies.mean_axis(1)?)
}

/// Splits the spatial stage output back into patches and averaged class token.
fn unbroadcast<F: Element>(with_copies: &Tensor<F>) -> Result<TokenSeq<F>> {
    let s = with_copies.shape();
    let (b, t, n1, d) = (s[0], s[1], s[2], s[3]);
    let tokens = with_copies.narrow(2, 0, n1 - 1)?;
    let copies = with_copies.narrow(2, n1 - 1, 1)?.reshape(&[b, t, d])?;
    TokenSeq::new(tokens, Some(average_class_token(&copies)?))
}

/// Spatial half shared by both block kinds, applied to `S'`.
fn spatial_stage<F: Element>(
    block: &StaBlock,
    p: &Bound<F>,
    shifted: Tensor<F>,
    class_token: Option<Tensor<F>>,
) -> Result<TokenSeq<F>> {
    let with_copies = broadcast_class_token(&TokenSeq::new(shifted, class_token)?)?;
    let attended = spatial_attention(&block.spatial, p, &block.norm_s.apply(p, &with_copies)?)?;
    let out = with_copies.add(&attended.output.mul(p.get(block.beta))?)?;
    let mut seq = unbroadcast(&out)?;
    if let Some(ffn) = &block.ffn {
        seq.tokens = ffn.residual(p, &seq.tokens)?;
        seq.class_token = seq.class_token.map(|c| ffn.residual(p, &c)).transpose()?;
    }
    Ok(seq)
}

fn require_class<F: Element>(seq: &TokenSeq<F>) -> Result<()> {
    if seq.class_token.is_none() {
        return Err(MstatError::Usage("STA blocks need a class token".into()));
    }
    Ok(())
}

/// `S' = S + alpha * SA_t(LN(S))`, then
/// `[S'; c] + beta * SA_s(LN([S'; c]))` per frame, class copies averaged.
pub fn sta_block<F: Element>(seq: &TokenSeq<F>, block: &StaBlock, p: &Bound<F>) -> Result<TokenSeq<F>> {
    require_class(seq)?;
    let temporal = temporal_attention(&block.temporal, p, &block.norm_t.apply(p, &seq.tokens)?)?;
    let shifted = seq.tokens.add(&temporal.output.mul(p.get(block.alpha))?)?;
    spatial_stage(block, p, shifted, seq.class_token.clone())
}

/// Attribute-aware variant: per frame, `N -> N_a` attribute tokens,
/// temporal attention across frames on each attribute stream, then
/// `N_a -> N`; the result is the `alpha`-weighted temporal residual.
pub fn a_sta_block<F: Element>(seq: &TokenSeq<F>, block: &AStaBlock, p: &Bound<F>) -> Result<TokenSeq<F>> {
    require_class(seq)?;
    let (b, t, n, d) = (seq.batch(), seq.frames(), seq.patches(), seq.dim());
    if block.post.count != n {
        return Err(MstatError::Config(format!(
            "A-STA expansion bank has {} proxies for {n} patches",
            block.post.count
        )));
    }
    let sta = &block.sta;
    let normed = sta.norm_t.apply(p, &seq.tokens)?.reshape(&[b * t, n, d])?;
    let na = block.pre.count;
    let attrs = block.pre.forward(p, &normed)?.output.reshape(&[b, t, na, d])?;
    let mixed = temporal_attention(&sta.temporal, p, &attrs)?.output.reshape(&[b * t, na, d])?;
    let expanded = block.post.forward(p, &mixed)?.output.reshape(&[b, t, n, d])?;
    let shifted = seq.tokens.add(&expanded.mul(p.get(sta.alpha))?)?;
    spatial_stage(sta, p, shifted, seq.class_token.clone())
}
