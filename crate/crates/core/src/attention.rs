//! Multi-head self-attention and its temporal / spatial restrictions.
//!
//! Token tensors are batched: `[B, T, N, d]` for clips (batch, frames,
//! patches per frame, width) and `[G, L, d]` for flat groups of sequences.

use mstat_tensor::{with_mac_kind, Element, MacKind, Tensor};
use rand::Rng;

use crate::error::{MstatError, Result};
use crate::params::{Bound, Init, ParamId, ParamStore};

/// Spatio-temporal patch tokens `[B, T, N, d]` with an optional class
/// token `[B, d]` per clip.
#[derive(Debug, Clone)]
pub struct TokenSeq<F: Element> {
    pub tokens: Tensor<F>,
    pub class_token: Option<Tensor<F>>,
}

impl<F: Element> TokenSeq<F> {
    pub fn new(tokens: Tensor<F>, class_token: Option<Tensor<F>>) -> Result<Self> {
        if tokens.rank() != 4 {
            return Err(MstatError::Usage(format!(
                "token sequence must be [B, T, N, d], got {:?}",
                tokens.shape()
            )));
        }
        if let Some(c) = &class_token {
            let s = tokens.shape();
            if c.shape() != [s[0], s[3]] {
                return Err(MstatError::Usage(format!(
                    "class token {:?} does not match tokens {:?}",
                    c.shape(),
                    s
                )));
            }
        }
        Ok(TokenSeq { tokens, class_token })
    }

    pub fn batch(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn patches(&self) -> usize {
        self.tokens.shape()[2]
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[3]
    }
}

/// Head count used when none is configured: one head per 64 channels.
pub fn default_heads(dim: usize) -> usize {
    (dim / 64).max(1)
}

/// `[G, L, d] -> [G, h, L, d/h]`
pub(crate) fn split_heads<F: Element>(x: &Tensor<F>, heads: usize) -> Result<Tensor<F>> {
    let s = x.shape();
    let (g, l, d) = (s[0], s[1], s[2]);
    Ok(x.reshape(&[g, l, heads, d / heads])?.permute(&[0, 2, 1, 3])?)
}

/// `[G, h, L, d'] -> [G, L, h * d']`
pub(crate) fn merge_heads<F: Element>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let s = x.shape();
    let (g, h, l, dh) = (s[0], s[1], s[2], s[3]);
    Ok(x.permute(&[0, 2, 1, 3])?.reshape(&[g, l, h * dh])?)
}

pub(crate) fn project<F: Element>(x: &Tensor<F>, w: &Tensor<F>) -> Result<Tensor<F>> {
    Ok(with_mac_kind(MacKind::Projection, || x.matmul(w))?)
}

pub(crate) fn check_heads(dim: usize, heads: usize) -> Result<()> {
    if heads == 0 || dim == 0 || !dim.is_multiple_of(heads) {
        return Err(MstatError::Config(format!(
            "embedding width {dim} is not divisible by {heads} heads"
        )));
    }
    Ok(())
}

/// Output of an attention op together with its attention maps
/// `[G, h, queries, keys]`.
#[derive(Debug, Clone)]
pub struct Attended<F: Element> {
    pub output: Tensor<F>,
    pub maps: Tensor<F>,
}

/// Per-head query/key/value projections plus an output projection.
/// All heads share one `d x d` matrix per role; head `i` owns columns
/// `i*d' .. (i+1)*d'`.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub dim: usize,
    pub heads: usize,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

impl AttentionParams {
    pub fn new<F: Element>(
        store: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        check_heads(dim, heads)?;
        Ok(AttentionParams {
            dim,
            heads,
            wq: store.add(format!("{name}.wq"), &[dim, dim], Init::Xavier, rng),
            wk: store.add(format!("{name}.wk"), &[dim, dim], Init::Xavier, rng),
            wv: store.add(format!("{name}.wv"), &[dim, dim], Init::Xavier, rng),
            wo: store.add(format!("{name}.wo"), &[dim, dim], Init::Xavier, rng),
            bo: store.add(format!("{name}.bo"), &[dim], Init::Zeros, rng),
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Self-attention over each of the `G` sequences of `x: [G, L, d]`.
    pub fn forward<F: Element>(&self, p: &Bound<F>, x: &Tensor<F>) -> Result<Attended<F>> {
        if x.rank() != 3 || x.shape()[2] != self.dim {
            return Err(MstatError::Usage(format!(
                "attention expects [G, L, {}], got {:?}",
                self.dim,
                x.shape()
            )));
        }
        if x.shape()[1] == 0 {
            return Err(MstatError::Degenerate("attention over an empty sequence".into()));
        }
        let q = split_heads(&project(x, p.get(self.wq))?, self.heads)?;
        let k = split_heads(&project(x, p.get(self.wk))?, self.heads)?;
        let v = split_heads(&project(x, p.get(self.wv))?, self.heads)?;
        let scale = F::one() / F::lit(self.head_dim() as f64).sqrt();
        let maps = with_mac_kind(MacKind::Attention, || q.bmm(&k, false, true))?
            .scale(scale)?
            .softmax(3)?;
        let mixed = with_mac_kind(MacKind::Attention, || maps.bmm(&v, false, false))?;
        let output = project(&merge_heads(&mixed)?, p.get(self.wo))?.add(p.get(self.bo))?;
        Ok(Attended { output, maps })
    }
}

/// Self-attention on a flat sequence `[L, d]` (or groups `[G, L, d]`).
pub fn self_attention<F: Element>(
    params: &AttentionParams,
    p: &Bound<F>,
    tokens: &Tensor<F>,
) -> Result<Attended<F>> {
    match tokens.rank() {
        2 => {
            let s = tokens.shape();
            let out = params.forward(p, &tokens.reshape(&[1, s[0], s[1]])?)?;
            Ok(Attended {
                output: out.output.reshape(s)?,
                maps: out.maps,
            })
        }
        _ => params.forward(p, tokens),
    }
}

/// Attention along time: for each spatial position, one sequence of `T`
/// tokens. `tokens: [B, T, N, d]`, maps `[B*N, h, T, T]`.
pub fn temporal_attention<F: Element>(
    params: &AttentionParams,
    p: &Bound<F>,
    tokens: &Tensor<F>,
) -> Result<Attended<F>> {
    let s = clip_shape(tokens)?;
    let (b, t, n, d) = (s[0], s[1], s[2], s[3]);
    if t == 0 {
        return Err(MstatError::Degenerate("temporal attention over zero frames".into()));
    }
    let groups = tokens.permute(&[0, 2, 1, 3])?.reshape(&[b * n, t, d])?;
    let out = params.forward(p, &groups)?;
    Ok(Attended {
        output: out.output.reshape(&[b, n, t, d])?.permute(&[0, 2, 1, 3])?,
        maps: out.maps,
    })
}

/// Attention within each frame: one sequence of `N` tokens per frame.
/// `tokens: [B, T, N, d]`, maps `[B*T, h, N, N]`.
pub fn spatial_attention<F: Element>(
    params: &AttentionParams,
    p: &Bound<F>,
    tokens: &Tensor<F>,
) -> Result<Attended<F>> {
    let s = clip_shape(tokens)?;
    let (b, t, n, d) = (s[0], s[1], s[2], s[3]);
    if n == 0 {
        return Err(MstatError::Degenerate("spatial attention over zero patches".into()));
    }
    let out = params.forward(p, &tokens.reshape(&[b * t, n, d])?)?;
    Ok(Attended {
        output: out.output.reshape(&[b, t, n, d])?,
        maps: out.maps,
    })
}

fn clip_shape<F: Element>(tokens: &Tensor<F>) -> Result<[usize; 4]> {
    match tokens.shape() {
        &[b, t, n, d] => Ok([b, t, n, d]),
        other => Err(MstatError::Usage(format!("expected [B, T, N, d] tokens, got {other:?}"))),
    }
}
