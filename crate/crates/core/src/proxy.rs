//! Learnable proxy attention.
//!
//! * Attribute-aware proxies (AAP): a learnable query bank `P_Q` pools an
//!   arbitrary number of tokens into `N_a` attribute tokens.
//! * Identity-aware proxies (IAP): learnable key/value prototypes
//!   `P_K`, `P_V` re-code every token as a mixture of `M` prototypes,
//!   with a double normalization of the affinity map.

use mstat_tensor::{with_mac_kind, Element, MacKind, Tensor, L1_NORM_EPS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::attention::{check_heads, merge_heads, project, split_heads, Attended};
use crate::error::{MstatError, Result};
use crate::params::{Bound, Init, ParamId, ParamStore};

/// Query bank of `count` attribute proxies, `[heads, count, d']`.
#[derive(Debug, Clone)]
pub struct AapBank {
    pub dim: usize,
    pub heads: usize,
    pub count: usize,
    pub pq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

impl AapBank {
    pub fn new<F: Element>(
        store: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        heads: usize,
        count: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        check_heads(dim, heads)?;
        if count == 0 {
            return Err(MstatError::Config("attribute proxy count must be at least 1".into()));
        }
        let dh = dim / heads;
        let seed: u64 = rng.random();
        let mut bank = Vec::with_capacity(heads * count * dh);
        for h in 0..heads {
            bank.extend(init_aap_anisotropic(count, dh, seed.wrapping_add(h as u64)));
        }
        Ok(AapBank {
            dim,
            heads,
            count,
            pq: store.add(format!("{name}.pq"), &[heads, count, dh], Init::Values(bank), rng),
            wk: store.add(format!("{name}.wk"), &[dim, dim], Init::Xavier, rng),
            wv: store.add(format!("{name}.wv"), &[dim, dim], Init::Xavier, rng),
        })
    }

    /// Pools `x: [G, L, d]` into `[G, count, d]`; maps are `[G, h, count, L]`.
    pub fn forward<F: Element>(&self, p: &Bound<F>, x: &Tensor<F>) -> Result<Attended<F>> {
        let x3 = as_groups(x, self.dim, "attribute proxies")?;
        let k = split_heads(&project(&x3, p.get(self.wk))?, self.heads)?;
        let v = split_heads(&project(&x3, p.get(self.wv))?, self.heads)?;
        let scale = F::one() / F::lit((self.dim / self.heads) as f64).sqrt();
        let maps = with_mac_kind(MacKind::Attention, || p.get(self.pq).bmm(&k, false, true))?
            .scale(scale)?
            .softmax(3)?;
        let pooled = with_mac_kind(MacKind::Attention, || maps.bmm(&v, false, false))?;
        let mut output = merge_heads(&pooled)?;
        if x.rank() == 2 {
            output = output.reshape(&[self.count, self.dim])?;
        }
        Ok(Attended { output, maps })
    }

    /// Per-proxy query vectors `[count, d]` (heads concatenated).
    pub fn proxies<F: Element>(&self, store: &ParamStore<F>) -> Vec<Vec<f64>> {
        let data = &store.entry(self.pq).data;
        let dh = self.dim / self.heads;
        (0..self.count)
            .map(|r| {
                (0..self.heads)
                    .flat_map(|h| {
                        let base = (h * self.count + r) * dh;
                        data[base..base + dh].iter().map(|v| v.to_f64().unwrap_or(0.0))
                    })
                    .collect()
            })
            .collect()
    }
}

/// Convenience wrapper: attribute tokens for `tokens` (`[L, d]` or `[G, L, d]`).
pub fn aap_forward<F: Element>(bank: &AapBank, p: &Bound<F>, tokens: &Tensor<F>) -> Result<Attended<F>> {
    bank.forward(p, tokens)
}

/// Anisotropic initialization of a `count x width` query bank.
///
/// Each row gets its own scale `s_r ~ U(0.5, 1.5)` and offset
/// `m_r ~ N(0, 0.5^2)` shared by all its coordinates:
/// `row_r = s_r * (m_r + z_r)` with `z_r ~ N(0, I)`. Rows therefore differ
/// in both norm and direction, and pairwise cosines spread out instead of
/// concentrating the way a shared isotropic draw does for small widths.
pub fn init_aap_anisotropic(count: usize, width: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = Uniform::new(0.5, 1.5).expect("valid range");
    let offset = Normal::new(0.0, 0.5).expect("valid std");
    let unit = Normal::new(0.0, 1.0).expect("valid std");
    let mut out = Vec::with_capacity(count * width);
    for _ in 0..count {
        let s: f64 = scale.sample(&mut rng);
        let m: f64 = offset.sample(&mut rng);
        out.extend((0..width).map(|_| s * (m + unit.sample(&mut rng))));
    }
    out
}

/// Pairwise cosine similarity matrix of `rows`.
pub fn cosine_matrix(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let norms: Vec<f64> = rows.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    rows.iter()
        .enumerate()
        .map(|(i, a)| {
            rows.iter()
                .enumerate()
                .map(|(j, b)| {
                    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                    dot / (norms[i] * norms[j]).max(f64::MIN_POSITIVE)
                })
                .collect()
        })
        .collect()
}

/// `(max, mean)` of the absolute off-diagonal cosines; `(0, 0)` for one row.
pub fn anisotropy(rows: &[Vec<f64>]) -> (f64, f64) {
    let cos = cosine_matrix(rows);
    let mut max: f64 = 0.0;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, row) in cos.iter().enumerate() {
        for c in &row[i + 1..] {
            max = max.max(c.abs());
            sum += c.abs();
            n += 1;
        }
    }
    (max, if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Order of the two normalizations applied to the token-prototype logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DoubleNorm {
    /// L1 over tokens for each prototype, then softmax over prototypes for
    /// each token. Every token ends up a convex mixture of `P_V`.
    #[default]
    TokenL1PrototypeSoftmax,
    /// L1 over prototypes, then softmax over tokens.
    PrototypeL1TokenSoftmax,
    /// Plain softmax over prototypes; tokens do not interact.
    PrototypeSoftmax,
}

impl DoubleNorm {
    pub fn name(self) -> &'static str {
        match self {
            DoubleNorm::TokenL1PrototypeSoftmax => "token-l1-prototype-softmax",
            DoubleNorm::PrototypeL1TokenSoftmax => "prototype-l1-token-softmax",
            DoubleNorm::PrototypeSoftmax => "prototype-softmax",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            DoubleNorm::TokenL1PrototypeSoftmax,
            DoubleNorm::PrototypeL1TokenSoftmax,
            DoubleNorm::PrototypeSoftmax,
        ]
        .into_iter()
        .find(|n| n.name() == s)
    }
}

/// Identity prototypes: keys and values `[heads, count, d']`.
#[derive(Debug, Clone)]
pub struct IapBank {
    pub dim: usize,
    pub heads: usize,
    pub count: usize,
    pub norm: DoubleNorm,
    pub wq: ParamId,
    pub pk: ParamId,
    pub pv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

/// Result of an IAP pass.
#[derive(Debug, Clone)]
pub struct IapOutput<F: Element> {
    /// Re-coded tokens after the output projection, `[G, L, d]`.
    pub output: Tensor<F>,
    /// Normalized affinities `[G, h, L, M]`.
    pub maps: Tensor<F>,
    /// Per-head prototype mixtures before merging heads, `[G, h, L, d']`.
    pub mixed: Tensor<F>,
}

impl IapBank {
    pub fn new<F: Element>(
        store: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        heads: usize,
        count: usize,
        norm: DoubleNorm,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        check_heads(dim, heads)?;
        if count == 0 {
            return Err(MstatError::Config("identity prototype count must be at least 1".into()));
        }
        let dh = dim / heads;
        Ok(IapBank {
            dim,
            heads,
            count,
            norm,
            wq: store.add(format!("{name}.wq"), &[dim, dim], Init::Xavier, rng),
            pk: store.add(format!("{name}.pk"), &[heads, count, dh], Init::Normal(1.0), rng),
            pv: store.add(format!("{name}.pv"), &[heads, count, dh], Init::Normal(1.0), rng),
            wo: store.add(format!("{name}.wo"), &[dim, dim], Init::Xavier, rng),
            bo: store.add(format!("{name}.bo"), &[dim], Init::Zeros, rng),
        })
    }

    /// Re-codes `x: [G, L, d]` (or `[L, d]`) token by token.
    pub fn forward<F: Element>(&self, p: &Bound<F>, x: &Tensor<F>) -> Result<IapOutput<F>> {
        let x3 = as_groups(x, self.dim, "identity proxies")?;
        if x3.shape()[1] > 0 && self.count > x3.shape()[1] {
            log::debug!(
                "identity prototypes ({}) outnumber tokens ({})",
                self.count,
                x3.shape()[1]
            );
        }
        let q = split_heads(&project(&x3, p.get(self.wq))?, self.heads)?;
        let scale = F::one() / F::lit((self.dim / self.heads) as f64).sqrt();
        let logits = with_mac_kind(MacKind::Attention, || q.bmm(p.get(self.pk), false, true))?.scale(scale)?;
        let eps = F::lit(L1_NORM_EPS);
        let maps = match self.norm {
            DoubleNorm::TokenL1PrototypeSoftmax => logits.l1_normalize(2, eps)?.softmax(3)?,
            DoubleNorm::PrototypeL1TokenSoftmax => logits.l1_normalize(3, eps)?.softmax(2)?,
            DoubleNorm::PrototypeSoftmax => logits.softmax(3)?,
        };
        let mixed = with_mac_kind(MacKind::Attention, || maps.bmm(p.get(self.pv), false, false))?;
        let mut output = project(&merge_heads(&mixed)?, p.get(self.wo))?.add(p.get(self.bo))?;
        if x.rank() == 2 {
            output = output.reshape(x.shape())?;
        }
        Ok(IapOutput { output, maps, mixed })
    }
}

pub fn iap_forward<F: Element>(bank: &IapBank, p: &Bound<F>, tokens: &Tensor<F>) -> Result<IapOutput<F>> {
    bank.forward(p, tokens)
}

fn as_groups<F: Element>(x: &Tensor<F>, dim: usize, what: &str) -> Result<Tensor<F>> {
    let x3 = match x.shape() {
        &[l, d] => x.reshape(&[1, l, d])?,
        &[_, _, _] => x.clone(),
        other => {
            return Err(MstatError::Usage(format!("{what} expect [L, d] or [G, L, d], got {other:?}")))
        }
    };
    if x3.shape()[2] != dim {
        return Err(MstatError::Usage(format!(
            "{what} expect width {dim}, got {}",
            x3.shape()[2]
        )));
    }
    if x3.shape()[1] == 0 {
        return Err(MstatError::Degenerate(format!("{what} over an empty token set")));
    }
    Ok(x3)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    #[test]
    fn identical_tokens_pool_to_value_projection() {
        let mut store = ParamStore::<f64>::new();
        let bank = AapBank::new(&mut store, "aap", 8, 2, 3, &mut rng()).unwrap();
        let p = store.bind(false).unwrap();
        let v: Vec<f64> = (0..8).map(|i| 0.1 * i as f64 - 0.3).collect();
        let x = Tensor::from_vec(v.repeat(5), &[5, 8]).unwrap();
        let out = bank.forward(&p, &x).unwrap();
        let proj = Tensor::from_vec(v, &[1, 8]).unwrap().matmul(p.get(bank.wv)).unwrap();
        for row in out.output.data().chunks(8) {
            for (a, b) in row.iter().zip(proj.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn anisotropic_init_is_deterministic_and_spread() {
        assert_eq!(init_aap_anisotropic(24, 64, 9), init_aap_anisotropic(24, 64, 9));
        assert_ne!(init_aap_anisotropic(24, 64, 9), init_aap_anisotropic(24, 64, 10));
        let rows: Vec<Vec<f64>> = init_aap_anisotropic(24, 64, 9).chunks(64).map(<[f64]>::to_vec).collect();
        let (max, mean) = anisotropy(&rows);
        assert!(max < 0.999, "max cosine {max}");
        assert!(mean < 0.5, "mean cosine {mean}");
        let single: Vec<Vec<f64>> = vec![init_aap_anisotropic(1, 64, 0)];
        assert_eq!(anisotropy(&single), (0.0, 0.0));
    }

    #[test]
    fn single_prototype_ignores_input() {
        let mut store = ParamStore::<f64>::new();
        let bank = IapBank::new(&mut store, "iap", 6, 2, 1, DoubleNorm::default(), &mut rng()).unwrap();
        let p = store.bind(false).unwrap();
        let x: Vec<f64> = (0..24).map(|i| (i as f64 * 1.3).sin()).collect();
        let out = bank.forward(&p, &Tensor::from_vec(x, &[4, 6]).unwrap()).unwrap();
        // every row equals the projection of the single value prototype
        let pv = p.get(bank.pv).data().to_vec();
        let expect = Tensor::from_vec(pv, &[1, 6])
            .unwrap()
            .matmul(p.get(bank.wo))
            .unwrap()
            .add(p.get(bank.bo))
            .unwrap();
        for row in out.output.data().chunks(6) {
            for (a, b) in row.iter().zip(expect.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_counts_are_config_errors() {
        let mut store = ParamStore::<f64>::new();
        assert!(AapBank::new(&mut store, "a", 8, 2, 0, &mut rng()).is_err());
        assert!(IapBank::new(&mut store, "i", 8, 2, 0, DoubleNorm::default(), &mut rng()).is_err());
    }

    #[test]
    fn norm_names_round_trip() {
        for n in [
            DoubleNorm::TokenL1PrototypeSoftmax,
            DoubleNorm::PrototypeL1TokenSoftmax,
            DoubleNorm::PrototypeSoftmax,
        ] {
            assert_eq!(DoubleNorm::parse(n.name()), Some(n));
        }
        assert_eq!(DoubleNorm::parse("nope"), None);
    }
}
