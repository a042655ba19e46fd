//! Temporal patch shuffling (TPS).
//!
//! With probability `p` per clip, `k` distinct spatial positions are drawn
//! and, at each of them, the sequence of patch tokens across frames is
//! replaced by a random permutation of itself. Everything else is left
//! untouched. Inference never shuffles.

use std::sync::atomic::{AtomicUsize, Ordering};

use mstat_tensor::{Element, Tensor};
use rand::seq::{index, SliceRandom};
use rand::Rng;

use crate::error::{MstatError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TpsConfig {
    /// Chance that a training clip is shuffled at all.
    pub probability: f64,
    /// Number of spatial positions shuffled in a selected clip.
    pub positions: usize,
}

impl Default for TpsConfig {
    fn default() -> Self {
        TpsConfig {
            probability: 0.2,
            positions: 5,
        }
    }
}

impl TpsConfig {
    pub fn disabled() -> Self {
        TpsConfig {
            probability: 0.0,
            positions: 0,
        }
    }

    pub fn validate(&self, patches: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(MstatError::Config(format!(
                "TPS probability {} outside [0, 1]",
                self.probability
            )));
        }
        if self.positions > patches {
            return Err(MstatError::Config(format!(
                "TPS shuffles {} positions but frames have only {patches}",
                self.positions
            )));
        }
        Ok(())
    }
}

/// Where every output token of one clip comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TpsPlan {
    pub frames: usize,
    pub patches: usize,
    /// Whether the clip was selected for shuffling.
    pub applied: bool,
    /// Shuffled spatial positions, ascending.
    pub positions: Vec<usize>,
    /// `source[t * patches + n]`: input frame feeding output `(t, n)`.
    pub source: Vec<usize>,
}

impl TpsPlan {
    pub fn identity(frames: usize, patches: usize) -> Self {
        TpsPlan {
            frames,
            patches,
            applied: false,
            positions: Vec::new(),
            source: (0..frames).flat_map(|t| std::iter::repeat_n(t, patches)).collect(),
        }
    }
}

static INVOCATIONS: AtomicUsize = AtomicUsize::new(0);

/// Number of TPS applications in this process so far, on any thread. Lets
/// tests assert that an inference path never reaches the augmentation.
pub fn tps_invocations() -> usize {
    INVOCATIONS.load(Ordering::SeqCst)
}

/// Draws a shuffle plan for one clip of `frames x patches` tokens.
pub fn tps_plan(cfg: &TpsConfig, frames: usize, patches: usize, rng: &mut (impl Rng + ?Sized)) -> Result<TpsPlan> {
    cfg.validate(patches)?;
    let mut plan = TpsPlan::identity(frames, patches);
    // The Bernoulli draw is always consumed so the stream stays aligned
    // regardless of the outcome.
    let fire = rng.random::<f64>() < cfg.probability;
    if !fire || cfg.positions == 0 {
        return Ok(plan);
    }
    plan.applied = true;
    let mut chosen = index::sample(rng, patches, cfg.positions).into_vec();
    chosen.sort_unstable();
    for &n in &chosen {
        let mut order: Vec<usize> = (0..frames).collect();
        order.shuffle(rng);
        for (t, src) in order.into_iter().enumerate() {
            plan.source[t * patches + n] = src;
        }
    }
    plan.positions = chosen;
    Ok(plan)
}

/// Shuffles `tokens: [T, N, d]` or a batch `[B, T, N, d]` (one independent
/// draw per clip). Differentiable: it is a gather on the token rows.
pub fn tps_apply<F: Element>(tokens: &Tensor<F>, cfg: &TpsConfig, rng: &mut (impl Rng + ?Sized)) -> Result<Tensor<F>> {
    INVOCATIONS.fetch_add(1, Ordering::SeqCst);
    let (b, t, n, d) = match tokens.shape() {
        &[t, n, d] => (1, t, n, d),
        &[b, t, n, d] => (b, t, n, d),
        other => return Err(MstatError::Usage(format!("TPS expects [B, T, N, d] tokens, got {other:?}"))),
    };
    let plans = (0..b)
        .map(|_| tps_plan(cfg, t, n, rng))
        .collect::<Result<Vec<_>>>()?;
    if plans.iter().all(|p| !p.applied) {
        return Ok(tokens.clone());
    }
    let mut idx = Vec::with_capacity(tokens.numel());
    for (clip, plan) in plans.iter().enumerate() {
        for ti in 0..t {
            for ni in 0..n {
                let src = plan.source[ti * n + ni];
                let base = ((clip * t + src) * n + ni) * d;
                idx.extend(base..base + d);
            }
        }
    }
    Ok(tokens.gather(&idx)?.reshape(tokens.shape())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tokens(t: usize, n: usize, d: usize) -> Tensor<f64> {
        Tensor::from_vec((0..t * n * d).map(|i| i as f64).collect(), &[t, n, d]).unwrap()
    }

    #[test]
    fn zero_probability_is_identity() {
        let x = tokens(4, 6, 2);
        let cfg = TpsConfig { probability: 0.0, positions: 3 };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            assert_eq!(tps_apply(&x, &cfg, &mut rng).unwrap().data(), x.data());
        }
    }

    #[test]
    fn single_frame_is_identity() {
        let x = tokens(1, 6, 2);
        let cfg = TpsConfig { probability: 1.0, positions: 6 };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert_eq!(tps_apply(&x, &cfg, &mut rng).unwrap().data(), x.data());
    }

    #[test]
    fn too_many_positions_is_a_config_error() {
        let cfg = TpsConfig { probability: 0.5, positions: 7 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(tps_apply(&tokens(2, 6, 1), &cfg, &mut rng), Err(MstatError::Config(_))));
        let bad_p = TpsConfig { probability: 1.5, positions: 1 };
        assert!(bad_p.validate(6).is_err());
    }

    #[test]
    fn plan_is_deterministic_under_seed() {
        let cfg = TpsConfig { probability: 1.0, positions: 3 };
        let a = tps_plan(&cfg, 8, 10, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = tps_plan(&cfg, 8, 10, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.positions.len(), 3);
    }

    #[test]
    fn streaming_draws_differ() {
        let cfg = TpsConfig { probability: 1.0, positions: 4 };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = tps_plan(&cfg, 8, 10, &mut rng).unwrap();
        let b = tps_plan(&cfg, 8, 10, &mut rng).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn invocation_counter_advances() {
        let before = tps_invocations();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        tps_apply(&tokens(2, 2, 1), &TpsConfig::disabled(), &mut rng).unwrap();
        assert!(tps_invocations() > before);
    }
}
