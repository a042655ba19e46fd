//! Exact multiply-accumulate accounting for joint, divided and proxy
//! attention.

use mstat_tensor::{measure_macs, MacCounts, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{default_heads, spatial_attention, temporal_attention, AttentionParams, Attended};
use crate::error::{MstatError, Result};
use crate::model::ModelConfig;
use crate::params::{Bound, ParamStore};
use crate::proxy::{DoubleNorm, IapBank};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnVariant {
    /// One softmax over all `T*N` tokens.
    Joint,
    /// Temporal attention per position, then spatial attention per frame.
    Divided,
    /// Identity-proxy re-coding against `M` prototypes.
    Iap { prototypes: usize },
}

/// Score plus aggregation products, projections excluded.
pub fn count_attention_macs(t: usize, n: usize, d: usize, variant: AttnVariant) -> u64 {
    let (t, n, d) = (t as u64, n as u64, d as u64);
    match variant {
        AttnVariant::Joint => 2 * (t * n) * (t * n) * d,
        AttnVariant::Divided => 2 * n * t * t * d + 2 * t * n * n * d,
        AttnVariant::Iap { prototypes } => 2 * t * n * prototypes as u64 * d,
    }
}

/// Token projection products of one pass.
pub fn count_projection_macs(t: usize, n: usize, d: usize, variant: AttnVariant) -> u64 {
    let l = (t * n) as u64;
    let d = d as u64;
    match variant {
        AttnVariant::Joint => 4 * l * d * d,
        AttnVariant::Divided => 8 * l * d * d,
        AttnVariant::Iap { .. } => 2 * l * d * d,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub t: usize,
    pub n: usize,
    pub d: usize,
    pub m: usize,
    pub heads: usize,
    pub include_projections: bool,
    pub macs_joint: u64,
    pub macs_divided: u64,
    pub macs_iap: u64,
    pub divided_over_joint: f64,
}

impl CostReport {
    pub fn table(&self) -> String {
        let rows = [
            ("joint", self.macs_joint),
            ("divided", self.macs_divided),
            ("iap", self.macs_iap),
        ];
        let mut out = format!(
            "T={} N={} d={} M={} heads={} projections={}\n",
            self.t, self.n, self.d, self.m, self.heads, self.include_projections
        );
        out.push_str(&format!("{:<10}{:>20}\n", "variant", "MACs"));
        for (name, v) in rows {
            out.push_str(&format!("{name:<10}{v:>20}\n"));
        }
        out.push_str(&format!("{:<10}{:>20.6}\n", "ratio", self.divided_over_joint));
        out
    }
}

/// Reference joint space-time attention over all `T*N` tokens of one
/// clip `[T, N, d]`. Used for counting and output comparison only.
pub fn joint_attention(params: &AttentionParams, p: &Bound<f32>, tokens: &Tensor<f32>) -> Result<Attended<f32>> {
    let s = tokens.shape().to_vec();
    if s.len() != 3 {
        return Err(MstatError::Usage(format!("joint attention expects [T, N, d], got {s:?}")));
    }
    let out = params.forward(p, &tokens.reshape(&[1, s[0] * s[1], s[2]])?)?;
    Ok(Attended {
        output: out.output.reshape(&s)?,
        maps: out.maps,
    })
}

fn charged(c: MacCounts, with_proj: bool) -> u64 {
    c.attention + if with_proj { c.projection } else { 0 }
}

/// Runs instrumented forward passes for the three variants.
pub fn instrumented_costs(
    t: usize,
    n: usize,
    d: usize,
    m: usize,
    heads: usize,
    include_projections: bool,
) -> Result<CostReport> {
    if t == 0 || n == 0 || d == 0 || m == 0 {
        return Err(MstatError::Config("cost accounting needs positive T, N, d, M".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::<f32>::new();
    let att = AttentionParams::new(&mut store, "joint", d, heads, &mut rng)?;
    let iap = IapBank::new(&mut store, "iap", d, heads, m, DoubleNorm::default(), &mut rng)?;
    let p = store.bind(false)?;
    let clip = Tensor::<f32>::zeros(&[1, t, n, d]);

    let (r, joint) = measure_macs(|| joint_attention(&att, &p, &clip.reshape(&[t, n, d])?));
    r?;
    let (r, divided) = measure_macs(|| -> Result<()> {
        let temporal = temporal_attention(&att, &p, &clip)?;
        spatial_attention(&att, &p, &temporal.output)?;
        Ok(())
    });
    r?;
    let (r, proxy) = measure_macs(|| iap.forward(&p, &clip.reshape(&[1, t * n, d])?));
    r?;

    let macs_joint = charged(joint, include_projections);
    let macs_divided = charged(divided, include_projections);
    Ok(CostReport {
        t,
        n,
        d,
        m,
        heads,
        include_projections,
        macs_joint,
        macs_divided,
        macs_iap: charged(proxy, include_projections),
        divided_over_joint: macs_divided as f64 / macs_joint as f64,
    })
}

/// Closed-form report for the same quantities.
pub fn closed_form_costs(t: usize, n: usize, d: usize, m: usize, heads: usize, include_projections: bool) -> CostReport {
    let total = |v: AttnVariant| {
        count_attention_macs(t, n, d, v) + if include_projections { count_projection_macs(t, n, d, v) } else { 0 }
    };
    let macs_joint = total(AttnVariant::Joint);
    let macs_divided = total(AttnVariant::Divided);
    CostReport {
        t,
        n,
        d,
        m,
        heads,
        include_projections,
        macs_joint,
        macs_divided,
        macs_iap: total(AttnVariant::Iap { prototypes: m }),
        divided_over_joint: macs_divided as f64 / macs_joint as f64,
    }
}

/// Instrumented costs at the model's training clip size, checked against
/// the closed forms.
pub fn run_cost_report(cfg: &ModelConfig, include_projections: bool) -> Result<CostReport> {
    cfg.validate()?;
    run_cost_report_at(cfg.frames_train, cfg.patches(), cfg.dim(), cfg.prototypes, cfg.heads, include_projections)
}

pub fn run_cost_report_at(
    t: usize,
    n: usize,
    d: usize,
    m: usize,
    heads: usize,
    include_projections: bool,
) -> Result<CostReport> {
    let measured = instrumented_costs(t, n, d, m, heads, include_projections)?;
    let expected = closed_form_costs(t, n, d, m, heads, include_projections);
    if measured != expected {
        return Err(MstatError::Verification(format!(
            "instrumented counts {:?} differ from closed forms {:?}",
            (measured.macs_joint, measured.macs_divided, measured.macs_iap),
            (expected.macs_joint, expected.macs_divided, expected.macs_iap)
        )));
    }
    Ok(measured)
}

/// Head count used by the cost grid: the model default, clamped to divide `d`.
pub fn grid_heads(d: usize) -> usize {
    let h = default_heads(d);
    if d.is_multiple_of(h) {
        h
    } else {
        1
    }
}
