use std::fs;
use std::path::PathBuf;

use clap::Args;
use mstat_core::augment::{tps_plan, TpsConfig};
use mstat_core::MstatError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::ConfigArgs;

#[derive(Args)]
pub struct DemoArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Shuffle probability; defaults to `model.tps_probability`.
    #[arg(long)]
    p: Option<f64>,
    /// Spatial positions shuffled; defaults to `model.tps_positions`.
    #[arg(long)]
    k: Option<usize>,
    /// Frames per clip; defaults to the training clip length.
    #[arg(long)]
    frames: Option<usize>,
    /// Patches per frame; defaults to the model's patch grid.
    #[arg(long)]
    patches: Option<usize>,
    #[arg(long, default_value_t = 1)]
    clips: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the JSON maps here instead of stdout.
    #[arg(long, value_name = "FILE")]
    json: Option<PathBuf>,
}

/// Token index maps of one clip: entry `[t][n]` is the flat input token
/// index `t * patches + n` placed at that slot.
#[derive(Debug, Serialize)]
pub struct ClipMaps {
    pub applied: bool,
    pub positions: Vec<usize>,
    pub before: Vec<Vec<usize>>,
    pub after: Vec<Vec<usize>>,
}

#[derive(Debug, Serialize)]
pub struct DemoReport {
    pub probability: f64,
    pub positions: usize,
    pub frames: usize,
    pub patches: usize,
    pub seed: u64,
    pub clips: Vec<ClipMaps>,
}

pub fn demo_maps(cfg: &TpsConfig, frames: usize, patches: usize, clips: usize, seed: u64) -> Result<DemoReport, MstatError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = |f: &dyn Fn(usize, usize) -> usize| -> Vec<Vec<usize>> {
        (0..frames).map(|t| (0..patches).map(|n| f(t, n)).collect()).collect()
    };
    let mut out = Vec::with_capacity(clips);
    for _ in 0..clips {
        let plan = tps_plan(cfg, frames, patches, &mut rng)?;
        out.push(ClipMaps {
            applied: plan.applied,
            positions: plan.positions.clone(),
            before: grid(&|t, n| t * patches + n),
            after: grid(&|t, n| plan.source[t * patches + n] * patches + n),
        });
    }
    Ok(DemoReport {
        probability: cfg.probability,
        positions: cfg.positions,
        frames,
        patches,
        seed,
        clips: out,
    })
}

fn render(rep: &DemoReport) -> String {
    let width = (rep.frames * rep.patches).max(2).ilog10() as usize + 2;
    let mut s = String::new();
    for (i, c) in rep.clips.iter().enumerate() {
        s += &format!("clip {i}: shuffled={} positions={:?}\n", c.applied, c.positions);
        for (b, a) in c.before.iter().zip(&c.after) {
            let row = |r: &[usize]| r.iter().map(|v| format!("{v:>width$}")).collect::<String>();
            s += &format!("{}   |{}\n", row(b), row(a));
        }
    }
    s
}

pub fn run(args: &DemoArgs) -> Result<(), MstatError> {
    let model = args.config.resolve()?.model;
    let cfg = TpsConfig {
        probability: args.p.unwrap_or(model.tps.probability),
        positions: args.k.unwrap_or(model.tps.positions),
    };
    let frames = args.frames.unwrap_or(model.frames_train);
    let patches = args.patches.unwrap_or(model.patches());
    let rep = demo_maps(&cfg, frames, patches, args.clips, args.seed)?;
    print!("{}", render(&rep));
    let json = serde_json::to_string_pretty(&rep).map_err(|e| MstatError::Config(e.to_string()))?;
    match &args.json {
        Some(p) => fs::write(p, json + "\n")?,
        None => println!("{json}"),
    }
    Ok(())
}
