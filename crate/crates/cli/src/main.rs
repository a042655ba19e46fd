//! `mstat`: train, evaluate and audit the MSTAT re-identification model.

mod demo;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mstat_core::bench::run_cost_report_at;
use mstat_core::config::KvMap;
use mstat_core::data::{generate_synthetic_tracklets, Split, SynthSpec};
use mstat_core::gradcheck::{run_gradcheck, GradcheckOptions, Scope};
use mstat_core::model::StageMask;
use mstat_core::pipeline::{export_attention_maps, report_table, run_eval, run_train, write_reports, RunConfig};
use mstat_core::retrieval::Protocol;
use mstat_core::MstatError;

#[derive(Parser)]
#[command(name = "mstat", version, about = "Video person re-identification with MSTAT")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from scratch or resume from an epoch checkpoint.
    Train(TrainArgs),
    /// Rank query against gallery and write CMC/mAP reports.
    Eval(EvalArgs),
    /// Count attention multiply-accumulates for joint, divided and proxy attention.
    BenchAttn(BenchArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Print temporal patch shuffling index maps.
    AugmentDemo(demo::DemoArgs),
    /// Write a synthetic tracklet dataset and its manifest.
    SynthData(SynthArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Start from the desk-scale preset instead of the full-scale one.
    #[arg(long)]
    desk: bool,
    /// Key-value config file; later sources win: preset, file, overrides.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// `key=value` overrides, e.g. `run.epochs=5`.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn kv(&self) -> Result<KvMap, MstatError> {
        let mut kv = match &self.config {
            Some(p) => KvMap::parse(&fs::read_to_string(p).map_err(|e| {
                MstatError::Config(format!("cannot read config {}: {e}", p.display()))
            })?)?,
            None => KvMap::new(),
        };
        if self.desk {
            kv.set("model.preset", "desk");
        }
        for o in &self.overrides {
            kv.apply_override(o)?;
        }
        Ok(kv)
    }

    fn resolve(&self) -> Result<RunConfig, MstatError> {
        RunConfig::from_kv(&self.kv()?)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Epoch checkpoint directory to continue from.
    #[arg(long, value_name = "DIR")]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Checkpoint directory; defaults to `final` under the checkpoint dir.
    #[arg(long, value_name = "DIR")]
    checkpoint: Option<PathBuf>,
    /// cross_camera, all_cameras or self.
    #[arg(long, default_value = "cross_camera")]
    protocol: String,
    /// Comma-separated stage masks such as `I,I+II+III`, or `all` for every subset.
    #[arg(long, default_value = "I+II+III")]
    stages: String,
    /// Seed of the evaluation clip sampling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Include the full CMC curve in the JSON report.
    #[arg(long)]
    cmc: bool,
    /// Report directory; defaults to `paths.report_dir`.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Also dump proxy attention maps of the first query tracklets here.
    #[arg(long, value_name = "DIR")]
    export_maps: Option<PathBuf>,
    /// Number of tracklets whose maps are exported.
    #[arg(long, default_value_t = 4)]
    export_limit: usize,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Clip length; defaults to the model's training clip.
    #[arg(long)]
    t: Option<usize>,
    /// Patches per frame.
    #[arg(long)]
    n: Option<usize>,
    /// Token width.
    #[arg(long)]
    d: Option<usize>,
    /// Identity prototypes.
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    /// Add the token projection products to every variant.
    #[arg(long)]
    projections: bool,
    /// Write the JSON record here instead of stdout.
    #[arg(long, value_name = "FILE")]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// `all` or a comma list of tensor, attention, sta, proxy, norm, objectives, model.
    #[arg(long, default_value = "all")]
    scope: String,
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Coordinates probed per parameter tensor.
    #[arg(long, default_value_t = 24)]
    max_coords: usize,
    /// Deliberately break the softmax backward pass to show the suite catches it.
    #[arg(long)]
    flip_softmax_backward: bool,
    /// Write the full JSON report here.
    #[arg(long, value_name = "FILE")]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory; the manifest is `manifest.jsonl` inside it.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long, default_value_t = 24)]
    identities: usize,
    #[arg(long, default_value_t = 16)]
    train_identities: usize,
    #[arg(long, default_value_t = 2)]
    cameras: usize,
    #[arg(long, default_value_t = 4)]
    tracklets_per_id: usize,
    #[arg(long, default_value_t = 16)]
    frames: usize,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 16)]
    width: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<String, MstatError> {
    serde_json::to_string_pretty(v).map_err(|e| MstatError::Config(e.to_string()))
}

fn train(args: &TrainArgs) -> Result<(), MstatError> {
    let cfg = args.config.resolve()?;
    log::info!(
        "training {} epochs on {} (preset {})",
        cfg.epochs,
        cfg.manifest.display(),
        cfg.preset
    );
    let summary = run_train(&cfg, args.resume.as_deref())?;
    println!("final checkpoint: {}", summary.final_checkpoint.display());
    println!("epochs run: {}  steps: {}", summary.epochs_run, summary.steps);
    if let Some(r) = summary.last {
        println!(
            "last step: loss {:.6}  ce {:.4}/{:.4}/{:.4}  triplet {:.4}/{:.4}/{:.4}",
            r.total, r.ce[0], r.ce[1], r.ce[2], r.triplet[0], r.triplet[1], r.triplet[2]
        );
    }
    Ok(())
}

fn parse_masks(s: &str) -> Result<Vec<StageMask>, MstatError> {
    if s == "all" {
        return Ok(StageMask::all_subsets());
    }
    s.split(',').map(|m| StageMask::parse(m.trim())).collect()
}

fn eval(args: &EvalArgs) -> Result<(), MstatError> {
    let cfg = args.config.resolve()?;
    let protocol = Protocol::parse(&args.protocol)
        .ok_or_else(|| MstatError::Usage(format!("unknown protocol `{}`", args.protocol)))?;
    let masks = parse_masks(&args.stages)?;
    let checkpoint = args
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.checkpoint_dir.join("final"));
    let reports = run_eval(&cfg.manifest, &checkpoint, protocol, &masks, args.seed, args.cmc)?;
    let out = args.out.clone().unwrap_or_else(|| cfg.report_dir.clone());
    write_reports(&out, &reports)?;
    let mut echo = KvMap::new();
    echo.set("eval.checkpoint", checkpoint.display());
    echo.set("eval.manifest", cfg.manifest.display());
    echo.set("eval.protocol", protocol.name());
    echo.set("eval.stages", masks.iter().map(|m| m.name()).collect::<Vec<_>>().join(","));
    echo.set("eval.seed", args.seed);
    fs::write(out.join("eval_config.txt"), echo.to_text())?;
    print!("{}", report_table(&reports));
    if let Some(dir) = &args.export_maps {
        let recs = export_attention_maps(&cfg.manifest, &checkpoint, Split::Query, args.export_limit, args.seed, dir)?;
        println!("exported {} attention maps to {}", recs.len(), dir.display());
    }
    Ok(())
}

fn bench(args: &BenchArgs) -> Result<(), MstatError> {
    let cfg = args.config.resolve()?.model;
    let t = args.t.unwrap_or(cfg.frames_train);
    let n = args.n.unwrap_or(cfg.patches());
    let d = args.d.unwrap_or(cfg.dim());
    let m = args.m.unwrap_or(cfg.prototypes);
    let heads = args.heads.unwrap_or(cfg.heads);
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(MstatError::Config(format!("{heads} heads do not divide d={d}")));
    }
    let rep = run_cost_report_at(t, n, d, m, heads, args.projections)?;
    print!("{}", rep.table());
    let json = to_json(&rep)?;
    match &args.json {
        Some(p) => fs::write(p, json + "\n")?,
        None => println!("{json}"),
    }
    Ok(())
}

fn gradcheck(args: &GradcheckArgs) -> Result<(), MstatError> {
    let scopes = Scope::parse_list(&args.scope)?;
    let opts = GradcheckOptions {
        seeds: args.seeds,
        tolerance: args.tolerance,
        max_coords: args.max_coords,
        flip_softmax_backward: args.flip_softmax_backward,
        ..GradcheckOptions::default()
    };
    let report = run_gradcheck(&scopes, &opts)?;
    print!("{}", report.table());
    if let Some(p) = &args.json {
        fs::write(p, to_json(&report)? + "\n")?;
    }
    if report.passed() {
        Ok(())
    } else {
        Err(MstatError::Verification(format!(
            "{} gradient checks above tolerance {:e}",
            report.failures.len(),
            args.tolerance
        )))
    }
}

fn synth(args: &SynthArgs) -> Result<(), MstatError> {
    let spec = SynthSpec {
        identities: args.identities,
        train_identities: args.train_identities,
        cameras: args.cameras,
        tracklets_per_id: args.tracklets_per_id,
        frames: args.frames,
        height: args.height,
        width: args.width,
        seed: args.seed,
        ..SynthSpec::default()
    };
    let m = generate_synthetic_tracklets(&spec, &args.out)?;
    let count = |s| m.split(s).len();
    println!(
        "wrote {} tracklets ({} train, {} query, {} gallery) to {}",
        m.records.len(),
        count(Split::Train),
        count(Split::Query),
        count(Split::Gallery),
        Path::new(&args.out).join("manifest.jsonl").display()
    );
    Ok(())
}

fn exit_code(e: &MstatError) -> u8 {
    match e {
        MstatError::Config(_) | MstatError::Usage(_) | MstatError::Parse { .. } => 1,
        MstatError::DataContract(_) | MstatError::Io(_) | MstatError::Degenerate(_) => 2,
        MstatError::Verification(_) | MstatError::Tensor(_) => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MSTAT_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::BenchAttn(a) => bench(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::AugmentDemo(a) => demo::run(a),
        Command::SynthData(a) => synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn exit_codes_by_error_kind() {
        assert_eq!(exit_code(&MstatError::Config("x".into())), 1);
        assert_eq!(exit_code(&MstatError::DataContract("x".into())), 2);
        assert_eq!(exit_code(&MstatError::Verification("x".into())), 3);
    }

    #[test]
    fn overrides_beat_file_and_desk_flag() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.conf");
        fs::write(&file, "model.preset = full\nrun.epochs = 7\nrun.seed = 3\n").unwrap();
        let args = ConfigArgs {
            desk: true,
            config: Some(file),
            overrides: vec!["run.epochs=2".into()],
        };
        let cfg = args.resolve().unwrap();
        assert_eq!((cfg.preset.as_str(), cfg.epochs, cfg.seed), ("desk", 2, 3));
    }

    #[test]
    fn mask_lists() {
        assert_eq!(parse_masks("all").unwrap().len(), 7);
        assert_eq!(parse_masks("I, I+II+III").unwrap().len(), 2);
        assert!(parse_masks("IV").is_err());
    }
}
