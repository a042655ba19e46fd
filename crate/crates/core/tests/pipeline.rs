use std::fs;
use std::path::{Path, PathBuf};

use mstat_core::data::{generate_synthetic_tracklets, Split, SynthSpec};
use mstat_core::model::StageMask;
use mstat_core::pipeline::{
    epoch_dir, export_attention_maps, run_eval, run_train, write_reports, MapRecord, RunConfig,
};
use mstat_core::retrieval::Protocol;
use mstat_core::MstatError;

fn small_data(root: &Path) -> PathBuf {
    let spec = SynthSpec {
        identities: 6,
        train_identities: 4,
        frames: 8,
        ..SynthSpec::default()
    };
    generate_synthetic_tracklets(&spec, &root.join("data")).unwrap();
    root.join("data/manifest.jsonl")
}

fn config(manifest: &Path, out: &Path, epochs: usize) -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.epochs = epochs;
    cfg.ids_per_batch = 2;
    cfg.manifest = manifest.to_path_buf();
    cfg.checkpoint_dir = out.join("ckpt");
    cfg.report_dir = out.join("rep");
    cfg
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn zero_epochs_writes_only_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_data(dir.path());
    let cfg = config(&manifest, dir.path(), 0);
    let s = run_train(&cfg, None).unwrap();
    assert_eq!(s.steps, 0);
    let entries: Vec<String> = fs::read_dir(&cfg.checkpoint_dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(entries, vec!["epoch-0000".to_string()]);
    assert_eq!(s.final_checkpoint, epoch_dir(&cfg.checkpoint_dir, 0));
    assert!(read(&cfg.report_dir.join("train_log.jsonl")).is_empty());
}

#[test]
fn resumed_run_replays_the_uninterrupted_one() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_data(dir.path());
    let straight = config(&manifest, &dir.path().join("a"), 4);
    run_train(&straight, None).unwrap();

    let mut split = config(&manifest, &dir.path().join("b"), 2);
    run_train(&split, None).unwrap();
    split.epochs = 4;
    run_train(&split, Some(&epoch_dir(&split.checkpoint_dir, 2))).unwrap();

    assert_eq!(
        read(&straight.report_dir.join("train_log.jsonl")),
        read(&split.report_dir.join("train_log.jsonl"))
    );
    for f in ["params.bin", "optimizer.bin", "state.txt"] {
        assert_eq!(
            read(&straight.checkpoint_dir.join("final").join(f)),
            read(&split.checkpoint_dir.join("final").join(f)),
            "{f}"
        );
    }
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_data(dir.path());
    let mut outputs = Vec::new();
    for name in ["x", "y"] {
        let cfg = config(&manifest, &dir.path().join(name), 5);
        let s = run_train(&cfg, None).unwrap();
        let reports = run_eval(&manifest, &s.final_checkpoint, Protocol::CrossCamera, &StageMask::all_subsets(), 3, true).unwrap();
        write_reports(&cfg.report_dir, &reports).unwrap();
        outputs.push(cfg);
    }
    let (a, b) = (&outputs[0], &outputs[1]);
    for f in ["train_log.jsonl", "eval_report.json", "eval_report.txt", "aap_cosine.json"] {
        assert_eq!(read(&a.report_dir.join(f)), read(&b.report_dir.join(f)), "{f}");
    }
    for e in 0..=5 {
        for f in ["params.bin", "params.txt", "optimizer.bin", "state.txt", "config.txt"] {
            let pa = epoch_dir(&a.checkpoint_dir, e).join(f);
            assert_eq!(read(&pa), read(&epoch_dir(&b.checkpoint_dir, e).join(f)), "{}", pa.display());
        }
    }
}

#[test]
fn keep_checkpoints_prunes_old_epochs() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_data(dir.path());
    let mut cfg = config(&manifest, dir.path(), 4);
    cfg.keep_checkpoints = 2;
    run_train(&cfg, None).unwrap();
    let mut names: Vec<String> = fs::read_dir(&cfg.checkpoint_dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(names, ["epoch-0000", "epoch-0003", "epoch-0004", "final"]);
}

#[test]
fn self_retrieval_uses_every_test_tracklet_on_both_sides() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_data(dir.path());
    let cfg = config(&manifest, dir.path(), 1);
    let s = run_train(&cfg, None).unwrap();
    let reps = run_eval(&manifest, &s.final_checkpoint, Protocol::SelfRetrieval, &[StageMask::ALL], 0, true).unwrap();
    let r = &reps[0];
    assert_eq!(r.protocol, "self");
    assert_eq!((r.num_query, r.num_gallery, r.num_valid_query), (8, 8, 8));
    let cmc = r.cmc.as_ref().unwrap();
    assert_eq!(cmc.len(), 8);
    assert_eq!(*cmc.last().unwrap(), 1.0);
    assert!(cmc.windows(2).all(|w| w[0] <= w[1]));
    assert!(r.map > 0.0 && r.map <= 1.0);
}

#[test]
fn stage_masks_give_comparable_reports() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_data(dir.path());
    let cfg = config(&manifest, dir.path(), 0);
    let s = run_train(&cfg, None).unwrap();
    let masks = [StageMask::ALL, StageMask::parse("I").unwrap()];
    let reps = run_eval(&manifest, &s.final_checkpoint, Protocol::CrossCamera, &masks, 0, false).unwrap();
    assert_eq!(reps.len(), 2);
    assert_eq!(reps[0].mask, "I+II+III");
    assert_eq!(reps[1].mask, "I");
    assert_eq!(reps[0].num_query, reps[1].num_query);
}

#[test]
fn missing_split_is_a_data_contract_error() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_data(dir.path());
    let cfg = config(&manifest, dir.path(), 0);
    let s = run_train(&cfg, None).unwrap();
    let text = fs::read_to_string(&manifest).unwrap();
    let train_only: String = text.lines().filter(|l| l.contains("\"train\"")).map(|l| format!("{l}\n")).collect();
    let path = dir.path().join("data/train_only.jsonl");
    fs::write(&path, train_only).unwrap();
    let err = run_eval(&path, &s.final_checkpoint, Protocol::CrossCamera, &[StageMask::ALL], 0, false).unwrap_err();
    assert!(matches!(err, MstatError::DataContract(_)), "{err}");
}

#[test]
fn mismatched_frame_size_names_the_problem() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_data(dir.path());
    let mut cfg = config(&manifest, dir.path(), 1);
    cfg.model.height = 64;
    cfg.model.width = 32;
    let err = run_train(&cfg, None).unwrap_err();
    assert!(matches!(err, MstatError::DataContract(ref m) if m.contains("32x16")), "{err}");
}

#[test]
fn attention_maps_export_with_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_data(dir.path());
    let cfg = config(&manifest, dir.path(), 0);
    let s = run_train(&cfg, None).unwrap();
    let out = dir.path().join("maps");
    let recs = export_attention_maps(&manifest, &s.final_checkpoint, Split::Query, 2, 0, &out).unwrap();
    assert_eq!(recs.len(), 6);
    let side = std::fs::read_to_string(out.join("maps.jsonl")).unwrap();
    let back: Vec<MapRecord> = side.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(back, recs);
    let m = &cfg.model;
    for r in &recs {
        assert_eq!(r.frames.len(), m.frames_test);
        let raw = mstat_tensor::io::read_tensor(&mut std::fs::File::open(out.join(&r.file)).unwrap()).unwrap();
        assert_eq!(raw.shape, r.shape);
        let tokens = m.frames_test * m.patches();
        match r.module.as_str() {
            "stage1.aap" => assert_eq!(r.shape, vec![m.heads, m.stage1_attributes, tokens]),
            _ => assert_eq!(r.shape, vec![m.heads, tokens + 1, m.prototypes]),
        }
    }
}
