//! End-to-end drive of the command line: train, prune, finetune, expand,
//! report, eval against one tiny synthetic run directory. The point is the
//! wiring — artifacts land where the report expects them, reruns are
//! deterministic, and recoverable conditions exit zero.

use std::path::{Path, PathBuf};

use clap::Parser;

use resprune_core::cli::{run, Cli};
use resprune_core::config::RunConfig;
use resprune_core::prune::PruningPlan;
use resprune_core::report;

fn tiny_config(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.class_count = 3;
    cfg.per_class = 6;
    cfg.eval_per_class = 2;
    cfg.image_side = 8;
    cfg.stem_width = 8;
    cfg.stage_widths = vec![8, 8];
    cfg.blocks_per_stage = 1;
    cfg.epochs = 2;
    cfg.batch_size = 8;
    cfg.warmup_epochs = 1;
    cfg.target = "groups 2".into();
    cfg.proxy_size = 6;
    cfg.step1_epochs = 1;
    cfg.step2_epochs = 1;
    cfg.finetune_warmup = 0;
    cfg.out_dir = out.display().to_string();
    cfg.run_name = "pipe".into();
    cfg
}

fn invoke(args: &[&str]) {
    let cli = Cli::try_parse_from(args).expect("arguments parse");
    run(cli).unwrap_or_else(|e| panic!("{} failed: {e}", args[1]));
}

#[test]
fn full_pipeline_produces_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    std::fs::create_dir(&out).unwrap();
    let config_path = tmp.path().join("tiny.toml");
    tiny_config(&out).save(&config_path).unwrap();
    let cfg_flag = config_path.display().to_string();
    let run_dir = out.join("pipe");

    invoke(&["resprune", "train", "--config", &cfg_flag]);
    for name in [report::CONFIG_FILE, report::TEACHER_CKPT, report::TEACHER_METRICS] {
        assert!(run_dir.join(name).exists(), "train should write {name}");
    }

    // Later commands pick the snapshot up from the run directory alone.
    let out_flag = out.display().to_string();
    invoke(&["resprune", "prune", "--out", &out_flag, "--run", "pipe"]);
    for name in [report::PLAN_FILE, report::PRUNED_CKPT, report::MACS_FILE] {
        assert!(run_dir.join(name).exists(), "prune should write {name}");
    }
    let macs = report::MacsReport::load(&run_dir.join(report::MACS_FILE)).unwrap();
    assert!(macs.macs_after < macs.macs_before);
    assert_eq!(macs.removed_groups, 2);
    assert!(macs.shortfall.is_none(), "a 2-group target is feasible here");
    let plan_bytes = std::fs::read(run_dir.join(report::PLAN_FILE)).unwrap();
    PruningPlan::load(&run_dir.join(report::PLAN_FILE)).unwrap();

    // Same seed, same plan, byte for byte.
    invoke(&["resprune", "prune", "--out", &out_flag, "--run", "pipe"]);
    assert_eq!(plan_bytes, std::fs::read(run_dir.join(report::PLAN_FILE)).unwrap());

    invoke(&["resprune", "finetune", "--out", &out_flag, "--run", "pipe"]);
    for name in [report::STUDENT_CKPT, report::FINETUNE_METRICS, report::LOGIT_STORE] {
        assert!(run_dir.join(name).exists(), "finetune should write {name}");
    }

    invoke(&["resprune", "expand", "--out", &out_flag, "--run", "pipe"]);
    let (images, labels) = (
        run_dir.join(report::EXPANDED_IMAGES),
        run_dir.join(report::EXPANDED_LABELS),
    );
    let expanded = resprune_core::data::load_idx(&images, &labels).unwrap();
    assert_eq!(expanded.len(), 6 * 18, "six records for each of the 18 originals");
    let manifest = std::fs::read_to_string(run_dir.join(report::PROVENANCE_FILE)).unwrap();
    assert_eq!(manifest.lines().count(), 1 + 108, "header plus one line per record");

    invoke(&["resprune", "report", "--out", &out_flag, &out_flag]);
    let text = std::fs::read_to_string(out.join(report::REPORT_TEXT)).unwrap();
    assert!(text.contains("pipe"));
    assert!(text.contains("criterion comparison"));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join(report::REPORT_JSON)).unwrap())
            .unwrap();
    assert_eq!(json["runs"][0]["name"], "pipe");
    assert_eq!(json["criteria"][3]["criterion"], "kl");
    assert_eq!(json["criteria"][3]["runs"], 1);

    invoke(&["resprune", "eval", "--out", &out_flag, "--run", "pipe"]);
    let eval: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join(report::EVAL_FILE)).unwrap())
            .unwrap();
    assert_eq!(eval["split"], "eval");
    assert_eq!(eval["records"], 6);
    let acc = eval["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(
        eval["checkpoint"].as_str().unwrap().ends_with(report::STUDENT_CKPT),
        "eval should prefer the fine-tuned checkpoint"
    );
}

#[test]
fn finetune_ablation_flags_reach_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    std::fs::create_dir(&out).unwrap();
    let config_path = tmp.path().join("tiny.toml");
    let mut cfg = tiny_config(&out);
    cfg.run_name = "ablate".into();
    cfg.epochs = 1;
    cfg.save(&config_path).unwrap();
    let cfg_flag = config_path.display().to_string();
    let run_dir = out.join("ablate");

    invoke(&["resprune", "train", "--config", &cfg_flag]);
    invoke(&["resprune", "prune", "--config", &cfg_flag]);
    invoke(&[
        "resprune", "finetune", "--config", &cfg_flag, "--no-refine", "--no-expand",
    ]);

    // The resolved snapshot records what actually ran.
    let snap = RunConfig::load(&run_dir.join(report::CONFIG_FILE)).unwrap();
    assert_eq!(snap.eta, 0.0);
    assert!(!snap.expand);

    // Without expansion the logit store covers only the originals.
    let store =
        resprune_core::distill::LogitStore::<f32>::load(&run_dir.join(report::LOGIT_STORE))
            .unwrap();
    assert_eq!(store.len(), 18);
    assert_eq!(store.eta(), 0.0);
}

#[test]
fn errors_surface_with_nonzero_style_results() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    std::fs::create_dir(&out).unwrap();
    let out_flag = out.display().to_string();

    // Pruning without a teacher checkpoint is an error, not a crash.
    let cli =
        Cli::try_parse_from(["resprune", "prune", "--out", &out_flag, "--run", "missing"])
            .unwrap();
    let err = run(cli).unwrap_err().to_string();
    assert!(err.contains("teacher"), "got: {err}");

    // An invalid config is rejected with every problem listed.
    let bad_path: PathBuf = tmp.path().join("bad.toml");
    let mut bad = tiny_config(&out);
    bad.batch_size = 0;
    bad.criterion = "osmosis".into();
    bad.save(&bad_path).unwrap();
    let cli = Cli::try_parse_from([
        "resprune", "train", "--config", &bad_path.display().to_string(),
    ])
    .unwrap();
    let err = run(cli).unwrap_err().to_string();
    assert!(err.contains("batch_size"), "got: {err}");
    assert!(err.contains("criterion"), "got: {err}");
}
