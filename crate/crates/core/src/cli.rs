//! Command-line entry points: train, prune, finetune, expand, report, eval.
//!
//! Every subcommand resolves one [`RunConfig`] the same way — an explicit
//! `--config` file, else the snapshot already in the run directory, else
//! defaults — then applies its own flag overrides, validates, and writes the
//! resolved snapshot back into the run directory before doing any work. The
//! snapshot plus the seeds in it reproduce the run. Exit status is nonzero
//! exactly when a command fails; shortfalls and other recoverable conditions
//! are warnings on stderr.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::augment::expand_dataset;
use crate::config::RunConfig;
use crate::data::{store_idx, Dataset};
use crate::distill::{expansion_seed, finetune};
use crate::error::{Error, Result};
use crate::nn::NetworkGraph;
use crate::prune::{
    apply_surgery, count_macs_params, discover_groups, make_plan, score_groups, Criterion,
    PlanMeta, ProxySet, PruneTarget,
};
use crate::report::{self, MacsReport};
use crate::train::{evaluate, train_teacher, MetricsLog};

#[derive(Parser, Debug)]
#[command(
    name = "resprune",
    version,
    about = "Train, prune, and recover small residual CNNs"
)]
pub struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Flags shared by every subcommand.
#[derive(Args, Debug, Default)]
struct Common {
    /// Configuration file (flat TOML keys; flags override file values).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output root; overrides the out_dir key and RESPRUNE_OUT.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run directory name under the output root.
    #[arg(long)]
    run: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Train the reference network and write its checkpoint.
    Train(TrainArgs),
    /// Score channel groups, plan, and carve the pruned network.
    Prune(PruneArgs),
    /// Recover a pruned network with two-step distillation.
    Finetune(FinetuneArgs),
    /// Write the six-fold expanded dataset with its provenance manifest.
    Expand(ExpandArgs),
    /// Tabulate finished runs under the output root.
    Report(ReportArgs),
    /// Measure a checkpoint's accuracy on a dataset split.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    mixup_alpha: Option<f64>,
    /// Training seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct PruneArgs {
    #[command(flatten)]
    common: Common,
    /// Importance criterion: random, weight_sum, delta_loss, or kl.
    #[arg(long)]
    criterion: Option<String>,
    /// Pruning target: "macs_ratio <r>" or "groups <k>".
    #[arg(long)]
    target: Option<String>,
    #[arg(long)]
    proxy_size: Option<usize>,
    /// Scoring seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Teacher checkpoint; defaults to the run directory's.
    #[arg(long)]
    teacher: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[command(flatten)]
    common: Common,
    /// Freeze the stored teacher logits (sets eta to 0).
    #[arg(long)]
    no_refine: bool,
    /// Run step 2 on the original records instead of the expansion.
    #[arg(long)]
    no_expand: bool,
    #[arg(long)]
    step1_epochs: Option<usize>,
    #[arg(long)]
    step2_epochs: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    /// Fine-tuning seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Teacher checkpoint; defaults to the run directory's.
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Pruned checkpoint to recover; defaults to the run directory's.
    #[arg(long)]
    student: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExpandArgs {
    #[command(flatten)]
    common: Common,
    /// Fine-tuning seed the expansion seed is derived from.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[command(flatten)]
    common: Common,
    /// Root to scan; defaults to the resolved output root.
    root: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint to evaluate; defaults to the run's student, else teacher.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Which split to evaluate: train or eval.
    #[arg(long, default_value = "eval")]
    split: String,
}

/// Resolves the configuration for a subcommand: `--config` wins, else the
/// snapshot already present in the run directory, else defaults. `--out`
/// and `--run` then override where the run lives.
fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = if let Some(path) = &common.config {
        RunConfig::load(path)?
    } else {
        // Locate a prior snapshot with the same out/run resolution the
        // final config will use.
        let mut probe = RunConfig::default();
        if let Some(out) = &common.out {
            probe.out_dir = out.display().to_string();
        }
        if let Some(run) = &common.run {
            probe.run_name = run.clone();
        }
        let snapshot = probe.run_dir().join(report::CONFIG_FILE);
        if snapshot.exists() {
            RunConfig::load(&snapshot)?
        } else {
            RunConfig::default()
        }
    };
    if let Some(out) = &common.out {
        cfg.out_dir = out.display().to_string();
    }
    if let Some(run) = &common.run {
        cfg.run_name = run.clone();
    }
    Ok(cfg)
}

/// Validates, creates the run directory, and writes the resolved snapshot.
fn open_run(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let dir = cfg.run_dir();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    cfg.save(&dir.join(report::CONFIG_FILE))?;
    Ok(dir)
}

fn load_net(path: &Path, role: &str) -> Result<NetworkGraph<f32>> {
    if !path.exists() {
        return Err(Error::InvalidArgument(format!(
            "{role} checkpoint {} does not exist; run the earlier stages or pass a path",
            path.display()
        )));
    }
    NetworkGraph::load(path)
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut cfg = resolve(&args.common)?;
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.lr {
        cfg.lr = v;
    }
    if let Some(v) = args.mixup_alpha {
        cfg.mixup_alpha = v;
    }
    if let Some(v) = args.seed {
        cfg.train_seed = v;
    }
    let dir = open_run(&cfg)?;
    let (train, eval) = cfg.build_datasets()?;
    let spec = cfg.graph_spec();
    let mut net = NetworkGraph::<f32>::from_spec(&spec, cfg.net_seed)?;
    let mut log = MetricsLog::to_file(&dir.join(report::TEACHER_METRICS))?;
    train_teacher(&mut net, &train, Some(&eval), &cfg.train_config(), &mut log)?;
    let ckpt = dir.join(report::TEACHER_CKPT);
    net.save(&ckpt)?;
    let accuracy = log.final_accuracy().unwrap_or(f64::NAN);
    println!(
        "trained {} epochs on {} records; eval accuracy {:.4}",
        cfg.epochs,
        train.len(),
        accuracy
    );
    println!("checkpoint {}", ckpt.display());
    Ok(())
}

fn cmd_prune(args: &PruneArgs) -> Result<()> {
    let mut cfg = resolve(&args.common)?;
    if let Some(v) = &args.criterion {
        cfg.criterion = v.clone();
    }
    if let Some(v) = &args.target {
        cfg.target = v.clone();
    }
    if let Some(v) = args.proxy_size {
        cfg.proxy_size = v;
    }
    if let Some(v) = args.seed {
        cfg.prune_seed = v;
    }
    let dir = open_run(&cfg)?;
    let teacher_path =
        args.teacher.clone().unwrap_or_else(|| dir.join(report::TEACHER_CKPT));
    let mut net = load_net(&teacher_path, "teacher")?;
    let (train, eval) = cfg.build_datasets()?;

    let criterion: Criterion = cfg.criterion.parse()?;
    let target: PruneTarget = cfg.target.parse()?;
    let groups = discover_groups(&net)?;
    let proxy = if criterion.needs_proxy() {
        Some(ProxySet::build(&net, &train, cfg.proxy_size, cfg.prune_seed)?)
    } else {
        None
    };
    let scores = score_groups(&mut net, &groups, criterion, proxy.as_ref(), cfg.prune_seed)?;
    let meta = PlanMeta {
        criterion,
        seed: cfg.prune_seed,
        proxy_digest: proxy
            .as_ref()
            .map(|p| p.digest().to_string())
            .unwrap_or_else(|| "none".into()),
    };
    let spec = net.spec();
    let (plan, shortfall) =
        make_plan(&spec, &groups, &scores, target, cfg.retention_floor, &meta)?;
    let pruned = apply_surgery(&net, &plan)?;

    let (macs_before, params_before) = count_macs_params(&net);
    let (macs_after, params_after) = count_macs_params(&pruned);
    let macs_ratio = macs_after as f64 / macs_before as f64;
    let pruned_accuracy = evaluate(&pruned, &eval, cfg.batch_size)?;

    plan.save(&dir.join(report::PLAN_FILE))?;
    pruned.save(&dir.join(report::PRUNED_CKPT))?;
    let macs_report = MacsReport {
        criterion: criterion.to_string(),
        target: target.to_string(),
        macs_before,
        macs_after,
        params_before,
        params_after,
        macs_ratio,
        removed_groups: plan.removed_count(),
        pruned_accuracy,
        shortfall: shortfall.as_ref().map(|s| s.to_string()),
    };
    macs_report.save(&dir.join(report::MACS_FILE))?;

    println!(
        "criterion {criterion}: removed {} of {} groups",
        plan.removed_count(),
        groups.len()
    );
    println!("macs   {macs_before} -> {macs_after} (ratio {macs_ratio:.4})");
    println!("params {params_before} -> {params_after}");
    println!("pruned eval accuracy {pruned_accuracy:.4}");
    println!("plan {}", dir.join(report::PLAN_FILE).display());
    if let Some(s) = &shortfall {
        // Best-feasible plan was written; this is a warning, not a failure.
        eprintln!("warning: {s}");
    }
    Ok(())
}

fn cmd_finetune(args: &FinetuneArgs) -> Result<()> {
    let mut cfg = resolve(&args.common)?;
    if let Some(v) = args.step1_epochs {
        cfg.step1_epochs = v;
    }
    if let Some(v) = args.step2_epochs {
        cfg.step2_epochs = v;
    }
    if let Some(v) = args.eta {
        cfg.eta = v;
    }
    if args.no_refine {
        cfg.eta = 0.0;
    }
    if args.no_expand {
        cfg.expand = false;
    }
    if let Some(v) = args.seed {
        cfg.finetune_seed = v;
    }
    let dir = open_run(&cfg)?;
    let teacher_path =
        args.teacher.clone().unwrap_or_else(|| dir.join(report::TEACHER_CKPT));
    let student_path =
        args.student.clone().unwrap_or_else(|| dir.join(report::PRUNED_CKPT));
    let teacher = load_net(&teacher_path, "teacher")?;
    let mut student = load_net(&student_path, "pruned")?;
    let (train, eval) = cfg.build_datasets()?;

    let mut log = MetricsLog::to_file(&dir.join(report::FINETUNE_METRICS))?;
    let store = finetune(
        &mut student,
        &teacher,
        &train,
        Some(&eval),
        &cfg.finetune_config(),
        &mut log,
        Some(&dir.join(report::LOGIT_STORE)),
    )?;
    let ckpt = dir.join(report::STUDENT_CKPT);
    student.save(&ckpt)?;
    let accuracy = log.final_accuracy().unwrap_or(f64::NAN);
    println!(
        "fine-tuned {}+{} epochs over {} stored logit rows; eval accuracy {:.4}",
        cfg.step1_epochs,
        cfg.step2_epochs,
        store.len(),
        accuracy
    );
    println!("checkpoint {}", ckpt.display());
    Ok(())
}

fn cmd_expand(args: &ExpandArgs) -> Result<()> {
    let mut cfg = resolve(&args.common)?;
    if let Some(v) = args.seed {
        cfg.finetune_seed = v;
    }
    let dir = open_run(&cfg)?;
    let (train, _) = cfg.build_datasets()?;
    let expanded = expand_dataset(&train, expansion_seed(cfg.finetune_seed))?;
    let images = dir.join(report::EXPANDED_IMAGES);
    let labels = dir.join(report::EXPANDED_LABELS);
    store_idx(&expanded.data, &images, &labels)?;
    expanded.write_provenance(&dir.join(report::PROVENANCE_FILE))?;
    println!(
        "expanded {} records to {}; manifest {}",
        train.len(),
        expanded.data.len(),
        dir.join(report::PROVENANCE_FILE).display()
    );
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let cfg = resolve(&args.common)?;
    let root = args.root.clone().unwrap_or_else(|| cfg.out_root());
    if !root.is_dir() {
        return Err(Error::InvalidArgument(format!(
            "report root {} is not a directory",
            root.display()
        )));
    }
    let text = report::write_report(&root)?;
    print!("{text}");
    println!("written to {} and {}", report::REPORT_TEXT, report::REPORT_JSON);
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let cfg = resolve(&args.common)?;
    cfg.validate()?;
    let dir = cfg.run_dir();
    let checkpoint = match &args.checkpoint {
        Some(p) => p.clone(),
        None => {
            let student = dir.join(report::STUDENT_CKPT);
            if student.exists() {
                student
            } else {
                dir.join(report::TEACHER_CKPT)
            }
        }
    };
    let net = load_net(&checkpoint, "eval")?;
    let (train, eval) = cfg.build_datasets()?;
    let data: &Dataset = match args.split.as_str() {
        "train" => &train,
        "eval" => &eval,
        other => {
            return Err(Error::InvalidArgument(format!(
                "split must be train or eval, got \"{other}\""
            )))
        }
    };
    let accuracy = evaluate(&net, data, cfg.batch_size)?;
    let result = serde_json::json!({
        "checkpoint": checkpoint.display().to_string(),
        "split": args.split,
        "records": data.len(),
        "accuracy": accuracy,
    });
    if dir.is_dir() {
        let path = dir.join(report::EVAL_FILE);
        let mut text = serde_json::to_string_pretty(&result)
            .map_err(|e| Error::Internal(format!("eval serialization: {e}")))?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    println!(
        "accuracy {accuracy:.4} on {} {} records ({})",
        data.len(),
        args.split,
        checkpoint.display()
    );
    Ok(())
}

/// Dispatches a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Train(args) => cmd_train(args),
        Cmd::Prune(args) => cmd_prune(args),
        Cmd::Finetune(args) => cmd_finetune(args),
        Cmd::Expand(args) => cmd_expand(args),
        Cmd::Report(args) => cmd_report(args),
        Cmd::Eval(args) => cmd_eval(args),
    }
}

/// Entry point for the `resprune` binary; returns the process exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
