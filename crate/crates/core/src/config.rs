//! Run configuration: one flat-key TOML file drives every subcommand, with
//! command-line flags overriding file values. A resolved snapshot is written
//! into each run directory so results never depend on mutable defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_idx, Dataset, SyntheticSpec};
use crate::distill::{DistillConfig, FinetuneConfig};
use crate::error::{Error, Result};
use crate::nn::{BlockSpec, GraphSpec, StageSpec};
use crate::prune::{Criterion, PruneTarget};
use crate::train::TrainConfig;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "RESPRUNE_OUT";

/// All run settings as flat keys. Defaults train the reference recipe:
/// batch 32, teacher lr 0.01 with 5 warmup epochs into cosine decay, mixup
/// at 1.0, KL pruning toward 60% of the original MACs with a 0.3 retention
/// floor and a 256-image proxy, then 25+2 fine-tuning epochs at lrs
/// 0.01/1e-4 with T=2/T=1, α=0.7, η=1, and six-fold expansion.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // Dataset: "synthetic" generates textures; "idx" loads container files.
    pub dataset: String,
    pub idx_images: String,
    pub idx_labels: String,
    pub class_count: usize,
    /// Training records per class (synthetic source).
    pub per_class: usize,
    /// Held-out records per class (synthetic source).
    pub eval_per_class: usize,
    pub image_side: usize,
    pub in_channels: usize,
    pub data_seed: u64,

    // Architecture.
    pub stem_width: usize,
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub depthwise: bool,
    pub net_seed: u64,

    // Teacher training.
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub mixup_alpha: f64,
    pub train_seed: u64,

    // Pruning.
    pub criterion: String,
    /// `macs_ratio <r>` or `groups <k>`.
    pub target: String,
    pub retention_floor: f64,
    pub proxy_size: usize,
    pub prune_seed: u64,

    // Fine-tuning.
    pub temperature1: f64,
    pub temperature2: f64,
    pub alpha: f64,
    pub eta: f64,
    pub step1_epochs: usize,
    pub step2_epochs: usize,
    pub step1_lr: f64,
    pub step2_lr: f64,
    pub finetune_warmup: usize,
    pub expand: bool,
    pub finetune_seed: u64,

    // Output.
    pub out_dir: String,
    pub run_name: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: "synthetic".into(),
            idx_images: String::new(),
            idx_labels: String::new(),
            class_count: 10,
            per_class: 60,
            eval_per_class: 20,
            image_side: 32,
            in_channels: 1,
            data_seed: 7,
            stem_width: 32,
            stage_widths: vec![32, 64, 128],
            blocks_per_stage: 2,
            depthwise: false,
            net_seed: 1,
            epochs: 30,
            batch_size: 32,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            warmup_epochs: 5,
            mixup_alpha: 1.0,
            train_seed: 0,
            criterion: "kl".into(),
            target: "macs_ratio 0.6".into(),
            retention_floor: 0.3,
            proxy_size: 256,
            prune_seed: 0,
            temperature1: 2.0,
            temperature2: 1.0,
            alpha: 0.7,
            eta: 1.0,
            step1_epochs: 25,
            step2_epochs: 2,
            step1_lr: 0.01,
            step2_lr: 1e-4,
            finetune_warmup: 5,
            expand: true,
            finetune_seed: 0,
            out_dir: String::new(),
            run_name: "run".into(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Internal(format!("config serialization: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }

    /// Validates every field, reporting all problems at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        match self.dataset.as_str() {
            "synthetic" => {
                if self.class_count < 2 {
                    problems.push(format!("class_count must be at least 2, got {}", self.class_count));
                }
                if self.per_class == 0 {
                    problems.push("per_class must be positive".into());
                }
                if self.image_side < 8 {
                    problems.push(format!("image_side must be at least 8, got {}", self.image_side));
                }
            }
            "idx" => {
                if self.idx_images.is_empty() {
                    problems.push("idx_images is required when dataset = \"idx\"".into());
                }
                if self.idx_labels.is_empty() {
                    problems.push("idx_labels is required when dataset = \"idx\"".into());
                }
            }
            other => problems.push(format!(
                "dataset must be \"synthetic\" or \"idx\", got \"{other}\""
            )),
        }
        if self.stage_widths.is_empty() {
            problems.push("stage_widths must name at least one stage".into());
        }
        for (i, &w) in self.stage_widths.iter().enumerate() {
            if w < 4 {
                problems.push(format!("stage_widths[{i}] must be at least 4, got {w}"));
            }
        }
        if self.stem_width == 0 {
            problems.push("stem_width must be positive".into());
        }
        if self.blocks_per_stage == 0 {
            problems.push("blocks_per_stage must be positive".into());
        }
        if self.epochs == 0 {
            problems.push("epochs must be positive".into());
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be positive".into());
        }
        for (name, lr) in [("lr", self.lr), ("step1_lr", self.step1_lr), ("step2_lr", self.step2_lr)]
        {
            if !(lr > 0.0 && lr.is_finite()) {
                problems.push(format!("{name} must be positive and finite, got {lr}"));
            }
        }
        if !(self.mixup_alpha > 0.0) {
            problems.push(format!("mixup_alpha must be positive, got {}", self.mixup_alpha));
        }
        if self.criterion.parse::<Criterion>().is_err() {
            problems.push(format!(
                "criterion must be one of random, weight_sum, delta_loss, kl; got \"{}\"",
                self.criterion
            ));
        }
        if let Err(e) = self.target.parse::<PruneTarget>() {
            problems.push(format!("target: {e}"));
        }
        if !(self.retention_floor > 0.0 && self.retention_floor <= 1.0) {
            problems.push(format!(
                "retention_floor must lie in (0, 1], got {}",
                self.retention_floor
            ));
        }
        if self.proxy_size == 0 {
            problems.push("proxy_size must be positive".into());
        }
        for (name, t) in [("temperature1", self.temperature1), ("temperature2", self.temperature2)]
        {
            if !(t > 0.0 && t.is_finite()) {
                problems.push(format!("{name} must be positive and finite, got {t}"));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            problems.push(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            problems.push(format!("eta must be finite and nonnegative, got {}", self.eta));
        }
        if self.step1_epochs + self.step2_epochs == 0 {
            problems.push("step1_epochs + step2_epochs must be positive".into());
        }
        if self.run_name.is_empty() || self.run_name.contains(['/', '\\']) {
            problems.push(format!(
                "run_name must be a plain directory name, got \"{}\"",
                self.run_name
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("\n")))
        }
    }

    /// The network architecture this config describes. Middle widths follow
    /// the bottleneck convention: a quarter of the stage width, at least 1.
    pub fn graph_spec(&self) -> GraphSpec {
        GraphSpec {
            in_channels: self.in_channels,
            input_side: self.image_side,
            class_count: self.class_count,
            depthwise: self.depthwise,
            stem_width: self.stem_width,
            stages: self
                .stage_widths
                .iter()
                .map(|&width| {
                    let mid = (width / 4).max(1);
                    StageSpec {
                        width,
                        blocks: vec![BlockSpec { mid_a: mid, mid_b: mid }; self.blocks_per_stage],
                    }
                })
                .collect(),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            warmup_epochs: self.warmup_epochs,
            mixup_alpha: Some(self.mixup_alpha),
            seed: self.train_seed,
        }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        FinetuneConfig {
            step1: DistillConfig { temperature: self.temperature1, alpha: self.alpha, ..DistillConfig::step1() },
            step2: DistillConfig { temperature: self.temperature2, alpha: self.alpha, ..DistillConfig::step2() },
            step1_epochs: self.step1_epochs,
            step2_epochs: self.step2_epochs,
            step1_lr: self.step1_lr,
            step2_lr: self.step2_lr,
            warmup_epochs: self.finetune_warmup,
            batch_size: self.batch_size,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            mixup_alpha: self.mixup_alpha,
            eta: self.eta,
            expand: self.expand,
            seed: self.finetune_seed,
        }
    }

    /// Builds the train/eval datasets: synthetic generation or IDX loading,
    /// a seeded shuffle split, and normalization statistics computed on the
    /// train split and shared with eval.
    pub fn build_datasets(&self) -> Result<(Dataset, Dataset)> {
        let full = match self.dataset.as_str() {
            "synthetic" => crate::data::make_synthetic(&SyntheticSpec {
                class_count: self.class_count,
                per_class: self.per_class + self.eval_per_class,
                side: self.image_side,
                seed: self.data_seed,
            })?,
            "idx" => load_idx(Path::new(&self.idx_images), Path::new(&self.idx_labels))?,
            other => {
                return Err(Error::Config(format!(
                    "dataset must be \"synthetic\" or \"idx\", got \"{other}\""
                )))
            }
        };
        let eval_count = match self.dataset.as_str() {
            "synthetic" => self.eval_per_class * self.class_count,
            _ => full.len() / 5,
        };
        let (mut train, mut eval) = full.split(eval_count, self.data_seed)?;
        train.compute_stats();
        let (mean, std) = train.stats();
        let (mean, std) = (mean.to_vec(), std.to_vec());
        eval.set_stats(&mean, &std)?;
        Ok((train, eval))
    }

    /// Output root: explicit key, else the environment variable, else
    /// `./runs`.
    pub fn out_root(&self) -> PathBuf {
        if !self.out_dir.is_empty() {
            return PathBuf::from(&self.out_dir);
        }
        if let Ok(v) = std::env::var(OUT_ENV) {
            if !v.is_empty() {
                return PathBuf::from(v);
            }
        }
        PathBuf::from("runs")
    }

    /// This run's directory (created on demand by the subcommands).
    pub fn run_dir(&self) -> PathBuf {
        self.out_root().join(&self.run_name)
    }
}
