//! Teacher training: warmup/cosine schedule, cross-entropy on soft labels,
//! top-1 evaluation, and the mixup SGD loop. Fine-tuning baselines reuse the
//! same loop with mixup switched off.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment;
use crate::data::{one_hot, shuffle_indices, Dataset};
use crate::error::{Error, Result};
use crate::nn::NetworkGraph;
use crate::seeds;
use crate::tensor::{no_grad, sgd_step, Scalar, Tensor};

const SALT_EPOCH_SHUFFLE: u64 = 0x90;
const SALT_EPOCH_BATCH: u64 = 0x91;

// ---------------------------------------------------------------------------
// Learning-rate schedule

/// Per-step learning rate: linear warmup from zero to `lr_max`, then cosine
/// decay that lands exactly on zero at the last step.
#[derive(Clone, Debug)]
pub struct WarmupCosine {
    lr_max: f64,
    warmup_steps: usize,
    total_steps: usize,
}

impl WarmupCosine {
    pub fn new(lr_max: f64, warmup_steps: usize, total_steps: usize) -> Result<Self> {
        if !(lr_max > 0.0 && lr_max.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "peak learning rate must be positive and finite, got {lr_max}"
            )));
        }
        if total_steps == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        if warmup_steps > total_steps {
            return Err(Error::InvalidArgument(format!(
                "warmup ({warmup_steps} steps) exceeds the schedule ({total_steps} steps)"
            )));
        }
        Ok(WarmupCosine { lr_max, warmup_steps, total_steps })
    }

    /// Builds from epoch counts and the number of optimizer steps per epoch.
    pub fn per_epoch(
        lr_max: f64,
        warmup_epochs: usize,
        total_epochs: usize,
        steps_per_epoch: usize,
    ) -> Result<Self> {
        Self::new(lr_max, warmup_epochs * steps_per_epoch, total_epochs * steps_per_epoch)
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    /// Learning rate for optimizer step `step` (0-based). Steps past the end
    /// stay at zero.
    pub fn lr(&self, step: usize) -> f64 {
        if step >= self.total_steps {
            return 0.0;
        }
        if step < self.warmup_steps {
            return self.lr_max * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = (self.total_steps - self.warmup_steps).saturating_sub(1).max(1);
        let progress = (step - self.warmup_steps) as f64 / span as f64;
        self.lr_max * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

// ---------------------------------------------------------------------------
// Loss and evaluation

/// Mean cross-entropy between softmax(logits) and soft target rows.
/// `targets` rows are distributions (one-hot for hard labels).
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, targets: &Tensor<T>) -> Result<Tensor<T>> {
    if logits.shape() != targets.shape() || logits.rank() != 2 {
        return Err(Error::InvalidArgument(format!(
            "cross-entropy needs matching [batch, classes] shapes, got {:?} and {:?}",
            logits.shape(),
            targets.shape()
        )));
    }
    let batch = logits.shape()[0] as f64;
    Ok(logits
        .softmax()?
        .log()
        .mul(targets)?
        .sum_all()
        .scale(-1.0 / batch))
}

/// Top-1 accuracy of the eval-mode network over a dataset, as a fraction.
pub fn evaluate<T: Scalar>(
    net: &NetworkGraph<T>,
    data: &Dataset,
    batch_size: usize,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty dataset".into()));
    }
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut hits = 0usize;
    for chunk in indices.chunks(batch_size.max(1)) {
        let (images, labels) = data.batch::<T>(chunk)?;
        let logits = no_grad(|| net.forward_eval(&images))?;
        let classes = logits.shape()[1];
        for (row, &label) in logits.data().chunks(classes).zip(&labels) {
            let best = row
                .iter()
                .enumerate()
                .max_by(|a, b| (*a.1).to_f64().total_cmp(&(*b.1).to_f64()))
                .map(|(i, _)| i)
                .unwrap_or(0);
            if best == label as usize {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

// ---------------------------------------------------------------------------
// Metrics log

/// One line of the metrics log. Optional fields are omitted from the
/// serialized line when absent.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Pipeline phase: "teacher", "step1", "step2".
    pub phase: String,
    pub epoch: usize,
    /// "train" or "eval".
    pub split: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kl: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ce: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
}

impl MetricsRecord {
    pub fn train(phase: &str, epoch: usize) -> Self {
        MetricsRecord {
            phase: phase.into(),
            epoch,
            split: "train".into(),
            loss: None,
            kl: None,
            ce: None,
            accuracy: None,
            lr: None,
        }
    }

    pub fn eval(phase: &str, epoch: usize, accuracy: f64) -> Self {
        MetricsRecord { split: "eval".into(), accuracy: Some(accuracy), ..Self::train(phase, epoch) }
    }
}

/// Append-only JSON-lines metrics log, optionally mirrored to a file.
pub struct MetricsLog {
    path: Option<PathBuf>,
    records: Vec<MetricsRecord>,
}

impl MetricsLog {
    pub fn in_memory() -> Self {
        MetricsLog { path: None, records: Vec::new() }
    }

    /// Mirrors every record to `path` as it arrives (file is truncated).
    pub fn to_file(path: &Path) -> Result<Self> {
        std::fs::write(path, "").map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(MetricsLog { path: Some(path.to_path_buf()), records: Vec::new() })
    }

    pub fn push(&mut self, record: MetricsRecord) -> Result<()> {
        if let Some(path) = &self.path {
            let line = serde_json::to_string(&record)
                .map_err(|e| Error::Internal(format!("metrics serialization: {e}")))?;
            let mut f = std::fs::OpenOptions::new()
                .append(true)
                .open(path)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            writeln!(f, "{line}").map_err(|e| Error::io(path.display().to_string(), e))?;
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[MetricsRecord] {
        &self.records
    }

    /// Last recorded eval accuracy, if any.
    pub fn final_accuracy(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.accuracy)
    }
}

/// Reads a JSON-lines metrics file back into records.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| {
            Error::Corrupt {
                path: path.display().to_string(),
                offset: i as u64,
                detail: format!("metrics line {}: {e}", i + 1),
            }
        })?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Teacher training loop

/// Supervised training settings. The defaults train the reference teacher:
/// mini-batches of 32, SGD with momentum 0.9, peak lr 0.01, 5 warmup epochs
/// into cosine decay, mixup at concentration 1.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    /// Mixup concentration; `None` trains on hard labels.
    pub mixup_alpha: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            warmup_epochs: 5,
            mixup_alpha: Some(1.0),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("training needs at least one epoch".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if let Some(a) = self.mixup_alpha {
            if !(a > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "mixup concentration must be positive, got {a}"
                )));
            }
        }
        Ok(())
    }
}

/// One shuffled epoch's batches: index slices of the dataset.
pub(crate) fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let order = shuffle_indices(n, seeds::derive2(seed, SALT_EPOCH_SHUFFLE, epoch as u64));
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// RNG for in-epoch draws (mixup pairing and λ).
pub(crate) fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seeds::derive2(seed, SALT_EPOCH_BATCH, epoch as u64))
}

/// Builds the mixed training batch for one step: the batch blended with a
/// permutation of itself when mixup is on, plain one-hot labels otherwise.
pub(crate) fn training_batch<T: Scalar, R: Rng>(
    data: &Dataset,
    ids: &[usize],
    mixup_alpha: Option<f64>,
    rng: &mut R,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (images, labels) = data.batch::<T>(ids)?;
    let targets = one_hot::<T>(&labels, data.class_count())?;
    match mixup_alpha {
        None => Ok((images, targets)),
        Some(alpha) => {
            let mut partner: Vec<usize> = ids.to_vec();
            for k in (1..partner.len()).rev() {
                partner.swap(k, rng.gen_range(0..=k));
            }
            let (images_b, labels_b) = data.batch::<T>(&partner)?;
            let targets_b = one_hot::<T>(&labels_b, data.class_count())?;
            let mixed = augment::mixup(&images, &targets, &images_b, &targets_b, alpha, rng)?;
            Ok((mixed.images, mixed.labels))
        }
    }
}

/// Trains the network in place. Per-epoch train loss and (when an eval split
/// is given) top-1 accuracy land in the metrics log. Two runs from the same
/// seed produce identical metrics.
pub fn train_teacher<T: Scalar>(
    net: &mut NetworkGraph<T>,
    data: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
    log: &mut MetricsLog,
) -> Result<()> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("cannot train on an empty dataset".into()));
    }
    if data.class_count() != net.class_count() {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} classes but the network emits {}",
            data.class_count(),
            net.class_count()
        )));
    }
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let schedule =
        WarmupCosine::per_epoch(cfg.lr, cfg.warmup_epochs.min(cfg.epochs), cfg.epochs, steps_per_epoch)?;
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        let mut last_lr = 0.0;
        for ids in epoch_batches(data.len(), cfg.batch_size, cfg.seed, epoch) {
            let (images, targets) = training_batch(data, &ids, cfg.mixup_alpha, &mut rng)?;
            let logits = net.forward_train(&images)?;
            let loss = cross_entropy(&logits, &targets)?;
            let grads = loss.backward()?;
            let mut params: Vec<_> = net.params_mut().into_iter().map(|(_, p)| p).collect();
            for p in params.iter_mut() {
                p.accumulate(&grads);
            }
            last_lr = schedule.lr(step);
            sgd_step(&mut params, last_lr, cfg.momentum, cfg.weight_decay)?;
            loss_sum += loss.data()[0].to_f64();
            batches += 1;
            step += 1;
        }
        let mut record = MetricsRecord::train("teacher", epoch);
        record.loss = Some(loss_sum / batches as f64);
        record.lr = Some(last_lr);
        log.push(record)?;
        if let Some(eval_data) = eval {
            let acc = evaluate(net, eval_data, cfg.batch_size)?;
            log.push(MetricsRecord::eval("teacher", epoch, acc))?;
        }
    }
    Ok(())
}
