//! Two-step limited-data fine-tuning: distillation with mixup on the
//! original dataset, then distillation on the expanded dataset where the
//! teacher's stored logits are themselves refined by gradient descent.

use std::io::Read;
use std::path::Path;

use crate::augment;
use crate::data::{one_hot, Dataset};
use crate::error::{Error, Result};
use crate::nn::NetworkGraph;
use crate::prune::param_digest;
use crate::seeds;
use crate::tensor::{no_grad, sgd_step, Dtype, Scalar, Tensor};
use crate::train::{
    epoch_batches, epoch_rng, evaluate, training_batch, MetricsLog, MetricsRecord, WarmupCosine,
};

const SALT_STEP1: u64 = 0xA0;
const SALT_STEP2: u64 = 0xA1;
const SALT_EXPAND: u64 = 0xA2;

const LOGIT_MAGIC: &[u8; 8] = b"RSPNLOGS";
const LOGIT_VERSION: u16 = 1;

/// Seed the step-2 expansion derives from the fine-tuning seed. Exposed so
/// a standalone expansion pass writes exactly the records [`finetune`]
/// regenerates.
pub fn expansion_seed(finetune_seed: u64) -> u64 {
    seeds::derive(finetune_seed, SALT_EXPAND)
}

// ---------------------------------------------------------------------------
// Configuration

/// Which fine-tuning step a loss belongs to; the two steps disagree about
/// the KL direction and where gradients flow.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistillStep {
    Step1,
    Step2,
}

/// Temperature and loss balance for one distillation step.
#[derive(Clone, Copy, Debug)]
pub struct DistillConfig {
    pub temperature: f64,
    pub alpha: f64,
    pub step: DistillStep,
}

impl DistillConfig {
    /// Step-1 settings: soften both models at T=2, weight KL at 0.7.
    pub fn step1() -> Self {
        DistillConfig { temperature: 2.0, alpha: 0.7, step: DistillStep::Step1 }
    }

    /// Step-2 settings: refinement makes the loss insensitive to the
    /// temperature, so T drops to 1; the balance stays at 0.7.
    pub fn step2() -> Self {
        DistillConfig { temperature: 1.0, alpha: 0.7, step: DistillStep::Step2 }
    }

    fn validate(&self, expected: DistillStep) -> Result<()> {
        if self.step != expected {
            return Err(Error::InvalidArgument(format!(
                "loss for {:?} called with a {:?} config",
                expected, self.step
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive and finite, got {}",
                self.temperature
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidArgument(format!(
                "loss balance must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Losses

/// A distillation loss with its two terms broken out for the metrics log.
pub struct DistillLoss<T: Scalar> {
    /// Scalar loss tensor; backward flows per the step's contract.
    pub total: Tensor<T>,
    pub kl: f64,
    pub ce: f64,
}

fn check_logit_shapes<T: Scalar>(
    v: &Tensor<T>,
    u: &Tensor<T>,
    targets: &Tensor<T>,
) -> Result<()> {
    if v.rank() != 2 || v.shape() != u.shape() || v.shape() != targets.shape() {
        return Err(Error::InvalidArgument(format!(
            "distillation loss needs matching [batch, classes] shapes, got student {:?}, \
             teacher {:?}, targets {:?}",
            v.shape(),
            u.shape(),
            targets.shape()
        )));
    }
    Ok(())
}

/// Mean over batch rows of Σ a·(log a − log b); `a` and `b` are softmax
/// outputs. Gradients flow into whatever built `a` and `b`.
fn kl_rows_mean<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let batch = a.shape()[0] as f64;
    Ok(a.mul(&a.log().sub(&b.log())?)?.sum_all().scale(1.0 / batch))
}

/// Mean cross-entropy of temperature-1 student probabilities against target
/// rows.
fn ce_term<T: Scalar>(v: &Tensor<T>, targets: &Tensor<T>) -> Result<Tensor<T>> {
    let batch = v.shape()[0] as f64;
    Ok(v.softmax()?.log().mul(targets)?.sum_all().scale(-1.0 / batch))
}

/// Step-1 loss: α·T²·KL(p‖q) + (1−α)·CE(q₁, ỹ) with p = softmax(u/T) and
/// q = softmax(v/T). The teacher side is detached — gradients reach `v`
/// only. `mixed_targets` are the mixup soft labels.
pub fn step1_loss<T: Scalar>(
    student_logits: &Tensor<T>,
    teacher_logits: &Tensor<T>,
    mixed_targets: &Tensor<T>,
    cfg: &DistillConfig,
) -> Result<DistillLoss<T>> {
    cfg.validate(DistillStep::Step1)?;
    check_logit_shapes(student_logits, teacher_logits, mixed_targets)?;
    let t = cfg.temperature;
    let p = teacher_logits.detach().scale(1.0 / t).softmax()?;
    let q = student_logits.scale(1.0 / t).softmax()?;
    let kl = kl_rows_mean(&p, &q)?;
    let ce = ce_term(student_logits, mixed_targets)?;
    let total = kl.scale(cfg.alpha * t * t).add(&ce.scale(1.0 - cfg.alpha))?;
    Ok(DistillLoss { total, kl: kl.data()[0].to_f64(), ce: ce.data()[0].to_f64() })
}

/// Step-2 loss: α·T²·KL(q‖p) + (1−α)·CE(q₁, y) — the KL direction reverses
/// and the stored logits `u` stay live, so backward yields ∇u alongside the
/// student gradients.
pub fn step2_loss<T: Scalar>(
    student_logits: &Tensor<T>,
    stored_logits: &Tensor<T>,
    targets: &Tensor<T>,
    cfg: &DistillConfig,
) -> Result<DistillLoss<T>> {
    cfg.validate(DistillStep::Step2)?;
    check_logit_shapes(student_logits, stored_logits, targets)?;
    let t = cfg.temperature;
    let p = stored_logits.scale(1.0 / t).softmax()?;
    let q = student_logits.scale(1.0 / t).softmax()?;
    let kl = kl_rows_mean(&q, &p)?;
    let ce = ce_term(student_logits, targets)?;
    let total = kl.scale(cfg.alpha * t * t).add(&ce.scale(1.0 - cfg.alpha))?;
    Ok(DistillLoss { total, kl: kl.data()[0].to_f64(), ce: ce.data()[0].to_f64() })
}

// ---------------------------------------------------------------------------
// Stored logits

/// Per-record teacher logits for the expanded dataset, updated in place
/// during step 2 and persistable between epochs.
#[derive(Debug)]
pub struct LogitStore<T: Scalar> {
    logits: Vec<T>,
    class_count: usize,
    eta: f64,
    epoch: u32,
}

impl<T: Scalar> LogitStore<T> {
    /// One offline eval-mode pass of the teacher over every record.
    pub fn seed_from_teacher(
        teacher: &NetworkGraph<T>,
        data: &Dataset,
        batch_size: usize,
        eta: f64,
    ) -> Result<Self> {
        if !(eta >= 0.0 && eta.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "logit learning rate must be finite and nonnegative, got {eta}"
            )));
        }
        if data.class_count() != teacher.class_count() {
            return Err(Error::InvalidArgument(format!(
                "dataset has {} classes but the teacher emits {}",
                data.class_count(),
                teacher.class_count()
            )));
        }
        let mut logits = Vec::with_capacity(data.len() * data.class_count());
        let indices: Vec<usize> = (0..data.len()).collect();
        for chunk in indices.chunks(batch_size.max(1)) {
            let (images, _) = data.batch::<T>(chunk)?;
            let out = no_grad(|| teacher.forward_eval(&images))?;
            logits.extend_from_slice(out.data());
        }
        Ok(LogitStore { logits, class_count: data.class_count(), eta, epoch: 0 })
    }

    pub fn len(&self) -> usize {
        self.logits.len() / self.class_count
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// Epochs of refinement applied so far.
    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    pub fn set_epoch(&mut self, epoch: u32) {
        self.epoch = epoch;
    }

    pub fn row(&self, id: usize) -> Result<&[T]> {
        if id >= self.len() {
            return Err(Error::InvalidArgument(format!(
                "record {id} is not in the logit store ({} records)",
                self.len()
            )));
        }
        Ok(&self.logits[id * self.class_count..(id + 1) * self.class_count])
    }

    /// Gathers a batch of stored rows as a gradient-enabled leaf, ready for
    /// `step2_loss`.
    pub fn batch_var(&self, ids: &[usize]) -> Result<Tensor<T>> {
        let mut data = Vec::with_capacity(ids.len() * self.class_count);
        for &id in ids {
            data.extend_from_slice(self.row(id)?);
        }
        Tensor::var(data, &[ids.len(), self.class_count])
    }

    /// Writes header + row payload; byte layout is fixed by the format
    /// version, so a round-trip is bitwise.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(27 + self.logits.len() * T::DTYPE.size());
        out.extend_from_slice(LOGIT_MAGIC);
        out.extend_from_slice(&LOGIT_VERSION.to_le_bytes());
        out.push(T::DTYPE.tag());
        out.extend_from_slice(&(self.class_count as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.eta.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        for &v in &self.logits {
            v.write_le(&mut out);
        }
        std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let name = path.display().to_string();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(name.clone(), e))?;
        let corrupt = |offset: u64, detail: String| Error::Corrupt {
            path: name.clone(),
            offset,
            detail,
        };
        if bytes.len() < 35 {
            return Err(corrupt(bytes.len() as u64, "truncated logit store header".into()));
        }
        if &bytes[..8] != LOGIT_MAGIC {
            return Err(corrupt(0, "not a logit store (bad magic)".into()));
        }
        let version = u16::from_le_bytes(bytes[8..10].try_into().unwrap());
        if version != LOGIT_VERSION {
            return Err(corrupt(8, format!("unsupported logit store version {version}")));
        }
        let dtype = Dtype::from_tag(bytes[10])
            .ok_or_else(|| corrupt(10, format!("unknown dtype tag {}", bytes[10])))?;
        if dtype != T::DTYPE {
            return Err(Error::InvalidArgument(format!(
                "logit store {name} holds {dtype} but {} was requested",
                T::DTYPE
            )));
        }
        let class_count = u32::from_le_bytes(bytes[11..15].try_into().unwrap()) as usize;
        let records = u64::from_le_bytes(bytes[15..23].try_into().unwrap()) as usize;
        let eta = f64::from_le_bytes(bytes[23..31].try_into().unwrap());
        let epoch = u32::from_le_bytes(bytes[31..35].try_into().unwrap());
        if class_count == 0 {
            return Err(corrupt(11, "class count is zero".into()));
        }
        let expect = 35 + records * class_count * T::DTYPE.size();
        if bytes.len() != expect {
            return Err(corrupt(
                bytes.len().min(expect) as u64,
                format!("payload is {} bytes, header promises {}", bytes.len() - 35, expect - 35),
            ));
        }
        let width = T::DTYPE.size();
        let logits = bytes[35..]
            .chunks_exact(width)
            .map(T::from_le)
            .collect();
        Ok(LogitStore { logits, class_count, eta, epoch })
    }
}

/// Applies u ← u − η·∇u per record. `grad_rows` is the backward output for
/// the batch tensor, row-aligned with `ids`. Records whose gradient row is
/// not finite are skipped with a diagnostic; returns how many were skipped.
pub fn refine_logits<T: Scalar>(
    store: &mut LogitStore<T>,
    ids: &[usize],
    grad_rows: &[T],
) -> Result<usize> {
    let c = store.class_count;
    if grad_rows.len() != ids.len() * c {
        return Err(Error::InvalidArgument(format!(
            "gradient payload has {} values for {} records of {} classes",
            grad_rows.len(),
            ids.len(),
            c
        )));
    }
    let eta = T::from_f64(store.eta);
    let mut skipped = 0usize;
    for (k, &id) in ids.iter().enumerate() {
        store.row(id)?;
        let g = &grad_rows[k * c..(k + 1) * c];
        if g.iter().any(|v| !v.is_finite()) {
            log::warn!("skipping logit update for record {id}: non-finite gradient");
            skipped += 1;
            continue;
        }
        for (u, &gv) in store.logits[id * c..(id + 1) * c].iter_mut().zip(g) {
            *u = *u - eta * gv;
        }
    }
    Ok(skipped)
}

// ---------------------------------------------------------------------------
// The two-step fine-tuning loop

/// Settings for `finetune`. Defaults follow the reference recipe: 25 epochs
/// of step 1 at lr 0.01 (5 warmup) and 2 epochs of step 2 at lr 1e-4 — the
/// same 12.5:1 split as the full-scale 200/16 — batch 32, η = 1, with the
/// dataset expanded six-fold for step 2.
#[derive(Clone, Debug)]
pub struct FinetuneConfig {
    pub step1: DistillConfig,
    pub step2: DistillConfig,
    pub step1_epochs: usize,
    pub step2_epochs: usize,
    pub step1_lr: f64,
    pub step2_lr: f64,
    /// Warmup applies to step 1 only.
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub mixup_alpha: f64,
    /// Learning rate for the stored logits; 0 disables refinement.
    pub eta: f64,
    /// When false, step 2 trains on the original records (ablation).
    pub expand: bool,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            step1: DistillConfig::step1(),
            step2: DistillConfig::step2(),
            step1_epochs: 25,
            step2_epochs: 2,
            step1_lr: 0.01,
            step2_lr: 1e-4,
            warmup_epochs: 5,
            batch_size: 32,
            momentum: 0.9,
            weight_decay: 0.0,
            mixup_alpha: 1.0,
            eta: 1.0,
            expand: true,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        self.step1.validate(DistillStep::Step1)?;
        self.step2.validate(DistillStep::Step2)?;
        if self.step1_epochs + self.step2_epochs == 0 {
            return Err(Error::InvalidArgument("fine-tuning needs at least one epoch".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        for (name, lr) in [("step-1", self.step1_lr), ("step-2", self.step2_lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "{name} learning rate must be positive, got {lr}"
                )));
            }
        }
        if !(self.mixup_alpha > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "mixup concentration must be positive, got {}",
                self.mixup_alpha
            )));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "logit learning rate must be finite and nonnegative, got {}",
                self.eta
            )));
        }
        Ok(())
    }
}

/// Runs both fine-tuning steps on the student. The teacher only ever runs
/// eval-mode forwards — its weights are bitwise untouched; only its stored
/// logits move. Per-epoch metrics land in the log (phases "step1"/"step2");
/// when `store_path` is set the logit store is persisted at each step-2
/// epoch end. Returns the final logit store.
pub fn finetune<T: Scalar>(
    student: &mut NetworkGraph<T>,
    teacher: &NetworkGraph<T>,
    data: &Dataset,
    eval: Option<&Dataset>,
    cfg: &FinetuneConfig,
    log: &mut MetricsLog,
    store_path: Option<&Path>,
) -> Result<LogitStore<T>> {
    cfg.validate()?;
    if teacher.class_count() != student.class_count() {
        return Err(Error::InvalidArgument(format!(
            "teacher emits {} classes but the student emits {}",
            teacher.class_count(),
            student.class_count()
        )));
    }
    if data.class_count() != student.class_count() {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} classes but the student emits {}",
            data.class_count(),
            student.class_count()
        )));
    }
    if data.is_empty() {
        return Err(Error::InvalidArgument("cannot fine-tune on an empty dataset".into()));
    }
    let teacher_before = param_digest(teacher);

    // Step 1: distillation with mixup on the original records.
    if cfg.step1_epochs > 0 {
        let seed1 = seeds::derive(cfg.seed, SALT_STEP1);
        let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
        let schedule = WarmupCosine::per_epoch(
            cfg.step1_lr,
            cfg.warmup_epochs.min(cfg.step1_epochs),
            cfg.step1_epochs,
            steps_per_epoch,
        )?;
        let mut step = 0usize;
        for epoch in 0..cfg.step1_epochs {
            let mut rng = epoch_rng(seed1, epoch);
            let (mut loss_sum, mut kl_sum, mut ce_sum) = (0.0f64, 0.0f64, 0.0f64);
            let mut batches = 0usize;
            let mut last_lr = 0.0;
            for ids in epoch_batches(data.len(), cfg.batch_size, seed1, epoch) {
                let (images, targets) =
                    training_batch::<T, _>(data, &ids, Some(cfg.mixup_alpha), &mut rng)?;
                let u = no_grad(|| teacher.forward_eval(&images))?;
                let v = student.forward_train(&images)?;
                let loss = step1_loss(&v, &u, &targets, &cfg.step1)?;
                let grads = loss.total.backward()?;
                let mut params: Vec<_> =
                    student.params_mut().into_iter().map(|(_, p)| p).collect();
                for p in params.iter_mut() {
                    p.accumulate(&grads);
                }
                last_lr = schedule.lr(step);
                sgd_step(&mut params, last_lr, cfg.momentum, cfg.weight_decay)?;
                loss_sum += loss.total.data()[0].to_f64();
                kl_sum += loss.kl;
                ce_sum += loss.ce;
                batches += 1;
                step += 1;
            }
            let mut record = MetricsRecord::train("step1", epoch);
            record.loss = Some(loss_sum / batches as f64);
            record.kl = Some(kl_sum / batches as f64);
            record.ce = Some(ce_sum / batches as f64);
            record.lr = Some(last_lr);
            log.push(record)?;
            if let Some(eval_data) = eval {
                let acc = evaluate(student, eval_data, cfg.batch_size)?;
                log.push(MetricsRecord::eval("step1", epoch, acc))?;
            }
        }
    }

    // Step 2: expanded records, stored logits, refinement.
    let expanded;
    let step2_data: &Dataset = if cfg.expand {
        expanded = augment::expand_dataset(data, expansion_seed(cfg.seed))?;
        &expanded.data
    } else {
        data
    };
    let mut store = LogitStore::seed_from_teacher(teacher, step2_data, cfg.batch_size, cfg.eta)?;
    if cfg.step2_epochs > 0 {
        let seed2 = seeds::derive(cfg.seed, SALT_STEP2);
        let steps_per_epoch = step2_data.len().div_ceil(cfg.batch_size);
        let schedule =
            WarmupCosine::per_epoch(cfg.step2_lr, 0, cfg.step2_epochs, steps_per_epoch)?;
        let mut step = 0usize;
        for epoch in 0..cfg.step2_epochs {
            let (mut loss_sum, mut kl_sum, mut ce_sum) = (0.0f64, 0.0f64, 0.0f64);
            let mut batches = 0usize;
            let mut last_lr = 0.0;
            let mut skipped = 0usize;
            for ids in epoch_batches(step2_data.len(), cfg.batch_size, seed2, epoch) {
                let (images, labels) = step2_data.batch::<T>(&ids)?;
                let targets = one_hot::<T>(&labels, step2_data.class_count())?;
                let u = store.batch_var(&ids)?;
                let v = student.forward_train(&images)?;
                let loss = step2_loss(&v, &u, &targets, &cfg.step2)?;
                let grads = loss.total.backward()?;
                let mut params: Vec<_> =
                    student.params_mut().into_iter().map(|(_, p)| p).collect();
                for p in params.iter_mut() {
                    p.accumulate(&grads);
                }
                last_lr = schedule.lr(step);
                sgd_step(&mut params, last_lr, cfg.momentum, cfg.weight_decay)?;
                if cfg.eta > 0.0 {
                    let g = grads.get(&u).ok_or_else(|| {
                        Error::Internal("backward returned no gradient for stored logits".into())
                    })?;
                    skipped += refine_logits(&mut store, &ids, g)?;
                }
                loss_sum += loss.total.data()[0].to_f64();
                kl_sum += loss.kl;
                ce_sum += loss.ce;
                batches += 1;
                step += 1;
            }
            if skipped > 0 {
                log::warn!("epoch {epoch}: skipped {skipped} non-finite logit updates");
            }
            store.set_epoch(epoch as u32 + 1);
            if let Some(path) = store_path {
                store.save(path)?;
            }
            let mut record = MetricsRecord::train("step2", epoch);
            record.loss = Some(loss_sum / batches as f64);
            record.kl = Some(kl_sum / batches as f64);
            record.ce = Some(ce_sum / batches as f64);
            record.lr = Some(last_lr);
            log.push(record)?;
            if let Some(eval_data) = eval {
                let acc = evaluate(student, eval_data, cfg.batch_size)?;
                log.push(MetricsRecord::eval("step2", epoch, acc))?;
            }
        }
    }

    if param_digest(teacher) != teacher_before {
        return Err(Error::Internal("teacher parameters changed during fine-tuning".into()));
    }
    Ok(store)
}
