//! SGD with cosine annealing for the teacher and the decomposition student.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::data::{Dataset, Sample};
use crate::eks::TaskMask;
use crate::error::{EksError, Result};
use crate::losses::{total_loss, LossBatch, LossTerms};
use crate::metrics::{evaluate_student, evaluate_teacher, MetricsReport};
use crate::model::{BindMode, DecompModel, PlainNet};
use crate::tensor::Tensor;

pub const DEFAULT_LR: f64 = 0.05;
pub const DEFAULT_ALPHA: f64 = 10.0;
pub const DEFAULT_BETA: f64 = 1.0;
pub const DEFAULT_RANK: usize = 8;

const EVAL_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Distillation temperature.
    pub alpha: f64,
    /// Weight of the transfer term.
    pub beta: f64,
    pub rank: usize,
    pub seed: u64,
    /// Batches drawn from one task at a time instead of mixed batches.
    pub per_task_batches: bool,
    /// Keep every expert delta at zero: trains the shared backbone alone.
    pub shared_only: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: DEFAULT_LR,
            epochs: 10,
            batch_size: 32,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            rank: DEFAULT_RANK,
            seed: 0,
            per_task_batches: false,
            shared_only: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(EksError::InvalidConfig(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be non-negative, got {}", self.beta));
        }
        if self.batch_size == 0 || self.rank == 0 {
            return bad("batch size and rank must be positive".into());
        }
        Ok(())
    }
}

/// `lr0 · (1 + cos(π · step / total)) / 2`.
pub fn cosine_lr(step: usize, total: usize, lr0: f64) -> Result<f64> {
    if step > total {
        return Err(EksError::InvalidArgument(format!(
            "step {step} beyond schedule length {total}"
        )));
    }
    if total == 0 {
        return Ok(lr0);
    }
    Ok(lr0 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos()) / 2.0)
}

/// `p ← p − lr · g` for each pair; a missing gradient leaves the parameter untouched.
pub fn sgd_step(params: &mut [&mut Tensor], grads: &[Option<&Tensor>], lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(EksError::InvalidArgument(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter_mut().zip(grads) {
        if let Some(g) = g {
            p.axpy(-lr, g)?;
        }
    }
    Ok(())
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate at the epoch's last step.
    pub lr: f64,
    pub ce: f64,
    pub kl: f64,
    pub total: f64,
    pub per_task_accuracy: Vec<f64>,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let acc: Vec<String> = self
            .per_task_accuracy
            .iter()
            .map(|a| format!("{a:.6}"))
            .collect();
        write!(
            f,
            "epoch={} lr={:.6} ce={:.6} kl={:.6} total={:.6} acc={}",
            self.epoch,
            self.lr,
            self.ce,
            self.kl,
            self.total,
            acc.join(",")
        )
    }
}

/// Index batches for one epoch.
fn epoch_batches(
    samples: &[Sample],
    cfg: &TrainConfig,
    num_tasks: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(rng);
    if !cfg.per_task_batches {
        return order
            .chunks(cfg.batch_size)
            .map(<[usize]>::to_vec)
            .collect();
    }
    let mut batches: Vec<Vec<usize>> = (0..num_tasks)
        .flat_map(|t| {
            let mine: Vec<usize> = order
                .iter()
                .copied()
                .filter(|&i| samples[i].task == t)
                .collect();
            mine.chunks(cfg.batch_size)
                .map(<[usize]>::to_vec)
                .collect::<Vec<_>>()
        })
        .collect();
    batches.shuffle(rng);
    batches
}

fn batches_per_epoch(samples: &[Sample], cfg: &TrainConfig, num_tasks: usize) -> usize {
    if cfg.per_task_batches {
        (0..num_tasks)
            .map(|t| {
                samples
                    .iter()
                    .filter(|s| s.task == t)
                    .count()
                    .div_ceil(cfg.batch_size)
            })
            .sum()
    } else {
        samples.len().div_ceil(cfg.batch_size)
    }
}

#[derive(Default)]
struct Running {
    ce: f64,
    kl: f64,
    total: f64,
    n: usize,
}

impl Running {
    fn add(&mut self, terms: &LossTerms, b: usize) {
        self.ce += terms.ce * b as f64;
        self.kl += terms.kl * b as f64;
        self.total += terms.total * b as f64;
        self.n += b;
    }

    fn mean(&self) -> (f64, f64, f64) {
        let n = self.n.max(1) as f64;
        (self.ce / n, self.kl / n, self.total / n)
    }
}

/// Trains the teacher's single head over all classes with plain cross-entropy.
pub fn train_teacher(
    teacher: &mut PlainNet,
    ds: &Dataset,
    cfg: &TrainConfig,
    mut log: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let total_steps = cfg.epochs * ds.train.len().div_ceil(cfg.batch_size);
    let mut step = 0;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut run = Running::default();
        let mut lr = cfg.lr;
        for (i, idx) in epoch_batches(
            &ds.train,
            &TrainConfig {
                per_task_batches: false,
                ..cfg.clone()
            },
            0,
            &mut rng,
        )
        .into_iter()
        .enumerate()
        {
            let refs: Vec<&Sample> = idx.iter().map(|&i| &ds.train[i]).collect();
            let (x, _, _) = Dataset::batch(&refs)?;
            let labels: Vec<usize> = refs.iter().map(|s| s.global_label).collect();
            let mut tape = Tape::new();
            let vars = teacher.bind(&mut tape, true);
            let xv = tape.constant(x);
            let z = teacher.logits(&mut tape, &vars, xv)?;
            let lp = tape.log_softmax_rows(z, 1.0)?;
            let picked = tape.pick(lp, &labels)?;
            let s = tape.sum(picked)?;
            let loss = tape.scale(s, -1.0 / labels.len() as f64)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(EksError::NanLoss { epoch, step: i });
            }
            tape.backward(loss).map_err(|e| nan_context(e, epoch, i))?;
            lr = cosine_lr(step, total_steps, cfg.lr)?;
            let grads: Vec<Option<&Tensor>> =
                vars.all().into_iter().map(|v| tape.grad(v)).collect();
            sgd_step(&mut teacher.params_mut(), &grads, lr)?;
            step += 1;
            run.add(
                &LossTerms {
                    ce: value,
                    kl: 0.0,
                    total: value,
                    alpha: 1.0,
                    beta: 0.0,
                },
                labels.len(),
            );
        }
        let (acc, _) = evaluate_teacher(teacher, &ds.val, EVAL_BATCH)?;
        let (ce, kl, total) = run.mean();
        let rec = EpochRecord {
            epoch,
            lr,
            ce,
            kl,
            total,
            per_task_accuracy: vec![acc],
        };
        log(&rec);
        history.push(rec);
    }
    Ok(history)
}

fn nan_context(e: EksError, epoch: usize, step: usize) -> EksError {
    match e {
        EksError::NonFinite { .. } => EksError::NanLoss { epoch, step },
        other => other,
    }
}

/// Result of [`train_decomposition`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Validation metrics before the first step.
    pub initial: MetricsReport,
    pub history: Vec<EpochRecord>,
    pub report: MetricsReport,
}

/// Teacher features for every training sample, computed once since the teacher is frozen.
pub fn teacher_features(teacher: &PlainNet, samples: &[Sample]) -> Result<Tensor> {
    Ok(evaluate_teacher(teacher, samples, EVAL_BATCH)?.1)
}

/// Distils `teacher` into `student` on the training split and reports on the validation split.
///
/// The teacher is only read. Each epoch logs mean loss terms and per-task
/// validation accuracy through `log`.
pub fn train_decomposition(
    teacher: &PlainNet,
    student: &mut DecompModel,
    ds: &Dataset,
    cfg: &TrainConfig,
    mut log: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if student.fused_task().is_some() {
        return Err(EksError::LayerFused(student.fused_task().unwrap()));
    }
    if student.arch.tasks != ds.class_counts() {
        return Err(EksError::InvalidConfig(format!(
            "student has class counts {:?}, dataset has {:?}",
            student.arch.tasks,
            ds.class_counts()
        )));
    }
    let costs = student.cost_report(cfg.batch_size)?;
    let initial =
        MetricsReport::from_eval(&evaluate_student(student, &ds.val, EVAL_BATCH)?, costs)?;

    let t = student.num_tasks();
    let f_teacher = teacher_features(teacher, &ds.train)?;
    let d_t = f_teacher.shape()[1];
    let mode = if cfg.shared_only {
        BindMode::FrozenExperts
    } else {
        BindMode::Train
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let total_steps = cfg.epochs * batches_per_epoch(&ds.train, cfg, t);
    let mut step = 0;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut run = Running::default();
        let mut lr = cfg.lr;
        for (i, idx) in epoch_batches(&ds.train, cfg, t, &mut rng)
            .into_iter()
            .enumerate()
        {
            let refs: Vec<&Sample> = idx.iter().map(|&i| &ds.train[i]).collect();
            let (x, tasks, labels) = Dataset::batch(&refs)?;
            let mut tf = Vec::with_capacity(idx.len() * d_t);
            for &j in &idx {
                tf.extend_from_slice(&f_teacher.data()[j * d_t..(j + 1) * d_t]);
            }
            let tf = Tensor::new(vec![idx.len(), d_t], tf)?;
            let mask = TaskMask::from_tasks(&tasks, t)?;

            let mut tape = Tape::new();
            let vars = student.bind(&mut tape, mode);
            let xv = tape.constant(x);
            let out = student
                .forward(&mut tape, &vars, xv, &mask)
                .map_err(|e| nan_context(e, epoch, i))?;
            let batch = LossBatch {
                features: out.features,
                distill_features: out.distill,
                teacher_features: &tf,
                tasks: &tasks,
                labels: &labels,
            };
            let (loss, terms) = total_loss(
                &mut tape,
                &batch,
                &student.heads,
                vars.heads(),
                cfg.alpha,
                cfg.beta,
            )
            .map_err(|e| nan_context(e, epoch, i))?;
            if !terms.total.is_finite() {
                return Err(EksError::NanLoss { epoch, step: i });
            }
            tape.backward(loss).map_err(|e| nan_context(e, epoch, i))?;
            lr = cosine_lr(step, total_steps, cfg.lr)?;
            let handles = vars.all();
            let grads: Vec<Option<&Tensor>> = handles.iter().map(|&v| tape.grad(v)).collect();
            sgd_step(&mut student.params_mut(), &grads, lr)?;
            step += 1;
            run.add(&terms, idx.len());
        }
        let eval = evaluate_student(student, &ds.val, EVAL_BATCH)?;
        let (ce, kl, total) = run.mean();
        let rec = EpochRecord {
            epoch,
            lr,
            ce,
            kl,
            total,
            per_task_accuracy: eval.per_task_accuracy,
        };
        log(&rec);
        history.push(rec);
    }
    let report = MetricsReport::from_eval(&evaluate_student(student, &ds.val, EVAL_BATCH)?, costs)?;
    Ok(TrainOutcome {
        initial,
        history,
        report,
    })
}

/// True when the trailing 5-epoch moving average of the total loss never increases.
pub fn loss_trend_ok(history: &[EpochRecord]) -> bool {
    let totals: Vec<f64> = history.iter().map(|r| r.total).collect();
    let avgs: Vec<f64> = totals
        .windows(5)
        .map(|w| w.iter().sum::<f64>() / 5.0)
        .collect();
    avgs.windows(2).all(|w| w[1] <= w[0] + 1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TaskSpec;
    use crate::model::{ArchConfig, StageConfig};

    fn tiny_arch(tasks: Vec<usize>) -> ArchConfig {
        ArchConfig {
            in_channels: 1,
            in_size: 8,
            stages: vec![
                StageConfig {
                    c_out: 4,
                    k: 3,
                    stride: 2,
                    eks: true,
                },
                StageConfig {
                    c_out: 8,
                    k: 3,
                    stride: 2,
                    eks: true,
                },
            ],
            tasks,
            rank: 2,
            teacher_width: 2,
            projection: true,
        }
    }

    fn tiny_data() -> Dataset {
        Dataset::generate(&TaskSpec::diverse(3, 3, 0.1, 20), 8, 11).unwrap()
    }

    fn models(ds: &Dataset) -> (PlainNet, DecompModel) {
        let arch = tiny_arch(ds.class_counts());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        (
            PlainNet::init_teacher(&arch, &mut rng).unwrap(),
            DecompModel::init(&arch, &mut rng).unwrap(),
        )
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 100, 0.05).unwrap(), 0.05);
        assert!(cosine_lr(100, 100, 0.05).unwrap().abs() < 1e-18);
        assert!((cosine_lr(50, 100, 0.05).unwrap() - 0.025).abs() < 1e-15);
        assert!(cosine_lr(101, 100, 0.05).is_err());
    }

    #[test]
    fn sgd_updates_and_checks_lengths() {
        let mut p = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let g = Tensor::new(vec![2], vec![0.5, -1.0]).unwrap();
        sgd_step(&mut [&mut p], &[Some(&g)], 0.1).unwrap();
        assert_eq!(p.data(), &[0.95, 2.1]);
        assert!(sgd_step(&mut [&mut p], &[], 0.1).is_err());
        let wrong = Tensor::zeros(&[3]);
        assert!(sgd_step(&mut [&mut p], &[Some(&wrong)], 0.1).is_err());
    }

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.lr, c.alpha, c.beta, c.rank), (0.05, 10.0, 1.0, 8));
        assert!(TrainConfig { lr: 0.0, ..c }.validate().is_err());
    }

    #[test]
    fn zero_epochs_leave_student_unchanged() {
        let ds = tiny_data();
        let (teacher, mut student) = models(&ds);
        let before = student.clone();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let out = train_decomposition(&teacher, &mut student, &ds, &cfg, |_| {}).unwrap();
        assert_eq!(student, before);
        assert!(out.history.is_empty());
        assert_eq!(out.initial, out.report);
    }

    #[test]
    fn training_is_deterministic_and_leaves_teacher_alone() {
        let ds = tiny_data();
        let run = || {
            let (teacher, mut student) = models(&ds);
            let before = teacher.clone();
            let cfg = TrainConfig {
                epochs: 2,
                batch_size: 16,
                ..TrainConfig::default()
            };
            let out = train_decomposition(&teacher, &mut student, &ds, &cfg, |_| {}).unwrap();
            assert_eq!(teacher, before);
            (student, out)
        };
        let (a, ra) = run();
        let (b, rb) = run();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        assert_eq!(ra.history.len(), 2);
    }

    #[test]
    fn shared_only_keeps_experts_at_zero() {
        let ds = tiny_data();
        let (teacher, mut student) = models(&ds);
        let cfg = TrainConfig {
            epochs: 1,
            shared_only: true,
            ..TrainConfig::default()
        };
        train_decomposition(&teacher, &mut student, &ds, &cfg, |_| {}).unwrap();
        for l in student.eks_layers() {
            for e in &l.experts {
                assert_eq!(e.b_factor.max_abs(), 0.0);
            }
        }
    }

    #[test]
    fn per_task_batches_are_pure() {
        let ds = tiny_data();
        let cfg = TrainConfig {
            per_task_batches: true,
            batch_size: 7,
            ..TrainConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batches = epoch_batches(&ds.train, &cfg, 3, &mut rng);
        assert_eq!(batches.len(), batches_per_epoch(&ds.train, &cfg, 3));
        let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..ds.train.len()).collect::<Vec<_>>());
        for b in &batches {
            assert!(b.iter().all(|&i| ds.train[i].task == ds.train[b[0]].task));
        }
        let out = {
            let (teacher, mut student) = models(&ds);
            train_decomposition(
                &teacher,
                &mut student,
                &ds,
                &TrainConfig { epochs: 1, ..cfg },
                |_| {},
            )
        };
        assert!(out.is_ok());
    }

    #[test]
    fn divergence_aborts_with_context() {
        let ds = tiny_data();
        let (teacher, mut student) = models(&ds);
        let cfg = TrainConfig {
            epochs: 3,
            lr: 1e12,
            ..TrainConfig::default()
        };
        let err = train_decomposition(&teacher, &mut student, &ds, &cfg, |_| {}).unwrap_err();
        assert!(matches!(err, EksError::NanLoss { epoch: 1, .. }), "{err}");
        assert!(err.to_string().contains("epoch 1, step"));
    }

    #[test]
    fn teacher_training_improves_accuracy() {
        let ds = tiny_data();
        let (mut teacher, _) = models(&ds);
        let (before, _) = evaluate_teacher(&teacher, &ds.val, 64).unwrap();
        let mut lines = Vec::new();
        let cfg = TrainConfig {
            epochs: 6,
            batch_size: 8,
            lr: 0.1,
            ..TrainConfig::default()
        };
        train_teacher(&mut teacher, &ds, &cfg, |r| lines.push(r.to_string())).unwrap();
        let (after, _) = evaluate_teacher(&teacher, &ds.val, 64).unwrap();
        assert!(after > before + 0.2, "{before} -> {after}");
        assert!(lines[0].starts_with("epoch=1 lr="));
    }

    #[test]
    fn moving_average_trend() {
        let rec = |total| EpochRecord {
            epoch: 0,
            lr: 0.0,
            ce: 0.0,
            kl: 0.0,
            total,
            per_task_accuracy: vec![],
        };
        let falling: Vec<_> = (0..10).map(|i| rec(10.0 - i as f64)).collect();
        assert!(loss_trend_ok(&falling));
        let rising: Vec<_> = (0..10).map(|i| rec(i as f64)).collect();
        assert!(!loss_trend_ok(&rising));
    }
}
