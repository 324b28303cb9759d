//! Accuracy, the mutual information gap, and the run summary.

use std::fmt;

use rayon::prelude::*;

use crate::data::{Dataset, Sample};
use crate::eks::TaskMask;
use crate::error::{EksError, Result};
use crate::losses::argmax;
use crate::model::{CostReport, DecompModel, PlainNet};
use crate::tensor::Tensor;

/// Quantile bins per feature dimension.
pub const MIG_BINS: usize = 20;
pub const MIG_MIN_SAMPLES: usize = 100;

/// Worker count for evaluation: `EKS_THREADS` if set and positive, otherwise rayon's default.
pub fn eval_threads() -> usize {
    std::env::var("EKS_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(rayon::current_num_threads)
}

fn run_chunks<T, F>(samples: &[Sample], chunk: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&[Sample]) -> Result<T> + Sync,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(eval_threads())
        .build()
        .map_err(|e| EksError::InvalidArgument(e.to_string()))?;
    // Chunks are collected in order, so results do not depend on scheduling.
    pool.install(|| samples.par_chunks(chunk.max(1)).map(&f).collect())
}

/// Student outputs over a sample set, each sample routed to its own task.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentEval {
    /// `[N, d]` pooled features.
    pub features: Tensor,
    pub tasks: Vec<usize>,
    pub per_task_accuracy: Vec<f64>,
}

impl StudentEval {
    pub fn average_accuracy(&self) -> f64 {
        task_average(&self.per_task_accuracy)
    }
}

/// Unweighted mean over tasks.
pub fn task_average(per_task: &[f64]) -> f64 {
    per_task.iter().sum::<f64>() / per_task.len() as f64
}

pub fn evaluate_student(
    model: &DecompModel,
    samples: &[Sample],
    batch: usize,
) -> Result<StudentEval> {
    if samples.is_empty() {
        return Err(EksError::InvalidArgument("nothing to evaluate".into()));
    }
    let t = model.num_tasks();
    let parts = run_chunks(samples, batch, |chunk| {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (x, tasks, labels) = Dataset::batch(&refs)?;
        let (features, logits) = model.forward_value(&x, &TaskMask::from_tasks(&tasks, t)?)?;
        let hits: Vec<bool> = logits
            .iter()
            .zip(&labels)
            .map(|(z, &y)| argmax(z) == y)
            .collect();
        Ok((features, hits))
    })?;
    let d = model.arch.feature_dim();
    let mut data = Vec::with_capacity(samples.len() * d);
    let mut correct = vec![0usize; t];
    let mut count = vec![0usize; t];
    for ((f, hits), chunk) in parts.iter().zip(samples.chunks(batch.max(1))) {
        data.extend_from_slice(f.data());
        for (s, &hit) in chunk.iter().zip(hits) {
            count[s.task] += 1;
            correct[s.task] += usize::from(hit);
        }
    }
    let per_task_accuracy = correct
        .iter()
        .zip(&count)
        .enumerate()
        .map(|(task, (&c, &n))| {
            if n == 0 {
                Err(EksError::InvalidArgument(format!(
                    "no samples for task {task}"
                )))
            } else {
                Ok(c as f64 / n as f64)
            }
        })
        .collect::<Result<_>>()?;
    Ok(StudentEval {
        features: Tensor::new(vec![samples.len(), d], data)?,
        tasks: samples.iter().map(|s| s.task).collect(),
        per_task_accuracy,
    })
}

/// Teacher accuracy on global labels, plus its `[N, d_teacher]` features.
pub fn evaluate_teacher(
    teacher: &PlainNet,
    samples: &[Sample],
    batch: usize,
) -> Result<(f64, Tensor)> {
    let parts = run_chunks(samples, batch, |chunk| {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (x, _, _) = Dataset::batch(&refs)?;
        teacher.forward_value(&x)
    })?;
    let y = teacher.head.classes();
    let mut correct = 0;
    let mut data = Vec::new();
    for ((f, z), chunk) in parts.iter().zip(samples.chunks(batch.max(1))) {
        data.extend_from_slice(f.data());
        for (row, s) in z.data().chunks_exact(y).zip(chunk) {
            correct += usize::from(argmax(row) == s.global_label);
        }
    }
    let d = teacher.head.dim();
    Ok((
        correct as f64 / samples.len() as f64,
        Tensor::new(vec![samples.len(), d], data)?,
    ))
}

/// Bin index of every value under `bins` quantile bins. Tied values always
/// share a bin.
fn quantile_bins(values: &[f64], bins: usize) -> Vec<usize> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let edges: Vec<f64> = (1..bins).map(|k| sorted[k * n / bins]).collect();
    values
        .iter()
        .map(|&v| edges.partition_point(|&e| e <= v))
        .collect()
}

fn entropy(counts: &[usize], n: usize) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n as f64;
            -p * p.ln()
        })
        .sum()
}

/// Plug-in mutual information (nats) between two discrete label vectors.
pub fn mutual_information(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len();
    let na = a.iter().max().map_or(0, |m| m + 1);
    let nb = b.iter().max().map_or(0, |m| m + 1);
    let mut joint = vec![0usize; na * nb];
    let mut ca = vec![0usize; na];
    let mut cb = vec![0usize; nb];
    for (&x, &y) in a.iter().zip(b) {
        joint[x * nb + y] += 1;
        ca[x] += 1;
        cb[y] += 1;
    }
    let nf = n as f64;
    let mut mi = 0.0;
    for x in 0..na {
        for y in 0..nb {
            let c = joint[x * nb + y];
            if c > 0 {
                mi += c as f64 / nf * (c as f64 * nf / (ca[x] as f64 * cb[y] as f64)).ln();
            }
        }
    }
    mi.max(0.0)
}

/// Mutual information gap of `features` (`[N, d]`) with respect to the task factor.
///
/// Each dimension is discretised into [`MIG_BINS`] quantile bins; the score is
/// the difference between the two largest per-dimension MIs over `H(task)`,
/// clamped to `[0, 1]`.
pub fn mig_score(features: &Tensor, tasks: &[usize]) -> Result<f64> {
    let [n, d] = features.shape() else {
        return Err(EksError::InvalidShape {
            op: "mig_score",
            msg: format!("expected [N, d], got {:?}", features.shape()),
        });
    };
    let (n, d) = (*n, *d);
    if n != tasks.len() {
        return Err(EksError::ShapeMismatch {
            op: "mig_score",
            left: features.shape().to_vec(),
            right: vec![tasks.len()],
        });
    }
    if n < MIG_MIN_SAMPLES || d < 2 {
        return Err(EksError::InvalidArgument(format!(
            "mig needs at least {MIG_MIN_SAMPLES} samples and two dimensions, got {n}×{d}"
        )));
    }
    let n_tasks = tasks.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; n_tasks];
    for &t in tasks {
        counts[t] += 1;
    }
    let h = entropy(&counts, n);
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(EksError::InvalidArgument(
            "mig is undefined for a single task".into(),
        ));
    }
    let mut column = vec![0.0; n];
    let mut mis: Vec<f64> = (0..d)
        .map(|j| {
            for (i, c) in column.iter_mut().enumerate() {
                *c = features.data()[i * d + j];
            }
            mutual_information(&quantile_bins(&column, MIG_BINS), tasks)
        })
        .collect();
    mis.sort_by(|a, b| b.total_cmp(a));
    Ok(((mis[0] - mis[1]) / h).clamp(0.0, 1.0))
}

/// Summary of one decomposition run.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub per_task_accuracy: Vec<f64>,
    /// Task-level mean of `per_task_accuracy`.
    pub average_accuracy: f64,
    /// `None` when the evaluation set is too small for the estimator.
    pub mig: Option<f64>,
    pub costs: CostReport,
}

impl MetricsReport {
    pub fn from_eval(eval: &StudentEval, costs: CostReport) -> Result<Self> {
        Ok(Self {
            per_task_accuracy: eval.per_task_accuracy.clone(),
            average_accuracy: eval.average_accuracy(),
            mig: if eval.tasks.len() >= MIG_MIN_SAMPLES && eval.per_task_accuracy.len() > 1 {
                Some(mig_score(&eval.features, &eval.tasks)?)
            } else {
                None
            },
            costs,
        })
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let acc: Vec<String> = self
            .per_task_accuracy
            .iter()
            .map(|a| format!("{a:.6}"))
            .collect();
        let c = &self.costs;
        writeln!(f, "per_task_accuracy={}", acc.join(","))?;
        writeln!(f, "average_accuracy={:.6}", self.average_accuracy)?;
        match self.mig {
            Some(m) => writeln!(f, "mig={m:.6}")?,
            None => writeln!(f, "mig=n/a")?,
        }
        writeln!(f, "params_shared={}", c.shared_params)?;
        writeln!(f, "params_experts={}", c.expert_params)?;
        writeln!(f, "params_heads={}", c.head_params)?;
        writeln!(f, "params_projection={}", c.projection_params)?;
        writeln!(f, "params_train={}", c.train_params)?;
        writeln!(f, "params_deploy={}", c.deploy_params)?;
        writeln!(f, "flops_train_per_sample={}", c.train_flops_per_sample)?;
        writeln!(f, "flops_deploy_per_sample={}", c.deploy_flops_per_sample)?;
        writeln!(
            f,
            "flops_baseline_per_sample={}",
            c.baseline_flops_per_sample
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn features(
        n: usize,
        d: usize,
        tasks: &[usize],
        rng: &mut ChaCha8Rng,
        copies: &[usize],
    ) -> Tensor {
        Tensor::from_fn(&[n, d], |idx| {
            let (i, j) = (idx / d, idx % d);
            if copies.contains(&j) {
                tasks[i] as f64
            } else {
                rng.random::<f64>()
            }
        })
    }

    fn tasks(n: usize, t: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        (0..n).map(|_| rng.random_range(0..t)).collect()
    }

    #[test]
    fn mig_of_task_copy_is_near_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = tasks(2000, 4, &mut rng);
        let f = features(2000, 8, &t, &mut rng, &[0]);
        let m = mig_score(&f, &t).unwrap();
        assert!(m > 0.9, "{m}");
    }

    #[test]
    fn mig_of_noise_is_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = tasks(10_000, 4, &mut rng);
        let f = features(10_000, 8, &t, &mut rng, &[]);
        let m = mig_score(&f, &t).unwrap();
        assert!(m < 0.1, "{m}");
    }

    #[test]
    fn mig_gap_vanishes_with_two_copies() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = tasks(2000, 3, &mut rng);
        let f = features(2000, 6, &t, &mut rng, &[1, 4]);
        let m = mig_score(&f, &t).unwrap();
        assert!(m < 0.01, "{m}");
    }

    #[test]
    fn mig_rejects_bad_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let single = vec![0; 200];
        let f = features(200, 4, &single, &mut rng, &[]);
        assert!(mig_score(&f, &single).is_err());
        let t = tasks(50, 2, &mut rng);
        assert!(mig_score(&features(50, 4, &t, &mut rng, &[]), &t).is_err());
        let t = tasks(200, 2, &mut rng);
        assert!(mig_score(&features(200, 1, &t, &mut rng, &[]), &t).is_err());
    }

    #[test]
    fn mutual_information_matches_hand_count() {
        // Joint counts [[2, 1], [0, 1]] over n = 4.
        let a = [0, 0, 0, 1];
        let b = [0, 0, 1, 1];
        let want = 0.5 * (0.5f64 / (0.75 * 0.5)).ln()
            + 0.25 * (0.25f64 / (0.75 * 0.5)).ln()
            + 0.25 * (0.25f64 / (0.25 * 0.5)).ln();
        assert!((mutual_information(&a, &b) - want).abs() < 1e-15);
    }

    #[test]
    fn quantile_bins_keep_ties_together() {
        let v: Vec<f64> = (0..100).map(|i| (i % 4) as f64).collect();
        let bins = quantile_bins(&v, 20);
        for (x, b) in v.iter().zip(&bins) {
            for (y, c) in v.iter().zip(&bins) {
                assert_eq!(x == y, b == c);
            }
        }
        let u: Vec<f64> = (0..1000).map(f64::from).collect();
        let bins = quantile_bins(&u, 20);
        for k in 0..20 {
            assert_eq!(bins.iter().filter(|&&b| b == k).count(), 50);
        }
    }

    #[test]
    fn average_is_task_level() {
        assert_eq!(task_average(&[1.0, 0.5, 0.0]), 0.5);
    }
}
