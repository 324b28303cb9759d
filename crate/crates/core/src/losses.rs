//! Temperature softmax, per-task heads, feature distillation and the
//! combined decomposition loss
//!
//! `L = (1/B) Σ_i [ CE(y_i^t, softmax(h_t(f_i^d)/α)) + β·α²·KL(softmax(f_i^b/α) ‖ softmax(f_i^d/α)) ]`

use rand::Rng;

use crate::autodiff::{check_temperature, log_softmax_into, softmax_into, Tape, Var};
use crate::error::{EksError, Result};
use crate::tensor::Tensor;

/// `softmax(logits / alpha)` with max subtraction.
pub fn temp_softmax(logits: &[f64], alpha: f64) -> Result<Vec<f64>> {
    check_temperature(alpha)?;
    if logits.is_empty() {
        return Err(EksError::InvalidArgument(
            "softmax of an empty vector".into(),
        ));
    }
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, alpha, &mut out);
    Ok(out)
}

/// `KL(softmax(teacher/α) ‖ softmax(student/α))`.
pub fn transfer_kl(teacher: &[f64], student: &[f64], alpha: f64) -> Result<f64> {
    check_temperature(alpha)?;
    if teacher.len() != student.len() || teacher.is_empty() {
        return Err(EksError::ShapeMismatch {
            op: "transfer_kl",
            left: vec![teacher.len()],
            right: vec![student.len()],
        });
    }
    let n = teacher.len();
    let (mut lp, mut lq) = (vec![0.0; n], vec![0.0; n]);
    log_softmax_into(teacher, alpha, &mut lp);
    log_softmax_into(student, alpha, &mut lq);
    let kl: f64 = lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum();
    Ok(kl.max(0.0))
}

/// Row-wise transfer KL on a tape: `[n, d] × [n, d] -> [n]`.
pub fn transfer_kl_rows(tape: &mut Tape, teacher: Var, student: Var, alpha: f64) -> Result<Var> {
    if tape.shape(teacher) != tape.shape(student) {
        return Err(EksError::ShapeMismatch {
            op: "transfer_kl",
            left: tape.shape(teacher).to_vec(),
            right: tape.shape(student).to_vec(),
        });
    }
    let p = tape.softmax_rows(teacher, alpha)?;
    let lp = tape.log_softmax_rows(teacher, alpha)?;
    let lq = tape.log_softmax_rows(student, alpha)?;
    let diff = tape.sub(lp, lq)?;
    let weighted = tape.mul(p, diff)?;
    tape.sum_rows(weighted)
}

/// Linear classifier for one task: `logits = f · Wᵀ + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskHead {
    pub weight: Tensor,
    pub bias: Tensor,
    pub task: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub weight: Var,
    pub bias: Var,
}

impl TaskHead {
    pub fn init(task: usize, classes: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        Self {
            weight: Tensor::uniform(&[classes, dim], -bound, bound, rng),
            bias: Tensor::zeros(&[classes]),
            task,
        }
    }

    pub fn classes(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }

    pub fn bind(&self, tape: &mut Tape) -> HeadVars {
        HeadVars {
            weight: tape.param(self.weight.clone()),
            bias: tape.param(self.bias.clone()),
        }
    }

    pub fn logits(&self, tape: &mut Tape, vars: HeadVars, features: Var) -> Result<Var> {
        let wt = tape.transpose(vars.weight)?;
        let z = tape.matmul(features, wt)?;
        tape.add_row_bias(z, vars.bias)
    }

    /// Off-tape logits for an `[n, d]` feature matrix.
    pub fn logits_value(&self, features: &Tensor) -> Result<Tensor> {
        let (n, d) = (features.shape()[0], self.dim());
        if features.shape() != [n, d] {
            return Err(EksError::ShapeMismatch {
                op: "head",
                left: features.shape().to_vec(),
                right: self.weight.shape().to_vec(),
            });
        }
        let y = self.classes();
        let mut out = vec![0.0; n * y];
        crate::tensor::gemm(
            n,
            d,
            y,
            features.data(),
            false,
            self.weight.data(),
            true,
            &mut out,
            false,
        );
        for row in out.chunks_exact_mut(y) {
            for (v, b) in row.iter_mut().zip(self.bias.data()) {
                *v += b;
            }
        }
        Tensor::new(vec![n, y], out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    /// Batch-mean cross-entropy.
    pub ce: f64,
    /// Batch-mean transfer KL, before the `β·α²` factor.
    pub kl: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
}

/// One mixed-task batch as seen by the loss.
pub struct LossBatch<'a> {
    /// Student backbone features `[B, d]`, fed to the task heads.
    pub features: Var,
    /// Student features in teacher space `[B, d_teacher]`, fed to the KL term.
    pub distill_features: Var,
    pub teacher_features: &'a Tensor,
    pub tasks: &'a [usize],
    pub labels: &'a [usize],
}

/// Builds the combined loss on `tape`. Each sample's cross-entropy only
/// touches its own task's head.
pub fn total_loss(
    tape: &mut Tape,
    batch: &LossBatch<'_>,
    heads: &[TaskHead],
    head_vars: &[HeadVars],
    alpha: f64,
    beta: f64,
) -> Result<(Var, LossTerms)> {
    check_temperature(alpha)?;
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(EksError::InvalidArgument(format!(
            "beta must be ≥ 0, got {beta}"
        )));
    }
    let b = batch.tasks.len();
    if b == 0 || batch.labels.len() != b || tape.shape(batch.features)[0] != b {
        return Err(EksError::InvalidArgument(
            "tasks, labels and features disagree on batch size".into(),
        ));
    }
    for (&t, &y) in batch.tasks.iter().zip(batch.labels) {
        let head = heads.get(t).ok_or(EksError::TaskOutOfRange {
            task: t,
            count: heads.len(),
        })?;
        if y >= head.classes() {
            return Err(EksError::LabelOutOfRange {
                task: t,
                label: y,
                classes: head.classes(),
            });
        }
    }

    let mut ce_parts = Vec::new();
    for (t, (head, &vars)) in heads.iter().zip(head_vars).enumerate() {
        let members: Vec<usize> = (0..b).filter(|&i| batch.tasks[i] == t).collect();
        if members.is_empty() {
            continue;
        }
        let labels: Vec<usize> = members.iter().map(|&i| batch.labels[i]).collect();
        let f = tape.gather_rows(batch.features, &members)?;
        let z = head.logits(tape, vars, f)?;
        let lp = tape.log_softmax_rows(z, alpha)?;
        let picked = tape.pick(lp, &labels)?;
        ce_parts.push(tape.sum(picked)?);
    }
    let mut ce_sum = ce_parts[0];
    for &p in &ce_parts[1..] {
        ce_sum = tape.add(ce_sum, p)?;
    }
    let ce_sum = tape.scale(ce_sum, -1.0)?;

    let teacher = tape.constant(batch.teacher_features.clone());
    let kl_rows = transfer_kl_rows(tape, teacher, batch.distill_features, alpha)?;
    let kl_sum = tape.sum(kl_rows)?;
    let weighted_kl = tape.scale(kl_sum, beta * alpha * alpha)?;
    let summed = tape.add(ce_sum, weighted_kl)?;
    let total = tape.scale(summed, 1.0 / b as f64)?;

    let ce = tape.value(ce_sum).item() / b as f64;
    let kl = tape.value(kl_sum).item() / b as f64;
    let terms = LossTerms {
        ce,
        kl,
        total: tape.value(total).item(),
        alpha,
        beta,
    };
    Ok((total, terms))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheck};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn direct_softmax(x: &[f64], alpha: f64) -> Vec<f64> {
        let e: Vec<f64> = x.iter().map(|v| (v / alpha).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| v / s).collect()
    }

    #[test]
    fn uniform_logits_uniform_probs() {
        for alpha in [0.5, 1.0, 10.0] {
            let p = temp_softmax(&[3.0; 4], alpha).unwrap();
            assert!(p.iter().all(|v| (v - 0.25).abs() < 1e-15));
        }
    }

    #[test]
    fn high_temperature_flattens() {
        let p = temp_softmax(&[1.0, 2.0, 3.0], 1e6).unwrap();
        assert!(p.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-5));
    }

    #[test]
    fn softmax_matches_formula_at_default_temperature() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..7).map(|_| rng.random_range(-5.0..5.0)).collect();
        let got = temp_softmax(&x, 10.0).unwrap();
        let want = direct_softmax(&x, 10.0);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((got.iter().sum::<f64>() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn rejects_non_positive_temperature() {
        assert!(temp_softmax(&[1.0], 0.0).is_err());
        assert!(temp_softmax(&[1.0], -1.0).is_err());
        assert!(transfer_kl(&[1.0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn kl_of_identical_features_is_zero() {
        assert_eq!(
            transfer_kl(&[0.3, -1.0, 2.0], &[0.3, -1.0, 2.0], 10.0).unwrap(),
            0.0
        );
    }

    #[test]
    fn kl_is_non_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let a: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
            let b: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
            assert!(transfer_kl(&a, &b, rng.random_range(0.5..10.0)).unwrap() >= 0.0);
        }
    }

    #[test]
    fn kl_three_dim_by_hand() {
        let (t, s, alpha) = ([1.0, 0.0, -1.0], [0.5, 0.5, 0.0], 2.0);
        let p = direct_softmax(&t, alpha);
        let q = direct_softmax(&s, alpha);
        let want: f64 = (0..3).map(|j| p[j] * (p[j] / q[j]).ln()).sum();
        let got = transfer_kl(&t, &s, alpha).unwrap();
        assert!(((got - want) / want).abs() < 1e-10);
    }

    #[test]
    fn kl_dimension_mismatch() {
        assert!(transfer_kl(&[1.0, 2.0], &[1.0], 1.0).is_err());
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
    }

    struct Fixture {
        features: Tensor,
        distill: Tensor,
        teacher: Tensor,
        heads: Vec<TaskHead>,
        tasks: Vec<usize>,
        labels: Vec<usize>,
    }

    fn fixture(seed: u64) -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let heads = vec![
            TaskHead::init(0, 3, 4, &mut rng),
            TaskHead::init(1, 2, 4, &mut rng),
            TaskHead::init(2, 4, 4, &mut rng),
        ];
        let mut heads = heads;
        for h in &mut heads {
            h.bias = Tensor::uniform(h.bias.shape(), -0.5, 0.5, &mut rng);
        }
        Fixture {
            features: Tensor::uniform(&[5, 4], -1.0, 1.0, &mut rng),
            distill: Tensor::uniform(&[5, 6], -1.0, 1.0, &mut rng),
            teacher: Tensor::uniform(&[5, 6], -1.0, 1.0, &mut rng),
            heads,
            tasks: vec![0, 1, 0, 2, 1],
            labels: vec![2, 1, 0, 3, 0],
        }
    }

    fn run(fx: &Fixture, alpha: f64, beta: f64) -> LossTerms {
        let mut tape = Tape::new();
        let f = tape.param(fx.features.clone());
        let d = tape.param(fx.distill.clone());
        let hv: Vec<HeadVars> = fx.heads.iter().map(|h| h.bind(&mut tape)).collect();
        let batch = LossBatch {
            features: f,
            distill_features: d,
            teacher_features: &fx.teacher,
            tasks: &fx.tasks,
            labels: &fx.labels,
        };
        total_loss(&mut tape, &batch, &fx.heads, &hv, alpha, beta)
            .unwrap()
            .1
    }

    fn manual(fx: &Fixture, alpha: f64, beta: f64) -> (f64, f64, f64) {
        let (mut ce, mut kl) = (0.0, 0.0);
        for i in 0..fx.tasks.len() {
            let h = &fx.heads[fx.tasks[i]];
            let f = &fx.features.data()[i * 4..(i + 1) * 4];
            let logits: Vec<f64> = (0..h.classes())
                .map(|c| {
                    (0..4).map(|j| f[j] * h.weight.at(&[c, j])).sum::<f64>() + h.bias.data()[c]
                })
                .collect();
            ce += -direct_softmax(&logits, alpha)[fx.labels[i]].ln();
            let p = direct_softmax(&fx.teacher.data()[i * 6..(i + 1) * 6], alpha);
            let q = direct_softmax(&fx.distill.data()[i * 6..(i + 1) * 6], alpha);
            kl += (0..6).map(|j| p[j] * (p[j] / q[j]).ln()).sum::<f64>();
        }
        let b = fx.tasks.len() as f64;
        (ce / b, kl / b, (ce + beta * alpha * alpha * kl) / b)
    }

    #[test]
    fn total_matches_manual_accumulation() {
        let fx = fixture(3);
        let terms = run(&fx, 10.0, 1.0);
        let (ce, kl, total) = manual(&fx, 10.0, 1.0);
        assert!((terms.ce - ce).abs() < 1e-12);
        assert!((terms.kl - kl).abs() < 1e-12);
        assert!((terms.total - total).abs() < 1e-12 * total.abs().max(1.0));
    }

    #[test]
    fn beta_zero_is_plain_cross_entropy() {
        let fx = fixture(4);
        let terms = run(&fx, 10.0, 0.0);
        assert_eq!(terms.total, terms.ce);
    }

    #[test]
    fn kl_contribution_scales_with_alpha_squared() {
        // Same temperature-softened distributions at both α: scale the raw
        // features with α so softmax(f/α) is unchanged.
        let fx = fixture(5);
        let at = |alpha: f64| {
            let mut f = fixture(5);
            f.teacher = Tensor::from_fn(fx.teacher.shape(), |i| fx.teacher.data()[i] * alpha);
            f.distill = Tensor::from_fn(fx.distill.shape(), |i| fx.distill.data()[i] * alpha);
            let t = run(&f, alpha, 1.0);
            (t.total - t.ce, t.kl)
        };
        let (c2, kl2) = at(2.0);
        let (c7, kl7) = at(7.0);
        assert!((kl2 - kl7).abs() < 1e-12);
        assert!((c7 / c2 - 49.0 / 4.0).abs() < 1e-9);
    }

    #[test]
    fn perfect_student_has_near_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let teacher = Tensor::uniform(&[2, 3], -1.0, 1.0, &mut rng);
        let head = TaskHead {
            weight: Tensor::new(vec![2, 2], vec![1e4, 0.0, 0.0, 1e4]).unwrap(),
            bias: Tensor::zeros(&[2]),
            task: 0,
        };
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let d = tape.constant(teacher.clone());
        let hv = vec![head.bind(&mut tape)];
        let batch = LossBatch {
            features: f,
            distill_features: d,
            teacher_features: &teacher,
            tasks: &[0, 0],
            labels: &[0, 1],
        };
        let terms = total_loss(&mut tape, &batch, &[head], &hv, 10.0, 1.0)
            .unwrap()
            .1;
        assert!(terms.total.abs() < 1e-12 && terms.ce >= 0.0 && terms.kl >= 0.0);
    }

    #[test]
    fn label_out_of_range_rejected() {
        let mut fx = fixture(7);
        fx.labels[1] = 2;
        let mut tape = Tape::new();
        let f = tape.param(fx.features.clone());
        let d = tape.param(fx.distill.clone());
        let hv: Vec<HeadVars> = fx.heads.iter().map(|h| h.bind(&mut tape)).collect();
        let batch = LossBatch {
            features: f,
            distill_features: d,
            teacher_features: &fx.teacher,
            tasks: &fx.tasks,
            labels: &fx.labels,
        };
        let err = total_loss(&mut tape, &batch, &fx.heads, &hv, 10.0, 1.0).unwrap_err();
        assert!(matches!(
            err,
            EksError::LabelOutOfRange {
                task: 1,
                label: 2,
                classes: 2
            }
        ));
    }

    #[test]
    fn heads_only_receive_their_own_samples() {
        let fx = fixture(8);
        let mut tape = Tape::new();
        let f = tape.param(fx.features.clone());
        let d = tape.param(fx.distill.clone());
        let hv: Vec<HeadVars> = fx.heads.iter().map(|h| h.bind(&mut tape)).collect();
        // Only task-1 samples.
        let idx = [1usize, 4];
        let f1 = tape.gather_rows(f, &idx).unwrap();
        let d1 = tape.gather_rows(d, &idx).unwrap();
        let teacher = Tensor::new(
            vec![2, 6],
            [&fx.teacher.data()[6..12], &fx.teacher.data()[24..30]].concat(),
        )
        .unwrap();
        let batch = LossBatch {
            features: f1,
            distill_features: d1,
            teacher_features: &teacher,
            tasks: &[1, 1],
            labels: &[1, 0],
        };
        let (loss, _) = total_loss(&mut tape, &batch, &fx.heads, &hv, 10.0, 1.0).unwrap();
        tape.backward(loss).unwrap();
        for t in [0, 2] {
            assert!(tape.grad(hv[t].weight).is_none() && tape.grad(hv[t].bias).is_none());
        }
        assert!(tape.grad(hv[1].weight).unwrap().max_abs() > 0.0);
    }

    #[test]
    fn total_loss_gradients_match_finite_differences() {
        let fx = fixture(9);
        let mut inputs = vec![fx.features.clone(), fx.distill.clone()];
        for h in &fx.heads {
            inputs.push(h.weight.clone());
            inputs.push(h.bias.clone());
        }
        let report = check_gradients(&inputs, GradCheck::default(), |tape, v| {
            let hv: Vec<HeadVars> = (0..3)
                .map(|t| HeadVars {
                    weight: v[2 + 2 * t],
                    bias: v[3 + 2 * t],
                })
                .collect();
            let batch = LossBatch {
                features: v[0],
                distill_features: v[1],
                teacher_features: &fx.teacher,
                tasks: &fx.tasks,
                labels: &fx.labels,
            };
            Ok(total_loss(tape, &batch, &fx.heads, &hv, 2.0, 1.0)?.0)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn kl_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let inputs = vec![
            Tensor::uniform(&[3, 5], -1.0, 1.0, &mut rng),
            Tensor::uniform(&[3, 5], -1.0, 1.0, &mut rng),
        ];
        let report = check_gradients(&inputs, GradCheck::default(), |tape, v| {
            let kl = transfer_kl_rows(tape, v[0], v[1], 1.5)?;
            tape.sum(kl)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }
}
