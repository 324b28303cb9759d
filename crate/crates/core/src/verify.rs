//! Self-check suite: every module's invariants run against independent
//! oracles, reported one line per check.
//!
//! The report contains no timings, so a fixed seed gives identical text.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::conv::{conv2d_value, conv_flops, ConvSpec};
use crate::data::{Dataset, TaskSpec};
use crate::eks::{eks_backward_check, eks_cost_model, eks_param_count, EksConvLayer, TaskMask};
use crate::error::Result;
use crate::gradcheck::{check_gradients, GradCheck};
use crate::instrument;
use crate::losses::{temp_softmax, total_loss, transfer_kl, LossBatch, TaskHead};
use crate::metrics::mig_score;
use crate::model::{ArchConfig, DecompModel, PlainNet, StageConfig, StudentLayer};
use crate::oracle::{
    conv2d_direct, count_low_rank_multiplies, eks_forward_naive, matmul_naive, max_rel_err,
};
use crate::tensor::Tensor;
use crate::train::cosine_lr;

/// Deliberate defects for checking that the suite notices them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// The fusion check fuses task `t + 1` where it should fuse `t`.
    FusionOffByOne,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct VerifyOptions {
    pub fault: Option<Fault>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    /// Worst error seen, or a mismatch count for exact checks.
    pub measured: f64,
    pub tolerance: f64,
    /// Set when the check could not run at all.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerificationReport {
    pub seed: u64,
    pub checks: Vec<CheckResult>,
}

impl VerificationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }

    pub fn get(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl fmt::Display for VerificationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# name status measured tolerance")?;
        for c in &self.checks {
            let status = if c.passed { "pass" } else { "fail" };
            write!(
                f,
                "{} {} {:.3e} {:.1e}",
                c.name, status, c.measured, c.tolerance
            )?;
            if let Some(e) = &c.error {
                write!(f, " error={}", e.replace(char::is_whitespace, "_"))?;
            }
            writeln!(f)?;
        }
        let failed = self.failures().len();
        writeln!(
            f,
            "# seed={} checks={} failed={}",
            self.seed,
            self.checks.len(),
            failed
        )
    }
}

/// Outcome of one check body.
enum Measured {
    /// Error must be strictly below the tolerance.
    Below(f64, f64),
    /// A count of violations that must be zero.
    Exact(f64),
}

type CheckFn = fn(&mut ChaCha8Rng, &VerifyOptions) -> Result<Measured>;

const CHECKS: &[(&str, CheckFn)] = &[
    ("tensor.matmul_oracle", matmul_oracle),
    ("autodiff.mlp_gradcheck", mlp_gradcheck),
    ("conv.direct_oracle", conv_oracle),
    ("conv.grouped_equivalence", grouped_equivalence),
    ("conv.gradcheck", conv_gradcheck),
    ("conv.flop_counter", flop_counter),
    ("eks.forward_oracle", eks_forward_oracle),
    ("eks.gradient_separation", gradient_separation),
    ("eks.gradcheck", eks_gradcheck),
    ("eks.single_pass", single_pass),
    ("eks.fusion_roundtrip", fusion_roundtrip),
    ("eks.fusion_forward", fusion_forward),
    ("eks.param_count", param_count),
    ("eks.cost_model", cost_model),
    ("losses.softmax_oracle", softmax_oracle),
    ("losses.kl_oracle", kl_oracle),
    ("losses.total_loss_gradcheck", total_loss_gradcheck),
    ("losses.head_isolation", head_isolation),
    ("model.export_equality", export_equality),
    ("model.deploy_cost", deploy_cost),
    ("data.determinism", data_determinism),
    ("metrics.mig_synthetic", mig_synthetic),
    ("train.cosine_schedule", cosine_schedule),
];

pub fn verify_all(seed: u64) -> VerificationReport {
    verify_with(seed, &VerifyOptions::default())
}

pub fn verify_with(seed: u64, opts: &VerifyOptions) -> VerificationReport {
    let checks = CHECKS
        .iter()
        .enumerate()
        .map(|(i, &(name, body))| {
            // Each check gets its own stream so adding one leaves the rest unchanged.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            match body(&mut rng, opts) {
                Ok(Measured::Below(err, tol)) => CheckResult {
                    name,
                    passed: err < tol,
                    measured: err,
                    tolerance: tol,
                    error: None,
                },
                Ok(Measured::Exact(count)) => CheckResult {
                    name,
                    passed: count == 0.0,
                    measured: count,
                    tolerance: 0.0,
                    error: None,
                },
                Err(e) => CheckResult {
                    name,
                    passed: false,
                    measured: f64::NAN,
                    tolerance: 0.0,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    VerificationReport { seed, checks }
}

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Layer with non-zero random factors, so every expert actually matters.
fn random_layer(
    spec: ConvSpec,
    tasks: usize,
    rank: usize,
    rng: &mut ChaCha8Rng,
) -> Result<EksConvLayer> {
    let mut layer = EksConvLayer::init(spec, tasks, rank, rng)?;
    for e in &mut layer.experts {
        e.b_factor = rand_t(e.b_factor.shape(), rng);
    }
    Ok(layer)
}

fn naive_factors(layer: &EksConvLayer) -> Vec<(Tensor, Tensor)> {
    layer
        .experts
        .iter()
        .map(|e| (e.b_factor.clone(), e.a_factor.clone()))
        .collect()
}

fn eks_value(layer: &EksConvLayer, h: &Tensor, mask: &TaskMask) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = layer.bind(&mut tape);
    let x = tape.constant(h.clone());
    let y = layer.forward(&mut tape, &vars, x, mask)?;
    Ok(tape.value(y).clone())
}

fn random_tasks(b: usize, t: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..b).map(|_| rng.random_range(0..t)).collect()
}

fn matmul_oracle(rng: &mut ChaCha8Rng, _: &VerifyOptions) -> Result<Measured> {
    let mut worst: f64 = 0.0;
    for &(m, k, n) in &[(5, 7, 3), (1, 9, 1), (16, 4, 12)] {
        let a = rand_t(&[m, k], rng);
        let b = rand_t(&[k, n], rng);
        worst = worst.max(max_rel_err(&a.matmul(&b)?, &matmul_naive(&a, &b)));
    }
    Ok(Measured::Below(worst, 1e-12))
}

fn mlp_gradcheck(rng: &mut ChaCha8Rng, _: &VerifyOptions) -> Result<Measured> {
    let inputs = [
        rand_t(&[4, 3], rng),
        rand_t(&[3, 5], rng),
        rand_t(&[5, 2], rng),
    ];
    let report = check_gradients(&inputs, GradCheck::default(), |tape, v| {
        let h = tape.matmul(v[0], v[1])?;
        let sq = tape.mul(h, h)?;
        let out = tape.matmul(sq, v[2])?;
        tape.sum(out)
    })?;
    Ok(Measured::Below(report.max_rel_err, 1e-6))
}

fn conv_oracle(rng: &mut ChaCha8Rng, _: &VerifyOptions) -> Result<Measured> {
    let mut worst: f64 = 0.0;
    for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (3, 1, 0)] {
        let spec = ConvSpec::new(3, 4, k, stride, pad, 1)?;
        let x = rand_t(&[2, 3, 5, 5], rng);
        let w = rand_t(&spec.weight_shape(), rng);
        worst = worst.max(max_rel_err(
            &conv2d_value(&x, &w, &spec)?,
            &conv2d_direct(&x, &w, &spec),
        ));
    }
    Ok(Measured::Below(worst, 1e-12))
}

fn grouped_equivalence(rng: &mut ChaCha8Rng, _: &VerifyOptions) -> Result<Measured> {
    let (b, c_in, c_out, hw) = (3, 2, 4, 6);
    let spec = ConvSpec::same(c_in, c_out, 3, 1)?;
    let x = rand_t(&[b, c_in, hw, hw], rng);
    let kernels: Vec<Tensor> = (0..b).map(|_| rand_t(&spec.weight_shape(), rng)).collect();

    let mut tape = Tape::new();
    let packed = tape.constant(x.reshape(&[1, b * c_in, hw, hw])?);
    let stacked: Vec<f64> = kernels.iter().flat_map(|k| k.data().to_vec()).collect();
    let w = tape.constant(Tensor::new(vec![b * c_out, c_in, 3, 3], stacked)?);
    let grouped = ConvSpec::new(b * c_in, b * c_out, 3, 1, 1, b)?;
    let y = tape.grouped_conv2d(packed, w, &grouped)?;
    let y = tape.value(y).clone();

    let plane = c_in * hw * hw;
    let per = c_out * hw * hw;
    let mut worst: f64 = 0.0;
    for (i, k) in kernels.iter().enumerate() {
        let xi = Tensor::new(
            vec![1, c_in, hw, hw],
            x.data()[i * plane..(i + 1) * plane].to_vec(),
        )?;
        let yi = conv2d_direct(&xi, k, &spec);
        let got = Tensor::new(
            vec![1, c_out, hw, hw],
            y.data()[i * per..(i + 1) * per].to_vec(),
        )?;
        worst = worst.max(got.max_abs_diff(&yi));
    }
    Ok(Measured::Below(worst, 1e-10))
}

fn conv_gradcheck(rng: &mut ChaCha8Rng, _: &VerifyOptions) -> Result<Measured> {
    let spec = ConvSpec::same(2, 3, 3, 2)?;
    let inputs = [
        rand_t(&[2, 2, 5, 5], rng),
        rand_t(&spec.weight_shape(), rng),
    ];
    let plain = check_gradients(&inputs, GradCheck::default(), |tape, v| {
        let y = tape.conv2d(v[0], v[1], &spec)?;
        let sq = tape.mul(y, y)?;
        tape.sum(sq)
    })?;
    let grouped = ConvSpec::new(4, 6, 3, 1, 1, 2)?;
    let inputs = [
        rand_t(&[1, 4, 4, 4], rng),
        rand_t(&grouped.weight_shape(), rng),
    ];
    let group = check_gradients(&inputs, GradCheck::default(), |tape, v| {
        let y = tape.grouped_conv2d(v[0], v[1], &grouped)?;
        let sq = tape.mul(y, y)?;
        tape.sum(sq)
    })?;
    Ok(Measured::Below(
        plain.max_rel_err.max(group.max_rel_err),
        1e-6,
    ))
}

fn flop_counter(rng: &mut ChaCha8Rng, _: &VerifyOptions) -> Result<Measured> {
    let specs = [
        ConvSpec::same(1, 4, 3, 2)?,
        ConvSpec::same(4, 6, 1, 1)?,
        ConvSpec::same(6, 8, 3, 2)?,
    ];
    let mut x = rand_t(&[1, 1, 12, 12], rng);
    let mut expected = 0u64;
    let before = instrument::snapshot().conv_macs;
    for spec in &specs {
        expected += conv_flops(spec, x.shape()[2], x.shape()[3])?;
        let w = rand_t(&spec.weight_shape(), rng);
        x = conv2d_value(&x, &w, spec)?;
    }
    let counted = 2 * (instrument::snapshot().conv_macs - before);
    Ok(Measured::Exact(counted.abs_diff(expected) as f64))
}

fn eks_forward_oracle(rng: &mut ChaCha8Rng, _: &VerifyOptions) -> Result<Measured> {
    let mut worst: f64 = 0.0;
    for case in 0..12 {
        let t = [1, 3, 8][case % 3];
        let b = rng.random_range(1..=8);
        let c_in = rng.random_range(1..=6);
        let c_out = rng.random_range(1..=6);
        let k = if case % 2 == 0 { 3 } else { 1 };
        let rank = rng.random_range(1..=c_in.min(c_out));
        let spec = ConvSpec::same(c_in, c_out, k, 1 + case % 2)?;
        let layer = random_layer(spec, t, rank, rng)?;
        let h = rand_t(&[b, c_in, 5, 5], rng);
        let tasks = random_tasks(b, t, rng);
        let mask = TaskMask::from_tasks(&tasks, t)?;
        let fast = eks_value(&layer, &h, &mask)?;
        let naive = eks_forward_naive(&h, &layer.w0, &naive_factors(&layer), &tasks, &spec);
        worst = worst.max(fast.max_abs_diff(&naive));
    }
    Ok(Measured::Below(worst, 1e-10))
}

fn gradient_separation(rng: &mut ChaCha8Rng, _: &VerifyOptions) -> Result<Measured> {
    let spec = ConvSpec::same(3, 4, 3, 1)?;
    let layer = random_layer(spec, 5, 2, rng)?;
    let mut worst: f64 = 0.0;
    // Tasks 1 and 3 are absent from the mixed batch; the second batch is single-task.
    for tasks in [vec![0, 2, 4, 2, 0, 4], vec![0, 0, 0]] {
        let h = rand_t(&[tasks.len(), 3, 4, 4], rng);
        let mask = TaskMask::from_tasks(&tasks, 5)?;
        let report = eks_backward_check(&layer, &h, &mask, |tape, y| {
            let sq = tape.mul(y, y)?;
            tape.sum(sq)
        })?;
        if !report.absent_experts_zero {
            // Any non-zero entry on an absent expert is a hard failure.
            return Ok(Measured::Below(f64::INFINITY, 1e-8));
        }
        worst = worst
            .max(report.expert_rel_err)
            .max(report.w0_rel_err)
            .max(report.w0_subbatch_rel_err);
    }
    Ok(Measured::Below(worst, 1e-8))
}

fn eks_gradcheck(rng: &mut ChaCha8Rng, _: &VerifyOptions) -> Result<Measured> {
    let spec = ConvSpec::same(2, 3, 3, 1)?;
    let tasks = [0, 2, 1, 2];
    let mask = TaskMask::from_tasks(&tasks, 3)?;
    let mut inputs = vec![
        rand_t(&[4, 2, 4, 4], rng),
        rand_t(&spec.weight_shape(), rng),
    ];
    for _ in 0..3 {
        inputs.push(rand_t(&[9, 6], rng));
        inputs.push(rand_t(&[6, 6], rng));
    }
    let report = check_gradients(&inputs, GradCheck::default(), |tape, v| {
        let layer_vars = crate::eks::EksVars {
            w0: v[1],
            experts: (0..3).map(|t| (v[2 + 2 * t], v[3 + 2 * t])).collect(),
        };
        let layer = EksConvLayer::new(
            Tensor::zeros(&spec.weight_shape()),
            (0..3)
                .map(|_| {
                    crate::eks::LowRankExpert::new(
                        Tensor::zeros(&[9, 6]),
                        Tensor::zeros(&[6, 6]),
                        2,
                        &spec,
                    )
                })
                .collect::<Result<_>>()?,
            spec,
        )?;
        let y = layer.forward(tape, &layer_vars, v[0], &mask)?;
        let sq = tape.mul(y, y)?;
        tape.sum(sq)
    })?;
    Ok(Measured::Below(report.max_rel_err, 1e-6))
}

fn single_pass(rng: &mut ChaCha8Rng, _: &VerifyOptions) -> Result<Measured> {
    let spec = ConvSpec::same(4, 4, 3, 1)?;
    let mut violations = 0.0;
    for t in [1, 4, 8] {
        let layer = random_layer(spec, t, 2, rng)?;
        let tasks: Vec<usize> = (0..16).map(|i| i % t).collect();
        let mask = TaskMask::from_tasks(&tasks, t)?;
        let h = rand_t(&[16, 4, 6, 6], rng);
        let before = instrument::snapshot().grouped_conv_calls;
        eks_value(&layer, &h, &mask)?;
        let calls = instrument::snapshot().grouped_conv_calls - before;
        violations += calls.abs_diff(1) as f64;
    }
    Ok(Measured::Exact(violations))
}

fn fusion_roundtrip(rng: &mut ChaCha8Rng, _: &VerifyOptions) -> Result<Measured> {
    let spec = ConvSpec::same(5, 6, 3, 1)?;
    let layer = random_layer(spec, 4, 3, rng)?;
    let mut worst: f64 = 0.0;
    for t in 0..4 {
        let mut l = layer.clone();
        l.fuse(t)?;
        l.unfuse()?;
        worst = worst.max(l.w0.max_abs_diff(&layer.w0));
    }
    let mut single = layer.clone();
    single.fuse(0)?;
    let mut hops = layer.clone();
    hops.fuse(0)?;
    for t in [1, 3, 2, 0] {
        hops.switch(t)?;
    }
    worst = worst.max(hops.w0.max_abs_diff(&single.w0));
    hops.unfuse()?;
    worst = worst.max(hops.w0.max_abs_diff(&layer.w0));
    Ok(Measured::Below(worst, 1e-12))
}

fn fusion_forward(rng: &mut ChaCha8Rng, opts: &VerifyOptions) -> Result<Measured> {
    let spec = ConvSpec::same(3, 5, 3, 2)?;
    let t_count = 4;
    let layer = random_layer(spec, t_count, 2, rng)?;
    let mut worst: f64 = 0.0;
    for t in 0..t_count {
        let h = rand_t(&[3, 3, 6, 6], rng);
        let mask = TaskMask::from_tasks(&[t; 3], t_count)?;
        let reference = eks_value(&layer, &h, &mask)?;
        let mut fused = layer.clone();
        let target = match opts.fault {
            Some(Fault::FusionOffByOne) => (t + 1) % t_count,
            None => t,
        };
        fused.fuse(target)?;
        let plain = conv2d_value(&h, &fused.w0, &spec)?;
        worst = worst.max(plain.max_abs_diff(&reference));
    }
    Ok(Measured::Below(worst, 1e-10))
}

fn param_count(rng: &mut ChaCha8Rng, _: &VerifyOptions) -> Result<Measured> {
    let spec = ConvSpec::same(8, 8, 3, 1)?;
    let counts = eks_param_count(&spec, 4, 2);
    let layer = EksConvLayer::init(spec, 4, 2, rng)?;
    let allocated: usize = layer
        .experts
        .iter()
        .map(|e| e.b_factor.numel() + e.a_factor.numel())
        .sum();
    let mut violations = 0;
    violations += usize::from(counts.expert_total != 1152);
    violations += usize::from(allocated != counts.expert_total);
    violations += usize::from(counts.shared != layer.w0.numel());
    violations += usize::from(counts.deployed != spec.weight_count());
    let mut fused = layer.clone();
    fused.fuse(1)?;
    violations += usize::from(fused.w0.numel() != counts.deployed);
    Ok(Measured::Exact(violations as f64))
}

fn cost_model(rng: &mut ChaCha8Rng, _: &VerifyOptions) -> Result<Measured> {
    let mut violations = 0;
    violations += usize::from(!eks_cost_model(11, 8, 64, 49, 256)?.eks_cheaper);
    for (t, b, l) in [(1, 1, 1), (8, 64, 49), (3, 2, 5)] {
        violations += usize::from(eks_cost_model(t, 1, b, l, 16)?.eks_cheaper);
    }
    // T·r = (r − 1)·b·l: T=2, r=3, b=1, l=3 sits exactly on the boundary.
    violations += usize::from(!eks_cost_model(2, 3, 1, 3, 4)?.eks_cheaper);
    for _ in 0..20 {
        let (t, r, b, l, d) = (
            rng.random_range(1..=8u64),
            rng.random_range(1..=8u64),
            rng.random_range(1..=8u64),
            rng.random_range(1..=6u64),
            rng.random_range(1..=8u64),
        );
        let model = eks_cost_model(t, r, b, l, d)?;
        let counted = count_low_rank_multiplies(t, r, b, l, d);
        violations += usize::from(model.eks_cost != counted.eks as u128);
        violations += usize::from(model.flora_cost != counted.flora as u128);
        let brute_cheaper = counted.eks <= counted.flora;
        let ratio = (t * r) as f64 / (b * l) as f64 + 1.0 <= r as f64;
        violations += usize::from(model.eks_cheaper != brute_cheaper);
        violations += usize::from(model.eks_cheaper != ratio);
    }
    Ok(Measured::Exact(violations as f64))
}

fn softmax_oracle(rng: &mut ChaCha8Rng, _: &VerifyOptions) -> Result<Measured> {
    let logits: Vec<f64> = (0..10).map(|_| rng.random_range(-20.0..20.0)).collect();
    let alpha = 10.0;
    let p = temp_softmax(&logits, alpha)?;
    let z: f64 = logits.iter().map(|g| (g / alpha).exp()).sum();
    let worst = logits
        .iter()
        .zip(&p)
        .map(|(g, pj)| {
            let direct = (g / alpha).exp() / z;
            ((pj - direct) / direct).abs()
        })
        .fold(0.0, f64::max);
    let limit = temp_softmax(&[1.0, 2.0, 3.0], 1e6)?
        .iter()
        .map(|q| (q - 1.0 / 3.0).abs())
        .fold(0.0, f64::max);
    Ok(Measured::Below(worst.max(limit * 1e-7), 1e-12))
}

fn kl_oracle(rng: &mut ChaCha8Rng, _: &VerifyOptions) -> Result<Measured> {
    // Logits ln(p), α = 1: the softmaxes are exactly p and q.
    let p: [f64; 3] = [0.2, 0.5, 0.3];
    let q: [f64; 3] = [0.4, 0.4, 0.2];
    let hand = 0.2 * (0.2f64 / 0.4).ln() + 0.5 * (0.5f64 / 0.4).ln() + 0.3 * (0.3f64 / 0.2).ln();
    let got = transfer_kl(&p.map(f64::ln), &q.map(f64::ln), 1.0)?;
    let mut worst = ((got - hand) / hand).abs();
    let same: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
    worst = worst.max(transfer_kl(&same, &same, 10.0)?.abs());
    Ok(Measured::Below(worst, 1e-10))
}

struct LossFixture {
    heads: Vec<TaskHead>,
    teacher: Tensor,
    tasks: Vec<usize>,
    labels: Vec<usize>,
}

fn loss_fixture(rng: &mut ChaCha8Rng) -> LossFixture {
    let mut heads: Vec<TaskHead> = [3, 2, 4]
        .iter()
        .enumerate()
        .map(|(t, &c)| TaskHead::init(t, c, 4, rng))
        .collect();
    for h in &mut heads {
        h.bias = rand_t(h.bias.shape(), rng);
    }
    LossFixture {
        heads,
        teacher: rand_t(&[5, 6], rng),
        tasks: vec![0, 1, 0, 2, 1],
        labels: vec![2, 1, 0, 3, 0],
    }
}

fn total_loss_gradcheck(rng: &mut ChaCha8Rng, _: &VerifyOptions) -> Result<Measured> {
    let fx = loss_fixture(rng);
    let mut inputs = vec![rand_t(&[5, 4], rng), rand_t(&[5, 6], rng)];
    for h in &fx.heads {
        inputs.push(h.weight.clone());
        inputs.push(h.bias.clone());
    }
    let report = check_gradients(&inputs, GradCheck::default(), |tape, v| {
        let head_vars: Vec<_> = (0..fx.heads.len())
            .map(|t| crate::losses::HeadVars {
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
        // Low temperature keeps the KL path's gradient well above step noise.
        Ok(total_loss(tape, &batch, &fx.heads, &head_vars, 2.0, 1.0)?.0)
    })?;
    Ok(Measured::Below(report.max_rel_err, 1e-6))
}

fn head_isolation(rng: &mut ChaCha8Rng, _: &VerifyOptions) -> Result<Measured> {
    let fx = loss_fixture(rng);
    let features = rand_t(&[5, 4], rng);
    let distill = rand_t(&[5, 6], rng);
    let mut nonzero = 0usize;
    for i in 0..fx.tasks.len() {
        let mut tape = Tape::new();
        let f = tape.param(features.clone());
        let d = tape.param(distill.clone());
        let hv: Vec<_> = fx.heads.iter().map(|h| h.bind(&mut tape)).collect();
        let fi = tape.gather_rows(f, &[i])?;
        let di = tape.gather_rows(d, &[i])?;
        let teacher = Tensor::new(vec![1, 6], fx.teacher.data()[i * 6..(i + 1) * 6].to_vec())?;
        let batch = LossBatch {
            features: fi,
            distill_features: di,
            teacher_features: &teacher,
            tasks: &fx.tasks[i..=i],
            labels: &fx.labels[i..=i],
        };
        let (loss, _) = total_loss(&mut tape, &batch, &fx.heads, &hv, 10.0, 1.0)?;
        tape.backward(loss)?;
        for (t, v) in hv.iter().enumerate() {
            if t == fx.tasks[i] {
                continue;
            }
            for var in [v.weight, v.bias] {
                if let Some(g) = tape.grad(var) {
                    nonzero += g.data().iter().filter(|&&x| x != 0.0).count();
                }
            }
        }
    }
    Ok(Measured::Exact(nonzero as f64))
}

fn small_arch() -> ArchConfig {
    let stage = |c_out, k, stride, eks| StageConfig {
        c_out,
        k,
        stride,
        eks,
    };
    ArchConfig {
        in_channels: 1,
        in_size: 8,
        stages: vec![
            stage(4, 3, 2, true),
            stage(6, 1, 1, false),
            stage(8, 3, 2, true),
        ],
        tasks: vec![3, 2, 4],
        rank: 2,
        teacher_width: 2,
        projection: true,
    }
}

fn randomized_student(rng: &mut ChaCha8Rng) -> Result<DecompModel> {
    let mut model = DecompModel::init(&small_arch(), rng)?;
    for layer in &mut model.layers {
        if let StudentLayer::Eks(e) = layer {
            for ex in &mut e.experts {
                ex.b_factor = rand_t(ex.b_factor.shape(), rng);
            }
        }
    }
    Ok(model)
}

fn export_equality(rng: &mut ChaCha8Rng, _: &VerifyOptions) -> Result<Measured> {
    let model = randomized_student(rng)?;
    let mut worst: f64 = 0.0;
    for t in 0..model.num_tasks() {
        let expert = model.export_expert(t)?;
        let x = rand_t(&[10, 1, 8, 8], rng);
        let mask = TaskMask::from_tasks(&[t; 10], model.num_tasks())?;
        let (_, student) = model.forward_value(&x, &mask)?;
        let (_, exported) = expert.forward_value(&x)?;
        for (i, row) in student.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                worst = worst.max((v - exported.at(&[i, j])).abs());
            }
        }
    }
    Ok(Measured::Below(worst, 1e-10))
}

fn deploy_cost(rng: &mut ChaCha8Rng, _: &VerifyOptions) -> Result<Measured> {
    let model = randomized_student(rng)?;
    let arch = &model.arch;
    let mut violations = 0;
    for t in 0..model.num_tasks() {
        let expert = model.export_expert(t)?;
        let baseline = PlainNet::baseline(arch, t, rng)?;
        violations += usize::from(expert.param_count() != baseline.param_count());
        violations += usize::from(
            expert.flops_per_sample(arch.in_size)? != baseline.flops_per_sample(arch.in_size)?,
        );
    }
    let report = model.cost_report(8)?;
    violations += usize::from(report.deploy_flops_per_sample != report.baseline_flops_per_sample);
    let summed: usize = model
        .layers
        .iter()
        .map(|l| match l {
            StudentLayer::Eks(e) => {
                let c = e.param_count();
                c.shared + c.expert_total
            }
            StudentLayer::Plain(p) => p.weight.numel(),
        })
        .sum();
    violations += usize::from(report.train_params != summed);
    Ok(Measured::Exact(violations as f64))
}

fn data_determinism(rng: &mut ChaCha8Rng, _: &VerifyOptions) -> Result<Measured> {
    let seed = rng.random();
    let specs = TaskSpec::diverse(3, 4, 0.1, 50);
    let a = Dataset::generate(&specs, 16, seed)?;
    let b = Dataset::generate(&specs, 16, seed)?;
    let mut violations = usize::from(a.to_bytes() != b.to_bytes());
    violations += usize::from(a.train.len() != 480 || a.val.len() != 120);
    violations += usize::from(Dataset::from_bytes(&a.to_bytes())? != a);
    Ok(Measured::Exact(violations as f64))
}

fn mig_synthetic(rng: &mut ChaCha8Rng, _: &VerifyOptions) -> Result<Measured> {
    let n = 10_000;
    let d = 4;
    let tasks: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
    let build = |copies: usize, rng: &mut ChaCha8Rng| {
        Tensor::from_fn(&[n, d], |i| {
            let (row, col) = (i / d, i % d);
            if col < copies {
                tasks[row] as f64
            } else {
                rng.random_range(0.0..1.0)
            }
        })
    };
    let one = mig_score(&build(1, rng), &tasks)?;
    let none = mig_score(&build(0, rng), &tasks)?;
    let two = mig_score(&build(2, rng), &tasks)?;
    // Distance from each expected regime: > 0.9, < 0.1, < 0.1.
    let worst = (0.9 - one).max(none - 0.1).max(two - 0.1);
    Ok(Measured::Below(worst.max(0.0), 1e-12))
}

fn cosine_schedule(_: &mut ChaCha8Rng, _: &VerifyOptions) -> Result<Measured> {
    let lr0 = 0.05;
    let worst = (cosine_lr(0, 100, lr0)? - lr0)
        .abs()
        .max(cosine_lr(100, 100, lr0)?.abs())
        .max((cosine_lr(50, 100, lr0)? - lr0 / 2.0).abs());
    Ok(Measured::Below(worst, 1e-15))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn healthy_build_passes_every_check() {
        let report = verify_all(7);
        assert!(report.all_passed(), "{report}");
        assert_eq!(report.checks.len(), CHECKS.len());
    }

    #[test]
    fn fusion_fault_is_caught_and_isolated() {
        let report = verify_with(
            7,
            &VerifyOptions {
                fault: Some(Fault::FusionOffByOne),
            },
        );
        let failed: Vec<_> = report.failures().iter().map(|c| c.name).collect();
        assert_eq!(failed, vec!["eks.fusion_forward"], "{report}");
    }

    #[test]
    fn report_text_is_stable_for_a_seed() {
        assert_eq!(verify_all(3).to_string(), verify_all(3).to_string());
    }

    #[test]
    fn report_lines_have_four_fields() {
        let text = verify_all(1).to_string();
        for line in text.lines().filter(|l| !l.starts_with('#')) {
            assert_eq!(line.split(' ').count(), 4, "{line}");
        }
    }
}
