//! Shared convolution plus per-task low-rank experts.
//!
//! For a sample of task `t` the effective kernel is `W0 + reshape(B_t·A_t)`
//! with `B_t: (c_out·k)×(r·k)` and `A_t: (r·k)×(c_in·k)`. A mixed-task batch
//! is handled in one pass: the per-sample kernels are assembled into
//! `W' = 1·W0 + M·D` (`M` the B×T one-hot mask, `D` the T stacked deltas) and
//! applied with a single grouped convolution whose group count is the batch
//! size.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::conv::ConvSpec;
use crate::error::{EksError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct LowRankExpert {
    pub b_factor: Tensor,
    pub a_factor: Tensor,
    pub rank: usize,
}

fn factor_shapes(spec: &ConvSpec, rank: usize) -> ([usize; 2], [usize; 2]) {
    let k = spec.k;
    ([spec.c_out * k, rank * k], [rank * k, spec.c_in * k])
}

fn check_rank(spec: &ConvSpec, rank: usize) -> Result<()> {
    if rank == 0 || rank > spec.c_in.min(spec.c_out) {
        return Err(EksError::InvalidArgument(format!(
            "rank {rank} must be in 1..={} for {}→{} channels",
            spec.c_in.min(spec.c_out),
            spec.c_in,
            spec.c_out
        )));
    }
    Ok(())
}

impl LowRankExpert {
    pub fn new(b_factor: Tensor, a_factor: Tensor, rank: usize, spec: &ConvSpec) -> Result<Self> {
        check_rank(spec, rank)?;
        let (bs, as_) = factor_shapes(spec, rank);
        if b_factor.shape() != bs || a_factor.shape() != as_ {
            return Err(EksError::ShapeMismatch {
                op: "low_rank_expert",
                left: b_factor.shape().to_vec(),
                right: a_factor.shape().to_vec(),
            });
        }
        Ok(Self {
            b_factor,
            a_factor,
            rank,
        })
    }

    /// `A ~ U(±1/√(r·k))`, `B = 0`: the delta starts at exactly zero.
    pub fn init(spec: &ConvSpec, rank: usize, rng: &mut impl Rng) -> Result<Self> {
        check_rank(spec, rank)?;
        let (bs, as_) = factor_shapes(spec, rank);
        let bound = 1.0 / ((rank * spec.k) as f64).sqrt();
        Ok(Self {
            b_factor: Tensor::zeros(&bs),
            a_factor: Tensor::uniform(&as_, -bound, bound, rng),
            rank,
        })
    }

    /// `reshape(B·A)` to the convolution weight shape.
    pub fn delta(&self, spec: &ConvSpec) -> Tensor {
        self.b_factor
            .matmul(&self.a_factor)
            .and_then(|d| d.reshape(&spec.weight_shape()))
            .expect("factor shapes validated at construction")
    }

    pub fn param_count(&self) -> usize {
        self.b_factor.numel() + self.a_factor.numel()
    }
}

/// Differentiable `reshape(B·A)` on a tape.
pub fn expert_delta(tape: &mut Tape, b: Var, a: Var, spec: &ConvSpec) -> Result<Var> {
    let d = tape.matmul(b, a)?;
    tape.reshape(d, &spec.weight_shape())
}

/// Per-sample kernels `W′ = 1·W0 + M·D`, where row `t` of `deltas` is task
/// `t`'s flattened delta. Mask rows are one-hot, so row `i` of `M·D` is the
/// delta of sample `i`'s task and the product is evaluated as that lookup.
/// The backward pass is the matching reduction: `dW0 = 1ᵀ·G`, `dD = Mᵀ·G`.
fn aggregate_kernels(
    tape: &mut Tape,
    w0: Var,
    deltas: Var,
    mask: &TaskMask,
    shape: &[usize],
) -> Result<Var> {
    let p = tape.value(w0).numel();
    let b = mask.batch_size();
    let t = mask.num_tasks();
    if tape.shape(deltas) != [t, p] || shape.iter().product::<usize>() != b * p {
        return Err(EksError::ShapeMismatch {
            op: "aggregate_kernels",
            left: tape.shape(deltas).to_vec(),
            right: vec![t, p],
        });
    }
    let tasks = mask.tasks().to_vec();
    let mut out = Vec::with_capacity(b * p);
    {
        let (w, d) = (tape.value(w0).data(), tape.value(deltas).data());
        for &ti in &tasks {
            out.extend(w.iter().zip(&d[ti * p..(ti + 1) * p]).map(|(a, b)| a + b));
        }
    }
    let out = Tensor::new(shape.to_vec(), out)?;
    tape.push("aggregate_kernels", out, &[w0, deltas], move |c| {
        let g = c.grad_out.data();
        let dw0 = c.needs[0].then(|| {
            let mut acc = vec![0.0; p];
            for row in g.chunks_exact(p) {
                acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
            }
            Tensor::new(c.inputs[0].shape().to_vec(), acc).unwrap()
        });
        let dd = c.needs[1].then(|| {
            let mut acc = vec![0.0; t * p];
            for (row, &ti) in g.chunks_exact(p).zip(&tasks) {
                acc[ti * p..(ti + 1) * p]
                    .iter_mut()
                    .zip(row)
                    .for_each(|(a, v)| *a += v);
            }
            Tensor::new(vec![t, p], acc).unwrap()
        });
        vec![dw0, dd]
    })
}

/// One-hot B×T assignment of batch samples to tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskMask {
    m: Tensor,
    tasks: Vec<usize>,
}

impl TaskMask {
    pub fn new(m: Tensor) -> Result<Self> {
        let [b, t] = m.shape() else {
            return Err(EksError::InvalidShape {
                op: "task_mask",
                msg: format!("mask must be B×T, got {:?}", m.shape()),
            });
        };
        let (b, t) = (*b, *t);
        let mut tasks = Vec::with_capacity(b);
        for row in 0..b {
            let vals = &m.data()[row * t..(row + 1) * t];
            let ones: Vec<usize> = (0..t).filter(|&j| vals[j] == 1.0).collect();
            if ones.len() != 1 || vals.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(EksError::MaskNotOneHot { row });
            }
            tasks.push(ones[0]);
        }
        Ok(Self { m, tasks })
    }

    pub fn from_tasks(tasks: &[usize], num_tasks: usize) -> Result<Self> {
        if let Some(&bad) = tasks.iter().find(|&&t| t >= num_tasks) {
            return Err(EksError::TaskOutOfRange {
                task: bad,
                count: num_tasks,
            });
        }
        let m = Tensor::from_fn(&[tasks.len(), num_tasks], |i| {
            if tasks[i / num_tasks] == i % num_tasks {
                1.0
            } else {
                0.0
            }
        });
        Ok(Self {
            m,
            tasks: tasks.to_vec(),
        })
    }

    pub fn matrix(&self) -> &Tensor {
        &self.m
    }

    /// Task index of every sample.
    pub fn tasks(&self) -> &[usize] {
        &self.tasks
    }

    pub fn batch_size(&self) -> usize {
        self.m.shape()[0]
    }

    pub fn num_tasks(&self) -> usize {
        self.m.shape()[1]
    }

    pub fn is_present(&self, task: usize) -> bool {
        self.tasks.contains(&task)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EksConvLayer {
    pub w0: Tensor,
    pub experts: Vec<LowRankExpert>,
    pub spec: ConvSpec,
    fused_task: Option<usize>,
}

/// Tape handles for one layer's parameters.
#[derive(Debug, Clone)]
pub struct EksVars {
    pub w0: Var,
    /// `(B_t, A_t)` per task.
    pub experts: Vec<(Var, Var)>,
}

impl EksVars {
    pub fn all(&self) -> Vec<Var> {
        let mut v = vec![self.w0];
        for &(b, a) in &self.experts {
            v.push(b);
            v.push(a);
        }
        v
    }
}

impl EksConvLayer {
    /// He-uniform `W0` and freshly initialised experts.
    pub fn init(spec: ConvSpec, num_tasks: usize, rank: usize, rng: &mut impl Rng) -> Result<Self> {
        if spec.groups != 1 {
            return Err(EksError::InvalidSpec(
                "low-rank experts need an ungrouped convolution".into(),
            ));
        }
        if num_tasks == 0 {
            return Err(EksError::InvalidArgument(
                "at least one task is required".into(),
            ));
        }
        let fan_in = (spec.c_in * spec.k * spec.k) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let w0 = Tensor::uniform(&spec.weight_shape(), -bound, bound, rng);
        let experts = (0..num_tasks)
            .map(|_| LowRankExpert::init(&spec, rank, rng))
            .collect::<Result<_>>()?;
        Self::new(w0, experts, spec)
    }

    pub fn new(w0: Tensor, experts: Vec<LowRankExpert>, spec: ConvSpec) -> Result<Self> {
        spec.validate()?;
        if spec.groups != 1 {
            return Err(EksError::InvalidSpec(
                "low-rank experts need an ungrouped convolution".into(),
            ));
        }
        if experts.is_empty() {
            return Err(EksError::InvalidArgument(
                "at least one expert is required".into(),
            ));
        }
        if w0.shape() != spec.weight_shape() {
            return Err(EksError::ShapeMismatch {
                op: "eks_layer",
                left: w0.shape().to_vec(),
                right: spec.weight_shape().to_vec(),
            });
        }
        for e in &experts {
            LowRankExpert::new(e.b_factor.clone(), e.a_factor.clone(), e.rank, &spec)?;
        }
        Ok(Self {
            w0,
            experts,
            spec,
            fused_task: None,
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.experts.len()
    }

    pub fn rank(&self) -> usize {
        self.experts[0].rank
    }

    pub fn fused_task(&self) -> Option<usize> {
        self.fused_task
    }

    fn check_task(&self, t: usize) -> Result<()> {
        if t >= self.num_tasks() {
            return Err(EksError::TaskOutOfRange {
                task: t,
                count: self.num_tasks(),
            });
        }
        Ok(())
    }

    /// Task-`t` kernel `W0 + B_t·A_t`, computed without touching the layer.
    pub fn task_weight(&self, t: usize) -> Result<Tensor> {
        self.check_task(t)?;
        let mut w = self.w0.clone();
        if let Some(f) = self.fused_task {
            w.axpy(-1.0, &self.experts[f].delta(&self.spec))?;
        }
        w.axpy(1.0, &self.experts[t].delta(&self.spec))?;
        Ok(w)
    }

    /// Folds expert `t` into `w0`.
    pub fn fuse(&mut self, t: usize) -> Result<()> {
        if let Some(f) = self.fused_task {
            return Err(EksError::LayerFused(f));
        }
        self.check_task(t)?;
        let delta = self.experts[t].delta(&self.spec);
        self.w0.axpy(1.0, &delta)?;
        self.fused_task = Some(t);
        Ok(())
    }

    /// Restores the shared kernel by subtracting the fused expert.
    pub fn unfuse(&mut self) -> Result<()> {
        let t = self.fused_task.ok_or(EksError::LayerNotFused)?;
        let delta = self.experts[t].delta(&self.spec);
        self.w0.axpy(-1.0, &delta)?;
        self.fused_task = None;
        Ok(())
    }

    pub fn switch(&mut self, t_new: usize) -> Result<()> {
        if self.fused_task.is_none() {
            return Err(EksError::LayerNotFused);
        }
        self.check_task(t_new)?;
        self.unfuse()?;
        self.fuse(t_new)
    }

    pub fn bind(&self, tape: &mut Tape) -> EksVars {
        EksVars {
            w0: tape.param(self.w0.clone()),
            experts: self
                .experts
                .iter()
                .map(|e| {
                    (
                        tape.param(e.b_factor.clone()),
                        tape.param(e.a_factor.clone()),
                    )
                })
                .collect(),
        }
    }

    /// Like `bind` but the expert factors enter as constants (no gradient).
    pub fn bind_frozen_experts(&self, tape: &mut Tape) -> EksVars {
        EksVars {
            w0: tape.param(self.w0.clone()),
            experts: self
                .experts
                .iter()
                .map(|e| {
                    (
                        tape.constant(e.b_factor.clone()),
                        tape.constant(e.a_factor.clone()),
                    )
                })
                .collect(),
        }
    }

    fn check_forward(&self, tape: &Tape, vars: &EksVars, h: Var, mask: &TaskMask) -> Result<()> {
        if let Some(t) = self.fused_task {
            return Err(EksError::LayerFused(t));
        }
        if mask.num_tasks() != self.num_tasks() || vars.experts.len() != self.num_tasks() {
            return Err(EksError::InvalidArgument(format!(
                "mask has {} tasks, layer has {}",
                mask.num_tasks(),
                self.num_tasks()
            )));
        }
        let shape = tape.shape(h);
        if shape.len() != 4 || shape[0] != mask.batch_size() || shape[1] != self.spec.c_in {
            return Err(EksError::InvalidShape {
                op: "eks_forward",
                msg: format!(
                    "input {:?} does not match batch {} × {} channels",
                    shape,
                    mask.batch_size(),
                    self.spec.c_in
                ),
            });
        }
        Ok(())
    }

    /// Single-pass multi-task forward: aggregate per-sample kernels, then one
    /// grouped convolution with `groups = batch size`.
    pub fn forward(&self, tape: &mut Tape, vars: &EksVars, h: Var, mask: &TaskMask) -> Result<Var> {
        self.check_forward(tape, vars, h, mask)?;
        let spec = &self.spec;
        let (b, c_in, c_out) = (mask.batch_size(), spec.c_in, spec.c_out);
        let per_kernel = spec.weight_count();
        let (hh, ww) = (tape.shape(h)[2], tape.shape(h)[3]);
        let (ho, wo) = spec.output_size(hh, ww)?;

        let mut rows = Vec::with_capacity(self.num_tasks());
        for &(bf, af) in &vars.experts {
            let d = tape.matmul(bf, af)?;
            rows.push(tape.reshape(d, &[1, per_kernel])?);
        }
        let stacked = tape.concat(&rows, 0)?;
        let kernels = aggregate_kernels(
            tape,
            vars.w0,
            stacked,
            mask,
            &[b * c_out, c_in, spec.k, spec.k],
        )?;

        let packed = tape.reshape(h, &[1, b * c_in, hh, ww])?;
        let grouped = ConvSpec::new(b * c_in, b * c_out, spec.k, spec.stride, spec.padding, b)?;
        let y = tape.grouped_conv2d(packed, kernels, &grouped)?;
        tape.reshape(y, &[b, c_out, ho, wo])
    }

    /// Reference formulation: one ordinary convolution per task present in
    /// the batch, results scattered back to batch order.
    pub fn forward_per_task(
        &self,
        tape: &mut Tape,
        vars: &EksVars,
        h: Var,
        mask: &TaskMask,
    ) -> Result<Var> {
        self.check_forward(tape, vars, h, mask)?;
        let mut outputs = Vec::new();
        let mut order = Vec::with_capacity(mask.batch_size());
        for (t, &(bf, af)) in vars.experts.iter().enumerate() {
            let members: Vec<usize> = (0..mask.batch_size())
                .filter(|&i| mask.tasks()[i] == t)
                .collect();
            if members.is_empty() {
                continue;
            }
            let ht = tape.gather_rows(h, &members)?;
            let delta = expert_delta(tape, bf, af, &self.spec)?;
            let wt = tape.add(vars.w0, delta)?;
            outputs.push(tape.conv2d(ht, wt, &self.spec)?);
            order.extend(members);
        }
        let stacked = tape.concat(&outputs, 0)?;
        let mut inverse = vec![0; order.len()];
        for (pos, &i) in order.iter().enumerate() {
            inverse[i] = pos;
        }
        tape.gather_rows(stacked, &inverse)
    }

    pub fn param_count(&self) -> EksParamCount {
        eks_param_count(&self.spec, self.num_tasks(), self.rank())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EksParamCount {
    pub shared: usize,
    pub expert_total: usize,
    /// After fusion only the shared-size kernel remains.
    pub deployed: usize,
}

pub fn eks_param_count(spec: &ConvSpec, num_tasks: usize, rank: usize) -> EksParamCount {
    let k2 = spec.k * spec.k;
    let shared = spec.c_out * (spec.c_in / spec.groups) * k2;
    EksParamCount {
        shared,
        expert_total: num_tasks * rank * k2 * (spec.c_out + spec.c_in),
        deployed: shared,
    }
}

/// Matrix-product cost of building per-sample low-rank weights, with the
/// product coefficient set to 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostComparison {
    /// `T·r·d² + b·l·d²`
    pub eks_cost: u128,
    /// `r·b·l·d²`
    pub flora_cost: u128,
    /// `T·r/(b·l) + 1 ≤ r`
    pub eks_cheaper: bool,
}

pub fn eks_cost_model(
    tasks: u64,
    rank: u64,
    batch: u64,
    len: u64,
    dim: u64,
) -> Result<CostComparison> {
    if [tasks, rank, batch, len, dim].contains(&0) {
        return Err(EksError::InvalidArgument(
            "cost model arguments must be positive".into(),
        ));
    }
    let (t, r, b, l, d) = (
        tasks as u128,
        rank as u128,
        batch as u128,
        len as u128,
        dim as u128,
    );
    let d2 = d * d;
    Ok(CostComparison {
        eks_cost: t * r * d2 + b * l * d2,
        flora_cost: r * b * l * d2,
        // Tr/(bl) + 1 ≤ r, multiplied through by bl > 0 to stay exact.
        eks_cheaper: t * r + b * l <= r * b * l,
    })
}

/// Outcome of comparing single-pass gradients against the per-task formulation.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparationReport {
    /// Every factor of every task absent from the batch has an all-zero gradient.
    pub absent_experts_zero: bool,
    /// Largest absolute gradient entry seen on an absent expert.
    pub absent_max_abs: f64,
    pub expert_rel_err: f64,
    pub w0_rel_err: f64,
    /// `grad(W0)` versus the sum of per-task sub-batch runs.
    pub w0_subbatch_rel_err: f64,
}

fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    a.max_abs_diff(b) / b.max_abs().max(1e-300)
}

/// Runs the single-pass forward and the per-task formulation through the
/// same loss and compares gradients. `loss_fn` must be a sum over samples
/// for the sub-batch comparison to be meaningful.
pub fn eks_backward_check<F>(
    layer: &EksConvLayer,
    h: &Tensor,
    mask: &TaskMask,
    loss_fn: F,
) -> Result<SeparationReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let grads =
        |per_task: bool, h: &Tensor, mask: &TaskMask| -> Result<(Tensor, Vec<(Tensor, Tensor)>)> {
            let mut tape = Tape::new();
            let vars = layer.bind(&mut tape);
            let x = tape.constant(h.clone());
            let y = if per_task {
                layer.forward_per_task(&mut tape, &vars, x, mask)?
            } else {
                layer.forward(&mut tape, &vars, x, mask)?
            };
            let loss = loss_fn(&mut tape, y)?;
            tape.backward(loss)?;
            let get = |v: Var, like: &Tensor| {
                tape.grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(like.shape()))
            };
            let w0 = get(vars.w0, &layer.w0);
            let experts = vars
                .experts
                .iter()
                .zip(&layer.experts)
                .map(|(&(b, a), e)| (get(b, &e.b_factor), get(a, &e.a_factor)))
                .collect();
            Ok((w0, experts))
        };

    let (w0_fast, experts_fast) = grads(false, h, mask)?;
    let (w0_naive, experts_naive) = grads(true, h, mask)?;

    let mut report = SeparationReport {
        absent_experts_zero: true,
        absent_max_abs: 0.0,
        expert_rel_err: 0.0,
        w0_rel_err: rel_err(&w0_fast, &w0_naive),
        w0_subbatch_rel_err: 0.0,
    };
    for (t, ((bf, af), (bn, an))) in experts_fast.iter().zip(&experts_naive).enumerate() {
        if mask.is_present(t) {
            report.expert_rel_err = report
                .expert_rel_err
                .max(rel_err(bf, bn))
                .max(rel_err(af, an));
        } else {
            let worst = bf.max_abs().max(af.max_abs());
            report.absent_max_abs = report.absent_max_abs.max(worst);
            if bf.data().iter().chain(af.data()).any(|&v| v != 0.0) {
                report.absent_experts_zero = false;
            }
        }
    }

    let plane: usize = h.shape()[1..].iter().product();
    let mut w0_sum = Tensor::zeros(layer.w0.shape());
    for t in 0..mask.num_tasks() {
        let members: Vec<usize> = (0..mask.batch_size())
            .filter(|&i| mask.tasks()[i] == t)
            .collect();
        if members.is_empty() {
            continue;
        }
        let mut data = Vec::with_capacity(members.len() * plane);
        for &i in &members {
            data.extend_from_slice(&h.data()[i * plane..(i + 1) * plane]);
        }
        let mut shape = h.shape().to_vec();
        shape[0] = members.len();
        let sub = Tensor::new(shape, data)?;
        let sub_mask = TaskMask::from_tasks(&vec![t; members.len()], mask.num_tasks())?;
        let (w0_t, _) = grads(false, &sub, &sub_mask)?;
        w0_sum.axpy(1.0, &w0_t)?;
    }
    report.w0_subbatch_rel_err = rel_err(&w0_fast, &w0_sum);
    Ok(report)
}
