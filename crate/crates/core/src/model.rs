//! Teacher and student networks.
//!
//! Both are stacks of `conv → ReLU` stages followed by global average pooling.
//! The teacher is a plain network with a single head over every class. The
//! student replaces flagged stages with multi-task layers, projects its
//! features to the teacher's width for distillation and carries one head per
//! task. A deployed expert is again a plain network: fused kernels plus one
//! task head.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};

use crate::autodiff::{Tape, Var};
use crate::conv::{conv_flops, ConvSpec};
use crate::eks::{eks_param_count, EksConvLayer, EksVars, TaskMask};
use crate::error::{EksError, Result};
use crate::losses::{HeadVars, TaskHead};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageConfig {
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    /// Whether the student gives this stage per-task experts.
    pub eks: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    pub in_channels: usize,
    pub in_size: usize,
    pub stages: Vec<StageConfig>,
    /// Class count per task.
    pub tasks: Vec<usize>,
    /// Requested expert rank; each layer uses `min(rank, c_in, c_out)`.
    pub rank: usize,
    /// Teacher channel multiplier.
    pub teacher_width: usize,
    /// Learn a linear map from student to teacher features for distillation.
    pub projection: bool,
}

impl ArchConfig {
    /// Four stride-2 3×3 stages, 16→32→64→128 channels, all with experts.
    pub fn desk_default(tasks: Vec<usize>, rank: usize) -> Self {
        Self {
            in_channels: 1,
            in_size: 16,
            stages: [16, 32, 64, 128]
                .into_iter()
                .map(|c_out| StageConfig {
                    c_out,
                    k: 3,
                    stride: 2,
                    eks: true,
                })
                .collect(),
            tasks,
            rank,
            teacher_width: 2,
            projection: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(EksError::InvalidConfig(m.to_string()));
        if self.stages.is_empty() {
            return bad("at least one stage is required");
        }
        if !self.stages.iter().any(|s| s.eks) {
            return bad("at least one stage must carry experts");
        }
        if self.tasks.is_empty() || self.tasks.iter().any(|&y| y < 2) {
            return bad("every task needs at least two classes");
        }
        if self.rank == 0 || self.teacher_width == 0 || self.in_channels == 0 {
            return bad("rank, teacher width and input channels must be positive");
        }
        if !self.projection && self.teacher_width != 1 {
            return bad("without a projection the teacher and student widths must match");
        }
        let mut size = self.in_size;
        let mut c_in = self.in_channels;
        for s in &self.stages {
            let spec = ConvSpec::same(c_in, s.c_out, s.k, s.stride)?;
            size = spec.output_size(size, size)?.0;
            c_in = s.c_out;
        }
        if size == 0 {
            return bad("stages shrink the input to nothing");
        }
        Ok(())
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn total_classes(&self) -> usize {
        self.tasks.iter().sum()
    }

    pub fn feature_dim(&self) -> usize {
        self.stages.last().map_or(0, |s| s.c_out)
    }

    pub fn teacher_feature_dim(&self) -> usize {
        self.feature_dim() * self.teacher_width
    }

    /// Student conv specs in order.
    pub fn student_specs(&self) -> Vec<ConvSpec> {
        self.specs(1)
    }

    pub fn teacher_specs(&self) -> Vec<ConvSpec> {
        self.specs(self.teacher_width)
    }

    fn specs(&self, width: usize) -> Vec<ConvSpec> {
        let mut c_in = self.in_channels;
        self.stages
            .iter()
            .map(|s| {
                let spec = ConvSpec::same(c_in, s.c_out * width, s.k, s.stride).expect("validated");
                c_in = s.c_out * width;
                spec
            })
            .collect()
    }

    /// Spatial input size of every stage plus the final one.
    pub fn stage_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.in_size];
        for spec in self.student_specs() {
            let s = *sizes.last().unwrap();
            sizes.push(spec.output_size(s, s).expect("validated").0);
        }
        sizes
    }

    pub fn layer_rank(&self, spec: &ConvSpec) -> usize {
        self.rank.min(spec.c_in).min(spec.c_out)
    }

    /// Canonical `key=value` text, one key per line in fixed order.
    pub fn to_text(&self) -> String {
        let stages: Vec<String> = self
            .stages
            .iter()
            .map(|s| {
                format!(
                    "{}:{}:{}:{}",
                    s.c_out,
                    s.k,
                    s.stride,
                    if s.eks { "eks" } else { "plain" }
                )
            })
            .collect();
        let tasks: Vec<String> = self.tasks.iter().map(usize::to_string).collect();
        let mut out = String::new();
        writeln!(out, "in_channels={}", self.in_channels).unwrap();
        writeln!(out, "in_size={}", self.in_size).unwrap();
        writeln!(out, "stages={}", stages.join(",")).unwrap();
        writeln!(out, "tasks={}", tasks.join(",")).unwrap();
        writeln!(out, "rank={}", self.rank).unwrap();
        writeln!(out, "teacher_width={}", self.teacher_width).unwrap();
        writeln!(out, "projection={}", self.projection).unwrap();
        out
    }

    /// Parses the keys written by [`ArchConfig::to_text`]; other keys are ignored.
    pub fn from_text(text: &str) -> Result<Self> {
        let get = |key: &str| -> Result<String> {
            text.lines()
                .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
                .map(str::to_string)
                .ok_or_else(|| EksError::InvalidConfig(format!("missing key {key}")))
        };
        let num = |v: String, key: &str| -> Result<usize> {
            v.trim()
                .parse()
                .map_err(|_| EksError::InvalidConfig(format!("{key}: not a number: {v}")))
        };
        let stages = get("stages")?
            .split(',')
            .map(|s| {
                let parts: Vec<&str> = s.split(':').collect();
                let [c, k, st, kind] = parts[..] else {
                    return Err(EksError::InvalidConfig(format!("bad stage {s}")));
                };
                Ok(StageConfig {
                    c_out: num(c.into(), "stage")?,
                    k: num(k.into(), "stage")?,
                    stride: num(st.into(), "stage")?,
                    eks: match kind {
                        "eks" => true,
                        "plain" => false,
                        other => {
                            return Err(EksError::InvalidConfig(format!("bad stage kind {other}")))
                        }
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let tasks = get("tasks")?
            .split(',')
            .map(|t| num(t.into(), "tasks"))
            .collect::<Result<Vec<_>>>()?;
        let cfg = Self {
            in_channels: num(get("in_channels")?, "in_channels")?,
            in_size: num(get("in_size")?, "in_size")?,
            stages,
            tasks,
            rank: num(get("rank")?, "rank")?,
            teacher_width: num(get("teacher_width")?, "teacher_width")?,
            projection: match get("projection")?.trim() {
                "true" => true,
                "false" => false,
                v => return Err(EksError::InvalidConfig(format!("projection: {v}"))),
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Ordinary convolution, optionally with a per-channel bias.
#[derive(Debug, Clone, PartialEq)]
pub struct PlainConv {
    pub spec: ConvSpec,
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl PlainConv {
    pub fn init(spec: ConvSpec, bias: bool, rng: &mut impl Rng) -> Self {
        let fan_in = (spec.c_in / spec.groups * spec.k * spec.k) as f64;
        let bound = (6.0 / fan_in).sqrt();
        Self {
            spec,
            weight: Tensor::uniform(&spec.weight_shape(), -bound, bound, rng),
            bias: bias.then(|| Tensor::zeros(&[spec.c_out])),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.as_ref().map_or(0, Tensor::numel)
    }
}

/// How parameters enter a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BindMode {
    /// Every parameter gets a gradient.
    Train,
    /// Expert factors are constants, so their deltas never move from init.
    FrozenExperts,
    /// Everything is a constant.
    Inference,
}

fn bind_tensor(tape: &mut Tape, t: &Tensor, grad: bool) -> Var {
    if grad {
        tape.param(t.clone())
    } else {
        tape.constant(t.clone())
    }
}

/// Plain CNN with one linear head: the teacher, or a deployed expert.
#[derive(Debug, Clone, PartialEq)]
pub struct PlainNet {
    pub convs: Vec<PlainConv>,
    pub head: TaskHead,
}

#[derive(Debug, Clone)]
pub struct PlainVars {
    convs: Vec<(Var, Option<Var>)>,
    head: HeadVars,
}

impl PlainVars {
    /// Handles in [`PlainNet::params_mut`] order.
    pub fn all(&self) -> Vec<Var> {
        let mut v = Vec::new();
        for &(w, b) in &self.convs {
            v.push(w);
            v.extend(b);
        }
        v.push(self.head.weight);
        v.push(self.head.bias);
        v
    }
}

impl PlainNet {
    /// Teacher: the architecture at `teacher_width`, biased convs, one head over all classes.
    pub fn init_teacher(arch: &ArchConfig, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        let convs = arch
            .teacher_specs()
            .into_iter()
            .map(|s| PlainConv::init(s, true, rng))
            .collect();
        let head = TaskHead::init(0, arch.total_classes(), arch.teacher_feature_dim(), rng);
        Ok(Self { convs, head })
    }

    /// Bias-free student-width network with a head for task `t`: the
    /// reference a deployed expert is compared against.
    pub fn baseline(arch: &ArchConfig, t: usize, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        let classes = *arch.tasks.get(t).ok_or(EksError::TaskOutOfRange {
            task: t,
            count: arch.num_tasks(),
        })?;
        let convs = arch
            .student_specs()
            .into_iter()
            .map(|s| PlainConv::init(s, false, rng))
            .collect();
        Ok(Self {
            convs,
            head: TaskHead::init(t, classes, arch.feature_dim(), rng),
        })
    }

    pub fn bind(&self, tape: &mut Tape, grad: bool) -> PlainVars {
        PlainVars {
            convs: self
                .convs
                .iter()
                .map(|c| {
                    (
                        bind_tensor(tape, &c.weight, grad),
                        c.bias.as_ref().map(|b| bind_tensor(tape, b, grad)),
                    )
                })
                .collect(),
            head: HeadVars {
                weight: bind_tensor(tape, &self.head.weight, grad),
                bias: bind_tensor(tape, &self.head.bias, grad),
            },
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = Vec::new();
        for c in &self.convs {
            p.push(&c.weight);
            p.extend(c.bias.as_ref());
        }
        p.push(&self.head.weight);
        p.push(&self.head.bias);
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = Vec::new();
        for c in &mut self.convs {
            p.push(&mut c.weight);
            p.extend(c.bias.as_mut());
        }
        p.push(&mut self.head.weight);
        p.push(&mut self.head.bias);
        p
    }

    /// Pooled features `[B, d]`.
    pub fn features(&self, tape: &mut Tape, vars: &PlainVars, x: Var) -> Result<Var> {
        let mut h = x;
        for (conv, &(w, b)) in self.convs.iter().zip(&vars.convs) {
            h = tape.conv2d(h, w, &conv.spec)?;
            if let Some(b) = b {
                h = tape.add_channel_bias(h, b)?;
            }
            h = tape.relu(h)?;
        }
        tape.global_avg_pool(h)
    }

    pub fn logits(&self, tape: &mut Tape, vars: &PlainVars, x: Var) -> Result<Var> {
        let f = self.features(tape, vars, x)?;
        self.head.logits(tape, vars.head, f)
    }

    /// Inference-only forward returning `(features, logits)`.
    pub fn forward_value(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let f = self.features(&mut tape, &vars, xv)?;
        let z = self.head.logits(&mut tape, vars.head, f)?;
        Ok((tape.value(f).clone(), tape.value(z).clone()))
    }

    pub fn param_count(&self) -> usize {
        self.convs.iter().map(PlainConv::param_count).sum::<usize>() + self.head.param_count()
    }

    /// Per-sample multiply-add FLOPs of the convolutions and the head.
    pub fn flops_per_sample(&self, in_size: usize) -> Result<u64> {
        let mut size = in_size;
        let mut total = 0;
        for c in &self.convs {
            total += conv_flops(&c.spec, size, size)?;
            size = c.spec.output_size(size, size)?.0;
        }
        Ok(total + 2 * self.head.param_count() as u64 - 2 * self.head.bias.numel() as u64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StudentLayer {
    Eks(EksConvLayer),
    Plain(PlainConv),
}

impl StudentLayer {
    pub fn spec(&self) -> &ConvSpec {
        match self {
            StudentLayer::Eks(l) => &l.spec,
            StudentLayer::Plain(p) => &p.spec,
        }
    }
}

#[derive(Debug, Clone)]
enum LayerVars {
    Eks(EksVars),
    Plain(Var),
}

/// Tape handles for a whole student.
#[derive(Debug, Clone)]
pub struct StudentVars {
    layers: Vec<LayerVars>,
    projection: Option<Var>,
    heads: Vec<HeadVars>,
}

impl StudentVars {
    pub fn heads(&self) -> &[HeadVars] {
        &self.heads
    }

    /// Handles in [`DecompModel::params_mut`] order.
    pub fn all(&self) -> Vec<Var> {
        let mut v = Vec::new();
        for l in &self.layers {
            match l {
                LayerVars::Eks(e) => v.extend(e.all()),
                LayerVars::Plain(w) => v.push(*w),
            }
        }
        v.extend(self.projection);
        for h in &self.heads {
            v.push(h.weight);
            v.push(h.bias);
        }
        v
    }
}

/// Student forward results.
#[derive(Debug, Clone, Copy)]
pub struct StudentOutput {
    /// Pooled backbone features `[B, d]`.
    pub features: Var,
    /// Features mapped to the teacher's width `[B, d_teacher]`.
    pub distill: Var,
}

/// Shared backbone with per-task experts, projection and heads.
#[derive(Debug, Clone, PartialEq)]
pub struct DecompModel {
    pub arch: ArchConfig,
    pub layers: Vec<StudentLayer>,
    /// `[d_teacher, d]`
    pub projection: Option<Tensor>,
    pub heads: Vec<TaskHead>,
}

impl DecompModel {
    pub fn init(arch: &ArchConfig, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        let t = arch.num_tasks();
        let layers = arch
            .student_specs()
            .into_iter()
            .zip(&arch.stages)
            .map(|(spec, stage)| {
                Ok(if stage.eks {
                    StudentLayer::Eks(EksConvLayer::init(spec, t, arch.layer_rank(&spec), rng)?)
                } else {
                    StudentLayer::Plain(PlainConv::init(spec, false, rng))
                })
            })
            .collect::<Result<_>>()?;
        let d = arch.feature_dim();
        let projection = arch.projection.then(|| {
            let bound = 1.0 / (d as f64).sqrt();
            Tensor::uniform(&[arch.teacher_feature_dim(), d], -bound, bound, rng)
        });
        let heads = arch
            .tasks
            .iter()
            .enumerate()
            .map(|(i, &y)| TaskHead::init(i, y, d, rng))
            .collect();
        Ok(Self {
            arch: arch.clone(),
            layers,
            projection,
            heads,
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.heads.len()
    }

    pub fn eks_layers(&self) -> impl Iterator<Item = &EksConvLayer> {
        self.layers.iter().filter_map(|l| match l {
            StudentLayer::Eks(e) => Some(e),
            StudentLayer::Plain(_) => None,
        })
    }

    fn eks_layers_mut(&mut self) -> impl Iterator<Item = &mut EksConvLayer> {
        self.layers.iter_mut().filter_map(|l| match l {
            StudentLayer::Eks(e) => Some(e),
            StudentLayer::Plain(_) => None,
        })
    }

    /// Task the expert layers are currently fused for, if any.
    pub fn fused_task(&self) -> Option<usize> {
        self.eks_layers().next().and_then(EksConvLayer::fused_task)
    }

    pub fn fuse(&mut self, t: usize) -> Result<()> {
        for l in self.eks_layers_mut() {
            l.fuse(t)?;
        }
        Ok(())
    }

    pub fn unfuse(&mut self) -> Result<()> {
        for l in self.eks_layers_mut() {
            l.unfuse()?;
        }
        Ok(())
    }

    pub fn switch(&mut self, t: usize) -> Result<()> {
        for l in self.eks_layers_mut() {
            l.switch(t)?;
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape, mode: BindMode) -> StudentVars {
        let grad = mode != BindMode::Inference;
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                StudentLayer::Eks(e) => LayerVars::Eks(match mode {
                    BindMode::Train => e.bind(tape),
                    BindMode::FrozenExperts => e.bind_frozen_experts(tape),
                    BindMode::Inference => EksVars {
                        w0: tape.constant(e.w0.clone()),
                        experts: e
                            .experts
                            .iter()
                            .map(|x| {
                                (
                                    tape.constant(x.b_factor.clone()),
                                    tape.constant(x.a_factor.clone()),
                                )
                            })
                            .collect(),
                    },
                }),
                StudentLayer::Plain(p) => LayerVars::Plain(bind_tensor(tape, &p.weight, grad)),
            })
            .collect();
        let projection = self.projection.as_ref().map(|p| bind_tensor(tape, p, grad));
        let heads = self
            .heads
            .iter()
            .map(|h| HeadVars {
                weight: bind_tensor(tape, &h.weight, grad),
                bias: bind_tensor(tape, &h.bias, grad),
            })
            .collect();
        StudentVars {
            layers,
            projection,
            heads,
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = Vec::new();
        for l in &self.layers {
            match l {
                StudentLayer::Eks(e) => {
                    p.push(&e.w0);
                    for x in &e.experts {
                        p.push(&x.b_factor);
                        p.push(&x.a_factor);
                    }
                }
                StudentLayer::Plain(c) => p.push(&c.weight),
            }
        }
        p.extend(self.projection.as_ref());
        for h in &self.heads {
            p.push(&h.weight);
            p.push(&h.bias);
        }
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = Vec::new();
        for l in &mut self.layers {
            match l {
                StudentLayer::Eks(e) => {
                    p.push(&mut e.w0);
                    for x in &mut e.experts {
                        p.push(&mut x.b_factor);
                        p.push(&mut x.a_factor);
                    }
                }
                StudentLayer::Plain(c) => p.push(&mut c.weight),
            }
        }
        p.extend(self.projection.as_mut());
        for h in &mut self.heads {
            p.push(&mut h.weight);
            p.push(&mut h.bias);
        }
        p
    }

    /// Runs the backbone with every expert layer routed by the same mask.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &StudentVars,
        x: Var,
        mask: &TaskMask,
    ) -> Result<StudentOutput> {
        if let Some(t) = self.fused_task() {
            return Err(EksError::LayerFused(t));
        }
        let shape = tape.shape(x);
        let expect = [
            mask.batch_size(),
            self.arch.in_channels,
            self.arch.in_size,
            self.arch.in_size,
        ];
        if shape != expect {
            return Err(EksError::ShapeMismatch {
                op: "forward_student",
                left: shape.to_vec(),
                right: expect.to_vec(),
            });
        }
        let mut h = x;
        for (layer, lv) in self.layers.iter().zip(&vars.layers) {
            h = match (layer, lv) {
                (StudentLayer::Eks(e), LayerVars::Eks(v)) => e.forward(tape, v, h, mask)?,
                (StudentLayer::Plain(p), LayerVars::Plain(w)) => tape.conv2d(h, *w, &p.spec)?,
                _ => unreachable!("vars bound from this model"),
            };
            h = tape.relu(h)?;
        }
        let features = tape.global_avg_pool(h)?;
        let distill = match vars.projection {
            Some(p) => {
                let pt = tape.transpose(p)?;
                tape.matmul(features, pt)?
            }
            None => features,
        };
        Ok(StudentOutput { features, distill })
    }

    /// Inference: pooled features and each sample's own-task logits.
    pub fn forward_value(&self, x: &Tensor, mask: &TaskMask) -> Result<(Tensor, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, BindMode::Inference);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &vars, xv, mask)?;
        let features = tape.value(out.features).clone();
        let logits = self.head_logits(&features, mask.tasks())?;
        Ok((features, logits))
    }

    /// Logits of each row of `features` under the head of its task.
    pub fn head_logits(&self, features: &Tensor, tasks: &[usize]) -> Result<Vec<Vec<f64>>> {
        let d = self.arch.feature_dim();
        tasks
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let row = Tensor::new(vec![1, d], features.data()[i * d..(i + 1) * d].to_vec())?;
                Ok(self.heads[t].logits_value(&row)?.into_data())
            })
            .collect()
    }

    /// Fuses every expert layer for task `t` and keeps only what inference
    /// on task `t` needs: plain kernels and head `t`.
    pub fn export_expert(&self, t: usize) -> Result<PlainNet> {
        if t >= self.num_tasks() {
            return Err(EksError::TaskOutOfRange {
                task: t,
                count: self.num_tasks(),
            });
        }
        let mut fused = self.clone();
        if fused.fused_task().is_some() {
            fused.unfuse()?;
        }
        fused.fuse(t)?;
        let convs = fused
            .layers
            .into_iter()
            .map(|l| match l {
                StudentLayer::Eks(e) => PlainConv {
                    spec: e.spec,
                    weight: e.w0,
                    bias: None,
                },
                StudentLayer::Plain(p) => p,
            })
            .collect();
        Ok(PlainNet {
            convs,
            head: self.heads[t].clone(),
        })
    }

    pub fn cost_report(&self, batch_size: usize) -> Result<CostReport> {
        let t = self.num_tasks();
        let mut shared = 0;
        let mut experts = 0;
        let mut conv_flops_total = 0;
        let mut expert_flops = 0;
        let mut size = self.arch.in_size;
        for l in &self.layers {
            let spec = l.spec();
            match l {
                StudentLayer::Eks(e) => {
                    let c = eks_param_count(spec, t, e.rank());
                    shared += c.shared;
                    experts += c.expert_total;
                    let (r, k) = (e.rank(), spec.k);
                    // T factor products plus the mask-weighted aggregation.
                    let factor = 2 * t * (spec.c_out * k) * (r * k) * (spec.c_in * k);
                    let aggregate = 2 * batch_size * t * spec.weight_count();
                    expert_flops += (factor + aggregate) as u64;
                }
                StudentLayer::Plain(p) => shared += p.weight.numel(),
            }
            conv_flops_total += conv_flops(spec, size, size)?;
            size = spec.output_size(size, size)?.0;
        }
        let d = self.arch.feature_dim();
        let projection = self.projection.as_ref().map_or(0, Tensor::numel);
        let heads: usize = self.heads.iter().map(TaskHead::param_count).sum();
        let mean_head_flops = self
            .heads
            .iter()
            .map(|h| 2 * h.weight.numel() as u64)
            .sum::<u64>()
            / t as u64;
        let deploy = self.export_expert(0)?.flops_per_sample(self.arch.in_size)?;
        let baseline = {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
            PlainNet::baseline(&self.arch, 0, &mut rng)?.flops_per_sample(self.arch.in_size)?
        };
        Ok(CostReport {
            shared_params: shared,
            expert_params: experts,
            head_params: heads,
            projection_params: projection,
            train_params: shared + experts,
            deploy_params: shared,
            train_flops_per_sample: conv_flops_total
                + mean_head_flops
                + 2 * (projection as u64)
                + expert_flops / batch_size.max(1) as u64,
            deploy_flops_per_sample: deploy,
            baseline_flops_per_sample: baseline,
            feature_dim: d,
        })
    }
}

/// Parameter and FLOP accounting for one student.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostReport {
    /// Backbone kernels shared by all tasks.
    pub shared_params: usize,
    pub expert_params: usize,
    pub head_params: usize,
    pub projection_params: usize,
    /// Backbone parameters while training: shared plus every expert.
    pub train_params: usize,
    /// Backbone parameters after fusion.
    pub deploy_params: usize,
    pub train_flops_per_sample: u64,
    /// FLOPs of an exported task-0 expert, convs plus head.
    pub deploy_flops_per_sample: u64,
    /// FLOPs of a plain network of the same architecture with a task-0 head.
    pub baseline_flops_per_sample: u64,
    pub feature_dim: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use rand_chacha::ChaCha8Rng;

    fn small_arch(tasks: Vec<usize>) -> ArchConfig {
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
                    c_out: 6,
                    k: 1,
                    stride: 1,
                    eks: false,
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

    fn randomize_experts(model: &mut DecompModel, rng: &mut ChaCha8Rng) {
        for l in &mut model.layers {
            if let StudentLayer::Eks(e) = l {
                for x in &mut e.experts {
                    x.b_factor = Tensor::uniform(x.b_factor.shape(), -0.3, 0.3, rng);
                }
            }
        }
    }

    #[test]
    fn arch_text_roundtrip() {
        let arch = small_arch(vec![3, 2]);
        let text = arch.to_text();
        assert_eq!(ArchConfig::from_text(&text).unwrap(), arch);
        assert!(text.contains("stages=4:3:2:eks,6:1:1:plain,8:3:2:eks"));
    }

    #[test]
    fn arch_validation() {
        let mut arch = small_arch(vec![3, 2]);
        arch.stages.iter_mut().for_each(|s| s.eks = false);
        assert!(arch.validate().is_err());
        let mut arch = small_arch(vec![3, 1]);
        assert!(arch.validate().is_err());
        arch.tasks = vec![2];
        arch.projection = false;
        assert!(arch.validate().is_err());
        arch.teacher_width = 1;
        assert!(arch.validate().is_ok());
    }

    #[test]
    fn desk_default_clamps_first_layer_rank() {
        let arch = ArchConfig::desk_default(vec![4; 4], 8);
        arch.validate().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = DecompModel::init(&arch, &mut rng).unwrap();
        let ranks: Vec<usize> = model.eks_layers().map(EksConvLayer::rank).collect();
        assert_eq!(ranks, vec![1, 8, 8, 8]);
        assert_eq!(arch.feature_dim(), 128);
        assert_eq!(arch.teacher_feature_dim(), 256);
        assert_eq!(arch.stage_sizes(), vec![16, 8, 4, 2, 1]);
    }

    #[test]
    fn zero_experts_make_features_mask_independent() {
        let arch = small_arch(vec![2, 3, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = DecompModel::init(&arch, &mut rng).unwrap();
        let x = Tensor::uniform(&[4, 1, 8, 8], -1.0, 1.0, &mut rng);
        let f = |tasks: &[usize]| {
            model
                .forward_value(&x, &TaskMask::from_tasks(tasks, 3).unwrap())
                .unwrap()
                .0
        };
        assert_eq!(f(&[0, 0, 0, 0]), f(&[2, 1, 0, 2]));
    }

    #[test]
    fn student_matches_layer_by_layer_chain() {
        let arch = small_arch(vec![2, 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut model = DecompModel::init(&arch, &mut rng).unwrap();
        randomize_experts(&mut model, &mut rng);
        let x = Tensor::uniform(&[3, 1, 8, 8], -1.0, 1.0, &mut rng);
        let tasks = [1, 0, 1];
        let (features, logits) = model
            .forward_value(&x, &TaskMask::from_tasks(&tasks, 2).unwrap())
            .unwrap();

        for (i, &t) in tasks.iter().enumerate() {
            let mut h =
                Tensor::new(vec![1, 1, 8, 8], x.data()[i * 64..(i + 1) * 64].to_vec()).unwrap();
            for layer in &model.layers {
                let (w, spec) = match layer {
                    StudentLayer::Eks(e) => (e.task_weight(t).unwrap(), e.spec),
                    StudentLayer::Plain(p) => (p.weight.clone(), p.spec),
                };
                h = oracle::conv2d_direct(&h, &w, &spec);
                h.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
            }
            let c = h.shape()[1];
            let plane = h.shape()[2] * h.shape()[3];
            for ch in 0..c {
                let mean =
                    h.data()[ch * plane..(ch + 1) * plane].iter().sum::<f64>() / plane as f64;
                assert!((features.at(&[i, ch]) - mean).abs() < 1e-12);
            }
            let head = &model.heads[t];
            for (cls, &z) in logits[i].iter().enumerate() {
                let want: f64 = (0..c)
                    .map(|j| head.weight.at(&[cls, j]) * features.at(&[i, j]))
                    .sum::<f64>()
                    + head.bias.data()[cls];
                assert!((z - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_task_student_is_plain_cnn() {
        let mut arch = small_arch(vec![3]);
        arch.stages.iter_mut().for_each(|s| s.eks = true);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut model = DecompModel::init(&arch, &mut rng).unwrap();
        randomize_experts(&mut model, &mut rng);
        let x = Tensor::uniform(&[2, 1, 8, 8], -1.0, 1.0, &mut rng);
        let (_, logits) = model
            .forward_value(&x, &TaskMask::from_tasks(&[0, 0], 1).unwrap())
            .unwrap();
        let plain = model.export_expert(0).unwrap();
        let (_, z) = plain.forward_value(&x).unwrap();
        for (i, row) in logits.iter().enumerate() {
            for (j, l) in row.iter().enumerate() {
                assert!((z.at(&[i, j]) - l).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn exported_expert_reproduces_student_logits() {
        let arch = small_arch(vec![2, 3, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut model = DecompModel::init(&arch, &mut rng).unwrap();
        randomize_experts(&mut model, &mut rng);
        for t in 0..3 {
            let expert = model.export_expert(t).unwrap();
            let x = Tensor::uniform(&[5, 1, 8, 8], -1.0, 1.0, &mut rng);
            let (_, want) = model
                .forward_value(&x, &TaskMask::from_tasks(&[t; 5], 3).unwrap())
                .unwrap();
            let (_, got) = expert.forward_value(&x).unwrap();
            for (i, row) in want.iter().enumerate() {
                for (j, w) in row.iter().enumerate() {
                    assert!((got.at(&[i, j]) - w).abs() < 1e-10);
                }
            }
            let mut base_rng = ChaCha8Rng::seed_from_u64(99);
            let baseline = PlainNet::baseline(&arch, t, &mut base_rng).unwrap();
            assert_eq!(expert.param_count(), baseline.param_count());
            assert_eq!(
                expert.flops_per_sample(8).unwrap(),
                baseline.flops_per_sample(8).unwrap()
            );
        }
        assert!(model.export_expert(3).is_err());
    }

    #[test]
    fn exports_differ_only_in_kernels_and_head() {
        let mut arch = small_arch(vec![2, 2]);
        arch.stages[1].eks = false;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut model = DecompModel::init(&arch, &mut rng).unwrap();
        randomize_experts(&mut model, &mut rng);
        let (a, b) = (
            model.export_expert(0).unwrap(),
            model.export_expert(1).unwrap(),
        );
        assert_eq!(a.convs[1], b.convs[1]);
        assert_ne!(a.convs[0].weight, b.convs[0].weight);
        assert_ne!(a.head, b.head);
    }

    #[test]
    fn forward_rejects_bad_input_shape() {
        let arch = small_arch(vec![2, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model = DecompModel::init(&arch, &mut rng).unwrap();
        let x = Tensor::zeros(&[2, 1, 7, 8]);
        assert!(model
            .forward_value(&x, &TaskMask::from_tasks(&[0, 1], 2).unwrap())
            .is_err());
    }

    #[test]
    fn cost_report_is_consistent() {
        let arch = ArchConfig::desk_default(vec![4; 4], 8);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = DecompModel::init(&arch, &mut rng).unwrap();
        let report = model.cost_report(32).unwrap();
        let expected_experts: usize = model
            .eks_layers()
            .map(|l| eks_param_count(&l.spec, 4, l.rank()).expert_total)
            .sum();
        assert_eq!(report.expert_params, expected_experts);
        assert_eq!(report.train_params, report.shared_params + expected_experts);
        assert_eq!(
            report.deploy_flops_per_sample,
            report.baseline_flops_per_sample
        );
        assert!(report.train_flops_per_sample > report.deploy_flops_per_sample);
    }
}
