//! Checkpoint files for teachers, students and exported experts.
//!
//! Layout, little-endian:
//!
//! ```text
//! "EKSC" | version u16 | header (u32 length + UTF-8) | section count u32 | sections
//! section = name | kind u8 | [c_in c_out k stride padding groups: u32 × 6] | tensor count u32 | tensors
//! ```
//!
//! The header is the architecture's canonical text plus `kind=…`, and
//! `FUSED:<t>` when the stored weights are meant to be served for task `t`.
//! Student checkpoints always hold the unfused `W0`; the `FUSED` field only
//! records which task a deployment should fuse.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::conv::ConvSpec;
use crate::eks::{EksConvLayer, LowRankExpert};
use crate::error::{EksError, Result};
use crate::io::{write_string, write_u16, write_u32, write_u8, ByteReader};
use crate::losses::TaskHead;
use crate::model::{ArchConfig, DecompModel, PlainConv, PlainNet, StudentLayer};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"EKSC";
const VERSION: u16 = 1;

const SECTION_EKS: u8 = 0;
const SECTION_CONV: u8 = 1;
const SECTION_DENSE: u8 = 2;

#[derive(Debug, Clone, PartialEq)]
pub enum CheckpointBody {
    Teacher(PlainNet),
    Student(DecompModel),
    /// Fused plain network for one task.
    Expert(PlainNet),
}

impl CheckpointBody {
    fn kind(&self) -> &'static str {
        match self {
            CheckpointBody::Teacher(_) => "teacher",
            CheckpointBody::Student(_) => "student",
            CheckpointBody::Expert(_) => "expert",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch: ArchConfig,
    pub fused: Option<usize>,
    pub body: CheckpointBody,
}

struct Section {
    name: String,
    kind: u8,
    spec: Option<ConvSpec>,
    tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn teacher(arch: &ArchConfig, net: PlainNet) -> Self {
        Self {
            arch: arch.clone(),
            fused: None,
            body: CheckpointBody::Teacher(net),
        }
    }

    /// Stores the model unfused; a fused model is recorded with its task in `FUSED`.
    pub fn student(model: &DecompModel) -> Result<Self> {
        let fused = model.fused_task();
        let mut canonical = model.clone();
        if fused.is_some() {
            canonical.unfuse()?;
        }
        Ok(Self {
            arch: model.arch.clone(),
            fused,
            body: CheckpointBody::Student(canonical),
        })
    }

    pub fn expert(model: &DecompModel, t: usize) -> Result<Self> {
        Ok(Self {
            arch: model.arch.clone(),
            fused: Some(t),
            body: CheckpointBody::Expert(model.export_expert(t)?),
        })
    }

    pub fn header(&self) -> String {
        let mut h = format!("kind={}\n{}", self.body.kind(), self.arch.to_text());
        if let Some(t) = self.fused {
            h.push_str(&format!("FUSED:{t}\n"));
        }
        h
    }

    pub fn param_count(&self) -> usize {
        match &self.body {
            CheckpointBody::Teacher(n) | CheckpointBody::Expert(n) => n.param_count(),
            CheckpointBody::Student(m) => m.params().iter().map(|t| t.numel()).sum(),
        }
    }

    fn sections(&self) -> Vec<Section> {
        let dense = |name: String, tensors: Vec<Tensor>| Section {
            name,
            kind: SECTION_DENSE,
            spec: None,
            tensors,
        };
        let conv = |name: String, c: &PlainConv| Section {
            name,
            kind: SECTION_CONV,
            spec: Some(c.spec),
            tensors: std::iter::once(c.weight.clone())
                .chain(c.bias.clone())
                .collect(),
        };
        let head = |h: &TaskHead, name: String| dense(name, vec![h.weight.clone(), h.bias.clone()]);
        match &self.body {
            CheckpointBody::Teacher(n) | CheckpointBody::Expert(n) => {
                let mut s: Vec<Section> = n
                    .convs
                    .iter()
                    .enumerate()
                    .map(|(i, c)| conv(format!("conv{i}"), c))
                    .collect();
                s.push(head(&n.head, format!("head{}", n.head.task)));
                s
            }
            CheckpointBody::Student(m) => {
                let mut s: Vec<Section> = m
                    .layers
                    .iter()
                    .enumerate()
                    .map(|(i, l)| match l {
                        StudentLayer::Eks(e) => Section {
                            name: format!("layer{i}"),
                            kind: SECTION_EKS,
                            spec: Some(e.spec),
                            tensors: std::iter::once(e.w0.clone())
                                .chain(
                                    e.experts
                                        .iter()
                                        .flat_map(|x| [x.b_factor.clone(), x.a_factor.clone()]),
                                )
                                .collect(),
                        },
                        StudentLayer::Plain(p) => conv(format!("layer{i}"), p),
                    })
                    .collect();
                if let Some(p) = &m.projection {
                    s.push(dense("projection".into(), vec![p.clone()]));
                }
                s.extend(m.heads.iter().map(|h| head(h, format!("head{}", h.task))));
                s
            }
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        write_u16(w, VERSION)?;
        write_string(w, &self.header())?;
        let sections = self.sections();
        write_u32(w, sections.len() as u32)?;
        for s in &sections {
            write_string(w, &s.name)?;
            write_u8(w, s.kind)?;
            if let Some(spec) = s.spec {
                for v in [
                    spec.c_in,
                    spec.c_out,
                    spec.k,
                    spec.stride,
                    spec.padding,
                    spec.groups,
                ] {
                    write_u32(w, v as u32)?;
                }
            }
            write_u32(w, s.tensors.len() as u32)?;
            for t in &s.tensors {
                t.write_to(w)?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)
            .expect("writing to a Vec cannot fail");
        buf
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let ckpt = Self::read_from(&mut r)?;
        r.expect_eof()?;
        Ok(ckpt)
    }

    pub fn read_from<R: Read>(r: &mut ByteReader<R>) -> Result<Self> {
        r.expect_magic(MAGIC)?;
        let version = r.read_u16()?;
        if version != VERSION {
            return Err(r.error(format!("unsupported checkpoint version {version}")));
        }
        let header_at = r.offset();
        let header = r.read_string()?;
        let herr = |msg: String| EksError::Format {
            offset: header_at,
            msg,
        };
        let arch = ArchConfig::from_text(&header).map_err(|e| herr(e.to_string()))?;
        let kind = header
            .lines()
            .find_map(|l| l.strip_prefix("kind="))
            .ok_or_else(|| herr("header has no kind".into()))?
            .to_string();
        let fused = header
            .lines()
            .find_map(|l| l.strip_prefix("FUSED:"))
            .map(|t| {
                t.trim()
                    .parse::<usize>()
                    .map_err(|_| herr(format!("bad FUSED field {t}")))
            })
            .transpose()?;
        if let Some(t) = fused {
            if t >= arch.num_tasks() {
                return Err(herr(format!(
                    "FUSED:{t} out of range for {} tasks",
                    arch.num_tasks()
                )));
            }
        }

        let count = r.read_u32()? as usize;
        let mut sections = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name = r.read_string()?;
            let kind = r.read_u8()?;
            let spec = match kind {
                SECTION_EKS | SECTION_CONV => {
                    let mut f = [0usize; 6];
                    for v in &mut f {
                        *v = r.read_u32()? as usize;
                    }
                    let spec = ConvSpec {
                        c_in: f[0],
                        c_out: f[1],
                        k: f[2],
                        stride: f[3],
                        padding: f[4],
                        groups: f[5],
                    };
                    spec.validate()
                        .map_err(|e| r.error(format!("section {name}: {e}")))?;
                    Some(spec)
                }
                SECTION_DENSE => None,
                other => return Err(r.error(format!("unknown section kind {other}"))),
            };
            let n = r.read_u32()? as usize;
            let tensors = (0..n)
                .map(|_| Tensor::read_from(r))
                .collect::<Result<Vec<_>>>()?;
            sections.push(Section {
                name,
                kind,
                spec,
                tensors,
            });
        }
        let at = r.offset();
        let body = (|| -> Result<CheckpointBody> {
            Ok(match kind.as_str() {
                "teacher" => CheckpointBody::Teacher(plain_from_sections(&arch, sections, true)?),
                "expert" => {
                    let t =
                        fused.ok_or_else(|| invalid("expert checkpoint without FUSED field"))?;
                    let net = plain_from_sections(&arch, sections, false)?;
                    if net.head.task != t {
                        return Err(invalid(format!(
                            "expert head is for task {}, header says {t}",
                            net.head.task
                        )));
                    }
                    CheckpointBody::Expert(net)
                }
                "student" => CheckpointBody::Student(student_from_sections(&arch, sections)?),
                other => return Err(invalid(format!("unknown checkpoint kind {other}"))),
            })
        })()
        .map_err(|e| match e {
            EksError::Format { .. } => e,
            other => EksError::Format {
                offset: at,
                msg: other.to_string(),
            },
        })?;
        Ok(Self { arch, fused, body })
    }
}

fn invalid(msg: impl Into<String>) -> EksError {
    EksError::InvalidConfig(msg.into())
}

fn expect_spec(section: &Section, want: &ConvSpec) -> Result<()> {
    if section.spec.as_ref() != Some(want) {
        return Err(invalid(format!(
            "section {} has spec {:?}, architecture needs {want:?}",
            section.name, section.spec
        )));
    }
    Ok(())
}

fn head_from(section: Section, classes: usize, dim: usize) -> Result<TaskHead> {
    let task = section
        .name
        .strip_prefix("head")
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| invalid(format!("unexpected section {}", section.name)))?;
    let [weight, bias]: [Tensor; 2] = section
        .tensors
        .try_into()
        .map_err(|_| invalid("head sections hold a weight and a bias"))?;
    if weight.shape() != [classes, dim] || bias.shape() != [classes] {
        return Err(invalid(format!(
            "head {task} has shape {:?}",
            weight.shape()
        )));
    }
    Ok(TaskHead { weight, bias, task })
}

fn plain_from_sections(
    arch: &ArchConfig,
    mut sections: Vec<Section>,
    teacher: bool,
) -> Result<PlainNet> {
    let specs = if teacher {
        arch.teacher_specs()
    } else {
        arch.student_specs()
    };
    if sections.len() != specs.len() + 1 {
        return Err(invalid(format!(
            "expected {} sections, found {}",
            specs.len() + 1,
            sections.len()
        )));
    }
    let head_section = sections.pop().unwrap();
    let convs = sections
        .into_iter()
        .zip(&specs)
        .map(|(s, spec)| {
            expect_spec(&s, spec)?;
            let mut it = s.tensors.into_iter();
            let weight = it
                .next()
                .ok_or_else(|| invalid("conv section without weight"))?;
            let bias = it.next();
            if it.next().is_some() || weight.shape() != spec.weight_shape() {
                return Err(invalid("malformed conv section"));
            }
            if bias.as_ref().is_some_and(|b| b.shape() != [spec.c_out]) {
                return Err(invalid("conv bias has the wrong shape"));
            }
            Ok(PlainConv {
                spec: *spec,
                weight,
                bias,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (classes, dim) = if teacher {
        (arch.total_classes(), arch.teacher_feature_dim())
    } else {
        let t: usize = head_section
            .name
            .strip_prefix("head")
            .and_then(|t| t.parse().ok())
            .unwrap_or(usize::MAX);
        let classes = *arch
            .tasks
            .get(t)
            .ok_or_else(|| invalid(format!("bad head section {}", head_section.name)))?;
        (classes, arch.feature_dim())
    };
    Ok(PlainNet {
        convs,
        head: head_from(head_section, classes, dim)?,
    })
}

fn student_from_sections(arch: &ArchConfig, sections: Vec<Section>) -> Result<DecompModel> {
    let specs = arch.student_specs();
    let t = arch.num_tasks();
    let expected = specs.len() + usize::from(arch.projection) + t;
    if sections.len() != expected {
        return Err(invalid(format!(
            "expected {expected} sections, found {}",
            sections.len()
        )));
    }
    let mut it = sections.into_iter();
    let mut layers = Vec::with_capacity(specs.len());
    for (spec, stage) in specs.iter().zip(&arch.stages) {
        let s = it.next().unwrap();
        expect_spec(&s, spec)?;
        if stage.eks {
            if s.kind != SECTION_EKS || s.tensors.len() != 1 + 2 * t {
                return Err(invalid(format!(
                    "section {} is not an expert layer for {t} tasks",
                    s.name
                )));
            }
            let rank = arch.layer_rank(spec);
            let mut tensors = s.tensors.into_iter();
            let w0 = tensors.next().unwrap();
            let experts = (0..t)
                .map(|_| {
                    LowRankExpert::new(tensors.next().unwrap(), tensors.next().unwrap(), rank, spec)
                })
                .collect::<Result<Vec<_>>>()?;
            layers.push(StudentLayer::Eks(EksConvLayer::new(w0, experts, *spec)?));
        } else {
            let [weight]: [Tensor; 1] = s
                .tensors
                .try_into()
                .map_err(|_| invalid("plain student layers hold one tensor"))?;
            if weight.shape() != spec.weight_shape() {
                return Err(invalid("plain layer weight has the wrong shape"));
            }
            layers.push(StudentLayer::Plain(PlainConv {
                spec: *spec,
                weight,
                bias: None,
            }));
        }
    }
    let projection = if arch.projection {
        let s = it.next().unwrap();
        let [p]: [Tensor; 1] = s
            .tensors
            .try_into()
            .map_err(|_| invalid("projection holds one tensor"))?;
        if p.shape() != [arch.teacher_feature_dim(), arch.feature_dim()] {
            return Err(invalid("projection has the wrong shape"));
        }
        Some(p)
    } else {
        None
    };
    let heads = arch
        .tasks
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let h = head_from(it.next().unwrap(), y, arch.feature_dim())?;
            if h.task != i {
                return Err(invalid(format!(
                    "head {} found where head {i} was expected",
                    h.task
                )));
            }
            Ok(h)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DecompModel {
        arch: arch.clone(),
        layers,
        projection,
        heads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::StageConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn arch() -> ArchConfig {
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
                    c_out: 4,
                    k: 1,
                    stride: 1,
                    eks: false,
                },
                StageConfig {
                    c_out: 6,
                    k: 3,
                    stride: 2,
                    eks: true,
                },
            ],
            tasks: vec![2, 3, 2],
            rank: 2,
            teacher_width: 2,
            projection: true,
        }
    }

    fn student(seed: u64) -> DecompModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = DecompModel::init(&arch(), &mut rng).unwrap();
        for l in &mut m.layers {
            if let StudentLayer::Eks(e) = l {
                for x in &mut e.experts {
                    x.b_factor = Tensor::uniform(x.b_factor.shape(), -0.2, 0.2, &mut rng);
                }
            }
        }
        m
    }

    #[test]
    fn student_roundtrip() {
        let m = student(0);
        let c = Checkpoint::student(&m).unwrap();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        assert!(!c.header().contains("FUSED"));
    }

    #[test]
    fn fused_student_is_stored_unfused() {
        let mut m = student(1);
        m.fuse(2).unwrap();
        let c = Checkpoint::student(&m).unwrap();
        assert!(c.header().contains("FUSED:2\n"));
        let CheckpointBody::Student(stored) = &c.body else {
            panic!()
        };
        assert_eq!(stored.fused_task(), None);
        let original = student(1);
        for (a, b) in stored.eks_layers().zip(original.eks_layers()) {
            assert!(a.w0.max_abs_diff(&b.w0) < 1e-12);
        }
    }

    #[test]
    fn teacher_and_expert_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let teacher = PlainNet::init_teacher(&arch(), &mut rng).unwrap();
        let c = Checkpoint::teacher(&arch(), teacher);
        assert_eq!(Checkpoint::from_bytes(&c.to_bytes()).unwrap(), c);

        let m = student(3);
        let e = Checkpoint::expert(&m, 1).unwrap();
        assert!(e.header().contains("kind=expert\n"));
        assert!(e.header().ends_with("FUSED:1\n"));
        assert_eq!(Checkpoint::from_bytes(&e.to_bytes()).unwrap(), e);
        let mut base_rng = ChaCha8Rng::seed_from_u64(4);
        assert_eq!(
            e.param_count(),
            PlainNet::baseline(&arch(), 1, &mut base_rng)
                .unwrap()
                .param_count()
        );
    }

    #[test]
    fn serialization_is_deterministic() {
        assert_eq!(
            Checkpoint::student(&student(5)).unwrap().to_bytes(),
            Checkpoint::student(&student(5)).unwrap().to_bytes()
        );
    }

    #[test]
    fn truncation_and_corruption_are_reported() {
        let bytes = Checkpoint::student(&student(6)).unwrap().to_bytes();
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            match Checkpoint::from_bytes(&bytes[..cut]) {
                Err(EksError::Format { offset, .. }) => assert!(offset as usize <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn mismatched_sections_are_rejected() {
        let m = student(7);
        let c = Checkpoint::student(&m).unwrap();
        let mut wrong = c.clone();
        wrong.arch.tasks = vec![2, 3];
        // Header now claims two tasks while the sections carry three.
        assert!(Checkpoint::from_bytes(&wrong.to_bytes()).is_err());
    }
}
