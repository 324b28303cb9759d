//! Seeded synthetic multi-task image sets.
//!
//! Every task draws single-channel images from one generator family. Each
//! class has a fixed prototype image; samples are the prototype plus i.i.d.
//! Gaussian pixel noise. Tasks that share a family differ only by a per-task
//! phase, so putting several tasks on one family yields correlated tasks.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{EksError, Result};
use crate::io::{write_f64, write_u16, write_u32, write_u64, write_u8, ByteReader};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"EKSD";
const VERSION: u16 = 1;

/// Fraction of each task's samples that go to the training split.
pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    /// Sinusoidal bars; the class sets the orientation.
    OrientedBars,
    /// A single Gaussian bump; the class sets its position on a ring.
    GaussianBlobs,
    /// Separable checkerboard; the class sets the spatial frequency.
    CheckerFrequency,
}

impl Family {
    pub const ALL: [Family; 3] = [
        Family::OrientedBars,
        Family::GaussianBlobs,
        Family::CheckerFrequency,
    ];

    fn tag(self) -> u8 {
        match self {
            Family::OrientedBars => 0,
            Family::GaussianBlobs => 1,
            Family::CheckerFrequency => 2,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.tag() == tag)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::OrientedBars => "oriented-bars",
            Family::GaussianBlobs => "gaussian-blobs",
            Family::CheckerFrequency => "checker-frequency",
        })
    }
}

impl std::str::FromStr for Family {
    type Err = EksError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.to_string() == s)
            .ok_or_else(|| EksError::InvalidArgument(format!("unknown generator family {s}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub id: usize,
    pub classes: usize,
    pub family: Family,
    pub sigma: f64,
    pub samples_per_class: usize,
}

impl TaskSpec {
    /// `count` tasks cycling through the families, so ids 0, 1, 2 are all different.
    pub fn diverse(
        count: usize,
        classes: usize,
        sigma: f64,
        samples_per_class: usize,
    ) -> Vec<TaskSpec> {
        (0..count)
            .map(|id| TaskSpec {
                id,
                classes,
                family: Family::ALL[id % Family::ALL.len()],
                sigma,
                samples_per_class,
            })
            .collect()
    }

    /// `count` tasks on one family.
    pub fn correlated(
        count: usize,
        family: Family,
        classes: usize,
        sigma: f64,
        samples_per_class: usize,
    ) -> Vec<TaskSpec> {
        (0..count)
            .map(|id| TaskSpec {
                id,
                classes,
                family,
                sigma,
                samples_per_class,
            })
            .collect()
    }
}

/// Prototype image (`size × size`, row-major) for one class of one task.
pub fn prototype(spec: &TaskSpec, class: usize, size: usize) -> Vec<f64> {
    use std::f64::consts::PI;
    let n = size as f64;
    let centre = (n - 1.0) / 2.0;
    let phase = 0.7 * spec.id as f64;
    let y_t = spec.classes as f64;
    let c = class as f64;
    let mut img = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let (y, x) = (i as f64 - centre, j as f64 - centre);
            let v = match spec.family {
                Family::OrientedBars => {
                    let theta = PI * c / y_t + phase / 3.0;
                    let u = x * theta.cos() + y * theta.sin();
                    (2.0 * PI * u / 4.0 + phase).cos()
                }
                Family::GaussianBlobs => {
                    let a = 2.0 * PI * c / y_t + phase;
                    let r = n / 4.0;
                    let (cy, cx) = (r * a.sin(), r * a.cos());
                    let d2 = (y - cy).powi(2) + (x - cx).powi(2);
                    2.0 * (-d2 / (2.0 * (n / 8.0).powi(2))).exp() - 0.5
                }
                Family::CheckerFrequency => {
                    let f = (c + 1.0) / (2.0 * (y_t + 1.0));
                    (2.0 * PI * f * x + phase).cos() * (2.0 * PI * f * y + phase).cos()
                }
            };
            img.push(v);
        }
    }
    img
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[1, size, size]`
    pub image: Tensor,
    pub task: usize,
    pub within_label: usize,
    pub global_label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub size: usize,
    pub tasks: Vec<TaskSpec>,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

fn validate_specs(specs: &[TaskSpec], size: usize) -> Result<()> {
    if specs.is_empty() {
        return Err(EksError::InvalidArgument(
            "at least one task is required".into(),
        ));
    }
    if size == 0 {
        return Err(EksError::InvalidArgument(
            "image size must be positive".into(),
        ));
    }
    for (i, s) in specs.iter().enumerate() {
        if s.id != i {
            return Err(EksError::InvalidArgument(format!(
                "task at position {i} has id {}",
                s.id
            )));
        }
        if s.classes < 2 {
            return Err(EksError::InvalidArgument(format!(
                "task {i} needs at least two classes"
            )));
        }
        if s.samples_per_class == 0 {
            return Err(EksError::InvalidArgument(format!(
                "task {i} has no samples"
            )));
        }
        if !(s.sigma.is_finite() && s.sigma >= 0.0) {
            return Err(EksError::InvalidArgument(format!(
                "task {i} has invalid sigma {}",
                s.sigma
            )));
        }
        let protos: Vec<Vec<f64>> = (0..s.classes).map(|c| prototype(s, c, size)).collect();
        for a in 0..s.classes {
            for b in a + 1..s.classes {
                let d = l2(&protos[a], &protos[b]);
                if d <= 4.0 * s.sigma {
                    return Err(EksError::InvalidArgument(format!(
                        "task {i}: prototypes {a} and {b} are {d:.4} apart, need more than 4·sigma = {:.4}",
                        4.0 * s.sigma
                    )));
                }
            }
        }
    }
    Ok(())
}

impl Dataset {
    /// Generates `size × size` images; each task is split 80/20 and both
    /// splits are shuffled, all from `seed`.
    pub fn generate(specs: &[TaskSpec], size: usize, seed: u64) -> Result<Self> {
        validate_specs(specs, size)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut train = Vec::new();
        let mut val = Vec::new();
        let mut offset = 0;
        for s in specs {
            let noise =
                Normal::new(0.0, s.sigma).map_err(|e| EksError::InvalidArgument(e.to_string()))?;
            let mut samples = Vec::with_capacity(s.classes * s.samples_per_class);
            for c in 0..s.classes {
                let proto = prototype(s, c, size);
                for _ in 0..s.samples_per_class {
                    let data = proto.iter().map(|&p| p + noise.sample(&mut rng)).collect();
                    samples.push(Sample {
                        image: Tensor::new(vec![1, size, size], data)?,
                        task: s.id,
                        within_label: c,
                        global_label: offset + c,
                    });
                }
            }
            samples.shuffle(&mut rng);
            let n_train = (samples.len() as f64 * TRAIN_FRACTION).floor() as usize;
            val.extend(samples.split_off(n_train));
            train.extend(samples);
            offset += s.classes;
        }
        train.shuffle(&mut rng);
        val.shuffle(&mut rng);
        Ok(Self {
            size,
            tasks: specs.to_vec(),
            train,
            val,
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.tasks.iter().map(|t| t.classes).collect()
    }

    /// Cumulative class count before task `t`.
    pub fn label_offset(&self, t: usize) -> usize {
        self.tasks[..t].iter().map(|s| s.classes).sum()
    }

    /// Stacks samples into `[B, 1, size, size]` plus task ids and within-task labels.
    pub fn batch(samples: &[&Sample]) -> Result<(Tensor, Vec<usize>, Vec<usize>)> {
        let first = samples
            .first()
            .ok_or_else(|| EksError::InvalidArgument("empty batch".into()))?;
        let shape = first.image.shape().to_vec();
        let mut data = Vec::with_capacity(samples.len() * first.image.numel());
        for s in samples {
            if s.image.shape() != shape.as_slice() {
                return Err(EksError::ShapeMismatch {
                    op: "batch",
                    left: s.image.shape().to_vec(),
                    right: shape,
                });
            }
            data.extend_from_slice(s.image.data());
        }
        let mut full = vec![samples.len()];
        full.extend(&shape);
        Ok((
            Tensor::new(full, data)?,
            samples.iter().map(|s| s.task).collect(),
            samples.iter().map(|s| s.within_label).collect(),
        ))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        write_u16(w, VERSION)?;
        write_u32(w, self.size as u32)?;
        write_u32(w, self.tasks.len() as u32)?;
        for t in &self.tasks {
            write_u32(w, t.id as u32)?;
            write_u32(w, t.classes as u32)?;
            write_u8(w, t.family.tag())?;
            write_f64(w, t.sigma)?;
            write_u32(w, t.samples_per_class as u32)?;
        }
        let all: Vec<(u8, &Sample)> = self
            .train
            .iter()
            .map(|s| (0, s))
            .chain(self.val.iter().map(|s| (1, s)))
            .collect();
        write_u64(w, all.len() as u64)?;
        let mut payload = Vec::new();
        for (split, s) in &all {
            write_u8(w, *split)?;
            write_u32(w, s.task as u32)?;
            write_u32(w, s.within_label as u32)?;
            write_u64(w, payload.len() as u64)?;
            s.image.write_to(&mut payload)?;
        }
        w.write_all(&payload)?;
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
        let ds = Self::read_from(&mut r)?;
        r.expect_eof()?;
        Ok(ds)
    }

    pub fn read_from<R: Read>(r: &mut ByteReader<R>) -> Result<Self> {
        r.expect_magic(MAGIC)?;
        let version = r.read_u16()?;
        if version != VERSION {
            return Err(r.error(format!("unsupported dataset version {version}")));
        }
        let size = r.read_u32()? as usize;
        let n_tasks = r.read_u32()? as usize;
        if n_tasks == 0 {
            return Err(r.error("dataset has no tasks"));
        }
        let mut tasks = Vec::with_capacity(n_tasks.min(1024));
        for _ in 0..n_tasks {
            let id = r.read_u32()? as usize;
            let classes = r.read_u32()? as usize;
            let tag = r.read_u8()?;
            let family = Family::from_tag(tag)
                .ok_or_else(|| r.error(format!("unknown family tag {tag}")))?;
            tasks.push(TaskSpec {
                id,
                classes,
                family,
                sigma: r.read_f64()?,
                samples_per_class: r.read_u32()? as usize,
            });
        }
        if let Some((i, t)) = tasks
            .iter()
            .enumerate()
            .find(|(i, t)| t.id != *i || t.classes < 2)
        {
            return Err(r.error(format!(
                "task entry {i} (id {}, {} classes) is malformed",
                t.id, t.classes
            )));
        }
        let offsets: Vec<usize> = tasks
            .iter()
            .scan(0, |acc, t| {
                let o = *acc;
                *acc += t.classes;
                Some(o)
            })
            .collect();

        let count = r.read_u64()? as usize;
        let mut index = Vec::with_capacity(count.min(1 << 20));
        let mut per_task = vec![0usize; n_tasks];
        for _ in 0..count {
            let at = r.offset();
            let split = r.read_u8()?;
            let task = r.read_u32()? as usize;
            let label = r.read_u32()? as usize;
            let offset = r.read_u64()?;
            if split > 1 || task >= n_tasks || label >= tasks[task].classes {
                return Err(EksError::Format {
                    offset: at,
                    msg: format!("bad index entry (split {split}, task {task}, label {label})"),
                });
            }
            per_task[task] += 1;
            index.push((split, task, label, offset));
        }
        if let Some(t) = per_task.iter().position(|&n| n == 0) {
            return Err(r.error(format!("task {t} has no samples")));
        }

        let payload_start = r.offset();
        let mut train = Vec::new();
        let mut val = Vec::new();
        for (split, task, label, offset) in index {
            if r.offset() - payload_start != offset {
                return Err(r.error(format!(
                    "index offset {offset} does not match payload position"
                )));
            }
            let image = Tensor::read_from(r)?;
            if image.shape() != [1, size, size] {
                return Err(r.error(format!("image has shape {:?}", image.shape())));
            }
            let s = Sample {
                image,
                task,
                within_label: label,
                global_label: offsets[task] + label,
            };
            if split == 0 {
                train.push(s)
            } else {
                val.push(s)
            }
        }
        Ok(Self {
            size,
            tasks,
            train,
            val,
        })
    }

    /// One row per sample: split, task, within-task label, global label and
    /// payload offset as written by [`Dataset::write_to`].
    pub fn index_csv(&self) -> String {
        let mut out = String::from("split,task,within_label,global_label,offset\n");
        let mut offset = 0u64;
        for (split, samples) in [("train", &self.train), ("val", &self.val)] {
            for s in samples.iter() {
                out.push_str(&format!(
                    "{split},{},{},{},{offset}\n",
                    s.task, s.within_label, s.global_label
                ));
                offset += 4 + 2 + 1 + 2 + 8 * s.image.rank() as u64 + 8 * s.image.numel() as u64;
            }
        }
        out
    }
}

/// Softmax regression on raw pixels for one task, trained on the train split
/// by full-batch gradient descent; returns validation accuracy.
pub fn linear_probe_accuracy(ds: &Dataset, task: usize, iterations: usize, lr: f64) -> Result<f64> {
    let spec = ds.tasks.get(task).ok_or(EksError::TaskOutOfRange {
        task,
        count: ds.num_tasks(),
    })?;
    let y = spec.classes;
    let train: Vec<&Sample> = ds.train.iter().filter(|s| s.task == task).collect();
    let val: Vec<&Sample> = ds.val.iter().filter(|s| s.task == task).collect();
    if train.is_empty() || val.is_empty() {
        return Err(EksError::InvalidArgument(format!(
            "task {task} has an empty split"
        )));
    }
    let p = ds.size * ds.size + 1;
    let feat = |s: &Sample| {
        s.image
            .data()
            .iter()
            .copied()
            .chain(std::iter::once(1.0))
            .collect::<Vec<f64>>()
    };
    let xs: Vec<Vec<f64>> = train.iter().map(|s| feat(s)).collect();
    let mut w = vec![0.0; y * p];
    let mut grad = vec![0.0; y * p];
    let mut logits = vec![0.0; y];
    for _ in 0..iterations {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for (x, s) in xs.iter().zip(&train) {
            for (c, z) in logits.iter_mut().enumerate() {
                *z = w[c * p..(c + 1) * p]
                    .iter()
                    .zip(x)
                    .map(|(a, b)| a * b)
                    .sum();
            }
            let probs = crate::losses::temp_softmax(&logits, 1.0)?;
            for c in 0..y {
                let err = probs[c] - f64::from(u8::from(c == s.within_label));
                for (g, xv) in grad[c * p..(c + 1) * p].iter_mut().zip(x) {
                    *g += err * xv;
                }
            }
        }
        let scale = lr / train.len() as f64;
        w.iter_mut().zip(&grad).for_each(|(wv, g)| *wv -= scale * g);
    }
    let correct = val
        .iter()
        .filter(|s| {
            let x = feat(s);
            let z: Vec<f64> = (0..y)
                .map(|c| {
                    w[c * p..(c + 1) * p]
                        .iter()
                        .zip(&x)
                        .map(|(a, b)| a * b)
                        .sum()
                })
                .collect();
            crate::losses::argmax(&z) == s.within_label
        })
        .count();
    Ok(correct as f64 / val.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Dataset {
        Dataset::generate(&TaskSpec::diverse(3, 4, 0.1, 50), 16, 7).unwrap()
    }

    #[test]
    fn split_arithmetic() {
        let ds = small();
        assert_eq!(ds.train.len() + ds.val.len(), 600);
        assert_eq!(ds.train.len(), 480);
        assert_eq!(ds.val.len(), 120);
        for t in 0..3 {
            assert_eq!(ds.train.iter().filter(|s| s.task == t).count(), 160);
        }
    }

    #[test]
    fn global_labels_use_cumulative_offsets() {
        let specs = vec![
            TaskSpec {
                id: 0,
                classes: 3,
                family: Family::OrientedBars,
                sigma: 0.1,
                samples_per_class: 5,
            },
            TaskSpec {
                id: 1,
                classes: 2,
                family: Family::GaussianBlobs,
                sigma: 0.1,
                samples_per_class: 5,
            },
            TaskSpec {
                id: 2,
                classes: 4,
                family: Family::CheckerFrequency,
                sigma: 0.1,
                samples_per_class: 5,
            },
        ];
        let ds = Dataset::generate(&specs, 16, 0).unwrap();
        assert_eq!(
            (0..3).map(|t| ds.label_offset(t)).collect::<Vec<_>>(),
            vec![0, 3, 5]
        );
        for s in ds.train.iter().chain(&ds.val) {
            assert_eq!(s.global_label, ds.label_offset(s.task) + s.within_label);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(small().to_bytes(), small().to_bytes());
        let other = Dataset::generate(&TaskSpec::diverse(3, 4, 0.1, 50), 16, 8).unwrap();
        assert_ne!(small().to_bytes(), other.to_bytes());
    }

    #[test]
    fn zero_sigma_gives_prototypes() {
        let specs = TaskSpec::diverse(3, 3, 0.0, 4);
        let ds = Dataset::generate(&specs, 16, 1).unwrap();
        for s in ds.train.iter().chain(&ds.val) {
            assert_eq!(
                s.image.data(),
                prototype(&specs[s.task], s.within_label, 16).as_slice()
            );
        }
    }

    #[test]
    fn prototype_collisions_are_rejected() {
        let err = Dataset::generate(&TaskSpec::diverse(1, 4, 10.0, 5), 16, 0).unwrap_err();
        assert!(err.to_string().contains("4·sigma"));
        assert!(Dataset::generate(&[], 16, 0).is_err());
        assert!(Dataset::generate(&TaskSpec::diverse(2, 1, 0.1, 5), 16, 0).is_err());
    }

    #[test]
    fn prototypes_are_separated_for_every_family() {
        for family in Family::ALL {
            for classes in 2..=8 {
                for id in 0..4 {
                    let spec = TaskSpec {
                        id,
                        classes,
                        family,
                        sigma: 0.1,
                        samples_per_class: 1,
                    };
                    let protos: Vec<_> = (0..classes).map(|c| prototype(&spec, c, 16)).collect();
                    for a in 0..classes {
                        for b in a + 1..classes {
                            assert!(
                                l2(&protos[a], &protos[b]) > 1.0,
                                "{family} y={classes} {a},{b}"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn file_roundtrip() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.eksd");
        ds.save(&path).unwrap();
        assert_eq!(Dataset::load(&path).unwrap(), ds);
    }

    #[test]
    fn truncated_file_names_offset() {
        let bytes = small().to_bytes();
        let cut = bytes.len() - 100;
        match Dataset::from_bytes(&bytes[..cut]) {
            Err(EksError::Format { offset, msg }) => {
                assert_eq!(offset as usize, cut);
                assert!(msg.contains("end of data"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_task_is_rejected() {
        let mut ds = small();
        ds.train.retain(|s| s.task != 1);
        ds.val.retain(|s| s.task != 1);
        let err = Dataset::from_bytes(&ds.to_bytes()).unwrap_err();
        assert!(err.to_string().contains("task 1 has no samples"), "{err}");
    }

    #[test]
    fn csv_offsets_match_file() {
        let ds = small();
        let csv = ds.index_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 601);
        let last: u64 = lines[600].rsplit(',').next().unwrap().parse().unwrap();
        let per_image = 4 + 2 + 1 + 2 + 3 * 8 + 256 * 8;
        assert_eq!(last, 599 * per_image);
    }

    #[test]
    fn batch_stacks_samples() {
        let ds = small();
        let refs: Vec<&Sample> = ds.train.iter().take(5).collect();
        let (x, tasks, labels) = Dataset::batch(&refs).unwrap();
        assert_eq!(x.shape(), &[5, 1, 16, 16]);
        assert_eq!(&x.data()[256..512], ds.train[1].image.data());
        assert_eq!(tasks[3], ds.train[3].task);
        assert_eq!(labels[4], ds.train[4].within_label);
        assert!(Dataset::batch(&[]).is_err());
    }

    #[test]
    fn linear_probe_separates_low_noise_tasks() {
        let ds = Dataset::generate(&TaskSpec::diverse(3, 4, 0.1, 50), 16, 3).unwrap();
        for t in 0..3 {
            let acc = linear_probe_accuracy(&ds, t, 100, 0.05).unwrap();
            assert!(acc > 0.9, "task {t}: {acc}");
        }
    }
}
