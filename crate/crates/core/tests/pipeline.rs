//! Library-level end-to-end runs on a small dataset.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use eks_core::checkpoint::{Checkpoint, CheckpointBody};
use eks_core::data::{Dataset, TaskSpec};
use eks_core::eks::TaskMask;
use eks_core::model::{ArchConfig, DecompModel, PlainNet};
use eks_core::train::{train_decomposition, train_teacher, TrainConfig, TrainOutcome};

fn dataset() -> Dataset {
    Dataset::generate(&TaskSpec::diverse(3, 3, 0.1, 30), 16, 11).unwrap()
}

fn teacher(ds: &Dataset) -> (ArchConfig, PlainNet) {
    let arch = ArchConfig::desk_default(ds.class_counts(), 4);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut t = PlainNet::init_teacher(&arch, &mut rng).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        seed: 1,
        ..TrainConfig::default()
    };
    train_teacher(&mut t, ds, &cfg, |_| {}).unwrap();
    (arch, t)
}

fn decompose(ds: &Dataset, arch: &ArchConfig, t: &PlainNet) -> (DecompModel, TrainOutcome) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut student = DecompModel::init(arch, &mut rng).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        seed: 2,
        rank: arch.rank,
        ..TrainConfig::default()
    };
    let out = train_decomposition(t, &mut student, ds, &cfg, |_| {}).unwrap();
    (student, out)
}

#[test]
fn decomposition_is_deterministic_and_leaves_teacher_untouched() {
    let ds = dataset();
    let (arch, t) = teacher(&ds);
    let before = Checkpoint::teacher(&arch, t.clone()).to_bytes();
    let (s1, o1) = decompose(&ds, &arch, &t);
    let (s2, o2) = decompose(&ds, &arch, &t);
    assert_eq!(Checkpoint::teacher(&arch, t).to_bytes(), before);
    assert_eq!(o1, o2);
    assert_eq!(
        Checkpoint::student(&s1).unwrap().to_bytes(),
        Checkpoint::student(&s2).unwrap().to_bytes()
    );
    assert!(o1.report.average_accuracy > o1.initial.average_accuracy);
}

#[test]
fn trained_experts_export_exactly() {
    let ds = dataset();
    let (arch, t) = teacher(&ds);
    let (student, _) = decompose(&ds, &arch, &t);
    let dir = tempfile::tempdir().unwrap();
    for task in 0..student.num_tasks() {
        let path = dir.path().join(format!("expert{task}.eksc"));
        Checkpoint::expert(&student, task)
            .unwrap()
            .save(&path)
            .unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.fused, Some(task));
        let CheckpointBody::Expert(net) = loaded.body else {
            panic!("not an expert");
        };
        let samples: Vec<_> = ds.val.iter().filter(|s| s.task == task).collect();
        let (x, tasks, _) = Dataset::batch(&samples).unwrap();
        let mask = TaskMask::from_tasks(&tasks, student.num_tasks()).unwrap();
        let (_, reference) = student.forward_value(&x, &mask).unwrap();
        let (_, logits) = net.forward_value(&x).unwrap();
        for (i, row) in reference.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert!((v - logits.at(&[i, j])).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn student_checkpoint_roundtrips_through_disk() {
    let ds = dataset();
    let (arch, t) = teacher(&ds);
    let (mut student, _) = decompose(&ds, &arch, &t);
    student.fuse(1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.eksc");
    Checkpoint::student(&student).unwrap().save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.fused, Some(1));
    let CheckpointBody::Student(mut restored) = loaded.body else {
        panic!("not a student");
    };
    restored.fuse(1).unwrap();
    for (a, b) in restored.eks_layers().zip(student.eks_layers()) {
        assert!(a.w0.max_abs_diff(&b.w0) < 1e-12);
    }
}
