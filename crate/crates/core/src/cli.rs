//! Command-line front end.
//!
//! Every subcommand reads its inputs, writes results under `--out`, and never
//! touches its input files. Exit codes: 0 success, 1 domain error, 2 usage
//! error.
//!
//! Any subcommand accepts `--config <file>` with `key=value` lines, where a
//! key is a long flag name without the dashes (`lr=0.1`, `shared-only=true`).
//! Flags on the command line win over the file.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::checkpoint::{Checkpoint, CheckpointBody};
use crate::conv::ConvSpec;
use crate::data::{Dataset, Family, Sample, TaskSpec};
use crate::eks::{eks_cost_model, EksConvLayer, TaskMask};
use crate::error::{EksError, Result};
use crate::losses::argmax;
use crate::metrics::{evaluate_student, evaluate_teacher, mig_score, MetricsReport};
use crate::model::{ArchConfig, DecompModel, PlainNet};
use crate::tensor::Tensor;
use crate::train::{
    loss_trend_ok, train_decomposition, train_teacher, TrainConfig, DEFAULT_ALPHA, DEFAULT_BETA,
    DEFAULT_LR, DEFAULT_RANK,
};
use crate::verify::{verify_with, Fault, VerifyOptions};

// Stdout writes ignore errors so a closed pipe (`eks … | head`) is not a panic.
macro_rules! out {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = write!(std::io::stdout(), $($t)*);
    }};
}

macro_rules! outln {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

#[derive(Debug, Parser)]
#[command(
    name = "eks",
    version,
    about = "Decompose a convolutional teacher into a shared backbone plus per-task low-rank experts"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic multi-task image dataset.
    #[command(args_override_self = true)]
    GenData(GenDataArgs),
    /// Train the dense teacher with one head over all classes.
    #[command(args_override_self = true)]
    TrainTeacher(TrainTeacherArgs),
    /// Distil the teacher into a shared backbone with per-task experts.
    #[command(args_override_self = true)]
    Decompose(DecomposeArgs),
    /// Fuse one task into a plain deployable network.
    #[command(args_override_self = true)]
    Export(ExportArgs),
    /// Change which task a student checkpoint is fused for.
    #[command(args_override_self = true)]
    Switch(SwitchArgs),
    /// Report accuracy and costs of a checkpoint on a dataset split.
    #[command(args_override_self = true)]
    Eval(EvalArgs),
    /// Run the invariant suite and print one line per check.
    #[command(args_override_self = true)]
    Verify(VerifyArgs),
    /// Compare the aggregated and per-sample low-rank cost models.
    #[command(args_override_self = true)]
    Bench(BenchArgs),
    /// Mutual information gap of a checkpoint's features with respect to the task.
    #[command(args_override_self = true)]
    Mig(MigArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// Seed for every random choice the command makes.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optional key=value file supplying defaults for the other flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TaskMix {
    /// Consecutive tasks use different generator families.
    Diverse,
    /// All tasks share one generator family.
    Correlated,
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset file to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    tasks: usize,
    /// Classes per task.
    #[arg(long, default_value_t = 4)]
    classes: usize,
    /// Pixel noise standard deviation.
    #[arg(long, default_value_t = 0.1)]
    sigma: f64,
    #[arg(long, default_value_t = 200)]
    samples_per_class: usize,
    /// Image side length.
    #[arg(long, default_value_t = 16)]
    size: usize,
    #[arg(long, value_enum, default_value_t = TaskMix::Diverse)]
    mix: TaskMix,
    /// Generator family for correlated tasks.
    #[arg(long, default_value = "oriented-bars")]
    family: Family,
    /// Also write the sample index as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct Optim {
    /// Initial learning rate, annealed to zero on a cosine schedule.
    #[arg(long, default_value_t = DEFAULT_LR)]
    lr: f64,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
}

#[derive(Debug, Args)]
struct TrainTeacherArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    optim: Optim,
    /// Dataset file.
    #[arg(long)]
    data: PathBuf,
    /// Teacher checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Also write the per-epoch log here.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DecomposeArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    optim: Optim,
    #[arg(long)]
    data: PathBuf,
    /// Teacher checkpoint.
    #[arg(long)]
    teacher: PathBuf,
    /// Student checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Distillation temperature.
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    /// Weight of the transfer term.
    #[arg(long, default_value_t = DEFAULT_BETA)]
    beta: f64,
    /// Expert rank, clamped per layer to the smaller channel count.
    #[arg(long, default_value_t = DEFAULT_RANK)]
    rank: usize,
    /// Draw each batch from a single task.
    #[arg(long)]
    per_task_batches: bool,
    /// Keep every expert at zero and train the shared backbone alone.
    #[arg(long)]
    shared_only: bool,
    /// Also write the per-epoch log here.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Also write the final metrics summary here.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[command(flatten)]
    common: Common,
    /// Student checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    task: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SwitchArgs {
    #[command(flatten)]
    common: Common,
    /// Student checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// Task the checkpoint is currently fused for; checked when given.
    #[arg(long)]
    from: Option<usize>,
    /// Task to fuse for.
    #[arg(long, required_unless_present = "unfuse", conflicts_with = "unfuse")]
    to: Option<usize>,
    /// Drop the fusion marker instead of switching.
    #[arg(long)]
    unfuse: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Split {
    Train,
    Val,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Val)]
    split: Split,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FaultArg {
    /// Fuse the wrong task in the fusion check.
    FusionOffByOne,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[command(flatten)]
    common: Common,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Deliberately break one component to see the suite catch it.
    #[arg(long, value_enum)]
    inject_fault: Option<FaultArg>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    /// Number of tasks.
    #[arg(long = "T", default_value_t = 11)]
    tasks: u64,
    /// Expert rank.
    #[arg(long = "r", default_value_t = DEFAULT_RANK as u64)]
    rank: u64,
    /// Batch size.
    #[arg(long = "b", default_value_t = 64)]
    batch: u64,
    /// Sequence length per sample.
    #[arg(long = "l", default_value_t = 49)]
    len: u64,
    /// Feature width.
    #[arg(long = "d", default_value_t = 256)]
    dim: u64,
    /// Also time one expert convolution at T tasks against one task.
    #[arg(long)]
    measure: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct MigArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Val)]
    split: Split,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let argv = match splice_config(argv) {
        Ok(a) => a,
        Err(ConfigError::Usage(msg)) => {
            eprintln!("error: {msg}");
            return 2;
        }
        Err(ConfigError::Domain(e)) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

enum ConfigError {
    Usage(String),
    Domain(EksError),
}

/// Parses a `key=value` config file into flag arguments.
fn config_flags(text: &str) -> std::result::Result<Vec<String>, String> {
    let mut flags = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("config line {}: expected key=value", i + 1))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty()
            || key == "config"
            || !key
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
        {
            return Err(format!("config line {}: invalid key {key:?}", i + 1));
        }
        let flag = format!("--{}", key.replace('_', "-"));
        match value {
            "true" => flags.push(flag),
            "false" => {}
            _ => {
                flags.push(flag);
                flags.push(value.to_string());
            }
        }
    }
    Ok(flags)
}

/// Inserts the config file's flags right after the subcommand, so that later
/// command-line occurrences override them.
fn splice_config(argv: Vec<OsString>) -> std::result::Result<Vec<OsString>, ConfigError> {
    let mut path = None;
    for (i, a) in argv.iter().enumerate().skip(2) {
        let a = a.to_string_lossy();
        if a == "--config" {
            path = argv.get(i + 1).cloned();
            if path.is_none() {
                return Err(ConfigError::Usage("--config needs a file".into()));
            }
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.into());
        }
    }
    let Some(path) = path else {
        return Ok(argv);
    };
    let text = fs::read_to_string(&path).map_err(|e| ConfigError::Domain(EksError::Io(e)))?;
    let flags = config_flags(&text).map_err(ConfigError::Usage)?;
    let mut out = argv[..2].to_vec();
    out.extend(flags.into_iter().map(OsString::from));
    out.extend_from_slice(&argv[2..]);
    Ok(out)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    Ok(())
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    out!("{text}");
    if let Some(p) = out {
        write_text(p, text)?;
    }
    Ok(())
}

fn domain(msg: impl Into<String>) -> EksError {
    EksError::InvalidArgument(msg.into())
}

fn execute(cmd: Command) -> Result<i32> {
    let done = |r: Result<()>| r.map(|()| 0);
    match cmd {
        Command::GenData(a) => done(gen_data(a)),
        Command::TrainTeacher(a) => done(cmd_train_teacher(a)),
        Command::Decompose(a) => done(decompose(a)),
        Command::Export(a) => done(export(a)),
        Command::Switch(a) => done(switch(a)),
        Command::Eval(a) => done(eval(a)),
        Command::Verify(a) => verify(a),
        Command::Bench(a) => done(bench(a)),
        Command::Mig(a) => done(mig(a)),
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let specs = match a.mix {
        TaskMix::Diverse => TaskSpec::diverse(a.tasks, a.classes, a.sigma, a.samples_per_class),
        TaskMix::Correlated => {
            TaskSpec::correlated(a.tasks, a.family, a.classes, a.sigma, a.samples_per_class)
        }
    };
    let ds = Dataset::generate(&specs, a.size, a.common.seed)?;
    ds.save(&a.out)?;
    if let Some(csv) = &a.csv {
        write_text(csv, &ds.index_csv())?;
    }
    outln!(
        "wrote {} train={} val={} tasks={} classes={}",
        a.out.display(),
        ds.train.len(),
        ds.val.len(),
        ds.num_tasks(),
        ds.class_counts()
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(",")
    );
    Ok(())
}

fn arch_for(ds: &Dataset, rank: usize) -> ArchConfig {
    let mut arch = ArchConfig::desk_default(ds.class_counts(), rank);
    arch.in_size = ds.size;
    arch
}

fn train_config(common: &Common, optim: &Optim) -> TrainConfig {
    TrainConfig {
        lr: optim.lr,
        epochs: optim.epochs,
        batch_size: optim.batch_size,
        seed: common.seed,
        ..TrainConfig::default()
    }
}

fn cmd_train_teacher(a: TrainTeacherArgs) -> Result<()> {
    let ds = Dataset::load(&a.data)?;
    let arch = arch_for(&ds, DEFAULT_RANK);
    let cfg = train_config(&a.common, &a.optim);
    let mut rng = ChaCha8Rng::seed_from_u64(a.common.seed);
    let mut teacher = PlainNet::init_teacher(&arch, &mut rng)?;
    let mut log = String::new();
    train_teacher(&mut teacher, &ds, &cfg, |r| {
        outln!("{r}");
        let _ = writeln!(log, "{r}");
    })?;
    let (acc, _) = evaluate_teacher(&teacher, &ds.val, 64)?;
    Checkpoint::teacher(&arch, teacher).save(&a.out)?;
    if let Some(p) = &a.log {
        write_text(p, &log)?;
    }
    outln!("wrote {} val_accuracy={acc:.6}", a.out.display());
    Ok(())
}

fn load_teacher(path: &Path) -> Result<(ArchConfig, PlainNet)> {
    match Checkpoint::load(path)? {
        Checkpoint {
            arch,
            body: CheckpointBody::Teacher(net),
            ..
        } => Ok((arch, net)),
        _ => Err(domain(format!(
            "{} is not a teacher checkpoint",
            path.display()
        ))),
    }
}

fn load_student(path: &Path) -> Result<(Checkpoint, DecompModel)> {
    let ckpt = Checkpoint::load(path)?;
    match &ckpt.body {
        CheckpointBody::Student(m) => {
            let m = m.clone();
            Ok((ckpt, m))
        }
        _ => Err(domain(format!(
            "{} is not a student checkpoint",
            path.display()
        ))),
    }
}

fn decompose(a: DecomposeArgs) -> Result<()> {
    let ds = Dataset::load(&a.data)?;
    let (teacher_arch, teacher) = load_teacher(&a.teacher)?;
    if teacher_arch.tasks != ds.class_counts() {
        return Err(domain("teacher and dataset disagree on the task layout"));
    }
    let mut arch = teacher_arch;
    arch.rank = a.rank;
    let cfg = TrainConfig {
        alpha: a.alpha,
        beta: a.beta,
        rank: a.rank,
        per_task_batches: a.per_task_batches,
        shared_only: a.shared_only,
        ..train_config(&a.common, &a.optim)
    };
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.common.seed);
    let mut student = DecompModel::init(&arch, &mut rng)?;
    let mut log = String::new();
    let outcome = train_decomposition(&teacher, &mut student, &ds, &cfg, |r| {
        outln!("{r}");
        let _ = writeln!(log, "{r}");
    })?;
    if !loss_trend_ok(&outcome.history) {
        eprintln!("warning: moving-average loss increased during training");
    }
    Checkpoint::student(&student)?.save(&a.out)?;
    if let Some(p) = &a.log {
        write_text(p, &log)?;
    }
    let summary = outcome.report.to_string();
    if let Some(p) = &a.metrics {
        write_text(p, &summary)?;
    }
    out!("{summary}");
    outln!("wrote {}", a.out.display());
    Ok(())
}

fn export(a: ExportArgs) -> Result<()> {
    let (_, model) = load_student(&a.ckpt)?;
    let ckpt = Checkpoint::expert(&model, a.task)?;
    ckpt.save(&a.out)?;
    outln!(
        "wrote {} task={} params={}",
        a.out.display(),
        a.task,
        ckpt.param_count()
    );
    Ok(())
}

/// Rewrites only the fusion marker: the stored weights are the canonical
/// unfused form, so switching back and forth is byte-exact.
fn switch(a: SwitchArgs) -> Result<()> {
    let (mut ckpt, model) = load_student(&a.ckpt)?;
    if let Some(from) = a.from {
        if ckpt.fused != Some(from) {
            return Err(domain(format!(
                "checkpoint is fused for {:?}, not task {from}",
                ckpt.fused
            )));
        }
    }
    ckpt.fused = match a.to {
        Some(t) if t >= model.num_tasks() => {
            return Err(EksError::TaskOutOfRange {
                task: t,
                count: model.num_tasks(),
            })
        }
        Some(t) => Some(t),
        None => None,
    };
    ckpt.save(&a.out)?;
    match ckpt.fused {
        Some(t) => outln!("wrote {} fused={t}", a.out.display()),
        None => outln!("wrote {} fused=none", a.out.display()),
    }
    Ok(())
}

fn split(ds: &Dataset, s: Split) -> &[Sample] {
    match s {
        Split::Train => &ds.train,
        Split::Val => &ds.val,
    }
}

fn expert_accuracy(net: &PlainNet, t: usize, samples: &[Sample]) -> Result<(f64, usize)> {
    let mine: Vec<&Sample> = samples.iter().filter(|s| s.task == t).collect();
    if mine.is_empty() {
        return Err(domain(format!("no samples of task {t} in this split")));
    }
    let mut correct = 0;
    for chunk in mine.chunks(64) {
        let (x, _, labels) = Dataset::batch(chunk)?;
        let (_, logits) = net.forward_value(&x)?;
        let c = logits.shape()[1];
        for (i, &y) in labels.iter().enumerate() {
            correct += usize::from(argmax(&logits.data()[i * c..(i + 1) * c]) == y);
        }
    }
    Ok((correct as f64 / mine.len() as f64, mine.len()))
}

fn eval(a: EvalArgs) -> Result<()> {
    let ds = Dataset::load(&a.data)?;
    let samples = split(&ds, a.split);
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let text = match &ckpt.body {
        CheckpointBody::Student(m) => {
            let ev = evaluate_student(m, samples, a.batch_size)?;
            MetricsReport::from_eval(&ev, m.cost_report(a.batch_size)?)?.to_string()
        }
        CheckpointBody::Teacher(net) => {
            let (acc, _) = evaluate_teacher(net, samples, a.batch_size)?;
            format!(
                "kind=teacher\naccuracy={acc:.6}\nparams={}\nflops_per_sample={}\n",
                net.param_count(),
                net.flops_per_sample(ckpt.arch.in_size)?
            )
        }
        CheckpointBody::Expert(net) => {
            let t = ckpt.fused.ok_or_else(|| domain("expert without a task"))?;
            let (acc, n) = expert_accuracy(net, t, samples)?;
            format!(
                "kind=expert\ntask={t}\nsamples={n}\naccuracy={acc:.6}\nparams={}\nflops_per_sample={}\n",
                net.param_count(),
                net.flops_per_sample(ckpt.arch.in_size)?
            )
        }
    };
    emit(&text, a.out.as_deref())
}

/// Exit code 1 when any check fails; the report itself is the diagnostic.
fn verify(a: VerifyArgs) -> Result<i32> {
    let opts = VerifyOptions {
        fault: a.inject_fault.map(|f| match f {
            FaultArg::FusionOffByOne => Fault::FusionOffByOne,
        }),
    };
    let report = verify_with(a.common.seed, &opts);
    emit(&report.to_string(), a.out.as_deref())?;
    Ok(if report.all_passed() { 0 } else { 1 })
}

/// Milliseconds for the best of a few single-pass forwards of a 16→16 3×3
/// expert layer on 8×8 inputs.
fn time_forward(tasks: usize, batch: usize, rank: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = ConvSpec::same(16, 16, 3, 1)?;
    let layer = EksConvLayer::init(spec, tasks, rank.clamp(1, 16), &mut rng)?;
    let x = Tensor::uniform(&[batch, 16, 8, 8], -1.0, 1.0, &mut rng);
    let ids: Vec<usize> = (0..batch).map(|i| i % tasks).collect();
    let mask = TaskMask::from_tasks(&ids, tasks)?;
    let mut best = f64::INFINITY;
    for _ in 0..5 {
        let start = Instant::now();
        let mut tape = Tape::new();
        let vars = layer.bind(&mut tape);
        let h = tape.constant(x.clone());
        layer.forward(&mut tape, &vars, h, &mask)?;
        best = best.min(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok(best)
}

fn bench(a: BenchArgs) -> Result<()> {
    let c = eks_cost_model(a.tasks, a.rank, a.batch, a.len, a.dim)?;
    let lhs = (a.tasks * a.rank) as f64 / (a.batch * a.len) as f64 + 1.0;
    let mut text = format!(
        "T={} r={} b={} l={} d={}\neks_cost={}\nflora_cost={}\nlhs={lhs:.6}\nrhs={}\neks_cheaper={}\n",
        a.tasks, a.rank, a.batch, a.len, a.dim, c.eks_cost, c.flora_cost, a.rank, c.eks_cheaper
    );
    // Timings are machine-dependent, so they go to stdout only.
    emit(&text, a.out.as_deref())?;
    if a.measure {
        let (t, b, r) = (a.tasks as usize, a.batch as usize, a.rank as usize);
        let many = time_forward(t, b, r, a.common.seed)?;
        let one = time_forward(1, b, r, a.common.seed)?;
        text = format!(
            "forward_ms_T{t}={many:.3}\nforward_ms_T1={one:.3}\nratio={:.3}\n",
            many / one
        );
        out!("{text}");
    }
    Ok(())
}

fn mig(a: MigArgs) -> Result<()> {
    let ds = Dataset::load(&a.data)?;
    let samples = split(&ds, a.split);
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let tasks: Vec<usize> = samples.iter().map(|s| s.task).collect();
    let features = match &ckpt.body {
        CheckpointBody::Student(m) => evaluate_student(m, samples, 64)?.features,
        CheckpointBody::Teacher(net) => evaluate_teacher(net, samples, 64)?.1,
        CheckpointBody::Expert(_) => {
            return Err(domain(
                "an exported expert serves one task; mig needs a multi-task model",
            ))
        }
    };
    let score = mig_score(&features, &tasks)?;
    emit(
        &format!("samples={} mig={score:.6}\n", tasks.len()),
        a.out.as_deref(),
    )
}
