use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use attn_distill::datagen::{
    encode_dataset, generate_dataset, read_dataset, sha256_hex, DatasetConfig, Split, SyntheticSample,
};
use attn_distill::eval::{
    arrow_of_time, evaluate_accuracy, export_attention, export_overlay, localize_center_prior, localize_model,
    run_model, ExportFormat, LocalizationOptions, LocalizationReport, TOLERANCE_BASE,
};
use attn_distill::harness::{
    load_checkpoint, save_checkpoint, train_student, train_teacher, Checkpoint, ModelRole, RunConfig, TrainRun,
};
use attn_distill::{parallel, selftest, Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "adl", version, about = "Cross-modal attention distillation lab")]
struct Cli {
    /// Worker threads. Results are bit-reproducible only with 1.
    #[arg(long, global = true, env = "ADL_THREADS", default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic train/test benchmark.
    GenData(GenData),
    /// Train the flow teacher.
    TrainTeacher(Train),
    /// Train an RGB student.
    TrainStudent(TrainStudent),
    /// Mean class accuracy on a split.
    Eval(Eval),
    /// Pixel-level localization PR/F1 of attention maps.
    Localize(Localize),
    /// Accuracy drop when test clips play backwards.
    ArrowOfTime(ArrowOfTimeArgs),
    /// Write one clip's attention map to disk.
    ExportAttn(ExportAttn),
    /// Run the quick invariant checks.
    Selftest,
}

#[derive(Args, Debug)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// `key = value` dataset settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one setting, `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct Train {
    /// Dataset directory holding `train.advd`, or the file itself.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// `key = value` run settings; flags below take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// soft-atten, soft-res or prob-atten.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct TrainStudent {
    #[command(flatten)]
    train: Train,
    /// Student role; defaults to the config value (student-rgb-distill).
    #[arg(long)]
    role: Option<String>,
    /// Frozen teacher checkpoint.
    #[arg(long)]
    teacher: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Args, Debug)]
struct Source {
    /// Dataset directory or `.advd` file.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Teacher checkpoint; the oracle-attention student needs it at test time.
    #[arg(long)]
    teacher: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Eval {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    source: Source,
    #[arg(long)]
    reversed: bool,
    /// Write the report here as well.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Localize {
    /// Model whose motion attention is scored. Omit with `--center-prior`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    source: Source,
    /// Score the centred Gaussian prior instead of a model.
    #[arg(long)]
    center_prior: bool,
    #[arg(long, default_value_t = 32)]
    resolution: usize,
    #[arg(long, default_value_t = TOLERANCE_BASE as usize)]
    tolerance: usize,
    /// Write the summary and full curve into this directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ArrowOfTimeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    source: Source,
    /// Dataset config used to recognise static classes.
    #[arg(long)]
    dataset_config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FormatArg {
    Pgm,
    Csv,
}

#[derive(Args, Debug)]
struct ExportAttn {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    source: Source,
    /// Clip index within the split.
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "pgm")]
    format: FormatArg,
    /// Also write first/last frame overlays.
    #[arg(long)]
    overlay: bool,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn split_kv(entry: &str) -> Result<(&str, &str)> {
    entry
        .split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{entry}`")))
}

fn refuse_overwrite(paths: &[&Path], force: bool) -> Result<()> {
    if force {
        return Ok(());
    }
    match paths.iter().find(|p| p.exists()) {
        Some(p) => Err(Error::Config(format!(
            "{} already exists; pass --force to overwrite",
            p.display()
        ))),
        None => Ok(()),
    }
}

fn dataset_path(data: &Path, split: Split) -> PathBuf {
    if data.is_dir() {
        data.join(format!("{}.advd", split.name()))
    } else {
        data.to_path_buf()
    }
}

fn load_split(source: &Source) -> Result<Vec<SyntheticSample>> {
    let split = match source.split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    read_dataset(&dataset_path(&source.data, split))
}

fn load_teacher(path: Option<&Path>) -> Result<Option<Checkpoint>> {
    path.map(load_checkpoint).transpose()
}

fn gen_data(args: &GenData) -> Result<()> {
    let mut config = match &args.config {
        Some(p) => DatasetConfig::default().parse_onto(&read_text(p)?)?,
        None => DatasetConfig::default(),
    };
    for entry in &args.set {
        let (k, v) = split_kv(entry)?;
        config.set(k, v)?;
    }
    config.validate()?;
    let train = args.out.join("train.advd");
    let test = args.out.join("test.advd");
    if !args.force && (train.exists() || test.exists()) {
        // an unchanged re-run reproduces the files; anything else must not clobber them
        let mut digests = Vec::new();
        for (split, path) in [(Split::Train, &train), (Split::Test, &test)] {
            let fresh = encode_dataset(&config.generate_split(args.seed, split)?)?;
            let existing = fs::read(path).map_err(|e| Error::io(path, e))?;
            if fresh != existing {
                return Err(Error::Config(format!(
                    "{} differs from this config and seed; pass --force to overwrite",
                    path.display()
                )));
            }
            digests.push(sha256_hex(&existing));
        }
        println!("train {}", digests[0]);
        println!("test {}", digests[1]);
        return Ok(());
    }
    let out = generate_dataset(&config, args.seed, &args.out)?;
    write_text(&args.out.join("dataset.conf"), &config.canonical())?;
    println!("train {}", out.train_digest);
    println!("test {}", out.test_digest);
    Ok(())
}

fn resolve_run(train: &Train, base: RunConfig, role: Option<&str>) -> Result<RunConfig> {
    let mut config = match &train.config {
        Some(p) => base.parse_onto(&read_text(p)?)?,
        None => base,
    };
    for entry in &train.set {
        let (k, v) = split_kv(entry)?;
        config.set(k, v)?;
    }
    if let Some(r) = role {
        config.role = r.parse()?;
    }
    if let Some(s) = train.seed {
        config.seed = s;
    }
    if let Some(e) = train.epochs {
        config.epochs = e;
    }
    if let Some(m) = &train.mode {
        config.set_mode(m)?;
    }
    config.validate()?;
    Ok(config)
}

fn finish_training(train: &Train, run: &TrainRun) -> Result<()> {
    let ckpt = &run.checkpoint;
    let name = ckpt.config.role.name();
    let path = train.out.join(format!("{name}.adck"));
    save_checkpoint(ckpt, &path)?;
    write_text(&train.out.join(format!("{name}.log")), &run.log.render())?;
    let mut summary = String::from("epoch ce kl_distill kl_uniform total accuracy lr\n");
    for e in &run.log.epochs {
        let distill = if ckpt.config.role == ModelRole::StudentFeatMatch {
            e.mean.featmatch
        } else {
            e.mean.kl_distill
        };
        let _ = writeln!(
            summary,
            "{} {:.6} {:.6} {:.6} {:.6} {:.4} {}",
            e.epoch, e.mean.ce, distill, e.mean.kl_uniform, e.mean.total, e.accuracy, e.lr
        );
    }
    write_text(&train.out.join(format!("{name}.epochs")), &summary)?;
    println!("checkpoint {}", path.display());
    for (k, v) in &ckpt.metrics {
        println!("{k} {v:.4}");
    }
    Ok(())
}

fn outputs(train: &Train, role: ModelRole) -> [PathBuf; 3] {
    let name = role.name();
    ["adck", "log", "conf"].map(|ext| train.out.join(format!("{name}.{ext}")))
}

fn train_teacher_cmd(args: &Train) -> Result<()> {
    let config = resolve_run(args, RunConfig::teacher(), None)?;
    if !config.role.is_teacher() {
        return Err(Error::Config(format!(
            "train-teacher trains role teacher-flow, config asks for {}",
            config.role
        )));
    }
    let paths = outputs(args, config.role);
    refuse_overwrite(&paths.iter().map(PathBuf::as_path).collect::<Vec<_>>(), args.force)?;
    let data = read_dataset(&dataset_path(&args.data, Split::Train))?;
    write_text(&paths[2], &config.canonical())?;
    let run = train_teacher(&data, &config)?;
    finish_training(args, &run)
}

fn train_student_cmd(args: &TrainStudent) -> Result<()> {
    let config = resolve_run(
        &args.train,
        RunConfig::student(ModelRole::StudentDistill),
        args.role.as_deref(),
    )?;
    if config.role.is_teacher() {
        return Err(Error::Config(
            "train-student needs a student role; use train-teacher".into(),
        ));
    }
    if config.role.needs_teacher() && args.teacher.is_none() {
        return Err(Error::Config(format!(
            "role {} requires --teacher <checkpoint>",
            config.role
        )));
    }
    let paths = outputs(&args.train, config.role);
    refuse_overwrite(
        &paths.iter().map(PathBuf::as_path).collect::<Vec<_>>(),
        args.train.force,
    )?;
    let teacher = load_teacher(args.teacher.as_deref())?;
    let data = read_dataset(&dataset_path(&args.train.data, Split::Train))?;
    write_text(&paths[2], &config.canonical())?;
    let run = train_student(&data, &config, teacher.as_ref())?;
    finish_training(&args.train, &run)
}

fn eval_cmd(args: &Eval) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let teacher = load_teacher(args.source.teacher.as_deref())?;
    let samples = load_split(&args.source)?;
    let report = evaluate_accuracy(&ckpt, &samples, args.reversed, teacher.as_ref())?;
    let mut text = format!("mean_class_accuracy {:.6}\n", report.mean_class_accuracy);
    for (c, acc) in report.per_class.iter().enumerate() {
        if let Some(a) = acc {
            let _ = writeln!(text, "class {c} {a:.6}");
        }
    }
    print!("{text}");
    if let Some(out) = &args.out {
        write_text(out, &text)?;
    }
    Ok(())
}

fn curve_text(report: &LocalizationReport) -> String {
    let mut s = String::from("threshold precision recall f1\n");
    for p in &report.curve {
        let _ = writeln!(s, "{:.6e} {:.6} {:.6} {:.6}", p.threshold, p.precision, p.recall, p.f1);
    }
    s
}

fn localize_cmd(args: &Localize) -> Result<()> {
    let opts = LocalizationOptions {
        resolution: args.resolution,
        tolerance_base: args.tolerance,
        recall_dilated: false,
    };
    let samples = load_split(&args.source)?;
    let (label, report) = match (&args.checkpoint, args.center_prior) {
        (None, true) => ("center-prior".to_string(), localize_center_prior(&samples, opts)?),
        (Some(p), false) => {
            let ckpt = load_checkpoint(p)?;
            let teacher = load_teacher(args.source.teacher.as_deref())?;
            let report = localize_model(&ckpt, &samples, teacher.as_ref(), opts)?;
            (ckpt.config.role.name().to_string(), report)
        }
        _ => {
            return Err(Error::Config(
                "pass exactly one of --checkpoint or --center-prior".into(),
            ))
        }
    };
    let b = report.best;
    println!(
        "{label} best_f1 {:.6} precision {:.6} recall {:.6} threshold {:.6e} tolerance {}px at {}x{}",
        b.f1, b.precision, b.recall, b.threshold, report.tolerance, report.resolution, report.resolution
    );
    if let Some(dir) = &args.out {
        write_text(&dir.join(format!("{label}.localization")), &report.render())?;
        write_text(&dir.join(format!("{label}.pr")), &curve_text(&report))?;
    }
    Ok(())
}

fn arrow_cmd(args: &ArrowOfTimeArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let teacher = load_teacher(args.source.teacher.as_deref())?;
    let dataset = match &args.dataset_config {
        Some(p) => DatasetConfig::default().parse_onto(&read_text(p)?)?,
        None => {
            let beside = if args.source.data.is_dir() {
                args.source.data.join("dataset.conf")
            } else {
                args.source.data.with_file_name("dataset.conf")
            };
            if beside.exists() {
                DatasetConfig::default().parse_onto(&read_text(&beside)?)?
            } else {
                DatasetConfig::default()
            }
        }
    };
    let samples = load_split(&args.source)?;
    let moving = |label: usize| {
        label >= dataset.num_classes() || dataset.class_of(label).1 != attn_distill::datagen::MotionPattern::Static
    };
    let r = arrow_of_time(&ckpt, &samples, moving, teacher.as_ref())?;
    println!(
        "{} forward {:.6} reversed {:.6} drop {:.6}",
        ckpt.config.role,
        r.forward,
        r.reversed,
        r.drop()
    );
    Ok(())
}

fn export_cmd(args: &ExportAttn) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let teacher = load_teacher(args.source.teacher.as_deref())?;
    let samples = load_split(&args.source)?;
    let sample = samples.get(args.index).ok_or_else(|| {
        Error::Input(format!(
            "index {} outside the {} clips of the split",
            args.index,
            samples.len()
        ))
    })?;
    let one = std::slice::from_ref(sample);
    let out = run_model(&ckpt, one, teacher.as_ref())?;
    let stem = format!("{}_clip{}", ckpt.config.role.name(), args.index);
    let format = match args.format {
        FormatArg::Pgm => ExportFormat::Pgm,
        FormatArg::Csv => ExportFormat::Csv,
    };
    let mut written = export_attention(&out.motion_maps[0], &args.out, &stem, format)?;
    if args.overlay {
        written.extend(export_overlay(&out.motion_maps[0], &sample.rgb, &args.out, &stem)?);
    }
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

fn selftest_cmd() -> Result<bool> {
    let results = selftest::run_all();
    for r in &results {
        println!(
            "{} {} ({:.2}s) {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.seconds,
            r.detail
        );
    }
    Ok(results.iter().all(|r| r.passed))
}

fn run(cli: &Cli) -> Result<bool> {
    parallel::init_threads(cli.threads);
    match &cli.command {
        Command::GenData(a) => gen_data(a)?,
        Command::TrainTeacher(a) => train_teacher_cmd(a)?,
        Command::TrainStudent(a) => train_student_cmd(a)?,
        Command::Eval(a) => eval_cmd(a)?,
        Command::Localize(a) => localize_cmd(a)?,
        Command::ArrowOfTime(a) => arrow_cmd(a)?,
        Command::ExportAttn(a) => export_cmd(a)?,
        Command::Selftest => return selftest_cmd(),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
