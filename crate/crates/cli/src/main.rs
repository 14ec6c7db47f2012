mod args;
mod rundir;

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::Parser;
use dakd::dataio::{csv_writer, load_model, save_model, write_synthetic, DataError, Dataset, DatasetManifest, SynthConfig};
use dakd::evalmetrics::{evaluate_model, write_frame_scores};
use dakd::models::Model;
use dakd::pipeline::{ablate_arms, derive_seed, fit_student, fit_teacher, sweep, Arm, ExperimentConfig};
use dakd::refinery::{build_pseudo_labels, PseudoLabelStore};
use serde_json::json;

use args::{AblateArgs, Cli, Command, DistillArgs, EvalArgs, RefineArgs, Role, RunArgs, StageArgs, SynthArgs};
use rundir::RunDir;

const USAGE: u8 = 2;
const DATA: u8 = 3;
const NUMERIC: u8 = 4;

/// Rejected input that is not a dataset or artifact problem.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<Usage>() {
            return USAGE;
        }
        if let Some(err) = cause.downcast_ref::<dakd::Error>() {
            return match err {
                _ if err.is_numeric() => NUMERIC,
                dakd::Error::Config(_) => USAGE,
                _ => DATA,
            };
        }
        if cause.is::<DataError>() || cause.is::<std::io::Error>() {
            return DATA;
        }
    }
    DATA
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(Usage("worker count must be positive".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let out = RunDir::create(&cli.out)?;
    match cli.command {
        Command::Synth(a) => synth(&out, a),
        Command::TrainTeacher(a) => train_teacher(&out, a),
        Command::Refine(a) => refine(&out, a),
        Command::Distill(a) => distill(&out, a),
        Command::Eval(a) => eval(&out, a),
        Command::Ablate(a) => ablate(&out, a),
    }
}

fn synth(out: &RunDir, a: SynthArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = read_input(path, "synthetic config")?;
            toml::from_str::<SynthConfig>(&text).map_err(|e| Usage(format!("{}: {e}", path.display())))?
        }
        None => SynthConfig::default(),
    };
    let set = |slot: &mut usize, v: Option<usize>| v.into_iter().for_each(|v| *slot = v);
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.snr {
        cfg.snr = v;
    }
    if let Some(v) = a.anomaly_fraction {
        cfg.anomaly_fraction = v;
    }
    if let Some(v) = a.nuisance_rate {
        cfg.nuisance_rate = v;
    }
    set(&mut cfg.train_normal, a.train_normal);
    set(&mut cfg.train_anomalous, a.train_anomalous);
    set(&mut cfg.test_normal, a.test_normal);
    set(&mut cfg.test_anomalous, a.test_anomalous);
    set(&mut cfg.min_clips, a.min_clips);
    set(&mut cfg.max_clips, a.max_clips);
    cfg.validate().map_err(|e| Usage(e.to_string()))?;

    let dir = out.path("data");
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    let manifest = write_synthetic(&cfg, &dir)?;
    let settings = dir.join("synth.toml");
    fs::write(&settings, toml::to_string(&cfg)?)?;
    let mut files = vec![manifest.clone(), settings];
    let parsed = DatasetManifest::read(&manifest)?;
    for v in &parsed.videos {
        files.extend(v.features.values().map(|f| dir.join(f)));
    }
    out.record("synth", &files)?;
    println!("wrote {} videos to {}", parsed.videos.len(), dir.display());
    Ok(())
}

fn read_input(path: &Path, what: &str) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {what} {}", path.display()))
}

fn experiment(run: &RunArgs) -> Result<ExperimentConfig> {
    let cfg = run.experiment();
    cfg.validate()?;
    Ok(cfg)
}

fn dataset(out: &RunDir, run: &RunArgs) -> Result<Dataset> {
    let path = run.dataset.clone().unwrap_or_else(|| out.path("data/manifest.toml"));
    if !path.exists() {
        bail!(DataError::Manifest(format!(
            "dataset manifest {} not found; pass --dataset or run `dakd synth` first",
            path.display()
        )));
    }
    Ok(DatasetManifest::load_dataset(&path)?)
}

fn artifact(out: &RunDir, given: Option<PathBuf>, default: &str, producer: &str) -> Result<PathBuf> {
    let path = given.unwrap_or_else(|| out.path(default));
    if !path.exists() {
        bail!(DataError::Manifest(format!(
            "{} not found; run `dakd {producer}` first or pass its path",
            path.display()
        )));
    }
    Ok(path)
}

fn model(path: &Path) -> Result<Model> {
    let (model, _) = load_model(path).with_context(|| format!("cannot load checkpoint {}", path.display()))?;
    Ok(model)
}

fn write_rows(path: &Path, fp: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv_writer(BufWriter::new(File::create(path)?), fp, header)?;
    for row in rows {
        w.write_record(row).map_err(DataError::from)?;
    }
    w.flush()?;
    Ok(())
}

fn num(v: f64) -> String {
    format!("{v:?}")
}

fn train_teacher(out: &RunDir, a: StageArgs) -> Result<()> {
    let cfg = experiment(&a.run)?;
    let ds = dataset(out, &a.run)?;
    let fp = cfg.fingerprint();
    let trained = fit_teacher(&ds, &cfg)?;
    let ckpt = out.path("teacher.ckpt");
    save_model(&ckpt, &trained.model, json!({"role": "teacher", "fingerprint": fp, "streams": ds.stream_names}))?;
    let loss = out.path("teacher_loss.csv");
    let rows: Vec<_> = trained
        .history
        .iter()
        .enumerate()
        .map(|(e, l)| vec![(e + 1).to_string(), num(*l)])
        .collect();
    write_rows(&loss, &fp, &["epoch", "loss"], &rows)?;
    out.record("train-teacher", &[ckpt, loss])?;
    println!("teacher trained for {} epochs, final loss {:.6}", rows.len(), trained.history.last().copied().unwrap_or(f64::NAN));
    Ok(())
}

fn refine(out: &RunDir, a: RefineArgs) -> Result<()> {
    let cfg = experiment(&a.run)?;
    let ds = dataset(out, &a.run)?;
    let teacher = model(&artifact(out, a.teacher, "teacher.ckpt", "train-teacher")?)?;
    let store = build_pseudo_labels(&teacher, &ds, &cfg.refine)?;
    let path = out.path("pseudo_labels.csv");
    store.write_csv(BufWriter::new(File::create(&path)?), &cfg.fingerprint())?;
    out.record("refine", &[path])?;
    println!("refined labels for {} training videos", store.labels.len());
    Ok(())
}

fn distill(out: &RunDir, a: DistillArgs) -> Result<()> {
    let cfg = experiment(&a.run)?;
    let ds = dataset(out, &a.run)?;
    let teacher = model(&artifact(out, a.teacher, "teacher.ckpt", "train-teacher")?)?;
    let labels_path = artifact(out, a.labels, "pseudo_labels.csv", "refine")?;
    let labels = PseudoLabelStore::read_csv(File::open(&labels_path)?, cfg.refine.epsilon)
        .with_context(|| format!("cannot read labels {}", labels_path.display()))?;
    let fp = cfg.fingerprint();
    let student = fit_student(&ds, &teacher, &labels, &cfg)?;
    let ckpt = out.path("student.ckpt");
    save_model(&ckpt, &student.model, json!({"role": "student", "fingerprint": fp, "stream": ds.stream_names[ds.student_stream]}))?;
    let hist = out.path("distill_history.csv");
    let rows: Vec<_> = student
        .history
        .iter()
        .enumerate()
        .map(|(e, h)| vec![(e + 1).to_string(), num(h.bce), num(h.nce), num(h.total)])
        .collect();
    write_rows(&hist, &fp, &["epoch", "bce", "nce", "total"], &rows)?;
    out.record("distill", &[ckpt, hist])?;
    println!("student distilled for {} epochs", rows.len());
    Ok(())
}

fn eval(out: &RunDir, a: EvalArgs) -> Result<()> {
    let cfg = experiment(&a.run)?;
    let ds = dataset(out, &a.run)?;
    let (model, default_tag) = match (&a.model, a.untrained) {
        (Some(path), _) => {
            let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into());
            (model(path)?, stem)
        }
        (None, Some(Role::Teacher)) => (
            Model::init(cfg.teacher_config(&ds), derive_seed(cfg.seed, "teacher-init"))?,
            "untrained-teacher".to_string(),
        ),
        (None, Some(Role::Student)) => (
            Model::init(cfg.student_config(&ds), derive_seed(cfg.seed, "student-init"))?,
            "untrained-student".to_string(),
        ),
        (None, None) => return Err(anyhow!(Usage("pass --model or --untrained".into()))),
    };
    let tag = a.tag.unwrap_or(default_tag);
    let fp = cfg.fingerprint();
    let (report, series) = evaluate_model(&model, &ds)?;
    let metrics = out.path(&format!("metrics_{tag}.csv"));
    report.write_csv(BufWriter::new(File::create(&metrics)?), &fp)?;
    let frames = out.path(&format!("frame_scores_{tag}.csv"));
    write_frame_scores(BufWriter::new(File::create(&frames)?), &fp, &series)?;
    out.record("eval", &[metrics, frames])?;
    println!("{tag}: {}", report.summary());
    Ok(())
}

fn ablate(out: &RunDir, a: AblateArgs) -> Result<()> {
    let cfg = experiment(&a.run)?;
    let fp = cfg.fingerprint();
    let name = a.param.as_ref().map(|n| n.replace('-', "_"));
    if let (Some(name), Some(values)) = (&name, &a.values) {
        let mut probe = cfg.clone();
        for &v in values {
            probe.set_param(name, v).map_err(|e| Usage(e.to_string()))?;
        }
    }
    let arms = match &a.arms {
        Some(names) => names
            .iter()
            .map(|n| n.parse::<Arm>().map_err(|e| Usage(e.to_string())))
            .collect::<Result<Vec<_>, _>>()?,
        None => Arm::COMPONENTS.to_vec(),
    };
    let ds = dataset(out, &a.run)?;
    let path = match (&name, &a.values) {
        (Some(name), Some(values)) => {
            let rows = sweep(&ds, &cfg, name, values, a.parallel)?;
            let path = out.path(&format!("ablation_{name}.csv"));
            let rows: Vec<_> = rows
                .iter()
                .map(|r| {
                    vec![r.param.clone(), num(r.value), r.seed.to_string(), num(r.teacher_auc), num(r.student_auc), num(r.student_ap)]
                })
                .collect();
            write_rows(&path, &fp, &["param", "value", "seed", "teacher_auc", "student_auc", "student_ap"], &rows)?;
            for r in &rows {
                println!("{}={} student AUC {}", r[0], r[1], r[4]);
            }
            path
        }
        _ => {
            let results = ablate_arms(&ds, &cfg, &arms, a.parallel)?;
            let path = out.path("ablation_components.csv");
            let rows: Vec<_> = results
                .iter()
                .map(|r| vec![r.arm.clone(), num(r.teacher_auc), num(r.student_auc), num(r.student_ap)])
                .collect();
            write_rows(&path, &fp, &["arm", "teacher_auc", "student_auc", "student_ap"], &rows)?;
            for r in &rows {
                println!("{} student AUC {}", r[0], r[2]);
            }
            path
        }
    };
    out.record("ablate", &[path])?;
    Ok(())
}
