//! Subcommand implementations.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use dckd_core::data::{gen_blobs, load_idx, Dataset, OVERLAPPING_PAIRS};
use dckd_core::fidelity::{run_fidelity_suite, FIDELITY_TOLERANCE};
use dckd_core::losses::{CollectionMethod, KlDirection, LossWeights};
use dckd_core::metrics::{self, DEFAULT_CORRELATION_TEMPERATURE, DEFAULT_CORRELATION_THRESHOLD};
use dckd_core::models::{Checkpoint, Model};
use dckd_core::trainer::{self, DistillConfig, RunRecord, Teacher};

use crate::artifacts::{sha256_hex, StageWriter, CHECKPOINT_DIR};
use crate::config::{Arm, DatasetSpec, ExperimentConfig};
use crate::error::{CliError, Result};

pub const FIDELITY_CASES: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    TrainTeacher,
    TrainDckd,
    TrainEdckd,
    TrainEnsembled,
    Eval,
    Metrics,
    Gradcheck,
    Ablate,
    Compare,
}

impl Command {
    pub const ALL: [Command; 9] = [
        Command::TrainTeacher,
        Command::TrainDckd,
        Command::TrainEdckd,
        Command::TrainEnsembled,
        Command::Eval,
        Command::Metrics,
        Command::Gradcheck,
        Command::Ablate,
        Command::Compare,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Command::TrainTeacher => "train-teacher",
            Command::TrainDckd => "train-dckd",
            Command::TrainEdckd => "train-edckd",
            Command::TrainEnsembled => "train-ensembled",
            Command::Eval => "eval",
            Command::Metrics => "metrics",
            Command::Gradcheck => "gradcheck",
            Command::Ablate => "ablate",
            Command::Compare => "compare",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Command {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Command::ALL.into_iter().find(|c| c.as_str() == s).ok_or_else(|| format!("unknown command `{s}`"))
    }
}

pub fn run(cmd: Command, cfg: &ExperimentConfig) -> Result<()> {
    match cmd {
        Command::TrainTeacher => train_teacher(cfg).map(drop),
        Command::TrainDckd => train_dckd(cfg).map(drop),
        Command::TrainEdckd => train_edckd(cfg).map(drop),
        Command::TrainEnsembled => train_ensembled(cfg).map(drop),
        Command::Eval => eval(cfg).map(drop),
        Command::Metrics => metrics_cmd(cfg).map(drop),
        Command::Gradcheck => gradcheck(cfg).map(drop),
        Command::Ablate => ablate(cfg).map(drop),
        Command::Compare => compare(cfg).map(drop),
    }
}

/// `(train, val)` for one seed: the blobs generator and the split are both
/// seeded with it.
pub fn load_data(cfg: &ExperimentConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    let ds = match &cfg.dataset {
        DatasetSpec::Blobs { classes, per_class, dim, spread } => gen_blobs(*classes, *per_class, *dim, *spread, seed)?,
        DatasetSpec::Idx { images, labels, limit } => load_idx(images, labels, *limit)?,
    };
    Ok(ds.split(cfg.val_fraction, seed)?)
}

/// Identifies the data a checkpoint was trained on; stored in its header.
pub fn data_key(cfg: &ExperimentConfig, seed: u64) -> Result<u64> {
    let desc = match &cfg.dataset {
        DatasetSpec::Blobs { classes, per_class, dim, spread } => format!("blobs {classes} {per_class} {dim} {spread}"),
        DatasetSpec::Idx { images, labels, limit } => format!(
            "idx {} {} {limit:?}",
            sha256_hex(&std::fs::read(images)?),
            sha256_hex(&std::fs::read(labels)?)
        ),
    };
    let digest = Sha256::digest(format!("{desc} seed={seed} val={}", cfg.val_fraction).as_bytes());
    Ok(u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes")))
}

fn stage_ckpt(cfg: &ExperimentConfig, stage: &str, name: &str) -> PathBuf {
    cfg.out.join(stage).join(CHECKPOINT_DIR).join(name)
}

fn net_name(j: usize) -> String {
    format!("net{}.ckpt", j + 1)
}

fn load_prerequisite(w: &mut StageWriter, path: &Path, key: u64, sizes: &[usize], producer: &str) -> Result<Model> {
    if !path.is_file() {
        return Err(CliError::Dependency(format!("missing artifact {}; run `{producer}` first", path.display())));
    }
    let ckpt = Checkpoint::from_bytes(&w.input(path)?)?;
    ckpt.expect_config_hash(key).map_err(|_| {
        CliError::Dependency(format!("{} was trained on different data or seed; rerun `{producer}`", path.display()))
    })?;
    ckpt.expect_sizes(sizes).map_err(|e| CliError::Dependency(format!("{}: {e}; rerun `{producer}`", path.display())))?;
    Ok(Model::from_checkpoint(&ckpt)?)
}

fn load_dckd_students(cfg: &ExperimentConfig, w: &mut StageWriter, key: u64) -> Result<Vec<Model>> {
    let mut students = Vec::new();
    loop {
        let path = stage_ckpt(cfg, "dckd", &net_name(students.len()));
        if !path.is_file() && !students.is_empty() {
            break;
        }
        students.push(load_prerequisite(w, &path, key, &cfg.student_sizes, "train-dckd")?);
    }
    Ok(students)
}

fn write_record(w: &mut StageWriter, record: &RunRecord) -> Result<()> {
    let mut csv = Vec::new();
    record.write_csv(&mut csv)?;
    w.write("record.csv", &csv)?;
    w.write("summary.json", serde_json::to_string_pretty(&record.summary)?.as_bytes())?;
    Ok(())
}

fn print_run(stage: &str, record: &RunRecord) {
    let s = &record.summary;
    let nets: Vec<String> = s.ranking.iter().enumerate().map(|(j, &i)| format!("Net{}={:.4}", j + 1, s.final_top1[i])).collect();
    println!("{stage}: val top-1 {} | mean correlation number {:.3}", nets.join(" "), s.final_mean_correlation);
}

pub fn train_teacher(cfg: &ExperimentConfig) -> Result<RunRecord> {
    let seed = cfg.distill.seed;
    let (train, val) = load_data(cfg, seed)?;
    let key = data_key(cfg, seed)?;
    let (model, record) = trainer::train_teacher(&train, &val, &cfg.teacher_sizes, &cfg.distill)?;
    let mut w = StageWriter::create(&cfg.out, "teacher", "train-teacher");
    let epoch = record.summary.best_epoch.map_or(0, |e| e as u64 + 1);
    w.write(&format!("{CHECKPOINT_DIR}/teacher.ckpt"), &model.to_checkpoint(epoch, key).to_bytes())?;
    write_record(&mut w, &record)?;
    w.finish(cfg)?;
    print_run("teacher", &record);
    Ok(record)
}

fn write_students(w: &mut StageWriter, students: &[Model], epochs: usize, key: u64) -> Result<()> {
    for (j, m) in students.iter().enumerate() {
        w.write(&format!("{CHECKPOINT_DIR}/{}", net_name(j)), &m.to_checkpoint(epochs as u64, key).to_bytes())?;
    }
    Ok(())
}

pub fn train_dckd(cfg: &ExperimentConfig) -> Result<RunRecord> {
    let seed = cfg.distill.seed;
    let key = data_key(cfg, seed)?;
    let mut w = StageWriter::create(&cfg.out, "dckd", "train-dckd");
    let teacher = load_prerequisite(&mut w, &stage_ckpt(cfg, "teacher", "teacher.ckpt"), key, &cfg.teacher_sizes, "train-teacher")?;
    let (train, val) = load_data(cfg, seed)?;
    let (students, record) = trainer::train_dckd(&teacher, &cfg.student_sizes, &cfg.distill, &train, &val)?;
    write_students(&mut w, &students, cfg.distill.epochs, key)?;
    write_record(&mut w, &record)?;
    w.finish(cfg)?;
    print_run("dckd", &record);
    Ok(record)
}

pub fn train_edckd(cfg: &ExperimentConfig) -> Result<RunRecord> {
    let seed = cfg.distill.seed;
    let key = data_key(cfg, seed)?;
    let mut w = StageWriter::create(&cfg.out, "edckd", "train-edckd");
    let first_gen = load_dckd_students(cfg, &mut w, key)?;
    let (train, val) = load_data(cfg, seed)?;
    let (students, record) = trainer::train_edckd(&first_gen, &cfg.student_sizes, &cfg.distill, &train, &val)?;
    write_students(&mut w, &students, cfg.distill.epochs, key)?;
    write_record(&mut w, &record)?;
    w.finish(cfg)?;
    print_run("edckd", &record);
    Ok(record)
}

pub fn train_ensembled(cfg: &ExperimentConfig) -> Result<RunRecord> {
    let seed = cfg.distill.seed;
    let key = data_key(cfg, seed)?;
    let mut w = StageWriter::create(&cfg.out, "ensembled", "train-ensembled");
    let first_gen = load_dckd_students(cfg, &mut w, key)?;
    let (train, val) = load_data(cfg, seed)?;
    let (student, record) = trainer::train_ensembled_student(&first_gen, &cfg.student_sizes, &cfg.distill, &train, &val)?;
    w.write(&format!("{CHECKPOINT_DIR}/student.ckpt"), &student.to_checkpoint(cfg.distill.epochs as u64, key).to_bytes())?;
    write_record(&mut w, &record)?;
    w.finish(cfg)?;
    print_run("ensembled", &record);
    Ok(record)
}

/// Trained checkpoints under `out`, in stage order.
fn discover(cfg: &ExperimentConfig) -> Vec<(&'static str, String, PathBuf)> {
    let mut found = Vec::new();
    for stage in ["teacher", "dckd", "edckd", "ensembled"] {
        let single = match stage {
            "teacher" => Some("teacher.ckpt"),
            "ensembled" => Some("student.ckpt"),
            _ => None,
        };
        if let Some(name) = single {
            let path = stage_ckpt(cfg, stage, name);
            if path.is_file() {
                found.push((stage, name.to_string(), path));
            }
            continue;
        }
        for j in 0.. {
            let path = stage_ckpt(cfg, stage, &net_name(j));
            if !path.is_file() {
                break;
            }
            found.push((stage, net_name(j), path));
        }
    }
    found
}

fn load_all(cfg: &ExperimentConfig, w: &mut StageWriter, key: u64) -> Result<Vec<(&'static str, String, Model)>> {
    let found = discover(cfg);
    if found.is_empty() {
        return Err(CliError::Dependency(format!(
            "no checkpoints under {}; run a train-* command first",
            cfg.out.display()
        )));
    }
    let mut out = Vec::with_capacity(found.len());
    for (stage, name, path) in found {
        let sizes = if stage == "teacher" { &cfg.teacher_sizes } else { &cfg.student_sizes };
        out.push((stage, name, load_prerequisite(w, &path, key, sizes, &format!("train-{stage}"))?));
    }
    Ok(out)
}

fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(header).map_err(csv_err)?;
    for r in rows {
        wtr.write_record(r).map_err(csv_err)?;
    }
    wtr.into_inner().map_err(|e| CliError::Io(std::io::Error::other(e.to_string())))
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Io(std::io::Error::other(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    pub stage: String,
    pub checkpoint: String,
    pub seed: u64,
    pub top1: f64,
    pub top5: f64,
}

pub fn eval(cfg: &ExperimentConfig) -> Result<Vec<EvalRow>> {
    let seed = cfg.distill.seed;
    let key = data_key(cfg, seed)?;
    let mut w = StageWriter::create(&cfg.out, "eval", "eval");
    let models = load_all(cfg, &mut w, key)?;
    let (_, val) = load_data(cfg, seed)?;
    let mut rows = Vec::new();
    for (stage, name, model) in &models {
        let (top1, top5) = metrics::evaluate(model, &val)?;
        println!("{stage}/{name}: top-1 {top1:.4} top-5 {top5:.4}");
        rows.push(EvalRow { stage: stage.to_string(), checkpoint: name.clone(), seed: model.seed(), top1, top5 });
    }
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![r.stage.clone(), r.checkpoint.clone(), r.seed.to_string(), r.top1.to_string(), r.top5.to_string()])
        .collect();
    w.write("eval.csv", &csv_bytes(&["stage", "checkpoint", "seed", "top1", "top5"], &table)?)?;
    w.finish(cfg)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub stage: String,
    pub checkpoint: String,
    pub mean_correlation: f64,
    pub mean_entropy: f64,
    pub profiles: Vec<metrics::AccumulationProfile>,
}

pub fn metrics_cmd(cfg: &ExperimentConfig) -> Result<Vec<MetricsRow>> {
    let seed = cfg.distill.seed;
    let key = data_key(cfg, seed)?;
    let mut w = StageWriter::create(&cfg.out, "metrics", "metrics");
    let models = load_all(cfg, &mut w, key)?;
    let (_, val) = load_data(cfg, seed)?;
    let (t, thr) = (DEFAULT_CORRELATION_TEMPERATURE, DEFAULT_CORRELATION_THRESHOLD);
    let mut rows = Vec::new();
    for (stage, name, model) in &models {
        let mean_correlation = metrics::mean_correlation_number(model, &val, t, thr)?;
        let mean_entropy = metrics::mean_entropy(model, &val, t)?;
        let profiles = (0..val.num_classes)
            .filter(|&c| val.labels.contains(&c))
            .map(|c| metrics::class_accumulation(model, &val, c, t))
            .collect::<dckd_core::Result<Vec<_>>>()?;
        println!("{stage}/{name}: mean correlation number {mean_correlation:.3}, mean entropy {mean_entropy:.4}");
        if matches!(cfg.dataset, DatasetSpec::Blobs { .. }) {
            for (a, b) in OVERLAPPING_PAIRS {
                if let Some(p) = profiles.iter().find(|p| p.class_index == a) {
                    if b < p.profile.len() {
                        println!("  class {a}: peak p[{b}] = {:.3}, secondary peaks {:?}", p.profile[b], p.secondary_peaks(thr));
                    }
                }
            }
        }
        rows.push(MetricsRow { stage: stage.to_string(), checkpoint: name.clone(), mean_correlation, mean_entropy, profiles });
    }
    let corr: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![r.stage.clone(), r.checkpoint.clone(), r.mean_correlation.to_string(), r.mean_entropy.to_string()])
        .collect();
    w.write("correlation.csv", &csv_bytes(&["stage", "checkpoint", "mean_correlation", "mean_entropy"], &corr)?)?;
    let mut prof = Vec::new();
    for r in &rows {
        for p in &r.profiles {
            for (c, (mx, mean)) in p.profile.iter().zip(&p.mean).enumerate() {
                prof.push(vec![r.stage.clone(), r.checkpoint.clone(), p.class_index.to_string(), c.to_string(), mx.to_string(), mean.to_string()]);
            }
        }
    }
    w.write("profiles.csv", &csv_bytes(&["stage", "checkpoint", "class", "output_class", "max_prob", "mean_prob"], &prof)?)?;
    w.finish(cfg)?;
    Ok(rows)
}

pub fn gradcheck(cfg: &ExperimentConfig) -> Result<f64> {
    let report = run_fidelity_suite(FIDELITY_CASES, cfg.distill.seed)?;
    let mut w = StageWriter::create(&cfg.out, "gradcheck", "gradcheck");
    w.write("report.json", serde_json::to_string_pretty(&report)?.as_bytes())?;
    w.finish(cfg)?;
    println!("{:e}", report.max_rel_error);
    if report.max_rel_error < FIDELITY_TOLERANCE {
        Ok(report.max_rel_error)
    } else {
        Err(CliError::GradCheck { error: report.max_rel_error, tolerance: FIDELITY_TOLERANCE })
    }
}

/// One arm's students for one seed, Net order (best first).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmOutcome {
    pub arm: Arm,
    pub top1: Vec<f64>,
    pub top5: Vec<f64>,
    pub correlation: Vec<f64>,
    pub record: RunRecord,
    #[serde(skip)]
    pub checkpoints: Vec<Vec<u8>>,
}

impl ArmOutcome {
    pub fn net1_top1(&self) -> f64 {
        self.top1[0]
    }

    pub fn mean_top1(&self) -> f64 {
        mean(&self.top1)
    }

    pub fn mean_correlation(&self) -> f64 {
        mean(&self.correlation)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TeacherOutcome {
    pub top1: f64,
    pub top5: f64,
    pub correlation: f64,
    pub record: RunRecord,
    #[serde(skip)]
    pub checkpoint: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub teacher: Option<TeacherOutcome>,
    pub arms: Vec<ArmOutcome>,
}

impl SeedOutcome {
    pub fn arm(&self, arm: Arm) -> Option<&ArmOutcome> {
        self.arms.iter().find(|a| a.arm == arm)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareReport {
    pub seeds: Vec<SeedOutcome>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn arm_outcome(arm: Arm, models: &[Model], record: RunRecord, val: &Dataset, epochs: usize, key: u64) -> Result<ArmOutcome> {
    let s = &record.summary;
    let top1 = s.ranking.iter().map(|&i| s.final_top1[i]).collect();
    let top5 = s.ranking.iter().map(|&i| s.final_top5[i]).collect();
    let correlation = models
        .iter()
        .map(|m| metrics::mean_correlation_number(m, val, DEFAULT_CORRELATION_TEMPERATURE, DEFAULT_CORRELATION_THRESHOLD))
        .collect::<dckd_core::Result<_>>()?;
    let checkpoints = models.iter().map(|m| m.to_checkpoint(epochs as u64, key).to_bytes()).collect();
    Ok(ArmOutcome { arm, top1, top5, correlation, record, checkpoints })
}

/// Every configured arm for one seed; students are seeded `seed, seed+1, ...`
/// in every arm.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedOutcome> {
    let d = cfg.distill_for(seed);
    let (train, val) = load_data(cfg, seed)?;
    let key = data_key(cfg, seed)?;
    let sizes = &cfg.student_sizes;
    let seeds: Vec<u64> = (0..d.num_students as u64).map(|i| seed + i).collect();

    let teacher = if cfg.arms.iter().any(|a| a.needs_teacher()) {
        let (model, record) = trainer::train_teacher(&train, &val, &cfg.teacher_sizes, &d)?;
        let (top1, top5) = metrics::evaluate(&model, &val)?;
        let correlation =
            metrics::mean_correlation_number(&model, &val, DEFAULT_CORRELATION_TEMPERATURE, DEFAULT_CORRELATION_THRESHOLD)?;
        let epoch = record.summary.best_epoch.map_or(0, |e| e as u64 + 1);
        let checkpoint = model.to_checkpoint(epoch, key).to_bytes();
        Some((model, TeacherOutcome { top1, top5, correlation, record, checkpoint }))
    } else {
        None
    };
    let t = teacher.as_ref().map(|(m, _)| Teacher::Model(m));

    let mut arms = Vec::new();
    let mut dckd_students: Option<Vec<Model>> = None;
    for arm in Arm::ALL.into_iter().filter(|a| cfg.arms.contains(a)) {
        let (models, record) = match arm {
            Arm::BaselineCe => {
                let c = DistillConfig { weights: LossWeights::cross_entropy_only(), ..d };
                trainer::train_students(None, sizes, &seeds, &c, &train, &val, arm.as_str())?
            }
            Arm::KdOnly => {
                let c = DistillConfig { weights: LossWeights { beta_col: 0.0, ..d.weights }, ..d };
                trainer::train_students(t, sizes, &seeds, &c, &train, &val, arm.as_str())?
            }
            Arm::Dckd => {
                let teacher = &teacher.as_ref().expect("teacher trained").0;
                trainer::train_dckd(teacher, sizes, &d, &train, &val)?
            }
            Arm::Edckd => {
                let first = dckd_students.as_ref().expect("dckd runs first");
                trainer::train_edckd(first, sizes, &d, &train, &val)?
            }
            Arm::Ensembled => {
                let first = dckd_students.as_ref().expect("dckd runs first");
                let (m, r) = trainer::train_ensembled_student(first, sizes, &d, &train, &val)?;
                (vec![m], r)
            }
        };
        arms.push(arm_outcome(arm, &models, record, &val, d.epochs, key)?);
        if arm == Arm::Dckd {
            dckd_students = Some(models);
        }
    }
    Ok(SeedOutcome { seed, teacher: teacher.map(|(_, o)| o), arms })
}

/// Runs every arm over the seed list (seeds in parallel) without writing.
pub fn run_compare(cfg: &ExperimentConfig) -> Result<CompareReport> {
    let seeds = cfg.seeds.par_iter().map(|&s| run_seed(cfg, s)).collect::<Result<Vec<_>>>()?;
    Ok(CompareReport { seeds })
}

pub fn compare(cfg: &ExperimentConfig) -> Result<CompareReport> {
    let report = run_compare(cfg)?;
    let mut w = StageWriter::create(&cfg.out, "compare", "compare");
    let mut rows = Vec::new();
    for s in &report.seeds {
        let sd = s.seed;
        if let Some(t) = &s.teacher {
            rows.push(vec![sd.to_string(), "teacher".into(), "1".into(), sd.to_string(), t.top1.to_string(), t.top5.to_string(), t.correlation.to_string()]);
            w.write(&format!("{CHECKPOINT_DIR}/seed{sd}/teacher.ckpt"), &t.checkpoint)?;
            let mut csv = Vec::new();
            t.record.write_csv(&mut csv)?;
            w.write(&format!("records/seed{sd}_teacher.csv"), &csv)?;
        }
        for a in &s.arms {
            for (j, ckpt) in a.checkpoints.iter().enumerate() {
                let student_seed = a.record.summary.student_seeds[a.record.summary.ranking[j]];
                rows.push(vec![
                    sd.to_string(),
                    a.arm.to_string(),
                    (j + 1).to_string(),
                    student_seed.to_string(),
                    a.top1[j].to_string(),
                    a.top5[j].to_string(),
                    a.correlation[j].to_string(),
                ]);
                w.write(&format!("{CHECKPOINT_DIR}/seed{sd}/{}_{}", a.arm, net_name(j)), ckpt)?;
            }
            let mut csv = Vec::new();
            a.record.write_csv(&mut csv)?;
            w.write(&format!("records/seed{sd}_{}.csv", a.arm), &csv)?;
        }
    }
    let header = ["seed", "arm", "net", "student_seed", "top1", "top5", "mean_correlation"];
    w.write("compare.csv", &csv_bytes(&header, &rows)?)?;
    w.write("summary.json", serde_json::to_string_pretty(&report)?.as_bytes())?;
    w.finish(cfg)?;

    println!("{:<6} {:<12} {:>10} {:>10} {:>12}", "seed", "arm", "net1_top1", "mean_top1", "correlation");
    for s in &report.seeds {
        if let Some(t) = &s.teacher {
            println!("{:<6} {:<12} {:>10.4} {:>10.4} {:>12.3}", s.seed, "teacher", t.top1, t.top1, t.correlation);
        }
        for a in &s.arms {
            println!("{:<6} {:<12} {:>10.4} {:>10.4} {:>12.3}", s.seed, a.arm.as_str(), a.net1_top1(), a.mean_top1(), a.mean_correlation());
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblateRow {
    pub direction: KlDirection,
    pub method: CollectionMethod,
    pub n: usize,
    pub seed: u64,
    pub net: usize,
    pub top1: f64,
}

/// Two settings that differ in one factor, averaged over seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    /// `"direction"` or `"method"`.
    pub factor: String,
    pub n: usize,
    /// Value of the other factor, held fixed.
    pub held: String,
    pub a: String,
    pub b: String,
    pub net1_a: f64,
    pub net1_b: f64,
    pub mean_a: f64,
    pub mean_b: f64,
}

impl Comparison {
    pub fn label(&self) -> String {
        format!("{}_vs_{}", self.a, self.b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblateReport {
    pub rows: Vec<AblateRow>,
    pub comparisons: Vec<Comparison>,
}

struct SeedData {
    seed: u64,
    train: Dataset,
    val: Dataset,
    teacher: Checkpoint,
}

/// Sweeps direction × method × N over the seed list. Teachers are trained
/// once per seed; every arm then runs in parallel from a rebuilt copy.
pub fn run_ablate(cfg: &ExperimentConfig) -> Result<AblateReport> {
    let prepared = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let (train, val) = load_data(cfg, seed)?;
            let (model, _) = trainer::train_teacher(&train, &val, &cfg.teacher_sizes, &cfg.distill_for(seed))?;
            Ok(SeedData { seed, train, val, teacher: model.to_checkpoint(0, 0) })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut grid = Vec::new();
    for &n in &cfg.ablate_students {
        for &method in &cfg.ablate_methods {
            for &direction in &cfg.ablate_directions {
                for sd in &prepared {
                    grid.push((direction, method, n, sd));
                }
            }
        }
    }
    let per_arm = grid
        .par_iter()
        .map(|&(direction, method, n, sd)| {
            let teacher = Model::from_checkpoint(&sd.teacher)?;
            let d = DistillConfig { direction, method, num_students: n, ..cfg.distill_for(sd.seed) };
            let (_, record) = trainer::train_dckd(&teacher, &cfg.student_sizes, &d, &sd.train, &sd.val)?;
            let s = &record.summary;
            Ok(s.ranking
                .iter()
                .enumerate()
                .map(|(j, &i)| AblateRow { direction, method, n, seed: sd.seed, net: j + 1, top1: s.final_top1[i] })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<AblateRow> = per_arm.into_iter().flatten().collect();

    let stats = |dir: KlDirection, m: CollectionMethod, n: usize| {
        let sel: Vec<&AblateRow> = rows.iter().filter(|r| r.direction == dir && r.method == m && r.n == n).collect();
        let net1: Vec<f64> = sel.iter().filter(|r| r.net == 1).map(|r| r.top1).collect();
        let all: Vec<f64> = sel.iter().map(|r| r.top1).collect();
        (mean(&net1), mean(&all))
    };
    let mut comparisons = Vec::new();
    for &n in &cfg.ablate_students {
        for &m in &cfg.ablate_methods {
            for (i, &da) in cfg.ablate_directions.iter().enumerate() {
                for &db in &cfg.ablate_directions[i + 1..] {
                    let ((na, ma), (nb, mb)) = (stats(da, m, n), stats(db, m, n));
                    comparisons.push(Comparison {
                        factor: "direction".into(),
                        n,
                        held: m.to_string(),
                        a: da.to_string(),
                        b: db.to_string(),
                        net1_a: na,
                        net1_b: nb,
                        mean_a: ma,
                        mean_b: mb,
                    });
                }
            }
        }
        for &dir in &cfg.ablate_directions {
            for (i, &ma_) in cfg.ablate_methods.iter().enumerate() {
                for &mb_ in &cfg.ablate_methods[i + 1..] {
                    let ((na, ma), (nb, mb)) = (stats(dir, ma_, n), stats(dir, mb_, n));
                    comparisons.push(Comparison {
                        factor: "method".into(),
                        n,
                        held: dir.to_string(),
                        a: ma_.to_string(),
                        b: mb_.to_string(),
                        net1_a: na,
                        net1_b: nb,
                        mean_a: ma,
                        mean_b: mb,
                    });
                }
            }
        }
    }
    Ok(AblateReport { rows, comparisons })
}

pub fn ablate(cfg: &ExperimentConfig) -> Result<AblateReport> {
    let report = run_ablate(cfg)?;
    let mut w = StageWriter::create(&cfg.out, "ablate", "ablate");
    let rows: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| {
            vec![r.direction.to_string(), r.method.to_string(), r.n.to_string(), r.seed.to_string(), r.net.to_string(), r.top1.to_string()]
        })
        .collect();
    w.write("ablate.csv", &csv_bytes(&["direction", "method", "n", "seed", "net", "top1"], &rows)?)?;
    let comps: Vec<Vec<String>> = report
        .comparisons
        .iter()
        .map(|c| {
            vec![
                c.label(),
                c.factor.clone(),
                c.n.to_string(),
                c.held.clone(),
                c.net1_a.to_string(),
                c.net1_b.to_string(),
                (c.net1_a - c.net1_b).to_string(),
                c.mean_a.to_string(),
                c.mean_b.to_string(),
                (c.mean_a - c.mean_b).to_string(),
            ]
        })
        .collect();
    let header = ["comparison", "factor", "n", "held", "net1_a", "net1_b", "net1_delta", "mean_a", "mean_b", "mean_delta"];
    w.write("comparison.csv", &csv_bytes(&header, &comps)?)?;
    w.finish(cfg)?;

    println!("{:<28} {:>3} {:<14} {:>8} {:>8} {:>8}", "comparison", "N", "held", "net1_a", "net1_b", "delta");
    for c in &report.comparisons {
        println!(
            "{:<28} {:>3} {:<14} {:>8.4} {:>8.4} {:>+8.4}",
            c.label(),
            c.n,
            c.held,
            c.net1_a,
            c.net1_b,
            c.net1_a - c.net1_b
        );
    }
    Ok(report)
}
