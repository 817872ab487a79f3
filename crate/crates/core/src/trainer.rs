//! Training protocols: teacher pretraining, simultaneous multi-student
//! distillation, second-generation distillation from the student ensemble,
//! and the single ensembled student.

use std::fmt::Write as _;
use std::io::Write;

use serde::Serialize;

use crate::autodiff::{backward, softmax_rows, zero_grads, Matrix, Sgd, Tensor};
use crate::data::{batches, Dataset};
use crate::error::{bail, Result};
use crate::losses::{total_loss, CollectionMethod, CollectiveLoss, KlDirection, LossWeights, LOG_EPS};
use crate::metrics::{self, DEFAULT_CORRELATION_TEMPERATURE, DEFAULT_CORRELATION_THRESHOLD};
use crate::models::{build_mlp, Model};

/// SGDR-style cosine schedule with warm restarts, evaluated per epoch.
///
/// Cycle `i` lasts `t0·t_mult^i` epochs; inside a cycle the rate decays from
/// `lr0` to `lr_min` along half a cosine.
pub fn cosine_warm_restart_lr(epoch: i64, lr0: f64, lr_min: f64, t0: usize, t_mult: usize) -> Result<f64> {
    if epoch < 0 {
        bail!(InvalidArgument, "epoch must be >= 0, got {epoch}");
    }
    if t0 == 0 || t_mult == 0 {
        bail!(InvalidArgument, "t0 and t_mult must be >= 1 (got {t0}, {t_mult})");
    }
    let mut t_cur = epoch as u64;
    let mut t_i = t0 as u64;
    while t_cur >= t_i {
        t_cur -= t_i;
        t_i *= t_mult as u64;
    }
    let cos = (std::f64::consts::PI * t_cur as f64 / t_i as f64).cos();
    Ok(lr_min + 0.5 * (lr0 - lr_min) * (1.0 + cos))
}

/// Epochs at which the first `count` cycles end (cumulative).
pub fn cycle_boundaries(t0: usize, t_mult: usize, count: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(count);
    let (mut end, mut len) = (0, t0);
    for _ in 0..count {
        end += len;
        out.push(end);
        len *= t_mult;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DistillConfig {
    pub weights: LossWeights,
    pub method: CollectionMethod,
    pub direction: KlDirection,
    pub simultaneous: bool,
    pub num_students: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub t0: usize,
    pub t_mult: usize,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            weights: LossWeights::default(),
            method: CollectionMethod::LogitMax,
            direction: KlDirection::Reverse,
            simultaneous: true,
            num_students: 3,
            epochs: 90,
            batch_size: 64,
            lr0: 0.05,
            lr_min: 0.0,
            momentum: 0.9,
            weight_decay: 5e-4,
            t0: 30,
            t_mult: 2,
            seed: 7,
        }
    }
}

impl DistillConfig {
    pub fn loss(&self) -> CollectiveLoss {
        CollectiveLoss { weights: self.weights, method: self.method, direction: self.direction, simultaneous: self.simultaneous }
    }

    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        cosine_warm_restart_lr(epoch as i64, self.lr0, self.lr_min, self.t0, self.t_mult)
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch_size == 0 {
            bail!(InvalidArgument, "batch_size must be >= 1");
        }
        if self.t0 == 0 || self.t_mult == 0 {
            bail!(InvalidArgument, "t0 and t_mult must be >= 1");
        }
        if !(self.lr0 >= 0.0 && self.lr_min >= 0.0) {
            bail!(InvalidArgument, "learning rates must be >= 0");
        }
        Ok(())
    }
}

/// Per-student numbers for one epoch. Loss terms are unweighted batch means
/// averaged over the epoch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudentEpoch {
    pub ce: f64,
    pub kd: f64,
    pub col: f64,
    pub loss: f64,
    pub val_top1: f64,
    pub val_top5: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    /// Per student, in initialization order.
    pub students: Vec<StudentEpoch>,
    /// Validation correlation number at T=4, threshold 0.1, averaged over students.
    pub mean_correlation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub kind: String,
    pub num_students: usize,
    pub student_seeds: Vec<u64>,
    pub final_top1: Vec<f64>,
    pub final_top5: Vec<f64>,
    /// Initialization indices ordered by final top-1, best first (Net1, Net2, ...).
    pub ranking: Vec<usize>,
    pub final_mean_correlation: f64,
    /// Selected epoch when the best-validation model is kept.
    pub best_epoch: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub rows: Vec<EpochRow>,
    pub summary: RunSummary,
}

impl RunRecord {
    pub fn last_row(&self) -> Option<&EpochRow> {
        self.rows.last()
    }

    /// One row per epoch; `s{i}_*` columns per student.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let n = self.summary.num_students;
        let mut header = String::from("epoch,lr,mean_correlation");
        for i in 0..n {
            for col in ["ce", "kd", "col", "loss", "top1", "top5"] {
                write!(header, ",s{i}_{col}").unwrap();
            }
        }
        writeln!(w, "{header}")?;
        for row in &self.rows {
            let mut line = format!("{},{},{}", row.epoch, row.lr, row.mean_correlation);
            for s in &row.students {
                write!(line, ",{},{},{},{},{},{}", s.ce, s.kd, s.col, s.loss, s.val_top1, s.val_top5).unwrap();
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

/// Source of `p_T` in the distillation term.
#[derive(Debug, Clone, Copy)]
pub enum Teacher<'a> {
    Model(&'a Model),
    /// Mean softmax of frozen models, used through pseudo-logits `ln(p + 1e-12)`.
    Ensemble(&'a [Model]),
}

impl Teacher<'_> {
    fn dims(&self) -> Result<(usize, usize)> {
        match self {
            Teacher::Model(m) => Ok((m.input_dim(), m.num_classes())),
            Teacher::Ensemble(ms) => {
                let Some(first) = ms.first() else {
                    bail!(InvalidArgument, "ensemble teacher needs at least one model");
                };
                Ok((first.input_dim(), first.num_classes()))
            }
        }
    }

    /// Detached logits for a batch.
    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        match self {
            Teacher::Model(m) => m.predict(x),
            Teacher::Ensemble(ms) => Ok(ensemble_prob(ms, x)?.mapv(|p| (p + LOG_EPS).ln())),
        }
    }
}

/// Mean of the models' `softmax(y)` at `T = 1`.
pub fn ensemble_prob(models: &[Model], x: &Matrix) -> Result<Matrix> {
    let Some(first) = models.first() else {
        bail!(InvalidArgument, "ensemble of zero models");
    };
    let mut acc = Matrix::zeros((x.nrows(), first.num_classes()));
    for m in models {
        if m.num_classes() != first.num_classes() {
            bail!(Shape, "ensemble members disagree on class count");
        }
        acc += &*softmax_rows(&Tensor::constant(m.predict(x)?), 1.0)?.value();
    }
    Ok(acc / models.len() as f64)
}

fn check_splits(train: &Dataset, val: &Dataset) -> Result<()> {
    if train.is_empty() || val.is_empty() {
        bail!(InvalidArgument, "train and validation splits must be non-empty");
    }
    if train.dim() != val.dim() || train.num_classes != val.num_classes {
        bail!(Shape, "train/validation splits disagree on shape");
    }
    Ok(())
}

fn check_sizes(sizes: &[usize], ds: &Dataset, who: &str) -> Result<()> {
    if sizes.len() < 2 {
        bail!(InvalidArgument, "{who} sizes need input and output, got {sizes:?}");
    }
    if sizes[0] != ds.dim() || *sizes.last().unwrap() != ds.num_classes {
        bail!(Shape, "{who} sizes {sizes:?} do not fit data with {} features and {} classes", ds.dim(), ds.num_classes);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Keep {
    Final,
    BestVal,
}

/// Trains one student per entry of `seeds` jointly: per batch, each
/// student's composite loss is built, the losses are summed, and a single
/// backward pass feeds one SGD step over every student's parameters.
///
/// Returns the students ordered by final validation top-1 (best first).
pub fn train_students(
    teacher: Option<Teacher<'_>>,
    student_sizes: &[usize],
    seeds: &[u64],
    cfg: &DistillConfig,
    train: &Dataset,
    val: &Dataset,
    kind: &str,
) -> Result<(Vec<Model>, RunRecord)> {
    fit(teacher, student_sizes, seeds, cfg, train, val, kind, Keep::Final)
}

#[allow(clippy::too_many_arguments)]
fn fit(
    teacher: Option<Teacher<'_>>,
    student_sizes: &[usize],
    seeds: &[u64],
    cfg: &DistillConfig,
    train: &Dataset,
    val: &Dataset,
    kind: &str,
    keep: Keep,
) -> Result<(Vec<Model>, RunRecord)> {
    cfg.validate()?;
    check_splits(train, val)?;
    check_sizes(student_sizes, train, "student")?;
    if seeds.is_empty() {
        bail!(InvalidArgument, "need at least one student");
    }
    if let Some(t) = &teacher {
        let (d, c) = t.dims()?;
        if d != train.dim() || c != train.num_classes {
            bail!(Shape, "teacher maps {d} features to {c} classes; data has {} and {}", train.dim(), train.num_classes);
        }
    }
    if cfg.weights.beta_kd > 0.0 && teacher.is_none() {
        bail!(InvalidArgument, "beta_kd > 0 requires a teacher");
    }

    let students = seeds.iter().map(|&s| build_mlp(student_sizes, s)).collect::<Result<Vec<_>>>()?;
    let params: Vec<Tensor> = students.iter().flat_map(|m| m.params()).collect();
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let loss = cfg.loss();
    let n = students.len();
    let mut best: Option<(f64, usize, Vec<Model>)> = None;
    let mut rows = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch)?;
        let mut sums = vec![[0.0f64; 4]; n];
        for batch in batches(train, cfg.batch_size, cfg.seed, epoch as u64)? {
            let teacher_logits = match &teacher {
                Some(t) if cfg.weights.beta_kd > 0.0 => Some(Tensor::constant(t.logits(&batch.features)?)),
                _ => None,
            };
            let logits = students.iter().map(|m| m.forward(&batch.features)).collect::<Result<Vec<_>>>()?;
            let mut per = Vec::with_capacity(n);
            let weight = batch.labels.len() as f64;
            for (k, acc) in sums.iter_mut().enumerate() {
                let l = loss.student_loss(&batch.labels, teacher_logits.as_ref(), &logits, k)?;
                acc[0] += weight * l.ce;
                acc[1] += weight * l.kd;
                acc[2] += weight * l.col;
                acc[3] += weight * l.total.item();
                per.push(l.total);
            }
            let root = total_loss(&per)?;
            zero_grads(&params);
            backward(&root)?;
            opt.step(&params, lr)?;
        }

        let mut row_students = Vec::with_capacity(n);
        let mut corr = 0.0;
        for (m, acc) in students.iter().zip(&sums) {
            let (top1, top5) = metrics::evaluate(m, val)?;
            corr += metrics::mean_correlation_number(m, val, DEFAULT_CORRELATION_TEMPERATURE, DEFAULT_CORRELATION_THRESHOLD)?;
            let denom = train.len() as f64;
            row_students.push(StudentEpoch {
                ce: acc[0] / denom,
                kd: acc[1] / denom,
                col: acc[2] / denom,
                loss: acc[3] / denom,
                val_top1: top1,
                val_top5: top5,
            });
        }
        if keep == Keep::BestVal {
            let top1 = row_students[0].val_top1;
            if best.as_ref().is_none_or(|(b, _, _)| top1 > *b) {
                best = Some((top1, epoch, students.iter().map(Model::deep_clone).collect()));
            }
        }
        rows.push(EpochRow { epoch, lr, students: row_students, mean_correlation: corr / n as f64 });
    }

    let (models, best_epoch) = match best {
        Some((_, epoch, models)) => (models, Some(epoch)),
        None => (students, None),
    };
    // Summary metrics describe the returned models.
    let mut final_top1 = Vec::with_capacity(n);
    let mut final_top5 = Vec::with_capacity(n);
    let mut corr = 0.0;
    for m in &models {
        let (t1, t5) = metrics::evaluate(m, val)?;
        final_top1.push(t1);
        final_top5.push(t5);
        corr += metrics::mean_correlation_number(m, val, DEFAULT_CORRELATION_TEMPERATURE, DEFAULT_CORRELATION_THRESHOLD)?;
    }
    let mut ranking: Vec<usize> = (0..n).collect();
    ranking.sort_by(|&a, &b| final_top1[b].total_cmp(&final_top1[a]));
    let summary = RunSummary {
        kind: kind.to_string(),
        num_students: n,
        student_seeds: seeds.to_vec(),
        final_top1,
        final_top5,
        ranking: ranking.clone(),
        final_mean_correlation: corr / n as f64,
        best_epoch,
    };
    let mut slots: Vec<Option<Model>> = models.into_iter().map(Some).collect();
    let ordered = ranking.iter().map(|&i| slots[i].take().expect("ranking is a permutation")).collect();
    Ok((ordered, RunRecord { rows, summary }))
}

/// Supervised cross-entropy training; keeps the best-validation epoch.
pub fn train_teacher(train: &Dataset, val: &Dataset, sizes: &[usize], cfg: &DistillConfig) -> Result<(Model, RunRecord)> {
    let cfg = DistillConfig { weights: LossWeights::cross_entropy_only(), num_students: 1, ..*cfg };
    let (mut models, record) = fit(None, sizes, &[cfg.seed], &cfg, train, val, "teacher", Keep::BestVal)?;
    Ok((models.remove(0), record))
}

fn student_seeds(cfg: &DistillConfig) -> Vec<u64> {
    (0..cfg.num_students as u64).map(|i| cfg.seed + i).collect()
}

/// Collective distillation from a frozen teacher; students seeded
/// `seed, seed+1, ...`.
pub fn train_dckd(
    teacher: &Model,
    student_sizes: &[usize],
    cfg: &DistillConfig,
    train: &Dataset,
    val: &Dataset,
) -> Result<(Vec<Model>, RunRecord)> {
    if cfg.num_students < 2 {
        bail!(InvalidArgument, "collective distillation needs at least 2 students, got {}", cfg.num_students);
    }
    train_students(Some(Teacher::Model(teacher)), student_sizes, &student_seeds(cfg), cfg, train, val, "dckd")
}

/// Second generation: the ensemble of frozen first-generation students acts
/// as the teacher.
pub fn train_edckd(
    dckd_students: &[Model],
    student_sizes: &[usize],
    cfg: &DistillConfig,
    train: &Dataset,
    val: &Dataset,
) -> Result<(Vec<Model>, RunRecord)> {
    if cfg.num_students < 2 {
        bail!(InvalidArgument, "collective distillation needs at least 2 students, got {}", cfg.num_students);
    }
    train_students(Some(Teacher::Ensemble(dckd_students)), student_sizes, &student_seeds(cfg), cfg, train, val, "edckd")
}

/// One student distilled from the ensemble of frozen students, without a
/// collection term.
pub fn train_ensembled_student(
    dckd_students: &[Model],
    student_sizes: &[usize],
    cfg: &DistillConfig,
    train: &Dataset,
    val: &Dataset,
) -> Result<(Model, RunRecord)> {
    let cfg = DistillConfig { weights: LossWeights { beta_col: 0.0, ..cfg.weights }, num_students: 1, ..*cfg };
    let (mut models, record) =
        train_students(Some(Teacher::Ensemble(dckd_students)), student_sizes, &[cfg.seed], &cfg, train, val, "ensembled")?;
    Ok((models.remove(0), record))
}
