//! Distillation loss algebra.
//!
//! Every loss reduces over the batch with a mean, so the β weights do not
//! depend on batch size. All logs carry a `1e-12` epsilon.
//!
//! Argument order follows `kld(u, v) = Σ u·ln(u/v)`. The collection loss in
//! the reverse direction is `kld(p̂_student, p̂_collection)`: the student's own
//! distribution is the first argument, so minimizing it may raise the
//! student's entropy.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{elementwise_max_set, log_softmax_rows, softmax_rows, sum_set, Matrix, Tensor};
use crate::error::{bail, Error, Result};

pub const LOG_EPS: f64 = 1e-12;

/// How the peers' outputs are merged into one collective target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollectionMethod {
    /// Per-class max over logits; result stays in logit space.
    LogitMax,
    /// Per-class max over probabilities, renormalized per row.
    ProbMax,
    /// Per-class mean over probabilities.
    Average,
}

impl CollectionMethod {
    pub const ALL: [CollectionMethod; 3] =
        [CollectionMethod::LogitMax, CollectionMethod::ProbMax, CollectionMethod::Average];

    pub fn as_str(self) -> &'static str {
        match self {
            CollectionMethod::LogitMax => "logit_max",
            CollectionMethod::ProbMax => "prob_max",
            CollectionMethod::Average => "average",
        }
    }

    /// Whether `collect` returns logits (true) or probabilities.
    pub fn in_logit_space(self) -> bool {
        matches!(self, CollectionMethod::LogitMax)
    }
}

impl fmt::Display for CollectionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CollectionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CollectionMethod::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown collection method `{s}` (expected logit_max, prob_max or average)")))
    }
}

/// Which side of the collection divergence is the first argument.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `kld(p̂_collection, p̂_student)`
    Forward,
    /// `kld(p̂_student, p̂_collection)`
    #[default]
    Reverse,
    /// Mean of both directions.
    Bidirectional,
}

impl KlDirection {
    pub const ALL: [KlDirection; 3] = [KlDirection::Forward, KlDirection::Reverse, KlDirection::Bidirectional];

    pub fn as_str(self) -> &'static str {
        match self {
            KlDirection::Forward => "forward",
            KlDirection::Reverse => "reverse",
            KlDirection::Bidirectional => "bidirectional",
        }
    }
}

impl fmt::Display for KlDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for KlDirection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        KlDirection::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown KL direction `{s}` (expected forward, reverse or bidirectional)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub beta_ce: f64,
    pub beta_kd: f64,
    pub beta_col: f64,
    pub t_kd: f64,
    pub t_kld: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { beta_ce: 1.0, beta_kd: 1.0, beta_col: 0.5, t_kd: 4.0, t_kld: 2.0 }
    }
}

impl LossWeights {
    /// Weights used for the 1000-class setting: smaller collection weight.
    pub fn large_scale() -> Self {
        LossWeights { beta_col: 0.2, ..Self::default() }
    }

    /// Plain supervised training.
    pub fn cross_entropy_only() -> Self {
        LossWeights { beta_kd: 0.0, beta_col: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("beta_ce", self.beta_ce), ("beta_kd", self.beta_kd), ("beta_col", self.beta_col)] {
            if !(b.is_finite() && b >= 0.0) {
                bail!(InvalidArgument, "{name} must be a finite value >= 0, got {b}");
            }
        }
        for (name, t) in [("t_kd", self.t_kd), ("t_kld", self.t_kld)] {
            if !(t.is_finite() && t > 0.0) {
                bail!(InvalidArgument, "{name} must be positive, got {t}");
            }
        }
        if self.beta_ce == 0.0 && self.beta_kd == 0.0 && self.beta_col == 0.0 {
            bail!(InvalidArgument, "at least one loss weight must be positive");
        }
        Ok(())
    }
}

/// One-hot rows for integer labels.
pub fn one_hot(labels: &[usize], num_classes: usize) -> Result<Matrix> {
    let mut m = Matrix::zeros((labels.len(), num_classes));
    for (r, &c) in labels.iter().enumerate() {
        if c >= num_classes {
            bail!(InvalidInput, "label {c} out of range for {num_classes} classes");
        }
        m[[r, c]] = 1.0;
    }
    Ok(m)
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        bail!(Shape, "{op}: {:?} vs {:?}", a.shape(), b.shape());
    }
    Ok(())
}

fn check_rows_normalized(op: &str, p: &Tensor, tol: f64) -> Result<()> {
    let v = p.value();
    if v.iter().any(|&x| x < 0.0 || !x.is_finite()) {
        bail!(InvalidInput, "{op}: negative or non-finite probability");
    }
    for (r, row) in v.rows().into_iter().enumerate() {
        let s = row.sum();
        if (s - 1.0).abs() > tol {
            bail!(InvalidInput, "{op}: row {r} sums to {s}");
        }
    }
    Ok(())
}

fn batch_mean_neg(t: &Tensor, batch: usize) -> Tensor {
    t.sum().scale(-1.0 / batch as f64)
}

/// Soft cross-entropy: batch mean of `−Σ_c target_c · log softmax(pred/T)_c`.
///
/// The target is differentiated through when it is a live graph node.
pub fn cross_entropy_soft(target: &Tensor, pred_logits: &Tensor, temperature: f64) -> Result<Tensor> {
    same_shape("cross_entropy_soft", target, pred_logits)?;
    check_rows_normalized("cross_entropy_soft", target, 1e-4)?;
    let log_p = log_softmax_rows(pred_logits, temperature)?;
    Ok(batch_mean_neg(&target.mul(&log_p)?, target.rows()))
}

/// Batch mean of `−Σ_c p_c ln p_c`.
pub fn entropy(p: &Tensor) -> Result<Tensor> {
    if p.value().iter().any(|&x| x < 0.0) {
        bail!(InvalidInput, "entropy: negative probability");
    }
    Ok(batch_mean_neg(&p.mul(&p.ln_eps(LOG_EPS))?, p.rows()))
}

/// Batch mean of `Σ_c u_c ln(u_c / v_c)`.
pub fn kld(u: &Tensor, v: &Tensor) -> Result<Tensor> {
    same_shape("kld", u, v)?;
    let log_ratio = u.ln_eps(LOG_EPS).sub(&v.ln_eps(LOG_EPS))?;
    Ok(u.mul(&log_ratio)?.sum().scale(1.0 / u.rows() as f64))
}

/// KL divergence from log-probabilities, avoiding the round trip through
/// probabilities on the first argument's log.
fn kld_from_logs(log_u: &Tensor, log_v: &Tensor) -> Result<Tensor> {
    let log_ratio = log_u.sub(log_v)?;
    Ok(log_u.exp().mul(&log_ratio)?.sum().scale(1.0 / log_u.rows() as f64))
}

/// Temperature-softened teacher-to-student cross-entropy.
///
/// No `T²` rescaling is applied; the β weights carry the scale.
pub fn kd_loss(teacher_logits: &Tensor, student_logits: &Tensor, t_kd: f64) -> Result<Tensor> {
    if teacher_logits.requires_grad() {
        bail!(InvalidArgument, "kd_loss: teacher logits must be detached");
    }
    let target = softmax_rows(teacher_logits, t_kd)?;
    cross_entropy_soft(&target, student_logits, t_kd)
}

/// Builds a collective target from a set of logit matrices, optionally
/// leaving out one member.
pub fn collect(method: CollectionMethod, logit_set: &[Tensor], exclude: Option<usize>) -> Result<Tensor> {
    if let Some(k) = exclude {
        if k >= logit_set.len() {
            bail!(InvalidArgument, "exclude index {k} out of range for {} members", logit_set.len());
        }
    }
    let members: Vec<Tensor> = logit_set
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != exclude)
        .map(|(_, t)| t.clone())
        .collect();
    if members.is_empty() {
        bail!(InvalidArgument, "collection set is empty after exclusion");
    }
    match method {
        CollectionMethod::LogitMax => elementwise_max_set(&members),
        CollectionMethod::ProbMax => {
            let probs = members.iter().map(|y| softmax_rows(y, 1.0)).collect::<Result<Vec<_>>>()?;
            let peak = elementwise_max_set(&probs)?;
            peak.div_rows(&peak.row_sums())
        }
        CollectionMethod::Average => {
            let probs = members.iter().map(|y| softmax_rows(y, 1.0)).collect::<Result<Vec<_>>>()?;
            Ok(sum_set(&probs)?.scale(1.0 / probs.len() as f64))
        }
    }
}

/// Divergence between a student's softened output and its collective target.
///
/// Probability-space collections are softened through pseudo-logits
/// `ln(p + 1e-12)`. With `simultaneous == false` the collection is detached so
/// only the student side is optimized.
pub fn collection_loss(
    student_logits: &Tensor,
    collection: &Tensor,
    method: CollectionMethod,
    t_kld: f64,
    direction: KlDirection,
    simultaneous: bool,
) -> Result<Tensor> {
    same_shape("collection_loss", student_logits, collection)?;
    let col = if simultaneous { collection.clone() } else { collection.detach() };
    let col_logits = if method.in_logit_space() { col } else { col.ln_eps(LOG_EPS) };
    let log_student = log_softmax_rows(student_logits, t_kld)?;
    let log_col = log_softmax_rows(&col_logits, t_kld)?;
    match direction {
        KlDirection::Reverse => kld_from_logs(&log_student, &log_col),
        KlDirection::Forward => kld_from_logs(&log_col, &log_student),
        KlDirection::Bidirectional => {
            let fwd = kld_from_logs(&log_col, &log_student)?;
            let rev = kld_from_logs(&log_student, &log_col)?;
            Ok(fwd.add(&rev)?.scale(0.5))
        }
    }
}

/// Configuration of the per-student composite objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollectiveLoss {
    pub weights: LossWeights,
    pub method: CollectionMethod,
    pub direction: KlDirection,
    pub simultaneous: bool,
}

impl Default for CollectiveLoss {
    fn default() -> Self {
        CollectiveLoss {
            weights: LossWeights::default(),
            method: CollectionMethod::LogitMax,
            direction: KlDirection::Reverse,
            simultaneous: true,
        }
    }
}

/// A student's loss node with its unweighted terms (0 when a term is off).
#[derive(Debug, Clone)]
pub struct StudentLoss {
    pub total: Tensor,
    pub ce: f64,
    pub kd: f64,
    pub col: f64,
}

impl CollectiveLoss {
    /// `β_CE·CE(p_h, p_k) + β_KD·KD(p_T, p_k) + β_Col·Col({p_i}, p_k)`.
    ///
    /// Terms with a zero weight are not built, so `teacher_logits` may be
    /// `None` when `β_KD == 0`.
    pub fn student_loss(
        &self,
        hard_labels: &[usize],
        teacher_logits: Option<&Tensor>,
        student_logits: &[Tensor],
        k: usize,
    ) -> Result<StudentLoss> {
        let w = &self.weights;
        w.validate()?;
        let n = student_logits.len();
        if k >= n {
            bail!(InvalidArgument, "student index {k} out of range for {n} students");
        }
        if w.beta_col > 0.0 && n < 2 {
            bail!(InvalidArgument, "collection loss needs at least 2 students, got {n}");
        }
        let own = &student_logits[k];
        if hard_labels.len() != own.rows() {
            bail!(Shape, "{} labels for a batch of {}", hard_labels.len(), own.rows());
        }

        let mut terms = Vec::with_capacity(3);
        let mut out = StudentLoss { total: Tensor::scalar(0.0), ce: 0.0, kd: 0.0, col: 0.0 };
        if w.beta_ce > 0.0 {
            let target = Tensor::constant(one_hot(hard_labels, own.cols())?);
            let ce = cross_entropy_soft(&target, own, 1.0)?;
            out.ce = ce.item();
            terms.push(ce.scale(w.beta_ce));
        }
        if w.beta_kd > 0.0 {
            let Some(teacher) = teacher_logits else {
                bail!(InvalidArgument, "beta_kd > 0 but no teacher logits were given");
            };
            let kd = kd_loss(teacher, own, w.t_kd)?;
            out.kd = kd.item();
            terms.push(kd.scale(w.beta_kd));
        }
        if w.beta_col > 0.0 {
            let collection = collect(self.method, student_logits, Some(k))?;
            let col = collection_loss(own, &collection, self.method, w.t_kld, self.direction, self.simultaneous)?;
            out.col = col.item();
            terms.push(col.scale(w.beta_col));
        }
        out.total = sum_set(&terms)?;
        Ok(out)
    }
}

/// Sum of the per-student losses; one backward pass from here trains every
/// student at once.
pub fn total_loss(per_student: &[Tensor]) -> Result<Tensor> {
    if per_student.is_empty() {
        bail!(InvalidArgument, "total_loss of an empty list");
    }
    sum_set(per_student)
}
