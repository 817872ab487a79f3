//! Randomized finite-difference checks of the full multi-student objective.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::autodiff::{grad_check, softmax_rows, Matrix, Tensor};
use crate::error::{bail, Result};
use crate::losses::{total_loss, CollectionMethod, CollectiveLoss, KlDirection, LossWeights};
use crate::models::{Activation, Model};

pub const FIDELITY_EPS: f64 = 1e-5;
pub const FIDELITY_TOLERANCE: f64 = 1e-4;
/// Instances whose max-collection has a near tie closer than this are redrawn.
pub const MIN_MAX_GAP: f64 = 1e-3;

/// One random instance of the summed objective.
#[derive(Debug, Clone, Serialize)]
pub struct CaseReport {
    pub students: usize,
    pub classes: usize,
    pub batch: usize,
    pub method: CollectionMethod,
    pub direction: KlDirection,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FidelityReport {
    pub cases: Vec<CaseReport>,
    pub redrawn: usize,
    pub max_rel_error: f64,
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Array2::from_shape_simple_fn((rows, cols), || scale * rng.sample::<f64, _>(StandardNormal))
}

/// Smallest gap between the two largest members at any entry, over every
/// leave-one-out collection that takes an elementwise max.
fn min_max_gap(method: CollectionMethod, logits: &[Matrix]) -> Result<f64> {
    let members: Vec<Matrix> = match method {
        CollectionMethod::Average => return Ok(f64::INFINITY),
        CollectionMethod::LogitMax => logits.to_vec(),
        CollectionMethod::ProbMax => logits
            .iter()
            .map(|y| softmax_rows(&Tensor::constant(y.clone()), 1.0).map(|p| p.to_array()))
            .collect::<Result<_>>()?,
    };
    let mut gap = f64::INFINITY;
    for k in 0..members.len() {
        let rest: Vec<&Matrix> = members.iter().enumerate().filter(|(i, _)| *i != k).map(|(_, m)| m).collect();
        if rest.len() < 2 {
            continue;
        }
        for idx in 0..rest[0].len() {
            let (r, c) = (idx / rest[0].ncols(), idx % rest[0].ncols());
            let mut vals: Vec<f64> = rest.iter().map(|m| m[[r, c]]).collect();
            vals.sort_by(|a, b| b.total_cmp(a));
            gap = gap.min(vals[0] - vals[1]);
        }
    }
    Ok(gap)
}

/// Runs `cases` random instances (2-3 affine students, 3-10 classes,
/// batch 1-8, random method, direction, weights and temperatures) and
/// reports the worst relative error against central differences.
///
/// The collection is left attached: a detached target is a stop-gradient
/// whose update is not the derivative of the loss value.
pub fn run_fidelity_suite(cases: usize, seed: u64) -> Result<FidelityReport> {
    if cases == 0 {
        bail!(InvalidArgument, "need at least one case");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::with_capacity(cases);
    let mut redrawn = 0usize;
    while reports.len() < cases {
        let n = rng.random_range(2..=3usize);
        let c = rng.random_range(3..=10usize);
        let b = rng.random_range(1..=8usize);
        let d = rng.random_range(2..=4usize);
        let method = CollectionMethod::ALL[rng.random_range(0..3)];
        let direction = KlDirection::ALL[rng.random_range(0..3)];
        let weights = LossWeights {
            beta_ce: rng.random_range(0.1..1.5),
            beta_kd: rng.random_range(0.1..1.5),
            beta_col: rng.random_range(0.1..1.5),
            t_kd: rng.random_range(1.0..6.0),
            t_kld: rng.random_range(1.0..4.0),
        };
        let x = normal_matrix(&mut rng, b, d, 1.0);
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
        let teacher = Tensor::constant(normal_matrix(&mut rng, b, c, 2.0));
        let students = (0..n)
            .map(|i| {
                let w = normal_matrix(&mut rng, d, c, 1.0);
                let bias = normal_matrix(&mut rng, 1, c, 0.5);
                Model::from_layers(vec![(w, bias, Activation::None)], i as u64)
            })
            .collect::<Result<Vec<_>>>()?;

        let base: Vec<Matrix> = students.iter().map(|m| m.predict(&x)).collect::<Result<_>>()?;
        if min_max_gap(method, &base)? < MIN_MAX_GAP {
            redrawn += 1;
            continue;
        }

        let loss = CollectiveLoss { weights, method, direction, simultaneous: true };
        let params: Vec<Tensor> = students.iter().flat_map(|m| m.params()).collect();
        let objective = || {
            let logits = students.iter().map(|m| m.forward(&x)).collect::<Result<Vec<_>>>()?;
            let per = (0..n)
                .map(|k| loss.student_loss(&labels, Some(&teacher), &logits, k).map(|l| l.total))
                .collect::<Result<Vec<_>>>()?;
            total_loss(&per)
        };
        let err = grad_check(objective, &params, FIDELITY_EPS)?;
        reports.push(CaseReport { students: n, classes: c, batch: b, method, direction, max_rel_error: err });
    }
    let max_rel_error = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    Ok(FidelityReport { cases: reports, redrawn, max_rel_error })
}
