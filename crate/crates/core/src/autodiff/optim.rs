use super::{Matrix, Tensor};
use crate::error::{bail, Result};

/// SGD with heavy-ball momentum and L2 weight decay.
///
/// `v ← momentum·v + (grad + weight_decay·θ)`, `θ ← θ − lr·v`.
/// Velocity buffers are tied to parameter position, so `step` must always
/// receive the same parameter list in the same order. Gradients are left in
/// place; zero them explicitly.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Matrix>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd { momentum, weight_decay, velocity: Vec::new() }
    }

    pub fn step(&mut self, params: &[Tensor], lr: f64) -> Result<()> {
        if lr.is_nan() || lr < 0.0 {
            bail!(InvalidArgument, "learning rate must be >= 0, got {lr}");
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Matrix::zeros(p.shape())).collect();
        } else if self.velocity.len() != params.len() {
            bail!(State, "optimizer was built for {} parameters, got {}", self.velocity.len(), params.len());
        }
        // Validate everything before mutating anything.
        for (i, p) in params.iter().enumerate() {
            match p.grad_ref().as_ref() {
                None => bail!(State, "parameter {i} has no gradient"),
                Some(g) if g.dim() != p.shape() => {
                    bail!(Shape, "parameter {i}: grad {:?} vs value {:?}", g.dim(), p.shape())
                }
                _ => {}
            }
        }
        for (p, v) in params.iter().zip(self.velocity.iter_mut()) {
            let g = p.grad_ref();
            let g = g.as_ref().expect("checked above");
            let decay = self.weight_decay;
            let m = self.momentum;
            p.update_value(|theta| {
                ndarray::Zip::from(&mut *v).and(&mut *theta).and(g).for_each(|vi, ti, &gi| {
                    *vi = m * *vi + (gi + decay * *ti);
                    *ti -= lr * *vi;
                });
            });
        }
        Ok(())
    }
}

pub fn zero_grads(params: &[Tensor]) {
    for p in params {
        p.zero_grad();
    }
}
