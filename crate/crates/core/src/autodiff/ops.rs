use ndarray::{Array2, Axis, Zip};

use super::{Matrix, Op, Tensor};
use crate::error::{bail, Result};

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        bail!(Shape, "{op}: {:?} vs {:?}", a.shape(), b.shape());
    }
    Ok(())
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t.is_finite() && t > 0.0) {
        bail!(InvalidArgument, "temperature must be positive and finite, got {t}");
    }
    Ok(())
}

fn check_finite(op: &str, x: &Tensor) -> Result<()> {
    if x.value().iter().any(|v| !v.is_finite()) {
        bail!(InvalidInput, "{op}: non-finite entry in input");
    }
    Ok(())
}

fn softmax_values(x: &Matrix, t: f64) -> Matrix {
    let mut out = x / t;
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

fn log_softmax_values(x: &Matrix, t: f64) -> Matrix {
    let mut out = x / t;
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Row-wise softmax of `logits / temperature`.
pub fn softmax_rows(logits: &Tensor, temperature: f64) -> Result<Tensor> {
    check_temperature(temperature)?;
    check_finite("softmax_rows", logits)?;
    let v = softmax_values(&logits.value(), temperature);
    Ok(Tensor::from_op(v, Op::Softmax(logits.clone(), temperature)))
}

/// Row-wise log-softmax of `logits / temperature`, via log-sum-exp.
pub fn log_softmax_rows(logits: &Tensor, temperature: f64) -> Result<Tensor> {
    check_temperature(temperature)?;
    check_finite("log_softmax_rows", logits)?;
    let v = log_softmax_values(&logits.value(), temperature);
    Ok(Tensor::from_op(v, Op::LogSoftmax(logits.clone(), temperature)))
}

/// Per-cell maximum over a set of equally shaped matrices.
///
/// Ties go to the lowest index; the backward pass sends each cell's gradient
/// to the winning member only.
pub fn elementwise_max_set(set: &[Tensor]) -> Result<Tensor> {
    let Some(first) = set.first() else {
        bail!(InvalidArgument, "elementwise_max_set: empty set");
    };
    let shape = first.shape();
    for (i, t) in set.iter().enumerate() {
        if t.shape() != shape {
            bail!(Shape, "elementwise_max_set: member {i} is {:?}, expected {:?}", t.shape(), shape);
        }
    }
    let mut out = first.to_array();
    let mut winner = vec![0usize; out.len()];
    for (i, t) in set.iter().enumerate().skip(1) {
        let v = t.value();
        for ((o, w), x) in out.iter_mut().zip(winner.iter_mut()).zip(v.iter()) {
            if *x > *o {
                *o = *x;
                *w = i;
            }
        }
    }
    Ok(Tensor::from_op(out, Op::MaxSet(set.to_vec(), winner)))
}

/// Elementwise sum of a non-empty set of equally shaped tensors.
pub fn sum_set(set: &[Tensor]) -> Result<Tensor> {
    let Some(first) = set.first() else {
        bail!(InvalidArgument, "sum_set: empty set");
    };
    let mut out = first.to_array();
    for t in &set[1..] {
        same_shape("sum_set", first, t)?;
        out += &*t.value();
    }
    Ok(Tensor::from_op(out, Op::SumSet(set.to_vec())))
}

impl Tensor {
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (_, k) = self.shape();
        let (k2, _) = rhs.shape();
        if k != k2 {
            bail!(Shape, "matmul: {:?} x {:?}", self.shape(), rhs.shape());
        }
        let v = self.value().dot(&*rhs.value());
        Ok(Tensor::from_op(v, Op::MatMul(self.clone(), rhs.clone())))
    }

    /// Adds a 1×cols row vector to every row.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        if bias.rows() != 1 || bias.cols() != self.cols() {
            bail!(Shape, "add_bias: input {:?}, bias {:?}", self.shape(), bias.shape());
        }
        let v = &*self.value() + &*bias.value();
        Ok(Tensor::from_op(v, Op::AddBias(self.clone(), bias.clone())))
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape("add", self, rhs)?;
        let v = &*self.value() + &*rhs.value();
        Ok(Tensor::from_op(v, Op::Add(self.clone(), rhs.clone())))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, rhs)?;
        let v = &*self.value() - &*rhs.value();
        Ok(Tensor::from_op(v, Op::Sub(self.clone(), rhs.clone())))
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, rhs)?;
        let v = &*self.value() * &*rhs.value();
        Ok(Tensor::from_op(v, Op::Mul(self.clone(), rhs.clone())))
    }

    pub fn scale(&self, k: f64) -> Tensor {
        let v = &*self.value() * k;
        Tensor::from_op(v, Op::Scale(self.clone(), k))
    }

    pub fn relu(&self) -> Tensor {
        let v = self.value().mapv(|x| x.max(0.0));
        Tensor::from_op(v, Op::Relu(self.clone()))
    }

    pub fn exp(&self) -> Tensor {
        let v = self.value().mapv(f64::exp);
        Tensor::from_op(v, Op::Exp(self.clone()))
    }

    /// `ln(x + eps)`
    pub fn ln_eps(&self, eps: f64) -> Tensor {
        let v = self.value().mapv(|x| (x + eps).ln());
        Tensor::from_op(v, Op::LnEps(self.clone(), eps))
    }

    /// Divides row `r` by `divisor[r, 0]`.
    pub fn div_rows(&self, divisor: &Tensor) -> Result<Tensor> {
        if divisor.shape() != (self.rows(), 1) {
            bail!(Shape, "div_rows: input {:?}, divisor {:?}", self.shape(), divisor.shape());
        }
        let v = &*self.value() / &*divisor.value();
        Ok(Tensor::from_op(v, Op::DivRows(self.clone(), divisor.clone())))
    }

    /// rows×1 column of row sums.
    pub fn row_sums(&self) -> Tensor {
        let v = self.value().sum_axis(Axis(1)).insert_axis(Axis(1));
        Tensor::from_op(v, Op::RowSums(self.clone()))
    }

    pub fn sum(&self) -> Tensor {
        let v = Array2::from_elem((1, 1), self.value().sum());
        Tensor::from_op(v, Op::Sum(self.clone()))
    }

    pub fn mean(&self) -> Tensor {
        let n = self.value().len() as f64;
        let v = Array2::from_elem((1, 1), self.value().sum() / n);
        Tensor::from_op(v, Op::Mean(self.clone()))
    }
}

/// Vector-Jacobian product: gradients for each parent of `node`, in
/// `Op::parents` order. `None` means the parent gets nothing.
pub(super) fn vjp(node: &Tensor, g: &Matrix) -> Vec<Option<Matrix>> {
    match &node.0.op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) => {
            let ga = a.requires_grad().then(|| g.dot(&b.value().t()));
            let gb = b.requires_grad().then(|| a.value().t().dot(g));
            vec![ga, gb]
        }
        Op::AddBias(_, _) => {
            let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
            vec![Some(g.clone()), Some(gb)]
        }
        Op::Add(..) => vec![Some(g.clone()), Some(g.clone())],
        Op::Sub(..) => vec![Some(g.clone()), Some(-g)],
        Op::Mul(a, b) => {
            let ga = a.requires_grad().then(|| g * &*b.value());
            let gb = b.requires_grad().then(|| g * &*a.value());
            vec![ga, gb]
        }
        Op::Scale(_, k) => vec![Some(g * *k)],
        Op::Relu(a) => {
            let mut ga = g.clone();
            Zip::from(&mut ga).and(&*a.value()).for_each(|gi, &x| {
                if x <= 0.0 {
                    *gi = 0.0;
                }
            });
            vec![Some(ga)]
        }
        Op::Exp(_) => vec![Some(g * &*node.value())],
        Op::LnEps(a, eps) => vec![Some(g / &a.value().mapv(|x| x + eps))],
        Op::Softmax(_, t) => {
            let s = node.value();
            let mut ga = g * &*s;
            for (mut row, srow) in ga.rows_mut().into_iter().zip(s.rows()) {
                let dot = row.sum();
                Zip::from(&mut row).and(&srow).for_each(|r, &si| *r = (*r - dot * si) / t);
            }
            vec![Some(ga)]
        }
        Op::LogSoftmax(_, t) => {
            let ls = node.value();
            let mut ga = g.clone();
            for (mut row, lrow) in ga.rows_mut().into_iter().zip(ls.rows()) {
                let total = row.sum();
                Zip::from(&mut row).and(&lrow).for_each(|r, &l| *r = (*r - total * l.exp()) / t);
            }
            vec![Some(ga)]
        }
        Op::MaxSet(set, winner) => {
            let mut grads: Vec<Option<Matrix>> = set
                .iter()
                .map(|t| t.requires_grad().then(|| Array2::zeros(t.shape())))
                .collect();
            let cols = g.ncols();
            for (idx, (&w, &gv)) in winner.iter().zip(g.iter()).enumerate() {
                if let Some(gm) = grads[w].as_mut() {
                    gm[[idx / cols, idx % cols]] += gv;
                }
            }
            grads
        }
        Op::SumSet(set) => set.iter().map(|t| t.requires_grad().then(|| g.clone())).collect(),
        Op::DivRows(a, d) => {
            let dv = d.value();
            let ga = a.requires_grad().then(|| g / &*dv);
            let gd = d.requires_grad().then(|| {
                let num = (g * &*a.value()).sum_axis(Axis(1)).insert_axis(Axis(1));
                -(num / (&*dv * &*dv))
            });
            vec![ga, gd]
        }
        Op::RowSums(a) => {
            let ga = g.broadcast(a.shape()).expect("rows×1 broadcasts").to_owned();
            vec![Some(ga)]
        }
        Op::Sum(a) => vec![Some(Array2::from_elem(a.shape(), g[[0, 0]]))],
        Op::Mean(a) => {
            let n = a.value().len() as f64;
            vec![Some(Array2::from_elem(a.shape(), g[[0, 0]] / n))]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{backward, grad_check};
    use ndarray::array;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_fixtures() {
        let s = softmax_rows(&Tensor::constant(array![[0.0, 0.0]]), 1.0).unwrap();
        assert_eq!(s.to_array(), array![[0.5, 0.5]]);

        let s = softmax_rows(&Tensor::constant(array![[2f64.ln(), 0.0]]), 1.0).unwrap();
        assert!(close(s.value()[[0, 0]], 2.0 / 3.0, 1e-15));
        assert!(close(s.value()[[0, 1]], 1.0 / 3.0, 1e-15));

        let e = std::f64::consts::E;
        let s = softmax_rows(&Tensor::constant(array![[2.0, 0.0]]), 2.0).unwrap();
        assert!(close(s.value()[[0, 0]], e / (e + 1.0), 1e-15));
        assert!(close(s.value()[[0, 1]], 1.0 / (e + 1.0), 1e-15));
    }

    #[test]
    fn softmax_rejects_bad_temperature_and_nan() {
        let x = Tensor::constant(array![[1.0, 2.0]]);
        assert!(matches!(softmax_rows(&x, 0.0), Err(crate::Error::InvalidArgument(_))));
        assert!(matches!(softmax_rows(&x, -1.0), Err(crate::Error::InvalidArgument(_))));
        let nan = Tensor::constant(array![[f64::NAN, 0.0]]);
        assert!(matches!(softmax_rows(&nan, 1.0), Err(crate::Error::InvalidInput(_))));
        assert!(matches!(log_softmax_rows(&nan, 1.0), Err(crate::Error::InvalidInput(_))));
    }

    #[test]
    fn log_softmax_fixtures() {
        let l = log_softmax_rows(&Tensor::constant(array![[0.0, 0.0]]), 1.0).unwrap();
        let ln2 = 2f64.ln();
        assert!(close(l.value()[[0, 0]], -ln2, 1e-15));
        assert!(close(l.value()[[0, 1]], -ln2, 1e-15));

        let l = log_softmax_rows(&Tensor::constant(array![[1000.0, 0.0]]), 1.0).unwrap();
        assert!(l.value().iter().all(|v| v.is_finite()));
        assert!(close(l.value()[[0, 0]], 0.0, 1e-12));
        assert!(close(l.value()[[0, 1]], -1000.0, 1e-9));
    }

    #[test]
    fn max_set_fixtures() {
        let a = Tensor::param(array![[1.0, 3.0]]);
        let b = Tensor::param(array![[2.0, 0.0]]);
        let m = elementwise_max_set(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(m.to_array(), array![[2.0, 3.0]]);
        backward(&m.sum()).unwrap();
        assert_eq!(a.grad().unwrap(), array![[0.0, 1.0]]);
        assert_eq!(b.grad().unwrap(), array![[1.0, 0.0]]);

        let single = elementwise_max_set(std::slice::from_ref(&a)).unwrap();
        assert_eq!(single.to_array(), a.to_array());
    }

    #[test]
    fn max_set_ties_go_to_lowest_index() {
        let a = Tensor::param(array![[1.0]]);
        let b = Tensor::param(array![[1.0]]);
        backward(&elementwise_max_set(&[a.clone(), b.clone()]).unwrap().sum()).unwrap();
        assert_eq!(a.grad().unwrap()[[0, 0]], 1.0);
        assert_eq!(b.grad().unwrap()[[0, 0]], 0.0);
    }

    #[test]
    fn max_set_errors() {
        assert!(matches!(elementwise_max_set(&[]), Err(crate::Error::InvalidArgument(_))));
        let a = Tensor::param(array![[1.0, 3.0]]);
        let b = Tensor::param(array![[2.0]]);
        assert!(matches!(elementwise_max_set(&[a, b]), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn max_set_matches_finite_differences() {
        let a = Tensor::param(array![[1.0, 3.0], [0.2, -1.0]]);
        let b = Tensor::param(array![[2.0, 0.0], [0.5, -2.0]]);
        let w = Tensor::constant(array![[0.3, -1.2], [2.0, 0.7]]);
        let params = [a.clone(), b.clone()];
        let err = grad_check(
            || Ok(elementwise_max_set(&[a.clone(), b.clone()])?.mul(&w)?.sum()),
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn shape_errors_are_loud() {
        let a = Tensor::param(Array2::zeros((2, 3)));
        let b = Tensor::param(Array2::zeros((2, 2)));
        assert!(matches!(a.add(&b), Err(crate::Error::Shape(_))));
        assert!(matches!(a.matmul(&a), Err(crate::Error::Shape(_))));
        assert!(matches!(a.add_bias(&Tensor::param(Array2::zeros((1, 2)))), Err(crate::Error::Shape(_))));
        assert!(matches!(a.add_bias(&Tensor::param(Array2::zeros((2, 3)))), Err(crate::Error::Shape(_))));
    }

    fn matrix(rows: usize, cols: usize, scale: f64) -> impl Strategy<Value = Matrix> {
        proptest::collection::vec(-1.0f64..1.0, rows * cols)
            .prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap() * scale)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]

        #[test]
        fn softmax_rows_sum_to_one(x in matrix(4, 7, 50.0), t in 0.05f64..20.0) {
            let s = softmax_rows(&Tensor::constant(x), t).unwrap();
            for row in s.value().rows() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn softmax_shift_invariant(x in matrix(3, 5, 5.0), shift in matrix(3, 1, 100.0), t in 0.5f64..8.0) {
            let shifted = &x + &shift;
            let a = softmax_rows(&Tensor::constant(x), t).unwrap().to_array();
            let b = softmax_rows(&Tensor::constant(shifted), t).unwrap().to_array();
            for (p, q) in a.iter().zip(b.iter()) {
                prop_assert!((p - q).abs() < 1e-9);
            }
        }

        #[test]
        fn exp_log_softmax_is_softmax(x in matrix(3, 6, 4.0), t in 0.5f64..8.0) {
            let x = Tensor::constant(x);
            let s = softmax_rows(&x, t).unwrap().to_array();
            let l = log_softmax_rows(&x, t).unwrap().to_array();
            for (p, lp) in s.iter().zip(l.iter()) {
                prop_assert!((p - lp.exp()).abs() < 1e-12);
            }
        }

        #[test]
        fn op_gradients_match_finite_differences(
            x in matrix(3, 4, 2.0),
            w in matrix(4, 4, 1.0),
            bias in matrix(1, 4, 1.0),
            mix in matrix(3, 4, 1.0),
            t in 0.5f64..4.0,
        ) {
            let xp = Tensor::param(x);
            let wp = Tensor::param(w);
            let bp = Tensor::param(bias);
            let mix = Tensor::constant(mix);
            let params = [xp.clone(), wp.clone(), bp.clone()];
            let f = || -> Result<Tensor> {
                let h = xp.matmul(&wp)?.add_bias(&bp)?;
                let s = softmax_rows(&h, t)?;
                let l = log_softmax_rows(&h, t)?;
                let e = h.scale(0.3).exp();
                let p = s.div_rows(&e.row_sums())?;
                let lf = s.ln_eps(1e-12);
                let combo = p.mul(&mix)?.add(&l.mul(&s)?)?.sub(&lf.scale(0.1))?;
                Ok(sum_set(&[combo, e.scale(0.01)])?.mean())
            };
            let err = grad_check(f, &params, 1e-5).unwrap();
            prop_assert!(err < 1e-4, "max relative error {}", err);
        }
    }
}
