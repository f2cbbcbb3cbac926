//! Eager Wengert tape over dense matrices.
//!
//! Values are computed when a node is recorded, so callers can inspect
//! intermediate scalars (e.g. per-task losses) before deciding how to combine
//! them and which node to differentiate.

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Scalar function of a flat input with a closed-form gradient.
pub trait ScalarField: Send + Sync + std::fmt::Debug {
    fn value_grad(&self, x: &[f64]) -> (f64, Vec<f64>);

    fn value(&self, x: &[f64]) -> f64 {
        self.value_grad(x).0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulT(usize, usize),
    AddBias(usize, usize),
    Relu(usize),
    Tanh(usize),
    SoftmaxCe { logits: usize, probs: Matrix, targets: Matrix },
    Mse { pred: usize, targets: Matrix },
    Affine(Vec<(f64, usize)>),
    Field { input: usize, grad: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints of every node with respect to one differentiated output.
#[derive(Debug)]
pub struct Adjoints {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Adjoints {
    /// Gradient with respect to `v`; zeros if `v` does not influence the output.
    pub fn wrt(&self, v: Var) -> Matrix {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

fn check_finite(m: &Matrix, context: &str) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            context: context.to_string(),
        })
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// `a · b`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(Error::shape("matmul", av.cols(), bv.rows()));
        }
        let out = av.matmul(bv);
        check_finite(&out, "matmul")?;
        Ok(self.push(out, Op::MatMul(a.0, b.0)))
    }

    /// `x · wᵀ`, the dense-layer product for weights stored `n_out × n_in`.
    pub fn matmul_t(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.cols() != wv.cols() {
            return Err(Error::shape("linear", wv.cols(), xv.cols()));
        }
        let out = xv.matmul_t(wv);
        check_finite(&out, "linear")?;
        Ok(self.push(out, Op::MatMulT(x.0, w.0)))
    }

    /// Adds a `1 × d` bias row to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Error::shape(
                "bias",
                format!("1x{}", xv.cols()),
                format!("{}x{}", bv.rows(), bv.cols()),
            ));
        }
        let b = bv.data();
        let mut out = xv.clone();
        let cols = out.cols();
        for row in out.data_mut().chunks_mut(cols.max(1)) {
            for (o, bi) in row.iter_mut().zip(b) {
                *o += bi;
            }
        }
        check_finite(&out, "bias-add")?;
        Ok(self.push(out, Op::AddBias(x.0, bias.0)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(out, Op::Relu(x.0))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        self.push(out, Op::Tanh(x.0))
    }

    /// Mean cross-entropy of row-wise softmax against target distributions.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &Matrix) -> Result<Var> {
        let z = self.value(logits);
        if z.shape() != targets.shape() {
            return Err(Error::shape(
                "cross-entropy targets",
                format!("{}x{}", z.rows(), z.cols()),
                format!("{}x{}", targets.rows(), targets.cols()),
            ));
        }
        let (n, c) = z.shape();
        let mut probs = Matrix::zeros(n, c);
        let mut loss = 0.0;
        for r in 0..n {
            let row = z.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_sum = sum.ln();
            for k in 0..c {
                let log_p = row[k] - max - log_sum;
                probs.set(r, k, log_p.exp());
                loss -= targets.get(r, k) * log_p;
            }
        }
        loss /= n as f64;
        let out = Matrix::scalar(loss);
        check_finite(&out, "softmax-cross-entropy")?;
        Ok(self.push(
            out,
            Op::SoftmaxCe {
                logits: logits.0,
                probs,
                targets: targets.clone(),
            },
        ))
    }

    /// Mean squared error averaged over rows and output columns.
    pub fn mse(&mut self, pred: Var, targets: &Matrix) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != targets.shape() {
            return Err(Error::shape(
                "mse targets",
                format!("{}x{}", p.rows(), p.cols()),
                format!("{}x{}", targets.rows(), targets.cols()),
            ));
        }
        let count = p.len().max(1) as f64;
        let sum: f64 = p
            .data()
            .iter()
            .zip(targets.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let out = Matrix::scalar(sum / count);
        check_finite(&out, "mse")?;
        Ok(self.push(
            out,
            Op::Mse {
                pred: pred.0,
                targets: targets.clone(),
            },
        ))
    }

    /// `Σ c_k · x_k` over same-shaped nodes.
    pub fn affine(&mut self, terms: &[(f64, Var)]) -> Result<Var> {
        let Some(&(_, first)) = terms.first() else {
            return Err(Error::Precondition("affine combination needs a term".into()));
        };
        let shape = self.value(first).shape();
        let mut out = Matrix::zeros(shape.0, shape.1);
        for &(c, v) in terms {
            let val = self.value(v);
            if val.shape() != shape {
                return Err(Error::shape(
                    "affine term",
                    format!("{}x{}", shape.0, shape.1),
                    format!("{}x{}", val.rows(), val.cols()),
                ));
            }
            for (o, x) in out.data_mut().iter_mut().zip(val.data()) {
                *o += c * x;
            }
        }
        check_finite(&out, "affine combination")?;
        Ok(self.push(out, Op::Affine(terms.iter().map(|&(c, v)| (c, v.0)).collect())))
    }

    /// Applies a closed-form scalar field to the flattened value of `input`.
    pub fn field(&mut self, input: Var, f: &dyn ScalarField) -> Result<Var> {
        let (value, grad) = f.value_grad(self.value(input).data());
        let out = Matrix::scalar(value);
        check_finite(&out, "scalar field")?;
        if grad.len() != self.value(input).len() {
            return Err(Error::shape("scalar field gradient", self.value(input).len(), grad.len()));
        }
        Ok(self.push(out, Op::Field { input: input.0, grad }))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Adjoints> {
        if self.value(output).shape() != (1, 1) {
            return Err(Error::shape("backward output", "1x1", {
                let (r, c) = self.value(output).shape();
                format!("{r}x{c}")
            }));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Matrix::scalar(1.0));

        fn accumulate(slot: &mut Option<Matrix>, delta: Matrix) {
            match slot {
                Some(g) => g.add_assign_scaled(&delta, 1.0),
                None => *slot = Some(delta),
            }
        }

        for idx in (0..=output.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                // Leaves are the only adjoints callers read; keep them.
                Op::Leaf => grads[idx] = Some(upstream),
                Op::MatMul(a, b) => {
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    accumulate(&mut grads[*a], upstream.matmul_t(bv));
                    accumulate(&mut grads[*b], av.t_matmul(&upstream));
                }
                Op::MatMulT(x, w) => {
                    let xv = &self.nodes[*x].value;
                    let wv = &self.nodes[*w].value;
                    accumulate(&mut grads[*x], upstream.matmul(wv));
                    accumulate(&mut grads[*w], upstream.t_matmul(xv));
                }
                Op::AddBias(x, b) => {
                    let cols = upstream.cols();
                    let mut db = Matrix::zeros(1, cols);
                    for r in 0..upstream.rows() {
                        for (d, u) in db.data_mut().iter_mut().zip(upstream.row(r)) {
                            *d += u;
                        }
                    }
                    accumulate(&mut grads[*b], db);
                    accumulate(&mut grads[*x], upstream);
                }
                Op::Relu(x) => {
                    let xv = &self.nodes[*x].value;
                    let mut d = upstream;
                    for (g, v) in d.data_mut().iter_mut().zip(xv.data()) {
                        if *v <= 0.0 {
                            *g = 0.0;
                        }
                    }
                    accumulate(&mut grads[*x], d);
                }
                Op::Tanh(x) => {
                    let mut d = upstream;
                    for (g, y) in d.data_mut().iter_mut().zip(node.value.data()) {
                        *g *= 1.0 - y * y;
                    }
                    accumulate(&mut grads[*x], d);
                }
                Op::SoftmaxCe {
                    logits,
                    probs,
                    targets,
                } => {
                    let scale = upstream.item() / probs.rows() as f64;
                    let mut d = probs.clone();
                    for (g, t) in d.data_mut().iter_mut().zip(targets.data()) {
                        *g = scale * (*g - t);
                    }
                    accumulate(&mut grads[*logits], d);
                }
                Op::Mse { pred, targets } => {
                    let p = &self.nodes[*pred].value;
                    let scale = 2.0 * upstream.item() / p.len().max(1) as f64;
                    let mut d = p.clone();
                    for (g, t) in d.data_mut().iter_mut().zip(targets.data()) {
                        *g = scale * (*g - t);
                    }
                    accumulate(&mut grads[*pred], d);
                }
                Op::Affine(terms) => {
                    for &(c, v) in terms {
                        accumulate(&mut grads[v], upstream.map(|u| c * u));
                    }
                }
                Op::Field { input, grad } => {
                    let u = upstream.item();
                    let (r, c) = self.nodes[*input].value.shape();
                    let d = Matrix::new(r, c, grad.iter().map(|g| u * g).collect())
                        .expect("field gradient length checked at record time");
                    accumulate(&mut grads[*input], d);
                }
            }
        }
        Ok(Adjoints {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }
}
