//! A matrix-valued reverse-mode tape.
//!
//! Every operation appends a node holding its value, so node indices are a
//! topological order and the reverse sweep is a single backwards scan.
//! Derivatives of activations (`elu_prime`) are ordinary nodes, which lets
//! forward-mode tangent passes be recorded on the same tape and
//! differentiated again in reverse.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddScalar(Var, Var),
    Scale(Var, f64),
    Elu(Var),
    EluPrime(Var),
    Relu(Var),
    Step,
    RepeatRows(Var, usize),
    SumRowGroups(Var, usize),
    SumSquaresRows(Var),
    Sqrt(Var),
    Sum(Var),
    Mean(Var),
    SliceCols(Var, usize, usize),
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

fn elu_prime(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

fn elu_second(x: f64) -> f64 {
    if x > 0.0 {
        0.0
    } else {
        x.exp()
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

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[(0, 0)]
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (x, y) = (self.value(a).shape(), self.value(b).shape());
        if x != y {
            return Err(Error::Shape(format!("{what}: {x:?} vs {y:?}")));
        }
        Ok(())
    }

    /// `a b`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(Error::Shape(format!("matmul: {:?} x {:?}", va.shape(), vb.shape())));
        }
        let v = va * vb;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `a b^T`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.ncols() {
            return Err(Error::Shape(format!("matmul_bt: {:?} x {:?}^T", va.shape(), vb.shape())));
        }
        let v = va * vb.transpose();
        Ok(self.push(v, Op::MatMulBt(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a) + self.value(b);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a) - self.value(b);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).component_mul(self.value(b));
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// Adds the `1 x n` row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.nrows() != 1 || vr.ncols() != va.ncols() {
            return Err(Error::Shape(format!("add_row: {:?} + {:?}", va.shape(), vr.shape())));
        }
        let mut v = va.clone();
        for mut r in v.row_iter_mut() {
            r += vr;
        }
        Ok(self.push(v, Op::AddRow(a, row)))
    }

    /// Adds the `1 x 1` node `s` to every entry of `a`.
    pub fn add_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).shape() != (1, 1) {
            return Err(Error::Shape("add_scalar expects a 1 x 1 node".into()));
        }
        let c = self.scalar(s);
        let v = self.value(a).add_scalar(c);
        Ok(self.push(v, Op::AddScalar(a, s)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(elu);
        self.push(v, Op::Elu(a))
    }

    /// Elementwise derivative of ELU.
    pub fn elu_prime(&mut self, a: Var) -> Var {
        let v = self.value(a).map(elu_prime);
        self.push(v, Op::EluPrime(a))
    }

    /// ReLU with subgradient 0 at 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    /// Heaviside step (1 where positive); treated as locally constant.
    pub fn step(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
        self.push(v, Op::Step)
    }

    /// Repeats each row `k` times consecutively.
    pub fn repeat_rows(&mut self, a: Var, k: usize) -> Var {
        let va = self.value(a);
        let v = Matrix::from_fn(va.nrows() * k, va.ncols(), |i, j| va[(i / k, j)]);
        self.push(v, Op::RepeatRows(a, k))
    }

    /// Sums consecutive groups of `k` rows.
    pub fn sum_row_groups(&mut self, a: Var, k: usize) -> Result<Var> {
        let va = self.value(a);
        if k == 0 || va.nrows() % k != 0 {
            return Err(Error::Shape(format!("{} rows are not groups of {k}", va.nrows())));
        }
        let mut v = Matrix::zeros(va.nrows() / k, va.ncols());
        for i in 0..va.nrows() {
            let mut r = v.row_mut(i / k);
            r += va.row(i);
        }
        Ok(self.push(v, Op::SumRowGroups(a, k)))
    }

    /// Column of row-wise sums of squares.
    pub fn sum_squares_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let v = Matrix::from_fn(va.nrows(), 1, |i, _| va.row(i).norm_squared());
        self.push(v, Op::SumSquaresRows(a))
    }

    /// Elementwise square root; its derivative at 0 is taken as 0.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::from_element(1, 1, self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = Matrix::from_element(1, 1, self.value(a).mean());
        self.push(v, Op::Mean(a))
    }

    /// Columns `start .. start + len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let va = self.value(a);
        if start + len > va.ncols() {
            return Err(Error::Shape(format!("columns {start}..{} of {}", start + len, va.ncols())));
        }
        let v = va.columns(start, len).into_owned();
        Ok(self.push(v, Op::SliceCols(a, start, len)))
    }

    /// Gradients of the scalar node `out` with respect to every node.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.value(out).shape() != (1, 1) {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar output, got {:?}",
                self.value(out).shape()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; out.0 + 1];
        grads[out.0] = Some(Matrix::from_element(1, 1, 1.0));

        fn acc(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
            match &mut grads[v.0] {
                Some(x) => *x += g,
                slot => *slot = Some(g),
            }
        }

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match node.op {
                Op::Leaf | Op::Step => {}
                Op::MatMul(a, b) => {
                    acc(&mut grads, a, &g * self.value(b).transpose());
                    acc(&mut grads, b, self.value(a).transpose() * &g);
                }
                Op::MatMulBt(a, b) => {
                    acc(&mut grads, a, &g * self.value(b));
                    acc(&mut grads, b, g.transpose() * self.value(a));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, a, g.clone());
                    acc(&mut grads, b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, b, -&g);
                    acc(&mut grads, a, g.clone());
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, a, g.component_mul(self.value(b)));
                    acc(&mut grads, b, g.component_mul(self.value(a)));
                }
                Op::AddRow(a, row) => {
                    acc(&mut grads, row, Matrix::from_row_slice(1, g.ncols(), g.row_sum().as_slice()));
                    acc(&mut grads, a, g.clone());
                }
                Op::AddScalar(a, s) => {
                    acc(&mut grads, s, Matrix::from_element(1, 1, g.sum()));
                    acc(&mut grads, a, g.clone());
                }
                Op::Scale(a, c) => acc(&mut grads, a, &g * c),
                Op::Elu(a) => {
                    let d = g.zip_map(self.value(a), |gi, x| gi * elu_prime(x));
                    acc(&mut grads, a, d);
                }
                Op::EluPrime(a) => {
                    let d = g.zip_map(self.value(a), |gi, x| gi * elu_second(x));
                    acc(&mut grads, a, d);
                }
                Op::Relu(a) => {
                    let d = g.zip_map(self.value(a), |gi, x| if x > 0.0 { gi } else { 0.0 });
                    acc(&mut grads, a, d);
                }
                Op::RepeatRows(a, k) => {
                    let va = self.value(a);
                    let mut d = Matrix::zeros(va.nrows(), va.ncols());
                    for r in 0..g.nrows() {
                        let mut row = d.row_mut(r / k);
                        row += g.row(r);
                    }
                    acc(&mut grads, a, d);
                }
                Op::SumRowGroups(a, k) => {
                    let va = self.value(a);
                    let d = Matrix::from_fn(va.nrows(), va.ncols(), |r, c| g[(r / k, c)]);
                    acc(&mut grads, a, d);
                }
                Op::SumSquaresRows(a) => {
                    let va = self.value(a);
                    let d = Matrix::from_fn(va.nrows(), va.ncols(), |r, c| 2.0 * va[(r, c)] * g[(r, 0)]);
                    acc(&mut grads, a, d);
                }
                Op::Sqrt(a) => {
                    let d = g.zip_map(&node.value, |gi, y| if y > 0.0 { gi / (2.0 * y) } else { 0.0 });
                    acc(&mut grads, a, d);
                }
                Op::Sum(a) => {
                    let (r, c) = self.value(a).shape();
                    acc(&mut grads, a, Matrix::from_element(r, c, g[(0, 0)]));
                }
                Op::Mean(a) => {
                    let (r, c) = self.value(a).shape();
                    acc(&mut grads, a, Matrix::from_element(r, c, g[(0, 0)] / (r * c) as f64));
                }
                Op::SliceCols(a, start, len) => {
                    let (r, c) = self.value(a).shape();
                    let mut d = Matrix::zeros(r, c);
                    d.columns_mut(start, len).copy_from(&g);
                    acc(&mut grads, a, d);
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

/// Result of a reverse sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if the output does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, zero-filled to `shape` when absent.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Matrix {
        self.get(v).cloned().unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
    }
}
