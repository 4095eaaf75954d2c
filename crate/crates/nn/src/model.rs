//! DeepONet with a residual MLP branch and a Fourier-feature residual MLP
//! trunk, plus the input-Jacobian of its prediction with respect to the
//! branch input.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Matrix, Var};

pub type Point = [f64; 2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Elu,
}

impl Activation {
    fn apply(self, g: &mut Graph, z: Var) -> Var {
        match self {
            Activation::Relu => g.relu(z),
            Activation::Elu => g.elu(z),
        }
    }

    fn derivative(self, g: &mut Graph, z: Var) -> Var {
        match self {
            Activation::Relu => g.step(z),
            Activation::Elu => g.elu_prime(z),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeepOnetConfig {
    /// branch input dimension r
    pub input_dim: usize,
    /// solution components N_u
    pub n_u: usize,
    /// inner-product width N_b
    pub n_b: usize,
    pub branch_hidden: Vec<usize>,
    pub trunk_hidden: Vec<usize>,
    pub branch_activation: Activation,
    pub trunk_activation: Activation,
    /// 0 feeds raw coordinates to the trunk
    pub fourier_features: usize,
    pub fourier_sigma: f64,
}

impl DeepOnetConfig {
    /// Residual ELU branch and ReLU trunk, three hidden layers each.
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            n_u: 1,
            n_b: 128,
            branch_hidden: vec![128; 3],
            trunk_hidden: vec![256; 3],
            branch_activation: Activation::Elu,
            trunk_activation: Activation::Relu,
            fourier_features: 64,
            fourier_sigma: 0.5,
        }
    }

    fn trunk_input_dim(&self) -> usize {
        if self.fourier_features == 0 {
            2
        } else {
            2 * self.fourier_features
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.input_dim == 0 || self.n_u == 0 || self.n_b == 0 {
            return bad("input_dim, n_u and n_b must be positive");
        }
        if self.branch_hidden.contains(&0) || self.trunk_hidden.contains(&0) {
            return bad("hidden widths must be positive");
        }
        if !(self.fourier_sigma.is_finite() && self.fourier_sigma >= 0.0) {
            return bad("fourier_sigma must be finite and nonnegative");
        }
        Ok(())
    }

    fn layer_shapes(input: usize, hidden: &[usize], output: usize) -> Vec<(usize, usize)> {
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(output);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    fn branch_shapes(&self) -> Vec<(usize, usize)> {
        Self::layer_shapes(self.input_dim, &self.branch_hidden, self.n_b)
    }

    fn trunk_shapes(&self) -> Vec<(usize, usize)> {
        Self::layer_shapes(self.trunk_input_dim(), &self.trunk_hidden, self.n_u * self.n_b)
    }

    /// Closed-form trainable parameter count.
    pub fn num_parameters(&self) -> usize {
        let layers = |s: Vec<(usize, usize)>| s.iter().map(|(i, o)| i * o + o).sum::<usize>();
        layers(self.branch_shapes()) + layers(self.trunk_shapes()) + self.n_u
    }
}

/// Affine maps between physical and network units. Inputs are scaled per
/// dimension, outputs per component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub output_mean: Vec<f64>,
    pub output_std: Vec<f64>,
}

impl Scaling {
    pub fn identity(input_dim: usize, n_u: usize) -> Self {
        Self {
            input_mean: vec![0.0; input_dim],
            input_std: vec![1.0; input_dim],
            output_mean: vec![0.0; n_u],
            output_std: vec![1.0; n_u],
        }
    }

    /// Mean / standard deviation of the rows of `inputs` and of all entries
    /// of each output component. Degenerate spreads fall back to 1.
    pub fn fit(inputs: &Matrix, outputs: &[Matrix]) -> Self {
        let guard = |s: f64| if s > 1e-12 && s.is_finite() { s } else { 1.0 };
        let n = inputs.nrows().max(1) as f64;
        let input_mean: Vec<f64> = inputs.column_iter().map(|c| c.sum() / n).collect();
        let input_std = inputs
            .column_iter()
            .zip(&input_mean)
            .map(|(c, m)| guard((c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt()))
            .collect();
        let output_mean: Vec<f64> = outputs.iter().map(|o| o.mean()).collect();
        let output_std = outputs
            .iter()
            .zip(&output_mean)
            .map(|(o, m)| guard((o.iter().map(|v| (v - m).powi(2)).sum::<f64>() / o.len().max(1) as f64).sqrt()))
            .collect();
        Self {
            input_mean,
            input_std,
            output_mean,
            output_std,
        }
    }

    /// Rows of physical branch inputs to network units.
    pub fn standardize_inputs(&self, m: &Matrix) -> Matrix {
        Matrix::from_fn(m.nrows(), m.ncols(), |i, k| (m[(i, k)] - self.input_mean[k]) / self.input_std[k])
    }

    /// Factor taking a network-unit derivative of component `i` in input
    /// `k` to physical units.
    pub fn jacobian_factor(&self, i: usize, k: usize) -> f64 {
        self.output_std[i] / self.input_std[k]
    }
}

/// Graph nodes produced by [`DeepOnet::build`], in network units.
#[derive(Debug, Clone)]
pub struct Outputs {
    pub branch: Var,
    pub trunk: Var,
    /// per component, `batch x points`
    pub pred: Vec<Var>,
    /// per component, `(batch * r) x points`; row `b * r + k` is the
    /// derivative in branch input `k` for sample `b`
    pub jac: Option<Vec<Var>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeepOnet {
    config: DeepOnetConfig,
    names: Vec<String>,
    params: Vec<Matrix>,
    /// `(weight, bias)` parameter indices per layer
    branch: Vec<(usize, usize)>,
    trunk: Vec<(usize, usize)>,
    bias: usize,
    fourier: Matrix,
    scaling: Scaling,
}

fn layout(config: &DeepOnetConfig) -> (Vec<String>, Vec<(usize, usize)>, Vec<(usize, usize)>, Vec<(usize, usize)>, usize) {
    let mut names = Vec::new();
    let mut shapes = Vec::new();
    let mut push = |name: String, shape: (usize, usize)| {
        names.push(name);
        shapes.push(shape);
        names.len() - 1
    };
    let branch = config
        .branch_shapes()
        .into_iter()
        .enumerate()
        .map(|(l, (i, o))| (push(format!("branch.{l}.weight"), (i, o)), push(format!("branch.{l}.bias"), (1, o))))
        .collect();
    let trunk = config
        .trunk_shapes()
        .into_iter()
        .enumerate()
        .map(|(l, (i, o))| (push(format!("trunk.{l}.weight"), (i, o)), push(format!("trunk.{l}.bias"), (1, o))))
        .collect();
    let bias = push("output.bias".into(), (1, config.n_u));
    (names, shapes, branch, trunk, bias)
}

impl DeepOnet {
    /// Kaiming-uniform weights with the `a = sqrt(5)` leaky gain (bound
    /// `1 / sqrt(fan_in)`, the usual default for dense layers), zero biases and a
    /// fresh Gaussian Fourier matrix, all from one seeded stream.
    pub fn new(config: DeepOnetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, config.fourier_sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let fourier = Matrix::from_fn(config.fourier_features, 2, |_, _| normal.sample(&mut rng));
        let (names, shapes, branch, trunk, bias) = layout(&config);
        let params = names
            .iter()
            .zip(&shapes)
            .map(|(name, &(r, c))| {
                if name.ends_with("weight") {
                    let bound = 1.0 / (r as f64).sqrt();
                    let u = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                    Matrix::from_fn(r, c, |_, _| u.sample(&mut rng))
                } else {
                    Matrix::zeros(r, c)
                }
            })
            .collect();
        let scaling = Scaling::identity(config.input_dim, config.n_u);
        Ok(Self {
            config,
            names,
            params,
            branch,
            trunk,
            bias,
            fourier,
            scaling,
        })
    }

    /// Rebuilds a model from stored tensors, checking every shape.
    pub fn from_parts(config: DeepOnetConfig, params: Vec<Matrix>, fourier: Matrix, scaling: Scaling) -> Result<Self> {
        config.validate()?;
        let (names, shapes, branch, trunk, bias) = layout(&config);
        if params.len() != shapes.len() {
            return Err(Error::Shape(format!("expected {} parameter tensors, got {}", shapes.len(), params.len())));
        }
        for ((p, s), name) in params.iter().zip(&shapes).zip(&names) {
            if p.shape() != *s {
                return Err(Error::Shape(format!("{name}: expected {s:?}, got {:?}", p.shape())));
            }
        }
        if fourier.shape() != (config.fourier_features, 2) {
            return Err(Error::Shape(format!("Fourier matrix has shape {:?}", fourier.shape())));
        }
        if scaling.input_mean.len() != config.input_dim
            || scaling.input_std.len() != config.input_dim
            || scaling.output_mean.len() != config.n_u
            || scaling.output_std.len() != config.n_u
        {
            return Err(Error::Shape("scaling does not match the model dimensions".into()));
        }
        Ok(Self {
            config,
            names,
            params,
            branch,
            trunk,
            bias,
            fourier,
            scaling,
        })
    }

    pub fn config(&self) -> &DeepOnetConfig {
        &self.config
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Matrix] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Matrix] {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(DMatrix::len).sum()
    }

    pub fn fourier_matrix(&self) -> &Matrix {
        &self.fourier
    }

    pub fn scaling(&self) -> &Scaling {
        &self.scaling
    }

    pub fn set_scaling(&mut self, scaling: Scaling) -> Result<()> {
        if scaling.input_mean.len() != self.config.input_dim || scaling.output_mean.len() != self.config.n_u {
            return Err(Error::Shape("scaling does not match the model dimensions".into()));
        }
        self.scaling = scaling;
        Ok(())
    }

    /// Trunk inputs `[cos(Bx), sin(Bx)]`, one row per point.
    pub fn embed(&self, points: &[Point]) -> Matrix {
        fourier_embed(&self.fourier, points)
    }

    /// Puts every parameter on the tape as a leaf.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| g.leaf(p.clone())).collect()
    }

    fn mlp(
        &self,
        g: &mut Graph,
        pv: &[Var],
        layers: &[(usize, usize)],
        act: Activation,
        input: Var,
        tangent: Option<(Var, usize)>,
    ) -> Result<(Var, Option<Var>)> {
        let (last, hidden) = layers.split_last().expect("at least one layer");
        let mut h = input;
        let mut hd = tangent.map(|t| t.0);
        for (l, &(w, b)) in hidden.iter().enumerate() {
            let hw = g.matmul(h, pv[w])?;
            let z = g.add_row(hw, pv[b])?;
            let a = act.apply(g, z);
            // residual connections between equal-width hidden layers
            let residual = l > 0 && g.value(h).ncols() == g.value(a).ncols();
            h = if residual { g.add(h, a)? } else { a };
            if let (Some(t), Some((_, r))) = (hd, tangent) {
                let zd = g.matmul(t, pv[w])?;
                let d = act.derivative(g, z);
                let dr = g.repeat_rows(d, r);
                let ad = g.mul(dr, zd)?;
                hd = Some(if residual { g.add(t, ad)? } else { ad });
            }
        }
        let hw = g.matmul(h, pv[last.0])?;
        let out = g.add_row(hw, pv[last.1])?;
        let out_d = match hd {
            Some(t) => Some(g.matmul(t, pv[last.0])?),
            None => None,
        };
        Ok((out, out_d))
    }

    /// Records the network on `g`. `inputs` is `batch x r` in network units,
    /// `trunk_inputs` the embedded points. With `jacobian`, the branch is
    /// also pushed forward along each of the `r` input directions.
    pub fn build(&self, g: &mut Graph, pv: &[Var], inputs: Var, trunk_inputs: Var, jacobian: bool) -> Result<Outputs> {
        let r = self.config.input_dim;
        let (batch, cols) = g.value(inputs).shape();
        if cols != r {
            return Err(Error::Shape(format!("branch input has {cols} columns, expected {r}")));
        }
        if g.value(trunk_inputs).ncols() != self.config.trunk_input_dim() {
            return Err(Error::Shape("trunk input width does not match the embedding".into()));
        }
        let tangent = jacobian.then(|| {
            let seed = Matrix::from_fn(batch * r, r, |i, k| if i % r == k { 1.0 } else { 0.0 });
            (g.leaf(seed), r)
        });
        let (branch, branch_d) = self.mlp(g, pv, &self.branch, self.config.branch_activation, inputs, tangent)?;
        let (trunk, _) = self.mlp(g, pv, &self.trunk, self.config.trunk_activation, trunk_inputs, None)?;

        let nb = self.config.n_b;
        let mut pred = Vec::with_capacity(self.config.n_u);
        let mut jac = branch_d.map(|_| Vec::with_capacity(self.config.n_u));
        for i in 0..self.config.n_u {
            let t_i = g.slice_cols(trunk, i * nb, nb)?;
            let bias_i = g.slice_cols(pv[self.bias], i, 1)?;
            let dot = g.matmul_bt(branch, t_i)?;
            pred.push(g.add_scalar(dot, bias_i)?);
            if let (Some(j), Some(bd)) = (jac.as_mut(), branch_d) {
                j.push(g.matmul_bt(bd, t_i)?);
            }
        }
        Ok(Outputs {
            branch,
            trunk,
            pred,
            jac,
        })
    }

    fn check_inputs(&self, m_tilde: &Matrix) -> Result<()> {
        if m_tilde.ncols() != self.config.input_dim {
            return Err(Error::Shape(format!(
                "inputs have {} columns, expected {}",
                m_tilde.ncols(),
                self.config.input_dim
            )));
        }
        Ok(())
    }

    fn run(&self, m_tilde: &Matrix, points: &[Point], jacobian: bool) -> Result<(Vec<Matrix>, Option<Vec<Matrix>>)> {
        self.check_inputs(m_tilde)?;
        let mut g = Graph::new();
        let pv = self.bind(&mut g);
        let x = g.leaf(self.scaling.standardize_inputs(m_tilde));
        let t = g.leaf(self.embed(points));
        let out = self.build(&mut g, &pv, x, t, jacobian)?;
        let s = &self.scaling;
        let pred = out
            .pred
            .iter()
            .enumerate()
            .map(|(i, &v)| g.value(v).map(|y| s.output_mean[i] + s.output_std[i] * y))
            .collect();
        let r = self.config.input_dim;
        let jac = out.jac.map(|js| {
            js.iter()
                .enumerate()
                .map(|(i, &v)| {
                    let j = g.value(v);
                    Matrix::from_fn(j.nrows(), j.ncols(), |row, c| s.jacobian_factor(i, row % r) * j[(row, c)])
                })
                .collect()
        });
        Ok((pred, jac))
    }

    /// Predictions in physical units, one `batch x points` matrix per
    /// component. `m_tilde` holds one reduced input per row.
    pub fn predict(&self, m_tilde: &Matrix, points: &[Point]) -> Result<Vec<Matrix>> {
        Ok(self.run(m_tilde, points, false)?.0)
    }

    /// Predictions and branch-input Jacobians in physical units. Jacobian
    /// row `b * r + k` holds the derivative of sample `b` in input `k`.
    pub fn predict_with_jacobian(&self, m_tilde: &Matrix, points: &[Point]) -> Result<(Vec<Matrix>, Vec<Matrix>)> {
        let (p, j) = self.run(m_tilde, points, true)?;
        Ok((p, j.expect("requested")))
    }

    /// `u(m_tilde)(x)` for each component.
    pub fn forward(&self, m_tilde: &[f64], x: Point) -> Result<Vec<f64>> {
        let pred = self.predict(&Matrix::from_row_slice(1, m_tilde.len(), m_tilde), &[x])?;
        Ok(pred.iter().map(|p| p[(0, 0)]).collect())
    }

    /// `N_u x r` Jacobian of [`DeepOnet::forward`] in `m_tilde`.
    pub fn jacobian_wrt_branch_input(&self, m_tilde: &[f64], x: Point) -> Result<Matrix> {
        let r = self.config.input_dim;
        let (_, jac) = self.predict_with_jacobian(&Matrix::from_row_slice(1, m_tilde.len(), m_tilde), &[x])?;
        Ok(Matrix::from_fn(self.config.n_u, r, |i, k| jac[i][(k, 0)]))
    }

    /// Prediction with the branch output replaced by `b` (network units for
    /// the head, physical units out).
    pub fn forward_with_branch_output(&self, b: &[f64], x: Point) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let pv = self.bind(&mut g);
        let t_in = g.leaf(self.embed(&[x]));
        let (trunk, _) = self.mlp(&mut g, &pv, &self.trunk, self.config.trunk_activation, t_in, None)?;
        let t: Vec<f64> = g.value(trunk).iter().copied().collect();
        let bias: Vec<f64> = self.params[self.bias].iter().copied().collect();
        let raw = deeponet_head(b, &t, &bias, self.config.n_b)?;
        let s = &self.scaling;
        Ok(raw
            .iter()
            .enumerate()
            .map(|(i, y)| s.output_mean[i] + s.output_std[i] * y)
            .collect())
    }
}

/// `[cos(B x), sin(B x)]` for each point; raw coordinates when `B` is empty.
pub fn fourier_embed(b: &Matrix, points: &[Point]) -> Matrix {
    let m = b.nrows();
    if m == 0 {
        return Matrix::from_fn(points.len(), 2, |p, d| points[p][d]);
    }
    Matrix::from_fn(points.len(), 2 * m, |p, j| {
        let row = j % m;
        let arg = b[(row, 0)] * points[p][0] + b[(row, 1)] * points[p][1];
        if j < m {
            arg.cos()
        } else {
            arg.sin()
        }
    })
}

/// Component `i` is `<b, t[i N_b .. (i + 1) N_b]> + bias[i]`.
pub fn deeponet_head(b: &[f64], t: &[f64], bias: &[f64], n_b: usize) -> Result<Vec<f64>> {
    if b.len() != n_b || t.len() != n_b * bias.len() {
        return Err(Error::Shape(format!(
            "branch {} / trunk {} / bias {} do not fit N_b = {n_b}",
            b.len(),
            t.len(),
            bias.len()
        )));
    }
    Ok(bias
        .iter()
        .enumerate()
        .map(|(i, c)| b.iter().zip(&t[i * n_b..(i + 1) * n_b]).map(|(x, y)| x * y).sum::<f64>() + c)
        .collect())
}
