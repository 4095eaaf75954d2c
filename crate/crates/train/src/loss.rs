//! Relative error measure and the two-term training loss.

use deonet_nn::{DeepOnet, Graph, Matrix, Point, Var};

use crate::error::{Error, Result};
use crate::weights::LossWeights;

pub const DEFAULT_EPSILON: f64 = 1e-8;

/// `sqrt(sum |a - b|^2) / (eps + sqrt(sum |b|^2))` over a group of
/// prediction / label vector pairs.
pub fn relative_group_error(pairs: &[(&[f64], &[f64])], eps: f64) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("relative error of an empty group"));
    }
    if !(eps >= 0.0) {
        return Err(Error::invalid(format!("epsilon must be non-negative, got {eps}")));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (a, b) in pairs {
        if a.len() != b.len() {
            return Err(Error::invalid(format!("pair lengths differ: {} vs {}", a.len(), b.len())));
        }
        for (x, y) in a.iter().zip(b.iter()) {
            num += (x - y) * (x - y);
            den += y * y;
        }
    }
    Ok(num.sqrt() / (eps + den.sqrt()))
}

/// Labels for a batch of samples at a shared set of points, in physical
/// units. Layout follows the model: `u[i]` is `B x P` for component `i`,
/// `du[i]` is `(B r) x P` with row `b r + k` the derivative along basis
/// vector `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub points: Vec<Point>,
    pub u: Vec<Matrix>,
    pub du: Vec<Matrix>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }

    fn check(&self, n_u: usize, r: usize) -> Result<()> {
        let (b, p) = (self.len(), self.points.len());
        if b == 0 || p == 0 {
            return Err(Error::invalid("empty batch or point set"));
        }
        if self.inputs.ncols() != r {
            return Err(Error::invalid(format!("inputs have {} columns, model expects {r}", self.inputs.ncols())));
        }
        if self.u.len() != n_u || self.du.len() != n_u {
            return Err(Error::invalid(format!("labels must have {n_u} components")));
        }
        if self.u.iter().any(|m| m.shape() != (b, p)) || self.du.iter().any(|m| m.shape() != (b * r, p)) {
            return Err(Error::invalid("label shapes do not match batch and point counts"));
        }
        Ok(())
    }
}

/// Loss values for one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub l1: f64,
    pub l2: f64,
}

impl LossTerms {
    pub fn total(&self, w: &LossWeights) -> f64 {
        w.lambda1 * self.l1 + w.lambda2 * self.l2
    }
}

/// Differentiable loss terms built on a fresh graph. `l2` is present when
/// the Jacobian branch was requested.
pub struct LossGraph {
    pub graph: Graph,
    pub params: Vec<Var>,
    pub l1: Var,
    pub l2: Option<Var>,
}

impl LossGraph {
    /// Gradients of `var` for every model parameter.
    pub fn parameter_gradients(&self, var: Var, model: &DeepOnet) -> Result<Vec<Matrix>> {
        let grads = self.graph.backward(var)?;
        Ok(self
            .params
            .iter()
            .zip(model.params())
            .map(|(&v, p)| grads.get_or_zeros(v, p.shape()))
            .collect())
    }
}

/// Mean over samples of the per-sample relative error. `pred[i]` holds
/// `rows_per_sample` consecutive rows per sample.
fn mean_sample_error(g: &mut Graph, pred: &[Var], labels: &[Matrix], rows_per_sample: usize, eps: f64) -> Result<Var> {
    let mut num = None;
    for (&p, lab) in pred.iter().zip(labels) {
        let l = g.leaf(lab.clone());
        let d = g.sub(p, l)?;
        let sq = g.sum_squares_rows(d);
        num = Some(match num {
            None => sq,
            Some(acc) => g.add(acc, sq)?,
        });
    }
    let mut num = num.ok_or_else(|| Error::invalid("no output components"))?;
    if rows_per_sample > 1 {
        num = g.sum_row_groups(num, rows_per_sample)?;
    }
    let num = g.sqrt(num);
    let n = g.value(num).nrows();
    let inv = Matrix::from_fn(n, 1, |b, _| {
        let mut s = 0.0;
        for lab in labels {
            for row in b * rows_per_sample..(b + 1) * rows_per_sample {
                s += lab.row(row).norm_squared();
            }
        }
        1.0 / (eps + s.sqrt())
    });
    let inv = g.leaf(inv);
    let per_sample = g.mul(num, inv)?;
    Ok(g.mean(per_sample))
}

/// Assembles both loss terms on `g` from physical-unit prediction nodes.
fn assemble(g: &mut Graph, pred: &[Var], jac: Option<&[Var]>, batch: &Batch, r: usize, eps: f64) -> Result<(Var, Option<Var>)> {
    let l1 = mean_sample_error(g, pred, &batch.u, 1, eps)?;
    let l2 = match jac {
        Some(j) => Some(mean_sample_error(g, j, &batch.du, r, eps)?),
        None => None,
    };
    Ok((l1, l2))
}

/// Builds the loss graph of `model` on `batch`. Network outputs are mapped
/// back to physical units before the errors are taken.
pub fn build_loss_graph(model: &DeepOnet, batch: &Batch, eps: f64, with_jacobian: bool) -> Result<LossGraph> {
    let cfg = model.config();
    let r = cfg.input_dim;
    batch.check(cfg.n_u, r)?;
    let s = model.scaling().clone();
    let mut g = Graph::new();
    let params = model.bind(&mut g);
    let x = g.leaf(s.standardize_inputs(&batch.inputs));
    let t = g.leaf(model.embed(&batch.points));
    let out = model.build(&mut g, &params, x, t, with_jacobian)?;
    let mut pred = Vec::with_capacity(cfg.n_u);
    for (i, &p) in out.pred.iter().enumerate() {
        let scaled = g.scale(p, s.output_std[i]);
        let mean = g.leaf(Matrix::from_element(1, 1, s.output_mean[i]));
        pred.push(g.add_scalar(scaled, mean)?);
    }
    let jac = match out.jac {
        Some(js) => {
            let mut phys = Vec::with_capacity(js.len());
            for (i, j) in js.into_iter().enumerate() {
                let (rows, cols) = g.value(j).shape();
                let factor = g.leaf(Matrix::from_fn(rows, cols, |row, _| s.jacobian_factor(i, row % r)));
                phys.push(g.mul(j, factor)?);
            }
            Some(phys)
        }
        None => None,
    };
    let (l1, l2) = assemble(&mut g, &pred, jac.as_deref(), batch, r, eps)?;
    Ok(LossGraph { graph: g, params, l1, l2 })
}

/// Both loss terms of `model` on `batch`.
pub fn compute_loss(model: &DeepOnet, batch: &Batch, eps: f64) -> Result<LossTerms> {
    let lg = build_loss_graph(model, batch, eps, true)?;
    let l2 = lg.l2.expect("requested");
    Ok(LossTerms {
        l1: lg.graph.scalar(lg.l1),
        l2: lg.graph.scalar(l2),
    })
}

/// Loss of given physical-unit outputs, laid out like the labels.
pub fn loss_of_outputs(pred: &[Matrix], jac: &[Matrix], batch: &Batch, eps: f64) -> Result<LossTerms> {
    let r = batch.inputs.ncols();
    batch.check(pred.len(), r)?;
    if pred.iter().zip(&batch.u).any(|(a, b)| a.shape() != b.shape())
        || jac.len() != pred.len()
        || jac.iter().zip(&batch.du).any(|(a, b)| a.shape() != b.shape())
    {
        return Err(Error::invalid("output shapes do not match labels"));
    }
    let mut g = Graph::new();
    let pv: Vec<Var> = pred.iter().map(|m| g.leaf(m.clone())).collect();
    let jv: Vec<Var> = jac.iter().map(|m| g.leaf(m.clone())).collect();
    let (l1, l2) = assemble(&mut g, &pv, Some(&jv), batch, r, eps)?;
    Ok(LossTerms {
        l1: g.scalar(l1),
        l2: g.scalar(l2.expect("requested")),
    })
}
