//! Mini-batch training with point subsampling and adaptive loss weights.

use deonet_core::Dataset;
use deonet_nn::{AdamW, AdamWConfig, DeepOnet, Matrix, Point, Scaling};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{build_loss_graph, Batch, DEFAULT_EPSILON};
use crate::weights::LossWeights;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    /// fraction of the output points drawn per iteration
    pub alpha: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub lambda1_init: f64,
    pub lambda2_init: f64,
    pub weight_update_every: usize,
    pub ema: f64,
    pub epsilon_err: f64,
    pub seed: u64,
    /// `false` trains on the prediction term only (`lambda2 = 0`)
    pub use_derivative_loss: bool,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 32768,
            batch_size: 8,
            alpha: 0.1,
            lr: 1e-3,
            weight_decay: 1e-11,
            lambda1_init: 1.0,
            lambda2_init: 1.0,
            weight_update_every: 100,
            ema: 0.9,
            epsilon_err: DEFAULT_EPSILON,
            seed: 0,
            use_derivative_loss: true,
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::invalid(format!("alpha must lie in (0, 1], got {}", self.alpha)));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("lr must be positive and weight_decay non-negative"));
        }
        if !(self.lambda1_init > 0.0) || !(self.lambda2_init >= 0.0) {
            return Err(Error::invalid("loss weights must be positive"));
        }
        if self.weight_update_every == 0 || self.checkpoint_every == 0 {
            return Err(Error::invalid("update and checkpoint cadences must be positive"));
        }
        if !(0.0..=1.0).contains(&self.ema) {
            return Err(Error::invalid(format!("ema must lie in [0, 1], got {}", self.ema)));
        }
        if !(self.epsilon_err > 0.0) {
            return Err(Error::invalid("epsilon_err must be positive"));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    pub fn initial_weights(&self) -> LossWeights {
        let l2 = if self.use_derivative_loss { self.lambda2_init } else { 0.0 };
        LossWeights::new(self.lambda1_init, l2)
    }

    /// Number of points drawn per iteration out of `n_x`.
    pub fn points_per_batch(&self, n_x: usize) -> usize {
        ((self.alpha * n_x as f64).ceil() as usize).clamp(1, n_x)
    }
}

/// Training samples in model layout: `inputs` is `N x r`; per component,
/// `u[i]` is `N x N_x` and `du[i]` is `(N r) x N_x` with row `n r + k`
/// the derivative along basis vector `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingData {
    inputs: Matrix,
    points: Vec<Point>,
    u: Vec<Matrix>,
    du: Vec<Matrix>,
}

impl TrainingData {
    pub fn new(inputs: Matrix, points: Vec<Point>, u: Vec<Matrix>, du: Vec<Matrix>) -> Result<Self> {
        let (n, r, p) = (inputs.nrows(), inputs.ncols(), points.len());
        if n == 0 || r == 0 || p == 0 {
            return Err(Error::invalid("training data must be non-empty"));
        }
        if u.is_empty() || u.len() != du.len() {
            return Err(Error::invalid("value and derivative labels need the same components"));
        }
        if u.iter().any(|m| m.shape() != (n, p)) || du.iter().any(|m| m.shape() != (n * r, p)) {
            return Err(Error::invalid("label shapes do not match sample, rank and point counts"));
        }
        Ok(Self { inputs, points, u, du })
    }

    /// Scalar-output data from a generated dataset whose outputs live at
    /// `points` (the mesh nodes).
    pub fn from_dataset(ds: &Dataset, points: Vec<Point>) -> Result<Self> {
        let (n, r, nx) = (ds.len(), ds.rank, ds.n_x);
        if points.len() != nx {
            return Err(Error::invalid(format!("{} points for {nx} outputs", points.len())));
        }
        let inputs = Matrix::from_row_slice(n, r, &ds.m_reduced);
        let u = Matrix::from_row_slice(n, nx, &ds.u);
        let du = Matrix::from_fn(n * r, nx, |row, x| ds.du_of(row / r)[x * r + row % r]);
        Self::new(inputs, points, vec![u], vec![du])
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rank(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn n_u(&self) -> usize {
        self.u.len()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn fit_scaling(&self) -> Scaling {
        Scaling::fit(&self.inputs, &self.u)
    }

    /// Labels of `samples` restricted to the points `point_idx`.
    pub fn batch(&self, samples: &[usize], point_idx: &[usize]) -> Batch {
        let r = self.rank();
        let inputs = Matrix::from_fn(samples.len(), r, |b, k| self.inputs[(samples[b], k)]);
        let points = point_idx.iter().map(|&j| self.points[j]).collect();
        let u = self
            .u
            .iter()
            .map(|m| Matrix::from_fn(samples.len(), point_idx.len(), |b, p| m[(samples[b], point_idx[p])]))
            .collect();
        let du = self
            .du
            .iter()
            .map(|m| {
                Matrix::from_fn(samples.len() * r, point_idx.len(), |row, p| {
                    m[(samples[row / r] * r + row % r, point_idx[p])]
                })
            })
            .collect();
        Batch { inputs, points, u, du }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub iteration: usize,
    pub l1: f64,
    pub l2: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

/// Everything needed to resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: DeepOnet,
    pub optimizer: AdamW,
    pub weights: LossWeights,
    /// iterations completed
    pub iteration: usize,
    pub history: Vec<HistoryRecord>,
}

impl TrainState {
    pub fn new(model: DeepOnet, config: &TrainConfig) -> Self {
        let optimizer = AdamW::new(config.optimizer(), model.params());
        Self {
            model,
            optimizer,
            weights: config.initial_weights(),
            iteration: 0,
            history: Vec::new(),
        }
    }
}

/// Random stream of iteration `it`; resuming from a checkpoint draws the
/// same batches as an uninterrupted run.
fn iteration_rng(seed: u64, it: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(it as u64);
    rng
}

fn global_norm(grads: &[Matrix]) -> f64 {
    grads.iter().map(|g| g.norm_squared()).sum::<f64>().sqrt()
}

/// Runs iterations `state.iteration .. config.iterations`. `checkpoint` is
/// called every `checkpoint_every` iterations and once at the end.
pub fn train<F>(mut state: TrainState, data: &TrainingData, config: &TrainConfig, mut checkpoint: F) -> Result<TrainState>
where
    F: FnMut(&TrainState) -> std::result::Result<(), String>,
{
    config.validate()?;
    let cfg = state.model.config();
    if cfg.input_dim != data.rank() || cfg.n_u != data.n_u() {
        return Err(Error::invalid(format!(
            "model maps {} inputs to {} outputs, data has {} and {}",
            cfg.input_dim,
            cfg.n_u,
            data.rank(),
            data.n_u()
        )));
    }
    let n = data.len();
    let n_x = data.points().len();
    let n_pts = config.points_per_batch(n_x);
    let mut last_saved = None;
    for it in state.iteration..config.iterations {
        let mut rng = iteration_rng(config.seed, it);
        let samples: Vec<usize> = (0..config.batch_size).map(|_| rng.random_range(0..n)).collect();
        let pts = sample(&mut rng, n_x, n_pts).into_vec();
        let batch = data.batch(&samples, &pts);

        let lg = build_loss_graph(&state.model, &batch, config.epsilon_err, true)?;
        let l2_var = lg.l2.expect("requested");
        let l1 = lg.graph.scalar(lg.l1);
        let l2 = lg.graph.scalar(l2_var);
        let active_l2 = if config.use_derivative_loss { l2 } else { 0.0 };
        if !(state.weights.lambda1 * l1 + state.weights.lambda2 * active_l2).is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: it,
                last_good: Box::new(state),
            });
        }

        let g1 = lg.parameter_gradients(lg.l1, &state.model)?;
        let grads = if config.use_derivative_loss {
            let g2 = lg.parameter_gradients(l2_var, &state.model)?;
            if it % config.weight_update_every == 0 {
                state.weights.update(global_norm(&g1), global_norm(&g2), config.ema);
            }
            let (w1, w2) = (state.weights.lambda1, state.weights.lambda2);
            g1.iter().zip(&g2).map(|(a, b)| a * w1 + b * w2).collect()
        } else {
            let w1 = state.weights.lambda1;
            g1.into_iter().map(|a| a * w1).collect::<Vec<_>>()
        };
        state.history.push(HistoryRecord {
            iteration: it,
            l1,
            l2,
            lambda1: state.weights.lambda1,
            lambda2: state.weights.lambda2,
        });
        state.optimizer.step(state.model.params_mut(), &grads)?;
        state.iteration = it + 1;
        if state.iteration % config.checkpoint_every == 0 {
            checkpoint(&state).map_err(Error::Checkpoint)?;
            last_saved = Some(state.iteration);
        }
    }
    if last_saved != Some(state.iteration) {
        checkpoint(&state).map_err(Error::Checkpoint)?;
    }
    Ok(state)
}
