//! On-disk layout of bases, datasets, checkpoints and metric reports.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use deonet_core::basis::BasisWeight;
use deonet_core::{BasisMethod, Dataset, ReducedBasis, SkippedSample, WhittleMaternField};
use deonet_nn::{AdamW, AdamWConfig, DeepOnet, DeepOnetConfig, Matrix, Scaling};
use deonet_train::{HistoryRecord, LossWeights, MetricsReport, TrainState};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::container::Tensor;
use crate::error::CliError;

/// Paths of one run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn basis(&self) -> PathBuf {
        self.root.join("basis")
    }

    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset")
    }

    pub fn train(&self) -> PathBuf {
        self.root.join("train")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.train().join("checkpoints")
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.checkpoints().join("final")
    }

    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn metrics_json(&self) -> PathBuf {
        self.eval().join("metrics.json")
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Io(format!("malformed {}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::Io(format!("cannot create {}: {e}", path.display())))
}

/// Replaces `dir` with a fresh empty directory.
pub fn reset_dir(dir: &Path) -> Result<(), CliError> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| CliError::Io(format!("cannot remove {}: {e}", dir.display())))?;
    }
    create_dir(dir)
}

fn weight_tag(w: BasisWeight) -> &'static str {
    match w {
        BasisWeight::Mass => "mass",
        BasisWeight::CovarianceInverse => "covariance_inverse",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisMeta {
    pub hash: String,
    pub method: String,
    pub weight: String,
    pub r: usize,
    pub ndofs: usize,
}

pub fn save_basis(dir: &Path, basis: &ReducedBasis, hash: &str) -> Result<(), CliError> {
    reset_dir(dir)?;
    let (r, n) = (basis.rank(), basis.ndofs());
    let psi: Vec<f64> = basis.vectors().iter().flatten().copied().collect();
    Tensor::new(vec![r, n], psi)?.write(&dir.join("psi.dedn"))?;
    Tensor::new(vec![r], basis.eigenvalues().to_vec())?.write(&dir.join("eigenvalues.dedn"))?;
    let mut csv = String::from("k,eigenvalue\n");
    for (k, l) in basis.eigenvalues().iter().enumerate() {
        csv.push_str(&format!("{},{:e}\n", k + 1, l));
    }
    fs::write(dir.join("eigenvalues.csv"), csv)?;
    write_json(
        &dir.join("meta.json"),
        &BasisMeta {
            hash: hash.to_string(),
            method: basis.method().to_string(),
            weight: weight_tag(basis.weight()).to_string(),
            r,
            ndofs: n,
        },
    )
}

pub fn read_basis_meta(dir: &Path) -> Result<BasisMeta, CliError> {
    read_json(&dir.join("meta.json"))
}

pub fn load_basis(dir: &Path, field: Arc<WhittleMaternField>) -> Result<ReducedBasis, CliError> {
    let meta = read_basis_meta(dir)?;
    let method: BasisMethod = meta.method.parse().map_err(|e: deonet_core::Error| CliError::Io(e.to_string()))?;
    let psi = Tensor::read(&dir.join("psi.dedn"))?.expect_dims(&[meta.r, meta.ndofs])?;
    let eig = Tensor::read(&dir.join("eigenvalues.dedn"))?.expect_dims(&[meta.r])?;
    let vectors = psi.data.chunks(meta.ndofs.max(1)).map(<[f64]>::to_vec).collect();
    Ok(ReducedBasis::from_parts(method, field, vectors, eig.data)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedEntry {
    pub index: usize,
    pub seed: u64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub n: usize,
    pub seeds: Vec<u64>,
    pub newton_iterations: Vec<usize>,
    pub skipped: Vec<SkippedEntry>,
    pub shapes: Vec<(String, Vec<usize>)>,
    pub wall_clock_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub hash: String,
    pub basis_hash: String,
    pub problem: String,
    pub mesh_n: usize,
    pub delta: f64,
    pub gamma: f64,
    pub method: String,
    pub r: usize,
    pub n_x: usize,
    pub basis_wall_clock_seconds: Option<f64>,
    pub train: SplitManifest,
    pub test: SplitManifest,
}

/// Writes the arrays of one split and returns its manifest entry.
pub fn save_split(dir: &Path, ds: &Dataset, seconds: f64) -> Result<SplitManifest, CliError> {
    create_dir(dir)?;
    let (n, nd, nx, r) = (ds.len(), ds.ndofs, ds.n_x, ds.rank);
    let arrays = [
        ("m", vec![n, nd], &ds.m),
        ("m_reduced", vec![n, r], &ds.m_reduced),
        ("u", vec![n, nx, 1], &ds.u),
        ("du", vec![n, nx, r, 1], &ds.du),
    ];
    let mut shapes = Vec::new();
    for (name, dims, data) in arrays {
        Tensor::new(dims.clone(), data.clone())?.write(&dir.join(format!("{name}.dedn")))?;
        shapes.push((name.to_string(), dims));
    }
    Ok(SplitManifest {
        n,
        seeds: ds.seeds.clone(),
        newton_iterations: ds.newton_iterations.clone(),
        skipped: ds
            .skipped
            .iter()
            .map(|s| SkippedEntry {
                index: s.index,
                seed: s.seed,
                reason: s.reason.clone(),
            })
            .collect(),
        shapes,
        wall_clock_seconds: seconds,
    })
}

pub fn load_split(dir: &Path, manifest: &SplitManifest, ndofs: usize, r: usize) -> Result<Dataset, CliError> {
    let n = manifest.n;
    let nx = ndofs;
    let read = |name: &str, dims: &[usize]| -> Result<Vec<f64>, CliError> {
        Ok(Tensor::read(&dir.join(format!("{name}.dedn")))?.expect_dims(dims)?.data)
    };
    Ok(Dataset {
        ndofs,
        n_x: nx,
        rank: r,
        seeds: manifest.seeds.clone(),
        m: read("m", &[n, ndofs])?,
        m_reduced: read("m_reduced", &[n, r])?,
        u: read("u", &[n, nx, 1])?,
        du: read("du", &[n, nx, r, 1])?,
        newton_iterations: manifest.newton_iterations.clone(),
        skipped: manifest
            .skipped
            .iter()
            .map(|s| SkippedSample {
                index: s.index,
                seed: s.seed,
                reason: s.reason.clone(),
            })
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub train_hash: String,
    pub iteration: usize,
    pub model: DeepOnetConfig,
    pub scaling: Scaling,
    pub loss_weights: LossWeights,
    pub optimizer: AdamWConfig,
    pub optimizer_steps: u64,
    pub param_names: Vec<String>,
}

fn param_file(dir: &Path, prefix: &str, name: &str) -> PathBuf {
    dir.join(format!("{prefix}{name}.dedn"))
}

/// Writes a checkpoint directory, replacing any previous contents.
pub fn save_checkpoint(dir: &Path, state: &TrainState, train_hash: &str) -> Result<(), CliError> {
    reset_dir(dir)?;
    let model = &state.model;
    let names = model.param_names();
    for (i, name) in names.iter().enumerate() {
        Tensor::from_matrix(&model.params()[i]).write(&param_file(dir, "", name))?;
        Tensor::from_matrix(&state.optimizer.first_moments()[i]).write(&param_file(dir, "adam_m.", name))?;
        Tensor::from_matrix(&state.optimizer.second_moments()[i]).write(&param_file(dir, "adam_v.", name))?;
    }
    Tensor::from_matrix(model.fourier_matrix()).write(&dir.join("fourier.dedn"))?;
    let hist: Vec<f64> = state
        .history
        .iter()
        .flat_map(|h| [h.iteration as f64, h.l1, h.l2, h.lambda1, h.lambda2])
        .collect();
    Tensor::new(vec![state.history.len(), 5], hist)?.write(&dir.join("history.dedn"))?;
    write_json(
        &dir.join("meta.json"),
        &CheckpointMeta {
            train_hash: train_hash.to_string(),
            iteration: state.iteration,
            model: model.config().clone(),
            scaling: model.scaling().clone(),
            loss_weights: state.weights,
            optimizer: *state.optimizer.config(),
            optimizer_steps: state.optimizer.steps_taken(),
            param_names: names.to_vec(),
        },
    )
}

pub fn read_checkpoint_meta(dir: &Path) -> Result<CheckpointMeta, CliError> {
    read_json(&dir.join("meta.json"))
}

pub fn load_checkpoint(dir: &Path) -> Result<(TrainState, CheckpointMeta), CliError> {
    let meta = read_checkpoint_meta(dir)?;
    let read = |prefix: &str, name: &str| -> Result<Matrix, CliError> {
        Ok(Tensor::read(&param_file(dir, prefix, name))?.to_matrix()?)
    };
    let mut params = Vec::new();
    let mut m = Vec::new();
    let mut v = Vec::new();
    for name in &meta.param_names {
        params.push(read("", name)?);
        m.push(read("adam_m.", name)?);
        v.push(read("adam_v.", name)?);
    }
    let fourier = Tensor::read(&dir.join("fourier.dedn"))?.to_matrix()?;
    let model = DeepOnet::from_parts(meta.model.clone(), params, fourier, meta.scaling.clone())?;
    if model.param_names() != meta.param_names.as_slice() {
        return Err(CliError::Io(format!("checkpoint {} has unexpected parameters", dir.display())));
    }
    let optimizer = AdamW::from_state(meta.optimizer, meta.optimizer_steps, m, v)?;
    let hist = Tensor::read(&dir.join("history.dedn"))?;
    if hist.dims.len() != 2 || hist.dims[1] != 5 {
        return Err(CliError::Io("malformed loss history".into()));
    }
    let history = hist
        .data
        .chunks(5)
        .map(|c| HistoryRecord {
            iteration: c[0] as usize,
            l1: c[1],
            l2: c[2],
            lambda1: c[3],
            lambda2: c[4],
        })
        .collect();
    let state = TrainState {
        model,
        optimizer,
        weights: meta.loss_weights,
        iteration: meta.iteration,
        history,
    };
    Ok((state, meta))
}

/// Metric report of one evaluation with the keys used by `report`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub config_hash: String,
    pub train_hash: String,
    pub checkpoint_iteration: usize,
    pub method: String,
    pub n_train: usize,
    pub seed: u64,
    pub variant: String,
    pub metrics: MetricsReport,
}
