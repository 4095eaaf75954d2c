//! Run configuration, defaults and content hashes coupling the stages.

use std::path::Path;
use std::sync::Arc;

use deonet_core::{
    BasisMethod, Diagonal, DiffusionReactionProblem, FunctionSpace, LinearPoissonProblem, Mesh2D, NewtonConfig,
    PdeProblem, WhittleMaternField,
};
use deonet_nn::{Activation, DeepOnetConfig};
use deonet_train::{EvalConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemConfig {
    /// `-div(e^m grad u) + u^3 = 1`
    DiffusionReaction,
    /// `-div(e^m grad u) = source`
    Poisson { source: f64 },
}

impl Default for ProblemConfig {
    fn default() -> Self {
        ProblemConfig::DiffusionReaction
    }
}

impl ProblemConfig {
    pub fn build(&self) -> Arc<dyn PdeProblem> {
        match *self {
            ProblemConfig::DiffusionReaction => Arc::new(DiffusionReactionProblem),
            ProblemConfig::Poisson { source } => Arc::new(LinearPoissonProblem::constant_source(source)),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ProblemConfig::DiffusionReaction => "diffusion_reaction",
            ProblemConfig::Poisson { .. } => "poisson",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiagonalName {
    Right,
    Crossed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeshConfig {
    pub n: usize,
    pub diagonal: DiagonalName,
}

impl Default for MeshConfig {
    fn default() -> Self {
        Self {
            n: 64,
            diagonal: DiagonalName::Right,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldConfig {
    pub delta: f64,
    pub gamma: f64,
    pub mean: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            delta: 0.4,
            gamma: 0.04,
            mean: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodName {
    Kle,
    Asm,
}

impl From<MethodName> for BasisMethod {
    fn from(m: MethodName) -> Self {
        match m {
            MethodName::Kle => BasisMethod::Kle,
            MethodName::Asm => BasisMethod::Asm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BasisConfig {
    pub method: MethodName,
    pub r: usize,
    pub s: usize,
    pub n_grad: usize,
    pub seed: u64,
}

impl Default for BasisConfig {
    fn default() -> Self {
        Self {
            method: MethodName::Kle,
            r: 16,
            s: 10,
            n_grad: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NewtonSection {
    pub max_iter: usize,
    pub atol: f64,
    pub rtol: f64,
}

impl Default for NewtonSection {
    fn default() -> Self {
        let d = NewtonConfig::default();
        Self {
            max_iter: d.max_iter,
            atol: d.atol,
            rtol: d.rtol,
        }
    }
}

impl NewtonSection {
    pub fn to_newton(&self) -> NewtonConfig {
        NewtonConfig {
            max_iter: self.max_iter,
            atol: self.atol,
            rtol: self.rtol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub base_seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_train: 1500,
            n_test: 500,
            base_seed: 0,
        }
    }
}

/// Offset separating test seeds from training seeds, so the test set does
/// not depend on `n_train`.
pub const TEST_SEED_OFFSET: u64 = 1 << 32;

impl DatasetConfig {
    pub fn test_base_seed(&self) -> u64 {
        self.base_seed.wrapping_add(TEST_SEED_OFFSET)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pair<T> {
    pub branch: T,
    pub trunk: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FourierConfig {
    pub m_feat: usize,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub widths: Pair<Vec<usize>>,
    pub activations: Pair<Activation>,
    pub n_b: usize,
    pub fourier: FourierConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let d = DeepOnetConfig::new(1);
        Self {
            widths: Pair {
                branch: d.branch_hidden,
                trunk: d.trunk_hidden,
            },
            activations: Pair {
                branch: d.branch_activation,
                trunk: d.trunk_activation,
            },
            n_b: d.n_b,
            fourier: FourierConfig::default(),
        }
    }
}

impl Default for FourierConfig {
    fn default() -> Self {
        let d = DeepOnetConfig::new(1);
        Self {
            m_feat: d.fourier_features,
            sigma: d.fourier_sigma,
        }
    }
}

impl ModelConfig {
    pub fn network(&self, r: usize) -> DeepOnetConfig {
        DeepOnetConfig {
            input_dim: r,
            n_u: 1,
            n_b: self.n_b,
            branch_hidden: self.widths.branch.clone(),
            trunk_hidden: self.widths.trunk.clone(),
            branch_activation: self.activations.branch,
            trunk_activation: self.activations.trunk,
            fourier_features: self.fourier.m_feat,
            fourier_sigma: self.fourier.sigma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub n_dir: usize,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        let d = EvalConfig::default();
        Self {
            n_dir: d.n_dir,
            seed: d.seed,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemConfig,
    pub mesh: MeshConfig,
    pub field: FieldConfig,
    pub newton: NewtonSection,
    pub basis: BasisConfig,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

fn hex_digest(parts: &[serde_json::Value]) -> String {
    let bytes = serde_json::to_vec(parts).expect("config sections serialize");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("config sections serialize")
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| CliError::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if self.mesh.n == 0 {
            return bad("mesh.n must be positive".into());
        }
        if !(self.field.delta > 0.0 && self.field.gamma > 0.0) || !self.field.mean.is_finite() {
            return bad("field.delta and field.gamma must be positive".into());
        }
        let ndofs = self.space_size();
        let b = &self.basis;
        if b.r == 0 || b.r + b.s > ndofs {
            return bad(format!("basis needs 1 <= r and r + s <= {ndofs}, got r = {}, s = {}", b.r, b.s));
        }
        if b.n_grad == 0 {
            return bad("basis.n_grad must be positive".into());
        }
        if self.dataset.n_train == 0 || self.dataset.n_test == 0 {
            return bad("dataset sizes must be positive".into());
        }
        if self.newton.max_iter == 0 || !(self.newton.atol >= 0.0) || !(self.newton.rtol >= 0.0) {
            return bad("newton tolerances must be non-negative and max_iter positive".into());
        }
        let m = &self.model;
        if m.n_b == 0 || m.widths.branch.contains(&0) || m.widths.trunk.contains(&0) {
            return bad("model widths and n_b must be positive".into());
        }
        if !(m.fourier.sigma > 0.0) {
            return bad("model.fourier.sigma must be positive".into());
        }
        if let ProblemConfig::Poisson { source } = self.problem {
            if !source.is_finite() {
                return bad("problem.source must be finite".into());
            }
        }
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))
    }

    fn space_size(&self) -> usize {
        let n = self.mesh.n;
        match self.mesh.diagonal {
            DiagonalName::Right => (n + 1) * (n + 1),
            DiagonalName::Crossed => (n + 1) * (n + 1) + n * n,
        }
    }

    pub fn space(&self) -> Result<Arc<FunctionSpace>, CliError> {
        let d = match self.mesh.diagonal {
            DiagonalName::Right => Diagonal::Right,
            DiagonalName::Crossed => Diagonal::Crossed,
        };
        Ok(FunctionSpace::new(Mesh2D::unit_square(self.mesh.n, d)?))
    }

    pub fn field(&self) -> Result<Arc<WhittleMaternField>, CliError> {
        let f = &self.field;
        Ok(Arc::new(WhittleMaternField::with_constant_mean(self.space()?, f.mean, f.delta, f.gamma)?))
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            n_dir: self.eval.n_dir,
            seed: self.eval.seed,
            epsilon_err: self.train.epsilon_err,
        }
    }

    pub fn basis_hash(&self) -> String {
        hex_digest(&[
            value(&"basis"),
            value(&self.problem),
            value(&self.mesh),
            value(&self.field),
            value(&self.newton),
            value(&self.basis),
        ])
    }

    pub fn dataset_hash(&self) -> String {
        hex_digest(&[value(&"dataset"), value(&self.basis_hash()), value(&self.dataset)])
    }

    pub fn train_hash(&self) -> String {
        hex_digest(&[value(&"train"), value(&self.dataset_hash()), value(&self.model), value(&self.train)])
    }

    pub fn eval_hash(&self) -> String {
        hex_digest(&[value(&"eval"), value(&self.train_hash()), value(&self.eval)])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.mesh.n, 64);
        assert_eq!(cfg.basis.r, 16);
        assert_eq!(cfg.basis.s, 10);
        assert_eq!(cfg.train.iterations, 32768);
        assert_eq!(cfg.model.widths.branch, vec![128; 3]);
        assert_eq!(cfg.model.fourier.m_feat, 64);
        assert_eq!(cfg.eval.n_dir, 128);
    }

    #[test]
    fn resolved_config_roundtrips() {
        let cfg = RunConfig::from_json(r#"{"problem": {"name": "poisson", "source": 2.0}, "mesh": {"n": 8}}"#).unwrap();
        let back = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.problem, ProblemConfig::Poisson { source: 2.0 });
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for doc in [
            r#"{"mesh": {"n": 8, "size": 3}}"#,
            r#"{"extra": 1}"#,
            r#"{"train": {"iters": 3}}"#,
            r#"{"problem": {"name": "poisson", "source": 1.0, "k": 2}}"#,
            r#"{"problem": {"name": "heat"}}"#,
        ] {
            assert!(matches!(RunConfig::from_json(doc), Err(CliError::Config(_))), "{doc}");
        }
    }

    #[test]
    fn invalid_values_are_rejected() {
        for doc in [
            r#"{"mesh": {"n": 0}}"#,
            r#"{"mesh": {"n": 2}, "basis": {"r": 8, "s": 10}}"#,
            r#"{"field": {"delta": -1}}"#,
            r#"{"train": {"alpha": 2.0}}"#,
            r#"{"dataset": {"n_train": 0}}"#,
        ] {
            assert!(matches!(RunConfig::from_json(doc), Err(CliError::Config(_))), "{doc}");
        }
    }

    #[test]
    fn hashes_track_only_upstream_sections() {
        let base = RunConfig::default();
        let mut eval_changed = base.clone();
        eval_changed.eval.seed = 3;
        assert_eq!(base.train_hash(), eval_changed.train_hash());
        assert_ne!(base.eval_hash(), eval_changed.eval_hash());

        let mut train_changed = base.clone();
        train_changed.train.seed = 1;
        assert_eq!(base.dataset_hash(), train_changed.dataset_hash());
        assert_ne!(base.train_hash(), train_changed.train_hash());

        let mut basis_changed = base.clone();
        basis_changed.basis.method = MethodName::Asm;
        assert_ne!(base.basis_hash(), basis_changed.basis_hash());
        assert_ne!(base.dataset_hash(), basis_changed.dataset_hash());
        assert_eq!(base.basis_hash().len(), 64);
    }
}
