//! The pipeline stages behind each subcommand.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use deonet_core::{compute_asm_basis, compute_kle_basis, generate_dataset, AsmSettings, Dataset, ReducedBasis};
use deonet_nn::DeepOnet;
use deonet_train::{evaluate_metrics, history_csv, train, TrainState, TrainingData};
use serde::Serialize;

use crate::artifacts::{
    load_basis, load_checkpoint, load_split, read_basis_meta, read_json, reset_dir, save_basis, save_checkpoint,
    save_split, write_json, DatasetManifest, MetricsFile, RunDir,
};
use crate::config::{MethodName, RunConfig};
use crate::error::CliError;

fn pool(threads: usize) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| CliError::Io(format!("thread pool: {e}")))
}

fn write_config(dir: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    write_json(&dir.join("config.json"), cfg)
}

/// Computes the configured reduced basis.
pub fn compute_basis(cfg: &RunConfig, threads: usize) -> Result<ReducedBasis, CliError> {
    let field = cfg.field()?;
    let b = &cfg.basis;
    let basis = match b.method {
        MethodName::Kle => compute_kle_basis(field, b.r, b.s, b.seed)?,
        MethodName::Asm => {
            let settings = AsmSettings {
                r: b.r,
                s: b.s,
                n_grad: b.n_grad,
                seed: b.seed,
                newton: cfg.newton.to_newton(),
            };
            let problem = cfg.problem.build();
            pool(threads)?.install(|| compute_asm_basis(field, problem, &settings))?
        }
    };
    Ok(basis)
}

/// Computes and stores the basis, printing its eigenvalues.
pub fn cmd_basis(cfg: &RunConfig, run: &RunDir, threads: usize) -> Result<ReducedBasis, CliError> {
    let basis = compute_basis(cfg, threads)?;
    let dir = run.basis();
    save_basis(&dir, &basis, &cfg.basis_hash())?;
    write_config(&dir, cfg)?;
    println!("{} basis, r = {}", basis.method(), basis.rank());
    println!("{:>4}  {:>24}", "k", "eigenvalue");
    for (k, l) in basis.eigenvalues().iter().enumerate() {
        println!("{:>4}  {:>24.16e}", k + 1, l);
    }
    Ok(basis)
}

fn stale(what: &str, dir: &Path, reason: &str) -> CliError {
    CliError::Stale(format!("{what} in {} {reason}", dir.display()))
}

/// Loads the stored basis after checking it matches the configuration.
pub fn checked_basis(cfg: &RunConfig, run: &RunDir) -> Result<ReducedBasis, CliError> {
    let dir = run.basis();
    if !dir.join("meta.json").exists() {
        return Err(stale("basis", &dir, "is missing; run `basis` or `generate` first"));
    }
    if read_basis_meta(&dir)?.hash != cfg.basis_hash() {
        return Err(stale("basis", &dir, "was built from a different configuration"));
    }
    load_basis(&dir, cfg.field()?)
}

/// Generates training and test data, building the basis first if absent.
pub fn cmd_generate(cfg: &RunConfig, run: &RunDir, threads: usize) -> Result<DatasetManifest, CliError> {
    let basis_dir = run.basis();
    let (basis, basis_seconds) = if basis_dir.join("meta.json").exists() {
        (checked_basis(cfg, run)?, None)
    } else {
        let t = Instant::now();
        let b = cmd_basis(cfg, run, threads)?;
        (b, Some(t.elapsed().as_secs_f64()))
    };
    let dir = run.dataset();
    reset_dir(&dir)?;
    let result = generate_into(cfg, &basis, &dir, threads, basis_seconds);
    if result.is_err() {
        let _ = fs::remove_dir_all(&dir);
    }
    result
}

fn generate_into(
    cfg: &RunConfig,
    basis: &ReducedBasis,
    dir: &Path,
    threads: usize,
    basis_seconds: Option<f64>,
) -> Result<DatasetManifest, CliError> {
    let problem = cfg.problem.build();
    let newton = cfg.newton.to_newton();
    let d = &cfg.dataset;
    let mut splits = Vec::new();
    for (name, n, seed) in [("train", d.n_train, d.base_seed), ("test", d.n_test, d.test_base_seed())] {
        let t = Instant::now();
        let ds = generate_dataset(basis, problem.clone(), &newton, n, seed, threads)?;
        if ds.is_empty() {
            return Err(CliError::Solver(format!("every {name} sample failed to solve")));
        }
        for s in &ds.skipped {
            log::warn!("{name} sample {} (seed {}) skipped: {}", s.index, s.seed, s.reason);
        }
        let secs = t.elapsed().as_secs_f64();
        splits.push(save_split(&dir.join(name), &ds, secs)?);
    }
    let test = splits.pop().expect("two splits");
    let train = splits.pop().expect("two splits");
    let manifest = DatasetManifest {
        hash: cfg.dataset_hash(),
        basis_hash: cfg.basis_hash(),
        problem: cfg.problem.name().to_string(),
        mesh_n: cfg.mesh.n,
        delta: cfg.field.delta,
        gamma: cfg.field.gamma,
        method: basis.method().to_string(),
        r: basis.rank(),
        n_x: basis.ndofs(),
        basis_wall_clock_seconds: basis_seconds,
        train,
        test,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    write_config(dir, cfg)?;
    Ok(manifest)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Loads one split after checking the dataset matches the configuration.
pub fn checked_split(cfg: &RunConfig, run: &RunDir, split: Split) -> Result<Dataset, CliError> {
    let dir = run.dataset();
    let path = dir.join("manifest.json");
    if !path.exists() {
        return Err(stale("dataset", &dir, "is missing; run `generate` first"));
    }
    let manifest: DatasetManifest = read_json(&path)?;
    if manifest.hash != cfg.dataset_hash() {
        return Err(stale("dataset", &dir, "was generated from a different configuration"));
    }
    let (name, entry) = match split {
        Split::Train => ("train", &manifest.train),
        Split::Test => ("test", &manifest.test),
    };
    load_split(&dir.join(name), entry, manifest.n_x, manifest.r)
}

/// Fresh model for the configuration, standardized on the training data.
pub fn initial_state(cfg: &RunConfig, data: &TrainingData) -> Result<TrainState, CliError> {
    let mut model = DeepOnet::new(cfg.model.network(data.rank()), cfg.train.seed)?;
    model.set_scaling(data.fit_scaling())?;
    Ok(TrainState::new(model, &cfg.train))
}

/// Trains from scratch, or from `resume`, writing checkpoints and the loss
/// history.
pub fn cmd_train(cfg: &RunConfig, run: &RunDir, resume: Option<&Path>) -> Result<TrainState, CliError> {
    let ds = checked_split(cfg, run, Split::Train)?;
    let space = cfg.space()?;
    let data = TrainingData::from_dataset(&ds, space.mesh().nodes().to_vec())?;
    let hash = cfg.train_hash();
    let state = match resume {
        Some(path) => {
            let (state, meta) = load_checkpoint(path)?;
            if meta.train_hash != hash {
                return Err(stale("checkpoint", path, "belongs to a different configuration"));
            }
            state
        }
        None => {
            reset_dir(&run.train())?;
            initial_state(cfg, &data)?
        }
    };
    fs::create_dir_all(run.checkpoints())?;
    write_config(&run.train(), cfg)?;
    let ckpts = run.checkpoints();
    let result = train(state, &data, &cfg.train, |s| {
        save_checkpoint(&ckpts.join(format!("iter_{:08}", s.iteration)), s, &hash).map_err(|e| e.to_string())
    });
    let state = match result {
        Ok(s) => s,
        Err(deonet_train::Error::NonFiniteLoss { iteration, last_good }) => {
            save_checkpoint(&ckpts.join("last_good"), &last_good, &hash)?;
            return Err(CliError::Solver(format!(
                "non-finite loss at iteration {iteration}; last good state saved in {}",
                ckpts.join("last_good").display()
            )));
        }
        Err(e) => return Err(e.into()),
    };
    save_checkpoint(&run.final_checkpoint(), &state, &hash)?;
    fs::write(run.train().join("history.csv"), history_csv(&state.history))?;
    if let Some(h) = state.history.last() {
        log::info!("iteration {}: l1 {:.4e}, l2 {:.4e}", h.iteration, h.l1, h.l2);
    }
    Ok(state)
}

/// Evaluates a checkpoint on the test split and writes the metric report.
pub fn cmd_eval(cfg: &RunConfig, run: &RunDir, checkpoint: Option<&Path>, threads: usize) -> Result<MetricsFile, CliError> {
    let basis = checked_basis(cfg, run)?;
    let test = checked_split(cfg, run, Split::Test)?;
    let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| run.final_checkpoint());
    if !path.join("meta.json").exists() {
        return Err(stale("checkpoint", &path, "is missing; run `train` first"));
    }
    let (state, meta) = load_checkpoint(&path)?;
    if meta.train_hash != cfg.train_hash() {
        return Err(stale("checkpoint", &path, "belongs to a different configuration"));
    }
    let problem = cfg.problem.build();
    let report = pool(threads)?.install(|| evaluate_metrics(&state.model, &test, &basis, problem, &cfg.eval_config()))?;
    let file = MetricsFile {
        config_hash: cfg.eval_hash(),
        train_hash: meta.train_hash,
        checkpoint_iteration: meta.iteration,
        method: basis.method().to_string(),
        n_train: cfg.dataset.n_train,
        seed: cfg.train.seed,
        variant: variant(cfg).to_string(),
        metrics: report,
    };
    let dir = run.eval();
    reset_dir(&dir)?;
    write_json(&dir.join("metrics.json"), &file)?;
    fs::write(dir.join("metrics.csv"), file.metrics.to_csv())?;
    write_config(&dir, cfg)?;
    println!("config hash {}", file.config_hash);
    println!(
        "mean relative errors: L2 {:.4e}, H1 {:.4e}, dm {:.4e} ({} samples, {} directions)",
        file.metrics.mean_l2, file.metrics.mean_h1, file.metrics.mean_dm, file.metrics.n_test, file.metrics.n_dir
    );
    Ok(file)
}

pub fn variant(cfg: &RunConfig) -> &'static str {
    if cfg.train.use_derivative_loss {
        "derivative"
    } else {
        "no_derivative"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub method: String,
    pub n_train: usize,
    pub variant: String,
    pub seeds: Vec<u64>,
    pub l2: (f64, f64),
    pub h1: (f64, f64),
    pub dm: (f64, f64),
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Groups completed runs by (method, n_train, variant). Runs without a
/// metrics file are returned separately.
pub fn collect_report(dirs: &[PathBuf]) -> Result<(Vec<ReportRow>, Vec<PathBuf>), CliError> {
    let mut groups: BTreeMap<(String, usize, String), Vec<MetricsFile>> = BTreeMap::new();
    let mut missing = Vec::new();
    for d in dirs {
        let path = RunDir::new(d).metrics_json();
        if !path.exists() {
            missing.push(d.clone());
            continue;
        }
        let f: MetricsFile = read_json(&path)?;
        groups.entry((f.method.clone(), f.n_train, f.variant.clone())).or_default().push(f);
    }
    if groups.is_empty() {
        return Err(CliError::Config("no completed runs to report".into()));
    }
    let rows = groups
        .into_iter()
        .map(|((method, n_train, variant), runs)| {
            let pick = |f: fn(&MetricsFile) -> f64| mean_std(&runs.iter().map(f).collect::<Vec<_>>());
            ReportRow {
                method,
                n_train,
                variant,
                seeds: runs.iter().map(|r| r.seed).collect(),
                l2: pick(|r| r.metrics.mean_l2),
                h1: pick(|r| r.metrics.mean_h1),
                dm: pick(|r| r.metrics.mean_dm),
            }
        })
        .collect();
    Ok((rows, missing))
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from("method,n_train,variant,runs,seeds,l2_mean,l2_std,h1_mean,h1_std,dm_mean,dm_std\n");
    for r in rows {
        let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
        out.push_str(&format!(
            "{},{},{},{},{},{:e},{:e},{:e},{:e},{:e},{:e}\n",
            r.method,
            r.n_train,
            r.variant,
            r.seeds.len(),
            seeds.join(";"),
            r.l2.0,
            r.l2.1,
            r.h1.0,
            r.h1.1,
            r.dm.0,
            r.dm.1
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(m, 3.0);
        assert!((s - 2.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[7.0]), (7.0, 0.0));
    }
}
