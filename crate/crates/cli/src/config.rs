//! The run configuration document.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use smpc::properties::Tolerances;
use smpc::sim::DEFAULT_VIOLATION_HORIZON;
use smpc::{ClosedLoopConfig, ControlMode, Distribution, GridSpec, InitialPolicy, PlantModel};

use crate::error::{CliError, CliResult};

/// Overrides the output directory.
pub const OUTPUT_DIR_ENV: &str = "SMPC_OUTPUT_DIR";
/// Overrides the worker thread count.
pub const THREADS_ENV: &str = "SMPC_THREADS";

fn default_mode() -> ControlMode {
    ControlMode::Method1
}

fn default_steps() -> usize {
    200
}

fn default_runs() -> usize {
    500
}

fn default_horizon() -> usize {
    DEFAULT_VIOLATION_HORIZON
}

/// Weights and directions for the `feasible-set` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeasibleSetSpec {
    pub mu: Vec<f64>,
    pub directions: usize,
}

impl Default for FeasibleSetSpec {
    fn default() -> Self {
        FeasibleSetSpec {
            mu: vec![1e-15, 1e-4, 2.5e-4],
            directions: 64,
        }
    }
}

/// Output file names, relative to the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSpec {
    /// Output directory; the working directory when absent. `SMPC_OUTPUT_DIR`
    /// takes precedence.
    pub dir: Option<PathBuf>,
    pub library: PathBuf,
    pub trajectory: PathBuf,
    pub metrics: PathBuf,
    pub properties: PathBuf,
    pub feasible_set: PathBuf,
}

impl Default for OutputSpec {
    fn default() -> Self {
        OutputSpec {
            dir: None,
            library: "library.json".into(),
            trajectory: "trajectory.csv".into(),
            metrics: "metrics.json".into(),
            properties: "properties.json".into(),
            feasible_set: "feasible_set.csv".into(),
        }
    }
}

/// One run configuration. Only `model` is required.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: PlantModel,
    #[serde(default = "default_mode")]
    pub mode: ControlMode,
    #[serde(default)]
    pub grid: GridSpec,
    /// Prebuilt library (relative paths resolve against the config file);
    /// synthesized from `grid` when absent.
    #[serde(default)]
    pub library: Option<PathBuf>,
    /// Initial state; the origin when absent.
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    /// Initial budget; the model's bound `e` when absent.
    #[serde(default)]
    pub epsilon0: Option<f64>,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default = "default_horizon")]
    pub violation_horizon: usize,
    #[serde(default)]
    pub seed: u64,
    /// Run replayed by `simulate` (run `i` of a campaign with the same seed).
    #[serde(default)]
    pub run_index: u64,
    #[serde(default)]
    pub initial_policy: InitialPolicy,
    #[serde(default)]
    pub distribution: Distribution,
    #[serde(default)]
    pub feasible_set: FeasibleSetSpec,
    #[serde(default)]
    pub properties: Tolerances,
    #[serde(default)]
    pub output: OutputSpec,
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> CliResult<()> {
    if ok {
        Ok(())
    } else {
        Err(CliError::Config(msg()))
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|source| CliError::Io {
            action: "read",
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// Checks every field; nothing is computed before this passes.
    pub fn validate(&self) -> CliResult<()> {
        self.model
            .ensure_valid()
            .map_err(|e| CliError::Config(format!("model: {e}")))?;
        if self.library.is_none() {
            self.grid.build().map_err(|e| CliError::Config(format!("grid: {e}")))?;
        }
        let nx = self.model.nx();
        if let Some(x0) = &self.x0 {
            check(x0.len() == nx, || format!("x0 has {} entries, the model has {nx} states", x0.len()))?;
            check(x0.iter().all(|v| v.is_finite()), || "x0 has non-finite entries".into())?;
        }
        if let Some(eps) = self.epsilon0 {
            check(eps.is_finite() && eps >= 0.0, || format!("epsilon0 = {eps} must be finite and non-negative"))?;
        }
        check(self.steps >= 1, || "steps must be at least 1".into())?;
        check(self.runs >= 1, || "runs must be at least 1".into())?;
        let fs = &self.feasible_set;
        check(!fs.mu.is_empty(), || "feasible_set.mu is empty".into())?;
        check(fs.mu.iter().all(|&m| m > 0.0 && m <= 1.0), || "feasible_set.mu entries must lie in (0, 1]".into())?;
        check(fs.directions >= 1, || "feasible_set.directions must be at least 1".into())?;
        let t = &self.properties;
        check(t.deterministic_rel > 0.0 && t.deterministic_rel.is_finite(), || {
            "properties.deterministic_rel must be positive".into()
        })?;
        check(t.mc_sigmas > 0.0 && t.mc_sigmas.is_finite(), || "properties.mc_sigmas must be positive".into())?;
        check(t.mc_draws >= 2, || "properties.mc_draws must be at least 2".into())?;
        check(t.samples >= 1, || "properties.samples must be at least 1".into())?;
        check(t.closed_loop_runs == 0 || t.closed_loop_steps >= 1, || {
            "properties.closed_loop_steps must be at least 1".into()
        })?;
        let o = &self.output;
        for (name, p) in [
            ("library", &o.library),
            ("trajectory", &o.trajectory),
            ("metrics", &o.metrics),
            ("properties", &o.properties),
            ("feasible_set", &o.feasible_set),
        ] {
            check(!p.as_os_str().is_empty(), || format!("output.{name} is empty"))?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical form with the output section cleared: two
    /// configs that differ only in where files go share a hash.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output = OutputSpec::default();
        let text = serde_json::to_string(&canonical).expect("plain data serialises");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn x0(&self) -> DVector<f64> {
        match &self.x0 {
            Some(v) => DVector::from_column_slice(v),
            None => DVector::zeros(self.model.nx()),
        }
    }

    pub fn epsilon0(&self) -> f64 {
        self.epsilon0.unwrap_or(self.model.e)
    }

    pub fn closed_loop(&self) -> ClosedLoopConfig {
        ClosedLoopConfig {
            mode: self.mode,
            epsilon0: self.epsilon0,
            initial_policy: self.initial_policy,
            distribution: self.distribution,
        }
    }
}

/// Output directory: `SMPC_OUTPUT_DIR`, else the config's `output.dir`
/// (relative to the config file), else the working directory.
pub fn output_dir(cfg: &RunConfig, config_path: &Path) -> PathBuf {
    if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV).filter(|v| !v.is_empty()) {
        return PathBuf::from(dir);
    }
    match &cfg.output.dir {
        Some(d) if d.is_absolute() => d.clone(),
        Some(d) => config_path.parent().unwrap_or(Path::new(".")).join(d),
        None => PathBuf::from("."),
    }
}

/// Worker count from `SMPC_THREADS`, if set.
pub fn thread_override() -> CliResult<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) if !v.trim().is_empty() => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(CliError::Config(format!("{THREADS_ENV}={v} is not a positive integer"))),
        },
        _ => Ok(None),
    }
}
