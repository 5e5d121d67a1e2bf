//! The five subcommands. Each loads nothing beyond its config, writes one
//! file and returns a short summary for stdout.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;
use smpc::controller::fmt_f64;
use smpc::properties::verify_properties;
use smpc::selection::{feasible_set_boundary, planar_directions};
use smpc::sim::{derive_seed, monte_carlo, run_closed_loop};
use smpc::{dp_fixed_point, DpOptions, GainLibrary, GainSchedule};

use crate::config::{output_dir, RunConfig};
use crate::error::{CliError, CliResult};

/// What a command wrote.
#[derive(Debug, Clone, Serialize)]
pub struct Outcome {
    pub command: &'static str,
    pub output: PathBuf,
    pub config_hash: String,
}

pub(crate) struct Context {
    pub cfg: RunConfig,
    pub config_path: PathBuf,
    pub hash: String,
}

impl Context {
    pub fn load(config_path: &Path) -> CliResult<Self> {
        let cfg = RunConfig::load(config_path)?;
        let hash = cfg.hash();
        Ok(Context {
            cfg,
            config_path: config_path.to_path_buf(),
            hash,
        })
    }

    fn write(&self, command: &'static str, name: &Path, contents: &str) -> CliResult<Outcome> {
        let dir = output_dir(&self.cfg, &self.config_path);
        fs::create_dir_all(&dir).map_err(|source| CliError::Io {
            action: "create",
            path: dir.clone(),
            source,
        })?;
        let path = dir.join(name);
        fs::write(&path, contents).map_err(|source| CliError::Io {
            action: "write",
            path: path.clone(),
            source,
        })?;
        Ok(Outcome {
            command,
            output: path,
            config_hash: self.hash.clone(),
        })
    }

    fn csv_preamble(&self, seed: Option<u64>) -> String {
        match seed {
            Some(s) => format!("# config_hash={} seed={s}\n", self.hash),
            None => format!("# config_hash={}\n", self.hash),
        }
    }

    fn synthesize(&self) -> CliResult<GainLibrary> {
        let grid = self.cfg.grid.build()?;
        Ok(GainLibrary::generate(&self.cfg.model, &grid, DpOptions::default())?)
    }

    /// The configured library file (checked against the model), or a fresh
    /// synthesis.
    fn library(&self) -> CliResult<GainLibrary> {
        let Some(rel) = &self.cfg.library else {
            return self.synthesize();
        };
        let path = if rel.is_absolute() {
            rel.clone()
        } else {
            self.config_path.parent().unwrap_or(Path::new(".")).join(rel)
        };
        let text = fs::read_to_string(&path).map_err(|source| CliError::Io {
            action: "read",
            path: path.clone(),
            source,
        })?;
        Ok(GainLibrary::from_json_for(&text, &self.cfg.model)?)
    }

    fn schedule(&self) -> CliResult<GainSchedule> {
        Ok(GainSchedule::new(self.cfg.model.clone(), self.library()?)?)
    }
}

pub(crate) fn synth(ctx: &Context) -> CliResult<Outcome> {
    let mut lib = ctx.synthesize()?;
    lib.config_hash = Some(ctx.hash.clone());
    ctx.write("synth", &ctx.cfg.output.library, &lib.to_json())
}

pub(crate) fn simulate(ctx: &Context) -> CliResult<Outcome> {
    let cfg = &ctx.cfg;
    let schedule = ctx.schedule()?;
    let seed = derive_seed(cfg.seed, cfg.run_index);
    let traj = run_closed_loop(&schedule, &cfg.closed_loop(), &cfg.x0(), cfg.steps, seed)?;
    let mut out = ctx.csv_preamble(Some(seed));
    out.push_str(&traj.to_csv());
    ctx.write("simulate", &cfg.output.trajectory, &out)
}

pub(crate) fn montecarlo(ctx: &Context) -> CliResult<Outcome> {
    let cfg = &ctx.cfg;
    let schedule = ctx.schedule()?;
    let result = monte_carlo(
        &schedule,
        &cfg.closed_loop(),
        &cfg.x0(),
        cfg.runs,
        cfg.steps,
        cfg.violation_horizon,
        cfg.seed,
    )?;
    let mut metrics = result.metrics;
    metrics.config_hash = ctx.hash.clone();
    let text = serde_json::to_string_pretty(&metrics).expect("plain data serialises");
    ctx.write("montecarlo", &cfg.output.metrics, &(text + "\n"))
}

pub(crate) fn check_properties(ctx: &Context) -> CliResult<Outcome> {
    let cfg = &ctx.cfg;
    let library = ctx.library()?;
    let report = verify_properties(&cfg.model, &library, &cfg.properties, cfg.distribution, cfg.seed)?;
    let failed = report.failures().count();
    let doc = json!({
        "config_hash": ctx.hash,
        "seed": cfg.seed,
        "all_pass": failed == 0,
        "checks": report.checks,
    });
    let text = serde_json::to_string_pretty(&doc).expect("plain data serialises");
    let outcome = ctx.write("check-properties", &cfg.output.properties, &(text + "\n"))?;
    if failed > 0 {
        return Err(CliError::PropertiesFailed {
            failed,
            report: outcome.output,
        });
    }
    Ok(outcome)
}

/// One row per (weight, direction): the unit direction, the radius of the
/// initial feasible set along it, and the boundary point.
pub(crate) fn feasible_set(ctx: &Context) -> CliResult<Outcome> {
    let cfg = &ctx.cfg;
    let model = &cfg.model;
    let nx = model.nx();
    let dirs = planar_directions(cfg.feasible_set.directions, nx);
    let eps0 = cfg.epsilon0();
    let mut out = ctx.csv_preamble(None);
    let mut header = vec!["mu".to_string(), "direction".into(), "radius".into()];
    header.extend((0..nx).map(|i| format!("d{i}")));
    header.extend((0..nx).map(|i| format!("b{i}")));
    out.push_str(&header.join(","));
    out.push('\n');
    for &mu in &cfg.feasible_set.mu {
        let rec = dp_fixed_point(model, mu, None, DpOptions::default())?;
        let radii = feasible_set_boundary(&rec, model, eps0, &dirs)?;
        for (j, (d, r)) in dirs.iter().zip(&radii).enumerate() {
            let mut row = vec![fmt_f64(mu), j.to_string(), fmt_f64(*r)];
            row.extend(d.iter().map(|v| fmt_f64(*v)));
            row.extend(d.iter().map(|v| fmt_f64(if *v == 0.0 { 0.0 } else { r * v })));
            out.push_str(&row.join(","));
            out.push('\n');
        }
    }
    ctx.write("feasible-set", &cfg.output.feasible_set, &out)
}
