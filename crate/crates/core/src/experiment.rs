//! Experiment configuration, orchestration of the simulation modules and
//! persistence of run artifacts.
//!
//! Every artifact is a pure function of the configuration (including its
//! master seed): file names are relative, floats are written with
//! round-trip precision and no timestamps or paths leak into the output.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::billiard::BilliardError;
use crate::escape::{
    estimate_escape_rate, fit_escape_rate, fleming_viot_evolve, nu_mass_of_hole_images, small_hole_sweep,
    survivor_distribution, sweep_csv, Ensemble, EscapeError, MIN_SURVIVORS,
};
use crate::geometry::{finite_horizon_probe, validate_table, GeometryError, HorizonProbe, Table, TableSpec, Vec2};
use crate::holes::{Anchor, Hole, HoleError, HoleSpec, TypeISpec};
use crate::measures::{
    bin_measure, distance_to_nu, noise_floor, pushforward_residual, DensitySpec, EmpiricalMeasure, Grid, MeasureError,
};
use crate::open_dynamics::{evolve_ensemble, Convention};
use crate::rng::StreamKey;
use crate::tower::{build_tower, leading_eigenpair, tail_mass_check, theta_lower_bound, TowerError, TowerSpec};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("config lacks `{0}`, required by this subcommand")]
    Missing(&'static str),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Billiard(#[from] BilliardError),
    #[error(transparent)]
    Hole(#[from] HoleError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Escape(#[from] EscapeError),
    #[error(transparent)]
    Tower(#[from] TowerError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl ExperimentError {
    pub fn code(&self) -> &'static str {
        match self {
            ExperimentError::Parse(_) => "config.parse",
            ExperimentError::Config(_) => "config.invalid",
            ExperimentError::Missing(_) => "config.missing_field",
            ExperimentError::Geometry(e) => e.code(),
            ExperimentError::Billiard(e) => e.code(),
            ExperimentError::Hole(e) => e.code(),
            ExperimentError::Measure(e) => e.code(),
            ExperimentError::Escape(e) => e.code(),
            ExperimentError::Tower(e) => e.code(),
            ExperimentError::Io { .. } => "io",
        }
    }

    /// 2 for configuration errors, 3 for numerical failures, 4 for io.
    pub fn exit_code(&self) -> i32 {
        const CONFIG: i32 = 2;
        const NUMERIC: i32 = 3;
        let measure = |e: &MeasureError| match e {
            MeasureError::InvalidDensity(_) | MeasureError::InvalidGrid(_) => CONFIG,
            _ => NUMERIC,
        };
        match self {
            ExperimentError::Parse(_) | ExperimentError::Config(_) | ExperimentError::Missing(_) => CONFIG,
            ExperimentError::Geometry(_) | ExperimentError::Hole(_) => CONFIG,
            ExperimentError::Billiard(BilliardError::Geometry(_)) => CONFIG,
            ExperimentError::Billiard(_) => NUMERIC,
            ExperimentError::Measure(e) => measure(e),
            ExperimentError::Escape(e) => match e {
                EscapeError::BadWindow(..) | EscapeError::InvalidArgument(_) | EscapeError::Hole(_) => CONFIG,
                EscapeError::Measure(m) => measure(m),
                _ => NUMERIC,
            },
            ExperimentError::Tower(e) => match e {
                TowerError::NoConvergence(_)
                | TowerError::EigenvalueBelowBeta { .. }
                | TowerError::NotStabilized(_)
                | TowerError::ReducibleSurvivingGraph => NUMERIC,
                _ => CONFIG,
            },
            ExperimentError::Io { .. } => 4,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    #[default]
    Direct,
    FlemingViot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HoleKind {
    #[serde(rename = "I")]
    TypeI,
    #[serde(rename = "II")]
    TypeII,
}

/// A shrinking hole family: Type I anchors are `[scatterer, r]`, Type II
/// anchors are points `[x, y]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(rename = "type")]
    pub kind: HoleKind,
    pub anchor: [f64; 2],
    pub h: Vec<f64>,
}

impl SweepSpec {
    pub fn anchor(&self) -> Result<Anchor, ExperimentError> {
        match self.kind {
            HoleKind::TypeI => {
                let id = self.anchor[0];
                if !(id >= 0.0 && id.fract() == 0.0) {
                    return Err(ExperimentError::Config(format!("sweep anchor scatterer {id} is not an index")));
                }
                Ok(Anchor::Boundary { scatterer: id as usize, r: self.anchor[1] })
            }
            HoleKind::TypeII => Ok(Anchor::Interior(Vec2::new(self.anchor[0], self.anchor[1]))),
        }
    }
}

/// A tower spec given inline or as a path to a JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TowerSource {
    Path(PathBuf),
    Inline(TowerSpec),
}

fn default_hole() -> HoleSpec {
    HoleSpec::TypeI(TypeISpec::Arc { scatterer: 0, arc: [0.0, 0.1] })
}
fn default_particles() -> usize {
    100_000
}
fn default_n_max() -> usize {
    40
}
fn default_window() -> [usize; 2] {
    [10, 40]
}
fn default_grid() -> [usize; 2] {
    [64, 64]
}
fn default_k_max() -> usize {
    200
}
fn default_tower_tol() -> f64 {
    1e-14
}
fn default_tower_max_iter() -> usize {
    100_000
}

/// One run's configuration. Missing fields take the defaults of the two-disk
/// table with a Type I hole of arc length 0.1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "TableSpec::two_disk")]
    pub table: TableSpec,
    #[serde(default = "default_hole")]
    pub hole: HoleSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
    #[serde(default)]
    pub density: DensitySpec,
    #[serde(default = "default_particles", alias = "N")]
    pub particles: usize,
    #[serde(default = "default_n_max")]
    pub n_max: usize,
    #[serde(default = "default_window")]
    pub window: [usize; 2],
    /// `[r_bins, phi_bins]` per scatterer.
    #[serde(default = "default_grid")]
    pub grid: [usize; 2],
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub estimator: Estimator,
    #[serde(default)]
    pub convention: Convention,
    /// Horizon of the singularity diagnostic.
    #[serde(default = "default_k_max")]
    pub k_max: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tower: Option<TowerSource>,
    #[serde(default = "default_tower_tol")]
    pub tower_tol: f64,
    #[serde(default = "default_tower_max_iter")]
    pub tower_max_iter: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        serde_json::from_str(text).map_err(|e| ExperimentError::Parse(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialization, ignoring the output directory.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        hex::encode(Sha256::digest(serde_json::to_string(&c).expect("config serializes").as_bytes()))
    }

    fn tower_spec(&self) -> Result<TowerSpec, ExperimentError> {
        match self.tower.as_ref().ok_or(ExperimentError::Missing("tower"))? {
            TowerSource::Inline(spec) => Ok(spec.clone()),
            TowerSource::Path(p) => read_tower(p),
        }
    }

    fn ensemble(&self) -> Ensemble {
        Ensemble { density: self.density, particles: self.particles, seed: self.seed, convention: self.convention }
    }
}

fn read_tower(path: &Path) -> Result<TowerSpec, ExperimentError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| ExperimentError::Parse(format!("{}: {e}", path.display())))
}

/// Reads a config file. A tower given by path is resolved against the
/// config's directory and inlined, so the config hash covers its content.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, ExperimentError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut cfg = ExperimentConfig::from_json(&text)?;
    if let Some(TowerSource::Path(p)) = &cfg.tower {
        let full = path.parent().map(|d| d.join(p)).unwrap_or_else(|| p.clone());
        cfg.tower = Some(TowerSource::Inline(read_tower(&full)?));
    }
    Ok(cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Subcommand {
    ValidateGeometry,
    Simulate,
    EscapeRate,
    SurvivorMeasure,
    SmallHoleSweep,
    SingularityDiag,
    TowerEig,
    TowerBound,
}

impl Subcommand {
    pub const ALL: [Subcommand; 8] = [
        Subcommand::ValidateGeometry,
        Subcommand::Simulate,
        Subcommand::EscapeRate,
        Subcommand::SurvivorMeasure,
        Subcommand::SmallHoleSweep,
        Subcommand::SingularityDiag,
        Subcommand::TowerEig,
        Subcommand::TowerBound,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Subcommand::ValidateGeometry => "validate-geometry",
            Subcommand::Simulate => "simulate",
            Subcommand::EscapeRate => "escape-rate",
            Subcommand::SurvivorMeasure => "survivor-measure",
            Subcommand::SmallHoleSweep => "small-hole-sweep",
            Subcommand::SingularityDiag => "singularity-diag",
            Subcommand::TowerEig => "tower-eig",
            Subcommand::TowerBound => "tower-bound",
        }
    }
}

impl fmt::Display for Subcommand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Subcommand {
    type Err = ExperimentError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Subcommand::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| ExperimentError::Config(format!("unknown subcommand `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArtifactFile {
    pub name: String,
    pub contents: String,
}

/// Everything a run produces, held in memory until written.
#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifact {
    pub subcommand: Subcommand,
    pub config_hash: String,
    pub seed: u64,
    pub files: Vec<ArtifactFile>,
    /// Contents of the main results JSON.
    pub summary: Value,
}

impl RunArtifact {
    pub fn file(&self, name: &str) -> Option<&str> {
        self.files.iter().find(|f| f.name == name).map(|f| f.contents.as_str())
    }
}

/// Accumulates files, stamping JSON and the log with the hash and seed.
struct Builder {
    subcommand: Subcommand,
    hash: String,
    seed: u64,
    files: Vec<ArtifactFile>,
    log: Vec<(String, String)>,
}

impl Builder {
    fn new(subcommand: Subcommand, cfg: &ExperimentConfig) -> Self {
        Builder { subcommand, hash: cfg.config_hash(), seed: cfg.seed, files: Vec::new(), log: Vec::new() }
    }

    fn text(&mut self, name: &str, contents: String) {
        self.files.push(ArtifactFile { name: name.into(), contents });
    }

    fn log(&mut self, key: &str, value: impl fmt::Display) {
        self.log.push((key.into(), value.to_string()));
    }

    fn finish(mut self, name: &str, mut summary: Value) -> RunArtifact {
        let obj = summary.as_object_mut().expect("summary is an object");
        obj.insert("config_hash".into(), json!(self.hash));
        obj.insert("seed".into(), json!(self.seed));
        let mut text = serde_json::to_string_pretty(&summary).expect("json");
        text.push('\n');
        self.text(name, text);
        let mut log = format!("subcommand={}\nconfig_hash={}\nseed={}\n", self.subcommand, self.hash, self.seed);
        for (k, v) in &self.log {
            log.push_str(&format!("{k}={v}\n"));
        }
        self.text("run.log", log);
        RunArtifact { subcommand: self.subcommand, config_hash: self.hash, seed: self.seed, files: self.files, summary }
    }
}

fn table_and_grid(cfg: &ExperimentConfig) -> Result<(Table, Grid), ExperimentError> {
    let table = validate_table(&cfg.table)?;
    let grid = Grid::new(&table, cfg.grid[0], cfg.grid[1])?;
    cfg.density.validate()?;
    if cfg.particles == 0 {
        return Err(ExperimentError::Config("particles must be positive".into()));
    }
    Ok((table, grid))
}

/// Runs one subcommand. Output depends only on `cfg`, not on the size of
/// the rayon pool it runs in.
pub fn run_experiment(sub: Subcommand, cfg: &ExperimentConfig) -> Result<RunArtifact, ExperimentError> {
    let mut b = Builder::new(sub, cfg);
    match sub {
        Subcommand::ValidateGeometry => validate_geometry(cfg, b),
        Subcommand::Simulate => {
            let (table, grid) = table_and_grid(cfg)?;
            let hole = cfg.hole.build(&table)?;
            let ens = cfg.ensemble();
            let run = evolve_ensemble(&table, &hole, &ens.sample(&table), cfg.n_max, cfg.convention);
            let survivors = run.survivors();
            let measure = if survivors.is_empty() {
                EmpiricalMeasure::zeros(grid)
            } else {
                bin_measure(&table, &survivors, grid).normalized()?
            };
            let c = &run.counts;
            let floor = noise_floor(&table, grid, &StreamKey::new(cfg.seed, "noise-floor"), cfg.particles)?;
            b.log("particles", cfg.particles);
            b.log("censored", c.censored[cfg.n_max]);
            b.log("noise_floor", floor);
            b.text("counts.csv", c.to_csv());
            b.text("survivors.csv", measure.to_csv());
            Ok(b.finish(
                "simulate.json",
                json!({
                    "steps": cfg.n_max,
                    "particles": cfg.particles,
                    "survivors": c.survivors[cfg.n_max],
                    "escaped": c.escaped[cfg.n_max],
                    "censored": c.censored[cfg.n_max],
                    "noise_floor": floor,
                    "counts_csv_path": "counts.csv",
                    "measure_csv_path": "survivors.csv",
                }),
            ))
        }
        Subcommand::EscapeRate => {
            let (table, grid) = table_and_grid(cfg)?;
            let hole = cfg.hole.build(&table)?;
            let ens = cfg.ensemble();
            let est = match cfg.estimator {
                Estimator::Direct => estimate_escape_rate(&table, &hole, &ens, cfg.n_max, cfg.window)?.estimate,
                Estimator::FlemingViot => {
                    let fv = fleming_viot_evolve(&table, &hole, &ens, cfg.n_max, cfg.window, grid, &[])?;
                    b.log("clones", fv.clones);
                    fv.estimate
                }
            };
            log_estimator(&mut b, cfg, &est.counts.censored);
            b.text("counts.csv", est.counts.to_csv());
            Ok(b.finish(
                "results.json",
                json!({
                    "theta_hat": est.theta_hat,
                    "log_slope": est.log_slope,
                    "stderr": est.stderr,
                    "window": est.window,
                    "counts_csv_path": "counts.csv",
                }),
            ))
        }
        Subcommand::SurvivorMeasure => survivor_measure(cfg, b),
        Subcommand::SmallHoleSweep => {
            let (table, grid) = table_and_grid(cfg)?;
            let sweep = cfg.sweep.as_ref().ok_or(ExperimentError::Missing("sweep"))?;
            let rows =
                small_hole_sweep(&table, sweep.anchor()?, &sweep.h, &cfg.ensemble(), cfg.n_max, cfg.window, grid)?;
            b.log("particles", cfg.particles);
            b.log("noise_floor", rows[0].noise_floor);
            b.text("sweep.csv", sweep_csv(&rows));
            Ok(b.finish("sweep.json", json!({ "rows": rows, "sweep_csv_path": "sweep.csv" })))
        }
        Subcommand::SingularityDiag => {
            let (table, _) = table_and_grid(cfg)?;
            let hole = cfg.hole.build(&table)?;
            let rep = nu_mass_of_hole_images(&table, &hole, cfg.k_max, cfg.particles, cfg.seed)?;
            let mut csv = String::from("k,nu_mass\n");
            for (k, m) in rep.nu_mass.iter().enumerate() {
                csv.push_str(&format!("{k},{m:.16e}\n"));
            }
            b.log("particles", cfg.particles);
            b.log("censored", rep.censored);
            b.text("singularity.csv", csv);
            Ok(b.finish(
                "singularity.json",
                json!({
                    "k_max": cfg.k_max,
                    "nu_mass": rep.nu_mass[cfg.k_max],
                    "survivor_mass": rep.survivor_mass,
                    "survivors": rep.survivors,
                    "censored": rep.censored,
                    "csv_path": "singularity.csv",
                }),
            ))
        }
        Subcommand::TowerEig | Subcommand::TowerBound => {
            let tower = build_tower(&cfg.tower_spec()?)?;
            let eig = leading_eigenpair(&tower, cfg.tower_tol, cfg.tower_max_iter)?;
            b.log("iterations", eig.iterations);
            if sub == Subcommand::TowerEig {
                let h: Vec<f64> = (0..tower.n_cells()).map(|c| eig.h.cell_value(c)).collect();
                return Ok(b.finish(
                    "tower_eig.json",
                    json!({
                        "theta": eig.theta,
                        "iterations": eig.iterations,
                        "residual": eig.residual,
                        "beta": tower.beta(),
                        "cells": tower.cells(),
                        "h": h,
                    }),
                ));
            }
            let lb = theta_lower_bound(&tower);
            let tail = tail_mass_check(&tower, &eig.h, 0.05);
            Ok(b.finish(
                "tower_bound.json",
                json!({
                    "theta": eig.theta,
                    "lower_bound": lb.bound,
                    "weighted_hole_mass": lb.weighted_hole_mass,
                    "bound_applicable": lb.applicable,
                    "bound_holds": !lb.applicable || eig.theta >= lb.bound,
                    "tail": tail,
                }),
            ))
        }
    }
}

fn log_estimator(b: &mut Builder, cfg: &ExperimentConfig, censored: &[u64]) {
    b.log("estimator", serde_json::to_value(cfg.estimator).expect("json").as_str().unwrap_or_default());
    b.log("particles", cfg.particles);
    let total: u64 = match cfg.estimator {
        Estimator::Direct => censored.last().copied().unwrap_or(0),
        // per-step counts
        Estimator::FlemingViot => censored.iter().sum(),
    };
    b.log("censored", total);
}

fn validate_geometry(cfg: &ExperimentConfig, b: Builder) -> Result<RunArtifact, ExperimentError> {
    let table = validate_table(&cfg.table)?;
    let cert = finite_horizon_probe(&table, &HorizonProbe::for_table(&table))?;
    let hole = cfg.hole.build(&table)?;
    let hole_kind = match hole {
        Hole::Empty => "empty",
        Hole::Arc(_) => "I",
        Hole::Disk(_) => "II",
    };
    if let Some(sweep) = &cfg.sweep {
        let anchor = sweep.anchor()?;
        for &h in &sweep.h {
            crate::holes::hole_family(&table, anchor, h, 0.0)?;
        }
    }
    if cfg.tower.is_some() {
        build_tower(&cfg.tower_spec()?)?;
    }
    Ok(b.finish(
        "geometry.json",
        json!({
            "scatterers": table.len(),
            "perimeters": table.perimeters(),
            "total_perimeter": table.total_perimeter(),
            "max_flight": cert.max_flight,
            "tangent_flight": cert.tangent_flight,
            "sampled_flight": cert.sampled_flight,
            "directions_checked": cert.directions_checked,
            "corridor_test_complete": cert.corridor_test_complete,
            "hole_type": hole_kind,
        }),
    ))
}

fn survivor_measure(cfg: &ExperimentConfig, mut b: Builder) -> Result<RunArtifact, ExperimentError> {
    let (table, grid) = table_and_grid(cfg)?;
    let hole = cfg.hole.build(&table)?;
    let ens = cfg.ensemble();
    let (measure, particles, est) = match cfg.estimator {
        Estimator::Direct => {
            let s = survivor_distribution(&table, &hole, &ens, cfg.n_max, grid, MIN_SURVIVORS)?;
            let est = fit_escape_rate(&s.counts, cfg.window)?;
            (s.measure, s.particles, est)
        }
        Estimator::FlemingViot => {
            let fv = fleming_viot_evolve(&table, &hole, &ens, cfg.n_max, cfg.window, grid, &[])?;
            b.log("clones", fv.clones);
            (fv.measure, fv.particles, fv.estimate)
        }
    };
    let floor = noise_floor(&table, grid, &StreamKey::new(cfg.seed, "noise-floor"), particles.len())?;
    let res = pushforward_residual(&table, &hole, &particles, grid, cfg.convention)?;
    log_estimator(&mut b, cfg, &est.counts.censored);
    b.log("noise_floor", floor);
    b.text("survivor_measure.csv", measure.to_csv());
    Ok(b.finish(
        "survivor_measure.json",
        json!({
            "n": cfg.n_max,
            "survivors": particles.len(),
            "theta_hat": est.theta_hat,
            "stderr": est.stderr,
            "distance_to_nu": distance_to_nu(&table, &measure)?,
            "noise_floor": floor,
            "residual_distance": res.distance,
            "mass_ratio": res.mass_ratio,
            "residual_censored": res.censored,
            "measure_csv_path": "survivor_measure.csv",
        }),
    ))
}

/// Writes every file of `artifact` into the existing directory `dir`.
pub fn write_results(artifact: &RunArtifact, dir: &Path) -> Result<Vec<PathBuf>, ExperimentError> {
    if !dir.is_dir() {
        return Err(ExperimentError::Io {
            path: dir.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "output directory does not exist"),
        });
    }
    artifact
        .files
        .iter()
        .map(|f| {
            let path = dir.join(&f.name);
            fs::write(&path, &f.contents).map_err(io_err(&path))?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::open_dynamics::SurvivorCounts;

    fn small() -> ExperimentConfig {
        ExperimentConfig { particles: 20_000, n_max: 12, window: [2, 12], grid: [8, 8], ..Default::default() }
    }

    #[test]
    fn defaults_and_round_trip() {
        let c = ExperimentConfig::default();
        assert_eq!(c.table, TableSpec::two_disk());
        assert_eq!(c.window, [10, 40]);
        let mut d = small();
        d.density = DensitySpec::RCosine { c1: 1.0, c2: 0.1 + 0.2 };
        d.tower_tol = 1.0 / 3.0;
        let back = ExperimentConfig::from_json(&d.to_json()).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.config_hash(), d.config_hash());
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = small();
        let mut b = a.clone();
        b.output_dir = Some("elsewhere".into());
        assert_eq!(a.config_hash(), b.config_hash());
        b.seed = 1;
        assert_ne!(a.config_hash(), b.config_hash());
        assert_eq!(a.config_hash().len(), 64);
    }

    #[test]
    fn config_errors() {
        let e = ExperimentConfig::from_json(r#"{"particels": 5}"#).unwrap_err();
        assert_eq!(e.code(), "config.parse");
        let c = ExperimentConfig::from_json(
            r#"{"table":{"scatterers":[{"center":[0,0],"radius":0.3},{"center":[0.4,0],"radius":0.3}]}}"#,
        )
        .unwrap();
        let e = run_experiment(Subcommand::ValidateGeometry, &c).unwrap_err();
        assert_eq!((e.code(), e.exit_code()), ("geometry.overlap", 2));
        let e = run_experiment(Subcommand::TowerEig, &small()).unwrap_err();
        assert_eq!((e.code(), e.exit_code()), ("config.missing_field", 2));
        let e = run_experiment(Subcommand::SmallHoleSweep, &small()).unwrap_err();
        assert_eq!(e.code(), "config.missing_field");
        assert_eq!("tower-bound".parse::<Subcommand>().unwrap(), Subcommand::TowerBound);
        assert!("tower".parse::<Subcommand>().is_err());
    }

    #[test]
    fn escape_rate_artifacts() {
        let a = run_experiment(Subcommand::EscapeRate, &small()).unwrap();
        let s = &a.summary;
        for key in ["theta_hat", "log_slope", "stderr", "window", "counts_csv_path", "seed", "config_hash"] {
            assert!(s.get(key).is_some(), "{key}");
        }
        let theta = s["theta_hat"].as_f64().unwrap();
        assert!(theta > 0.0 && theta < 1.0);
        let counts = SurvivorCounts::from_csv(a.file("counts.csv").unwrap()).unwrap();
        assert_eq!(counts.steps(), 12);
        assert!(a.file("run.log").unwrap().contains(&format!("config_hash={}", a.config_hash)));
        assert_eq!(run_experiment(Subcommand::EscapeRate, &small()).unwrap(), a);
    }

    #[test]
    fn numeric_failure_exit_code() {
        // a tiny ensemble cannot keep 100 survivors to the end of the window
        let c = ExperimentConfig { particles: 50, ..small() };
        let e = run_experiment(Subcommand::EscapeRate, &c).unwrap_err();
        assert_eq!(e.exit_code(), 3, "{e}");
    }

    #[test]
    fn write_needs_existing_directory() {
        let a = run_experiment(
            Subcommand::TowerEig,
            &ExperimentConfig {
                tower: Some(TowerSource::Inline(TowerSpec::geometric(5, 0.5, vec![[1, 4]], 0.9))),
                ..Default::default()
            },
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let e = write_results(&a, &dir.path().join("missing")).unwrap_err();
        assert_eq!((e.code(), e.exit_code()), ("io", 4));
        let paths = write_results(&a, dir.path()).unwrap();
        assert_eq!(paths.len(), 2);
        let first = fs::read(&paths[0]).unwrap();
        write_results(&a, dir.path()).unwrap();
        assert_eq!(fs::read(&paths[0]).unwrap(), first);
    }

    #[test]
    fn tower_path_is_inlined() {
        let dir = tempfile::tempdir().unwrap();
        let spec = TowerSpec::geometric(4, 0.5, vec![], 0.9);
        fs::write(dir.path().join("t.json"), serde_json::to_string(&spec).unwrap()).unwrap();
        fs::write(dir.path().join("c.json"), r#"{"tower":"t.json"}"#).unwrap();
        let c = load_config(&dir.path().join("c.json")).unwrap();
        assert_eq!(c.tower, Some(TowerSource::Inline(spec)));
        let e = load_config(&dir.path().join("nope.json")).unwrap_err();
        assert_eq!(e.exit_code(), 4);
    }
}
