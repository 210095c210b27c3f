//! Initial densities, the invariant measure ν, and binned empirical measures
//! on the collision space.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::billiard::PhasePoint;
use crate::geometry::Table;
use crate::holes::Hole;
use crate::open_dynamics::{advance, Convention, StepOutcome};
use crate::rng::StreamKey;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeasureError {
    #[error("measures live on different grids")]
    GridMismatch,
    #[error("survivor set is empty")]
    EmptySurvivorSet,
    #[error("measure has zero total mass")]
    ZeroMass,
    #[error("invalid density: {0}")]
    InvalidDensity(String),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("bad measure csv: {0}")]
    BadCsv(String),
}

impl MeasureError {
    pub fn code(&self) -> &'static str {
        match self {
            MeasureError::GridMismatch => "measures.grid_mismatch",
            MeasureError::EmptySurvivorSet => "measures.empty_survivor_set",
            MeasureError::ZeroMass => "measures.zero_mass",
            MeasureError::InvalidDensity(_) => "measures.invalid_density",
            MeasureError::InvalidGrid(_) => "measures.invalid_grid",
            MeasureError::BadCsv(_) => "measures.bad_csv",
        }
    }
}

/// `c = 1/(2·total_perimeter)`.
pub fn nu_constant(table: &Table) -> f64 {
    0.5 / table.total_perimeter()
}

/// Density of ν with respect to `dr dφ`.
pub fn nu_density(table: &Table, x: &PhasePoint) -> f64 {
    nu_constant(table) * x.phi.cos().max(0.0)
}

/// Inverse CDF of the φ-marginal `cos φ / 2`.
#[inline]
pub fn phi_from_uniform(u: f64) -> f64 {
    (2.0 * u - 1.0).clamp(-1.0, 1.0).asin()
}

/// Initial measures: ν itself, or `ψ dν` for a positive Lipschitz `ψ` from a
/// small catalog. Densities need not be normalized.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DensitySpec {
    #[default]
    Nu,
    /// `ψ ≡ value`.
    Constant {
        value: f64,
    },
    /// `ψ = c1 + c2·cos(2π r / perimeter)`.
    RCosine {
        c1: f64,
        c2: f64,
    },
    /// `ψ = c1 + c2·φ`.
    PhiRamp {
        c1: f64,
        c2: f64,
    },
}

impl DensitySpec {
    pub fn validate(&self) -> Result<(), MeasureError> {
        let ok = match *self {
            DensitySpec::Nu => true,
            DensitySpec::Constant { value } => value > 0.0 && value.is_finite(),
            DensitySpec::RCosine { c1, c2 } => c1.is_finite() && c2.is_finite() && c1 > c2.abs(),
            DensitySpec::PhiRamp { c1, c2 } => c1.is_finite() && c2.is_finite() && c1 > c2.abs() * FRAC_PI_2,
        };
        if ok {
            Ok(())
        } else {
            Err(MeasureError::InvalidDensity(format!("{self:?} is not bounded away from zero")))
        }
    }

    /// `dη/dν` at `x`.
    pub fn psi(&self, table: &Table, x: &PhasePoint) -> f64 {
        match *self {
            DensitySpec::Nu => 1.0,
            DensitySpec::Constant { value } => value,
            DensitySpec::RCosine { c1, c2 } => c1 + c2 * (2.0 * PI * x.r / table.perimeter(x.scatterer)).cos(),
            DensitySpec::PhiRamp { c1, c2 } => c1 + c2 * x.phi,
        }
    }

    pub fn psi_min(&self) -> f64 {
        match *self {
            DensitySpec::Nu => 1.0,
            DensitySpec::Constant { value } => value,
            DensitySpec::RCosine { c1, c2 } => c1 - c2.abs(),
            DensitySpec::PhiRamp { c1, c2 } => c1 - c2.abs() * FRAC_PI_2,
        }
    }

    pub fn psi_max(&self) -> f64 {
        match *self {
            DensitySpec::Nu => 1.0,
            DensitySpec::Constant { value } => value,
            DensitySpec::RCosine { c1, c2 } => c1 + c2.abs(),
            DensitySpec::PhiRamp { c1, c2 } => c1 + c2.abs() * FRAC_PI_2,
        }
    }

    /// Lipschitz constant of `ψ` in the Euclidean `(r, φ)` metric on each
    /// scatterer.
    pub fn lipschitz(&self, table: &Table) -> f64 {
        match *self {
            DensitySpec::Nu | DensitySpec::Constant { .. } => 0.0,
            DensitySpec::RCosine { c2, .. } => {
                let pmin = table.perimeters().iter().cloned().fold(f64::INFINITY, f64::min);
                c2.abs() * 2.0 * PI / pmin
            }
            DensitySpec::PhiRamp { c2, .. } => c2.abs(),
        }
    }
}

fn sample_nu_with<R: Rng>(table: &Table, rng: &mut R) -> PhasePoint {
    let mut s = rng.random::<f64>() * table.total_perimeter();
    let last = table.len() - 1;
    let mut id = 0;
    while id < last && s >= table.perimeter(id) {
        s -= table.perimeter(id);
        id += 1;
    }
    let r = s.min(table.perimeter(id) * (1.0 - f64::EPSILON));
    PhasePoint::new(id, r, phi_from_uniform(rng.random::<f64>()))
}

/// One draw from `spec`, using the particle's own stream.
pub fn sample_one<R: Rng>(table: &Table, spec: &DensitySpec, rng: &mut R) -> PhasePoint {
    let env = spec.psi_max();
    loop {
        let x = sample_nu_with(table, rng);
        if matches!(spec, DensitySpec::Nu) || rng.random::<f64>() * env < spec.psi(table, &x) {
            return x;
        }
    }
}

/// `n` independent draws; particle `i` uses stream `i` of `key`.
pub fn sample_initial(table: &Table, spec: &DensitySpec, key: &StreamKey, n: usize) -> Vec<PhasePoint> {
    (0..n).into_par_iter().with_min_len(1024).map(|i| sample_one(table, spec, &mut key.rng(i as u64))).collect()
}

/// Grid on `M`: `r_bins × phi_bins` cells per scatterer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub scatterers: usize,
    pub r_bins: usize,
    pub phi_bins: usize,
}

impl Grid {
    pub fn new(table: &Table, r_bins: usize, phi_bins: usize) -> Result<Self, MeasureError> {
        if r_bins < 2 || phi_bins < 2 {
            return Err(MeasureError::InvalidGrid(format!("{r_bins}×{phi_bins}: need at least 2 bins per axis")));
        }
        Ok(Grid { scatterers: table.len(), r_bins, phi_bins })
    }

    pub fn cells(&self) -> usize {
        self.scatterers * self.r_bins * self.phi_bins
    }

    /// Half-open bins; `φ = π/2` falls in the top bin.
    #[inline]
    pub fn index(&self, table: &Table, x: &PhasePoint) -> usize {
        let rb = ((x.r / table.perimeter(x.scatterer)) * self.r_bins as f64) as usize;
        let pb = (((x.phi + FRAC_PI_2) / PI) * self.phi_bins as f64).max(0.0) as usize;
        (x.scatterer * self.r_bins + rb.min(self.r_bins - 1)) * self.phi_bins + pb.min(self.phi_bins - 1)
    }

    /// Exact ν-mass of every cell.
    pub fn nu_masses(&self, table: &Table) -> Vec<f64> {
        let c = nu_constant(table);
        let mut out = Vec::with_capacity(self.cells());
        for i in 0..self.scatterers {
            let dr = table.perimeter(i) / self.r_bins as f64;
            for _ in 0..self.r_bins {
                for pb in 0..self.phi_bins {
                    let lo = -FRAC_PI_2 + PI * pb as f64 / self.phi_bins as f64;
                    let hi = -FRAC_PI_2 + PI * (pb + 1) as f64 / self.phi_bins as f64;
                    out.push(c * dr * (hi.sin() - lo.sin()));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    pub grid: Grid,
    pub weights: Vec<f64>,
}

impl EmpiricalMeasure {
    pub fn zeros(grid: Grid) -> Self {
        EmpiricalMeasure { grid, weights: vec![0.0; grid.cells()] }
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn normalized(&self) -> Result<Self, MeasureError> {
        let m = self.total_mass();
        if !(m > 0.0) {
            return Err(MeasureError::ZeroMass);
        }
        Ok(EmpiricalMeasure { grid: self.grid, weights: self.weights.iter().map(|w| w / m).collect() })
    }

    pub fn add(&self, other: &Self) -> Result<Self, MeasureError> {
        if self.grid != other.grid {
            return Err(MeasureError::GridMismatch);
        }
        Ok(EmpiricalMeasure {
            grid: self.grid,
            weights: self.weights.iter().zip(&other.weights).map(|(a, b)| a + b).collect(),
        })
    }

    /// `scatterer,r_bin,phi_bin,weight`, every cell, 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("scatterer,r_bin,phi_bin,weight\n");
        let g = self.grid;
        for (k, w) in self.weights.iter().enumerate() {
            let pb = k % g.phi_bins;
            let rb = (k / g.phi_bins) % g.r_bins;
            let id = k / (g.phi_bins * g.r_bins);
            writeln!(s, "{id},{rb},{pb},{w:.16e}").unwrap();
        }
        s
    }

    pub fn from_csv(grid: Grid, text: &str) -> Result<Self, MeasureError> {
        let bad = |m: &str| MeasureError::BadCsv(m.to_string());
        let mut lines = text.lines();
        if lines.next() != Some("scatterer,r_bin,phi_bin,weight") {
            return Err(bad("header"));
        }
        let mut m = EmpiricalMeasure::zeros(grid);
        for line in lines {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad(line));
            }
            let id: usize = f[0].parse().map_err(|_| bad(line))?;
            let rb: usize = f[1].parse().map_err(|_| bad(line))?;
            let pb: usize = f[2].parse().map_err(|_| bad(line))?;
            let w: f64 = f[3].parse().map_err(|_| bad(line))?;
            if id >= grid.scatterers || rb >= grid.r_bins || pb >= grid.phi_bins {
                return Err(MeasureError::GridMismatch);
            }
            m.weights[(id * grid.r_bins + rb) * grid.phi_bins + pb] = w;
        }
        Ok(m)
    }
}

/// Histogram of unit-weight particles.
pub fn bin_measure(table: &Table, particles: &[PhasePoint], grid: Grid) -> EmpiricalMeasure {
    let mut m = EmpiricalMeasure::zeros(grid);
    for x in particles {
        m.weights[grid.index(table, x)] += 1.0;
    }
    m
}

pub fn bin_weighted(table: &Table, particles: &[(PhasePoint, f64)], grid: Grid) -> EmpiricalMeasure {
    let mut m = EmpiricalMeasure::zeros(grid);
    for (x, w) in particles {
        m.weights[grid.index(table, x)] += w;
    }
    m
}

/// Binned L1 distance between the normalized measures, in `[0, 2]`.
pub fn measure_distance(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> Result<f64, MeasureError> {
    if a.grid != b.grid {
        return Err(MeasureError::GridMismatch);
    }
    let (ma, mb) = (a.total_mass(), b.total_mass());
    if !(ma > 0.0 && mb > 0.0) {
        return Err(MeasureError::ZeroMass);
    }
    Ok(a.weights.iter().zip(&b.weights).map(|(x, y)| (x / ma - y / mb).abs()).sum())
}

/// L1 distance from the exact binned ν.
pub fn distance_to_nu(table: &Table, m: &EmpiricalMeasure) -> Result<f64, MeasureError> {
    let mass = m.total_mass();
    if !(mass > 0.0) {
        return Err(MeasureError::ZeroMass);
    }
    Ok(m.grid.nu_masses(table).iter().zip(&m.weights).map(|(p, w)| (w / mass - p).abs()).sum())
}

/// Pearson χ² of counts against cell probabilities; returns `(statistic, dof)`.
pub fn chi_square(m: &EmpiricalMeasure, probs: &[f64]) -> (f64, usize) {
    let n = m.total_mass();
    let stat = m
        .weights
        .iter()
        .zip(probs)
        .filter(|(_, p)| **p > 0.0)
        .map(|(o, p)| {
            let e = n * p;
            (o - e) * (o - e) / e
        })
        .sum();
    (stat, probs.iter().filter(|p| **p > 0.0).count() - 1)
}

/// Distance between the histograms of two independent `n`-point ν-samples:
/// the Monte Carlo floor for comparing two `n`-point histograms.
pub fn noise_floor(table: &Table, grid: Grid, key: &StreamKey, n: usize) -> Result<f64, MeasureError> {
    let a = sample_initial(table, &DensitySpec::Nu, key, 2 * n);
    let (x, y) = a.split_at(n);
    measure_distance(&bin_measure(table, x, grid), &bin_measure(table, y, grid))
}

/// Distance of an `n`-point ν-histogram from exact ν: the floor for
/// [`distance_to_nu`] at sample size `n`.
pub fn noise_floor_to_nu(table: &Table, grid: Grid, key: &StreamKey, n: usize) -> Result<f64, MeasureError> {
    distance_to_nu(table, &bin_measure(table, &sample_initial(table, &DensitySpec::Nu, key, n), grid))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Residual {
    /// `‖f̊_*m/|f̊_*m| − m‖` on the grid.
    pub distance: f64,
    /// `|f̊_*m| / |m|`, with censored particles dropped from both.
    pub mass_ratio: f64,
    pub censored: usize,
}

/// One open step applied to the particle set behind `m`.
pub fn pushforward_residual(
    table: &Table,
    hole: &Hole,
    particles: &[PhasePoint],
    grid: Grid,
    conv: Convention,
) -> Result<Residual, MeasureError> {
    if particles.is_empty() {
        return Err(MeasureError::EmptySurvivorSet);
    }
    let steps: Vec<StepOutcome> =
        particles.par_iter().with_min_len(256).map(|x| advance(table, hole, x, conv)).collect();
    let mut kept = Vec::with_capacity(particles.len());
    let mut images = Vec::with_capacity(particles.len());
    let mut censored = 0;
    for (x, s) in particles.iter().zip(&steps) {
        match s {
            StepOutcome::Alive(y) => {
                kept.push(*x);
                images.push(*y);
            }
            StepOutcome::Escaped(_) => kept.push(*x),
            StepOutcome::Censored => censored += 1,
        }
    }
    if images.is_empty() {
        return Err(MeasureError::EmptySurvivorSet);
    }
    let before = bin_measure(table, &kept, grid);
    let after = bin_measure(table, &images, grid);
    Ok(Residual {
        distance: measure_distance(&after, &before)?,
        mass_ratio: images.len() as f64 / kept.len() as f64,
        censored,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{validate_table, TableSpec};

    fn table() -> Table {
        validate_table(&TableSpec::two_disk()).unwrap()
    }

    #[test]
    fn nu_constant_and_values() {
        let t = table();
        assert!((nu_constant(&t) - 1.0 / (2.0 * 2.0 * PI * 0.6)).abs() < 1e-15);
        assert!((nu_constant(&t) - 0.132_629_119_243_246_1).abs() < 1e-15);
        assert!(nu_density(&t, &PhasePoint::new(0, 0.1, FRAC_PI_2)) < 1e-16);
        assert_eq!(nu_density(&t, &PhasePoint::new(0, 0.1, 0.0)), nu_constant(&t));
    }

    #[test]
    fn inverse_cdf_endpoints() {
        assert_eq!(phi_from_uniform(0.5), 0.0);
        assert_eq!(phi_from_uniform(1.0), FRAC_PI_2);
        assert_eq!(phi_from_uniform(0.0), -FRAC_PI_2);
    }

    #[test]
    fn nu_masses_sum_to_one() {
        let t = table();
        let g = Grid::new(&t, 16, 16).unwrap();
        let s: f64 = g.nu_masses(&t).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn midpoint_rule_converges() {
        let t = table();
        let err = |n: usize| {
            let c = nu_constant(&t);
            let h = PI / n as f64;
            let s: f64 = (0..n).map(|i| (-FRAC_PI_2 + (i as f64 + 0.5) * h).cos() * h).sum();
            (c * s * t.total_perimeter() - 1.0).abs()
        };
        let (e1, e2) = (err(32), err(64));
        assert!(e1 < 1e-3 && (e1 / e2 - 4.0).abs() < 0.05);
    }

    #[test]
    fn binning_edges_and_additivity() {
        let t = table();
        let g = Grid::new(&t, 4, 4).unwrap();
        let top = PhasePoint::new(1, 0.0, FRAC_PI_2);
        assert_eq!(g.index(&t, &top), (4) * 4 + 3);
        assert_eq!(g.index(&t, &PhasePoint::new(0, 0.0, -FRAC_PI_2)), 0);
        let one = bin_measure(&t, &[top], g);
        assert_eq!(one.total_mass(), 1.0);
        assert_eq!(one.weights.iter().filter(|w| **w > 0.0).count(), 1);
        let a = [PhasePoint::new(0, 0.3, 0.1), PhasePoint::new(1, 1.0, -0.4)];
        let b = [PhasePoint::new(0, 2.0, 1.1)];
        let ab: Vec<_> = a.iter().chain(&b).cloned().collect();
        assert_eq!(bin_measure(&t, &a, g).add(&bin_measure(&t, &b, g)).unwrap(), bin_measure(&t, &ab, g));
        assert!(Grid::new(&t, 1, 4).is_err());
    }

    #[test]
    fn distance_axioms() {
        let t = table();
        let g = Grid::new(&t, 4, 4).unwrap();
        let m1 = bin_measure(&t, &[PhasePoint::new(0, 0.3, 0.1)], g);
        let m2 = bin_measure(&t, &[PhasePoint::new(1, 0.3, 0.1)], g);
        assert_eq!(measure_distance(&m1, &m1).unwrap(), 0.0);
        assert_eq!(measure_distance(&m1, &m2).unwrap(), 2.0);
        let other = EmpiricalMeasure::zeros(Grid::new(&t, 8, 4).unwrap());
        assert_eq!(measure_distance(&m1, &other), Err(MeasureError::GridMismatch));
        assert_eq!(m1.add(&other), Err(MeasureError::GridMismatch));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let t = table();
        let g = Grid::new(&t, 3, 2).unwrap();
        let mut m = EmpiricalMeasure::zeros(g);
        for (k, w) in m.weights.iter_mut().enumerate() {
            *w = (k as f64 + 0.1).sqrt() / 7.0 + 1e-300 * k as f64;
        }
        m.weights[2] = 0.1 + 0.2;
        let csv = m.to_csv();
        assert!(csv.lines().nth(1).unwrap().starts_with("0,0,0,"));
        assert_eq!(EmpiricalMeasure::from_csv(g, &csv).unwrap(), m);
    }

    #[test]
    fn density_catalog_bounds() {
        let t = table();
        let specs = [
            DensitySpec::Constant { value: 2.0 },
            DensitySpec::RCosine { c1: 1.0, c2: 0.5 },
            DensitySpec::PhiRamp { c1: 1.0, c2: 0.3 },
        ];
        for s in specs {
            s.validate().unwrap();
            for k in 0..200 {
                let x = PhasePoint::new(k % 2, (k as f64 * 0.37) % t.perimeter(k % 2), -1.5 + 3.0 * k as f64 / 200.0);
                let p = s.psi(&t, &x);
                assert!(p >= s.psi_min() - 1e-12 && p <= s.psi_max() + 1e-12);
            }
        }
        assert!(DensitySpec::PhiRamp { c1: 1.0, c2: 1.0 }.validate().is_err());
        assert!(DensitySpec::RCosine { c1: 0.5, c2: 0.5 }.validate().is_err());
        let j: DensitySpec = serde_json::from_str(r#"{"kind":"r_cosine","c1":1.0,"c2":0.5}"#).unwrap();
        assert_eq!(j, specs[1]);
    }
}
