//! Piecewise-linear Markov interval maps and the substochastic matrix
//! oracle for their surviving transfer operator.

use nalgebra::{DMatrix, DVector};
use petgraph::algo::tarjan_scc;
use petgraph::graph::DiGraph;
use serde::{Deserialize, Serialize};

use super::{build_tower, CellSpec, LevelSpec, Tower, TowerError, TowerSpec};

const EDGE_TOL: f64 = 1e-12;

/// `x ↦ slope_i·x + intercept_i` on `[breaks_i, breaks_{i+1})`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovMap {
    pub breaks: Vec<f64>,
    pub slopes: Vec<f64>,
    pub intercepts: Vec<f64>,
}

impl MarkovMap {
    /// `x ↦ 2x mod 1` on `cells` equal cells (`cells` even).
    pub fn doubling(cells: usize) -> Self {
        Self::linear_mod_one(2, cells)
    }

    /// `x ↦ k·x mod 1` on `cells` equal cells, `cells` a multiple of `k`.
    pub fn linear_mod_one(k: usize, cells: usize) -> Self {
        let breaks: Vec<f64> = (0..=cells).map(|i| i as f64 / cells as f64).collect();
        let intercepts = (0..cells).map(|i| -((k * i / cells) as f64)).collect();
        MarkovMap { breaks, slopes: vec![k as f64; cells], intercepts }
    }

    pub fn cells(&self) -> usize {
        self.slopes.len()
    }

    /// Cells covered by the image of each cell.
    pub fn images(&self) -> Result<Vec<Vec<usize>>, TowerError> {
        let n = self.cells();
        if self.breaks.len() != n + 1 || self.intercepts.len() != n || n == 0 {
            return Err(TowerError::NotMarkov("breaks, slopes and intercepts disagree in length".into()));
        }
        if self.breaks.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(TowerError::NotMarkov("breaks must increase".into()));
        }
        let snap = |x: f64| self.breaks.iter().position(|b| (b - x).abs() < EDGE_TOL);
        (0..n)
            .map(|i| {
                let a = self.slopes[i] * self.breaks[i] + self.intercepts[i];
                let b = self.slopes[i] * self.breaks[i + 1] + self.intercepts[i];
                let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                match (snap(lo), snap(hi)) {
                    (Some(p), Some(q)) if p < q && self.slopes[i].abs() > 1.0 => Ok((p..q).collect()),
                    _ => Err(TowerError::NotMarkov(format!("image [{lo}, {hi}] of cell {i}"))),
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixOracle {
    pub theta: f64,
    /// Density eigenvector normalized to `Σ h_i |cell_i| = 1`.
    pub h: Vec<f64>,
    /// Right eigenvector of `A` (survival weights), normalized so that
    /// `⟨ℓ, h⟩ = 1`; then `d(ρ) = ⟨ℓ, ρ⟩`.
    pub left: Vec<f64>,
    /// All eigenvalues of zero matrix: nothing survives.
    pub degenerate: bool,
    pub matrix: Vec<Vec<f64>>,
}

impl MatrixOracle {
    pub fn d(&self, rho: &[f64]) -> f64 {
        self.left.iter().zip(rho).map(|(a, b)| a * b).sum()
    }
}

/// `A_ij = 1/|slope_i|` when neither cell is in the hole and cell `i` maps
/// over cell `j`; leading eigen-data by dense decomposition.
pub fn markov_matrix_oracle(map: &MarkovMap, hole: &[usize]) -> Result<MatrixOracle, TowerError> {
    let images = map.images()?;
    let n = map.cells();
    if hole.iter().any(|&h| h >= n) {
        return Err(TowerError::InvalidArgument("hole cell out of range".into()));
    }
    let in_hole = |i: usize| hole.contains(&i);
    let mut a = DMatrix::<f64>::zeros(n, n);
    for i in (0..n).filter(|&i| !in_hole(i)) {
        for &j in images[i].iter().filter(|&&j| !in_hole(j)) {
            a[(i, j)] = 1.0 / map.slopes[i].abs();
        }
    }
    let matrix = (0..n).map(|i| (0..n).map(|j| a[(i, j)]).collect()).collect();
    if a.iter().all(|v| *v == 0.0) {
        return Ok(MatrixOracle { theta: 0.0, h: vec![0.0; n], left: vec![0.0; n], degenerate: true, matrix });
    }

    let mut g = DiGraph::<(), ()>::new();
    let nodes: Vec<_> = (0..n).map(|_| g.add_node(())).collect();
    for i in 0..n {
        for j in 0..n {
            if a[(i, j)] != 0.0 {
                g.add_edge(nodes[i], nodes[j], ());
            }
        }
    }
    let recurrent = tarjan_scc(&g).into_iter().filter(|s| s.len() > 1 || g.contains_edge(s[0], s[0])).count();
    if recurrent != 1 {
        return Err(TowerError::ReducibleSurvivingGraph);
    }

    let theta =
        a.complex_eigenvalues().iter().filter(|z| z.im.abs() < 1e-9).map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
    let null = |m: DMatrix<f64>| -> DVector<f64> {
        let svd = m.svd(false, true);
        let v_t = svd.v_t.expect("requested");
        let k = svd.singular_values.imin();
        let v = v_t.row(k).transpose();
        if v.sum() < 0.0 {
            -v
        } else {
            v
        }
    };
    let eye = DMatrix::<f64>::identity(n, n);
    let lengths: Vec<f64> = map.breaks.windows(2).map(|w| w[1] - w[0]).collect();
    // densities evolve by ρ ↦ Aᵀρ; survival weights by A
    let h = null(a.transpose() - &eye * theta);
    let mass: f64 = h.iter().zip(&lengths).map(|(x, l)| x * l).sum();
    let h: Vec<f64> = h.iter().map(|x| x / mass).collect();
    let r = null(a.clone() - &eye * theta);
    let rh: f64 = r.iter().zip(&h).map(|(x, y)| x * y).sum();
    let left = r.iter().map(|x| x / rh).collect();
    Ok(MatrixOracle { theta, h, left, degenerate: false, matrix })
}

impl Tower {
    /// The flat tower (`R ≡ 1`) of a Markov interval map: one column per
    /// cell, Markov hole given by cell indices.
    pub fn from_markov_map(map: &MarkovMap, hole: &[usize], beta: f64) -> Result<Tower, TowerError> {
        let images = map.images()?;
        let cells = (0..map.cells())
            .map(|i| CellSpec {
                mass: map.breaks[i + 1] - map.breaks[i],
                ret: Some(1),
                jacobian: Some(map.slopes[i].abs()),
                image: Some(images[i].clone()),
            })
            .collect();
        let total = map.breaks[map.cells()] - map.breaks[0];
        build_tower(&TowerSpec {
            levels: vec![LevelSpec { cells }],
            hole: hole.iter().map(|&j| [0, j]).collect(),
            beta,
            c0: total,
            theta0: 0.0,
            c1: 0.0,
            l_trunc: None,
        })
    }
}
