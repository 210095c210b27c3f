//! Leading eigenpair, the eigenvalue lower bound, the survival functional
//! `d(ρ)` and the tail-mass check.

use serde::{Deserialize, Serialize};

use super::function::{transfer_apply, TowerFunction};
use super::{hole_size_terms, Tower, TowerError};

#[derive(Debug, Clone)]
pub struct EigenPair {
    pub theta: f64,
    /// Depth-0 eigenfunction with `∫h dm̄ = 1`.
    pub h: TowerFunction,
    pub iterations: usize,
    /// Mass-ratio estimate of `θ*` after each iteration.
    pub trace: Vec<f64>,
    /// `‖L̄h − θh‖` on termination.
    pub residual: f64,
}

const CALM_RUN: usize = 8;

/// Power iteration `ρ ← L̄ρ / ∫L̄ρ` from the indicator of the non-hole
/// cells, stopping once successive mass ratios have differed by less than
/// `tol` (or a few ulps, if larger) for several iterations in a row.
pub fn leading_eigenpair(tower: &Tower, tol: f64, max_iter: usize) -> Result<EigenPair, TowerError> {
    let start: Vec<f64> = (0..tower.n_cells()).map(|c| if tower.is_hole(c) { 0.0 } else { 1.0 }).collect();
    let mut rho = TowerFunction::from_cell_values(tower, &start)?;
    rho = rho.scale(1.0 / rho.integral(tower));
    let mut trace = Vec::new();
    // successive ratios can agree by accident early on, so require a run
    let mut calm = 0;
    for it in 1..=max_iter {
        let next = transfer_apply(tower, &rho)?;
        let mass = next.integral(tower);
        if !(mass > 0.0) {
            return Err(TowerError::NotMixing("all mass escapes".into()));
        }
        trace.push(mass);
        rho = next.scale(1.0 / mass);
        // ratios jitter by a few ulps once converged
        let floor = tol.max(8.0 * f64::EPSILON * mass);
        calm = if it > 1 && (trace[it - 1] - trace[it - 2]).abs() < floor { calm + 1 } else { 0 };
        if calm >= CALM_RUN {
            let lh = transfer_apply(tower, &rho)?;
            let residual = lh.combine(tower, 1.0, &rho, -mass)?.norm(tower);
            if mass <= tower.beta() {
                return Err(TowerError::EigenvalueBelowBeta { theta: mass, beta: tower.beta() });
            }
            return Ok(EigenPair { theta: mass, h: rho, iterations: it, trace, residual });
        }
    }
    Err(TowerError::NoConvergence(max_iter))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LowerBound {
    /// `1 − (1+C1)/m̄(Δ̄_0) · Σ_{ℓ≥1} β^{−(ℓ−1)} m̄(H_ℓ)`.
    pub bound: f64,
    pub weighted_hole_mass: f64,
    /// False when part of the hole sits in the base, which the bound does
    /// not account for.
    pub applicable: bool,
}

pub fn theta_lower_bound(tower: &Tower) -> LowerBound {
    let (lhs, _) = hole_size_terms(tower);
    let base_hole = (0..tower.n_cells()).any(|c| tower.is_hole(c) && tower.cells()[c].0 == 0);
    LowerBound {
        bound: 1.0 - (1.0 + tower.spec().c1) / tower.base_mass() * lhs,
        weighted_hole_mass: lhs,
        applicable: !base_hole,
    }
}

/// `∫_{Δ̄ⁿ} ρ dm̄` for `n = 0..=n_max`, where `Δ̄ⁿ` is the set of points
/// avoiding the hole at times `0..=n`. Computed forward along itineraries,
/// independently of the transfer operator.
pub fn survival_mass(tower: &Tower, rho: &TowerFunction, n_max: usize) -> Vec<f64> {
    let nc = tower.n_cells();
    let succ: Vec<Vec<(usize, f64)>> = (0..nc).map(|c| tower.successors(c)).collect();
    // u[t][c]: fraction of cell c surviving t more steps
    let mut u = vec![(0..nc).map(|c| if tower.is_hole(c) { 0.0 } else { 1.0 }).collect::<Vec<f64>>()];
    for t in 1..=n_max {
        let prev = &u[t - 1];
        let row = (0..nc)
            .map(|c| if tower.is_hole(c) { 0.0 } else { succ[c].iter().map(|(d, f)| f * prev[*d]).sum() })
            .collect();
        u.push(row);
    }
    let k = rho.depth();
    let cyl = tower.cylinders(k);
    (0..=n_max)
        .map(|n| {
            let mut total = 0.0;
            for (c, &(l, j)) in tower.cells().iter().enumerate() {
                let m = tower.columns()[j].mass;
                for (wi, w) in cyl.words[j].iter().enumerate() {
                    let v = rho.cell_values(c)[wi];
                    if v != 0.0 {
                        total += v * m * cyl.fractions[j][wi] * cylinder_survival(tower, &u, c, l, j, w, n);
                    }
                }
            }
            total
        })
        .collect()
}

/// Fraction of cylinder `w` of cell `c = (l, j)` that survives `n` steps.
fn cylinder_survival(
    tower: &Tower,
    u: &[Vec<f64>],
    mut c: usize,
    mut l: usize,
    mut j: usize,
    w: &[usize],
    n: usize,
) -> f64 {
    let mut t = 0;
    let mut next = 0;
    while next < w.len() {
        if tower.is_hole(c) {
            return 0.0;
        }
        if t == n {
            return 1.0;
        }
        if l + 1 < tower.columns()[j].ret {
            c += 1;
            l += 1;
        } else {
            j = w[next];
            next += 1;
            l = 0;
            c = tower.cell_index(0, j);
        }
        t += 1;
    }
    u[n - t][c]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DReport {
    /// `θ^{-n} ∫_{Δ̄ⁿ} ρ dm̄` for `n = 0..=n_terms`.
    pub terms: Vec<f64>,
    pub value: f64,
    /// Largest deviation from `value` over the last quarter of the terms.
    pub max_deviation: f64,
    /// Whether `ρ > 0` on some cell from which the surviving core is
    /// reachable, so that `d(ρ) > 0` is predicted.
    pub positive_expected: bool,
}

/// `d(ρ) = lim θ^{-n} ∫_{Δ̄ⁿ} ρ dm̄`, normalized by the leading eigenvalue.
pub fn d_functional(
    tower: &Tower,
    rho: &TowerFunction,
    theta: f64,
    n_terms: usize,
    stab_tol: f64,
) -> Result<DReport, TowerError> {
    if !(theta > 0.0) || n_terms < 4 {
        return Err(TowerError::InvalidArgument("need theta > 0 and at least 4 terms".into()));
    }
    let masses = survival_mass(tower, rho, n_terms);
    let terms: Vec<f64> = masses.iter().enumerate().map(|(n, m)| m / theta.powi(n as i32)).collect();
    let value = *terms.last().unwrap();
    let q = terms.len() - terms.len() / 4;
    let max_deviation = terms[q..].iter().map(|t| (t - value).abs()).fold(0.0, f64::max);
    if max_deviation > stab_tol * value.abs().max(1.0) {
        return Err(TowerError::NotStabilized(max_deviation));
    }
    let surviving = tower.surviving_cells();
    let positive_expected = (0..tower.n_cells()).any(|c| surviving[c] && rho.cell_values(c).iter().all(|v| *v > 0.0));
    Ok(DReport { terms, value, max_deviation, positive_expected })
}

/// `‖θ^{-n} L̄ⁿρ − d(ρ) h‖` for `n = 0..=n_max`.
pub fn normalized_iterate_errors(
    tower: &Tower,
    eig: &EigenPair,
    rho: &TowerFunction,
    d: f64,
    n_max: usize,
) -> Result<Vec<f64>, TowerError> {
    let mut cur = rho.clone();
    let mut out = Vec::with_capacity(n_max + 1);
    for n in 0..=n_max {
        if n > 0 {
            cur = transfer_apply(tower, &cur)?.scale(1.0 / eig.theta);
        }
        out.push(cur.combine(tower, 1.0, &eig.h, -d)?.norm(tower));
    }
    Ok(out)
}

/// Least-squares rate `τ` of `a_n ≈ C τⁿ`, using the terms above `floor`.
pub fn geometric_rate(seq: &[f64], floor: f64) -> Option<f64> {
    let pts: Vec<(f64, f64)> =
        seq.iter().enumerate().filter(|(_, v)| **v > floor).map(|(n, v)| (n as f64, v.ln())).collect();
    if pts.len() < 3 {
        return None;
    }
    let k = pts.len() as f64;
    let xb = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let yb = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|p| (p.0 - xb) * (p.1 - yb)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - xb).powi(2)).sum();
    Some((sxy / sxx).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailReport {
    /// `(h m̄)(Δ̄_ℓ)` for each level.
    pub level_mass: Vec<f64>,
    /// `Σ_{ℓ > L} (h m̄)(Δ̄_ℓ)` for `L = 0..=top`.
    pub tail: Vec<f64>,
    /// Fitted geometric decay rate of the tail (0 if it vanishes).
    pub envelope_ratio: f64,
    /// `θ0 / β`.
    pub predicted: f64,
    pub ok: bool,
}

/// Tail masses of the measure `h* m̄` over the levels.
pub fn tail_mass_check(tower: &Tower, h: &TowerFunction, slack: f64) -> TailReport {
    let top = tower.max_level();
    let mut level_mass = vec![0.0; top + 1];
    let cyl = tower.cylinders(h.depth());
    for (c, &(l, j)) in tower.cells().iter().enumerate() {
        let m = tower.columns()[j].mass;
        level_mass[l] += m * h.cell_values(c).iter().zip(&cyl.fractions[j]).map(|(v, f)| v * f).sum::<f64>();
    }
    let tail: Vec<f64> = (0..=top).map(|l| level_mass[l + 1..].iter().sum()).collect();
    let envelope_ratio = geometric_rate(&tail, 1e-300).unwrap_or_else(|| {
        // fewer than three nonzero tails: use the largest successive ratio
        tail.windows(2).filter(|w| w[0] > 0.0).map(|w| w[1] / w[0]).fold(0.0, f64::max)
    });
    let predicted = tower.spec().theta0 / tower.beta();
    TailReport { level_mass, tail, envelope_ratio, predicted, ok: envelope_ratio <= predicted + slack }
}
