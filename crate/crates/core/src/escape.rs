//! Escape-rate estimation, survivor distributions, population control, the
//! small-hole sweep and the singularity diagnostic.

use std::f64::consts::FRAC_PI_2;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::billiard::PhasePoint;
use crate::geometry::Table;
use crate::holes::{hole_family, Anchor, Hole, HoleError};
use crate::measures::{
    bin_measure, distance_to_nu, noise_floor_to_nu, sample_initial, DensitySpec, EmpiricalMeasure, Grid, MeasureError,
};
use crate::open_dynamics::{
    advance, evolve_ensemble, initially_alive, Convention, EnsembleRun, StepOutcome, SurvivorCounts,
};
use crate::rng::StreamKey;

/// Minimum survivors required at the end of a fit window.
pub const MIN_SURVIVORS: u64 = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EscapeError {
    #[error("only {survivors} survivors at step {step}; need at least {needed}")]
    StarvedSample { step: usize, survivors: u64, needed: u64 },
    #[error("all particles escaped by step {0}")]
    AllEscaped(usize),
    #[error("population extinct at step {0}")]
    Extinction(usize),
    #[error("invalid window [{0}, {1}] for {2} steps")]
    BadWindow(usize, usize, usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Hole(#[from] HoleError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
}

impl EscapeError {
    pub fn code(&self) -> &'static str {
        match self {
            EscapeError::StarvedSample { .. } => "escape.starved_sample",
            EscapeError::AllEscaped(_) => "escape.all_escaped",
            EscapeError::Extinction(_) => "escape.extinction",
            EscapeError::BadWindow(..) => "escape.bad_window",
            EscapeError::InvalidArgument(_) => "escape.invalid_argument",
            EscapeError::Hole(e) => e.code(),
            EscapeError::Measure(e) => e.code(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EscapeEstimate {
    pub theta_hat: f64,
    pub log_slope: f64,
    pub stderr: f64,
    pub window: [usize; 2],
    pub counts: SurvivorCounts,
}

/// Sampling setup shared by the Monte Carlo estimators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub density: DensitySpec,
    pub particles: usize,
    pub seed: u64,
    #[serde(default)]
    pub convention: Convention,
}

impl Ensemble {
    pub fn new(density: DensitySpec, particles: usize, seed: u64) -> Self {
        Ensemble { density, particles, seed, convention: Convention::Arrival }
    }

    pub fn sample(&self, table: &Table) -> Vec<PhasePoint> {
        sample_initial(table, &self.density, &StreamKey::new(self.seed, "initial"), self.particles)
    }
}

fn check_window(window: [usize; 2], steps: usize) -> Result<(), EscapeError> {
    let [a, b] = window;
    if a < 1 || a >= b || b > steps {
        return Err(EscapeError::BadWindow(a, b, steps));
    }
    Ok(())
}

/// Fit `log S_n ≈ a + n log θ` over the window by least squares.
///
/// Censored particles are dropped from the risk set at the step they
/// censor, so `S_n` is replaced by its product-limit version. The standard
/// error combines the regression residual scatter with the binomial
/// variance of each step's survival fraction.
pub fn fit_escape_rate(counts: &SurvivorCounts, window: [usize; 2]) -> Result<EscapeEstimate, EscapeError> {
    let steps = counts.steps();
    check_window(window, steps)?;
    let [n0, n1] = window;
    let s = &counts.survivors;
    if s[n1] == 0 {
        let first = s.iter().position(|&v| v == 0).unwrap_or(n1);
        return Err(EscapeError::AllEscaped(first));
    }
    if s[n1] < MIN_SURVIVORS {
        return Err(EscapeError::StarvedSample { step: n1, survivors: s[n1], needed: MIN_SURVIVORS });
    }
    // per-step survival fraction among those at risk
    let mut log_p = vec![0.0; n1 + 1];
    let mut var_p = vec![0.0; n1 + 1];
    for k in 1..=n1 {
        let at_risk = (s[k - 1] - (counts.censored[k] - counts.censored[k - 1])) as f64;
        let p = s[k] as f64 / at_risk;
        log_p[k] = p.ln();
        var_p[k] = (1.0 - p) / (p * at_risk);
    }
    // log of the product-limit survival, relative to step n0
    let mut y = vec![0.0];
    let mut acc = 0.0;
    for lp in &log_p[n0 + 1..=n1] {
        acc += lp;
        y.push(acc);
    }
    let xs: Vec<f64> = (n0..=n1).map(|n| n as f64).collect();
    let w_len = xs.len() as f64;
    let xbar = xs.iter().sum::<f64>() / w_len;
    let ybar = y.iter().sum::<f64>() / w_len;
    let sxx: f64 = xs.iter().map(|x| (x - xbar).powi(2)).sum();
    let slope = xs.iter().zip(&y).map(|(x, yv)| (x - xbar) * (yv - ybar)).sum::<f64>() / sxx;
    let slope = slope.min(0.0);
    let rss: f64 = xs.iter().zip(&y).map(|(x, yv)| (yv - ybar - slope * (x - xbar)).powi(2)).sum();
    let var_reg = if xs.len() > 2 { rss / (w_len - 2.0) / sxx } else { 0.0 };
    // slope = Σ_j log p_j · Σ_{n ≥ j} w_n with w_n = (n − x̄)/Sxx
    let mut var_bin = 0.0;
    let mut tail = 0.0;
    for k in (n0 + 1..=n1).rev() {
        tail += (k as f64 - xbar) / sxx;
        var_bin += var_p[k] * tail * tail;
    }
    Ok(EscapeEstimate {
        theta_hat: slope.exp(),
        log_slope: slope,
        stderr: (var_reg + var_bin).sqrt(),
        window,
        counts: counts.clone(),
    })
}

#[derive(Debug, Clone)]
pub struct DirectRun {
    pub estimate: EscapeEstimate,
    pub run: EnsembleRun,
}

/// Direct counting: sample the ensemble, evolve to `n_max`, fit.
pub fn estimate_escape_rate(
    table: &Table,
    hole: &Hole,
    ens: &Ensemble,
    n_max: usize,
    window: [usize; 2],
) -> Result<DirectRun, EscapeError> {
    check_window(window, n_max)?;
    ens.density.validate()?;
    let particles = ens.sample(table);
    let run = evolve_ensemble(table, hole, &particles, n_max, ens.convention);
    let estimate = fit_escape_rate(&run.counts, window)?;
    Ok(DirectRun { estimate, run })
}

#[derive(Debug, Clone)]
pub struct SurvivorMeasure {
    /// Normalized histogram of survivors at step `n`.
    pub measure: EmpiricalMeasure,
    pub particles: Vec<PhasePoint>,
    pub counts: SurvivorCounts,
}

/// `μ̂_n`: binned survivors of direct evolution to step `n`.
pub fn survivor_distribution(
    table: &Table,
    hole: &Hole,
    ens: &Ensemble,
    n: usize,
    grid: Grid,
    min_survivors: u64,
) -> Result<SurvivorMeasure, EscapeError> {
    ens.density.validate()?;
    let particles = ens.sample(table);
    let run = evolve_ensemble(table, hole, &particles, n, ens.convention);
    let alive = run.counts.survivors[n];
    if alive == 0 || alive < min_survivors {
        return Err(EscapeError::StarvedSample { step: n, survivors: alive, needed: min_survivors.max(1) });
    }
    let survivors = run.survivors();
    Ok(SurvivorMeasure {
        measure: bin_measure(table, &survivors, grid).normalized()?,
        particles: survivors,
        counts: run.counts,
    })
}

#[derive(Debug, Clone)]
pub struct FvRun {
    pub estimate: EscapeEstimate,
    /// Survival fraction of each step `1..=n` (index 0 unused, set to 1).
    pub fractions: Vec<f64>,
    /// Population after the last resampling.
    pub particles: Vec<PhasePoint>,
    pub measure: EmpiricalMeasure,
    /// Normalized population histograms at the requested snapshot steps.
    pub snapshots: Vec<(usize, EmpiricalMeasure)>,
    pub clones: u64,
}

/// Constant-population evolution: after every step each killed particle is
/// replaced by a copy of a survivor chosen uniformly.
///
/// `counts` in the returned estimate are per step: row `k` holds the
/// survivors, escapes and censorings of step `k` alone.
pub fn fleming_viot_evolve(
    table: &Table,
    hole: &Hole,
    ens: &Ensemble,
    n: usize,
    window: [usize; 2],
    grid: Grid,
    snapshot_steps: &[usize],
) -> Result<FvRun, EscapeError> {
    if ens.particles < 1000 {
        return Err(EscapeError::InvalidArgument(format!("population {} below 1000", ens.particles)));
    }
    check_window(window, n)?;
    ens.density.validate()?;
    let conv = ens.convention;
    let select = StreamKey::new(ens.seed, "fv-select");
    let mut pop = ens.sample(table);
    let total = pop.len() as u64;
    let mut counts = SurvivorCounts { survivors: vec![0; n + 1], escaped: vec![0; n + 1], censored: vec![0; n + 1] };
    let mut fractions = vec![1.0; n + 1];
    let mut clones = 0u64;

    let status: Vec<Option<bool>> =
        pop.par_iter().with_min_len(256).map(|x| initially_alive(table, hole, x, conv)).collect();
    let mut alive: Vec<bool> = status.iter().map(|s| *s == Some(true)).collect();
    counts.survivors[0] = alive.iter().filter(|a| **a).count() as u64;
    counts.censored[0] = status.iter().filter(|s| s.is_none()).count() as u64;
    counts.escaped[0] = total - counts.survivors[0] - counts.censored[0];
    clones += resample(table, &mut pop, &alive, &mut select.rng(0)).ok_or(EscapeError::Extinction(0))?;

    let mut snapshots = Vec::new();
    let mut snap = |k: usize, pop: &[PhasePoint]| -> Result<(), EscapeError> {
        if snapshot_steps.contains(&k) {
            snapshots.push((k, bin_measure(table, pop, grid).normalized()?));
        }
        Ok(())
    };
    snap(0, &pop)?;
    for k in 1..=n {
        let out: Vec<StepOutcome> = pop.par_iter().with_min_len(256).map(|x| advance(table, hole, x, conv)).collect();
        let (mut s, mut e, mut c) = (0u64, 0u64, 0u64);
        for (i, o) in out.iter().enumerate() {
            alive[i] = false;
            match o {
                StepOutcome::Alive(y) => {
                    pop[i] = *y;
                    alive[i] = true;
                    s += 1;
                }
                StepOutcome::Escaped(_) => e += 1,
                StepOutcome::Censored => c += 1,
            }
        }
        counts.survivors[k] = s;
        counts.escaped[k] = e;
        counts.censored[k] = c;
        if s == 0 {
            return Err(EscapeError::Extinction(k));
        }
        fractions[k] = s as f64 / (total - c) as f64;
        clones += resample(table, &mut pop, &alive, &mut select.rng(k as u64)).ok_or(EscapeError::Extinction(k))?;
        snap(k, &pop)?;
    }

    let [n0, n1] = window;
    let logs: Vec<f64> = fractions[n0 + 1..=n1].iter().map(|q| q.ln()).collect();
    let w = logs.len() as f64;
    let mean = logs.iter().sum::<f64>() / w;
    let var = if logs.len() > 1 { logs.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (w - 1.0) } else { 0.0 };
    let estimate = EscapeEstimate { theta_hat: mean.exp(), log_slope: mean, stderr: (var / w).sqrt(), window, counts };
    let measure = bin_measure(table, &pop, grid).normalized()?;
    Ok(FvRun { estimate, fractions, particles: pop, measure, snapshots, clones })
}

/// Size of the uniform kick given to each clone in `r` and `φ`.
pub const CLONE_JITTER: f64 = 1e-4;

/// Overwrite dead slots with copies of uniformly chosen live ones, in index
/// order. Each copy is kicked by up to [`CLONE_JITTER`] so that clones of one
/// parent separate under the dynamics instead of moving in lockstep.
/// Returns the number of clones, or `None` if nobody is alive.
fn resample<R: Rng>(table: &Table, pop: &mut [PhasePoint], alive: &[bool], rng: &mut R) -> Option<u64> {
    let live: Vec<usize> = (0..pop.len()).filter(|&i| alive[i]).collect();
    if live.is_empty() {
        return None;
    }
    let mut n = 0;
    for i in 0..pop.len() {
        if !alive[i] {
            let mut x = pop[live[rng.random_range(0..live.len())]];
            x.r = (x.r + CLONE_JITTER * rng.random_range(-1.0..1.0)).rem_euclid(table.perimeter(x.scatterer));
            x.phi = (x.phi + CLONE_JITTER * rng.random_range(-1.0..1.0)).clamp(-FRAC_PI_2, FRAC_PI_2);
            pop[i] = x;
            n += 1;
        }
    }
    Some(n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub h: f64,
    pub theta_hat: f64,
    pub stderr: f64,
    pub distance_to_nu: f64,
    pub noise_floor: f64,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("h,theta_hat,stderr,distance_to_nu,noise_floor\n");
    for r in rows {
        s.push_str(&format!(
            "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}\n",
            r.h, r.theta_hat, r.stderr, r.distance_to_nu, r.noise_floor
        ));
    }
    s
}

/// Escape rate and distance of `μ̂_*` from ν along a shrinking hole family
/// at `anchor`. Each `h` reuses the same seed, so runs are coupled.
/// `μ̂_*` is the Fleming–Viot population at step `n_max`; the noise floor is
/// the distance from ν of a ν-sample of the same size.
pub fn small_hole_sweep(
    table: &Table,
    anchor: Anchor,
    h_list: &[f64],
    ens: &Ensemble,
    n_max: usize,
    window: [usize; 2],
    grid: Grid,
) -> Result<Vec<SweepRow>, EscapeError> {
    if h_list.is_empty() || h_list.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(EscapeError::InvalidArgument("h_list must be nonempty and strictly decreasing".into()));
    }
    let floor = noise_floor_to_nu(table, grid, &StreamKey::new(ens.seed, "noise-floor"), ens.particles)?;
    h_list
        .iter()
        .map(|&h| {
            let hole = hole_family(table, anchor, h, 0.0)?;
            let fv = fleming_viot_evolve(table, &hole, ens, n_max, window, grid, &[])?;
            Ok(SweepRow {
                h,
                theta_hat: fv.estimate.theta_hat,
                stderr: fv.estimate.stderr,
                distance_to_nu: distance_to_nu(table, &fv.measure)?,
                noise_floor: floor,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingularityReport {
    /// `ν(∪_{k ≤ K} f^k H)` estimates for `K = 0..=k_max`, via forward orbits.
    pub nu_mass: Vec<f64>,
    /// Fraction of the step-`k_max` survivors whose orbit met the hole.
    pub survivor_mass: f64,
    pub survivors: u64,
    pub censored: u64,
}

/// Fraction of ν-samples whose forward orbit enters the hole within `K`
/// steps, for every `K ≤ k_max`. By invariance and time reversal this
/// estimates the ν-mass of the union of the first `K` hole images.
pub fn nu_mass_of_hole_images(
    table: &Table,
    hole: &Hole,
    k_max: usize,
    particles: usize,
    seed: u64,
) -> Result<SingularityReport, EscapeError> {
    if k_max < 1 || particles == 0 {
        return Err(EscapeError::InvalidArgument("need K ≥ 1 and at least one particle".into()));
    }
    let ens = Ensemble::new(DensitySpec::Nu, particles, seed);
    let run = evolve_ensemble(table, hole, &ens.sample(table), k_max, Convention::Arrival);
    let c = &run.counts;
    let nu_mass = (0..=k_max).map(|k| c.escaped[k] as f64 / (c.total() - c.censored[k]) as f64).collect();
    // survivors are exactly the orbits that never met the hole
    let hit = run.records.iter().filter(|r| r.final_state.is_some() && r.survival_time().is_some()).count();
    let survivors = c.survivors[k_max];
    Ok(SingularityReport {
        nu_mass,
        survivor_mass: if survivors > 0 { hit as f64 / survivors as f64 } else { 0.0 },
        survivors,
        censored: c.censored[k_max],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Survivor counts of i.i.d. Bernoulli(1 − p) thinning.
    fn thinning(n0: u64, p: f64, steps: usize, seed: u64) -> SurvivorCounts {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = vec![n0];
        for _ in 0..steps {
            let cur = *s.last().unwrap();
            s.push((0..cur).filter(|_| rng.random::<f64>() >= p).count() as u64);
        }
        let escaped = s.iter().map(|v| n0 - v).collect();
        SurvivorCounts { survivors: s, escaped, censored: vec![0; steps + 1] }
    }

    #[test]
    fn bernoulli_thinning_recovers_one_minus_p() {
        let p = 0.05;
        let mut z = Vec::new();
        for seed in 0..20 {
            let e = fit_escape_rate(&thinning(200_000, p, 40, seed), [10, 40]).unwrap();
            z.push((e.theta_hat - (1.0 - p)) / (e.stderr * e.theta_hat));
        }
        assert!(z.iter().all(|v| v.abs() < 4.0), "{z:?}");
        let rms = (z.iter().map(|v| v * v).sum::<f64>() / z.len() as f64).sqrt();
        assert!(rms > 0.4 && rms < 2.0, "stderr badly calibrated: rms z = {rms}");
    }

    #[test]
    fn no_escape_gives_unit_theta() {
        let c = SurvivorCounts::from_fates(vec![crate::open_dynamics::Fate::Alive; 500], 20);
        let e = fit_escape_rate(&c, [5, 20]).unwrap();
        assert_eq!(e.theta_hat, 1.0);
        assert_eq!(e.log_slope, 0.0);
        assert_eq!(e.stderr, 0.0);
    }

    #[test]
    fn censoring_is_removed_from_risk_set() {
        // half of the population censors at step 1, then exact halving
        let c = SurvivorCounts {
            survivors: vec![1000, 400, 200, 100],
            escaped: vec![0, 100, 300, 400],
            censored: vec![0, 500, 500, 500],
        };
        let e = fit_escape_rate(&c, [1, 3]).unwrap();
        assert!((e.theta_hat - 0.5).abs() < 1e-12);
    }

    #[test]
    fn fit_errors() {
        let c = thinning(1000, 0.5, 20, 1);
        assert!(matches!(fit_escape_rate(&c, [10, 20]), Err(EscapeError::AllEscaped(_))));
        let c = thinning(1000, 0.2, 20, 1);
        assert!(matches!(fit_escape_rate(&c, [10, 20]), Err(EscapeError::StarvedSample { .. })));
        assert!(matches!(fit_escape_rate(&c, [0, 20]), Err(EscapeError::BadWindow(..))));
        assert!(matches!(fit_escape_rate(&c, [5, 21]), Err(EscapeError::BadWindow(..))));
    }

    #[test]
    fn resample_fills_dead_slots_from_live_ones() {
        let t = crate::geometry::validate_table(&crate::geometry::TableSpec::two_disk()).unwrap();
        let mut pop: Vec<PhasePoint> = (0..6).map(|i| PhasePoint::new(0, 0.1 + i as f64, 0.0)).collect();
        let alive = [false, true, false, true, false, false];
        let n = resample(&t, &mut pop, &alive, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(n, 4);
        assert_eq!((pop[1].r, pop[3].r), (1.1, 3.1));
        assert!(pop.iter().all(|x| (x.r - 1.1).abs() <= CLONE_JITTER || (x.r - 3.1).abs() <= CLONE_JITTER));
        assert!(pop.iter().all(|x| x.phi.abs() <= CLONE_JITTER));
        assert!(resample(&t, &mut pop, &[false; 6], &mut ChaCha8Rng::seed_from_u64(3)).is_none());
    }

    #[test]
    fn sweep_csv_header() {
        let s = sweep_csv(&[SweepRow { h: 0.5, theta_hat: 0.9, stderr: 0.01, distance_to_nu: 0.1, noise_floor: 0.05 }]);
        assert!(s.starts_with("h,theta_hat,stderr,distance_to_nu,noise_floor\n5.0000000000000000e-1,"));
    }
}
