//! The open map and survival bookkeeping.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::billiard::{collide, PhasePoint};
use crate::geometry::Table;
use crate::holes::{arrived_in_hole, in_hole, Hole};

/// Which set counts as the hole in phase space.
///
/// `Arrival` checks `H_σ` on post-collision states. `Departure` checks
/// `B_σ`: a state escapes if its next flight crosses the hole, so escape is
/// recorded one collision index earlier. For Type I holes the two differ
/// only in that shift.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convention {
    #[default]
    Arrival,
    Departure,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepOutcome {
    Alive(PhasePoint),
    Escaped(PhasePoint),
    Censored,
}

/// One step of `f̊` from a state not in the hole: `y = f(x)`, escaped if
/// `y ∈ H`.
pub fn open_step(table: &Table, hole: &Hole, x: &PhasePoint) -> StepOutcome {
    match collide(table, x) {
        Ok((y, flight)) if arrived_in_hole(hole, &y, &flight) => StepOutcome::Escaped(y),
        Ok((y, _)) => StepOutcome::Alive(y),
        Err(_) => StepOutcome::Censored,
    }
}

/// Whether `x` is alive at time 0 under `conv`, i.e. not in the hole set.
pub fn initially_alive(table: &Table, hole: &Hole, x: &PhasePoint, conv: Convention) -> Option<bool> {
    match conv {
        Convention::Arrival => in_hole(table, hole, x).ok().map(|h| !h),
        Convention::Departure => match open_step(table, hole, x) {
            StepOutcome::Alive(_) => Some(true),
            StepOutcome::Escaped(_) => Some(false),
            StepOutcome::Censored => None,
        },
    }
}

/// Advance a live state by one step of the open dynamics under `conv`.
pub fn advance(table: &Table, hole: &Hole, x: &PhasePoint, conv: Convention) -> StepOutcome {
    match conv {
        Convention::Arrival => open_step(table, hole, x),
        Convention::Departure => {
            // x ∉ B, so f(x) is reached without crossing the hole
            let y = match collide(table, x) {
                Ok((y, _)) => y,
                Err(_) => return StepOutcome::Censored,
            };
            match open_step(table, hole, &y) {
                StepOutcome::Alive(_) => StepOutcome::Alive(y),
                StepOutcome::Escaped(_) => StepOutcome::Escaped(y),
                StepOutcome::Censored => StepOutcome::Censored,
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Fate {
    /// Entered the hole at this step.
    Escaped(usize),
    /// Hit a near-tangent collision at this step.
    Censored(usize),
    /// Survived all steps.
    Alive,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurvivalRecord {
    pub fate: Fate,
    /// `f^{n_max} x` when alive.
    pub final_state: Option<PhasePoint>,
}

impl SurvivalRecord {
    pub fn survival_time(&self) -> Option<usize> {
        match self.fate {
            Fate::Escaped(k) => Some(k),
            _ => None,
        }
    }

    pub fn is_censored(&self) -> bool {
        matches!(self.fate, Fate::Censored(_))
    }
}

/// First `i ≥ 0` with `f^i x` in the hole, up to `n_max`.
pub fn survival_time(table: &Table, hole: &Hole, x: &PhasePoint, n_max: usize, conv: Convention) -> SurvivalRecord {
    let dead = |fate| SurvivalRecord { fate, final_state: None };
    match conv {
        Convention::Arrival => {
            match in_hole(table, hole, x) {
                Ok(true) => return dead(Fate::Escaped(0)),
                Ok(false) => {}
                Err(_) => return dead(Fate::Censored(0)),
            }
            let mut cur = *x;
            for k in 1..=n_max {
                match open_step(table, hole, &cur) {
                    StepOutcome::Alive(y) => cur = y,
                    StepOutcome::Escaped(_) => return dead(Fate::Escaped(k)),
                    StepOutcome::Censored => return dead(Fate::Censored(k)),
                }
            }
            SurvivalRecord { fate: Fate::Alive, final_state: Some(cur) }
        }
        Convention::Departure => {
            let mut cur = *x;
            for k in 0..=n_max {
                match open_step(table, hole, &cur) {
                    StepOutcome::Alive(y) if k < n_max => cur = y,
                    StepOutcome::Alive(_) => {}
                    StepOutcome::Escaped(_) => return dead(Fate::Escaped(k)),
                    StepOutcome::Censored => return dead(Fate::Censored(k)),
                }
            }
            SurvivalRecord { fate: Fate::Alive, final_state: Some(cur) }
        }
    }
}

/// Per-step ensemble counts; index `k` is the state after `k` steps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurvivorCounts {
    pub survivors: Vec<u64>,
    pub escaped: Vec<u64>,
    pub censored: Vec<u64>,
}

impl SurvivorCounts {
    pub fn from_fates(fates: impl IntoIterator<Item = Fate>, n: usize) -> Self {
        let mut esc = vec![0u64; n + 1];
        let mut cen = vec![0u64; n + 1];
        let mut total = 0u64;
        for f in fates {
            total += 1;
            match f {
                Fate::Escaped(k) => esc[k] += 1,
                Fate::Censored(k) => cen[k] += 1,
                Fate::Alive => {}
            }
        }
        let mut c = SurvivorCounts { survivors: vec![0; n + 1], escaped: vec![0; n + 1], censored: vec![0; n + 1] };
        let (mut e, mut z) = (0, 0);
        for k in 0..=n {
            e += esc[k];
            z += cen[k];
            c.escaped[k] = e;
            c.censored[k] = z;
            c.survivors[k] = total - e - z;
        }
        c
    }

    pub fn steps(&self) -> usize {
        self.survivors.len() - 1
    }

    pub fn total(&self) -> u64 {
        self.survivors[0] + self.escaped[0] + self.censored[0]
    }

    /// CSV with header `n,survivors,escaped,censored`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("n,survivors,escaped,censored\n");
        for k in 0..self.survivors.len() {
            writeln!(s, "{},{},{},{}", k, self.survivors[k], self.escaped[k], self.censored[k]).unwrap();
        }
        s
    }

    pub fn from_csv(text: &str) -> Option<Self> {
        let mut lines = text.lines();
        if lines.next()? != "n,survivors,escaped,censored" {
            return None;
        }
        let mut c = SurvivorCounts { survivors: vec![], escaped: vec![], censored: vec![] };
        for (k, line) in lines.enumerate() {
            let f: Vec<u64> = line.split(',').map(|v| v.parse().ok()).collect::<Option<_>>()?;
            if f.len() != 4 || f[0] != k as u64 {
                return None;
            }
            c.survivors.push(f[1]);
            c.escaped.push(f[2]);
            c.censored.push(f[3]);
        }
        (!c.survivors.is_empty()).then_some(c)
    }
}

#[derive(Debug, Clone)]
pub struct EnsembleRun {
    pub counts: SurvivorCounts,
    pub records: Vec<SurvivalRecord>,
}

impl EnsembleRun {
    /// Surviving states at the horizon, in particle order.
    pub fn survivors(&self) -> Vec<PhasePoint> {
        self.records.iter().filter_map(|r| r.final_state).collect()
    }
}

/// Run every particle for `n` open steps. Output is independent of the
/// rayon pool size.
pub fn evolve_ensemble(
    table: &Table,
    hole: &Hole,
    particles: &[PhasePoint],
    n: usize,
    conv: Convention,
) -> EnsembleRun {
    let records: Vec<SurvivalRecord> =
        particles.par_iter().with_min_len(256).map(|x| survival_time(table, hole, x, n, conv)).collect();
    let counts = SurvivorCounts::from_fates(records.iter().map(|r| r.fate), n);
    EnsembleRun { counts, records }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{validate_table, TableSpec};
    use crate::holes::arc_hole;
    use std::f64::consts::PI;

    fn table() -> Table {
        validate_table(&TableSpec::two_disk()).unwrap()
    }

    #[test]
    fn period_two_orbit_escapes_into_landing_arc() {
        let t = table();
        let p = t.perimeter(1);
        let hole = arc_hole(&t, 1, p - 0.05, 0.05).unwrap();
        let x = PhasePoint::new(1, PI * 0.2, 0.0);
        assert!(matches!(open_step(&t, &hole, &x), StepOutcome::Escaped(_)));
        assert_eq!(survival_time(&t, &hole, &x, 10, Convention::Arrival).fate, Fate::Escaped(1));
        // the other phase of the orbit starts in the hole
        let y = PhasePoint::new(1, 0.0, 0.0);
        assert_eq!(survival_time(&t, &hole, &y, 10, Convention::Arrival).fate, Fate::Escaped(0));
        // shifted by one step in the departure convention
        assert_eq!(survival_time(&t, &hole, &x, 10, Convention::Departure).fate, Fate::Escaped(0));
    }

    #[test]
    fn empty_hole_never_escapes() {
        let t = table();
        let x = PhasePoint::new(0, 0.3, 0.4);
        let r = survival_time(&t, &Hole::Empty, &x, 25, Convention::Arrival);
        assert_eq!(r.fate, Fate::Alive);
        let mut cur = x;
        for _ in 0..25 {
            cur = collide(&t, &cur).unwrap().0;
        }
        assert_eq!(r.final_state, Some(cur));
        assert!(matches!(open_step(&t, &Hole::Empty, &x), StepOutcome::Alive(_)));
    }

    #[test]
    fn tangent_state_is_censored() {
        let t = table();
        let x = PhasePoint::new(0, 0.3, PI / 2.0);
        assert_eq!(open_step(&t, &Hole::Empty, &x), StepOutcome::Censored);
        assert!(survival_time(&t, &Hole::Empty, &x, 3, Convention::Arrival).is_censored());
    }

    #[test]
    fn counts_balance_and_csv_round_trip() {
        let fates = [Fate::Escaped(0), Fate::Escaped(2), Fate::Censored(1), Fate::Alive, Fate::Alive];
        let c = SurvivorCounts::from_fates(fates, 3);
        assert_eq!(c.survivors, vec![4, 3, 2, 2]);
        assert_eq!(c.escaped, vec![1, 1, 2, 2]);
        assert_eq!(c.censored, vec![0, 1, 1, 1]);
        for k in 0..=3 {
            assert_eq!(c.survivors[k] + c.escaped[k] + c.censored[k], 5);
        }
        let csv = c.to_csv();
        assert!(csv.starts_with("n,survivors,escaped,censored\n0,4,1,0\n"));
        assert_eq!(SurvivorCounts::from_csv(&csv), Some(c));
    }
}
