//! Finite expanding Markov towers with Markov holes.
//!
//! A tower is given in quotient form by its base columns. Column `j` has
//! base mass `m_j`, return time `R_j` and a set of base columns its top
//! level maps onto (all of them by default). Cells are `(ℓ, j)` with
//! `ℓ < R_j`, each carrying mass `m_j`. The map moves a cell up one level
//! with unit Jacobian and sends the top of column `j` linearly onto its
//! image with Jacobian `J_j = m(image)/m_j`.

mod function;
mod oracle;
mod spectral;

use std::sync::OnceLock;

use petgraph::algo::tarjan_scc;
use petgraph::graph::DiGraph;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use function::{transfer_apply, TowerFunction};
pub use oracle::{markov_matrix_oracle, MarkovMap, MatrixOracle};
pub use spectral::{
    d_functional, geometric_rate, leading_eigenpair, normalized_iterate_errors, survival_mass, tail_mass_check,
    theta_lower_bound, DReport, EigenPair, LowerBound, TailReport,
};

/// Deepest cylinder refinement supported for tower functions.
pub const MAX_DEPTH: usize = 6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TowerError {
    #[error("invalid tower spec: {0}")]
    InvalidSpec(String),
    #[error("hole too big: weighted hole mass {lhs} is not below {rhs}")]
    HoleTooBig { lhs: f64, rhs: f64 },
    #[error("surviving dynamics not mixing: {0}")]
    NotMixing(String),
    #[error("tail bound fails at n = {n}: m(R > n) = {mass} > {bound}")]
    BadTail { n: usize, mass: f64, bound: f64 },
    #[error("column {column}: jacobian {given} does not balance mass (expected {expected})")]
    BadJacobian { column: usize, given: f64, expected: f64 },
    #[error("power iteration did not converge in {0} iterations")]
    NoConvergence(usize),
    #[error("leading eigenvalue {theta} is not above beta = {beta}")]
    EigenvalueBelowBeta { theta: f64, beta: f64 },
    #[error("d(ρ) not stabilized: deviation {0}")]
    NotStabilized(f64),
    #[error("map is not Markov: {0}")]
    NotMarkov(String),
    #[error("surviving graph is reducible")]
    ReducibleSurvivingGraph,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl TowerError {
    pub fn code(&self) -> &'static str {
        match self {
            TowerError::InvalidSpec(_) => "tower.invalid_spec",
            TowerError::HoleTooBig { .. } => "tower.hole_too_big",
            TowerError::NotMixing(_) => "tower.not_mixing",
            TowerError::BadTail { .. } => "tower.bad_tail",
            TowerError::BadJacobian { .. } => "tower.bad_jacobian",
            TowerError::NoConvergence(_) => "tower.no_convergence",
            TowerError::EigenvalueBelowBeta { .. } => "tower.eigenvalue_below_beta",
            TowerError::NotStabilized(_) => "tower.not_stabilized",
            TowerError::NotMarkov(_) => "tower.not_markov",
            TowerError::ReducibleSurvivingGraph => "tower.reducible",
            TowerError::InvalidArgument(_) => "tower.invalid_argument",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    pub mass: f64,
    #[serde(rename = "return", default, skip_serializing_if = "Option::is_none")]
    pub ret: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jacobian: Option<f64>,
    /// Base columns covered by the return branch; all of them if absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSpec {
    pub cells: Vec<CellSpec>,
}

/// Serialized tower. `levels[0].cells` are the base columns; later levels
/// are optional and, when present, list the cells `(ℓ, j)` with `R_j > ℓ`
/// in column order. Hole entries are `[ℓ, j]` with `j` a column index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TowerSpec {
    pub levels: Vec<LevelSpec>,
    #[serde(default)]
    pub hole: Vec<[usize; 2]>,
    pub beta: f64,
    #[serde(rename = "C0")]
    pub c0: f64,
    pub theta0: f64,
    #[serde(rename = "C1", default)]
    pub c1: f64,
    #[serde(rename = "L_trunc", default, skip_serializing_if = "Option::is_none")]
    pub l_trunc: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Column {
    pub mass: f64,
    pub ret: usize,
    pub image: Vec<usize>,
    pub jacobian: f64,
}

/// Cylinder words of one depth, per column, in lexicographic order.
#[derive(Debug)]
pub(crate) struct CylinderIndex {
    pub words: Vec<Vec<Vec<usize>>>,
    /// Mass of each cylinder relative to its cell.
    pub fractions: Vec<Vec<f64>>,
}

impl CylinderIndex {
    pub fn position(&self, column: usize, word: &[usize]) -> usize {
        self.words[column].binary_search_by(|w| w.as_slice().cmp(word)).expect("admissible word")
    }
}

#[derive(Debug)]
pub struct Tower {
    spec: TowerSpec,
    columns: Vec<Column>,
    offsets: Vec<usize>,
    cells: Vec<(usize, usize)>,
    hole: Vec<bool>,
    base_mass: f64,
    cylinders: Vec<OnceLock<CylinderIndex>>,
}

impl Tower {
    pub fn spec(&self) -> &TowerSpec {
        &self.spec
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn beta(&self) -> f64 {
        self.spec.beta
    }

    /// `m̄(Δ̄_0)`.
    pub fn base_mass(&self) -> f64 {
        self.base_mass
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    /// `(ℓ, j)` of every cell, grouped by column.
    pub fn cells(&self) -> &[(usize, usize)] {
        &self.cells
    }

    pub fn cell_index(&self, level: usize, column: usize) -> usize {
        self.offsets[column] + level
    }

    pub fn cell_mass(&self, c: usize) -> f64 {
        self.columns[self.cells[c].1].mass
    }

    pub fn is_hole(&self, c: usize) -> bool {
        self.hole[c]
    }

    pub fn max_level(&self) -> usize {
        self.columns.iter().map(|c| c.ret).max().unwrap_or(1) - 1
    }

    /// Cells reached from `c` in one step, with the fraction of `c` sent
    /// to each.
    pub fn successors(&self, c: usize) -> Vec<(usize, f64)> {
        let (l, j) = self.cells[c];
        let col = &self.columns[j];
        if l + 1 < col.ret {
            vec![(c + 1, 1.0)]
        } else {
            let total: f64 = col.image.iter().map(|&i| self.columns[i].mass).sum();
            col.image.iter().map(|&i| (self.offsets[i], self.columns[i].mass / total)).collect()
        }
    }

    pub(crate) fn cylinders(&self, depth: usize) -> &CylinderIndex {
        self.cylinders[depth].get_or_init(|| {
            let mut words = Vec::new();
            let mut fractions = Vec::new();
            for j in 0..self.columns.len() {
                let mut ws = vec![(Vec::new(), 1.0)];
                for _ in 0..depth {
                    let mut next = Vec::new();
                    for (w, f) in ws {
                        let last = *w.last().unwrap_or(&j);
                        let col = &self.columns[last];
                        let total: f64 = col.image.iter().map(|&i| self.columns[i].mass).sum();
                        let mut img = col.image.clone();
                        img.sort_unstable();
                        for i in img {
                            let mut w2: Vec<usize> = w.clone();
                            w2.push(i);
                            next.push((w2, f * self.columns[i].mass / total));
                        }
                    }
                    ws = next;
                }
                let (w, f): (Vec<_>, Vec<_>) = ws.into_iter().unzip();
                words.push(w);
                fractions.push(f);
            }
            CylinderIndex { words, fractions }
        })
    }

    /// Surviving transition graph: edges between non-hole cells.
    fn surviving_graph(&self) -> DiGraph<(), ()> {
        let mut g = DiGraph::new();
        let nodes: Vec<_> = (0..self.n_cells()).map(|_| g.add_node(())).collect();
        for c in 0..self.n_cells() {
            if self.hole[c] {
                continue;
            }
            for (d, _) in self.successors(c) {
                if !self.hole[d] {
                    g.add_edge(nodes[c], nodes[d], ());
                }
            }
        }
        g
    }

    /// Cells of the unique recurrent class of the surviving dynamics.
    pub fn surviving_core(&self) -> Result<Vec<usize>, TowerError> {
        let g = self.surviving_graph();
        let nontrivial: Vec<Vec<usize>> = tarjan_scc(&g)
            .into_iter()
            .map(|scc| scc.into_iter().map(|n| n.index()).collect::<Vec<_>>())
            .filter(|scc| scc.len() > 1 || g.contains_edge((scc[0] as u32).into(), (scc[0] as u32).into()))
            .collect();
        match nontrivial.len() {
            0 => Err(TowerError::NotMixing("every orbit eventually enters the hole".into())),
            1 => {
                let mut core = nontrivial.into_iter().next().unwrap();
                core.sort_unstable();
                Ok(core)
            }
            k => Err(TowerError::NotMixing(format!("{k} disjoint recurrent classes"))),
        }
    }

    /// Cells from which the surviving core is reachable without entering
    /// the hole.
    pub fn surviving_cells(&self) -> Vec<bool> {
        let mut ok = vec![false; self.n_cells()];
        let Ok(core) = self.surviving_core() else { return ok };
        for c in core {
            ok[c] = true;
        }
        loop {
            let mut changed = false;
            for c in 0..self.n_cells() {
                if !ok[c] && !self.hole[c] && self.successors(c).iter().any(|(d, _)| ok[*d]) {
                    ok[c] = true;
                    changed = true;
                }
            }
            if !changed {
                return ok;
            }
        }
    }

    fn period(&self, core: &[usize]) -> usize {
        let g = self.surviving_graph();
        let inside: Vec<bool> = (0..self.n_cells()).map(|c| core.binary_search(&c).is_ok()).collect();
        let mut depth = vec![usize::MAX; self.n_cells()];
        depth[core[0]] = 0;
        let mut queue = std::collections::VecDeque::from([core[0]]);
        let mut period = 0usize;
        while let Some(u) = queue.pop_front() {
            for v in g.neighbors((u as u32).into()).map(|n| n.index()) {
                if !inside[v] {
                    continue;
                }
                if depth[v] == usize::MAX {
                    depth[v] = depth[u] + 1;
                    queue.push_back(v);
                } else {
                    period = gcd(period, (depth[u] + 1).abs_diff(depth[v]));
                }
            }
        }
        period
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

const REL_TOL: f64 = 1e-12;

/// Validate a spec: masses, Jacobians, tail bound, hole-size condition and
/// mixing of the surviving dynamics.
pub fn build_tower(spec: &TowerSpec) -> Result<Tower, TowerError> {
    let bad = |m: String| Err(TowerError::InvalidSpec(m));
    let Some(base) = spec.levels.first() else { return bad("no levels".into()) };
    if base.cells.is_empty() {
        return bad("no base columns".into());
    }
    if !(spec.beta > 0.0 && spec.beta < 1.0) {
        return bad(format!("beta = {} outside (0, 1)", spec.beta));
    }
    if !(spec.theta0 >= 0.0 && spec.theta0 < spec.beta) {
        return bad(format!("need 0 ≤ theta0 < beta, got theta0 = {}", spec.theta0));
    }
    if !(spec.c0 > 0.0) || !(spec.c1 >= 0.0) {
        return bad("need C0 > 0 and C1 ≥ 0".into());
    }
    let n = base.cells.len();
    let mut columns = Vec::with_capacity(n);
    for (j, c) in base.cells.iter().enumerate() {
        if !(c.mass > 0.0 && c.mass.is_finite()) {
            return bad(format!("column {j} mass {}", c.mass));
        }
        let Some(ret) = c.ret.filter(|&r| r >= 1) else { return bad(format!("column {j} needs return ≥ 1")) };
        let mut image = c.image.clone().unwrap_or_else(|| (0..n).collect());
        image.sort_unstable();
        image.dedup();
        if image.is_empty() || image.iter().any(|&i| i >= n) {
            return bad(format!("column {j} has an invalid image"));
        }
        columns.push(Column { mass: c.mass, ret, image, jacobian: 0.0 });
    }
    for j in 0..n {
        let img: f64 = columns[j].image.iter().map(|&i| columns[i].mass).sum();
        let expected = img / columns[j].mass;
        if let Some(given) = base.cells[j].jacobian {
            if (given - expected).abs() > REL_TOL * expected {
                return Err(TowerError::BadJacobian { column: j, given, expected });
            }
        }
        columns[j].jacobian = expected;
    }
    let max_ret = columns.iter().map(|c| c.ret).max().unwrap();
    let l_trunc = spec.l_trunc.unwrap_or(max_ret - 1);
    if l_trunc + 1 < max_ret {
        return bad(format!("L_trunc = {l_trunc} is below the top level {}", max_ret - 1));
    }
    for (l, level) in spec.levels.iter().enumerate().skip(1) {
        let expected: Vec<f64> = columns.iter().filter(|c| c.ret > l).map(|c| c.mass).collect();
        if level.cells.len() != expected.len()
            || level.cells.iter().zip(&expected).any(|(c, m)| (c.mass - m).abs() > REL_TOL * m)
        {
            return bad(format!("level {l} does not match the column masses"));
        }
    }
    let base_mass: f64 = columns.iter().map(|c| c.mass).sum();
    for k in 0..max_ret {
        let tail: f64 = columns.iter().filter(|c| c.ret > k).map(|c| c.mass).sum();
        let bound = spec.c0 * spec.theta0.powi(k as i32);
        if tail > bound * (1.0 + REL_TOL) {
            return Err(TowerError::BadTail { n: k, mass: tail, bound });
        }
    }

    let mut offsets = Vec::with_capacity(n);
    let mut cells = Vec::new();
    for (j, c) in columns.iter().enumerate() {
        offsets.push(cells.len());
        cells.extend((0..c.ret).map(|l| (l, j)));
    }
    let mut hole = vec![false; cells.len()];
    for &[l, j] in &spec.hole {
        if j >= n || l >= columns[j].ret {
            return bad(format!("hole cell ({l}, {j}) does not exist"));
        }
        hole[offsets[j] + l] = true;
    }
    let tower = Tower {
        spec: spec.clone(),
        columns,
        offsets,
        cells,
        hole,
        base_mass,
        cylinders: (0..=MAX_DEPTH).map(|_| OnceLock::new()).collect(),
    };

    let (lhs, rhs) = hole_size_terms(&tower);
    if !(lhs < rhs) {
        return Err(TowerError::HoleTooBig { lhs, rhs });
    }
    let core = tower.surviving_core()?;
    let p = tower.period(&core);
    if p != 1 {
        return Err(TowerError::NotMixing(format!("surviving dynamics has period {p}")));
    }
    Ok(tower)
}

/// `(Σ_{ℓ≥1} β^{−(ℓ−1)} m̄(H_ℓ), (1−β)·m̄(Δ̄_0)/(1+C1))`.
pub(crate) fn hole_size_terms(t: &Tower) -> (f64, f64) {
    let beta = t.spec.beta;
    let lhs = (0..t.n_cells())
        .filter(|&c| t.hole[c] && t.cells[c].0 >= 1)
        .map(|c| beta.powi(-(t.cells[c].0 as i32 - 1)) * t.cell_mass(c))
        .sum();
    (lhs, (1.0 - beta) * t.base_mass / (1.0 + t.spec.c1))
}

impl TowerSpec {
    /// Full-branch spec from `(mass, return)` columns.
    pub fn from_columns(columns: &[(f64, usize)], hole: Vec<[usize; 2]>, beta: f64, c0: f64, theta0: f64) -> Self {
        TowerSpec {
            levels: vec![LevelSpec {
                cells: columns
                    .iter()
                    .map(|&(mass, r)| CellSpec { mass, ret: Some(r), jacobian: None, image: None })
                    .collect(),
            }],
            hole,
            beta,
            c0,
            theta0,
            c1: 0.0,
            l_trunc: None,
        }
    }

    /// Columns with returns `1..=levels` and `m̄{R > n} = θ0ⁿ`, so that
    /// `m̄(Δ̄_ℓ) = θ0^ℓ`.
    pub fn geometric(levels: usize, theta0: f64, hole: Vec<[usize; 2]>, beta: f64) -> Self {
        let cols: Vec<(f64, usize)> = (1..=levels)
            .map(|r| {
                let m = if r < levels { (1.0 - theta0) * theta0.powi(r as i32 - 1) } else { theta0.powi(r as i32 - 1) };
                (m, r)
            })
            .collect();
        TowerSpec::from_columns(&cols, hole, beta, 1.0, theta0)
    }

    /// A random full-branch tower that satisfies every validity condition:
    /// a few ordinary columns plus small columns carrying holes above the
    /// base.
    pub fn random<R: Rng>(rng: &mut R) -> Self {
        loop {
            let mut cols: Vec<(f64, usize)> = vec![(rng.random_range(0.2..1.0), 1), (rng.random_range(0.2..1.0), 2)];
            for _ in 0..rng.random_range(0..4) {
                cols.push((rng.random_range(0.05..1.0), rng.random_range(1..=6)));
            }
            let n_small = rng.random_range(1..=2);
            for _ in 0..n_small {
                cols.push((rng.random_range(0.002..0.03), rng.random_range(2..=5)));
            }
            let total: f64 = cols.iter().map(|c| c.0).sum();
            for c in &mut cols {
                c.0 /= total;
            }
            let max_r = cols.iter().map(|c| c.1).max().unwrap();
            let theta0 = (1..max_r)
                .map(|k| {
                    let tail: f64 = cols.iter().filter(|c| c.1 > k).map(|c| c.0).sum();
                    tail.powf(1.0 / k as f64)
                })
                .fold(0.0, f64::max)
                .min(0.9)
                * (1.0 + 1e-9);
            if theta0 >= 0.9 {
                continue;
            }
            let beta = rng.random_range(theta0.max(0.5) + 0.01..0.97);
            let first_small = cols.len() - n_small;
            let hole: Vec<[usize; 2]> =
                (first_small..cols.len()).map(|j| [rng.random_range(1..cols[j].1), j]).collect();
            let mut spec = TowerSpec::from_columns(&cols, hole, beta, 1.0, theta0);
            spec.c1 = [0.0, 0.5, 1.0][rng.random_range(0..3)];
            if build_tower(&spec).is_ok() {
                return spec;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn golden() -> Tower {
        Tower::from_markov_map(&MarkovMap::doubling(4), &[0], 0.8).unwrap()
    }

    #[test]
    fn golden_tower_is_valid() {
        let t = golden();
        assert_eq!(t.n_cells(), 4);
        assert!(t.columns().iter().all(|c| (c.jacobian - 2.0).abs() < 1e-15));
        assert_eq!(t.surviving_core().unwrap(), vec![1, 2, 3]);
    }

    #[test]
    fn spec_json_round_trip() {
        let json = r#"{"levels":[{"cells":[{"mass":0.5,"return":1},{"mass":0.25,"return":2,"jacobian":4.0},{"mass":0.25,"return":3}]},
            {"cells":[{"mass":0.25},{"mass":0.25}]}],"hole":[[1,1]],"beta":0.9,"C0":1.0,"theta0":0.5,"C1":0.0,"L_trunc":2}"#;
        let spec: TowerSpec = serde_json::from_str(json).unwrap();
        assert_eq!(spec.hole, vec![[1, 1]]);
        let text = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<TowerSpec>(&text).unwrap(), spec);
        // (0.9)^0·0.25 = 0.25 is not below (1−0.9)·1
        assert!(matches!(build_tower(&spec), Err(TowerError::HoleTooBig { .. })));
        let mut ok = spec.clone();
        ok.hole.clear();
        let t = build_tower(&ok).unwrap();
        assert_eq!(t.n_cells(), 6);
        assert_eq!(t.cell_index(2, 2), 5);
    }

    #[test]
    fn validation_errors() {
        let mut s = TowerSpec::geometric(6, 0.5, vec![], 0.8);
        s.levels[0].cells[2].jacobian = Some(1.0);
        assert!(matches!(build_tower(&s), Err(TowerError::BadJacobian { column: 2, .. })));
        let mut s = TowerSpec::geometric(6, 0.5, vec![], 0.8);
        s.theta0 = 0.4;
        assert!(matches!(build_tower(&s), Err(TowerError::BadTail { .. })));
        let s = TowerSpec::geometric(6, 0.5, vec![[7, 0]], 0.8);
        assert!(matches!(build_tower(&s), Err(TowerError::InvalidSpec(_))));
        // only returns of even length: period two
        let s = TowerSpec::from_columns(&[(0.5, 2), (0.5, 4)], vec![], 0.9, 2.0, 0.8);
        assert!(matches!(build_tower(&s), Err(TowerError::NotMixing(_))));
        // every column is a hole at its top
        let s = TowerSpec::from_columns(&[(0.5, 1), (0.5, 1)], vec![[0, 0], [0, 1]], 0.9, 1.0, 0.0);
        assert!(matches!(build_tower(&s), Err(TowerError::NotMixing(_))));
    }

    #[test]
    fn hole_size_boundary_crossing() {
        // level-1 hole in column 1 (mass 1/4) against the bound 0.2
        let s = TowerSpec::geometric(6, 0.5, vec![[1, 1]], 0.8);
        assert!(matches!(build_tower(&s), Err(TowerError::HoleTooBig { .. })));
        let s = TowerSpec::geometric(6, 0.5, vec![[1, 5]], 0.8);
        let t = build_tower(&s).unwrap();
        let (lhs, rhs) = hole_size_terms(&t);
        assert!((lhs - 0.5f64.powi(5)).abs() < 1e-15 && (rhs - 0.2).abs() < 1e-15);
    }

    #[test]
    fn random_specs_validate() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let s = TowerSpec::random(&mut rng);
            let t = build_tower(&s).unwrap();
            assert!(!s.hole.is_empty());
            assert!(t.surviving_cells().iter().filter(|b| **b).count() > 1);
        }
    }

    #[test]
    fn cylinders_partition_each_cell() {
        let t = build_tower(&TowerSpec::geometric(4, 0.5, vec![], 0.8)).unwrap();
        for k in 0..=3 {
            let cyl = t.cylinders(k);
            for j in 0..4 {
                assert_eq!(cyl.words[j].len(), 4usize.pow(k as u32));
                assert!((cyl.fractions[j].iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(cyl.words[j].windows(2).all(|w| w[0] < w[1]));
            }
        }
    }
}
