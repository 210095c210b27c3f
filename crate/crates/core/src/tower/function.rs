//! Piecewise-constant functions on depth-`k` cylinders and the transfer
//! operator of the surviving tower map.

use super::{Tower, TowerError, MAX_DEPTH};

/// A function constant on the depth-`k` cylinders of every cell. Cylinders
/// of a cell `(ℓ, j)` are labelled by the base columns visited on the next
/// `k` returns.
#[derive(Debug, Clone, PartialEq)]
pub struct TowerFunction {
    depth: usize,
    /// `values[c][w]`: value on cylinder `w` of cell `c`.
    values: Vec<Vec<f64>>,
}

impl TowerFunction {
    pub fn from_fn(
        tower: &Tower,
        depth: usize,
        mut f: impl FnMut(usize, (usize, usize), &[usize]) -> f64,
    ) -> Result<Self, TowerError> {
        if depth > MAX_DEPTH {
            return Err(TowerError::InvalidArgument(format!("depth {depth} exceeds {MAX_DEPTH}")));
        }
        let cyl = tower.cylinders(depth);
        let values = tower
            .cells()
            .iter()
            .enumerate()
            .map(|(c, &(l, j))| cyl.words[j].iter().map(|w| f(c, (l, j), w)).collect())
            .collect();
        Ok(TowerFunction { depth, values })
    }

    pub fn zeros(tower: &Tower, depth: usize) -> Result<Self, TowerError> {
        Self::from_fn(tower, depth, |_, _, _| 0.0)
    }

    /// Depth-0 function with the given value on each cell.
    pub fn from_cell_values(tower: &Tower, v: &[f64]) -> Result<Self, TowerError> {
        if v.len() != tower.n_cells() {
            return Err(TowerError::InvalidArgument(format!("{} values for {} cells", v.len(), tower.n_cells())));
        }
        Ok(TowerFunction { depth: 0, values: v.iter().map(|x| vec![*x]).collect() })
    }

    pub fn constant(tower: &Tower, value: f64) -> Self {
        TowerFunction { depth: 0, values: vec![vec![value]; tower.n_cells()] }
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn cell_values(&self, c: usize) -> &[f64] {
        &self.values[c]
    }

    /// Value on cell `c` of a depth-0 function.
    pub fn cell_value(&self, c: usize) -> f64 {
        self.values[c][0]
    }

    fn check(&self, tower: &Tower) -> Result<(), TowerError> {
        let cyl = tower.cylinders(self.depth);
        let ok = self.values.len() == tower.n_cells()
            && tower.cells().iter().zip(&self.values).all(|(&(_, j), v)| v.len() == cyl.words[j].len());
        if ok {
            Ok(())
        } else {
            Err(TowerError::InvalidArgument("function does not match the tower".into()))
        }
    }

    /// The same function on finer cylinders.
    pub fn refine(&self, tower: &Tower, depth: usize) -> Result<Self, TowerError> {
        if depth < self.depth {
            return Err(TowerError::InvalidArgument(format!("cannot refine depth {} to {depth}", self.depth)));
        }
        self.check(tower)?;
        let coarse = tower.cylinders(self.depth);
        let k = self.depth;
        Self::from_fn(tower, depth, |c, (_, j), w| self.values[c][coarse.position(j, &w[..k])])
    }

    /// `∫ρ dm̄`.
    pub fn integral(&self, tower: &Tower) -> f64 {
        let cyl = tower.cylinders(self.depth);
        tower
            .cells()
            .iter()
            .zip(&self.values)
            .map(|(&(_, j), v)| {
                tower.columns()[j].mass * v.iter().zip(&cyl.fractions[j]).map(|(a, f)| a * f).sum::<f64>()
            })
            .sum()
    }

    /// `sup_{ℓ,j} sup|ρ| β^ℓ`.
    pub fn sup_norm(&self, tower: &Tower) -> f64 {
        let beta = tower.beta();
        tower
            .cells()
            .iter()
            .zip(&self.values)
            .map(|(&(l, _), v)| v.iter().fold(0.0f64, |m, x| m.max(x.abs())) * beta.powi(l as i32))
            .fold(0.0, f64::max)
    }

    /// `sup_{ℓ,j} Lip(ρ|Δ̄_{ℓ,j}) β^ℓ` for the metric `β^{s(x,y)}`, where
    /// `s` counts the returns before `x` and `y` visit different columns.
    pub fn lip_norm(&self, tower: &Tower) -> f64 {
        let beta = tower.beta();
        let cyl = tower.cylinders(self.depth);
        let mut best = 0.0f64;
        for (&(l, j), v) in tower.cells().iter().zip(&self.values) {
            let words = &cyl.words[j];
            for d in 0..self.depth {
                let mut start = 0;
                while start < words.len() {
                    let mut end = start + 1;
                    while end < words.len() && words[end][..d] == words[start][..d] {
                        end += 1;
                    }
                    let (lo, hi) = v[start..end]
                        .iter()
                        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(*x), b.max(*x)));
                    best = best.max((hi - lo) * beta.powi(l as i32 - d as i32));
                    start = end;
                }
            }
        }
        best
    }

    pub fn norm(&self, tower: &Tower) -> f64 {
        self.sup_norm(tower) + self.lip_norm(tower)
    }

    /// `a·self + b·other`, at the finer of the two depths.
    pub fn combine(&self, tower: &Tower, a: f64, other: &Self, b: f64) -> Result<Self, TowerError> {
        let depth = self.depth.max(other.depth);
        let x = self.refine(tower, depth)?;
        let y = other.refine(tower, depth)?;
        Ok(TowerFunction {
            depth,
            values: x
                .values
                .iter()
                .zip(&y.values)
                .map(|(u, v)| u.iter().zip(v).map(|(p, q)| a * p + b * q).collect())
                .collect(),
        })
    }

    pub fn scale(&self, a: f64) -> Self {
        TowerFunction {
            depth: self.depth,
            values: self.values.iter().map(|v| v.iter().map(|x| a * x).collect()).collect(),
        }
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().flatten().cloned().fold(f64::INFINITY, f64::min)
    }
}

/// `L̄ρ(x) = Σ ρ(y)/JF̄(y)` over non-hole preimages `y`, restricted to the
/// complement of the hole. The result keeps the depth of `ρ`: values on
/// base cells only depend on one fewer return and are replicated.
pub fn transfer_apply(tower: &Tower, rho: &TowerFunction) -> Result<TowerFunction, TowerError> {
    rho.check(tower)?;
    let k = rho.depth;
    let cyl = tower.cylinders(k);
    let mut out = TowerFunction::zeros(tower, k)?;
    for (c, &(l, j)) in tower.cells().iter().enumerate() {
        if tower.is_hole(c) {
            continue;
        }
        let col = &tower.columns()[j];
        if l + 1 < col.ret {
            if !tower.is_hole(c + 1) {
                out.values[c + 1].clone_from(&rho.values[c]);
            }
            continue;
        }
        for &jp in &col.image {
            let dst = tower.cell_index(0, jp);
            if tower.is_hole(dst) {
                continue;
            }
            let mut src = Vec::with_capacity(k);
            for (wi, w) in cyl.words[jp].iter().enumerate() {
                src.clear();
                if k > 0 {
                    src.push(jp);
                    src.extend_from_slice(&w[..k - 1]);
                }
                out.values[dst][wi] += rho.values[c][cyl.position(j, &src)] / col.jacobian;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::{build_tower, tests::golden, TowerSpec};
    use super::*;

    #[test]
    fn refinement_preserves_integral() {
        let t = build_tower(&TowerSpec::geometric(4, 0.5, vec![[1, 3]], 0.8)).unwrap();
        let f = TowerFunction::from_fn(&t, 1, |c, _, w| c as f64 + 0.3 * w[0] as f64).unwrap();
        let g = f.refine(&t, 3).unwrap();
        assert!((f.integral(&t) - g.integral(&t)).abs() < 1e-13);
        assert_eq!(g.depth(), 3);
        assert!(g.refine(&t, 1).is_err());
    }

    #[test]
    fn norms_of_simple_functions() {
        let t = build_tower(&TowerSpec::geometric(3, 0.5, vec![], 0.8)).unwrap();
        let one = TowerFunction::constant(&t, 1.0);
        assert_eq!(one.sup_norm(&t), 1.0);
        assert_eq!(one.lip_norm(&t), 0.0);
        // differs only on the second return: s = 1, so Lip = 1/β at level 0
        let f = TowerFunction::from_fn(&t, 2, |c, _, w| if c == 0 && w[1] == 0 { 1.0 } else { 0.0 }).unwrap();
        assert!((f.lip_norm(&t) - 1.0 / 0.8).abs() < 1e-15);
        let g = TowerFunction::from_fn(&t, 2, |c, (l, _), w| if c == 2 && l == 1 && w[0] == 0 { 2.0 } else { 0.0 })
            .unwrap();
        assert!((g.lip_norm(&t) - 2.0 * 0.8).abs() < 1e-15);
        assert!((g.sup_norm(&t) - 2.0 * 0.8).abs() < 1e-15);
    }

    #[test]
    fn golden_one_step() {
        let t = golden();
        let one = TowerFunction::constant(&t, 1.0);
        let l1 = transfer_apply(&t, &one).unwrap();
        // cells 1 and 3 map onto {2, 3}; cell 2 maps onto {0, 1}, cell 0 is the hole
        let v: Vec<f64> = (0..4).map(|c| l1.cell_value(c)).collect();
        assert_eq!(v, vec![0.0, 0.5, 1.0, 1.0]);
        assert!((l1.integral(&t) - 0.625).abs() < 1e-15);
    }

    #[test]
    fn no_hole_invariant_density_is_fixed() {
        let t = build_tower(&TowerSpec::geometric(5, 0.5, vec![], 0.8)).unwrap();
        // the invariant density of a full-branch tower is constant
        let one = TowerFunction::constant(&t, 1.0);
        let l1 = transfer_apply(&t, &one).unwrap();
        for c in 0..t.n_cells() {
            assert!((l1.cell_value(c) - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn transfer_of_deep_function_matches_refined_input() {
        let t = build_tower(&TowerSpec::geometric(5, 0.5, vec![[1, 4]], 0.9)).unwrap();
        let f = TowerFunction::from_fn(&t, 1, |c, _, w| 1.0 + c as f64 * 0.1 + w[0] as f64).unwrap();
        let a = transfer_apply(&t, &f).unwrap();
        let b = transfer_apply(&t, &f.refine(&t, 3).unwrap()).unwrap();
        let a3 = a.refine(&t, 3).unwrap();
        for c in 0..t.n_cells() {
            for (x, y) in a3.cell_values(c).iter().zip(b.cell_values(c)) {
                assert!((x - y).abs() < 1e-14);
            }
        }
    }
}
