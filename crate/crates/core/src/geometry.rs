//! Torus billiard tables: circular scatterers on the unit torus, the
//! finite-horizon certificate, and the arc-length boundary parameterization.

use std::f64::consts::PI;
use std::ops::{Add, Mul, Neg, Sub};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Distance tolerance for points that are supposed to lie on a circle.
pub const ON_CIRCLE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    #[inline]
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    #[inline]
    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    #[inline]
    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    #[inline]
    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    #[inline]
    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    /// Counterclockwise rotation by a quarter turn.
    #[inline]
    pub fn perp(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }

    #[inline]
    pub fn from_angle(theta: f64) -> Vec2 {
        let (s, c) = theta.sin_cos();
        Vec2::new(c, s)
    }

    /// Reduce into the fundamental domain [0,1)².
    pub fn wrap(self) -> Vec2 {
        Vec2::new(wrap_unit(self.x), wrap_unit(self.y))
    }

    /// Shortest representative of a displacement on the unit torus.
    pub fn min_image(self) -> Vec2 {
        Vec2::new(self.x - self.x.round(), self.y - self.y.round())
    }
}

fn wrap_unit(v: f64) -> f64 {
    let w = v.rem_euclid(1.0);
    // rem_euclid can return 1.0 for tiny negative inputs
    if w >= 1.0 {
        0.0
    } else {
        w
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    #[inline]
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    #[inline]
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    #[inline]
    fn mul(self, s: f64) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    #[inline]
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("table must contain at least one scatterer")]
    EmptyTable,
    #[error("scatterer {id}: radius {radius} outside (0, 0.5)")]
    BadRadius { id: usize, radius: f64 },
    #[error("scatterers {a} and {b} (or periodic images) overlap: gap {gap:.6} < 0")]
    OverlappingScatterers { a: usize, b: usize, gap: f64 },
    #[error("infinite horizon: free corridor in direction ({p},{q}) of width {width:.6}")]
    InfiniteHorizon { p: i64, q: i64, width: f64 },
    #[error(
        "infinite horizon: free flight of length {length:.4} exceeds budget {budget} near direction {angle:.6} rad"
    )]
    FlightBudgetExceeded { length: f64, budget: f64, angle: f64 },
    #[error("bad scatterer id {0}")]
    BadScattererId(usize),
    #[error("arc length {r} outside [0, {perimeter})")]
    ROutOfRange { r: f64, perimeter: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl GeometryError {
    pub fn code(&self) -> &'static str {
        match self {
            GeometryError::EmptyTable => "geometry.empty",
            GeometryError::BadRadius { .. } => "geometry.radius",
            GeometryError::OverlappingScatterers { .. } => "geometry.overlap",
            GeometryError::InfiniteHorizon { .. } | GeometryError::FlightBudgetExceeded { .. } => {
                "geometry.infinite_horizon"
            }
            GeometryError::BadScattererId(_) => "geometry.bad_scatterer_id",
            GeometryError::ROutOfRange { .. } => "geometry.r_out_of_range",
            GeometryError::InvalidArgument(_) => "geometry.invalid_argument",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScattererSpec {
    pub center: [f64; 2],
    pub radius: f64,
}

/// Serialized table description: `{"scatterers":[{"center":[x,y],"radius":r},...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableSpec {
    pub scatterers: Vec<ScattererSpec>,
}

impl TableSpec {
    /// The two-disk cell used throughout the test-suite: a disk of radius
    /// 0.4 at the origin and one of radius 0.2 at the cell center.
    pub fn two_disk() -> Self {
        TableSpec {
            scatterers: vec![
                ScattererSpec { center: [0.0, 0.0], radius: 0.4 },
                ScattererSpec { center: [0.5, 0.5], radius: 0.2 },
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scatterer {
    pub center: Vec2,
    pub radius: f64,
}

/// A disk image: scatterer index plus integer lattice translate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Image {
    pub scatterer: usize,
    pub shift: (i64, i64),
}

/// A point on a scatterer boundary with the unit normal pointing into the
/// billiard domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TablePoint {
    pub position: Vec2,
    pub scatterer_id: usize,
    pub inward_normal: Vec2,
}

impl TablePoint {
    /// Unit tangent in the direction of increasing arc length.
    pub fn tangent(&self) -> Vec2 {
        self.inward_normal.perp()
    }
}

/// Parameters of the finite-horizon probe.
#[derive(Debug, Clone, Copy)]
pub struct HorizonProbe {
    /// Largest |p|, |q| of the rational directions checked for corridors.
    pub max_direction_index: i64,
    /// Free flights longer than this are treated as evidence of an infinite horizon.
    pub length_budget: f64,
    /// Number of random rays cast as an empirical cross-check.
    pub rays: usize,
    pub seed: u64,
}

impl Default for HorizonProbe {
    fn default() -> Self {
        HorizonProbe { max_direction_index: 8, length_budget: 10.0, rays: 20_000, seed: 0x5eed }
    }
}

/// Outcome of [`finite_horizon_probe`].
#[derive(Debug, Clone, PartialEq)]
pub struct HorizonCertificate {
    /// Certified maximum free-flight length.
    pub max_flight: f64,
    /// Longest flight found on common tangent lines of disk pairs.
    pub tangent_flight: f64,
    /// Longest flight among the randomly cast rays.
    pub sampled_flight: f64,
    /// Number of rational directions whose corridor test was performed.
    pub directions_checked: usize,
    /// True when every direction that could carry a corridor was inside the
    /// probed index range, so the corridor test alone decides the horizon.
    pub corridor_test_complete: bool,
}

/// Unit torus minus disjoint circular scatterers, validated.
#[derive(Debug, Clone)]
pub struct Table {
    scatterers: Vec<Scatterer>,
    perimeters: Vec<f64>,
    total_perimeter: f64,
    horizon_bound: f64,
    max_radius: f64,
    // Images whose disks meet the closed unit square; shifted per cell
    // during ray traversal.
    cell_images: Vec<Image>,
}

impl Table {
    /// Builds the geometric part of the table without the horizon certificate.
    fn unchecked(spec: &TableSpec) -> Result<Table, GeometryError> {
        if spec.scatterers.is_empty() {
            return Err(GeometryError::EmptyTable);
        }
        let scatterers: Vec<Scatterer> = spec
            .scatterers
            .iter()
            .map(|s| Scatterer { center: Vec2::new(s.center[0], s.center[1]).wrap(), radius: s.radius })
            .collect();
        for (id, s) in scatterers.iter().enumerate() {
            if !(s.radius > 0.0 && s.radius < 0.5) || !s.center.x.is_finite() || !s.center.y.is_finite() {
                return Err(GeometryError::BadRadius { id, radius: s.radius });
            }
        }
        for a in 0..scatterers.len() {
            for b in a + 1..scatterers.len() {
                let d = (scatterers[b].center - scatterers[a].center).min_image().norm();
                let gap = d - scatterers[a].radius - scatterers[b].radius;
                if gap <= 0.0 {
                    return Err(GeometryError::OverlappingScatterers { a, b, gap });
                }
            }
        }
        let perimeters: Vec<f64> = scatterers.iter().map(|s| 2.0 * PI * s.radius).collect();
        let total_perimeter = perimeters.iter().sum();
        let max_radius = scatterers.iter().map(|s| s.radius).fold(0.0, f64::max);

        let mut cell_images = Vec::new();
        for (id, s) in scatterers.iter().enumerate() {
            for dx in -1..=1 {
                for dy in -1..=1 {
                    let c = s.center + Vec2::new(dx as f64, dy as f64);
                    let nx = c.x.clamp(0.0, 1.0);
                    let ny = c.y.clamp(0.0, 1.0);
                    if (c - Vec2::new(nx, ny)).norm() <= s.radius {
                        cell_images.push(Image { scatterer: id, shift: (dx, dy) });
                    }
                }
            }
        }

        Ok(Table { scatterers, perimeters, total_perimeter, horizon_bound: f64::INFINITY, max_radius, cell_images })
    }

    pub fn scatterers(&self) -> &[Scatterer] {
        &self.scatterers
    }

    pub fn len(&self) -> usize {
        self.scatterers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scatterers.is_empty()
    }

    pub fn perimeter(&self, id: usize) -> f64 {
        self.perimeters[id]
    }

    pub fn perimeters(&self) -> &[f64] {
        &self.perimeters
    }

    pub fn total_perimeter(&self) -> f64 {
        self.total_perimeter
    }

    /// Certified maximum free-flight length `L_max`.
    pub fn horizon_bound(&self) -> f64 {
        self.horizon_bound
    }

    pub fn max_radius(&self) -> f64 {
        self.max_radius
    }

    pub fn spec(&self) -> TableSpec {
        TableSpec {
            scatterers: self
                .scatterers
                .iter()
                .map(|s| ScattererSpec { center: [s.center.x, s.center.y], radius: s.radius })
                .collect(),
        }
    }

    pub(crate) fn image_center(&self, img: Image) -> Vec2 {
        self.scatterers[img.scatterer].center + Vec2::new(img.shift.0 as f64, img.shift.1 as f64)
    }

    /// Euclidean distance from a torus point to the nearest scatterer disk
    /// (negative inside a disk).
    pub fn clearance(&self, p: Vec2) -> f64 {
        self.scatterers.iter().map(|s| (s.center - p).min_image().norm() - s.radius).fold(f64::INFINITY, f64::min)
    }

    /// First intersection of the ray `origin + t·dir` (t > 0) with a disk
    /// image, skipping `exclude`. Traverses unit cells along the ray until a
    /// hit is certain or `t_max` is passed.
    pub(crate) fn cast(
        &self,
        origin: Vec2,
        dir: Vec2,
        exclude: Option<Image>,
        t_max: f64,
        mode: CastMode,
    ) -> Option<RayHit> {
        let mut cx = origin.x.floor() as i64;
        let mut cy = origin.y.floor() as i64;
        let step_x: i64 = if dir.x >= 0.0 { 1 } else { -1 };
        let step_y: i64 = if dir.y >= 0.0 { 1 } else { -1 };
        let next_x = |c: i64| if step_x > 0 { (c + 1) as f64 } else { c as f64 };
        let next_y = |c: i64| if step_y > 0 { (c + 1) as f64 } else { c as f64 };
        let delta_x = if dir.x != 0.0 { (1.0 / dir.x).abs() } else { f64::INFINITY };
        let delta_y = if dir.y != 0.0 { (1.0 / dir.y).abs() } else { f64::INFINITY };
        let mut t_next_x = if dir.x != 0.0 { (next_x(cx) - origin.x) / dir.x } else { f64::INFINITY };
        let mut t_next_y = if dir.y != 0.0 { (next_y(cy) - origin.y) / dir.y } else { f64::INFINITY };

        let mut best: Option<RayHit> = None;
        let mut grazed = false;
        loop {
            for base in &self.cell_images {
                let img = Image { scatterer: base.scatterer, shift: (base.shift.0 + cx, base.shift.1 + cy) };
                if Some(img) == exclude {
                    continue;
                }
                let s = &self.scatterers[img.scatterer];
                let c = s.center + Vec2::new(img.shift.0 as f64, img.shift.1 as f64);
                let w = origin - c;
                let b = w.dot(dir);
                if b >= 0.0 {
                    continue;
                }
                let ww = w.norm_sq();
                let r2 = s.radius * s.radius;
                let cc = ww - r2;
                // squared impact parameter is ww - b², so disc = r² - d²
                let disc = r2 - (ww - b * b);
                let graze_tol = 2.0 * s.radius * ON_CIRCLE_TOL;
                if disc.abs() < graze_tol {
                    let t_close = -b;
                    if best.is_none_or(|h| t_close < h.t) {
                        grazed = true;
                    }
                    if mode == CastMode::SkipGrazing {
                        continue;
                    }
                }
                if disc < 0.0 {
                    continue;
                }
                let t = cc / (-b + disc.sqrt());
                if t > 0.0 && best.is_none_or(|h| t < h.t) {
                    best = Some(RayHit { t, image: img, center: c, grazing: false });
                }
            }
            let t_exit = t_next_x.min(t_next_y);
            if let Some(h) = best {
                if h.t <= t_exit {
                    let mut h = h;
                    h.grazing = grazed && self.grazes_before(origin, dir, exclude, h.t);
                    return Some(h);
                }
            }
            if t_exit > t_max {
                return None;
            }
            if t_next_x < t_next_y {
                cx += step_x;
                t_next_x += delta_x;
            } else {
                cy += step_y;
                t_next_y += delta_y;
            }
        }
    }

    // Re-checks near-tangent candidates against the final hit distance.
    fn grazes_before(&self, origin: Vec2, dir: Vec2, exclude: Option<Image>, t_hit: f64) -> bool {
        let lo = origin.x.min(origin.x + dir.x * t_hit).floor() as i64 - 1;
        let hi = origin.x.max(origin.x + dir.x * t_hit).floor() as i64 + 1;
        let loy = origin.y.min(origin.y + dir.y * t_hit).floor() as i64 - 1;
        let hiy = origin.y.max(origin.y + dir.y * t_hit).floor() as i64 + 1;
        for (id, s) in self.scatterers.iter().enumerate() {
            for kx in lo..=hi {
                for ky in loy..=hiy {
                    let img = Image { scatterer: id, shift: (kx, ky) };
                    if Some(img) == exclude {
                        continue;
                    }
                    let c = self.image_center(img);
                    let w = origin - c;
                    let b = w.dot(dir);
                    if b >= 0.0 || -b > t_hit + s.radius {
                        continue;
                    }
                    let disc = s.radius * s.radius - (w.norm_sq() - b * b);
                    if disc.abs() < 2.0 * s.radius * ON_CIRCLE_TOL {
                        return true;
                    }
                }
            }
        }
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum CastMode {
    /// Report disks hit at near-tangency (and flag the graze).
    Strict,
    /// Treat near-tangent disks as misses; used for supremum computations.
    SkipGrazing,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct RayHit {
    pub t: f64,
    pub image: Image,
    pub center: Vec2,
    /// Some disk before (or at) the hit was passed within the tangency tolerance.
    pub grazing: bool,
}

/// Validates scatterer geometry and certifies finite horizon with the
/// default probe parameters.
pub fn validate_table(spec: &TableSpec) -> Result<Table, GeometryError> {
    let table = Table::unchecked(spec)?;
    let cert = finite_horizon_probe(&table, &HorizonProbe::for_table(&table))?;
    Ok(table.with_horizon(cert.max_flight))
}

impl HorizonProbe {
    /// Default probe with the direction range widened so that the corridor
    /// test is complete for `table`.
    pub fn for_table(table: &Table) -> HorizonProbe {
        // every direction with |(p,q)| ≥ 1/(2 r_max) is blocked by one disk
        let needed = (1.0 / (2.0 * table.max_radius)).ceil() as i64;
        let d = HorizonProbe::default();
        HorizonProbe { max_direction_index: needed.max(d.max_direction_index), ..d }
    }
}

impl Table {
    fn with_horizon(mut self, bound: f64) -> Table {
        self.horizon_bound = bound;
        self
    }
}

/// Builds the table geometry, skipping the horizon certificate. Intended for
/// probing candidate tables.
pub fn table_geometry(spec: &TableSpec) -> Result<Table, GeometryError> {
    Table::unchecked(spec)
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

/// Largest gap left uncovered by the projections of all disk images onto the
/// normal of the rational direction (p,q). Zero means the direction is blocked.
pub fn corridor_width(table: &Table, p: i64, q: i64) -> f64 {
    let len = ((p * p + q * q) as f64).sqrt();
    let normal = Vec2::new(-(q as f64), p as f64) * (1.0 / len);
    let period = 1.0 / len;
    let mut intervals: Vec<(f64, f64)> = table
        .scatterers
        .iter()
        .map(|s| {
            let c = s.center.dot(normal).rem_euclid(period);
            (c - s.radius, c + s.radius)
        })
        .collect();
    if intervals.iter().any(|(a, b)| b - a >= period) {
        return 0.0;
    }
    intervals.sort_by(|a, b| a.0.total_cmp(&b.0));
    // sweep the circle of circumference `period` starting from the first interval
    let start = intervals[0].0;
    let mut reach = intervals[0].1;
    let mut widest: f64 = 0.0;
    for &(a, b) in &intervals[1..] {
        if a > reach {
            widest = widest.max(a - reach);
        }
        reach = reach.max(b);
    }
    let wrap_gap = start + period - reach;
    widest = widest.max(wrap_gap);
    widest.max(0.0)
}

/// Decides the finite-horizon property and returns the certified flight bound.
pub fn finite_horizon_probe(table: &Table, probe: &HorizonProbe) -> Result<HorizonCertificate, GeometryError> {
    let qmax = probe.max_direction_index;
    if qmax < 1 {
        return Err(GeometryError::InvalidArgument("max_direction_index must be ≥ 1".into()));
    }
    if !(probe.length_budget > 0.0) {
        return Err(GeometryError::InvalidArgument("length_budget must be positive".into()));
    }
    let mut directions: Vec<(i64, i64)> = (0..=qmax)
        .flat_map(|p| (-qmax..=qmax).map(move |q| (p, q)))
        .filter(|&(p, q)| !(p == 0 && q <= 0) && gcd(p, q) == 1)
        .collect();
    directions.sort_by_key(|&(p, q)| (p * p + q * q, q.abs(), -q));
    for &(p, q) in &directions {
        let width = corridor_width(table, p, q);
        if width > 0.0 {
            return Err(GeometryError::InfiniteHorizon { p, q, width });
        }
    }
    let directions_checked = directions.len();
    // |p| ≤ |(p,q)| < 1/(2 r_max) for every direction a single disk cannot block
    let corridor_test_complete = qmax as f64 >= 1.0 / (2.0 * table.max_radius);

    let budget = probe.length_budget;
    let tangent_flight = tangent_line_flight(table, budget)?;

    let mut rng = ChaCha8Rng::seed_from_u64(probe.seed);
    let mut sampled_flight: f64 = 0.0;
    for _ in 0..probe.rays {
        let id = rng.random_range(0..table.len());
        let r = rng.random::<f64>() * table.perimeter(id);
        let phi = (rng.random::<f64>() - 0.5) * PI;
        let pt = boundary_point(table, id, r)?;
        let dir = pt.inward_normal * phi.cos() + pt.tangent() * phi.sin();
        let exclude = Some(Image { scatterer: id, shift: (0, 0) });
        match table.cast(pt.position, dir, exclude, budget, CastMode::SkipGrazing) {
            Some(hit) => sampled_flight = sampled_flight.max(hit.t),
            None => {
                return Err(GeometryError::FlightBudgetExceeded { length: budget, budget, angle: dir.y.atan2(dir.x) })
            }
        }
    }

    Ok(HorizonCertificate {
        max_flight: tangent_flight.max(sampled_flight),
        tangent_flight,
        sampled_flight,
        directions_checked,
        corridor_test_complete,
    })
}

/// Longest free segment on common tangent lines of pairs of disk images.
/// Maximal free flights are pinned by two tangencies, so this is the
/// supremum of free-flight lengths whenever it stays below the budget.
fn tangent_line_flight(table: &Table, budget: f64) -> Result<f64, GeometryError> {
    let reach = budget + 2.0 * table.max_radius;
    let k = reach.ceil() as i64 + 1;
    let mut longest: f64 = 0.0;
    for (i, si) in table.scatterers.iter().enumerate() {
        for (j, sj) in table.scatterers.iter().enumerate() {
            for kx in -k..=k {
                for ky in -k..=k {
                    if i == j && kx == 0 && ky == 0 {
                        continue;
                    }
                    let cj = sj.center + Vec2::new(kx as f64, ky as f64);
                    let d = cj - si.center;
                    let dist = d.norm();
                    if dist > reach {
                        continue;
                    }
                    for s2 in [1.0, -1.0] {
                        let a = s2 * sj.radius - si.radius;
                        let disc = dist * dist - a * a;
                        if disc <= 0.0 {
                            continue;
                        }
                        for h in [1.0, -1.0] {
                            let n = (d * a + d.perp() * (h * disc.sqrt())) * (1.0 / (dist * dist));
                            let u = n.perp();
                            let touch_i = si.center - n * si.radius;
                            let touch_j = cj - n * (s2 * sj.radius);
                            for touch in [touch_i, touch_j] {
                                let fwd = table.cast(touch, u, None, reach, CastMode::SkipGrazing);
                                let back = table.cast(touch, -u, None, reach, CastMode::SkipGrazing);
                                match (fwd, back) {
                                    (Some(f), Some(b)) => longest = longest.max(f.t + b.t),
                                    _ => {
                                        return Err(GeometryError::FlightBudgetExceeded {
                                            length: reach,
                                            budget,
                                            angle: u.y.atan2(u.x),
                                        })
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    if longest > budget {
        return Err(GeometryError::FlightBudgetExceeded { length: longest, budget, angle: f64::NAN });
    }
    Ok(longest)
}

/// Cartesian lift of the boundary coordinate `r` on scatterer `id`.
/// Arc length runs counterclockwise from the point at angle 0.
pub fn boundary_point(table: &Table, id: usize, r: f64) -> Result<TablePoint, GeometryError> {
    let s = table.scatterers.get(id).ok_or(GeometryError::BadScattererId(id))?;
    let perimeter = table.perimeters[id];
    if !(0.0..perimeter).contains(&r) {
        return Err(GeometryError::ROutOfRange { r, perimeter });
    }
    let normal = Vec2::from_angle(r / s.radius);
    Ok(TablePoint { position: s.center + normal * s.radius, scatterer_id: id, inward_normal: normal })
}
