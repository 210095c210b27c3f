//! Type I (boundary arc) and Type II (disk in the table) holes, and their
//! phase-space membership predicates.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::billiard::{collide, collide_inverse, BilliardError, FlightSegment, PhasePoint};
use crate::geometry::{Table, Vec2};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HoleError {
    #[error("hole disk (center {center:?}, radius {radius}) touches a scatterer")]
    HoleTouchesScatterer { center: [f64; 2], radius: f64 },
    #[error("hole too large: {0}")]
    HoleTooLarge(String),
    #[error("bad arc ({a}, {b}) on scatterer with perimeter {perimeter}")]
    BadArc { a: f64, b: f64, perimeter: f64 },
    #[error("bad scatterer id {0}")]
    BadScattererId(usize),
}

impl HoleError {
    pub fn code(&self) -> &'static str {
        match self {
            HoleError::HoleTouchesScatterer { .. } => "hole.touches_scatterer",
            HoleError::HoleTooLarge(_) => "hole.too_large",
            HoleError::BadArc { .. } => "hole.bad_arc",
            HoleError::BadScattererId(_) => "hole.bad_scatterer_id",
        }
    }
}

/// Open arc `(a, b)` of one scatterer boundary. When `a > b` the arc wraps
/// through `r = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArcHole {
    pub scatterer: usize,
    pub a: f64,
    pub b: f64,
}

impl ArcHole {
    #[inline]
    pub fn contains(&self, x: &PhasePoint) -> bool {
        x.scatterer == self.scatterer
            && if self.a < self.b { x.r > self.a && x.r < self.b } else { x.r > self.a || x.r < self.b }
    }

    pub fn length(&self, perimeter: f64) -> f64 {
        (self.b - self.a).rem_euclid(perimeter)
    }
}

/// Open disk in the billiard domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiskHole {
    pub center: Vec2,
    pub radius: f64,
}

impl DiskHole {
    /// Whether the (unwrapped) flight passes through any periodic image of
    /// the open disk.
    pub fn crosses(&self, flight: &FlightSegment) -> bool {
        let o = flight.start.position;
        let e = flight.end();
        let rr = self.radius;
        let kx0 = (o.x.min(e.x) - rr - self.center.x).ceil() as i64;
        let kx1 = (o.x.max(e.x) + rr - self.center.x).floor() as i64;
        let ky0 = (o.y.min(e.y) - rr - self.center.y).ceil() as i64;
        let ky1 = (o.y.max(e.y) + rr - self.center.y).floor() as i64;
        for kx in kx0..=kx1 {
            for ky in ky0..=ky1 {
                let c = self.center + Vec2::new(kx as f64, ky as f64);
                let t = (c - o).dot(flight.direction).clamp(0.0, flight.length);
                let p = o + flight.direction * t;
                if (p - c).norm_sq() < rr * rr {
                    return true;
                }
            }
        }
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Hole {
    /// No hole: the closed system.
    Empty,
    Arc(ArcHole),
    Disk(DiskHole),
}

/// Location of an infinitesimal hole `q0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Anchor {
    /// A boundary point `(scatterer, r)`: generates Type I arcs.
    Boundary { scatterer: usize, r: f64 },
    /// A point of the table away from scatterers: generates Type II disks.
    Interior(Vec2),
}

/// Serialized hole description.
///
/// `{"type":"I","scatterer":i,"arc":[a,b]}`, `{"type":"II","center":[x,y],"radius":r}`,
/// or a generator `{"type":"I"|"II","anchor":[..],"h":h,"offset":o}` where a
/// Type I anchor is `[scatterer, r]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum HoleSpec {
    #[serde(rename = "I")]
    TypeI(TypeISpec),
    #[serde(rename = "II")]
    TypeII(TypeIISpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TypeISpec {
    Arc {
        scatterer: usize,
        arc: [f64; 2],
    },
    Generated {
        anchor: [f64; 2],
        h: f64,
        #[serde(default)]
        offset: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TypeIISpec {
    Disk {
        center: [f64; 2],
        radius: f64,
    },
    Generated {
        anchor: [f64; 2],
        h: f64,
        #[serde(default)]
        offset: f64,
    },
}

impl HoleSpec {
    pub fn build(&self, table: &Table) -> Result<Hole, HoleError> {
        match self {
            HoleSpec::TypeI(TypeISpec::Arc { scatterer, arc }) => arc_hole(table, *scatterer, arc[0], arc[1]),
            HoleSpec::TypeI(TypeISpec::Generated { anchor, h, offset }) => {
                let id = anchor[0];
                if id < 0.0 || id.fract() != 0.0 {
                    return Err(HoleError::BadScattererId(usize::MAX));
                }
                hole_family(table, Anchor::Boundary { scatterer: id as usize, r: anchor[1] }, *h, *offset)
            }
            HoleSpec::TypeII(TypeIISpec::Disk { center, radius }) => {
                disk_hole(table, Vec2::new(center[0], center[1]), *radius)
            }
            HoleSpec::TypeII(TypeIISpec::Generated { anchor, h, offset }) => {
                hole_family(table, Anchor::Interior(Vec2::new(anchor[0], anchor[1])), *h, *offset)
            }
        }
    }

    /// Generator spec for `anchor` with size `h` and zero offset.
    pub fn generated(anchor: Anchor, h: f64) -> HoleSpec {
        match anchor {
            Anchor::Boundary { scatterer, r } => {
                HoleSpec::TypeI(TypeISpec::Generated { anchor: [scatterer as f64, r], h, offset: 0.0 })
            }
            Anchor::Interior(p) => HoleSpec::TypeII(TypeIISpec::Generated { anchor: [p.x, p.y], h, offset: 0.0 }),
        }
    }
}

pub fn arc_hole(table: &Table, scatterer: usize, a: f64, b: f64) -> Result<Hole, HoleError> {
    if scatterer >= table.len() {
        return Err(HoleError::BadScattererId(scatterer));
    }
    let perimeter = table.perimeter(scatterer);
    let ok = |v: f64| (0.0..perimeter).contains(&v);
    if !ok(a) || !ok(b) || a == b {
        return Err(HoleError::BadArc { a, b, perimeter });
    }
    Ok(Hole::Arc(ArcHole { scatterer, a, b }))
}

pub fn disk_hole(table: &Table, center: Vec2, radius: f64) -> Result<Hole, HoleError> {
    if !(radius > 0.0) || radius >= 0.5 {
        return Err(HoleError::HoleTooLarge(format!("disk radius {radius} outside (0, 0.5)")));
    }
    let center = center.wrap();
    if table.clearance(center) <= radius {
        return Err(HoleError::HoleTouchesScatterer { center: [center.x, center.y], radius });
    }
    Ok(Hole::Disk(DiskHole { center, radius }))
}

/// A member of `Σ_h(q0)`: the arc (or disk) centred `offset` away from the
/// anchor with half-size `h − |offset|`, so it lies in the closed
/// h-neighbourhood of `q0`. Type II offsets move the centre along x.
pub fn hole_family(table: &Table, anchor: Anchor, h: f64, offset: f64) -> Result<Hole, HoleError> {
    let half = h - offset.abs();
    if !(h > 0.0) || !(half > 0.0) {
        return Err(HoleError::HoleTooLarge(format!("need |offset| < h, got h={h}, offset={offset}")));
    }
    match anchor {
        Anchor::Boundary { scatterer, r } => {
            if scatterer >= table.len() {
                return Err(HoleError::BadScattererId(scatterer));
            }
            let p = table.perimeter(scatterer);
            if 2.0 * h >= p {
                return Err(HoleError::HoleTooLarge(format!("2h = {} exceeds perimeter {p}", 2.0 * h)));
            }
            let c = r + offset;
            let a = (c - half).rem_euclid(p);
            let b = (c + half).rem_euclid(p);
            arc_hole(table, scatterer, if a >= p { 0.0 } else { a }, if b >= p { 0.0 } else { b })
        }
        Anchor::Interior(q0) => disk_hole(table, q0 + Vec2::new(offset, 0.0), half),
    }
}

/// `x ∈ H_σ`. For a disk hole this asks whether the flight arriving at `x`
/// crossed the disk, traced backwards from `x`.
pub fn in_hole(table: &Table, hole: &Hole, x: &PhasePoint) -> Result<bool, BilliardError> {
    match hole {
        Hole::Empty => Ok(false),
        Hole::Arc(arc) => Ok(arc.contains(x)),
        Hole::Disk(disk) => {
            let (_, back) = collide(table, &x.reversed())?;
            Ok(disk.crosses(&back))
        }
    }
}

/// `y ∈ H_σ` given the flight that arrived at `y`.
#[inline]
pub fn arrived_in_hole(hole: &Hole, y: &PhasePoint, flight: &FlightSegment) -> bool {
    match hole {
        Hole::Empty => false,
        Hole::Arc(arc) => arc.contains(y),
        Hole::Disk(disk) => disk.crosses(flight),
    }
}

/// `x ∈ B_σ`: the next free flight from `x` crosses the disk.
pub fn in_b_sigma(table: &Table, hole: &DiskHole, x: &PhasePoint) -> Result<bool, BilliardError> {
    let (_, flight) = collide(table, x)?;
    Ok(hole.crosses(&flight))
}

/// `x ∈ H_σ` for a disk hole through the definition `H_σ = f(B_σ)`.
pub fn in_hole_via_preimage(table: &Table, hole: &DiskHole, x: &PhasePoint) -> Result<bool, BilliardError> {
    in_b_sigma(table, hole, &collide_inverse(table, x)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::billiard::collide;
    use crate::geometry::{boundary_point, validate_table, TableSpec};
    use std::f64::consts::PI;

    fn table() -> Table {
        validate_table(&TableSpec::two_disk()).unwrap()
    }

    #[test]
    fn type_one_family_wraps_through_zero() {
        let t = table();
        let p = t.perimeter(1);
        match hole_family(&t, Anchor::Boundary { scatterer: 1, r: 0.0 }, 0.05, 0.0).unwrap() {
            Hole::Arc(a) => {
                assert!((a.a - (p - 0.05)).abs() < 1e-15 && (a.b - 0.05).abs() < 1e-15);
                assert!(a.contains(&PhasePoint::new(1, 0.0, 0.3)));
                assert!(a.contains(&PhasePoint::new(1, p - 0.01, 0.3)));
                assert!(!a.contains(&PhasePoint::new(1, 0.06, 0.3)));
                assert!((a.length(p) - 0.1).abs() < 1e-12);
            }
            h => panic!("{h:?}"),
        }
    }

    #[test]
    fn type_two_family_and_collision_with_scatterer() {
        let t = table();
        let h = hole_family(&t, Anchor::Interior(Vec2::new(0.5, 0.0)), 0.05, 0.0).unwrap();
        assert_eq!(h, Hole::Disk(DiskHole { center: Vec2::new(0.5, 0.0), radius: 0.05 }));
        let err = hole_family(&t, Anchor::Interior(Vec2::new(0.65, 0.5)), 0.1, 0.0).unwrap_err();
        assert!(matches!(err, HoleError::HoleTouchesScatterer { .. }));
        // (0.25, 0.25) lies inside the corner disk of the two-disk cell
        assert!(hole_family(&t, Anchor::Interior(Vec2::new(0.25, 0.25)), 0.05, 0.0).is_err());
        assert!(matches!(
            hole_family(&t, Anchor::Interior(Vec2::new(0.5, 0.0)), 0.05, 0.06),
            Err(HoleError::HoleTooLarge(_))
        ));
    }

    #[test]
    fn arc_membership() {
        let t = table();
        let h = arc_hole(&t, 1, 0.1, 0.2).unwrap();
        assert!(in_hole(&t, &h, &PhasePoint::new(1, 0.15, 0.7)).unwrap());
        assert!(!in_hole(&t, &h, &PhasePoint::new(0, 0.15, 0.0)).unwrap());
        assert!(!in_hole(&t, &h, &PhasePoint::new(1, 0.2, 0.0)).unwrap());
        assert!(arc_hole(&t, 1, 0.2, 0.2).is_err());
        assert!(arc_hole(&t, 1, 0.1, 2.0).is_err());
        assert!(arc_hole(&t, 5, 0.1, 0.2).is_err());
    }

    /// A ray from the corner disk's point at angle π/4... aimed through the hole centre.
    fn aimed_state(t: &Table, target: Vec2) -> PhasePoint {
        // scan the boundary of scatterer 1 for a point whose outgoing ray
        // through `target` is admissible and unobstructed before it
        let rho = 0.2;
        for k in 0..720 {
            let r = (k as f64 + 0.5) / 720.0 * 2.0 * PI * rho;
            let bp = boundary_point(t, 1, r).unwrap();
            let to = (target - bp.position).min_image();
            let dir = to * (1.0 / to.norm());
            let cosphi = dir.dot(bp.inward_normal);
            if cosphi < 0.2 {
                continue;
            }
            let phi = dir.dot(bp.tangent()).atan2(cosphi);
            let x = PhasePoint::new(1, r, phi);
            if let Ok((_, flight)) = collide(t, &x) {
                if flight.length > to.norm() + 0.06 {
                    return x;
                }
            }
        }
        panic!("no aimed state found");
    }

    #[test]
    fn disk_membership_both_routes() {
        let t = table();
        let disk = DiskHole { center: Vec2::new(0.5, 0.0), radius: 0.05 };
        let hole = Hole::Disk(disk);
        let x = aimed_state(&t, disk.center);
        assert!(in_b_sigma(&t, &disk, &x).unwrap());
        let (y, _) = collide(&t, &x).unwrap();
        assert!(in_hole(&t, &hole, &y).unwrap());
        assert!(in_hole_via_preimage(&t, &disk, &y).unwrap());
        // the horizontal period-two orbit stays far from the disk
        let p2 = PhasePoint::new(1, PI * 0.2, 0.0);
        assert!(!in_b_sigma(&t, &disk, &p2).unwrap());
        let tiny = DiskHole { center: Vec2::new(0.5, 0.0), radius: 1e-9 };
        assert!(!in_b_sigma(&t, &tiny, &p2).unwrap());
    }

    #[test]
    fn hole_spec_json_forms() {
        let t = table();
        let s: HoleSpec = serde_json::from_str(r#"{"type":"I","scatterer":1,"arc":[0.1,0.2]}"#).unwrap();
        assert_eq!(s.build(&t).unwrap(), Hole::Arc(ArcHole { scatterer: 1, a: 0.1, b: 0.2 }));
        let s: HoleSpec = serde_json::from_str(r#"{"type":"II","center":[0.5,0.0],"radius":0.05}"#).unwrap();
        assert!(matches!(s.build(&t).unwrap(), Hole::Disk(_)));
        let s: HoleSpec = serde_json::from_str(r#"{"type":"I","anchor":[1,0.0],"h":0.05,"offset":0}"#).unwrap();
        assert!(matches!(s.build(&t).unwrap(), Hole::Arc(_)));
        let s: HoleSpec = serde_json::from_str(r#"{"type":"II","anchor":[0.5,0.0],"h":0.05}"#).unwrap();
        assert!(matches!(s.build(&t).unwrap(), Hole::Disk(_)));
        let back: HoleSpec = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
    }
}
