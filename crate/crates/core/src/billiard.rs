//! The collision map `f: M → M`, its inverse by time reversal, its derivative
//! in `(r, φ)` coordinates, and the p-metric.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{boundary_point, CastMode, GeometryError, Image, Table, TablePoint, Vec2};

/// Collisions with |φ| this close to π/2 are not computed.
pub const TANGENCY_GUARD: f64 = 1e-9;

/// A post-collision state on the cross-section `M`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhasePoint {
    pub scatterer: usize,
    /// Arc length in `[0, perimeter)`.
    pub r: f64,
    /// Angle of the outgoing velocity with the inward normal, in `[-π/2, π/2]`.
    pub phi: f64,
}

impl PhasePoint {
    pub fn new(scatterer: usize, r: f64, phi: f64) -> Self {
        PhasePoint { scatterer, r, phi }
    }

    /// Time-reversal involution `(r, φ) ↦ (r, −φ)`.
    pub fn reversed(self) -> Self {
        PhasePoint { phi: -self.phi, ..self }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BilliardError {
    #[error("near-tangent collision at scatterer {scatterer}, φ = {phi}")]
    NearTangency { scatterer: usize, phi: f64 },
    #[error("points lie on different scatterers ({0} and {1})")]
    DifferentScatterers(usize, usize),
    #[error("no collision found within {0} (horizon certificate violated)")]
    NoCollision(f64),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

impl BilliardError {
    pub fn code(&self) -> &'static str {
        match self {
            BilliardError::NearTangency { .. } => "billiard.near_tangency",
            BilliardError::DifferentScatterers(..) => "billiard.different_scatterers",
            BilliardError::NoCollision(_) => "billiard.no_collision",
            BilliardError::Geometry(g) => g.code(),
        }
    }
}

/// One free flight between consecutive collisions, in unwrapped coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlightSegment {
    pub start: TablePoint,
    pub direction: Vec2,
    pub length: f64,
}

impl FlightSegment {
    pub fn end(&self) -> Vec2 {
        self.start.position + self.direction * self.length
    }

    /// The flight cut at unit-cell boundaries, each piece translated back
    /// into `[0,1]²`.
    pub fn wrapped_pieces(&self) -> Vec<(Vec2, Vec2)> {
        let o = self.start.position;
        let d = self.direction;
        let mut cuts = vec![0.0, self.length];
        for (oc, dc) in [(o.x, d.x), (o.y, d.y)] {
            if dc == 0.0 {
                continue;
            }
            let end = oc + dc * self.length;
            let (lo, hi) = if oc < end { (oc, end) } else { (end, oc) };
            let mut k = lo.floor() + 1.0;
            while k < hi {
                cuts.push((k - oc) / dc);
                k += 1.0;
            }
        }
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();
        cuts.windows(2)
            .map(|w| {
                let a = o + d * w[0];
                let b = o + d * w[1];
                let mid = o + d * (0.5 * (w[0] + w[1]));
                let shift = Vec2::new(mid.x.floor(), mid.y.floor());
                (a - shift, b - shift)
            })
            .collect()
    }
}

fn check_guard(x: &PhasePoint) -> Result<(), BilliardError> {
    if !(x.phi.abs() < FRAC_PI_2 - TANGENCY_GUARD) {
        return Err(BilliardError::NearTangency { scatterer: x.scatterer, phi: x.phi });
    }
    Ok(())
}

/// The collision map. Returns the next post-collision state together with
/// the flight that reaches it.
pub fn collide(table: &Table, x: &PhasePoint) -> Result<(PhasePoint, FlightSegment), BilliardError> {
    check_guard(x)?;
    let start = boundary_point(table, x.scatterer, x.r)?;
    let (s, c) = x.phi.sin_cos();
    let dir = start.inward_normal * c + start.tangent() * s;
    let exclude = Some(Image { scatterer: x.scatterer, shift: (0, 0) });
    let t_max = 2.0 * table.horizon_bound().min(1e3) + 1.0;
    let hit =
        table.cast(start.position, dir, exclude, t_max, CastMode::Strict).ok_or(BilliardError::NoCollision(t_max))?;
    if hit.grazing {
        return Err(BilliardError::NearTangency { scatterer: hit.image.scatterer, phi: FRAC_PI_2 });
    }
    let id = hit.image.scatterer;
    let radius = table.scatterers()[id].radius;
    let point = start.position + dir * hit.t;
    let normal = (point - hit.center) * (1.0 / radius);
    let tangent = normal.perp();
    let v_out = dir - normal * (2.0 * dir.dot(normal));
    let phi = v_out.dot(tangent).atan2(v_out.dot(normal));
    let mut r = normal.y.atan2(normal.x).rem_euclid(2.0 * PI) * radius;
    if r >= table.perimeter(id) {
        r = 0.0;
    }
    let y = PhasePoint { scatterer: id, r, phi };
    check_guard(&y)?;
    Ok((y, FlightSegment { start, direction: dir, length: hit.t }))
}

/// `f⁻¹ = I ∘ f ∘ I` with `I(r, φ) = (r, −φ)`.
pub fn collide_inverse(table: &Table, y: &PhasePoint) -> Result<PhasePoint, BilliardError> {
    let (z, _) = collide(table, &y.reversed())?;
    Ok(z.reversed())
}

/// `Df(x)` in `(r, φ)` coordinates, row-major `[[∂r'/∂r, ∂r'/∂φ], [∂φ'/∂r, ∂φ'/∂φ]]`.
///
/// Uses the dispersing-billiard form with curvatures `K = 1/ρ`, `K' = 1/ρ'`
/// and flight length `τ`; `det Df = cos φ / cos φ'`.
pub fn collision_jacobian(table: &Table, x: &PhasePoint) -> Result<[[f64; 2]; 2], BilliardError> {
    let (y, flight) = collide(table, x)?;
    let k0 = 1.0 / table.scatterers()[x.scatterer].radius;
    let k1 = 1.0 / table.scatterers()[y.scatterer].radius;
    let tau = flight.length;
    let c0 = x.phi.cos();
    let c1 = y.phi.cos();
    let s = -1.0 / c1;
    Ok([[s * (tau * k0 + c0), s * tau], [s * (tau * k0 * k1 + k0 * c1 + k1 * c0), s * (tau * k1 + c1)]])
}

/// Length of the straight parameter segment between two states on the same
/// scatterer, measured by `cos φ dr`. The `r` difference is taken the short
/// way round the circle.
pub fn p_distance(table: &Table, a: &PhasePoint, b: &PhasePoint) -> Result<f64, BilliardError> {
    if a.scatterer != b.scatterer {
        return Err(BilliardError::DifferentScatterers(a.scatterer, b.scatterer));
    }
    let per = table.perimeter(a.scatterer);
    let mut dr = (b.r - a.r).rem_euclid(per);
    if dr > 0.5 * per {
        dr -= per;
    }
    let dphi = b.phi - a.phi;
    // ∫₀¹ cos(φa + s·Δφ) ds, exact
    let mean_cos = if dphi.abs() < 1e-8 {
        (0.5 * (a.phi + b.phi)).cos() * (1.0 - dphi * dphi / 24.0)
    } else {
        (b.phi.sin() - a.phi.sin()) / dphi
    };
    Ok(dr.abs() * mean_cos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{validate_table, TableSpec};
    use std::f64::consts::FRAC_PI_3;

    fn table() -> Table {
        validate_table(&TableSpec::two_disk()).unwrap()
    }

    #[test]
    fn head_on_period_two_orbit() {
        let t = table();
        let x = PhasePoint::new(1, PI * 0.2, 0.0);
        let (y, flight) = collide(&t, &x).unwrap();
        assert_eq!(y.scatterer, 1);
        assert!(y.r.abs() < 1e-12 || (y.r - t.perimeter(1)).abs() < 1e-12);
        assert!(y.phi.abs() < 1e-12);
        assert!((flight.length - 0.6).abs() < 1e-12);
        let (z, _) = collide(&t, &y).unwrap();
        assert!((z.r - x.r).abs() < 1e-10 && (z.phi - x.phi).abs() < 1e-10);
    }

    #[test]
    fn tangent_start_is_rejected() {
        let t = table();
        for phi in [FRAC_PI_2, -FRAC_PI_2, FRAC_PI_2 - 1e-10] {
            let err = collide(&t, &PhasePoint::new(0, 0.3, phi)).unwrap_err();
            assert!(matches!(err, BilliardError::NearTangency { .. }));
        }
        assert!(collide_inverse(&t, &PhasePoint::new(0, 0.3, -FRAC_PI_2)).is_err());
    }

    #[test]
    fn inverse_of_period_two_landing() {
        let t = table();
        let z = collide_inverse(&t, &PhasePoint::new(1, 0.0, 0.0)).unwrap();
        assert_eq!(z.scatterer, 1);
        assert!((z.r - PI * 0.2).abs() < 1e-12 && z.phi.abs() < 1e-12);
        let x = PhasePoint::new(1, PI * 0.2, 0.3);
        let back = collide_inverse(&t, &collide(&t, &x).unwrap().0).unwrap();
        assert!((back.r - x.r).abs() < 1e-10 && (back.phi - x.phi).abs() < 1e-10);
    }

    #[test]
    fn jacobian_on_period_two_orbit_has_unit_determinant() {
        let t = table();
        let m = collision_jacobian(&t, &PhasePoint::new(1, PI * 0.2, 0.0)).unwrap();
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        assert!((det - 1.0).abs() < 1e-12);
    }

    #[test]
    fn p_distance_examples() {
        let t = table();
        let a = PhasePoint::new(0, 0.4, 0.2);
        assert_eq!(p_distance(&t, &a, &a).unwrap(), 0.0);
        let d = p_distance(&t, &PhasePoint::new(0, 0.1, 0.0), &PhasePoint::new(0, 0.2, 0.0)).unwrap();
        assert!((d - 0.1).abs() < 1e-15);
        let d = p_distance(&t, &PhasePoint::new(0, 0.1, FRAC_PI_3), &PhasePoint::new(0, 0.2, FRAC_PI_3)).unwrap();
        assert!((d - 0.05).abs() < 1e-15);
        assert!(matches!(
            p_distance(&t, &PhasePoint::new(0, 0.1, 0.0), &PhasePoint::new(1, 0.1, 0.0)),
            Err(BilliardError::DifferentScatterers(0, 1))
        ));
    }

    #[test]
    fn p_distance_matches_quadrature() {
        let t = table();
        let a = PhasePoint::new(0, 0.3, -0.7);
        let b = PhasePoint::new(0, 0.55, 1.1);
        let n = 20_000;
        let quad: f64 = (0..n)
            .map(|i| {
                let s = (i as f64 + 0.5) / n as f64;
                (a.phi + s * (b.phi - a.phi)).cos() * (b.r - a.r) / n as f64
            })
            .sum();
        assert!((p_distance(&t, &a, &b).unwrap() - quad).abs() < 1e-9);
    }

    #[test]
    fn wrapped_pieces_cover_flight() {
        let t = table();
        let (_, flight) = collide(&t, &PhasePoint::new(0, 0.9, 0.4)).unwrap();
        let pieces = flight.wrapped_pieces();
        let total: f64 = pieces.iter().map(|(a, b)| (*b - *a).norm()).sum();
        assert!((total - flight.length).abs() < 1e-12);
        for (a, b) in pieces {
            for p in [a, b] {
                assert!((-1e-12..=1.0 + 1e-12).contains(&p.x) && (-1e-12..=1.0 + 1e-12).contains(&p.y));
            }
        }
    }
}
