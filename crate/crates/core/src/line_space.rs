//! The four-manifold of oriented straight lines in Euclidean 3-space.
//!
//! A line is stored canonically as its unit direction `u` and its foot point
//! `q`, the point of the line closest to the origin. With that origin fixed,
//! `q` is exactly the covector the line defines on the unit sphere of
//! directions, so the line manifold is identified with the cotangent bundle
//! of the sphere and the Liouville form pulls back to `q · du`.
//!
//! Sign convention used everywhere in this crate:
//!
//! ```text
//! omega(v1, v2) = dq1 · du2 - dq2 · du1
//! ```
//!
//! In a stereographic chart with coordinates `(a1, a2, b1, b2)` the same form
//! reads `db1 ^ da1 + db2 ^ da2`, i.e. the constant matrix returned by
//! [`omega_matrix`].

use nalgebra::{Matrix4, Vector2, Vector3, Vector4};
use thiserror::Error;

/// Vectors of physical space, measured from the fixed origin.
pub type Vec3 = Vector3<f64>;

/// Margin that keeps each stereographic chart away from its projection pole.
pub const CHART_MARGIN: f64 = 1e-6;

/// Relative finite-difference step (multiplied by `max(1, length scale)`).
pub const FD_STEP: f64 = 1e-5;

const ZERO_DIRECTION: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LineError {
    #[error("direction vector has zero length")]
    ZeroDirection,
    #[error("direction {0:?} lies too close to the pole of chart {1:?}")]
    ChartDomain([f64; 3], ChartId),
}

/// An oriented straight line, stored as (unit direction, foot point).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedLine {
    u: Vec3,
    q: Vec3,
}

impl OrientedLine {
    /// The line through `p` with direction `dir / |dir|`.
    pub fn through(p: Vec3, dir: Vec3) -> Result<Self, LineError> {
        let norm = dir.norm();
        if !(norm >= ZERO_DIRECTION) {
            return Err(LineError::ZeroDirection);
        }
        let u = dir / norm;
        Ok(Self::from_unit(p, u))
    }

    /// Same as [`OrientedLine::through`] but trusts that `u` is already unit.
    pub(crate) fn from_unit(p: Vec3, u: Vec3) -> Self {
        let q = p - p.dot(&u) * u;
        Self { u, q }
    }

    pub fn direction(&self) -> Vec3 {
        self.u
    }

    /// Foot point: the point of the line nearest the origin.
    pub fn foot(&self) -> Vec3 {
        self.q
    }

    /// Point at signed distance `t` from the foot point.
    pub fn point_at(&self, t: f64) -> Vec3 {
        self.q + t * self.u
    }

    /// Signed parameter of the orthogonal projection of `p` onto the line.
    pub fn parameter_of(&self, p: &Vec3) -> f64 {
        (p - self.q).dot(&self.u)
    }

    pub fn distance_to(&self, p: &Vec3) -> f64 {
        let d = p - self.q;
        (d - d.dot(&self.u) * self.u).norm()
    }

    /// Same support, opposite orientation.
    pub fn reversed(&self) -> Self {
        Self {
            u: -self.u,
            q: self.q,
        }
    }

    pub fn translated(&self, offset: &Vec3) -> Self {
        Self::from_unit(self.q + offset, self.u)
    }

    /// Follows the curve `eps -> (normalize(u + eps du), foot of the line through q + eps dq)`,
    /// whose velocity at zero is `v` when `v` is tangent.
    pub fn perturbed(&self, v: &LineVariation, eps: f64) -> Self {
        let u = (self.u + eps * v.du).normalize();
        Self::from_unit(self.q + eps * v.dq, u)
    }

    /// Largest violation of `|u| = 1` and `q · u = 0`.
    pub fn invariant_error(&self) -> f64 {
        (self.u.norm() - 1.0).abs().max(self.q.dot(&self.u).abs())
    }
}

/// A ray: an oriented line with a distinguished starting point on it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
}

impl Ray {
    pub fn new(origin: Vec3, dir: Vec3) -> Result<Self, LineError> {
        let norm = dir.norm();
        if !(norm >= ZERO_DIRECTION) {
            return Err(LineError::ZeroDirection);
        }
        Ok(Self {
            origin,
            dir: dir / norm,
        })
    }

    pub fn line(&self) -> OrientedLine {
        OrientedLine::from_unit(self.origin, self.dir)
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + t * self.dir
    }

    /// The ray on `line` starting at the projection of `anchor` onto it.
    pub fn on_line(line: &OrientedLine, anchor: &Vec3) -> Self {
        Self {
            origin: line.point_at(line.parameter_of(anchor)),
            dir: line.direction(),
        }
    }
}

/// A tangent vector to the line manifold at a given line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineVariation {
    pub du: Vec3,
    pub dq: Vec3,
}

impl LineVariation {
    /// Projects arbitrary `(du, dq)` onto the tangent space at `line`:
    /// removes the component of `du` along `u` and restores `d(q · u) = 0`.
    pub fn tangent_at(line: &OrientedLine, du: Vec3, dq: Vec3) -> Self {
        let u = line.direction();
        let q = line.foot();
        let du = du - du.dot(&u) * u;
        let dq = dq - (dq.dot(&u) + q.dot(&du)) * u;
        Self { du, dq }
    }

    /// Largest violation of `u · du = 0` and `q · du + u · dq = 0`.
    pub fn tangency_error(&self, line: &OrientedLine) -> f64 {
        let u = line.direction();
        let q = line.foot();
        u.dot(&self.du)
            .abs()
            .max((q.dot(&self.du) + u.dot(&self.dq)).abs())
    }

    /// The same physical displacement of the support, seen with the opposite orientation.
    pub fn reversed(&self) -> Self {
        Self {
            du: -self.du,
            dq: self.dq,
        }
    }
}

/// The symplectic form of the line manifold evaluated on two tangent vectors.
///
/// The line argument is not needed by the formula (the form has constant
/// coefficients in `(q, u)`), but it is kept so callers state where the
/// variations live.
pub fn symplectic_pairing(_line: &OrientedLine, v1: &LineVariation, v2: &LineVariation) -> f64 {
    v1.dq.dot(&v2.du) - v2.dq.dot(&v1.du)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ChartId {
    /// Stereographic projection from `+e3`.
    North,
    /// Stereographic projection from `-e3`.
    South,
}

impl ChartId {
    fn pole_sign(self) -> f64 {
        match self {
            ChartId::North => 1.0,
            ChartId::South => -1.0,
        }
    }

    pub fn is_valid_for(self, u: &Vec3) -> bool {
        self.pole_sign() * u.z < 1.0 - CHART_MARGIN
    }

    /// The chart whose pole is farthest from `u`.
    pub fn preferred(u: &Vec3) -> Self {
        if u.z <= 0.0 {
            ChartId::North
        } else {
            ChartId::South
        }
    }
}

/// Four real coordinates of a line in a stereographic chart of `T*S^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChartPoint {
    pub chart: ChartId,
    /// Stereographic coordinates of the direction.
    pub a: Vector2<f64>,
    /// Fiber coordinates: `b_i = q · du/da_i`.
    pub b: Vector2<f64>,
}

impl ChartPoint {
    /// Coordinates stacked as `(a1, a2, b1, b2)`.
    pub fn to_vector(&self) -> Vector4<f64> {
        Vector4::new(self.a.x, self.a.y, self.b.x, self.b.y)
    }

    pub fn from_vector(chart: ChartId, v: &Vector4<f64>) -> Self {
        Self {
            chart,
            a: Vector2::new(v[0], v[1]),
            b: Vector2::new(v[2], v[3]),
        }
    }
}

fn inverse_stereographic(chart: ChartId, a: &Vector2<f64>) -> (Vec3, [Vec3; 2]) {
    let s = a.norm_squared();
    let d = 1.0 + s;
    let sgn = chart.pole_sign();
    let u = Vec3::new(2.0 * a.x / d, 2.0 * a.y / d, sgn * (s - 1.0) / d);
    let d2 = d * d;
    let e1 = Vec3::new(
        (2.0 * d - 4.0 * a.x * a.x) / d2,
        -4.0 * a.x * a.y / d2,
        sgn * 4.0 * a.x / d2,
    );
    let e2 = Vec3::new(
        -4.0 * a.x * a.y / d2,
        (2.0 * d - 4.0 * a.y * a.y) / d2,
        sgn * 4.0 * a.y / d2,
    );
    (u, [e1, e2])
}

/// Chart coordinates of `line`, with the covector measured from `origin`.
pub fn to_chart_with_origin(
    line: &OrientedLine,
    chart: ChartId,
    origin: &Vec3,
) -> Result<ChartPoint, LineError> {
    let u = line.direction();
    if !chart.is_valid_for(&u) {
        return Err(LineError::ChartDomain([u.x, u.y, u.z], chart));
    }
    let denom = 1.0 - chart.pole_sign() * u.z;
    let a = Vector2::new(u.x / denom, u.y / denom);
    let (_, [e1, e2]) = inverse_stereographic(chart, &a);
    // Any point of the line gives the same covector; the foot point relative to `origin` is handy.
    let p = line.foot() - origin;
    Ok(ChartPoint {
        chart,
        a,
        b: Vector2::new(p.dot(&e1), p.dot(&e2)),
    })
}

pub fn to_chart(line: &OrientedLine, chart: ChartId) -> Result<ChartPoint, LineError> {
    to_chart_with_origin(line, chart, &Vec3::zeros())
}

pub fn from_chart(c: &ChartPoint) -> OrientedLine {
    let (u, [e1, e2]) = inverse_stereographic(c.chart, &c.a);
    // The coordinate basis is orthogonal with |e_i|^2 = (2 / (1 + |a|^2))^2.
    let g = e1.norm_squared();
    let q = (c.b.x * e1 + c.b.y * e2) / g;
    OrientedLine { u: u.normalize(), q }
}

/// Constant matrix of the symplectic form in chart coordinates `(a1, a2, b1, b2)`:
/// `omega(v, w) = v^T * Omega * w`.
pub fn omega_matrix() -> Matrix4<f64> {
    Matrix4::new(
        0.0, 0.0, -1.0, 0.0, //
        0.0, 0.0, 0.0, -1.0, //
        1.0, 0.0, 0.0, 0.0, //
        0.0, 1.0, 0.0, 0.0,
    )
}

/// Central-difference Jacobian of a map between line manifolds, expressed in
/// the preferred charts at the input and output lines. `length_scale` sets
/// the step for the fiber coordinates.
pub fn chart_jacobian<E>(
    line: &OrientedLine,
    length_scale: f64,
    map: impl Fn(&OrientedLine) -> Result<OrientedLine, E>,
) -> Result<Matrix4<f64>, JacobianError<E>> {
    let in_chart = ChartId::preferred(&line.direction());
    let center = to_chart(line, in_chart).map_err(JacobianError::Chart)?;
    let image = map(line).map_err(JacobianError::Map)?;
    let out_chart = ChartId::preferred(&image.direction());
    let x0 = center.to_vector();
    let steps = [
        FD_STEP,
        FD_STEP,
        FD_STEP * length_scale.max(1.0),
        FD_STEP * length_scale.max(1.0),
    ];
    let mut jac = Matrix4::zeros();
    for (j, &h) in steps.iter().enumerate() {
        let image_at = |sign: f64| -> Result<Vector4<f64>, JacobianError<E>> {
            let mut x = x0;
            x[j] += sign * h;
            let l = from_chart(&ChartPoint::from_vector(in_chart, &x));
            let out = map(&l).map_err(JacobianError::Map)?;
            Ok(to_chart(&out, out_chart)
                .map_err(JacobianError::Chart)?
                .to_vector())
        };
        let plus = image_at(1.0)?;
        let minus = image_at(-1.0)?;
        jac.set_column(j, &((plus - minus) / (2.0 * h)));
    }
    Ok(jac)
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum JacobianError<E> {
    #[error(transparent)]
    Chart(LineError),
    #[error("map failed: {0}")]
    Map(E),
}

/// `max |J^T Omega J - ratio * Omega|` over all entries.
pub fn symplectic_deviation(jac: &Matrix4<f64>, ratio: f64) -> f64 {
    let omega = omega_matrix();
    (jac.transpose() * omega * jac - ratio * omega).amax()
}

/// Estimate of the conformal factor `r` in `J^T Omega J = r Omega`.
pub fn symplectic_ratio(jac: &Matrix4<f64>) -> f64 {
    let pulled = jac.transpose() * omega_matrix() * jac;
    0.5 * (pulled[(2, 0)] + pulled[(3, 1)])
}
