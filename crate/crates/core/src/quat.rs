//! Vectors and unit quaternions in double precision.
//!
//! Quaternions are stored as `(x, y, z, w)` with `w` the scalar part, matching
//! the component order of the tracking files. Products follow the Hamilton
//! convention, so `a * b` applies `b` first and then `a` when rotating vectors.

use std::ops::{Add, Mul, Neg, Sub};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };
    pub const X: Vec3 = Vec3 { x: 1.0, y: 0.0, z: 0.0 };
    pub const Y: Vec3 = Vec3 { x: 0.0, y: 1.0, z: 0.0 };
    pub const Z: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 1.0 };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn scale(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn lerp(self, o: Vec3, t: f64) -> Vec3 {
        self + (o - self).scale(t)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

impl From<[f64; 3]> for Vec3 {
    fn from(v: [f64; 3]) -> Self {
        Vec3::new(v[0], v[1], v[2])
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quaternion {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
}

impl Default for Quaternion {
    fn default() -> Self {
        Quaternion::IDENTITY
    }
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion { x: 0.0, y: 0.0, z: 0.0, w: 1.0 };

    pub const fn new(x: f64, y: f64, z: f64, w: f64) -> Self {
        Quaternion { x, y, z, w }
    }

    /// Rotation of `angle` radians about `axis` (normalized internally).
    /// A zero axis yields the identity.
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 {
            return Quaternion::IDENTITY;
        }
        let (s, c) = (0.5 * angle).sin_cos();
        let v = axis.scale(s / n);
        Quaternion::new(v.x, v.y, v.z, c)
    }

    pub fn vector(self) -> Vec3 {
        Vec3::new(self.x, self.y, self.z)
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x, self.y, self.z, self.w]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Quaternion::new(v[0], v[1], v[2], v[3])
    }

    pub fn dot(self, o: Quaternion) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z + self.w * o.w
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite() && self.w.is_finite()
    }

    pub fn scale(self, s: f64) -> Quaternion {
        Quaternion::new(self.x * s, self.y * s, self.z * s, self.w * s)
    }

    pub fn normalized(self) -> Result<Quaternion> {
        let n = self.norm();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::DegenerateRotation { frame: None });
        }
        Ok(Quaternion::new(self.x / n, self.y / n, self.z / n, self.w / n))
    }

    pub fn conjugate(self) -> Quaternion {
        Quaternion::new(-self.x, -self.y, -self.z, self.w)
    }

    /// Multiplicative inverse; equals the conjugate for unit quaternions.
    pub fn inverse(self) -> Quaternion {
        self.conjugate().scale(1.0 / self.dot(self))
    }

    /// Rotate `v` by this (unit) quaternion: `q v q*`.
    pub fn rotate(self, v: Vec3) -> Vec3 {
        // v' = v + 2w (u x v) + 2 u x (u x v)
        let u = self.vector();
        let t = u.cross(v).scale(2.0);
        v + t.scale(self.w) + u.cross(t)
    }

    /// Rotation angle in radians, in `[0, pi]`.
    pub fn angle(self) -> f64 {
        2.0 * self.vector().norm().atan2(self.w.abs())
    }

    /// Shortest-arc spherical interpolation between unit quaternions.
    pub fn slerp(self, other: Quaternion, t: f64) -> Quaternion {
        let mut b = other;
        let mut cos = self.dot(b);
        if cos < 0.0 {
            b = -b;
            cos = -cos;
        }
        if cos > 0.9995 {
            let q = Quaternion::new(
                self.x + (b.x - self.x) * t,
                self.y + (b.y - self.y) * t,
                self.z + (b.z - self.z) * t,
                self.w + (b.w - self.w) * t,
            );
            return q.scale(1.0 / q.norm());
        }
        let theta = cos.min(1.0).acos();
        let sin = theta.sin();
        let wa = ((1.0 - t) * theta).sin() / sin;
        let wb = (t * theta).sin() / sin;
        Quaternion::new(
            wa * self.x + wb * b.x,
            wa * self.y + wb * b.y,
            wa * self.z + wb * b.z,
            wa * self.w + wb * b.w,
        )
    }
}

impl Mul for Quaternion {
    type Output = Quaternion;
    fn mul(self, b: Quaternion) -> Quaternion {
        let a = self;
        // Paired terms cancel exactly when `a` is the conjugate of `b`.
        Quaternion::new(
            (a.w * b.x + a.x * b.w) + (a.y * b.z - a.z * b.y),
            (a.w * b.y + a.y * b.w) + (a.z * b.x - a.x * b.z),
            (a.w * b.z + a.z * b.w) + (a.x * b.y - a.y * b.x),
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
        )
    }
}

impl Neg for Quaternion {
    type Output = Quaternion;
    fn neg(self) -> Quaternion {
        Quaternion::new(-self.x, -self.y, -self.z, -self.w)
    }
}

/// Normalize `q` and pick the hemisphere of the double cover.
///
/// With a reference the result satisfies `dot(result, reference) >= 0`.
/// Without one, `w >= 0`; when `w == 0` the first non-zero of `x, y, z` is
/// made non-negative.
pub fn canonicalize(q: Quaternion, reference: Option<Quaternion>) -> Result<Quaternion> {
    let q = q.normalized()?;
    let flip = match reference {
        Some(r) => q.dot(r) < 0.0,
        None => {
            if q.w != 0.0 {
                q.w < 0.0
            } else {
                [q.x, q.y, q.z]
                    .into_iter()
                    .find(|c| *c != 0.0)
                    .is_some_and(|c| c < 0.0)
            }
        }
    };
    Ok(if flip { -q } else { q })
}

/// Order of the incremental rotation between consecutive frames.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DeltaOrder {
    /// `inverse(prev) * curr`: the increment expressed in the previous
    /// frame's local basis.
    #[default]
    Local,
    /// `curr * inverse(prev)`: the increment expressed in the parent basis.
    Global,
}

/// Relative rotation from `prev` to `curr`, canonicalized to `w >= 0`.
pub fn quat_delta(prev: Quaternion, curr: Quaternion) -> Quaternion {
    quat_delta_with(prev, curr, DeltaOrder::Local)
}

pub fn quat_delta_with(prev: Quaternion, curr: Quaternion, order: DeltaOrder) -> Quaternion {
    let d = match order {
        DeltaOrder::Local => prev.conjugate() * curr,
        DeltaOrder::Global => curr * prev.conjugate(),
    };
    // Unit inputs never produce a zero product.
    canonicalize(d, Some(Quaternion::IDENTITY)).unwrap_or(Quaternion::IDENTITY)
}

/// Decompose `q = twist * swing`, where `twist` rotates about `axis` and
/// `swing` rotates about an axis orthogonal to it.
///
/// When `q` has no component about `axis` (a pure half-turn orthogonal to it)
/// the twist is the identity.
pub fn swing_twist(q: Quaternion, axis: Vec3) -> (Quaternion, Quaternion) {
    let p = axis.scale(q.vector().dot(axis));
    let t = Quaternion::new(p.x, p.y, p.z, q.w);
    let n = t.norm();
    let twist = if n < 1e-15 {
        Quaternion::IDENTITY
    } else {
        t.scale(1.0 / n)
    };
    let swing = twist.conjugate() * q;
    (twist, swing)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn deg(d: f64) -> f64 {
        d * PI / 180.0
    }

    fn close(a: Quaternion, b: Quaternion, tol: f64) -> bool {
        let d1 = (a.x - b.x).abs().max((a.y - b.y).abs()).max((a.z - b.z).abs()).max((a.w - b.w).abs());
        let d2 = (a.x + b.x).abs().max((a.y + b.y).abs()).max((a.z + b.z).abs()).max((a.w + b.w).abs());
        d1.min(d2) < tol
    }

    #[test]
    fn canonicalize_flips_negative_identity() {
        let q = canonicalize(Quaternion::new(0.0, 0.0, 0.0, -1.0), None).unwrap();
        assert_eq!(q, Quaternion::IDENTITY);
    }

    #[test]
    fn canonicalize_normalizes() {
        let q = canonicalize(Quaternion::new(0.7, 0.0, 0.0, 0.7), None).unwrap();
        assert_abs_diff_eq!(q.norm(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn canonicalize_against_reference() {
        let reference = Quaternion::new(0.0, 0.0, 0.0, 1.0);
        let q = Quaternion::new(0.0, (1.0f64 - 0.09).sqrt(), 0.0, -0.3);
        let c = canonicalize(q, Some(reference)).unwrap();
        assert_abs_diff_eq!(c.dot(reference), 0.3, epsilon = 1e-12);
    }

    #[test]
    fn canonicalize_tie_uses_first_nonzero() {
        let c = canonicalize(Quaternion::new(0.0, -1.0, 0.0, 0.0), None).unwrap();
        assert_eq!(c, Quaternion::new(0.0, 1.0, 0.0, 0.0));
    }

    #[test]
    fn canonicalize_rejects_zero() {
        assert!(matches!(
            canonicalize(Quaternion::new(0.0, 0.0, 0.0, 0.0), None),
            Err(Error::DegenerateRotation { .. })
        ));
    }

    #[test]
    fn delta_of_equal_is_identity() {
        let q = Quaternion::from_axis_angle(Vec3::new(0.3, -1.0, 2.0), 1.1);
        assert_eq!(quat_delta(q, q), Quaternion::IDENTITY);
    }

    #[test]
    fn delta_from_identity() {
        let q = Quaternion::from_axis_angle(Vec3::Y, FRAC_PI_2);
        assert!(close(quat_delta(Quaternion::IDENTITY, q), q, 1e-15));
    }

    #[test]
    fn delta_about_common_axis() {
        let a = Quaternion::from_axis_angle(Vec3::X, deg(30.0));
        let b = Quaternion::from_axis_angle(Vec3::X, deg(75.0));
        let d = quat_delta(a, b);
        assert!(close(d, Quaternion::from_axis_angle(Vec3::X, deg(45.0)), 1e-9));
    }

    #[test]
    fn swing_twist_pure_cases() {
        let yaw = Quaternion::from_axis_angle(Vec3::Y, deg(40.0));
        let (t, s) = swing_twist(yaw, Vec3::Y);
        assert!(close(t, yaw, 1e-12));
        assert!(close(s, Quaternion::IDENTITY, 1e-12));

        let pitch = Quaternion::from_axis_angle(Vec3::X, deg(25.0));
        let (t, s) = swing_twist(pitch, Vec3::Y);
        assert!(close(t, Quaternion::IDENTITY, 1e-12));
        assert!(close(s, pitch, 1e-12));
    }

    #[test]
    fn swing_twist_orthogonal_half_turn() {
        let q = Quaternion::from_axis_angle(Vec3::X, PI);
        let (t, s) = swing_twist(q, Vec3::Y);
        assert_eq!(t, Quaternion::IDENTITY);
        assert!(close(s, q, 1e-12));
    }

    #[test]
    fn slerp_midpoint() {
        let a = Quaternion::IDENTITY;
        let b = Quaternion::from_axis_angle(Vec3::Y, FRAC_PI_2);
        let m = a.slerp(b, 0.5);
        assert!(close(m, Quaternion::from_axis_angle(Vec3::Y, deg(45.0)), 1e-12));
    }

    #[test]
    fn rotate_quarter_turn() {
        let q = Quaternion::from_axis_angle(Vec3::Y, FRAC_PI_2);
        let v = q.rotate(Vec3::X);
        assert_abs_diff_eq!(v.x, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(v.z, -1.0, epsilon = 1e-15);
    }
}
