use serde::{Deserialize, Serialize};

/// A planar rigid motion: rotation by `theta` degrees about a fixed center,
/// followed by translation by `(tx, ty)` pixels.
///
/// `theta` is kept normalized to `[0, 360)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub tx: f64,
    pub ty: f64,
    pub theta: f64,
}

pub(crate) fn wrap_degrees(theta: f64) -> f64 {
    let t = theta.rem_euclid(360.0);
    // rem_euclid can round up to exactly 360.0 for tiny negative inputs
    if t >= 360.0 {
        0.0
    } else {
        t
    }
}

/// Signed smallest difference `a - b` on the circle, in `(-180, 180]`.
pub fn angle_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    if d > 180.0 {
        d - 360.0
    } else {
        d
    }
}

impl Default for Pose2 {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Pose2 {
    pub const IDENTITY: Pose2 = Pose2 {
        tx: 0.0,
        ty: 0.0,
        theta: 0.0,
    };

    pub fn new(tx: f64, ty: f64, theta: f64) -> Self {
        Self {
            tx,
            ty,
            theta: wrap_degrees(theta),
        }
    }

    fn rotate(theta: f64, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = theta.to_radians().sin_cos();
        (c * x - s * y, s * x + c * y)
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose2) -> Pose2 {
        let (rx, ry) = Self::rotate(self.theta, other.tx, other.ty);
        Pose2::new(self.tx + rx, self.ty + ry, self.theta + other.theta)
    }

    pub fn inverse(&self) -> Pose2 {
        let (rx, ry) = Self::rotate(-self.theta, self.tx, self.ty);
        Pose2::new(-rx, -ry, -self.theta)
    }

    /// Maps a point relative to the rotation center `(cx, cy)`.
    pub fn apply(&self, cx: f64, cy: f64, x: f64, y: f64) -> (f64, f64) {
        let (rx, ry) = Self::rotate(self.theta, x - cx, y - cy);
        (rx + cx + self.tx, ry + cy + self.ty)
    }

    /// Field-wise comparison, with `theta` compared on the circle.
    pub fn approx_eq(&self, other: &Pose2, tol: f64) -> bool {
        (self.tx - other.tx).abs() <= tol
            && (self.ty - other.ty).abs() <= tol
            && angle_diff(self.theta, other.theta).abs() <= tol
    }

    /// Translation magnitude in pixels.
    pub fn translation_norm(&self) -> f64 {
        self.tx.hypot(self.ty)
    }

    /// Translation direction in degrees, `[0, 360)`.
    pub fn translation_direction(&self) -> f64 {
        wrap_degrees(self.ty.atan2(self.tx).to_degrees())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pose() -> impl Strategy<Value = Pose2> {
        (-50.0..50.0f64, -50.0..50.0f64, 0.0..360.0f64).prop_map(|(x, y, t)| Pose2::new(x, y, t))
    }

    proptest! {
        #[test]
        fn associativity(a in pose(), b in pose(), c in pose()) {
            let l = a.compose(&b.compose(&c));
            let r = a.compose(&b).compose(&c);
            prop_assert!(l.approx_eq(&r, 1e-9), "{l:?} vs {r:?}");
        }

        #[test]
        fn identity_is_neutral(a in pose()) {
            prop_assert!(a.compose(&Pose2::IDENTITY).approx_eq(&a, 1e-9));
            prop_assert!(Pose2::IDENTITY.compose(&a).approx_eq(&a, 1e-9));
        }

        #[test]
        fn inverse_cancels(a in pose()) {
            prop_assert!(a.compose(&a.inverse()).approx_eq(&Pose2::IDENTITY, 1e-9));
            prop_assert!(a.inverse().compose(&a).approx_eq(&Pose2::IDENTITY, 1e-9));
        }

        #[test]
        fn inverse_is_unique(a in pose(), b in pose()) {
            // any b with a∘b = id must equal a⁻¹
            let b_star = a.inverse();
            let residual = a.compose(&b);
            let implied = b_star.compose(&residual);
            prop_assert!(implied.approx_eq(&b, 1e-9));
        }

        #[test]
        fn apply_matches_compose(a in pose(), b in pose(), x in -20.0..20.0f64, y in -20.0..20.0f64) {
            let (x1, y1) = b.apply(3.0, 4.0, x, y);
            let (x2, y2) = a.apply(3.0, 4.0, x1, y1);
            let (x3, y3) = a.compose(&b).apply(3.0, 4.0, x, y);
            prop_assert!((x2 - x3).abs() < 1e-9 && (y2 - y3).abs() < 1e-9);
        }

        #[test]
        fn theta_stays_normalized(a in pose(), b in pose()) {
            let c = a.compose(&b);
            prop_assert!((0.0..360.0).contains(&c.theta));
            prop_assert!((0.0..360.0).contains(&a.inverse().theta));
        }
    }

    #[test]
    fn wraps_negative_zero_edge() {
        assert_eq!(wrap_degrees(-1e-18), 0.0);
        assert_eq!(wrap_degrees(360.0), 0.0);
        assert_eq!(wrap_degrees(-90.0), 270.0);
    }

    #[test]
    fn direction_of_axes() {
        assert!((Pose2::new(1.0, 0.0, 0.0).translation_direction()).abs() < 1e-12);
        assert!((Pose2::new(0.0, 2.0, 0.0).translation_direction() - 90.0).abs() < 1e-12);
        assert!((Pose2::new(0.0, -2.0, 0.0).translation_direction() - 270.0).abs() < 1e-12);
    }
}
