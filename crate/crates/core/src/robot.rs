//! Differential-drive kinematics, dead reckoning and the state-space model.
//!
//! The state is the planar pose `[x, y, theta]`. Odometry arrives as a
//! [`MotionIncrement`] per sampling period; process noise enters additively
//! on `(ds, dtheta)`, and the measurement is a direct (noisy) observation of
//! the full pose.

use nalgebra::{Matrix3, Matrix3x2, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::scalar::{lit, Real};

/// Fixed mechanical parameters of the robot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobotGeometry<T> {
    /// Wheel diameter (m).
    pub wheel_diameter: T,
    /// Distance between the two drive wheels (m).
    pub wheel_base: T,
    /// Reduction gear ratio between motor and wheel.
    pub gear_ratio: T,
    /// Encoder pulses per revolution.
    pub encoder_resolution: T,
}

impl<T: Real> RobotGeometry<T> {
    pub fn new(
        wheel_diameter: T,
        wheel_base: T,
        gear_ratio: T,
        encoder_resolution: T,
    ) -> Result<Self> {
        let geom = Self {
            wheel_diameter,
            wheel_base,
            gear_ratio,
            encoder_resolution,
        };
        geom.validate()?;
        Ok(geom)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("wheel_diameter", self.wheel_diameter),
            ("wheel_base", self.wheel_base),
            ("gear_ratio", self.gear_ratio),
            ("encoder_resolution", self.encoder_resolution),
        ] {
            if !(v.is_finite() && v > T::zero()) {
                return Err(Error::invalid(
                    name,
                    format!("must be finite and > 0, got {v}"),
                ));
            }
        }
        Ok(())
    }

    /// Linear wheel travel per encoder pulse: `pi * R / (n * C_e)`.
    pub fn conversion_factor(&self) -> T {
        T::pi() * self.wheel_diameter / (self.gear_ratio * self.encoder_resolution)
    }

    /// Per-wheel displacement for a pair of pulse counts.
    pub fn wheel_displacements(&self, ticks: EncoderTicks) -> (T, T) {
        let cm = self.conversion_factor();
        (
            cm * lit::<T>(ticks.left as f64),
            cm * lit::<T>(ticks.right as f64),
        )
    }
}

/// Encoder pulse counts accumulated over one sampling period.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EncoderTicks {
    pub left: i64,
    pub right: i64,
}

/// Odometry increment over one sampling period.
///
/// `ds = (ds_left + ds_right) / 2` and `dtheta = (ds_right - ds_left) / L`
/// hold for values built through the constructors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionIncrement<T> {
    pub ds: T,
    pub dtheta: T,
    pub ds_left: T,
    pub ds_right: T,
}

impl<T: Real> MotionIncrement<T> {
    /// Builds the increment from per-wheel displacements.
    pub fn from_wheels(ds_left: T, ds_right: T, geom: &RobotGeometry<T>) -> Self {
        let half: T = lit(0.5);
        Self {
            ds: (ds_left + ds_right) * half,
            dtheta: (ds_right - ds_left) / geom.wheel_base,
            ds_left,
            ds_right,
        }
    }

    /// Builds the increment from body-frame travel and rotation, recovering
    /// the wheel displacements that produce them.
    pub fn from_body(ds: T, dtheta: T, geom: &RobotGeometry<T>) -> Self {
        let half_turn = dtheta * geom.wheel_base * lit(0.5);
        Self {
            ds,
            dtheta,
            ds_left: ds - half_turn,
            ds_right: ds + half_turn,
        }
    }

    pub fn zero() -> Self {
        Self {
            ds: T::zero(),
            dtheta: T::zero(),
            ds_left: T::zero(),
            ds_right: T::zero(),
        }
    }

    /// Checks the wheel/body consistency relations within `tol`.
    pub fn is_consistent(&self, geom: &RobotGeometry<T>, tol: T) -> bool {
        let ds = (self.ds_left + self.ds_right) * lit(0.5);
        let dtheta = (self.ds_right - self.ds_left) / geom.wheel_base;
        (ds - self.ds).abs() <= tol && (dtheta - self.dtheta).abs() <= tol
    }
}

/// Convenience: ticks straight to a motion increment.
pub fn motion_from_ticks<T: Real>(
    ticks: EncoderTicks,
    geom: &RobotGeometry<T>,
) -> MotionIncrement<T> {
    let (l, r) = geom.wheel_displacements(ticks);
    MotionIncrement::from_wheels(l, r, geom)
}

/// Planar pose. `theta` lies in `(-pi, pi]` after every operation in this crate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose<T> {
    pub x: T,
    pub y: T,
    pub theta: T,
}

impl<T: Real> Pose<T> {
    pub fn new(x: T, y: T, theta: T) -> Self {
        Self {
            x,
            y,
            theta: wrap(theta),
        }
    }

    pub fn origin() -> Self {
        Self::new(T::zero(), T::zero(), T::zero())
    }

    pub fn to_vector(&self) -> Vector3<T> {
        Vector3::new(self.x, self.y, self.theta)
    }

    pub fn from_vector(v: &Vector3<T>) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    /// `self - other` with the heading difference wrapped.
    pub fn error_to(&self, other: &Pose<T>) -> Vector3<T> {
        Vector3::new(
            self.x - other.x,
            self.y - other.y,
            wrap(self.theta - other.theta),
        )
    }
}

/// Wraps an angle into `(-pi, pi]`, rejecting non-finite input.
pub fn wrap_angle<T: Real>(theta: T) -> Result<T> {
    if !theta.is_finite() {
        return Err(Error::NonFinite("angle"));
    }
    Ok(wrap(theta))
}

/// Infallible wrap used on internal paths; NaN passes through unchanged.
pub(crate) fn wrap<T: Real>(theta: T) -> T {
    if !theta.is_finite() {
        return theta;
    }
    let pi = T::pi();
    let two_pi = T::two_pi();
    if theta > -pi && theta <= pi {
        return theta;
    }
    let mut r = theta - two_pi * ((theta + pi) / two_pi).floor();
    if r <= -pi {
        r += two_pi;
    }
    if r > pi {
        r -= two_pi;
    }
    r
}

/// Endpoint-angle dead-reckoning update.
pub fn dead_reckon_step<T: Real>(p: &Pose<T>, m: &MotionIncrement<T>) -> Pose<T> {
    advance(p, m.ds, m.dtheta)
}

fn advance<T: Real>(p: &Pose<T>, ds: T, dtheta: T) -> Pose<T> {
    let heading = p.theta + dtheta;
    Pose {
        x: p.x + ds * heading.cos(),
        y: p.y + ds * heading.sin(),
        theta: wrap(heading),
    }
}

/// Process model `f(x, u, w)` with additive noise `w = (w_ds, w_dtheta)`.
pub fn state_transition<T: Real>(p: &Pose<T>, m: &MotionIncrement<T>, w: &Vector2<T>) -> Pose<T> {
    advance(p, m.ds + w[0], m.dtheta + w[1])
}

/// Measurement model `h(x, v)`: the pose observed with additive noise.
pub fn measurement<T: Real>(p: &Pose<T>, v: &Vector3<T>) -> Vector3<T> {
    Vector3::new(p.x + v[0], p.y + v[1], wrap(p.theta + v[2]))
}

/// Jacobians of the process model with respect to the state (`A`, 3x3) and
/// the process noise (`W`, 3x2), evaluated at zero noise.
pub fn process_jacobians<T: Real>(
    p: &Pose<T>,
    m: &MotionIncrement<T>,
) -> (Matrix3<T>, Matrix3x2<T>) {
    let heading = p.theta + m.dtheta;
    let (s, c) = heading.sin_cos();
    let (zero, one) = (T::zero(), T::one());
    #[rustfmt::skip]
    let a = Matrix3::new(
        one, zero, -m.ds * s,
        zero, one, m.ds * c,
        zero, zero, one,
    );
    #[rustfmt::skip]
    let w = Matrix3x2::new(
        c, -m.ds * s,
        s, m.ds * c,
        zero, one,
    );
    (a, w)
}

/// Jacobians of the measurement model: `H` w.r.t. the state and `V` w.r.t.
/// the measurement noise. Both are the identity for direct pose observation.
pub fn measurement_jacobians<T: Real>(_p: &Pose<T>) -> (Matrix3<T>, Matrix3<T>) {
    (Matrix3::identity(), Matrix3::identity())
}
