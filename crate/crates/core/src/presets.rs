//! Reference parameter sets for the differential-drive test robot.

use nalgebra::Vector3;

use crate::adaptation::NoiseModel;
use crate::fuzzy::FisParams;
use crate::robot::RobotGeometry;
use crate::scalar::{lit, Real};

/// Default measurement variances `(x, y, theta)`.
pub const MEASUREMENT_VARIANCES: [f64; 3] = [0.01, 0.01, 0.018];

/// Default lower bound for adapted measurement variances.
pub const R_FLOOR: f64 = 1e-6;

/// Default residual window length.
pub const WINDOW: usize = 16;

/// Default initial covariance diagonal.
pub const P0_DIAGONAL: [f64; 3] = [1e-4, 1e-4, 1e-4];

/// Wheel diameter 0.05 m, wheel base 0.6 m, direct drive, 500 ppr encoders.
pub fn geometry<T: Real>() -> RobotGeometry<T> {
    RobotGeometry {
        wheel_diameter: lit(0.05),
        wheel_base: lit(0.6),
        gear_ratio: T::one(),
        encoder_resolution: lit(500.0),
    }
}

/// `Q = diag(sigma_ds^2, sigma_dtheta^2)` with the default measurement variances.
pub fn noise_model<T: Real>(sigma_ds: T, sigma_dtheta: T) -> NoiseModel<T> {
    let r = MEASUREMENT_VARIANCES.map(lit::<T>);
    NoiseModel::new(
        [sigma_ds * sigma_ds, sigma_dtheta * sigma_dtheta],
        Vector3::new(r[0], r[1], r[2]),
        lit(R_FLOOR),
    )
    .expect("preset noise model is valid")
}

/// Membership parameters before training.
///
/// The zero `sigma1` is raised to the width floor and `a3 = 0` leaves the
/// decrease consequent constant.
pub fn initial_fis<T: Real>() -> FisParams<T> {
    FisParams::from_array(
        [
            -0.16, -17.0, 0.1, 13.0, 0.0, -100.0, 0.1, 23.0, 0.03, 0.0, 0.03, 0.03,
        ]
        .map(lit::<T>),
    )
}

/// Membership parameters obtained after training for the reference robot.
pub fn learned_fis<T: Real>() -> FisParams<T> {
    FisParams::from_array(
        [
            -0.1073, -17.0995, 0.1515, 13.8108, -0.06552, -143.0, 0.1030, 24.2000, 0.0571, 0.1779,
            0.0467, 0.0620,
        ]
        .map(lit::<T>),
    )
}
