//! Prediction/correction recursion of the extended Kalman filter.

use nalgebra::{Matrix2, Matrix3, Matrix3x2, Vector2, Vector3};

use crate::adaptation::NoiseModel;
use crate::error::{Error, Result};
use crate::robot::{
    measurement, measurement_jacobians, process_jacobians, state_transition, wrap, MotionIncrement,
    Pose,
};
use crate::scalar::{lit, Real};

/// Pose estimate with its 3x3 error covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterState<T> {
    pub estimate: Pose<T>,
    pub covariance: Matrix3<T>,
}

impl<T: Real> FilterState<T> {
    pub fn new(estimate: Pose<T>, covariance: Matrix3<T>) -> Self {
        Self {
            estimate,
            covariance,
        }
    }
}

/// Linearization used by the prediction that produced a prior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linearization<T> {
    pub a: Matrix3<T>,
    pub w: Matrix3x2<T>,
    /// Posterior covariance the prediction started from.
    pub previous_covariance: Matrix3<T>,
}

/// Per-step quantities consumed by the noise adaptation layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDiagnostics<T> {
    /// `z - h(prior, 0)`, heading component wrapped.
    pub residual: Vector3<T>,
    pub kalman_gain: Matrix3<T>,
    pub prior: FilterState<T>,
    /// Present only when produced by [`step`].
    pub linearization: Option<Linearization<T>>,
}

pub(crate) fn symmetrize<T: Real>(m: &Matrix3<T>) -> Matrix3<T> {
    (m + m.transpose()) * lit::<T>(0.5)
}

fn check_q<T: Real>(q: &Matrix2<T>) -> Result<()> {
    let tol = lit::<T>(1e-12) * (q[(0, 0)].abs() + q[(1, 1)].abs() + T::one());
    let symmetric = (q[(0, 1)] - q[(1, 0)]).abs() <= tol;
    let psd = q[(0, 0)] >= -tol && q[(1, 1)] >= -tol && q.determinant() >= -tol;
    if symmetric && psd && q.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NotPsd("process noise Q"))
    }
}

/// Time update: propagates the estimate through the noiseless process model
/// and the covariance through `A P A^T + W Q W^T`.
pub fn predict<T: Real>(
    state: &FilterState<T>,
    m: &MotionIncrement<T>,
    q: &Matrix2<T>,
) -> Result<FilterState<T>> {
    predict_linearized(state, m, q).map(|(s, _)| s)
}

fn predict_linearized<T: Real>(
    state: &FilterState<T>,
    m: &MotionIncrement<T>,
    q: &Matrix2<T>,
) -> Result<(FilterState<T>, Linearization<T>)> {
    check_q(q)?;
    let (a, w) = process_jacobians(&state.estimate, m);
    let p = &state.covariance;
    let cov = a * p * a.transpose() + w * q * w.transpose();
    let prior = FilterState {
        estimate: state_transition(&state.estimate, m, &Vector2::zeros()),
        covariance: symmetrize(&cov),
    };
    Ok((
        prior,
        Linearization {
            a,
            w,
            previous_covariance: *p,
        },
    ))
}

/// Measurement update. The innovation covariance is factored with Cholesky;
/// a non positive definite innovation is reported as singular.
pub fn correct<T: Real>(
    prior: &FilterState<T>,
    z: &Vector3<T>,
    r: &Matrix3<T>,
) -> Result<(FilterState<T>, StepDiagnostics<T>)> {
    if r.cholesky().is_none() {
        return Err(Error::NotPsd("measurement noise R"));
    }
    let (h, v) = measurement_jacobians(&prior.estimate);
    let p = &prior.covariance;
    let innovation = h * p * h.transpose() + v * r * v.transpose();
    let chol = innovation.cholesky().ok_or(Error::SingularInnovation)?;
    // K = P H^T S^-1  <=>  K^T = S^-1 H P (S and P symmetric)
    let gain = chol.solve(&(h * p)).transpose();
    if gain.iter().any(|g| !g.is_finite()) {
        return Err(Error::SingularInnovation);
    }

    let predicted = measurement(&prior.estimate, &Vector3::zeros());
    let mut residual = z - predicted;
    residual[2] = wrap(residual[2]);

    let x = prior.estimate.to_vector() + gain * residual;
    let cov = (Matrix3::identity() - gain * h) * p;
    let posterior = FilterState {
        estimate: Pose::new(x[0], x[1], x[2]),
        covariance: symmetrize(&cov),
    };
    Ok((
        posterior,
        StepDiagnostics {
            residual,
            kalman_gain: gain,
            prior: *prior,
            linearization: None,
        },
    ))
}

/// One full filter cycle: `correct(predict(state, m, Q), z, R)`.
pub fn step<T: Real>(
    state: &FilterState<T>,
    m: &MotionIncrement<T>,
    z: &Vector3<T>,
    noise: &NoiseModel<T>,
) -> Result<(FilterState<T>, StepDiagnostics<T>)> {
    let (prior, lin) = predict_linearized(state, m, noise.q())?;
    let (posterior, mut diag) = correct(&prior, z, noise.r())?;
    diag.linearization = Some(lin);
    Ok((posterior, diag))
}

/// Normalized estimation error squared of `truth` under `state`.
pub fn nees<T: Real>(state: &FilterState<T>, truth: &Pose<T>) -> Option<T> {
    let e = truth.error_to(&state.estimate);
    let chol = state.covariance.cholesky()?;
    Some(e.dot(&chol.solve(&e)))
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    use super::*;
    use crate::presets;
    use crate::robot::RobotGeometry;

    fn geom() -> RobotGeometry<f64> {
        RobotGeometry::new(0.05, 0.6, 1.0, 500.0).unwrap()
    }

    fn min_eig(m: &Matrix3<f64>) -> f64 {
        m.symmetric_eigenvalues().min()
    }

    fn asym(m: &Matrix3<f64>) -> f64 {
        (m - m.transpose()).abs().max()
    }

    #[test]
    fn predict_without_motion_is_identity() {
        let s = FilterState::new(
            Pose::new(1.0, 2.0, 0.3),
            Matrix3::from_diagonal(&Vector3::new(0.1, 0.2, 0.3)),
        );
        let out = predict(&s, &MotionIncrement::zero(), &Matrix2::zeros()).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn predict_from_zero_covariance_maps_q() {
        let s = FilterState::new(Pose::origin(), Matrix3::zeros());
        let m = MotionIncrement::from_body(1.0, 0.0, &geom());
        let q = Matrix2::new(0.004, 0.0, 0.0, 0.0003);
        let out = predict(&s, &m, &q).unwrap();
        assert_relative_eq!(out.covariance[(0, 0)], 0.004);
        assert_relative_eq!(out.covariance[(2, 2)], 0.0003);
        let (_, w) = process_jacobians(&s.estimate, &m);
        assert_relative_eq!(out.covariance, w * q * w.transpose(), epsilon = 1e-18);
    }

    #[test]
    fn predict_rejects_indefinite_q() {
        let s = FilterState::new(Pose::origin(), Matrix3::identity());
        let m = MotionIncrement::zero();
        assert!(matches!(
            predict(&s, &m, &Matrix2::new(-1.0, 0.0, 0.0, 1.0)),
            Err(Error::NotPsd(_))
        ));
        assert!(predict(&s, &m, &Matrix2::new(1.0, 2.0, 2.0, 1.0)).is_err());
    }

    #[test]
    fn correct_with_zero_residual_keeps_estimate() {
        let prior = FilterState::new(Pose::new(0.4, -1.0, 2.9), Matrix3::identity() * 0.3);
        let z = prior.estimate.to_vector();
        let (post, diag) = correct(&prior, &z, &(Matrix3::identity() * 0.01)).unwrap();
        assert_eq!(post.estimate, prior.estimate);
        assert_eq!(diag.residual, Vector3::zeros());
    }

    #[test]
    fn correct_unit_case_halves_covariance() {
        let prior = FilterState::new(Pose::origin(), Matrix3::identity());
        let (post, diag) =
            correct(&prior, &Vector3::new(1.0, 1.0, 0.5), &Matrix3::identity()).unwrap();
        assert_relative_eq!(diag.kalman_gain, Matrix3::identity() * 0.5, epsilon = 1e-15);
        assert_relative_eq!(post.covariance, Matrix3::identity() * 0.5, epsilon = 1e-15);
        assert_relative_eq!(post.estimate.x, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn correct_ignores_huge_noise_measurements() {
        let prior = FilterState::new(Pose::new(1.0, 1.0, 0.1), Matrix3::identity() * 0.05);
        let (post, _) = correct(
            &prior,
            &Vector3::new(5.0, -5.0, 2.0),
            &(Matrix3::identity() * 1e12),
        )
        .unwrap();
        assert_relative_eq!(
            post.estimate.to_vector(),
            prior.estimate.to_vector(),
            epsilon = 1e-6
        );
        assert_relative_eq!(post.covariance, prior.covariance, epsilon = 1e-6);
    }

    #[test]
    fn correct_reports_singular_innovation() {
        let prior = FilterState::new(Pose::origin(), Matrix3::zeros());
        let r = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 0.0));
        assert!(correct(&prior, &Vector3::zeros(), &r).is_err());
    }

    #[test]
    fn heading_residual_is_wrapped() {
        let pi = std::f64::consts::PI;
        let prior = FilterState::new(Pose::new(0.0, 0.0, pi - 0.05), Matrix3::identity() * 0.01);
        let z = Vector3::new(0.0, 0.0, -pi + 0.05);
        let (post, diag) = correct(&prior, &z, &(Matrix3::identity() * 0.01)).unwrap();
        assert_relative_eq!(diag.residual[2], 0.1, epsilon = 1e-12);
        assert!(post.estimate.theta > -pi && post.estimate.theta <= pi);
        assert_relative_eq!(post.estimate.theta.abs(), pi, epsilon = 1e-12);
    }

    #[test]
    fn step_is_predict_then_correct() {
        let s = FilterState::new(Pose::new(0.1, 0.2, 0.3), Matrix3::identity() * 1e-3);
        let m = MotionIncrement::from_body(0.1, 0.02, &geom());
        let z = Vector3::new(0.2, 0.25, 0.31);
        let noise = presets::noise_model(0.02, 1f64.to_radians());
        let (a, da) = step(&s, &m, &z, &noise).unwrap();
        let prior = predict(&s, &m, noise.q()).unwrap();
        let (b, db) = correct(&prior, &z, noise.r()).unwrap();
        assert_eq!(a, b);
        assert_eq!(da.residual, db.residual);
        assert_eq!(da.prior, prior);
        assert!(da.linearization.is_some());
    }

    #[test]
    fn zero_motion_matching_measurement_is_fixed_point() {
        let s = FilterState::new(Pose::new(1.0, -2.0, 0.7), Matrix3::identity() * 1e-2);
        let noise = presets::noise_model(0.02, 0.01);
        let (out, _) = step(
            &s,
            &MotionIncrement::zero(),
            &s.estimate.to_vector(),
            &noise,
        )
        .unwrap();
        assert_eq!(out.estimate, s.estimate);
    }

    #[test]
    fn nees_of_exact_estimate_is_zero() {
        let s = FilterState::new(Pose::new(1.0, 2.0, 0.0), Matrix3::identity());
        assert_eq!(nees(&s, &s.estimate), Some(0.0));
        let off = Pose::new(2.0, 2.0, 0.0);
        assert_relative_eq!(nees(&s, &off).unwrap(), 1.0);
    }

    #[test]
    fn runs_in_f32() {
        let s = FilterState::new(Pose::<f32>::origin(), Matrix3::identity());
        let g = RobotGeometry::new(0.05f32, 0.6, 1.0, 500.0).unwrap();
        let prior = predict(
            &s,
            &MotionIncrement::from_body(0.1, 0.01, &g),
            &Matrix2::identity(),
        )
        .unwrap();
        let (post, _) =
            correct(&prior, &Vector3::new(0.1, 0.0, 0.0), &Matrix3::identity()).unwrap();
        assert!(post.covariance.trace() < prior.covariance.trace());
    }

    proptest! {
        #[test]
        fn scalar_gain_formula(c in 1e-4f64..1e3, d in 1e-4f64..1e3) {
            let prior = FilterState::new(Pose::origin(), Matrix3::identity() * d);
            let (_, diag) = correct(&prior, &Vector3::zeros(), &(Matrix3::identity() * c)).unwrap();
            let expected = Matrix3::identity() * (d / (c + d));
            prop_assert!((diag.kalman_gain - expected).abs().max() < 1e-12);
        }

        #[test]
        fn correction_never_increases_trace(
            l in proptest::collection::vec(-1.0f64..1.0, 6),
            rd in proptest::collection::vec(1e-4f64..1.0, 3),
            z in proptest::collection::vec(-2.0f64..2.0, 3),
        ) {
            let lower = Matrix3::new(l[0].abs() + 0.01, 0.0, 0.0, l[1], l[2].abs() + 0.01, 0.0, l[3], l[4], l[5].abs() + 0.01);
            let p = lower * lower.transpose();
            let prior = FilterState::new(Pose::origin(), p);
            let r = Matrix3::from_diagonal(&Vector3::new(rd[0], rd[1], rd[2]));
            let (post, _) = correct(&prior, &Vector3::new(z[0], z[1], z[2]), &r).unwrap();
            prop_assert!(post.covariance.trace() <= p.trace() + 1e-12);
            prop_assert!(asym(&post.covariance) < 1e-12);
            prop_assert!(min_eig(&post.covariance) >= -1e-9);
        }

        #[test]
        fn predicted_covariance_stays_symmetric_psd(
            th in -3.1f64..3.1, ds in -0.5f64..0.5, dth in -0.3f64..0.3,
            q0 in 0.0f64..0.01, q1 in 0.0f64..0.01, pd in 0.0f64..1.0,
        ) {
            let s = FilterState::new(Pose::new(0.0, 0.0, th), Matrix3::identity() * pd);
            let out = predict(&s, &MotionIncrement::from_body(ds, dth, &geom()), &Matrix2::new(q0, 0.0, 0.0, q1)).unwrap();
            prop_assert!(asym(&out.covariance) < 1e-12);
            prop_assert!(min_eig(&out.covariance) >= -1e-9);
        }
    }
}
