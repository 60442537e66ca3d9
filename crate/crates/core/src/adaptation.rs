//! Residual covariance matching.
//!
//! Each step the filter's predicted residual covariance `S` is compared with
//! the empirical covariance `C` of the last `N` residuals. The diagonal
//! mismatch `D = S - C` is fed channel by channel through the fuzzy system,
//! and the resulting adjustment is added to the noise diagonal.

use std::collections::VecDeque;

use nalgebra::{Matrix2, Matrix3, Vector3};

use crate::ekf::StepDiagnostics;
use crate::error::{Error, Result};
use crate::fuzzy::{infer, FisParams};
use crate::scalar::{lit, Real};

/// Fixed-capacity FIFO of residual vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualWindow<T> {
    capacity: usize,
    entries: VecDeque<Vector3<T>>,
}

impl<T: Real> ResidualWindow<T> {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid("adaptation.window", "must be at least 1"));
        }
        Ok(Self {
            capacity,
            entries: VecDeque::with_capacity(capacity),
        })
    }

    pub fn push(&mut self, r: Vector3<T>) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(r);
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() == self.capacity
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &Vector3<T>> {
        self.entries.iter()
    }
}

/// Process and measurement noise covariances used by the filter.
///
/// Both are diagonal. Measurement variances never drop below `r_floor`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel<T> {
    q: Matrix2<T>,
    r: Matrix3<T>,
    r_floor: T,
}

impl<T: Real> NoiseModel<T> {
    pub fn new(q_diag: [T; 2], r_diag: Vector3<T>, r_floor: T) -> Result<Self> {
        if !(r_floor.is_finite() && r_floor > T::zero()) {
            return Err(Error::invalid(
                "adaptation.r_floor",
                "must be finite and > 0",
            ));
        }
        for (name, v) in [("sigma_ds^2", q_diag[0]), ("sigma_dtheta^2", q_diag[1])] {
            if !(v.is_finite() && v >= T::zero()) {
                return Err(Error::invalid(
                    name,
                    "process variance must be finite and >= 0",
                ));
            }
        }
        if r_diag.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("R", "measurement variances must be finite"));
        }
        Ok(Self {
            q: Matrix2::new(q_diag[0], T::zero(), T::zero(), q_diag[1]),
            r: Matrix3::from_diagonal(&r_diag.map(|v| v.max(r_floor))),
            r_floor,
        })
    }

    pub fn q(&self) -> &Matrix2<T> {
        &self.q
    }

    pub fn r(&self) -> &Matrix3<T> {
        &self.r
    }

    pub fn r_diagonal(&self) -> Vector3<T> {
        self.r.diagonal()
    }

    pub fn r_floor(&self) -> T {
        self.r_floor
    }

    /// Adds `delta_r` to the measurement variances, flooring each at `r_floor`.
    pub fn apply_adjustment(&self, delta_r: &Vector3<T>) -> Self {
        let mut out = self.clone();
        for j in 0..3 {
            out.r[(j, j)] = (self.r[(j, j)] + delta_r[j]).max(self.r_floor);
        }
        out
    }

    /// Adds `delta_q` to the process variances, flooring each at `r_floor`.
    pub fn apply_q_adjustment(&self, delta_q: [T; 2]) -> Self {
        let mut out = self.clone();
        for (j, dq) in delta_q.into_iter().enumerate() {
            out.q[(j, j)] = (self.q[(j, j)] + dq).max(self.r_floor);
        }
        out
    }
}

/// Diagonal covariance mismatch with the two covariances it came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MismatchSignal<T> {
    pub d: Vector3<T>,
    pub s: Matrix3<T>,
    pub c_hat: Matrix3<T>,
}

/// Which noise matrix the adaptation loop adjusts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AdaptMode {
    /// Adjust `R`, keeping `Q` fixed.
    #[default]
    R,
    /// Adjust `Q` from the propagated residual covariance. The three mismatch
    /// channels are collapsed onto the two process variances: the mean of the
    /// position channels drives `sigma_ds^2`, the heading channel `sigma_dtheta^2`.
    QExperimental,
}

/// `S = H P^- H^T + R`.
pub fn present_covariance_r_mode<T: Real>(
    h: &Matrix3<T>,
    p_prior: &Matrix3<T>,
    r: &Matrix3<T>,
) -> Matrix3<T> {
    h * p_prior * h.transpose() + r
}

/// `S = H (A P A^T + Q_mapped) H^T + R` where `Q_mapped = W Q W^T`.
pub fn present_covariance_q_mode<T: Real>(
    h: &Matrix3<T>,
    a: &Matrix3<T>,
    p: &Matrix3<T>,
    q_mapped: &Matrix3<T>,
    r: &Matrix3<T>,
) -> Matrix3<T> {
    h * (a * p * a.transpose() + q_mapped) * h.transpose() + r
}

/// Mean outer product of the stored residuals, divided by the current count.
pub fn window_average<T: Real>(w: &ResidualWindow<T>) -> Result<Matrix3<T>> {
    if w.is_empty() {
        return Err(Error::InsufficientData("residual window is empty"));
    }
    let sum = w
        .iter()
        .fold(Matrix3::zeros(), |acc, r| acc + r * r.transpose());
    Ok(sum / lit::<T>(w.len() as f64))
}

pub fn mismatch<T: Real>(s: &Matrix3<T>, c_hat: &Matrix3<T>) -> MismatchSignal<T> {
    MismatchSignal {
        d: s.diagonal() - c_hat.diagonal(),
        s: *s,
        c_hat: *c_hat,
    }
}

/// Runs the fuzzy system independently on each mismatch channel.
pub fn infer_adjustment<T: Real>(d: &Vector3<T>, fis: &FisParams<T>) -> Vector3<T> {
    d.map(|dj| infer(dj, fis))
}

/// One adaptation step. `window` must already contain `diag.residual`.
/// Until the window is full the noise model is returned unchanged.
pub fn adapt_step<T: Real>(
    window: &ResidualWindow<T>,
    diag: &StepDiagnostics<T>,
    noise: &NoiseModel<T>,
    fis: &FisParams<T>,
    mode: AdaptMode,
) -> Result<NoiseModel<T>> {
    if !window.is_full() {
        return Ok(noise.clone());
    }
    let h = Matrix3::identity();
    let s = match mode {
        AdaptMode::R => present_covariance_r_mode(&h, &diag.prior.covariance, noise.r()),
        AdaptMode::QExperimental => {
            let lin = diag.linearization.as_ref().ok_or(Error::InsufficientData(
                "process linearization missing from diagnostics",
            ))?;
            let q_mapped = lin.w * noise.q() * lin.w.transpose();
            present_covariance_q_mode(&h, &lin.a, &lin.previous_covariance, &q_mapped, noise.r())
        }
    };
    let c_hat = window_average(window)?;
    let signal = mismatch(&s, &c_hat);
    let delta = infer_adjustment(&signal.d, fis);
    Ok(match mode {
        AdaptMode::R => noise.apply_adjustment(&delta),
        AdaptMode::QExperimental => {
            let half: T = lit(0.5);
            noise.apply_q_adjustment([(delta[0] + delta[1]) * half, delta[2]])
        }
    })
}

/// Residual window plus the fuzzy system, owned by one filter.
#[derive(Debug, Clone)]
pub struct Adapter<T> {
    pub window: ResidualWindow<T>,
    pub fis: FisParams<T>,
    pub mode: AdaptMode,
}

impl<T: Real> Adapter<T> {
    pub fn new(capacity: usize, fis: FisParams<T>, mode: AdaptMode) -> Result<Self> {
        Ok(Self {
            window: ResidualWindow::new(capacity)?,
            fis,
            mode,
        })
    }

    /// Records the residual and returns the adapted noise model.
    pub fn update(
        &mut self,
        diag: &StepDiagnostics<T>,
        noise: &NoiseModel<T>,
    ) -> Result<NoiseModel<T>> {
        self.window.push(diag.residual);
        adapt_step(&self.window, diag, noise, &self.fis, self.mode)
    }
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    use super::*;
    use crate::ekf::{step, FilterState};
    use crate::presets;
    use crate::robot::{MotionIncrement, Pose};
    use crate::training::{generate_training_set, TargetRule};

    fn r_reference() -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::new(0.01, 0.01, 0.018))
    }

    #[test]
    fn present_covariance_examples() {
        let i = Matrix3::identity();
        assert_eq!(
            present_covariance_r_mode(&i, &Matrix3::zeros(), &r_reference()),
            r_reference()
        );
        assert_eq!(present_covariance_r_mode(&i, &i, &i), i * 2.0);
        let s = present_covariance_r_mode(&i, &(i * 0.01), &r_reference());
        assert_relative_eq!(
            s,
            Matrix3::from_diagonal(&Vector3::new(0.02, 0.02, 0.028)),
            epsilon = 1e-15
        );
    }

    #[test]
    fn q_mode_reduces_to_r_mode() {
        let i = Matrix3::identity();
        let p = Matrix3::new(0.3, 0.1, 0.0, 0.1, 0.2, 0.05, 0.0, 0.05, 0.1);
        assert_eq!(
            present_covariance_q_mode(&i, &i, &p, &Matrix3::zeros(), &r_reference()),
            present_covariance_r_mode(&i, &p, &r_reference())
        );
        let qm = Matrix3::from_diagonal(&Vector3::new(0.004, 0.004, 0.0003));
        assert_eq!(
            present_covariance_q_mode(&i, &i, &Matrix3::zeros(), &qm, &r_reference()),
            qm + r_reference()
        );
    }

    #[test]
    fn window_average_examples() {
        let mut w = ResidualWindow::new(4).unwrap();
        assert!(matches!(
            window_average(&w),
            Err(Error::InsufficientData(_))
        ));
        for _ in 0..4 {
            w.push(Vector3::new(1.0, 0.0, 0.0));
        }
        let c = window_average(&w).unwrap();
        assert_eq!(c[(0, 0)], 1.0);
        assert_eq!(c.iter().filter(|v| **v != 0.0).count(), 1);

        let mut w = ResidualWindow::new(2).unwrap();
        w.push(Vector3::new(1.0, 0.0, 0.0));
        w.push(Vector3::new(-1.0, 0.0, 0.0));
        assert_eq!(window_average(&w).unwrap()[(0, 0)], 1.0);
    }

    #[test]
    fn window_evicts_oldest() {
        let mut w = ResidualWindow::new(3).unwrap();
        for k in 0..5 {
            w.push(Vector3::new(f64::from(k), 0.0, 0.0));
        }
        let xs: Vec<f64> = w.iter().map(|r| r[0]).collect();
        assert_eq!(xs, vec![2.0, 3.0, 4.0]);
        assert!(ResidualWindow::<f64>::new(0).is_err());
    }

    #[test]
    fn mismatch_examples() {
        let i = Matrix3::<f64>::identity();
        assert_eq!(mismatch(&i, &i).d, Vector3::zeros());
        assert_eq!(mismatch(&(i * 2.0), &i).d, Vector3::new(1.0, 1.0, 1.0));
        let s = Matrix3::from_diagonal(&Vector3::new(0.02, 0.02, 0.028));
        let c = Matrix3::from_diagonal(&Vector3::new(0.05, 0.01, 0.028));
        let m = mismatch(&s, &c);
        assert_relative_eq!(m.d, Vector3::new(-0.03, 0.01, 0.0), epsilon = 1e-15);
        for j in 0..3 {
            assert_eq!(m.d[j], m.s[(j, j)] - m.c_hat[(j, j)]);
        }
    }

    #[test]
    fn apply_adjustment_examples() {
        let noise = presets::noise_model(0.02, 0.01);
        assert_eq!(noise.apply_adjustment(&Vector3::zeros()), noise);
        let out = noise.apply_adjustment(&Vector3::new(-0.001, 0.0, 0.002));
        assert_relative_eq!(
            out.r_diagonal(),
            Vector3::new(0.009, 0.01, 0.02),
            epsilon = 1e-15
        );
        assert_eq!(out.q(), noise.q());
        let clamped = noise.apply_adjustment(&Vector3::new(-1.0, -1.0, -1.0));
        assert_eq!(clamped.r_diagonal(), Vector3::repeat(1e-6));
    }

    #[test]
    fn noise_model_rejects_bad_input() {
        assert!(NoiseModel::new([0.1, 0.1], Vector3::repeat(0.01), 0.0).is_err());
        assert!(NoiseModel::new([-0.1, 0.1], Vector3::repeat(0.01), 1e-6).is_err());
        assert!(NoiseModel::new([0.1, 0.1], Vector3::new(0.01, f64::NAN, 0.01), 1e-6).is_err());
        let lifted = NoiseModel::new([0.0, 0.0], Vector3::zeros(), 1e-6).unwrap();
        assert_eq!(lifted.r_diagonal(), Vector3::repeat(1e-6));
    }

    fn diagnostics(residual: Vector3<f64>, prior_cov: Matrix3<f64>) -> StepDiagnostics<f64> {
        StepDiagnostics {
            residual,
            kalman_gain: Matrix3::zeros(),
            prior: FilterState::new(Pose::origin(), prior_cov),
            linearization: None,
        }
    }

    fn shaped_fis() -> FisParams<f64> {
        crate::training::designed_fis(&TargetRule::default())
    }

    #[test]
    fn warm_up_leaves_noise_unchanged() {
        let noise = presets::noise_model(0.02, 0.01);
        let mut adapter = Adapter::new(4, shaped_fis(), AdaptMode::R).unwrap();
        for _ in 0..3 {
            let d = diagnostics(Vector3::new(1.0, 1.0, 1.0), Matrix3::identity());
            assert_eq!(adapter.update(&d, &noise).unwrap(), noise);
        }
        let d = diagnostics(Vector3::new(1.0, 1.0, 1.0), Matrix3::identity());
        assert_ne!(adapter.update(&d, &noise).unwrap(), noise);
    }

    #[test]
    fn adjustment_direction_follows_mismatch() {
        let noise = presets::noise_model(0.02, 0.01);
        let fis = shaped_fis();
        let mut w = ResidualWindow::new(2).unwrap();
        // residuals much smaller than predicted: S > C, decrease R
        w.push(Vector3::repeat(1e-3));
        w.push(Vector3::repeat(-1e-3));
        let d = diagnostics(Vector3::repeat(-1e-3), Matrix3::identity() * 0.05);
        let out = adapt_step(&w, &d, &noise, &fis, AdaptMode::R).unwrap();
        assert!((0..3).all(|j| out.r_diagonal()[j] < noise.r_diagonal()[j]));
        // residuals much larger than predicted: S < C, increase R
        let mut w = ResidualWindow::new(2).unwrap();
        w.push(Vector3::repeat(0.5));
        w.push(Vector3::repeat(0.5));
        let d = diagnostics(Vector3::repeat(0.5), Matrix3::identity() * 1e-4);
        let out = adapt_step(&w, &d, &noise, &fis, AdaptMode::R).unwrap();
        assert!((0..3).all(|j| out.r_diagonal()[j] > noise.r_diagonal()[j]));
    }

    #[test]
    fn matched_covariances_keep_noise() {
        let noise = presets::noise_model(0.02, 0.01);
        let fis = shaped_fis();
        let mut w = ResidualWindow::new(1).unwrap();
        let s = noise.r_diagonal() + Vector3::repeat(0.01);
        let r = s.map(f64::sqrt);
        w.push(r);
        let d = diagnostics(r, Matrix3::identity() * 0.01);
        let out = adapt_step(&w, &d, &noise, &fis, AdaptMode::R).unwrap();
        assert_relative_eq!(out.r_diagonal(), noise.r_diagonal(), epsilon = 1e-3);
    }

    #[test]
    fn q_mode_needs_linearization_and_moves_only_q() {
        let g = presets::geometry::<f64>();
        let noise = presets::noise_model(0.02, 0.01);
        let fis = shaped_fis();
        let s0 = FilterState::new(Pose::origin(), Matrix3::identity() * 1e-4);
        let (_, diag) = step(
            &s0,
            &MotionIncrement::from_body(0.1, 0.01, &g),
            &Vector3::new(0.5, 0.5, 0.5),
            &noise,
        )
        .unwrap();
        let mut w = ResidualWindow::new(1).unwrap();
        w.push(diag.residual);
        let out = adapt_step(&w, &diag, &noise, &fis, AdaptMode::QExperimental).unwrap();
        assert_eq!(out.r(), noise.r());
        assert!(out.q()[(0, 0)] > noise.q()[(0, 0)]);
        assert_eq!(out.q()[(0, 1)], 0.0);
        let bare = diagnostics(diag.residual, diag.prior.covariance);
        assert!(adapt_step(&w, &bare, &noise, &fis, AdaptMode::QExperimental).is_err());
    }

    #[test]
    fn fixed_residual_stream_is_a_fixed_map() {
        let noise = presets::noise_model(0.02, 0.01);
        let fis = shaped_fis();
        let mut a = Adapter::new(3, fis, AdaptMode::R).unwrap();
        let d = diagnostics(Vector3::new(0.05, -0.02, 0.1), Matrix3::identity() * 1e-3);
        for _ in 0..3 {
            a.update(&d, &noise).unwrap();
        }
        let c1 = window_average(&a.window).unwrap();
        let n1 = a.update(&d, &noise).unwrap();
        let c2 = window_average(&a.window).unwrap();
        let n2 = a.update(&d, &noise).unwrap();
        assert_eq!(c1, c2);
        assert_eq!(n1, n2);
    }

    #[test]
    fn training_targets_are_consistent_with_adaptation_sign() {
        let data =
            generate_training_set::<f64>(&TargetRule::default(), &[-0.1, 0.0, 0.1], 0).unwrap();
        assert!(data.patterns()[0].1 > 0.0);
        assert_eq!(data.patterns()[1].1, 0.0);
        assert!(data.patterns()[2].1 < 0.0);
    }

    proptest! {
        #[test]
        fn ring_buffer_matches_brute_force(
            cap in 1usize..8,
            rs in proptest::collection::vec(proptest::array::uniform3(-1.0f64..1.0), 1..30),
        ) {
            let mut w = ResidualWindow::new(cap).unwrap();
            let mut all = Vec::new();
            for r in rs {
                let v = Vector3::from(r);
                w.push(v);
                all.push(v);
                let tail = &all[all.len().saturating_sub(cap)..];
                let mut brute = Matrix3::zeros();
                for t in tail {
                    brute += t * t.transpose();
                }
                brute /= tail.len() as f64;
                prop_assert_eq!(window_average(&w).unwrap(), brute);
            }
        }

        #[test]
        fn adapted_r_respects_floor_and_stays_diagonal(
            delta in proptest::array::uniform3(-1.0f64..1.0),
            floor in 1e-9f64..1e-3,
        ) {
            let noise = NoiseModel::new([1e-4, 1e-4], Vector3::new(0.01, 0.01, 0.018), floor).unwrap();
            let out = noise.apply_adjustment(&Vector3::from(delta));
            for i in 0..3 {
                for j in 0..3 {
                    if i == j {
                        prop_assert!(out.r()[(i, j)] >= floor);
                    } else {
                        prop_assert_eq!(out.r()[(i, j)], 0.0);
                    }
                }
            }
        }

        #[test]
        fn q_mode_present_covariance_is_psd(l in proptest::collection::vec(-1.0f64..1.0, 9), th in -3.0f64..3.0) {
            let g = presets::geometry::<f64>();
            let lp = Matrix3::new(l[0], 0.0, 0.0, l[1], l[2], 0.0, l[3], l[4], l[5]);
            let p = lp * lp.transpose();
            let (a, w) = crate::robot::process_jacobians(&Pose::new(0.0, 0.0, th), &MotionIncrement::from_body(l[6], l[7] * 0.3, &g));
            let q = Matrix2::new(l[8].abs() * 0.01, 0.0, 0.0, 1e-4);
            let s = present_covariance_q_mode(&Matrix3::identity(), &a, &p, &(w * q * w.transpose()), &r_reference());
            prop_assert!((s - s.transpose()).abs().max() < 1e-12);
            prop_assert!(s.symmetric_eigenvalues().min() >= -1e-9);
        }
    }
}
