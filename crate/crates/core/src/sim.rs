//! Ground-truth trajectories, noise injection, single trials and Monte Carlo
//! aggregation for comparing the fixed-noise filter with the adaptive one.
//!
//! Each trial draws odometry and measurement noise from two independent
//! ChaCha streams seeded by the trial seed. Noise never depends on the filter,
//! so both modes of a run see identical realizations.

use nalgebra::{Matrix3, Vector3};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::adaptation::{AdaptMode, Adapter, NoiseModel};
use crate::ekf::{nees, step, FilterState};
use crate::error::{Error, Result};
use crate::fuzzy::FisParams;
use crate::presets;
use crate::robot::{dead_reckon_step, wrap, MotionIncrement, Pose, RobotGeometry};
use crate::scalar::{lit, to_f64, Real};

const ODOMETRY_STREAM: u64 = 0;
const MEASUREMENT_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Segment {
    Straight {
        length: f64,
    },
    /// Constant-curvature turn; positive sweep turns left.
    Arc {
        radius: f64,
        sweep: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySpec {
    pub segments: Vec<Segment>,
    /// Nominal travel per sampling period (m).
    pub step_ds: f64,
}

impl TrajectorySpec {
    pub fn validate(&self) -> Result<()> {
        if self.segments.is_empty() {
            return Err(Error::invalid("trajectory", "no segments"));
        }
        if !(self.step_ds.is_finite() && self.step_ds > 0.0) {
            return Err(Error::invalid(
                "trajectory.step_ds",
                "must be finite and > 0",
            ));
        }
        for (i, seg) in self.segments.iter().enumerate() {
            let ok = match *seg {
                Segment::Straight { length } => length.is_finite() && length > 0.0,
                Segment::Arc { radius, sweep } => {
                    radius.is_finite() && radius > 0.0 && sweep.is_finite() && sweep != 0.0
                }
            };
            if !ok {
                return Err(Error::invalid(
                    format!("trajectory segment {}", i + 1),
                    "non-positive length or zero sweep",
                ));
            }
        }
        Ok(())
    }
}

/// Noiseless increments and the poses they lead to from `start`.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth<T> {
    pub start: Pose<T>,
    pub increments: Vec<MotionIncrement<T>>,
    /// `poses[i]` is the pose after `increments[i]`.
    pub poses: Vec<Pose<T>>,
}

impl<T> Truth<T> {
    pub fn len(&self) -> usize {
        self.increments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.increments.is_empty()
    }
}

/// Discretizes each segment into steps of roughly `step_ds` and chains them
/// through the dead-reckoning update.
pub fn generate_truth<T: Real>(
    spec: &TrajectorySpec,
    geom: &RobotGeometry<T>,
    start: Pose<T>,
) -> Result<Truth<T>> {
    spec.validate()?;
    let mut increments = Vec::new();
    for seg in &spec.segments {
        let (length, turn) = match *seg {
            Segment::Straight { length } => (length, 0.0),
            Segment::Arc { radius, sweep } => (radius * sweep.abs(), sweep),
        };
        let n = (length / spec.step_ds).round().max(1.0) as usize;
        let ds = lit::<T>(length / n as f64);
        let dtheta = lit::<T>(turn / n as f64);
        increments.extend(std::iter::repeat_n(
            MotionIncrement::from_body(ds, dtheta, geom),
            n,
        ));
    }
    let mut poses = Vec::with_capacity(increments.len());
    let mut p = start;
    for m in &increments {
        p = dead_reckon_step(&p, m);
        poses.push(p);
    }
    Ok(Truth {
        start,
        increments,
        poses,
    })
}

/// True noise levels driving a simulation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimNoiseConfig {
    /// Odometry travel deviation per step (m).
    pub sigma_ds: f64,
    /// Odometry heading deviation per step (rad).
    pub sigma_dtheta: f64,
    /// Measurement variances `(x, y, theta)`.
    pub meas_r: Vector3<f64>,
}

impl SimNoiseConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.sigma_ds) {
            return Err(Error::invalid("noise.sigma_ds", "must be finite and >= 0"));
        }
        if !ok(self.sigma_dtheta) {
            return Err(Error::invalid(
                "noise.sigma_dtheta",
                "must be finite and >= 0",
            ));
        }
        if !self.meas_r.iter().all(|v| ok(*v)) {
            return Err(Error::invalid(
                "noise.meas_r",
                "variances must be finite and >= 0",
            ));
        }
        Ok(())
    }
}

fn gaussian<R: RngCore>(rng: &mut R, std: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    z * std
}

/// Adds zero-mean Gaussian noise to the travel and heading of every increment.
pub fn corrupt_odometry<T: Real, R: RngCore>(
    increments: &[MotionIncrement<T>],
    cfg: &SimNoiseConfig,
    geom: &RobotGeometry<T>,
    rng: &mut R,
) -> Vec<MotionIncrement<T>> {
    increments
        .iter()
        .map(|m| {
            let ds = m.ds + lit(gaussian(rng, cfg.sigma_ds));
            let dtheta = m.dtheta + lit(gaussian(rng, cfg.sigma_dtheta));
            MotionIncrement::from_body(ds, dtheta, geom)
        })
        .collect()
}

/// Noisy direct observation of `pose` with per-axis variances `meas_r`.
pub fn synthesize_measurement<T: Real, R: RngCore>(
    pose: &Pose<T>,
    meas_r: &Vector3<f64>,
    rng: &mut R,
) -> Vector3<T> {
    let v = meas_r.map(|var| gaussian(rng, var.sqrt()));
    Vector3::new(
        pose.x + lit(v[0]),
        pose.y + lit(v[1]),
        wrap(pose.theta + lit(v[2])),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FilterMode {
    /// Noise matrices fixed for the whole run.
    Ekf,
    /// Noise matrices adapted online by the fuzzy system.
    FnnEkf,
}

impl FilterMode {
    pub fn name(self) -> &'static str {
        match self {
            FilterMode::Ekf => "ekf",
            FilterMode::FnnEkf => "fnn-ekf",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ekf" => Some(FilterMode::Ekf),
            "fnn-ekf" => Some(FilterMode::FnnEkf),
            _ => None,
        }
    }
}

/// Filter-side settings, which may deliberately differ from the true noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterSettings {
    /// Ratio of the filter's initial measurement variances to the true ones.
    pub r_scale: f64,
    pub p0_diagonal: Vector3<f64>,
    pub window: usize,
    pub r_floor: f64,
    pub adapt_mode: AdaptMode,
}

impl Default for FilterSettings {
    fn default() -> Self {
        Self {
            r_scale: 1.0,
            p0_diagonal: Vector3::from(presets::P0_DIAGONAL),
            window: presets::WINDOW,
            r_floor: presets::R_FLOOR,
            adapt_mode: AdaptMode::R,
        }
    }
}

impl FilterSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.r_scale.is_finite() && self.r_scale > 0.0) {
            return Err(Error::invalid("filter.r_scale", "must be finite and > 0"));
        }
        if !self.p0_diagonal.iter().all(|v| v.is_finite() && *v >= 0.0) {
            return Err(Error::invalid(
                "filter.p0",
                "variances must be finite and >= 0",
            ));
        }
        if self.window == 0 {
            return Err(Error::invalid("adaptation.window", "must be at least 1"));
        }
        if !(self.r_floor.is_finite() && self.r_floor > 0.0) {
            return Err(Error::invalid(
                "adaptation.r_floor",
                "must be finite and > 0",
            ));
        }
        Ok(())
    }
}

/// Everything that defines a trial apart from the mode, FIS and seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub geometry: RobotGeometry<f64>,
    pub trajectory: TrajectorySpec,
    pub noise: SimNoiseConfig,
    pub filter: FilterSettings,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.trajectory.validate()?;
        self.noise.validate()?;
        self.filter.validate()
    }

    /// Noise model the filter starts from: the true process variances and the
    /// true measurement variances scaled by `r_scale`.
    pub fn initial_noise_model<T: Real>(&self) -> Result<NoiseModel<T>> {
        let r = self.noise.meas_r * self.filter.r_scale;
        NoiseModel::new(
            [
                lit(self.noise.sigma_ds.powi(2)),
                lit(self.noise.sigma_dtheta.powi(2)),
            ],
            r.map(lit::<T>),
            lit(self.filter.r_floor),
        )
    }
}

/// One row per filter step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow<T> {
    pub step: usize,
    pub truth: Pose<T>,
    pub dead_reckoned: Pose<T>,
    pub estimate: Pose<T>,
    pub residual: Vector3<T>,
    /// Measurement variances in effect after the step.
    pub r_diag: Vector3<T>,
    pub covariance: Matrix3<T>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrialTrace<T> {
    pub rows: Vec<TraceRow<T>>,
}

impl<T: Real> TrialTrace<T> {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Estimation error per step on one axis, heading wrapped.
    pub fn errors(&self, axis: Axis) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| to_f64(r.estimate.error_to(&r.truth)[axis.index()]))
            .collect()
    }

    /// NEES per step; `None` where the covariance is not positive definite.
    pub fn nees(&self) -> Vec<Option<f64>> {
        self.rows
            .iter()
            .map(|r| nees(&FilterState::new(r.estimate, r.covariance), &r.truth).map(to_f64))
            .collect()
    }
}

/// Per-trial odometry and measurement streams.
pub fn trial_rngs(seed: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut odo = ChaCha8Rng::seed_from_u64(seed);
    odo.set_stream(ODOMETRY_STREAM);
    let mut meas = ChaCha8Rng::seed_from_u64(seed);
    meas.set_stream(MEASUREMENT_STREAM);
    (odo, meas)
}

/// Seed of run `index` within a Monte Carlo batch.
pub fn run_seed(base_seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    rng.set_stream(index as u64);
    rng.next_u64()
}

/// Simulates one run: corrupt odometry, predict, observe, correct and (in
/// adaptive mode) adapt the measurement noise.
pub fn run_trial<T: Real>(
    scenario: &Scenario,
    mode: FilterMode,
    fis: &FisParams<T>,
    seed: u64,
) -> Result<TrialTrace<T>> {
    scenario.validate()?;
    let geom = RobotGeometry {
        wheel_diameter: lit(scenario.geometry.wheel_diameter),
        wheel_base: lit(scenario.geometry.wheel_base),
        gear_ratio: lit(scenario.geometry.gear_ratio),
        encoder_resolution: lit(scenario.geometry.encoder_resolution),
    };
    let truth = generate_truth(&scenario.trajectory, &geom, Pose::origin())?;
    let (mut odo_rng, mut meas_rng) = trial_rngs(seed);
    let odometry = corrupt_odometry(&truth.increments, &scenario.noise, &geom, &mut odo_rng);
    let measurements: Vec<Vector3<T>> = truth
        .poses
        .iter()
        .map(|p| synthesize_measurement(p, &scenario.noise.meas_r, &mut meas_rng))
        .collect();

    let mut noise = scenario.initial_noise_model::<T>()?;
    let mut adapter = match mode {
        FilterMode::Ekf => None,
        FilterMode::FnnEkf => Some(Adapter::new(
            scenario.filter.window,
            *fis,
            scenario.filter.adapt_mode,
        )?),
    };
    let mut state = FilterState::new(
        truth.start,
        Matrix3::from_diagonal(&scenario.filter.p0_diagonal.map(lit::<T>)),
    );
    let mut dead_reckoned = truth.start;
    let mut rows = Vec::with_capacity(truth.len());

    for (i, ((m, z), true_pose)) in odometry
        .iter()
        .zip(&measurements)
        .zip(&truth.poses)
        .enumerate()
    {
        let at = |e| Error::AtStep {
            step: i + 1,
            source: Box::new(e),
        };
        dead_reckoned = dead_reckon_step(&dead_reckoned, m);
        let (posterior, diag) = step(&state, m, z, &noise).map_err(at)?;
        state = posterior;
        if let Some(adapter) = adapter.as_mut() {
            noise = adapter.update(&diag, &noise).map_err(at)?;
        }
        rows.push(TraceRow {
            step: i + 1,
            truth: *true_pose,
            dead_reckoned,
            estimate: state.estimate,
            residual: diag.residual,
            r_diag: noise.r_diagonal(),
            covariance: state.covariance,
        });
    }
    Ok(TrialTrace { rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Theta,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Theta];

    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Theta => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Theta => "theta",
        }
    }
}

/// RMSE across runs at each step index.
pub fn rmse_series<T: Real>(traces: &[TrialTrace<T>], axis: Axis) -> Result<Vec<f64>> {
    let first = traces.first().ok_or(Error::InsufficientData("no traces"))?;
    let steps = first.len();
    if steps == 0 {
        return Err(Error::InsufficientData("empty trace"));
    }
    let mut sum_sq = vec![0.0; steps];
    for t in traces {
        if t.len() != steps {
            return Err(Error::LengthMismatch {
                expected: steps,
                found: t.len(),
            });
        }
        for (acc, e) in sum_sq.iter_mut().zip(t.errors(axis)) {
            *acc += e * e;
        }
    }
    let n = traces.len() as f64;
    Ok(sum_sq.into_iter().map(|s| (s / n).sqrt()).collect())
}

/// Time average of [`rmse_series`].
pub fn rmse_mean(series: &[f64]) -> f64 {
    series.iter().sum::<f64>() / series.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModeSummary {
    pub mode: FilterMode,
    /// Per-step RMSE for x, y, theta.
    pub rmse_series: [Vec<f64>; 3],
    /// Time-averaged RMSE for x, y, theta.
    pub rmse_mean: [f64; 3],
    /// Per-step NEES averaged over runs.
    pub nees_series: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloSummary {
    pub runs: usize,
    pub base_seed: u64,
    pub steps: usize,
    pub modes: Vec<ModeSummary>,
}

impl MonteCarloSummary {
    pub fn mode(&self, mode: FilterMode) -> Option<&ModeSummary> {
        self.modes.iter().find(|m| m.mode == mode)
    }
}

fn summarize<T: Real>(mode: FilterMode, traces: &[TrialTrace<T>]) -> Result<ModeSummary> {
    let mut series: [Vec<f64>; 3] = Default::default();
    let mut means = [0.0; 3];
    for axis in Axis::ALL {
        let s = rmse_series(traces, axis)?;
        means[axis.index()] = rmse_mean(&s);
        series[axis.index()] = s;
    }
    let steps = traces[0].len();
    let mut nees_sum = vec![0.0; steps];
    for t in traces {
        for (acc, v) in nees_sum.iter_mut().zip(t.nees()) {
            *acc += v.unwrap_or(f64::NAN);
        }
    }
    let n = traces.len() as f64;
    Ok(ModeSummary {
        mode,
        rmse_series: series,
        rmse_mean: means,
        nees_series: nees_sum.into_iter().map(|s| s / n).collect(),
    })
}

/// Runs `runs` paired trials per mode. Run `k` uses [`run_seed`]`(base_seed, k)`
/// for every mode.
pub fn monte_carlo<T: Real>(
    scenario: &Scenario,
    modes: &[FilterMode],
    fis: &FisParams<T>,
    runs: usize,
    base_seed: u64,
) -> Result<MonteCarloSummary> {
    if runs == 0 {
        return Err(Error::invalid("runs", "must be at least 1"));
    }
    if modes.is_empty() {
        return Err(Error::invalid("modes", "no filter modes requested"));
    }
    let seeds: Vec<u64> = (0..runs).map(|k| run_seed(base_seed, k)).collect();
    let mut summaries = Vec::with_capacity(modes.len());
    let mut steps = 0;
    for &mode in modes {
        let traces = std::thread::scope(|scope| {
            let handles: Vec<_> = seeds
                .chunks(runs.div_ceil(available_workers()))
                .map(|chunk| {
                    scope.spawn(move || {
                        chunk
                            .iter()
                            .map(|&seed| run_trial(scenario, mode, fis, seed))
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("trial worker panicked"))
                .collect::<Result<Vec<Vec<_>>>>()
        })?
        .into_iter()
        .flatten()
        .collect::<Vec<TrialTrace<T>>>();
        steps = traces[0].len();
        summaries.push(summarize(mode, &traces)?);
    }
    Ok(MonteCarloSummary {
        runs,
        base_seed,
        steps,
        modes: summaries,
    })
}

fn available_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}
