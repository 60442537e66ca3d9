//! Extended Kalman filter for differential-drive localization whose
//! measurement noise is tuned online by a fuzzy neural network.
//!
//! The numeric core is generic over [`Real`] (`f32` or `f64`); the aliases
//! below fix it to `f64`, which is what the simulator and file formats use.

pub mod adaptation;
pub mod ekf;
pub mod error;
pub mod fuzzy;
pub mod io;
pub mod presets;
pub mod robot;
pub mod scalar;
pub mod sim;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Pose = robot::Pose<f64>;
pub type RobotGeometry = robot::RobotGeometry<f64>;
pub type MotionIncrement = robot::MotionIncrement<f64>;
pub type FilterState = ekf::FilterState<f64>;
pub type StepDiagnostics = ekf::StepDiagnostics<f64>;
pub type NoiseModel = adaptation::NoiseModel<f64>;
pub type ResidualWindow = adaptation::ResidualWindow<f64>;
pub type FisParams = fuzzy::FisParams<f64>;
pub type TrainingSet = training::TrainingSet<f64>;
pub type TrainConfig = training::TrainConfig<f64>;

pub type Pose32 = robot::Pose<f32>;
pub type FilterState32 = ekf::FilterState<f32>;
pub type FisParams32 = fuzzy::FisParams<f32>;
