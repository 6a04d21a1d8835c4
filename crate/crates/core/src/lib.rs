//! Simulation and analysis core for a current-injection search for
//! Pauli-forbidden copper X-rays with CCD detectors.
//!
//! The analysis math is generic over [`num::Real`] (`f32`/`f64`); the
//! aliases at the crate root fix it to `f64`.

pub mod calib;
pub mod error;
pub mod fit;
pub mod limits;
pub mod linalg;
pub mod num;
pub mod physics;
pub mod recon;
pub mod sim;
pub mod spectra;

pub use error::{Error, Result};
pub use num::Real;
pub use recon::{Cluster, Event, ReconConfig};
pub use sim::{PixelFrame, SimConfig};

pub type LinePhysics = physics::LinePhysics<f64>;
pub type ResponseModel = physics::ResponseModel<f64>;
pub type RsParameters = physics::RsParameters<f64>;
pub type Binning = spectra::Binning<f64>;
pub type AduHistogram = spectra::AduHistogram<f64>;
pub type EnergySpectrum = spectra::EnergySpectrum<f64>;
pub type RoiWindow = spectra::RoiWindow<f64>;
pub type RoiSum = spectra::RoiSum<f64>;
pub type PeakModel = fit::PeakModel<f64>;
pub type FitResult = fit::FitResult<f64>;
pub type Calibration = calib::Calibration<f64>;
pub type LineCalibration = calib::LineCalibration<f64>;
pub type RoiCounts = limits::RoiCounts<f64>;
pub type LimitResult = limits::LimitResult<f64>;
