//! Simulation and reconstruction of spatio-spectrally coded light fields.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] holds the dense 5D container and the LF5D file format,
//! * [`coding`] implements the one-hot spectral mask, coding, projection and lifting,
//! * [`scenegen`] renders Lambertian light fields from a central view and disparity map,
//! * [`transforms`], [`cs_dct`] and [`cs_dict`] provide the two compressed-sensing solvers,
//! * [`losses`] collects training losses and evaluation metrics,
//! * [`autodiff`] and [`multitask`] train a small two-head network with the
//!   task and auxiliary-loss weighting strategies,
//! * [`calib`] fits the dark signal, vignetting and spectral responsivity of a camera.

pub mod autodiff;
pub mod calib;
pub mod coding;
pub mod cs_dct;
pub mod cs_dict;
mod error;
pub mod losses;
pub mod multitask;
pub mod rng;
pub mod scenegen;
pub mod tensor;
pub mod transforms;

pub use error::{Error, Result};
pub use tensor::{CentralView, DisparityMap, Tensor5};
