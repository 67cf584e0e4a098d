//! Identification and control comparison of two contrasting thermal models of
//! a multi-zone building: a low-dimensional data-driven difference-equation
//! model and a high-dimensional bilinear RC network model, both fit from
//! sensor time series and exercised by an energy-efficient receding-horizon
//! controller.

pub mod cli;
pub mod error;
pub mod datadriven;
pub mod mpc;
pub mod optim;
pub mod rcnet;
pub mod smoother;
pub mod synth;
pub mod timeseries;

pub use error::{Error, Result};
