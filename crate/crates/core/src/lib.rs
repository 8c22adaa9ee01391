//! Gaze-modulated dropout laboratory.

pub mod config;
pub mod dropout;
pub mod net;
pub mod simworld;
pub mod error;
pub mod experiment;
pub mod gazefield;
pub mod metrics;
pub mod tensor;
#[cfg(any(test, feature = "testsupport"))]
pub mod testsupport;

pub use error::{Error, Result};
