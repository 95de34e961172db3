//! Deep spatio-temporal sparse decomposition (DSTSD) toolkit.
//!
//! Simulates electrical wave propagation on a 1-D cell cable, learns a deep
//! spatio-temporal metamodel of the mean trend, and detects sparse abnormal
//! stimulations online via a buffer-window inverse problem and a
//! likelihood-ratio control chart.

pub mod anomaly;
pub mod cable;
pub mod config;
pub mod evaluation;
pub mod field;
pub mod metamodel;
pub mod monitoring;
pub mod phase1;
pub mod spline;
pub mod tensor;

mod error;

pub use error::Error;

pub type Result<T> = std::result::Result<T, Error>;
