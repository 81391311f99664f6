//! Identification of the Kalman (observer) gain of a known discrete-time
//! LTI system from input/output data.
//!
//! The estimator minimizes the prediction-error cost over a
//! stability-constrained set of gains, where stability is certified by a
//! discrete Lyapunov equation with a trace bound. The crate also evaluates
//! the asymptotic limit of the cost and its closed-form gradient, which is
//! what makes the landscape and consistency studies in the `cli` module
//! possible: the limit has a unique stationary point at the true gain, so
//! local minimizers converge to it as the dataset grows.

pub mod cli;
pub mod error;
pub mod model;
pub mod optimizer;
pub mod pem;
pub mod riccati;
pub mod stability;

pub use error::{Error, Result};
