//! Online deep Koopman learning for nonlinear time-varying systems.
//!
//! A neural observable lifts the state into a space where the dynamics are
//! approximately linear. The lifted linear model is refit batch by batch with
//! a block Woodbury update of accumulated moments, the observable is retrained
//! on the newest batch, and the resulting linear time-varying model drives
//! prediction, error-bound reporting and receding-horizon control.
//!
//! Module map:
//!
//! - [`net`]: the observable network, its objective gradient, Adam and a
//!   Lipschitz estimator.
//! - [`regression`]: closed-form least-squares fits and the recursive update.
//! - [`pipeline`]: batching of a sample stream and the online learning loop.
//! - [`bounds`]: numerical evaluation of the prediction-error bound.
//! - [`systems`]: reference simulators and trajectory sampling.
//! - [`baselines`]: time-varying DMD and a single-network predictor.
//! - [`mpc`]: condensed lifted-space MPC and the closed-loop cartpole driver.
//! - [`experiments`]: end-to-end experiment runners used by the CLI.

pub mod baselines;
pub mod bounds;
pub mod error;
pub mod experiments;
pub mod io;
pub mod linalg;
pub mod mpc;
pub mod net;
pub mod par;
pub mod pipeline;
pub mod regression;
pub mod systems;

pub use error::{DktvError, Result};
pub use net::{Activation, LayerSpec, ObservableNet};
pub use pipeline::{DataBatch, DkrSnapshot, TrainConfig};
pub use regression::{KoopmanMatrices, RankReport, RecursiveCache};
