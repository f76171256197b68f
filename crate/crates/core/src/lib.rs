//! Distributed multi-satellite MIMO downlink precoding under delayed CSI.
//!
//! - [`geometry`]: constellation propagation, visibility and cluster selection.
//! - [`channel`]: time-varying Rician channels, delayed estimates and
//!   delay-error moments.
//! - [`precoder`]: the robust MSE precoder, its non-robust reduction and the
//!   sum-rate metric.
//! - [`harness`]: seeded Monte Carlo drops, sweeps and result files.

// Negated comparisons deliberately reject NaN alongside out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channel;
pub mod geometry;
pub mod harness;
pub mod precoder;

pub use channel::{ChannelHistory, LinkParams, UncertaintyStats};
pub use geometry::{Cluster, ConstellationConfig, GroundUser, SatelliteState};
pub use harness::{DropResult, Method, ResultsTable, ScenarioConfig};
pub use precoder::{PowerBudget, PrecodingMatrix, SolveReport, SolverOptions};
