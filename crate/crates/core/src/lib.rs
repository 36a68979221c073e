//! Return distributions of discounted LQR under i.i.d. disturbances.
//!
//! * [`lin_sys`]: problem instances, noise laws, closed-loop stability flags
//! * [`lqr`]: discounted Lyapunov and Riccati solvers
//! * [`return_dist`]: truncated return sampler, empirical distributions, KS distance
//! * [`mc`]: Monte Carlo rollout reference
//! * [`risk`]: empirical CVaR / VaR
//! * [`bound`]: truncation-error bound `C·γ^N`
//! * [`optimizer`]: zeroth-order CVaR policy gradient
//! * [`rng`]: seed derivation and split streams

pub mod bound;
pub mod error;
pub mod lin_sys;
pub mod lqr;
pub mod mc;
pub mod optimizer;
pub mod return_dist;
pub mod risk;
pub mod rng;

pub use error::{Error, Result};
pub use lin_sys::{close_loop, ClosedLoop, FeedbackGain, LinearSystem, NoiseModel, StabilityFlags};
pub use lqr::{solve_lyapunov, solve_riccati, ValueCertificate};
pub use return_dist::{build_empirical, ks_distance, EmpiricalDistribution, ReturnModel};
pub use risk::{cvar, value_at_risk, RiskSpec};
