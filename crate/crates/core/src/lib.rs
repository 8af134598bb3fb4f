//! Discounted infinite-horizon stochastic control toolkit.
//!
//! The crate simulates controlled diffusions, solves the associated
//! adjoint BSDE by regression Monte Carlo on a truncated horizon, and
//! certifies candidate controls through the sufficient maximum principle:
//! pointwise Hamiltonian maximization, concavity, transversality and
//! direct cost comparison under common random numbers.

pub mod audit;
pub mod basis;
pub mod bsde;
pub mod error;
pub mod exec;
pub mod export;
pub mod forward;
pub mod grid;
pub mod law;
pub mod maximize;
pub mod models;
pub mod noise;
pub mod problem;
pub mod report;
pub mod verify;

pub use error::{Result, SmpError};
pub use exec::Execution;
pub use forward::{simulate_forward, PathEnsemble, SimSpec};
pub use grid::TimeGrid;
pub use law::{AdjointSource, ControlLaw};
pub use problem::{AssumptionConstants, CoefficientField, ControlDomain, Dims, DiscountedProblem, StateRegion};
pub use report::{CostEstimate, Status, VerificationReport};
