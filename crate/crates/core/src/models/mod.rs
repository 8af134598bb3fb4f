//! Built-in example problems with their analytic oracles.

pub mod consumption;
pub mod logistic;
pub mod production;

pub use consumption::{consumption_integrability_check, consumption_problem, ConsumptionParams};
pub use logistic::{
    logistic_control_law, logistic_local_uniqueness_probe, logistic_picard_solve, logistic_problem, LogisticParams, PicardOutcome,
};
pub use production::{production_planning_problem, riccati_oracle, ProductionPlanningParams, RiccatiSolution};
