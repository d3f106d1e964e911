//! Tabular GFlowNet training on enumerable DAGs, with exact oracles.

pub mod backward;
pub mod env;
pub mod logspace;
pub mod objectives;
pub mod oracle;
pub mod params;
pub mod replay;
pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod report;
pub mod trainer;
pub mod verify;
