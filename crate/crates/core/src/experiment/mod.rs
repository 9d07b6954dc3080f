//! Simulation scenarios, the ERM oracle, and the coverage and efficiency harnesses.

pub mod config;
pub mod coverage;
pub mod efficiency;
pub mod erm;
pub mod pipeline;
pub mod scenarios;

pub use coverage::{run_coverage_experiment, CoverageRow, CoverageTable, ExperimentConfig};
pub use erm::{erm_oracle, ErmOptions, ErmResult};
pub use pipeline::{sample_posterior, ChainPlan, PosteriorRun};
pub use scenarios::{generate_scenario, Scenario, ScenarioDataset};
