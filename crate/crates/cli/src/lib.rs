//! Scenario files, commands and reports behind the `stl-ess` binary.

pub mod commands;
pub mod model;
pub mod report;
pub mod scenario;

pub use commands::{Failure, RunOptions, Side};
pub use model::Prepared;
pub use report::ResultDocument;
pub use scenario::{Scenario, ScenarioFile};
