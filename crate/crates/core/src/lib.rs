pub mod controller;
pub mod error;
pub mod kernel;
pub mod metrics;
pub mod model;
pub mod planner;
pub mod scenario_file;
pub mod sim;
pub mod source;
pub mod sweep;
pub mod traffic;
