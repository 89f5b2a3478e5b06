//! File formats, configuration and experiment orchestration.

pub mod config;
pub mod experiment;
pub mod images;
pub mod urfc;

pub use config::ConfigDoc;
pub use experiment::{run_experiment, run_experiment_with, ExperimentConfig, ExperimentReport, Method};
pub use urfc::{load_urfc, save_urfc, Urfc};
