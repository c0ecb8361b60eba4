//! Config-driven experiment runner for `fvdual`.

pub mod config;
pub mod runner;

pub use config::{parse_config, parse_config_str, Config, ConfigError};
pub use runner::{run, write_reports, Overrides};
