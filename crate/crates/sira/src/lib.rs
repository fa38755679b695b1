//! File formats, experiment drivers and the `sira` command line around
//! [`sira_core`].

pub mod accept;
pub mod analyze;
pub mod cli;
pub mod clock;
pub mod config;
pub mod dataset;
pub mod demo;
pub mod error;
pub mod experiments;
pub mod format;
pub mod reference;
pub mod report;
pub mod trace;

pub use error::CliError;
