//! Command-line front end: declarative JSON model specs, CSV data with
//! missing values, JSON posterior dumps and the synthetic benchmarks.

pub mod app;
pub mod data;
pub mod dump;
pub mod error;
pub mod spec;

pub use app::{run, BenchmarkRow};
pub use data::{load_data_csv, Table};
pub use dump::{NodeDump, PosteriorDump};
pub use error::CliError;
pub use spec::{build_model, parse_model_spec, Model, ModelSpec};
