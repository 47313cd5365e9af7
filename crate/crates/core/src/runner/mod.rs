//! Command-line driver: configuration, run manifests and the experiment stages.

pub mod cli;
pub mod config;
pub mod manifest;
pub mod pipeline;

pub use cli::{run_cli, Cli, Command};
pub use config::{load_config, ExperimentConfig, GammaSelection, RunConfig, SCHEMA_VERSION};
pub use manifest::{sha256_file, write_atomic, FileEntry, ManifestLog, RunDir, RunManifest, MANIFEST_FILE};
pub use pipeline::{EditRequests, Pipeline, Summary};

#[cfg(test)]
mod tests;
