//! Experiment orchestration: a single TOML config drives staged runs
//! (inject → train → invert-train → synthesize → annotate → unlearn → eval
//! → report) with a manifest that records config hashes and artifact
//! digests, so completed stages are no-ops unless forced.

mod config;
mod manifest;
mod report;
mod stages;

pub use config::{ExperimentConfig, InverterSection, ANNOTATOR_ENDPOINT_ENV};
pub use manifest::{sha256_bytes, sha256_file, ArtifactRecord, RunManifest, StageRecord};
pub use report::render_report;
pub use stages::{Pipeline, StageOutcome};
