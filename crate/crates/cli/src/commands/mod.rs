//! Subcommand implementations.
//!
//! Each module exposes `run` (flag parsing → settings → execute) and an
//! `execute` entry point taking resolved settings, which `pipeline` reuses
//! so chained stages behave exactly like standalone invocations.

pub mod baseline;
pub mod eval;
pub mod mock;
pub mod observe;
pub mod pipeline;
pub mod reconstruct;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

/// Index of one observation run, written by `observe` next to its
/// catalogs so `eval --mask-from` can locate everything in one hop.
/// Artifact entries are file names relative to the bundle's directory;
/// `kappa` echoes the input map path as given on the command line.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationBundle {
    pub kappa: String,
    pub photometry: Option<String>,
    pub strong: Option<String>,
    pub weak: Option<String>,
    pub sigma_w2: f64,
}

impl ObservationBundle {
    /// Resolve a stored artifact name against the bundle's directory.
    pub fn artifact(&self, bundle_path: &Path, name: &str) -> PathBuf {
        bundle_path.parent().unwrap_or(Path::new("")).join(name)
    }
}

/// Config-file bytes carried into `execute` stages so the manifest can
/// record the file among the run inputs.
pub type ConfigInput = Option<(PathBuf, Vec<u8>)>;
