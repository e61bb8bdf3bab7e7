//! Run bookkeeping: error-to-exit-code mapping, digested input loading,
//! and atomic artifact writes with a manifest alongside every file.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::Serialize;

use lensforge_core::digest;
use lensforge_core::raster::{decode_raster, encode_raster, RasterData};
use lensforge_core::sampler::SamplerError;

/// Exit code for malformed flags or semantically invalid requests.
pub const EXIT_USAGE: i32 = 2;
/// Exit code for missing or unreadable/undecodable input files.
pub const EXIT_IO: i32 = 3;
/// Exit code for sampler divergence.
pub const EXIT_DIVERGED: i32 = 4;

/// Anything that aborts a run, tagged with the exit code it maps to.
#[derive(Debug)]
pub enum CliError {
    /// Bad flag combination or invalid parameter value.
    Usage(String),
    /// Filesystem-level failure on a named path.
    Io { path: PathBuf, source: std::io::Error },
    /// A file was readable but its contents did not parse.
    Decode { path: PathBuf, message: String },
    /// The sampler tripped its divergence guard.
    Diverged { message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Io { .. } | CliError::Decode { .. } => EXIT_IO,
            CliError::Diverged { .. } => EXIT_DIVERGED,
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        CliError::Usage(message.into())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "{msg}"),
            CliError::Io { path, source } => {
                write!(f, "cannot access {}: {source}", path.display())
            }
            CliError::Decode { path, message } => {
                write!(f, "cannot decode {}: {message}", path.display())
            }
            CliError::Diverged { message } => write!(f, "{message}"),
        }
    }
}

/// Sampler failures split into divergence (exit 4) and caller error (exit 2).
impl From<SamplerError> for CliError {
    fn from(err: SamplerError) -> Self {
        match &err {
            SamplerError::Diverged { sample_index, outer_step, inner_step, state_digest } => {
                let inner = match inner_step {
                    Some(i) => format!(", inner step {i}"),
                    None => String::new(),
                };
                CliError::Diverged {
                    message: format!(
                        "sampler diverged: sample {sample_index}, outer step \
                         {outer_step}{inner} (state digest {state_digest})"
                    ),
                }
            }
            _ => CliError::Usage(err.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Reproducibility record written next to every artifact.
///
/// Serialization order is fixed by the struct; `inputs` is a sorted map and
/// `config` is built from sorted-key JSON, so two runs with the same
/// settings produce byte-identical manifests apart from `wall_time_ms`.
#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    config: &'a serde_json::Value,
    inputs: &'a BTreeMap<String, String>,
    seed: Option<u64>,
    tool_version: &'a str,
    wall_time_ms: u128,
}

/// Shared state for one command invocation: the resolved configuration,
/// the digests of every input consumed so far, and the run clock.
pub struct RunContext {
    command: String,
    config: serde_json::Value,
    inputs: BTreeMap<String, String>,
    seed: Option<u64>,
    started: Instant,
}

impl RunContext {
    pub fn new(command: String, config: serde_json::Value, seed: Option<u64>) -> Self {
        Self { command, config, inputs: BTreeMap::new(), seed, started: Instant::now() }
    }

    /// Record an already-loaded input (e.g. the config file) in the digest map.
    pub fn note_input(&mut self, path: &Path, bytes: &[u8]) {
        self.inputs
            .insert(path.display().to_string(), digest::to_hex(digest::fnv1a64(bytes)));
    }

    /// Read a file, record its digest under the given path, return the bytes.
    pub fn read_input(&mut self, path: &Path) -> CliResult<Vec<u8>> {
        let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
        self.note_input(path, &bytes);
        Ok(bytes)
    }

    /// Read + decode a raster input, recording its digest.
    pub fn read_raster(&mut self, path: &Path) -> CliResult<RasterData> {
        let bytes = self.read_input(path)?;
        decode_raster(&bytes)
            .map_err(|e| CliError::Decode { path: path.to_path_buf(), message: e.to_string() })
    }

    /// Read + parse a JSON input, recording its digest.
    pub fn read_json<T: DeserializeOwned>(&mut self, path: &Path) -> CliResult<T> {
        let bytes = self.read_input(path)?;
        serde_json::from_slice(&bytes)
            .map_err(|e| CliError::Decode { path: path.to_path_buf(), message: e.to_string() })
    }

    /// Write bytes atomically (sibling temp file + rename) and drop a
    /// `<name>.manifest.json` next to the artifact.
    pub fn write_bytes(&self, path: &Path, bytes: &[u8]) -> CliResult<()> {
        atomic_write(path, bytes)?;
        let manifest = RunManifest {
            command: &self.command,
            config: &self.config,
            inputs: &self.inputs,
            seed: self.seed,
            tool_version: env!("CARGO_PKG_VERSION"),
            wall_time_ms: self.started.elapsed().as_millis(),
        };
        let mut body = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        body.push(b'\n');
        atomic_write(&manifest_path(path), &body)
    }

    pub fn write_raster(&self, path: &Path, data: &RasterData) -> CliResult<()> {
        self.write_bytes(path, &encode_raster(data))
    }

    pub fn write_json<T: Serialize>(&self, path: &Path, value: &T) -> CliResult<()> {
        let mut body = serde_json::to_vec_pretty(value)
            .map_err(|e| CliError::Usage(format!("cannot serialize {}: {e}", path.display())))?;
        body.push(b'\n');
        self.write_bytes(path, &body)
    }
}

/// `out/mean.f32r` → `out/mean.f32r.manifest.json`.
pub fn manifest_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    artifact.with_file_name(name)
}

fn atomic_write(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(path.file_name().unwrap_or_default());
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}
