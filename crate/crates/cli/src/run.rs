use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult, EXIT_DATA, EXIT_USAGE};

#[derive(Debug, Clone, Serialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

/// Reproducibility record written next to every command's outputs.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub argv: Vec<String>,
    pub config: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub threads: usize,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    pub timings: BTreeMap<String, f64>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Resolves settings (flag, then config file, then default), performs all
/// file I/O of a command and records hashes for the manifest.
pub struct Run {
    command: String,
    config_file: BTreeMap<String, String>,
    resolved: BTreeMap<String, String>,
    seed: Option<u64>,
    inputs: Vec<FileHash>,
    outputs: Vec<FileHash>,
    start: Instant,
}

impl Run {
    pub fn new(command: &str, config: Option<&Path>) -> CliResult<Self> {
        let config_file = match config {
            None => BTreeMap::new(),
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", p.display())))?;
                deepssm::io::read_config(&text)
                    .map_err(|e| CliError::usage(format!("config {}: {e}", p.display())))?
            }
        };
        Ok(Self {
            command: command.to_string(),
            config_file,
            resolved: BTreeMap::new(),
            seed: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            start: Instant::now(),
        })
    }

    /// Value of `key`: the flag if given, else the config file, else `default`.
    pub fn setting<T>(&mut self, key: &str, flag: Option<T>, default: T) -> CliResult<T>
    where
        T: FromStr + ToString,
    {
        let v = match flag {
            Some(v) => v,
            None => match self.config_file.get(key) {
                Some(s) => s
                    .parse()
                    .map_err(|_| CliError::usage(format!("config key `{key}`: cannot parse `{s}`")))?,
                None => default,
            },
        };
        self.resolved.insert(key.to_string(), v.to_string());
        Ok(v)
    }

    /// Like [`Run::setting`] with no default; `None` when neither source sets it.
    pub fn optional<T>(&mut self, key: &str, flag: Option<T>) -> CliResult<Option<T>>
    where
        T: FromStr + ToString,
    {
        if flag.is_none() && !self.config_file.contains_key(key) {
            return Ok(None);
        }
        self.required(key, flag).map(Some)
    }

    /// Like [`Run::setting`] without a default.
    pub fn required<T>(&mut self, key: &str, flag: Option<T>) -> CliResult<T>
    where
        T: FromStr + ToString,
    {
        if flag.is_none() && !self.config_file.contains_key(key) {
            return Err(CliError::usage(format!("missing required --{key}")));
        }
        let v = match flag {
            Some(v) => v,
            None => {
                let s = &self.config_file[key];
                s.parse()
                    .map_err(|_| CliError::usage(format!("config key `{key}`: cannot parse `{s}`")))?
            }
        };
        self.resolved.insert(key.to_string(), v.to_string());
        Ok(v)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
    }

    fn read_bytes(&mut self, path: &Path, code: i32) -> CliResult<Vec<u8>> {
        let bytes = fs::read(path).map_err(|e| CliError {
            code,
            msg: format!("cannot read {}: {e}", path.display()),
        })?;
        self.inputs.push(FileHash {
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        });
        Ok(bytes)
    }

    /// Reads a data file; failures are data errors.
    pub fn read(&mut self, path: &Path) -> CliResult<Vec<u8>> {
        self.read_bytes(path, EXIT_DATA)
    }

    pub fn read_text(&mut self, path: &Path, required: bool) -> CliResult<String> {
        let code = if required { EXIT_USAGE } else { EXIT_DATA };
        let b = self.read_bytes(path, code)?;
        String::from_utf8(b).map_err(|_| CliError {
            code,
            msg: format!("{} is not UTF-8 text", path.display()),
        })
    }

    pub fn write(&mut self, path: &Path, bytes: &[u8]) -> CliResult<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| CliError::usage(format!("cannot create {}: {e}", dir.display())))?;
        }
        fs::write(path, bytes).map_err(|e| CliError::usage(format!("cannot write {}: {e}", path.display())))?;
        self.outputs.push(FileHash {
            path: path.display().to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    /// Writes the manifest to `path`.
    pub fn finish(self, path: &Path) -> CliResult<()> {
        let mut timings = BTreeMap::new();
        timings.insert("total_seconds".to_string(), self.start.elapsed().as_secs_f64());
        let manifest = RunManifest {
            tool: "deepssm".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: self.command,
            argv: std::env::args().collect(),
            config: self.resolved,
            seed: self.seed,
            threads: rayon::current_num_threads(),
            inputs: self.inputs,
            outputs: self.outputs,
            timings,
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
        fs::write(path, text + "\n").map_err(|e| CliError::usage(format!("cannot write {}: {e}", path.display())))
    }
}

/// `<file>.manifest.json` for a file output.
pub fn manifest_for_file(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

/// `<dir>/<command>.manifest.json` for a directory output.
pub fn manifest_in_dir(dir: &Path, command: &str) -> PathBuf {
    dir.join(format!("{command}.manifest.json"))
}
