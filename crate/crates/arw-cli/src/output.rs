//! Output envelopes, config-file merging, and file writing.
//!
//! Every JSON artifact is wrapped in an envelope carrying the artifact
//! version, the command, the fully resolved parameters, and the root seed.
//! CSV artifacts carry the same provenance as `#`-prefixed header lines.
//! Identical (config, seed, version) inputs produce byte-identical files.

use std::io::Write;
use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use crate::Failure;

/// Parsed `--config` file: a JSON object keyed by command name.
#[derive(Debug, Default)]
pub struct FileConfig {
    root: Value,
}

pub fn load_config_file(path: Option<&Path>) -> Result<FileConfig, Failure> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Validation(format!("cannot read config {}: {e}", path.display())))?;
    let root: Value = serde_json::from_str(&text)
        .map_err(|e| Failure::Validation(format!("malformed config {}: {e}", path.display())))?;
    if !root.is_object() {
        return Err(Failure::Validation(format!(
            "config {} must hold a JSON object keyed by command",
            path.display()
        )));
    }
    Ok(FileConfig { root })
}

impl FileConfig {
    /// Resolve one parameter: CLI flag beats config-file value beats default.
    pub fn resolve<T: serde::de::DeserializeOwned>(
        &self,
        command: &str,
        key: &str,
        flag: Option<T>,
        default: T,
    ) -> Result<T, Failure> {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.root.get(command).and_then(|c| c.get(key)) {
            Some(value) => serde_json::from_value(value.clone()).map_err(|e| {
                Failure::Validation(format!("config field {command}.{key} has the wrong type: {e}"))
            }),
            None => Ok(default),
        }
    }

    /// Resolve a parameter with no default; error when absent everywhere.
    pub fn resolve_required<T: serde::de::DeserializeOwned>(
        &self,
        command: &str,
        key: &str,
        flag: Option<T>,
    ) -> Result<T, Failure> {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.root.get(command).and_then(|c| c.get(key)) {
            Some(value) => serde_json::from_value(value.clone()).map_err(|e| {
                Failure::Validation(format!("config field {command}.{key} has the wrong type: {e}"))
            }),
            None => Err(Failure::Validation(format!(
                "missing required parameter --{} (or config field {command}.{key})",
                key.replace('_', "-")
            ))),
        }
    }
}

/// Self-describing envelope around a result.
#[derive(Debug, Serialize)]
pub struct Envelope<C: Serialize, R: Serialize> {
    pub version: &'static str,
    pub command: &'static str,
    pub config: C,
    pub root_seed: Option<u64>,
    pub result: R,
}

impl<C: Serialize, R: Serialize> Envelope<C, R> {
    pub fn new(command: &'static str, config: C, root_seed: Option<u64>, result: R) -> Self {
        Envelope { version: arw::VERSION, command, config, root_seed, result }
    }

    pub fn to_json(&self) -> Result<String, Failure> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

/// Write to the path, or stdout when no path is given.
pub fn emit(path: Option<&Path>, text: &str) -> Result<(), Failure> {
    match path {
        Some(p) => {
            std::fs::write(p, text)
                .map_err(|e| Failure::Validation(format!("cannot write {}: {e}", p.display())))?;
        }
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
        }
    }
    Ok(())
}

/// Provenance header lines for CSV artifacts.
pub fn csv_provenance<C: Serialize>(
    command: &str,
    config: &C,
    root_seed: Option<u64>,
) -> Result<String, Failure> {
    let cfg = serde_json::to_string(config)?;
    let mut out = format!("# version={} command={command}\n# config={cfg}\n", arw::VERSION);
    if let Some(seed) = root_seed {
        out.push_str(&format!("# root_seed={seed}\n"));
    }
    Ok(out)
}
