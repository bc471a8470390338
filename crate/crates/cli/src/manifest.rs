//! Flat `key=value` run records.
//!
//! Keys are grouped by prefix: `config.*` holds the full alignment
//! configuration, `input.*` and `output.*` the file paths, `metrics.*` the
//! results. Lines starting with `#` and blank lines are ignored.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::Path;

use gauss_align::aligner::AlignConfig;
use gauss_align::{Error, Result};

pub const VERSION: &str = concat!("gauss-align ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub version: String,
    pub command: String,
    pub means_only: bool,
    pub config: AlignConfig,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub metrics: BTreeMap<String, String>,
    /// Left out unless requested, so identical runs give identical records.
    pub wall_time_seconds: Option<f64>,
}

impl RunManifest {
    pub fn new(command: &str, config: AlignConfig) -> Self {
        Self {
            version: VERSION.to_owned(),
            command: command.to_owned(),
            means_only: false,
            config,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            metrics: BTreeMap::new(),
            wall_time_seconds: None,
        }
    }

    pub fn parse(text: &str, source: &Path) -> Result<Self> {
        let mut m = Self::new("", AlignConfig::default());
        let mut seen_version = false;
        for (k, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |msg: String| Error::Parse {
                path: source.to_owned(),
                line: k + 1,
                message: msg,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| parse_err(format!("expected key=value, found '{line}'")))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "version" => {
                    m.version = value.to_owned();
                    seen_version = true;
                }
                "command" => m.command = value.to_owned(),
                "means_only" => {
                    m.means_only = value
                        .parse()
                        .map_err(|_| parse_err(format!("means_only must be true or false, found '{value}'")))?
                }
                "wall_time_seconds" => {
                    m.wall_time_seconds = Some(
                        value
                            .parse()
                            .map_err(|_| parse_err(format!("bad wall time '{value}'")))?,
                    )
                }
                _ => {
                    if let Some(field) = key.strip_prefix("config.") {
                        m.config.set(field, value).map_err(|e| parse_err(e.to_string()))?;
                    } else if let Some(name) = key.strip_prefix("input.") {
                        m.inputs.insert(name.to_owned(), value.to_owned());
                    } else if let Some(name) = key.strip_prefix("output.") {
                        m.outputs.insert(name.to_owned(), value.to_owned());
                    } else if let Some(name) = key.strip_prefix("metrics.") {
                        m.metrics.insert(name.to_owned(), value.to_owned());
                    } else {
                        return Err(parse_err(format!("unknown manifest key '{key}'")));
                    }
                }
            }
        }
        if !seen_version {
            return Err(Error::Parse {
                path: source.to_owned(),
                line: 1,
                message: "not a run manifest: no version line".into(),
            });
        }
        Ok(m)
    }
}

impl fmt::Display for RunManifest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut out = String::new();
        writeln!(out, "version={}", self.version)?;
        writeln!(out, "command={}", self.command)?;
        writeln!(out, "means_only={}", self.means_only)?;
        for (k, v) in self.config.to_key_values() {
            writeln!(out, "config.{k}={v}")?;
        }
        for (prefix, map) in [("input", &self.inputs), ("output", &self.outputs), ("metrics", &self.metrics)] {
            for (k, v) in map {
                writeln!(out, "{prefix}.{k}={v}")?;
            }
        }
        if let Some(t) = self.wall_time_seconds {
            writeln!(out, "wall_time_seconds={t}")?;
        }
        f.write_str(&out)
    }
}
