//! JSON/CSV persistence and the checkpoint document.
//!
//! Floats are written with the shortest representation that parses back to
//! the same `f64`, and parsed exactly, so every document round-trips.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::numcore::{AdamWState, ParamTensor};
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

pub fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source }
}

pub fn to_json_string<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable value")
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
    }
    let mut s = to_json_string(value);
    s.push('\n');
    fs::write(path, s).map_err(|e| io_err(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&s).map_err(|e| Error::Format { path: path.to_path_buf(), message: e.to_string() })
}

pub fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_csv<R: DeserializeOwned>(path: &Path) -> Result<Vec<R>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(source) => io_err(path, source),
            _ => unreachable!(),
        }
    } else {
        Error::Format { path: path.to_path_buf(), message: e.to_string() }
    }
}

/// Versioned parameter checkpoint. `S` describes the network topology;
/// `extra` carries module-specific blocks such as the noise schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint<S> {
    pub version: u32,
    pub spec: S,
    pub params: Vec<ParamTensor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer_state: Option<AdamWState>,
}

impl<S> Checkpoint<S> {
    pub fn new(spec: S, params: Vec<ParamTensor>, optimizer_state: Option<AdamWState>) -> Self {
        Checkpoint { version: FORMAT_VERSION, spec, params, optimizer_state }
    }

    pub fn check_version(&self) -> Result<()> {
        if self.version != FORMAT_VERSION {
            return Err(Error::arg(format!("unsupported checkpoint version {}", self.version)));
        }
        for p in &self.params {
            p.validate()?;
        }
        Ok(())
    }
}
