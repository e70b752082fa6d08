//! Topology file resolution. The `--config` flag wins over `SCHALADB_CONFIG`;
//! without either, the built-in single-machine topology is used.

use std::path::{Path, PathBuf};

use schaladb::ClusterTopology;

pub const CONFIG_ENV: &str = "SCHALADB_CONFIG";
pub const DEFAULT_HTTP_PORT: u16 = 7878;

/// The topology shipped as `config/single-machine.json`.
pub const SINGLE_MACHINE: &str = include_str!("../../../config/single-machine.json");

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("{path}: invalid topology: {detail}")]
    Invalid { path: PathBuf, detail: String },
}

/// Where the topology comes from, given the flag value.
pub fn resolve(flag: Option<&Path>) -> Option<PathBuf> {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(CONFIG_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
}

pub fn load(path: Option<&Path>) -> Result<ClusterTopology, ConfigError> {
    let (text, path) = match path {
        Some(p) => (
            std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
                path: p.to_path_buf(),
                source,
            })?,
            p.to_path_buf(),
        ),
        None => (SINGLE_MACHINE.to_string(), PathBuf::from("<built-in single-machine>")),
    };
    let topo: ClusterTopology =
        serde_json::from_str(&text).map_err(|source| ConfigError::Parse { path: path.clone(), source })?;
    topo.validate()
        .map_err(|detail| ConfigError::Invalid { path, detail })?;
    Ok(topo)
}

/// Base URL of the HTTP service for a topology.
pub fn service_url(topo: &ClusterTopology) -> String {
    format!("http://127.0.0.1:{}", topo.http_port.unwrap_or(DEFAULT_HTTP_PORT))
}
