//! `key = value` service configuration.
//!
//! ```text
//! # covcert.conf
//! bind = 127.0.0.1
//! port = 8080
//! block_interval_ms = 1000
//! authorities = 5
//! chain_id = covcert-consortium
//! pod_store = /var/lib/covcert/pods
//! state_dir = /var/lib/covcert/state
//! workers = 1
//! link_delay_ms = 1-20
//! ```
//!
//! Blank lines and `#` comments are ignored. Unset keys keep their defaults.
//! The file named by `COVCERT_CONFIG` is used when no path is given.

use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};

use covcert_core::ledger::DEFAULT_CHAIN_ID;

pub const CONFIG_ENV: &str = "COVCERT_CONFIG";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Config {
    pub bind: IpAddr,
    /// 0 picks a free port.
    pub port: u16,
    pub block_interval_ms: u64,
    pub authorities: u32,
    pub chain_id: String,
    /// Pod files live here; in memory when unset.
    pub pod_store: Option<PathBuf>,
    /// Chain files and service state; in memory when unset.
    pub state_dir: Option<PathBuf>,
    /// Request-handling threads. 1 runs everything on one thread.
    pub workers: usize,
    /// Simulated authority-to-authority delay range.
    pub link_delay_ms: (u64, u64),
}

impl Default for Config {
    fn default() -> Self {
        Config {
            bind: IpAddr::V4(Ipv4Addr::LOCALHOST),
            port: 8080,
            block_interval_ms: 1000,
            authorities: 5,
            chain_id: DEFAULT_CHAIN_ID.to_owned(),
            pod_store: None,
            state_dir: None,
            workers: 1,
            link_delay_ms: (1, 20),
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("line {line}: expected key = value")]
    Syntax { line: usize },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value {value:?} for {key}")]
    BadValue { line: usize, key: String, value: String },
}

impl Config {
    pub fn addr(&self) -> SocketAddr {
        SocketAddr::new(self.bind, self.port)
    }

    pub fn parse(text: &str) -> Result<Config, ConfigError> {
        let mut cfg = Config::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or(ConfigError::Syntax { line })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = || ConfigError::BadValue {
                line,
                key: key.to_owned(),
                value: value.to_owned(),
            };
            match key {
                "bind" => cfg.bind = value.parse().map_err(|_| bad())?,
                "port" => cfg.port = value.parse().map_err(|_| bad())?,
                "block_interval_ms" => {
                    cfg.block_interval_ms = value.parse().ok().filter(|v| *v > 0).ok_or_else(bad)?
                }
                "authorities" => cfg.authorities = value.parse().ok().filter(|v| *v > 0).ok_or_else(bad)?,
                "chain_id" => {
                    if value.is_empty() || value.contains('/') {
                        return Err(bad());
                    }
                    cfg.chain_id = value.to_owned()
                }
                "pod_store" => cfg.pod_store = (!value.is_empty()).then(|| PathBuf::from(value)),
                "state_dir" => cfg.state_dir = (!value.is_empty()).then(|| PathBuf::from(value)),
                "workers" => cfg.workers = value.parse().ok().filter(|v| *v > 0).ok_or_else(bad)?,
                "link_delay_ms" => {
                    let (lo, hi) = match value.split_once('-') {
                        Some((lo, hi)) => (lo.trim().parse(), hi.trim().parse()),
                        None => (value.parse(), value.parse()),
                    };
                    match (lo, hi) {
                        (Ok(lo), Ok(hi)) if lo <= hi => cfg.link_delay_ms = (lo, hi),
                        _ => return Err(bad()),
                    }
                }
                _ => {
                    return Err(ConfigError::UnknownKey {
                        line,
                        key: key.to_owned(),
                    })
                }
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.to_owned(),
            message: e.to_string(),
        })?;
        Config::parse(&text)
    }

    /// Explicit path, else `COVCERT_CONFIG`, else defaults.
    pub fn resolve(explicit: Option<&Path>) -> Result<Config, ConfigError> {
        match explicit {
            Some(p) => Config::load(p),
            None => match std::env::var_os(CONFIG_ENV) {
                Some(p) if !p.is_empty() => Config::load(Path::new(&p)),
                _ => Ok(Config::default()),
            },
        }
    }
}
