//! The collect agent: a publish-only MQTT endpoint that turns incoming
//! topic/payload messages into dictionary-encoded sensor ids and appends
//! them to the partitioned store, keeping a short cache for live queries.

mod core;
mod server;

pub use self::core::{AgentCore, AgentError, AgentStats, PublishError, QueryOutcome};
pub use server::{run_agent, AgentHandle};

use crate::proptree::{self, PtError};
use crate::storage::StoreConfig;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error(transparent)]
    Pt(#[from] PtError),
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

const MS: u64 = 1_000_000;

#[derive(Debug, Clone)]
pub struct AgentConfig {
    /// MQTT listener port on 127.0.0.1; 0 picks an ephemeral port.
    pub mqtt_port: u16,
    /// Status API port; absent disables it.
    pub rest_port: Option<u16>,
    pub cache_window_ns: u64,
    /// Storage writer threads; 0 stores synchronously in the session.
    pub writers: usize,
    pub store: StoreConfig,
}

impl AgentConfig {
    pub fn parse(text: &str) -> Result<AgentConfig, ConfigError> {
        let root = proptree::parse(text)?;
        let global = root.child("global");
        let get_port = |key: &str| -> Result<Option<u16>, ConfigError> {
            match global.and_then(|g| g.child(key)) {
                None => Ok(None),
                Some(_) => {
                    let raw = global.unwrap().get_u64(key)?;
                    Ok(Some(u16::try_from(raw).map_err(|_| {
                        ConfigError::Invalid(format!("{key} out of range"))
                    })?))
                }
            }
        };
        let mqtt_port = get_port("mqttPort")?.unwrap_or(1883);
        let rest_port = get_port("restPort")?;
        let cache_window_ms = match global {
            None => 120_000,
            Some(g) => g.get_u64_or("cacheWindow", 120_000)?,
        };
        let storage = root
            .child("storage")
            .ok_or_else(|| ConfigError::Invalid("missing storage block".into()))?;
        let mut store = StoreConfig::new(storage.get_str("path")?);
        store.nodes = storage.get_u64_or("nodes", 1)? as usize;
        store.partition_level = storage.get_u64_or("partitionLevel", 0)? as usize;
        store.segment_bytes = storage.get_u64_or("segmentBytes", store.segment_bytes)?;
        let writers = storage.get_u64_or("writers", 2)? as usize;
        Ok(AgentConfig {
            mqtt_port,
            rest_port,
            cache_window_ns: cache_window_ms * MS,
            writers,
            store,
        })
    }

    pub fn load(path: impl Into<PathBuf>) -> Result<AgentConfig, ConfigError> {
        let path = path.into();
        let text = std::fs::read_to_string(&path).map_err(|e| ConfigError::Io { path, source: e })?;
        AgentConfig::parse(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_agent_config() {
        let cfg = AgentConfig::parse(
            "global {\n    mqttPort 1901\n    restPort 8080\n    cacheWindow 60000\n}\nstorage {\n    path /tmp/shv-store\n    nodes 3\n    partitionLevel 2\n    writers 4\n}\n",
        )
        .unwrap();
        assert_eq!(cfg.mqtt_port, 1901);
        assert_eq!(cfg.rest_port, Some(8080));
        assert_eq!(cfg.cache_window_ns, 60_000 * MS);
        assert_eq!(cfg.writers, 4);
        assert_eq!(cfg.store.nodes, 3);
        assert_eq!(cfg.store.partition_level, 2);
        assert_eq!(cfg.store.root, PathBuf::from("/tmp/shv-store"));
    }

    #[test]
    fn defaults_and_missing_storage() {
        let cfg = AgentConfig::parse("storage {\n    path x\n}\n").unwrap();
        assert_eq!(cfg.mqtt_port, 1883);
        assert_eq!(cfg.rest_port, None);
        assert_eq!(cfg.cache_window_ns, 120_000 * MS);
        assert_eq!(cfg.writers, 2);
        assert!(AgentConfig::parse("global {\n}\n").is_err());
    }
}
