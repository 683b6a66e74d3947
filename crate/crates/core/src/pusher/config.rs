//! Pusher configuration: a `global` block plus one `plugin <kind>` block
//! per hosted plugin. Durations are written in milliseconds.

use crate::model::Topic;
use crate::proptree::{self, PtError, PtNode};
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

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

/// Where a config came from, so a reload can re-read it.
#[derive(Debug, Clone)]
pub enum ConfigSource {
    File(PathBuf),
    Literal(String),
}

impl ConfigSource {
    pub fn read(&self) -> Result<PusherConfig, ConfigError> {
        match self {
            ConfigSource::File(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| ConfigError::Io { path: path.clone(), source: e })?;
                PusherConfig::parse(&text)
            }
            ConfigSource::Literal(text) => PusherConfig::parse(text),
        }
    }
}

const MS: u64 = 1_000_000;

#[derive(Debug, Clone)]
pub struct PusherConfig {
    /// Collect agent address, host:port.
    pub broker: String,
    /// Topic prefix identifying this pusher's place in the hierarchy;
    /// sensors live at `<prefix>/<group>/<name>`.
    pub prefix: Topic,
    pub client_id: String,
    pub threads: usize,
    pub send_interval_ns: u64,
    pub cache_window_ns: u64,
    /// Status API bind port; absent disables it, 0 picks an ephemeral port.
    pub rest_port: Option<u16>,
    /// Plugin kind plus its raw config block, kept for reloads.
    pub plugins: Vec<(String, PtNode)>,
}

impl PusherConfig {
    pub fn parse(text: &str) -> Result<PusherConfig, ConfigError> {
        let root = proptree::parse(text)?;
        let global = root.child("global").ok_or_else(|| invalid("missing global block"))?;
        let prefix: Topic = global
            .get_str("mqttprefix")?
            .parse()
            .map_err(|e| invalid(format!("mqttprefix: {e}")))?;
        if prefix.depth() + 2 > crate::model::MAX_COMPONENTS {
            return Err(invalid(format!(
                "mqttprefix {prefix} too deep: group and sensor names need two more levels"
            )));
        }
        let client_id = global.get_str_or("mqttClientId", "").to_owned();
        let client_id = if client_id.is_empty() { prefix.to_string() } else { client_id };
        let threads = global.get_u64_or("threads", 2)?.max(1) as usize;
        let send_interval_ms = global.get_u64_or("sendInterval", 1_000)?;
        if send_interval_ms == 0 {
            return Err(invalid("sendInterval must be positive"));
        }
        let cache_window_ms = global.get_u64_or("cacheWindow", 120_000)?;
        let rest_port = match global.child("restPort") {
            None => None,
            Some(_) => Some(
                u16::try_from(global.get_u64("restPort")?)
                    .map_err(|_| invalid("restPort out of range"))?,
            ),
        };
        let mut plugins = Vec::new();
        for node in root.children_named("plugin") {
            let kind = node
                .value
                .clone()
                .filter(|k| !k.is_empty())
                .ok_or_else(|| invalid("plugin block needs a kind"))?;
            if plugins.iter().any(|(k, _)| *k == kind) {
                return Err(invalid(format!("duplicate plugin block {kind:?}")));
            }
            plugins.push((kind, node.clone()));
        }
        if plugins.is_empty() {
            return Err(invalid("no plugin blocks configured"));
        }
        Ok(PusherConfig {
            broker: global.get_str_or("broker", "127.0.0.1:1883").to_owned(),
            prefix,
            client_id,
            threads,
            send_interval_ns: send_interval_ms * MS,
            cache_window_ns: cache_window_ms * MS,
            rest_port,
            plugins,
        })
    }

    pub fn load(path: impl Into<PathBuf>) -> Result<(PusherConfig, ConfigSource), ConfigError> {
        let source = ConfigSource::File(path.into());
        let config = source.read()?;
        Ok((config, source))
    }
}
