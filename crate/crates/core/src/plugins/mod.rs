//! Sampling plugins. A plugin owns named groups of sensors that are read
//! together on one interval; the hosting pusher turns group reads into
//! timestamped readings under `<prefix>/<group>/<sensor>` topics.

pub mod procfile;
pub mod sysfile;
pub mod tester;

use crate::model::Unit;
use crate::proptree::PtNode;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PluginError {
    #[error("unknown plugin kind {0:?}")]
    UnknownKind(String),
    #[error("bad plugin config: {0}")]
    BadConfig(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ReadError {
    #[error("read failed: {0}")]
    Io(String),
    #[error("unparseable value: {0}")]
    Parse(String),
    #[error("metric vanished: {0}")]
    Missing(String),
}

#[derive(Debug, Clone)]
pub struct GroupSpec {
    pub name: String,
    pub interval_ns: u64,
    pub unit: Unit,
    pub scale: f64,
    /// Sensor names within the group, fixed at construction.
    pub sensors: Vec<String>,
}

pub type Sample = (String, Result<i64, ReadError>);

pub trait Plugin: Send {
    fn kind(&self) -> &'static str;
    fn groups(&self) -> &[GroupSpec];
    /// Reads every sensor in one group, in `groups()[idx].sensors` order.
    fn read_group(&mut self, idx: usize) -> Vec<Sample>;
}

/// Builds a plugin from the body of its `plugin <kind> { ... }` block.
pub fn build(kind: &str, config: &PtNode) -> Result<Box<dyn Plugin>, PluginError> {
    match kind {
        "tester" => Ok(Box::new(tester::Tester::from_config(config)?)),
        "procfile" => Ok(Box::new(procfile::ProcFile::from_config(config)?)),
        "sysfile" => Ok(Box::new(sysfile::SysFile::from_config(config)?)),
        other => Err(PluginError::UnknownKind(other.to_owned())),
    }
}

pub fn known_kinds() -> &'static [&'static str] {
    &["tester", "procfile", "sysfile"]
}

/// Metric names become topic components: anything outside the topic
/// charset is replaced with '_'.
pub fn sanitize_name(raw: &str) -> String {
    let mapped: String = raw
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '-') { c } else { '_' })
        .collect();
    if mapped.is_empty() {
        "_".to_owned()
    } else {
        mapped
    }
}

const MS: u64 = 1_000_000;

/// Fields every `group <name> { ... }` block shares: interval in
/// milliseconds (default 1000), unit (default dimensionless), scale
/// (default 1).
pub(crate) fn group_common(node: &PtNode) -> Result<(String, u64, Unit, f64), PluginError> {
    let name = node
        .value
        .clone()
        .filter(|n| !n.is_empty())
        .ok_or_else(|| PluginError::BadConfig("group needs a name".into()))?;
    let interval_ms = node
        .get_u64_or("interval", 1_000)
        .map_err(|e| PluginError::BadConfig(e.to_string()))?;
    if interval_ms == 0 {
        return Err(PluginError::BadConfig(format!("group {name}: interval must be positive")));
    }
    let unit_sym = node.get_str_or("unit", "");
    let unit = Unit::parse(unit_sym)
        .ok_or_else(|| PluginError::BadConfig(format!("group {name}: unknown unit {unit_sym:?}")))?;
    let scale = node
        .get_f64_or("scale", 1.0)
        .map_err(|e| PluginError::BadConfig(e.to_string()))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(PluginError::BadConfig(format!("group {name}: scale must be non-zero and finite")));
    }
    Ok((name, interval_ms * MS, unit, scale))
}
