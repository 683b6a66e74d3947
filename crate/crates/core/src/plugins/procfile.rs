//! Reads procfs-style text tables (meminfo, vmstat, /proc/stat). The
//! metric set is discovered once at construction; later reads report a
//! vanished metric instead of silently shrinking the group.

use super::{group_common, sanitize_name, GroupSpec, Plugin, PluginError, ReadError, Sample};
use crate::proptree::PtNode;
use std::path::PathBuf;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    /// `MemTotal:       16315688 kB`
    MemInfo,
    /// `nr_free_pages 1234`
    VmStat,
    /// `/proc/stat`: per-cpu time columns plus simple counters.
    ProcStat,
}

impl Format {
    fn parse_name(s: &str) -> Result<Format, PluginError> {
        match s {
            "meminfo" => Ok(Format::MemInfo),
            "vmstat" => Ok(Format::VmStat),
            "procstat" => Ok(Format::ProcStat),
            other => Err(PluginError::BadConfig(format!("unknown procfile format {other:?}"))),
        }
    }
}

const CPU_FIELDS: [&str; 8] = ["user", "nice", "system", "idle", "iowait", "irq", "softirq", "steal"];

fn parse_table(format: Format, text: &str) -> Vec<(String, i64)> {
    let mut out: Vec<(String, i64)> = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        match format {
            Format::MemInfo => {
                let Some((key, rest)) = line.split_once(':') else { continue };
                let Some(tok) = rest.split_whitespace().next() else { continue };
                if let Ok(v) = tok.parse::<i64>() {
                    out.push((sanitize_name(key), v));
                }
            }
            Format::VmStat => {
                let mut it = line.split_whitespace();
                let (Some(key), Some(tok)) = (it.next(), it.next()) else { continue };
                if let Ok(v) = tok.parse::<i64>() {
                    out.push((sanitize_name(key), v));
                }
            }
            Format::ProcStat => {
                let mut it = line.split_whitespace();
                let Some(key) = it.next() else { continue };
                if key.starts_with("cpu") {
                    for (field, tok) in CPU_FIELDS.iter().zip(it) {
                        if let Ok(v) = tok.parse::<i64>() {
                            out.push((sanitize_name(&format!("{key}_{field}")), v));
                        }
                    }
                } else if let Some(Ok(v)) = it.next().map(str::parse::<i64>) {
                    // intr and softirq carry per-source tails; keep the total.
                    out.push((sanitize_name(key), v));
                }
            }
        }
    }
    // Sanitization could alias two keys; first occurrence wins.
    let mut seen = std::collections::HashSet::new();
    out.retain(|(name, _)| seen.insert(name.clone()));
    out
}

pub struct ProcFile {
    groups: Vec<GroupSpec>,
    sources: Vec<(PathBuf, Format)>,
}

impl ProcFile {
    pub fn from_config(config: &PtNode) -> Result<ProcFile, PluginError> {
        let mut groups = Vec::new();
        let mut sources = Vec::new();
        for g in config.children_named("group") {
            let (name, interval_ns, unit, scale) = group_common(g)?;
            let path = PathBuf::from(
                g.get_str("path").map_err(|e| PluginError::BadConfig(e.to_string()))?,
            );
            let format = Format::parse_name(
                g.get_str("format").map_err(|e| PluginError::BadConfig(e.to_string()))?,
            )?;
            let text = std::fs::read_to_string(&path)
                .map_err(|e| PluginError::Io { path: path.display().to_string(), source: e })?;
            let sensors: Vec<String> = parse_table(format, &text).into_iter().map(|(n, _)| n).collect();
            if sensors.is_empty() {
                return Err(PluginError::BadConfig(format!("group {name}: no metrics found in {}", path.display())));
            }
            groups.push(GroupSpec { name, interval_ns, unit, scale, sensors });
            sources.push((path, format));
        }
        if groups.is_empty() {
            return Err(PluginError::BadConfig("procfile needs at least one group".into()));
        }
        Ok(ProcFile { groups, sources })
    }
}

impl Plugin for ProcFile {
    fn kind(&self) -> &'static str {
        "procfile"
    }

    fn groups(&self) -> &[GroupSpec] {
        &self.groups
    }

    fn read_group(&mut self, idx: usize) -> Vec<Sample> {
        let group = &self.groups[idx];
        let (path, format) = &self.sources[idx];
        let table = match std::fs::read_to_string(path) {
            Ok(text) => parse_table(*format, &text),
            Err(e) => {
                let err = ReadError::Io(format!("{}: {e}", path.display()));
                return group.sensors.iter().map(|n| (n.clone(), Err(err.clone()))).collect();
            }
        };
        let by_name: std::collections::HashMap<&str, i64> =
            table.iter().map(|(n, v)| (n.as_str(), *v)).collect();
        group
            .sensors
            .iter()
            .map(|name| {
                let value = by_name
                    .get(name.as_str())
                    .copied()
                    .ok_or_else(|| ReadError::Missing(name.clone()));
                (name.clone(), value)
            })
            .collect()
    }
}
