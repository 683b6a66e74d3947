//! Reads sysfs-style one-value-per-file sensors, e.g. hwmon temperature
//! inputs. Each configured file becomes one sensor.

use super::{group_common, sanitize_name, GroupSpec, Plugin, PluginError, ReadError, Sample};
use crate::proptree::PtNode;
use std::path::{Path, PathBuf};

pub struct SysFile {
    groups: Vec<GroupSpec>,
    paths: Vec<Vec<PathBuf>>,
}

fn read_value(path: &Path) -> Result<i64, ReadError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ReadError::Io(format!("{}: {e}", path.display())))?;
    let trimmed = text.trim();
    if let Ok(v) = trimmed.parse::<i64>() {
        return Ok(v);
    }
    // Some sysfs files report decimals; keep the integer convention by
    // rounding, the group scale restores the intended magnitude.
    match trimmed.parse::<f64>() {
        Ok(f) if f.is_finite() && f.abs() < i64::MAX as f64 => Ok(f.round() as i64),
        _ => Err(ReadError::Parse(format!("{}: {trimmed:?}", path.display()))),
    }
}

impl SysFile {
    pub fn from_config(config: &PtNode) -> Result<SysFile, PluginError> {
        let mut groups = Vec::new();
        let mut paths = Vec::new();
        for g in config.children_named("group") {
            let (name, interval_ns, unit, scale) = group_common(g)?;
            let mut sensors = Vec::new();
            let mut group_paths = Vec::new();
            for s in g.children_named("sensor") {
                let path = PathBuf::from(
                    s.get_str("path").map_err(|e| PluginError::BadConfig(e.to_string()))?,
                );
                let sensor_name = match s.value.clone().filter(|v| !v.is_empty()) {
                    Some(explicit) => sanitize_name(&explicit),
                    None => sanitize_name(
                        path.file_stem()
                            .and_then(|s| s.to_str())
                            .ok_or_else(|| PluginError::BadConfig(format!("{}: no usable file name", path.display())))?,
                    ),
                };
                read_value(&path).map_err(|e| PluginError::BadConfig(format!("group {name}: {e}")))?;
                sensors.push(sensor_name);
                group_paths.push(path);
            }
            if sensors.is_empty() {
                return Err(PluginError::BadConfig(format!("group {name}: needs at least one sensor")));
            }
            groups.push(GroupSpec { name, interval_ns, unit, scale, sensors });
            paths.push(group_paths);
        }
        if groups.is_empty() {
            return Err(PluginError::BadConfig("sysfile needs at least one group".into()));
        }
        Ok(SysFile { groups, paths })
    }
}

impl Plugin for SysFile {
    fn kind(&self) -> &'static str {
        "sysfile"
    }

    fn groups(&self) -> &[GroupSpec] {
        &self.groups
    }

    fn read_group(&mut self, idx: usize) -> Vec<Sample> {
        self.groups[idx]
            .sensors
            .iter()
            .zip(&self.paths[idx])
            .map(|(name, path)| (name.clone(), read_value(path)))
            .collect()
    }
}
