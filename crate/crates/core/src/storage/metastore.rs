//! Durable registry of sensor metadata and virtual sensor definitions,
//! persisted as a property tree under the store root.

use crate::model::{SensorMetadata, Topic, Unit};
use crate::proptree::{self, PtNode};
use crate::vsensor::{self, parse_expr, MetaSource, VSensorDef, VsError};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::RwLock;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetaStoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error(transparent)]
    Vsensor(#[from] VsError),
}

#[derive(Debug, Clone, PartialEq)]
pub enum MetaEntry {
    Sensor(SensorMetadata),
    Virtual(VSensorDef),
}

/// Topic-keyed metadata map, rewritten atomically on every mutation.
///
/// Intervals and time-to-live values are stored in the file in
/// milliseconds when they divide evenly, in raw nanoseconds otherwise.
#[derive(Debug)]
pub struct MetadataStore {
    path: PathBuf,
    entries: RwLock<BTreeMap<Topic, MetaEntry>>,
}

const MS: u64 = 1_000_000;

impl MetadataStore {
    /// Opens (or creates on first save) the store backed by `path`.
    pub fn open(path: impl Into<PathBuf>) -> Result<MetadataStore, MetaStoreError> {
        let path = path.into();
        let entries = if path.exists() {
            load(&path)?
        } else {
            BTreeMap::new()
        };
        Ok(MetadataStore { path, entries: RwLock::new(entries) })
    }

    pub fn set_sensor(&self, meta: SensorMetadata) -> Result<(), MetaStoreError> {
        let mut entries = self.entries.write().unwrap();
        entries.insert(meta.topic.clone(), MetaEntry::Sensor(meta));
        save(&self.path, &entries)
    }

    /// Validates the definition against everything currently registered
    /// (operands must exist, no dependency cycles) and persists it.
    pub fn define_vsensor(&self, def: VSensorDef) -> Result<(), MetaStoreError> {
        let mut entries = self.entries.write().unwrap();
        vsensor::validate_define(&def, &SnapshotView(&entries))?;
        entries.insert(def.topic.clone(), MetaEntry::Virtual(def));
        save(&self.path, &entries)
    }

    pub fn remove(&self, topic: &Topic) -> Result<bool, MetaStoreError> {
        let mut entries = self.entries.write().unwrap();
        let removed = entries.remove(topic).is_some();
        if removed {
            save(&self.path, &entries)?;
        }
        Ok(removed)
    }

    pub fn get(&self, topic: &Topic) -> Option<MetaEntry> {
        self.entries.read().unwrap().get(topic).cloned()
    }

    pub fn sensors(&self) -> Vec<SensorMetadata> {
        self.entries
            .read()
            .unwrap()
            .values()
            .filter_map(|e| match e {
                MetaEntry::Sensor(m) => Some(m.clone()),
                MetaEntry::Virtual(_) => None,
            })
            .collect()
    }

    pub fn vsensors(&self) -> Vec<VSensorDef> {
        self.entries
            .read()
            .unwrap()
            .values()
            .filter_map(|e| match e {
                MetaEntry::Virtual(d) => Some(d.clone()),
                MetaEntry::Sensor(_) => None,
            })
            .collect()
    }

    pub fn topics(&self) -> Vec<Topic> {
        self.entries.read().unwrap().keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.read().unwrap().is_empty()
    }
}

/// Lock-holding view for cycle validation during define.
struct SnapshotView<'a>(&'a BTreeMap<Topic, MetaEntry>);

impl MetaSource for SnapshotView<'_> {
    fn sensor_meta(&self, topic: &Topic) -> Option<SensorMetadata> {
        match self.0.get(topic) {
            Some(MetaEntry::Sensor(m)) => Some(m.clone()),
            _ => None,
        }
    }
    fn vsensor_def(&self, topic: &Topic) -> Option<VSensorDef> {
        match self.0.get(topic) {
            Some(MetaEntry::Virtual(d)) => Some(d.clone()),
            _ => None,
        }
    }
}

impl MetaSource for MetadataStore {
    fn sensor_meta(&self, topic: &Topic) -> Option<SensorMetadata> {
        match self.get(topic) {
            Some(MetaEntry::Sensor(m)) => Some(m),
            _ => None,
        }
    }
    fn vsensor_def(&self, topic: &Topic) -> Option<VSensorDef> {
        match self.get(topic) {
            Some(MetaEntry::Virtual(d)) => Some(d),
            _ => None,
        }
    }
}

fn duration_node(key: &str, ns: u64) -> PtNode {
    if ns % MS == 0 {
        PtNode::leaf(key, (ns / MS).to_string())
    } else {
        PtNode::leaf(&format!("{key}Ns"), ns.to_string())
    }
}

fn save(path: &Path, entries: &BTreeMap<Topic, MetaEntry>) -> Result<(), MetaStoreError> {
    let mut root = PtNode::root();
    for (topic, entry) in entries {
        match entry {
            MetaEntry::Sensor(m) => {
                let mut node = PtNode::leaf("sensor", topic.to_string());
                node.children.push(PtNode::leaf("unit", m.unit.symbol()));
                node.children.push(PtNode::leaf("scale", m.scale.to_string()));
                node.children.push(duration_node("interval", m.interval_ns));
                node.children.push(duration_node("ttl", m.ttl_ns));
                root.children.push(node);
            }
            MetaEntry::Virtual(d) => {
                let mut node = PtNode::leaf("vsensor", topic.to_string());
                node.children.push(PtNode::leaf("expr", d.expr.to_string()));
                node.children.push(PtNode::leaf("unit", d.unit.symbol()));
                node.children.push(PtNode::leaf("scale", d.scale.to_string()));
                node.children.push(duration_node("interval", d.eval_interval_ns));
                node.children.push(duration_node("tzero", d.t_zero_ns));
                root.children.push(node);
            }
        }
    }
    let text = proptree::serialize(&root);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| MetaStoreError::Io { path: parent.to_path_buf(), source: e })?;
    }
    let tmp = path.with_extension("pt.tmp");
    std::fs::write(&tmp, text).map_err(|e| MetaStoreError::Io { path: tmp.clone(), source: e })?;
    std::fs::rename(&tmp, path).map_err(|e| MetaStoreError::Io { path: path.to_path_buf(), source: e })
}

fn corrupt(path: &Path, reason: impl Into<String>) -> MetaStoreError {
    MetaStoreError::Corrupt { path: path.to_path_buf(), reason: reason.into() }
}

fn duration_of(node: &PtNode, key: &str, default_ns: u64, path: &Path) -> Result<u64, MetaStoreError> {
    if let Some(ns) = node.child(&format!("{key}Ns")) {
        return ns
            .value
            .as_deref()
            .and_then(|v| v.parse::<u64>().ok())
            .ok_or_else(|| corrupt(path, format!("bad {key}Ns")));
    }
    match node.child(key) {
        None => Ok(default_ns),
        Some(ms) => ms
            .value
            .as_deref()
            .and_then(|v| v.parse::<u64>().ok())
            .and_then(|v| v.checked_mul(MS))
            .ok_or_else(|| corrupt(path, format!("bad {key}"))),
    }
}

fn unit_of(node: &PtNode, path: &Path) -> Result<Unit, MetaStoreError> {
    let sym = node.child("unit").and_then(|c| c.value.clone()).unwrap_or_default();
    Unit::parse(&sym).ok_or_else(|| corrupt(path, format!("unknown unit {sym:?}")))
}

fn scale_of(node: &PtNode, path: &Path) -> Result<f64, MetaStoreError> {
    match node.child("scale") {
        None => Ok(1.0),
        Some(c) => c
            .value
            .as_deref()
            .and_then(|v| v.parse::<f64>().ok())
            .filter(|v| *v != 0.0 && v.is_finite())
            .ok_or_else(|| corrupt(path, "bad scale")),
    }
}

fn load(path: &Path) -> Result<BTreeMap<Topic, MetaEntry>, MetaStoreError> {
    let text = std::fs::read_to_string(path).map_err(|e| MetaStoreError::Io { path: path.to_path_buf(), source: e })?;
    let root = proptree::parse(&text).map_err(|e| corrupt(path, e.to_string()))?;
    let mut entries = BTreeMap::new();
    for node in &root.children {
        let topic_str = node
            .value
            .as_deref()
            .ok_or_else(|| corrupt(path, format!("{} entry without a topic", node.key)))?;
        let topic: Topic = topic_str.parse().map_err(|e| corrupt(path, format!("{topic_str}: {e}")))?;
        let entry = match node.key.as_str() {
            "sensor" => {
                let meta = SensorMetadata::new(
                    topic.clone(),
                    unit_of(node, path)?,
                    scale_of(node, path)?,
                    duration_of(node, "interval", 1_000 * MS, path)?,
                    duration_of(node, "ttl", 0, path)?,
                )
                .map_err(|e| corrupt(path, e.to_string()))?;
                MetaEntry::Sensor(meta)
            }
            "vsensor" => {
                let expr_src = node
                    .child("expr")
                    .and_then(|c| c.value.as_deref())
                    .ok_or_else(|| corrupt(path, format!("{topic}: vsensor without expr")))?;
                let expr = parse_expr(expr_src).map_err(|e| corrupt(path, format!("{topic}: {e}")))?;
                let def = VSensorDef {
                    topic: topic.clone(),
                    expr,
                    unit: unit_of(node, path)?,
                    eval_interval_ns: duration_of(node, "interval", 1_000 * MS, path)?,
                    t_zero_ns: duration_of(node, "tzero", 0, path)?,
                    scale: scale_of(node, path)?,
                };
                def.validate().map_err(|e| corrupt(path, e.to_string()))?;
                MetaEntry::Virtual(def)
            }
            other => return Err(corrupt(path, format!("unknown entry kind {other:?}"))),
        };
        if entries.insert(topic.clone(), entry).is_some() {
            return Err(corrupt(path, format!("duplicate entry for {topic}")));
        }
    }
    Ok(entries)
}
