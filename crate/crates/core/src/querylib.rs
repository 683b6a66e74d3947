//! Read-side access to a store directory: topic resolution, scaling,
//! on-demand virtual sensor evaluation, calculus over series, and CSV
//! import/export. This is what the query tools link against; it opens the
//! same files the agent writes.

use crate::model::{scaled, LevelDictionary, SensorMetadata, Topic, Unit};
use crate::storage::{MetaEntry, MetadataStore, Store};
use crate::vsensor::{self, EvalCtx, VsError};
use std::io::{BufRead, Write};
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum QueryError {
    #[error("unknown sensor {0}")]
    UnknownSensor(Topic),
    #[error("not enough data for {0} in the requested range")]
    NotEnoughData(Topic),
    #[error(transparent)]
    Storage(#[from] crate::storage::StorageError),
    #[error(transparent)]
    Meta(#[from] crate::storage::MetaStoreError),
    #[error(transparent)]
    Dict(#[from] crate::model::DictError),
    #[error(transparent)]
    Sid(#[from] crate::model::SidError),
    #[error(transparent)]
    Vsensor(#[from] VsError),
    #[error("line {line}: {reason}")]
    BadRow { line: usize, reason: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// A scaled series with the unit it is expressed in.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    pub topic: Topic,
    pub unit: Unit,
    pub points: Vec<(u64, f64)>,
}

pub struct QueryHandle {
    store: Store,
    dict: LevelDictionary,
    dict_path: PathBuf,
    meta: MetadataStore,
}

pub const CSV_HEADER: &str = "sensor,timestamp,value";

impl QueryHandle {
    /// Opens the store rooted at `root` together with the dictionary and
    /// metadata the agent keeps under `node0/`.
    pub fn open(root: impl Into<PathBuf>) -> Result<QueryHandle, QueryError> {
        let root = root.into();
        let store = Store::open_root(&root)?;
        let dict_path = root.join("node0").join("dictionary.tsv");
        let dict = if dict_path.exists() {
            LevelDictionary::load(&dict_path)?
        } else {
            LevelDictionary::new()
        };
        let meta = MetadataStore::open(root.join("node0").join("metadata.pt"))?;
        Ok(QueryHandle { store, dict, dict_path, meta })
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn metadata(&self) -> &MetadataStore {
        &self.meta
    }

    pub fn dict(&self) -> &LevelDictionary {
        &self.dict
    }

    /// Every topic this store knows: stored series plus metadata-only
    /// entries (virtual sensors may not have been evaluated yet).
    pub fn topics(&self) -> Vec<Topic> {
        let mut out: Vec<Topic> = Vec::new();
        for sid in self.store.sids() {
            if let Ok(t) = self.dict.decode(sid) {
                out.push(t);
            }
        }
        out.extend(self.meta.topics());
        out.sort();
        out.dedup();
        out
    }

    fn resolve(&self, topic: &Topic) -> Result<(MetaEntry, Option<crate::model::SensorId>), QueryError> {
        if let Some(entry) = self.meta.get(topic) {
            let sid = self.dict.lookup(topic);
            return Ok((entry, sid));
        }
        match self.dict.lookup(topic) {
            Some(sid) => Ok((MetaEntry::Sensor(SensorMetadata::default_for(topic.clone())), Some(sid))),
            None => Err(QueryError::UnknownSensor(topic.clone())),
        }
    }

    fn eval_ctx(&self) -> EvalCtx<'_> {
        EvalCtx { meta: &self.meta, dict: &self.dict, series: &self.store }
    }

    /// Scaled values over `[t0, t1)`. Virtual sensors are evaluated on
    /// their grid (and cached) as part of the call.
    pub fn fetch(&self, topic: &Topic, t0: u64, t1: u64) -> Result<QueryResult, QueryError> {
        let (entry, sid) = self.resolve(topic)?;
        match entry {
            MetaEntry::Virtual(def) => {
                let out = vsensor::evaluate(&def, t0, t1, &self.eval_ctx())?;
                Ok(QueryResult { topic: topic.clone(), unit: def.unit, points: out.points })
            }
            MetaEntry::Sensor(m) => {
                let points = match sid {
                    None => Vec::new(),
                    Some(sid) => self
                        .store
                        .query(sid, t0, t1)?
                        .into_iter()
                        .map(|(ts, raw)| (ts, scaled(raw, &m)))
                        .collect(),
                };
                Ok(QueryResult { topic: topic.clone(), unit: m.unit, points })
            }
        }
    }

    /// Stored integer records over `[t0, t1)`, exactly as written. For a
    /// virtual sensor this evaluates first, then reads its cache.
    pub fn fetch_raw(&self, topic: &Topic, t0: u64, t1: u64) -> Result<Vec<(u64, i64)>, QueryError> {
        let (entry, sid) = self.resolve(topic)?;
        if let MetaEntry::Virtual(def) = &entry {
            vsensor::evaluate(def, t0, t1, &self.eval_ctx())?;
        }
        let sid = match (sid, &entry) {
            (Some(sid), _) => sid,
            (None, MetaEntry::Virtual(_)) => match self.dict.lookup(topic) {
                Some(sid) => sid,
                None => return Ok(Vec::new()),
            },
            (None, MetaEntry::Sensor(_)) => return Ok(Vec::new()),
        };
        Ok(self.store.query(sid, t0, t1)?)
    }

    /// Trapezoidal time integral over `[t0, t1)`. Needs at least two
    /// points; time is converted to seconds, so integrating W gives J.
    pub fn integral(&self, topic: &Topic, t0: u64, t1: u64) -> Result<(f64, Unit), QueryError> {
        let r = self.fetch(topic, t0, t1)?;
        if r.points.len() < 2 {
            return Err(QueryError::NotEnoughData(topic.clone()));
        }
        let mut acc = 0.0;
        for pair in r.points.windows(2) {
            let (ta, va) = pair[0];
            let (tb, vb) = pair[1];
            acc += (va + vb) * 0.5 * ((tb - ta) as f64 / 1e9);
        }
        Ok((acc, r.unit.integrated()))
    }

    /// Finite-difference rate of change: n points in, n-1 out, each stamped
    /// at the later sample of its pair.
    pub fn derivative(&self, topic: &Topic, t0: u64, t1: u64) -> Result<QueryResult, QueryError> {
        let r = self.fetch(topic, t0, t1)?;
        if r.points.len() < 2 {
            return Err(QueryError::NotEnoughData(topic.clone()));
        }
        let points = r
            .points
            .windows(2)
            .map(|pair| {
                let (ta, va) = pair[0];
                let (tb, vb) = pair[1];
                (tb, (vb - va) / ((tb - ta) as f64 / 1e9))
            })
            .collect();
        Ok(QueryResult { topic: r.topic, unit: r.unit.differentiated(), points })
    }

    pub fn csv_export(
        &self,
        topics: &[Topic],
        t0: u64,
        t1: u64,
        out: &mut dyn Write,
    ) -> Result<u64, QueryError> {
        self.export_with(topics, out, |topic| {
            Ok(self
                .fetch(topic, t0, t1)?
                .points
                .into_iter()
                .map(|(ts, v)| (ts, v.to_string()))
                .collect())
        })
    }

    pub fn csv_export_raw(
        &self,
        topics: &[Topic],
        t0: u64,
        t1: u64,
        out: &mut dyn Write,
    ) -> Result<u64, QueryError> {
        self.export_with(topics, out, |topic| {
            Ok(self
                .fetch_raw(topic, t0, t1)?
                .into_iter()
                .map(|(ts, v)| (ts, v.to_string()))
                .collect())
        })
    }

    fn export_with(
        &self,
        topics: &[Topic],
        out: &mut dyn Write,
        mut rows_for: impl FnMut(&Topic) -> Result<Vec<(u64, String)>, QueryError>,
    ) -> Result<u64, QueryError> {
        let io = |e| QueryError::Io { path: "<output>".into(), source: e };
        writeln!(out, "{CSV_HEADER}").map_err(io)?;
        let mut count = 0u64;
        for topic in topics {
            for (ts, v) in rows_for(topic)? {
                writeln!(out, "{topic},{ts},{v}").map_err(io)?;
                count += 1;
            }
        }
        Ok(count)
    }

    /// Loads a `sensor,timestamp,value` file into the store. The whole file
    /// is validated before anything is written; any bad row aborts the
    /// import with its 1-based line number (the header is line 1). Values
    /// are quantized by each sensor's scale; sensors never seen before get
    /// default metadata registered. Returns the number of rows written.
    pub fn csv_import(&self, input: impl BufRead) -> Result<u64, QueryError> {
        let bad = |line: usize, reason: &str| QueryError::BadRow { line, reason: reason.to_owned() };
        let mut lines = input.lines().enumerate();
        match lines.next() {
            Some((_, Ok(h))) if h.trim_end() == CSV_HEADER => {}
            Some((_, Ok(_))) => return Err(bad(1, "header must be \"sensor,timestamp,value\"")),
            Some((_, Err(e))) => return Err(QueryError::Io { path: "<input>".into(), source: e }),
            None => return Err(bad(1, "empty input")),
        }

        // First pass: parse and quantize everything, registering metadata
        // only in memory so a later bad row leaves no trace.
        let mut batches: std::collections::BTreeMap<Topic, Vec<(u64, i64)>> = Default::default();
        let mut fresh: Vec<Topic> = Vec::new();
        let mut count = 0u64;
        for (idx, line) in lines {
            let lineno = idx + 1;
            let line = line.map_err(|e| QueryError::Io { path: "<input>".into(), source: e })?;
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            let (topic, ts, value) = match (fields.next(), fields.next(), fields.next(), fields.next()) {
                (Some(a), Some(b), Some(c), None) => (a, b, c),
                _ => return Err(bad(lineno, "expected sensor,timestamp,value")),
            };
            let topic: Topic = topic.parse().map_err(|e| bad(lineno, &format!("sensor: {e}")))?;
            let ts: u64 = ts.parse().map_err(|_| bad(lineno, "timestamp must be an integer nanosecond count"))?;
            if ts == 0 {
                return Err(bad(lineno, "timestamp must be positive"));
            }
            let value: f64 = value.parse().map_err(|_| bad(lineno, "value must be numeric"))?;
            if !value.is_finite() {
                return Err(bad(lineno, "value must be finite"));
            }
            let scale = match self.meta.get(&topic) {
                Some(MetaEntry::Sensor(m)) => m.scale,
                Some(MetaEntry::Virtual(_)) => {
                    return Err(bad(lineno, "cannot import into a virtual sensor"))
                }
                None => {
                    if !batches.contains_key(&topic) {
                        fresh.push(topic.clone());
                    }
                    1.0
                }
            };
            let raw = (value / scale).round();
            if !(raw >= i64::MIN as f64 && raw <= i64::MAX as f64) {
                return Err(bad(lineno, "value is out of range at this sensor's scale"));
            }
            batches.entry(topic).or_default().push((ts, raw as i64));
            count += 1;
        }

        for topic in fresh {
            self.meta.set_sensor(SensorMetadata::default_for(topic))?;
        }
        for (topic, rows) in &batches {
            let sid = self.dict.encode(topic)?;
            self.store.insert_batch(sid, rows)?;
        }
        self.store.flush()?;
        self.persist_dict()?;
        Ok(count)
    }

    /// Saves the dictionary if importing or evaluation registered topics.
    pub fn persist_dict(&self) -> Result<(), QueryError> {
        if self.dict.take_dirty() {
            if let Some(parent) = self.dict_path.parent() {
                std::fs::create_dir_all(parent)
                    .map_err(|e| QueryError::Io { path: parent.display().to_string(), source: e })?;
            }
            self.dict.save(&self.dict_path)?;
        }
        Ok(())
    }
}
