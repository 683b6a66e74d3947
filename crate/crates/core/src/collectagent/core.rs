//! Protocol-independent agent core: publish handling, the live cache,
//! and the storage sink. The MQTT and HTTP front ends are thin wrappers
//! around this.

use super::AgentConfig;
use crate::cache::SensorCache;
use crate::model::{
    fnv1a64, LevelDictionary, SensorId, SensorMetadata, SidError, Topic, TopicError, Unit,
};
use crate::storage::{MetaEntry, MetadataStore, MetaStoreError, StorageError, Store};
use crate::wire;
use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{Receiver, SyncSender};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error(transparent)]
    Dict(#[from] crate::model::DictError),
    #[error(transparent)]
    Meta(#[from] MetaStoreError),
}

/// Why one publish message was dropped. The session survives these; only
/// framing violations kill a connection.
#[derive(Debug, Error)]
pub enum PublishError {
    #[error("bad topic: {0}")]
    Topic(#[from] TopicError),
    #[error("bad payload: {0}")]
    Payload(String),
    #[error(transparent)]
    Dict(#[from] SidError),
    #[error(transparent)]
    Storage(#[from] StorageError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AgentStats {
    pub sessions_opened: u64,
    pub sessions_active: u64,
    pub messages: u64,
    pub readings: u64,
    /// Readings committed to the store (lags `readings` until the write
    /// queue drains).
    pub stored: u64,
    pub malformed: u64,
    pub violations: u64,
    pub store_errors: u64,
}

/// Outcome of a live-cache query.
#[derive(Debug, Clone, PartialEq)]
pub enum QueryOutcome {
    Value { timestamp_ns: u64, value: f64, unit: Unit },
    UnknownSensor,
    /// Sensor known, but nothing usable in the cache window.
    NoData,
}

/// Write queue batching: flush at this many buffered readings or after
/// this long, whichever comes first.
const FLUSH_READINGS: usize = 1_000;
const FLUSH_AFTER: Duration = Duration::from_millis(100);
const QUEUE_BATCHES: usize = 4_096;

enum Sink {
    Direct,
    Queued {
        senders: Vec<SyncSender<(SensorId, Vec<(u64, i64)>)>>,
        writers: Vec<std::thread::JoinHandle<()>>,
    },
}

pub struct AgentCore {
    store: Arc<Store>,
    dict: LevelDictionary,
    dict_path: PathBuf,
    meta: MetadataStore,
    cache_window_ns: u64,
    caches: RwLock<HashMap<SensorId, Arc<Mutex<SensorCache>>>>,
    sink: RwLock<Sink>,
    messages: AtomicU64,
    readings: AtomicU64,
    malformed: AtomicU64,
    violations: AtomicU64,
    sessions_opened: AtomicU64,
    sessions_active: AtomicU64,
    store_errors: Arc<AtomicU64>,
}

impl AgentCore {
    pub fn open(config: &AgentConfig) -> Result<AgentCore, AgentError> {
        let store = Arc::new(Store::open(config.store.clone())?);
        // Shared lookup state lives on node 0 regardless of partitioning.
        let node0 = config.store.root.join("node0");
        let dict_path = node0.join("dictionary.tsv");
        let dict = if dict_path.exists() {
            LevelDictionary::load(&dict_path)?
        } else {
            LevelDictionary::new()
        };
        let meta = MetadataStore::open(node0.join("metadata.pt"))?;
        let store_errors = Arc::new(AtomicU64::new(0));
        let sink = if config.writers == 0 {
            Sink::Direct
        } else {
            spawn_writers(config.writers, &store, &store_errors)
        };
        Ok(AgentCore {
            store,
            dict,
            dict_path,
            meta,
            cache_window_ns: config.cache_window_ns,
            caches: RwLock::new(HashMap::new()),
            sink: RwLock::new(sink),
            messages: AtomicU64::new(0),
            readings: AtomicU64::new(0),
            malformed: AtomicU64::new(0),
            violations: AtomicU64::new(0),
            sessions_opened: AtomicU64::new(0),
            sessions_active: AtomicU64::new(0),
            store_errors,
        })
    }

    /// Ingests one publish message: topic to sensor id, payload to
    /// records, records to cache and store.
    pub fn handle_publish(&self, topic: &str, payload: &[u8]) -> Result<usize, PublishError> {
        let result = self.ingest(topic, payload);
        match &result {
            Ok(n) => {
                self.messages.fetch_add(1, Ordering::Relaxed);
                self.readings.fetch_add(*n as u64, Ordering::Relaxed);
            }
            Err(_) => {
                self.malformed.fetch_add(1, Ordering::Relaxed);
            }
        }
        result
    }

    fn ingest(&self, topic: &str, payload: &[u8]) -> Result<usize, PublishError> {
        let topic: Topic = topic.parse()?;
        let rows = wire::decode_payload(payload).map_err(|e| PublishError::Payload(e.to_string()))?;
        if rows.is_empty() {
            return Ok(0);
        }
        if rows.iter().any(|&(ts, _)| ts == 0) {
            return Err(PublishError::Payload("zero timestamp".into()));
        }
        let sid = self.dict.encode(&topic)?;
        {
            let cache = self.cache_for(sid);
            let mut cache = cache.lock().unwrap();
            for &(ts, v) in &rows {
                cache.insert(ts, v);
            }
        }
        match &*self.sink.read().unwrap() {
            Sink::Direct => self.store.insert_batch(sid, &rows)?,
            Sink::Queued { senders, .. } => {
                // Sharding by sensor keeps each sensor's records ordered
                // through the queue.
                let shard = (fnv1a64(&sid.0.to_be_bytes()) % senders.len() as u64) as usize;
                senders[shard]
                    .send((sid, rows.clone()))
                    .map_err(|_| PublishError::Payload("write queue closed".into()))?;
            }
        }
        Ok(rows.len())
    }

    fn cache_for(&self, sid: SensorId) -> Arc<Mutex<SensorCache>> {
        if let Some(c) = self.caches.read().unwrap().get(&sid) {
            return Arc::clone(c);
        }
        let mut caches = self.caches.write().unwrap();
        Arc::clone(
            caches
                .entry(sid)
                .or_insert_with(|| Arc::new(Mutex::new(SensorCache::new(self.cache_window_ns)))),
        )
    }

    /// Everything queryable: sensors seen live plus sensors persisted by
    /// earlier runs.
    pub fn topics(&self) -> Vec<Topic> {
        let mut sids: Vec<SensorId> = self.store.sids();
        {
            let caches = self.caches.read().unwrap();
            sids.extend(caches.keys().copied());
        }
        sids.sort();
        sids.dedup();
        let mut topics: Vec<Topic> = sids.into_iter().filter_map(|s| self.dict.decode(s).ok()).collect();
        topics.sort_by_key(|t| t.to_string());
        topics
    }

    fn scale_and_unit(&self, topic: &Topic) -> (f64, Unit) {
        match self.meta.get(topic) {
            Some(MetaEntry::Sensor(m)) => (m.scale, m.unit),
            Some(MetaEntry::Virtual(d)) => (d.scale, d.unit),
            None => (1.0, Unit::dimensionless()),
        }
    }

    /// Newest cached reading. Values older than the cache window (by
    /// wall clock) count as no data: "latest" answers what the sensor
    /// reads now, not what it once read.
    pub fn latest(&self, topic: &Topic, now_ns: u64) -> QueryOutcome {
        let Some(sid) = self.dict.lookup(topic) else {
            return QueryOutcome::UnknownSensor;
        };
        let Some(cache) = self.caches.read().unwrap().get(&sid).cloned() else {
            return QueryOutcome::NoData;
        };
        let latest = cache.lock().unwrap().latest();
        match latest {
            None => QueryOutcome::NoData,
            Some((ts, _)) if now_ns.saturating_sub(ts) > self.cache_window_ns => QueryOutcome::NoData,
            Some((ts, raw)) => {
                let (scale, unit) = self.scale_and_unit(topic);
                QueryOutcome::Value { timestamp_ns: ts, value: raw as f64 * scale, unit }
            }
        }
    }

    /// Cache average over the trailing window, relative to the newest
    /// entry.
    pub fn average(&self, topic: &Topic, window_ns: u64) -> QueryOutcome {
        let Some(sid) = self.dict.lookup(topic) else {
            return QueryOutcome::UnknownSensor;
        };
        let Some(cache) = self.caches.read().unwrap().get(&sid).cloned() else {
            return QueryOutcome::NoData;
        };
        let result = cache.lock().unwrap().average(window_ns);
        match result {
            None => QueryOutcome::NoData,
            Some(avg) => {
                let (scale, unit) = self.scale_and_unit(topic);
                QueryOutcome::Value { timestamp_ns: 0, value: avg * scale, unit }
            }
        }
    }

    pub fn cache_len(&self, topic: &Topic) -> Option<usize> {
        let sid = self.dict.lookup(topic)?;
        let cache = self.caches.read().unwrap().get(&sid).cloned()?;
        let len = cache.lock().unwrap().len();
        Some(len)
    }

    pub fn stats(&self) -> AgentStats {
        AgentStats {
            sessions_opened: self.sessions_opened.load(Ordering::Relaxed),
            sessions_active: self.sessions_active.load(Ordering::Relaxed),
            messages: self.messages.load(Ordering::Relaxed),
            readings: self.readings.load(Ordering::Relaxed),
            stored: self.store.insert_count(),
            malformed: self.malformed.load(Ordering::Relaxed),
            violations: self.violations.load(Ordering::Relaxed),
            store_errors: self.store_errors.load(Ordering::Relaxed),
        }
    }

    pub fn note_violation(&self) {
        self.violations.fetch_add(1, Ordering::Relaxed);
    }

    pub fn session_opened(&self) {
        self.sessions_opened.fetch_add(1, Ordering::Relaxed);
        self.sessions_active.fetch_add(1, Ordering::Relaxed);
    }

    pub fn session_closed(&self) {
        self.sessions_active.fetch_sub(1, Ordering::Relaxed);
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    pub fn dict(&self) -> &LevelDictionary {
        &self.dict
    }

    pub fn metadata(&self) -> &MetadataStore {
        &self.meta
    }

    pub fn register_sensor(&self, meta: SensorMetadata) -> Result<(), AgentError> {
        self.meta.set_sensor(meta)?;
        Ok(())
    }

    /// Writes the dictionary out if it changed since the last call.
    pub fn persist_dict(&self) -> Result<(), AgentError> {
        if self.dict.take_dirty() {
            self.dict.save(&self.dict_path)?;
        }
        Ok(())
    }

    /// Drains the write queue, flushes the store, and persists the
    /// dictionary. The core stays usable; later publishes store
    /// synchronously.
    pub fn drain(&self) -> Result<(), AgentError> {
        let old = std::mem::replace(&mut *self.sink.write().unwrap(), Sink::Direct);
        if let Sink::Queued { senders, writers } = old {
            // Dropping the senders closes the queue; writers flush what
            // is left and exit.
            drop(senders);
            for w in writers {
                let _ = w.join();
            }
        }
        self.store.flush()?;
        self.persist_dict()
    }
}

fn spawn_writers(count: usize, store: &Arc<Store>, errors: &Arc<AtomicU64>) -> Sink {
    let mut senders = Vec::with_capacity(count);
    let mut writers = Vec::with_capacity(count);
    for i in 0..count {
        let (tx, rx) = std::sync::mpsc::sync_channel(QUEUE_BATCHES);
        let store = Arc::clone(store);
        let errors = Arc::clone(errors);
        senders.push(tx);
        writers.push(
            std::thread::Builder::new()
                .name(format!("writer{i}"))
                .spawn(move || writer_loop(rx, store, errors))
                .expect("spawn storage writer"),
        );
    }
    Sink::Queued { senders, writers }
}

fn writer_loop(rx: Receiver<(SensorId, Vec<(u64, i64)>)>, store: Arc<Store>, errors: Arc<AtomicU64>) {
    let mut pending: HashMap<SensorId, Vec<(u64, i64)>> = HashMap::new();
    let mut pending_rows = 0usize;
    let mut oldest = std::time::Instant::now();
    loop {
        match rx.recv_timeout(FLUSH_AFTER) {
            Ok((sid, rows)) => {
                if pending_rows == 0 {
                    oldest = std::time::Instant::now();
                }
                pending_rows += rows.len();
                pending.entry(sid).or_default().extend(rows);
                if pending_rows < FLUSH_READINGS && oldest.elapsed() < FLUSH_AFTER {
                    continue;
                }
            }
            Err(std::sync::mpsc::RecvTimeoutError::Timeout) => {
                if pending_rows == 0 {
                    continue;
                }
            }
            Err(std::sync::mpsc::RecvTimeoutError::Disconnected) => {
                flush_pending(&store, &mut pending, &errors);
                return;
            }
        }
        flush_pending(&store, &mut pending, &errors);
        pending_rows = 0;
    }
}

fn flush_pending(
    store: &Store,
    pending: &mut HashMap<SensorId, Vec<(u64, i64)>>,
    errors: &AtomicU64,
) {
    for (sid, rows) in pending.drain() {
        if store.insert_batch(sid, &rows).is_err() {
            errors.fetch_add(rows.len() as u64, Ordering::Relaxed);
        }
    }
}
