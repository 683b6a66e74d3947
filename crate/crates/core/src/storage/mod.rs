//! Embedded per-sensor time-series store.
//!
//! Layout under one root:
//!
//! ```text
//! <root>/store.pt                        partitioning config, written on creation
//! <root>/floor                           store-wide erase floor from delete_before
//! <root>/node<k>/<sid-as-32-hex>/<seq>.seg   append-only segments: "SHV1" magic + 16-byte records
//! <root>/node<k>/<sid-as-32-hex>/index       watermark + closed-segment directory
//! <root>/node0/metadata.pt               sensor/virtual-sensor metadata
//! <root>/node0/dictionary.tsv            topic component dictionary
//! ```
//!
//! A sensor id is pinned to node `(ordinal at partitionLevel) mod nodes`.
//! Within one sensor, duplicate timestamps resolve to the latest insert,
//! and everything below the delete watermark is invisible to queries
//! forever, compaction included.

pub mod metastore;

pub use metastore::{MetaEntry, MetaStoreError, MetadataStore};

use crate::model::SensorId;
use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use thiserror::Error;

pub const SEGMENT_MAGIC: &[u8; 4] = b"SHV1";
const RECORD_BYTES: u64 = 16;

#[derive(Debug, Error)]
pub enum StorageError {
    #[error("storage i/o at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt store file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("bad store config: {0}")]
    Config(String),
}

fn io_err(path: &Path, source: std::io::Error) -> StorageError {
    StorageError::Io { path: path.to_owned(), source }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoreConfig {
    pub root: PathBuf,
    pub nodes: usize,
    pub partition_level: usize,
    pub segment_bytes: u64,
}

impl StoreConfig {
    pub fn new(root: impl Into<PathBuf>) -> StoreConfig {
        StoreConfig {
            root: root.into(),
            nodes: 1,
            partition_level: 0,
            segment_bytes: 1 << 20,
        }
    }

    fn validate(&self) -> Result<(), StorageError> {
        if self.nodes == 0 {
            return Err(StorageError::Config("nodes must be at least 1".into()));
        }
        if self.partition_level >= crate::model::LEVELS {
            return Err(StorageError::Config(format!(
                "partitionLevel {} out of range 0..{}",
                self.partition_level,
                crate::model::LEVELS
            )));
        }
        if self.segment_bytes < 64 {
            return Err(StorageError::Config("segmentBytes must be at least 64".into()));
        }
        Ok(())
    }
}

/// Node index a sensor id is routed to: ordinal at the partition level,
/// modulo the node count. Ids sharing the subtree above that level land on
/// the same node.
pub fn partition(sid: SensorId, nodes: usize, partition_level: usize) -> usize {
    (sid.level(partition_level) as usize) % nodes
}

#[derive(Debug, Clone, Copy)]
struct SegMeta {
    seq: u64,
    min_ts: u64,
    max_ts: u64,
    count: u64,
}

struct OpenSeg {
    seq: u64,
    file: BufWriter<File>,
    /// In-memory mirror of the records in the open segment, in file order,
    /// so queries never read the file a writer is appending to.
    records: Vec<(u64, i64)>,
    min_ts: u64,
    max_ts: u64,
    bytes: u64,
}

struct SidState {
    dir: PathBuf,
    watermark: u64,
    closed: Vec<SegMeta>,
    open: Option<OpenSeg>,
    index_dirty: bool,
}

pub struct Store {
    cfg: StoreConfig,
    sids: RwLock<HashMap<SensorId, Arc<Mutex<SidState>>>>,
    /// Highest `delete_before` cutoff ever applied. New sensors start their
    /// watermark here, so a retention cut also covers data backfilled for
    /// sensors that first appear after the cut.
    floor: AtomicU64,
    inserts: AtomicU64,
}

fn seg_path(dir: &Path, seq: u64) -> PathBuf {
    dir.join(format!("{seq}.seg"))
}

fn read_segment(path: &Path) -> Result<Vec<(u64, i64)>, StorageError> {
    let mut f = File::open(path).map_err(|e| io_err(path, e))?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf).map_err(|e| io_err(path, e))?;
    if buf.len() < 4 {
        return Ok(Vec::new()); // creation was interrupted before the magic landed
    }
    if &buf[..4] != SEGMENT_MAGIC {
        return Err(StorageError::Corrupt {
            path: path.to_owned(),
            reason: "bad segment magic".into(),
        });
    }
    let body = &buf[4..];
    let whole = body.len() - body.len() % RECORD_BYTES as usize;
    let mut out = Vec::with_capacity(whole / RECORD_BYTES as usize);
    for chunk in body[..whole].chunks_exact(RECORD_BYTES as usize) {
        let ts = u64::from_be_bytes(chunk[..8].try_into().unwrap());
        let value = i64::from_be_bytes(chunk[8..].try_into().unwrap());
        out.push((ts, value));
    }
    Ok(out)
}

impl SidState {
    fn write_index(&mut self) -> Result<(), StorageError> {
        let path = self.dir.join("index");
        let mut text = format!("SHV1 {}\n", self.watermark);
        for m in &self.closed {
            text.push_str(&format!("{} {} {} {}\n", m.seq, m.min_ts, m.max_ts, m.count));
        }
        let tmp = self.dir.join("index.tmp");
        std::fs::write(&tmp, text).map_err(|e| io_err(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| io_err(&path, e))?;
        self.index_dirty = false;
        Ok(())
    }

    fn open_new_segment(&mut self, seq: u64) -> Result<(), StorageError> {
        let path = seg_path(&self.dir, seq);
        let file = OpenOptions::new()
            .create(true)
            .truncate(true)
            .write(true)
            .open(&path)
            .map_err(|e| io_err(&path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(SEGMENT_MAGIC).map_err(|e| io_err(&path, e))?;
        self.open = Some(OpenSeg {
            seq,
            file: w,
            records: Vec::new(),
            min_ts: u64::MAX,
            max_ts: 0,
            bytes: 4,
        });
        Ok(())
    }

    fn roll_segment(&mut self) -> Result<(), StorageError> {
        let open = self.open.take().expect("roll without open segment");
        let OpenSeg { seq, mut file, records, min_ts, max_ts, .. } = open;
        file.flush().map_err(|e| io_err(&self.dir, e))?;
        self.closed.push(SegMeta { seq, min_ts, max_ts, count: records.len() as u64 });
        self.write_index()?;
        self.open_new_segment(seq + 1)
    }

    fn append(&mut self, ts: u64, value: i64, segment_bytes: u64) -> Result<(), StorageError> {
        if self.open.is_none() {
            let seq = self.closed.last().map(|m| m.seq + 1).unwrap_or(1);
            self.open_new_segment(seq)?;
        }
        let open = self.open.as_mut().unwrap();
        let mut rec = [0u8; 16];
        rec[..8].copy_from_slice(&ts.to_be_bytes());
        rec[8..].copy_from_slice(&value.to_be_bytes());
        open.file.write_all(&rec).map_err(|e| io_err(&self.dir, e))?;
        open.records.push((ts, value));
        open.min_ts = open.min_ts.min(ts);
        open.max_ts = open.max_ts.max(ts);
        open.bytes += RECORD_BYTES;
        if open.bytes >= segment_bytes {
            self.roll_segment()?;
        }
        Ok(())
    }

    /// Merges every record in insertion order so later inserts win, then
    /// applies watermark and range filters.
    fn merged(&self, t0: u64, t1: u64) -> Result<BTreeMap<u64, i64>, StorageError> {
        let lo = t0.max(self.watermark);
        let mut map = BTreeMap::new();
        if lo >= t1 {
            return Ok(map);
        }
        for m in &self.closed {
            if m.count == 0 || m.max_ts < lo || m.min_ts >= t1 {
                continue;
            }
            for (ts, v) in read_segment(&seg_path(&self.dir, m.seq))? {
                if ts >= lo && ts < t1 {
                    map.insert(ts, v);
                }
            }
        }
        if let Some(open) = &self.open {
            for &(ts, v) in &open.records {
                if ts >= lo && ts < t1 {
                    map.insert(ts, v);
                }
            }
        }
        Ok(map)
    }

    fn flush(&mut self) -> Result<(), StorageError> {
        if let Some(open) = self.open.as_mut() {
            open.file.flush().map_err(|e| io_err(&self.dir, e))?;
        }
        if self.index_dirty {
            self.write_index()?;
        }
        Ok(())
    }
}

impl Store {
    /// Opens (creating if needed) a store, verifying any existing on-disk
    /// config against `cfg`.
    pub fn open(cfg: StoreConfig) -> Result<Store, StorageError> {
        cfg.validate()?;
        std::fs::create_dir_all(&cfg.root).map_err(|e| io_err(&cfg.root, e))?;
        let cfg_path = cfg.root.join("store.pt");
        if cfg_path.exists() {
            let existing = read_store_config(&cfg.root)?;
            if existing.nodes != cfg.nodes
                || existing.partition_level != cfg.partition_level
                || existing.segment_bytes != cfg.segment_bytes
            {
                return Err(StorageError::Config(format!(
                    "store at {} was created with nodes={} partitionLevel={} segmentBytes={}",
                    cfg.root.display(),
                    existing.nodes,
                    existing.partition_level,
                    existing.segment_bytes
                )));
            }
        } else {
            let mut root_node = crate::proptree::PtNode::default();
            root_node.children.push(crate::proptree::PtNode::new("nodes", Some(&cfg.nodes.to_string())));
            root_node
                .children
                .push(crate::proptree::PtNode::new("partitionLevel", Some(&cfg.partition_level.to_string())));
            root_node
                .children
                .push(crate::proptree::PtNode::new("segmentBytes", Some(&cfg.segment_bytes.to_string())));
            std::fs::write(&cfg_path, crate::proptree::serialize(&root_node))
                .map_err(|e| io_err(&cfg_path, e))?;
        }
        for k in 0..cfg.nodes {
            let dir = cfg.root.join(format!("node{k}"));
            std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        }
        let floor = read_floor(&cfg.root)?;
        let store = Store {
            cfg,
            sids: RwLock::new(HashMap::new()),
            floor: AtomicU64::new(floor),
            inserts: AtomicU64::new(0),
        };
        store.scan_existing()?;
        Ok(store)
    }

    /// Opens an existing root using the config recorded in `store.pt`
    /// (defaults for a fresh directory).
    pub fn open_root(root: impl Into<PathBuf>) -> Result<Store, StorageError> {
        let root = root.into();
        let cfg = if root.join("store.pt").exists() {
            read_store_config(&root)?
        } else {
            StoreConfig::new(&root)
        };
        Store::open(cfg)
    }

    pub fn config(&self) -> &StoreConfig {
        &self.cfg
    }

    fn scan_existing(&self) -> Result<(), StorageError> {
        let mut sids = self.sids.write().unwrap();
        for k in 0..self.cfg.nodes {
            let node_dir = self.cfg.root.join(format!("node{k}"));
            let entries = std::fs::read_dir(&node_dir).map_err(|e| io_err(&node_dir, e))?;
            for entry in entries {
                let entry = entry.map_err(|e| io_err(&node_dir, e))?;
                if !entry.file_type().map_err(|e| io_err(&node_dir, e))?.is_dir() {
                    continue;
                }
                let name = entry.file_name();
                let Some(sid) = name.to_str().and_then(SensorId::from_hex) else {
                    continue; // metadata.pt lives here too; skip non-sid entries
                };
                let mut state = load_sid_state(entry.path())?;
                // A crash between the floor write and the per-sensor sweep
                // leaves indexes behind the floor; catch them up on load.
                let floor = self.floor.load(Ordering::Relaxed);
                if state.watermark < floor {
                    state.watermark = floor;
                    state.index_dirty = true;
                }
                sids.insert(sid, Arc::new(Mutex::new(state)));
            }
        }
        Ok(())
    }

    fn sid_state(&self, sid: SensorId) -> Result<Arc<Mutex<SidState>>, StorageError> {
        if let Some(s) = self.sids.read().unwrap().get(&sid) {
            return Ok(s.clone());
        }
        let mut sids = self.sids.write().unwrap();
        if let Some(s) = sids.get(&sid) {
            return Ok(s.clone());
        }
        let node = partition(sid, self.cfg.nodes, self.cfg.partition_level);
        let dir = self.cfg.root.join(format!("node{node}")).join(sid.to_hex());
        std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        let state = Arc::new(Mutex::new(SidState {
            dir,
            watermark: self.floor.load(Ordering::Relaxed),
            closed: Vec::new(),
            open: None,
            index_dirty: true,
        }));
        sids.insert(sid, state.clone());
        Ok(state)
    }

    pub fn insert(&self, sid: SensorId, ts: u64, value: i64) -> Result<(), StorageError> {
        let state = self.sid_state(sid)?;
        let mut s = state.lock().unwrap();
        s.append(ts, value, self.cfg.segment_bytes)?;
        self.inserts.fetch_add(1, Ordering::Relaxed);
        Ok(())
    }

    pub fn insert_batch(&self, sid: SensorId, records: &[(u64, i64)]) -> Result<(), StorageError> {
        let state = self.sid_state(sid)?;
        let mut s = state.lock().unwrap();
        for &(ts, value) in records {
            s.append(ts, value, self.cfg.segment_bytes)?;
        }
        self.inserts.fetch_add(records.len() as u64, Ordering::Relaxed);
        Ok(())
    }

    /// Readings with `t0 <= ts < t1`, strictly increasing timestamps,
    /// duplicates resolved to the latest insert, watermark applied.
    pub fn query(&self, sid: SensorId, t0: u64, t1: u64) -> Result<Vec<(u64, i64)>, StorageError> {
        let state = {
            let sids = self.sids.read().unwrap();
            match sids.get(&sid) {
                None => return Ok(Vec::new()),
                Some(s) => s.clone(),
            }
        };
        let s = state.lock().unwrap();
        Ok(s.merged(t0, t1)?.into_iter().collect())
    }

    /// Drops every visible record with `ts < cutoff` on every sensor;
    /// returns how many distinct visible timestamps went away. Whole dead
    /// segments are unlinked eagerly, the rest becomes invisible via the
    /// watermark. The cutoff also becomes the store-wide floor, so sensors
    /// created later cannot backfill below it either.
    pub fn delete_before(&self, cutoff: u64) -> Result<u64, StorageError> {
        if self.floor.fetch_max(cutoff, Ordering::Relaxed) < cutoff {
            write_floor(&self.cfg.root, cutoff)?;
        }
        let states: Vec<_> = self.sids.read().unwrap().values().cloned().collect();
        let mut removed = 0u64;
        for state in states {
            removed += delete_before_state(&state, cutoff)?;
        }
        Ok(removed)
    }

    /// Per-sensor variant of [`Store::delete_before`], used for ttl-driven
    /// retention.
    pub fn delete_before_sid(&self, sid: SensorId, cutoff: u64) -> Result<u64, StorageError> {
        let state = {
            let sids = self.sids.read().unwrap();
            match sids.get(&sid) {
                None => return Ok(0),
                Some(s) => s.clone(),
            }
        };
        delete_before_state(&state, cutoff)
    }

    /// Rewrites each sensor's segments with duplicates and watermarked
    /// records dropped. Query results are unchanged; running it twice is a
    /// no-op the second time.
    pub fn compact(&self) -> Result<(), StorageError> {
        let states: Vec<_> = self.sids.read().unwrap().values().cloned().collect();
        for state in states {
            let mut s = state.lock().unwrap();
            compact_state(&mut s, self.cfg.segment_bytes)?;
        }
        Ok(())
    }

    /// Flush barrier: after it returns, everything inserted so far is
    /// visible to a reopen.
    pub fn flush(&self) -> Result<(), StorageError> {
        let states: Vec<_> = self.sids.read().unwrap().values().cloned().collect();
        for state in states {
            state.lock().unwrap().flush()?;
        }
        Ok(())
    }

    pub fn sids(&self) -> Vec<SensorId> {
        let mut v: Vec<SensorId> = self.sids.read().unwrap().keys().copied().collect();
        v.sort();
        v
    }

    pub fn insert_count(&self) -> u64 {
        self.inserts.load(Ordering::Relaxed)
    }

    pub fn node_of(&self, sid: SensorId) -> usize {
        partition(sid, self.cfg.nodes, self.cfg.partition_level)
    }
}

impl Drop for Store {
    fn drop(&mut self) {
        let _ = self.flush();
    }
}

fn read_store_config(root: &Path) -> Result<StoreConfig, StorageError> {
    let path = root.join("store.pt");
    let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let node = crate::proptree::parse(&text).map_err(|e| StorageError::Corrupt {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    let bad = |e: crate::proptree::PtError| StorageError::Corrupt { path: path.clone(), reason: e.to_string() };
    let mut cfg = StoreConfig::new(root);
    cfg.nodes = node.get_u64_or("nodes", 1).map_err(bad)? as usize;
    cfg.partition_level = node.get_u64_or("partitionLevel", 0).map_err(bad)? as usize;
    cfg.segment_bytes = node.get_u64_or("segmentBytes", 1 << 20).map_err(bad)?;
    Ok(cfg)
}

fn read_floor(root: &Path) -> Result<u64, StorageError> {
    let path = root.join("floor");
    match std::fs::read_to_string(&path) {
        Ok(text) => text.trim().parse::<u64>().map_err(|_| StorageError::Corrupt {
            path,
            reason: "floor is not a timestamp".into(),
        }),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(0),
        Err(e) => Err(io_err(&path, e)),
    }
}

fn write_floor(root: &Path, floor: u64) -> Result<(), StorageError> {
    let tmp = root.join("floor.tmp");
    let path = root.join("floor");
    std::fs::write(&tmp, format!("{floor}\n")).map_err(|e| io_err(&tmp, e))?;
    std::fs::rename(&tmp, &path).map_err(|e| io_err(&path, e))
}

fn load_sid_state(dir: PathBuf) -> Result<SidState, StorageError> {
    let index_path = dir.join("index");
    let mut watermark = 0u64;
    let mut indexed: BTreeMap<u64, SegMeta> = BTreeMap::new();
    if index_path.exists() {
        let text = std::fs::read_to_string(&index_path).map_err(|e| io_err(&index_path, e))?;
        let corrupt = |reason: &str| StorageError::Corrupt {
            path: index_path.clone(),
            reason: reason.to_owned(),
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| corrupt("empty index"))?;
        let wm = header
            .strip_prefix("SHV1 ")
            .and_then(|s| s.parse::<u64>().ok())
            .ok_or_else(|| corrupt("bad index header"))?;
        watermark = wm;
        for line in lines {
            if line.is_empty() {
                continue;
            }
            let mut it = line.split(' ');
            let mut next_u64 = || it.next().and_then(|s| s.parse::<u64>().ok());
            match (next_u64(), next_u64(), next_u64(), next_u64()) {
                (Some(seq), Some(min_ts), Some(max_ts), Some(count)) => {
                    indexed.insert(seq, SegMeta { seq, min_ts, max_ts, count });
                }
                _ => return Err(corrupt("bad index row")),
            }
        }
    }

    // Everything on disk that the index does not list as closed gets
    // rescanned; the highest such sequence becomes the open segment again.
    let mut unindexed: Vec<u64> = Vec::new();
    let mut present: Vec<u64> = Vec::new();
    for entry in std::fs::read_dir(&dir).map_err(|e| io_err(&dir, e))? {
        let entry = entry.map_err(|e| io_err(&dir, e))?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        let Some(stem) = name.strip_suffix(".seg") else { continue };
        let Ok(seq) = stem.parse::<u64>() else { continue };
        present.push(seq);
        if !indexed.contains_key(&seq) {
            unindexed.push(seq);
        }
    }
    // Index rows whose file vanished (crash between unlink and index write)
    // are dropped silently; the delete already happened.
    indexed.retain(|seq, _| present.contains(seq));
    unindexed.sort_unstable();

    let mut closed: Vec<SegMeta> = indexed.into_values().collect();
    let mut open = None;
    if let Some((&last, rest)) = unindexed.split_last().map(|(l, r)| (l, r)) {
        for &seq in rest {
            let records = read_segment(&seg_path(&dir, seq))?;
            closed.push(seg_meta_from_records(seq, &records));
        }
        closed.sort_by_key(|m| m.seq);
        let path = seg_path(&dir, last);
        let orig_len = std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0);
        let records = read_segment(&path)?;
        // Drop any partial tail record so appends stay 16-byte aligned; a
        // file cut short inside the magic is restarted from scratch.
        let valid_len = 4 + records.len() as u64 * RECORD_BYTES;
        let mut file = OpenOptions::new().write(true).open(&path).map_err(|e| io_err(&path, e))?;
        if orig_len < 4 {
            file.set_len(0).map_err(|e| io_err(&path, e))?;
            file.seek(SeekFrom::Start(0)).map_err(|e| io_err(&path, e))?;
            file.write_all(SEGMENT_MAGIC).map_err(|e| io_err(&path, e))?;
        } else {
            file.set_len(valid_len).map_err(|e| io_err(&path, e))?;
            file.seek(SeekFrom::End(0)).map_err(|e| io_err(&path, e))?;
        }
        let meta = seg_meta_from_records(last, &records);
        open = Some(OpenSeg {
            seq: last,
            file: BufWriter::new(file),
            records,
            min_ts: meta.min_ts,
            max_ts: meta.max_ts,
            bytes: valid_len.max(4),
        });
    } else {
        closed.sort_by_key(|m| m.seq);
    }

    Ok(SidState { dir, watermark, closed, open, index_dirty: false })
}

fn seg_meta_from_records(seq: u64, records: &[(u64, i64)]) -> SegMeta {
    let mut min_ts = u64::MAX;
    let mut max_ts = 0;
    for &(ts, _) in records {
        min_ts = min_ts.min(ts);
        max_ts = max_ts.max(ts);
    }
    SegMeta { seq, min_ts, max_ts, count: records.len() as u64 }
}

fn delete_before_state(state: &Mutex<SidState>, cutoff: u64) -> Result<u64, StorageError> {
    let mut s = state.lock().unwrap();
    if cutoff <= s.watermark {
        return Ok(0);
    }
    let removed = s.merged(0, cutoff)?.len() as u64;
    let dead: Vec<SegMeta> = s
        .closed
        .iter()
        .filter(|m| m.count == 0 || m.max_ts < cutoff)
        .copied()
        .collect();
    for m in &dead {
        let path = seg_path(&s.dir, m.seq);
        std::fs::remove_file(&path).map_err(|e| io_err(&path, e))?;
    }
    s.closed.retain(|m| m.count != 0 && m.max_ts >= cutoff);
    s.watermark = cutoff;
    s.write_index()?;
    Ok(removed)
}

fn compact_state(s: &mut SidState, segment_bytes: u64) -> Result<(), StorageError> {
    // Fast path: already deduplicated, sorted across segments, and nothing
    // sits below the watermark. Rewriting would change no observable state.
    let mut needs_work = false;
    let mut prev_ts: Option<u64> = None;
    let mut check = |records: &[(u64, i64)], watermark: u64, needs_work: &mut bool| {
        for &(ts, _) in records {
            if ts < watermark || prev_ts.is_some_and(|p| p >= ts) {
                *needs_work = true;
                break;
            }
            prev_ts = Some(ts);
        }
    };
    let mut all: Vec<(u64, i64)> = Vec::new();
    for m in &s.closed {
        let records = read_segment(&seg_path(&s.dir, m.seq))?;
        check(&records, s.watermark, &mut needs_work);
        all.extend(records);
    }
    if let Some(open) = &s.open {
        check(&open.records, s.watermark, &mut needs_work);
        all.extend(open.records.iter().copied());
    }
    if !needs_work {
        return Ok(());
    }

    // Later inserts win, watermarked records drop out.
    let mut merged: BTreeMap<u64, i64> = BTreeMap::new();
    for (ts, v) in all {
        if ts >= s.watermark {
            merged.insert(ts, v);
        }
    }

    if let Some(open) = s.open.as_mut() {
        open.file.flush().map_err(|e| io_err(&s.dir, e))?;
    }
    let old: Vec<u64> = s
        .closed
        .iter()
        .map(|m| m.seq)
        .chain(s.open.as_ref().map(|o| o.seq))
        .collect();
    s.open = None;
    s.closed.clear();
    for seq in old {
        let path = seg_path(&s.dir, seq);
        std::fs::remove_file(&path).map_err(|e| io_err(&path, e))?;
    }

    let per_seg = ((segment_bytes - 4) / RECORD_BYTES).max(1) as usize;
    let records: Vec<(u64, i64)> = merged.into_iter().collect();
    let mut seq = 1u64;
    for chunk in records.chunks(per_seg) {
        let path = seg_path(&s.dir, seq);
        let mut buf = Vec::with_capacity(4 + chunk.len() * 16);
        buf.extend_from_slice(SEGMENT_MAGIC);
        for &(ts, v) in chunk {
            buf.extend_from_slice(&ts.to_be_bytes());
            buf.extend_from_slice(&v.to_be_bytes());
        }
        std::fs::write(&path, buf).map_err(|e| io_err(&path, e))?;
        s.closed.push(seg_meta_from_records(seq, chunk));
        seq += 1;
    }
    s.write_index()
}
