//! 128-bit hierarchical sensor ids and the per-level name dictionaries
//! that make topic <-> id translation a bijection.
//!
//! The id packs 8 big-endian 16-bit fields; level 0 occupies the most
//! significant field. Field value 0 means "level absent", absent levels
//! form a contiguous suffix, and present fields hold 1-based ordinals
//! assigned per level in first-registration order.

use super::topic::{is_valid_component, Topic, TopicError, MAX_COMPONENTS};
use std::collections::HashMap;
use std::fmt;
use std::io::{self, Write};
use std::path::Path;
use std::sync::RwLock;
use thiserror::Error;

pub const LEVELS: usize = MAX_COMPONENTS;
pub const MAX_ORDINAL: u16 = u16::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SensorId(pub u128);

impl SensorId {
    /// Ordinal stored at `level` (0-based from the root); 0 means absent.
    pub fn level(self, level: usize) -> u16 {
        assert!(level < LEVELS);
        ((self.0 >> (112 - 16 * level)) & 0xffff) as u16
    }

    pub fn from_levels(fields: [u16; LEVELS]) -> SensorId {
        let mut v: u128 = 0;
        for (i, f) in fields.iter().enumerate() {
            v |= (*f as u128) << (112 - 16 * i);
        }
        SensorId(v)
    }

    /// Number of leading non-zero fields. Meaningful only for well-formed ids.
    pub fn depth(self) -> usize {
        (0..LEVELS).take_while(|&i| self.level(i) != 0).count()
    }

    /// Present fields must form a contiguous prefix and there must be at least one.
    pub fn is_well_formed(self) -> bool {
        let d = self.depth();
        d > 0 && (d..LEVELS).all(|i| self.level(i) == 0)
    }

    pub fn to_hex(self) -> String {
        format!("{:032x}", self.0)
    }

    pub fn from_hex(s: &str) -> Option<SensorId> {
        if s.len() != 32 {
            return None;
        }
        u128::from_str_radix(s, 16).ok().map(SensorId)
    }
}

impl fmt::Display for SensorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:032x}", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SidError {
    #[error("level {0} has exhausted all {MAX_ORDINAL} ordinals")]
    LevelExhausted(usize),
    #[error("unknown ordinal {ordinal} at level {level}")]
    UnknownOrdinal { level: usize, ordinal: u16 },
    #[error("absent levels are not a contiguous suffix")]
    NoncontiguousLevels,
    #[error("id has no present levels")]
    Empty,
}

#[derive(Debug, Error)]
pub enum DictError {
    #[error(transparent)]
    Sid(#[from] SidError),
    #[error("dictionary i/o: {0}")]
    Io(#[from] io::Error),
    #[error("corrupt dictionary file at line {line}: {reason}")]
    Corrupt { line: usize, reason: String },
}

#[derive(Default)]
struct LevelMap {
    by_name: HashMap<String, u16>,
    by_ordinal: Vec<String>, // index = ordinal - 1
}

#[derive(Default)]
struct DictInner {
    levels: [LevelMap; LEVELS],
    dirty: bool,
}

/// Bidirectional component-name <-> ordinal maps, one per level.
///
/// Readers run concurrently; `encode` takes the write lock only when it has
/// to register a new name, so racing first publishes of the same topic agree
/// on one id.
#[derive(Default)]
pub struct LevelDictionary {
    inner: RwLock<DictInner>,
}

impl LevelDictionary {
    pub fn new() -> LevelDictionary {
        LevelDictionary::default()
    }

    /// Translates a topic to its id, registering unseen components.
    pub fn encode(&self, topic: &Topic) -> Result<SensorId, SidError> {
        if let Some(sid) = self.lookup(topic) {
            return Ok(sid);
        }
        let mut inner = self.inner.write().unwrap();
        let mut fields = [0u16; LEVELS];
        for (i, name) in topic.components().iter().enumerate() {
            let lm = &mut inner.levels[i];
            let ord = match lm.by_name.get(name) {
                Some(&o) => o,
                None => {
                    if lm.by_ordinal.len() >= MAX_ORDINAL as usize {
                        return Err(SidError::LevelExhausted(i));
                    }
                    let o = (lm.by_ordinal.len() + 1) as u16;
                    lm.by_name.insert(name.clone(), o);
                    lm.by_ordinal.push(name.clone());
                    o
                }
            };
            fields[i] = ord;
        }
        inner.dirty = true;
        Ok(SensorId::from_levels(fields))
    }

    /// Like `encode` but never registers; `None` if any component is unknown.
    pub fn lookup(&self, topic: &Topic) -> Option<SensorId> {
        let inner = self.inner.read().unwrap();
        let mut fields = [0u16; LEVELS];
        for (i, name) in topic.components().iter().enumerate() {
            fields[i] = *inner.levels[i].by_name.get(name)?;
        }
        Some(SensorId::from_levels(fields))
    }

    pub fn decode(&self, sid: SensorId) -> Result<Topic, SidError> {
        let inner = self.inner.read().unwrap();
        let mut components: Vec<&str> = Vec::new();
        let mut absent_seen = false;
        for level in 0..LEVELS {
            let ord = sid.level(level);
            if ord == 0 {
                absent_seen = true;
                continue;
            }
            if absent_seen {
                return Err(SidError::NoncontiguousLevels);
            }
            let name = inner.levels[level]
                .by_ordinal
                .get(ord as usize - 1)
                .ok_or(SidError::UnknownOrdinal { level, ordinal: ord })?;
            components.push(name);
        }
        if components.is_empty() {
            return Err(SidError::Empty);
        }
        // Components were validated on the way in; reconstruct infallibly.
        Ok(Topic::from_components(components).expect("dictionary holds valid components"))
    }

    /// Ordinals registered at `level`.
    pub fn level_len(&self, level: usize) -> usize {
        self.inner.read().unwrap().levels[level].by_ordinal.len()
    }

    /// True if there are unsaved registrations; clears the flag.
    pub fn take_dirty(&self) -> bool {
        let mut inner = self.inner.write().unwrap();
        std::mem::replace(&mut inner.dirty, false)
    }

    /// Writes `<level>\t<ordinal>\t<name>\n` rows, levels ascending then
    /// ordinals ascending, producing identical bytes for identical contents.
    pub fn save(&self, path: &Path) -> Result<(), DictError> {
        let inner = self.inner.read().unwrap();
        let mut out = Vec::new();
        for (level, lm) in inner.levels.iter().enumerate() {
            for (idx, name) in lm.by_ordinal.iter().enumerate() {
                writeln!(out, "{level}\t{}\t{name}", idx + 1)?;
            }
        }
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tsv.tmp");
        std::fs::write(&tmp, &out)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<LevelDictionary, DictError> {
        let text = std::fs::read_to_string(path)?;
        let mut inner = DictInner::default();
        for (lineno, line) in text.lines().enumerate() {
            let line_idx = lineno + 1;
            if line.is_empty() {
                continue;
            }
            let mut parts = line.splitn(3, '\t');
            let corrupt = |reason: &str| DictError::Corrupt {
                line: line_idx,
                reason: reason.to_owned(),
            };
            let level: usize = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| corrupt("bad level"))?;
            let ordinal: u16 = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| corrupt("bad ordinal"))?;
            let name = parts.next().ok_or_else(|| corrupt("missing name"))?;
            if level >= LEVELS {
                return Err(corrupt("level out of range"));
            }
            if !is_valid_component(name) {
                return Err(corrupt("invalid component name"));
            }
            let lm = &mut inner.levels[level];
            if ordinal as usize != lm.by_ordinal.len() + 1 {
                return Err(corrupt("ordinals not dense and ascending"));
            }
            if lm.by_name.contains_key(name) {
                return Err(corrupt("duplicate name within level"));
            }
            lm.by_name.insert(name.to_owned(), ordinal);
            lm.by_ordinal.push(name.to_owned());
        }
        Ok(LevelDictionary {
            inner: RwLock::new(inner),
        })
    }
}

impl fmt::Debug for LevelDictionary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.inner.read().unwrap();
        let sizes: Vec<usize> = inner.levels.iter().map(|l| l.by_ordinal.len()).collect();
        f.debug_struct("LevelDictionary").field("level_sizes", &sizes).finish()
    }
}

/// Reserved value for cross-level error reporting in diagnostics.
pub type Level = usize;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TopicOrSidError {
    #[error(transparent)]
    Topic(#[from] TopicError),
    #[error(transparent)]
    Sid(#[from] SidError),
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: &str) -> Topic {
        Topic::parse(s).unwrap()
    }

    #[test]
    fn first_registration_order_assigns_dense_ordinals() {
        let d = LevelDictionary::new();
        let sid = d.encode(&t("/r1/c1/n1/power")).unwrap();
        assert_eq!(sid.0, 0x0001_0001_0001_0001_0000_0000_0000_0000);
        let sid2 = d.encode(&t("/r1/c1/n2/power")).unwrap();
        assert_eq!(sid2.0, 0x0001_0001_0002_0001_0000_0000_0000_0000);
        // Same name on a different level gets that level's own ordinal.
        let sid3 = d.encode(&t("/power")).unwrap();
        assert_eq!(sid3.0, 0x0002_0000_0000_0000_0000_0000_0000_0000);
    }

    #[test]
    fn encode_is_idempotent_and_decode_inverts() {
        let d = LevelDictionary::new();
        let topic = t("/a/b/c");
        let s1 = d.encode(&topic).unwrap();
        let s2 = d.encode(&topic).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(d.decode(s1).unwrap(), topic);
    }

    #[test]
    fn sibling_topics_share_prefix_fields() {
        let d = LevelDictionary::new();
        let a = d.encode(&t("/r1/c1/n1/power")).unwrap();
        let b = d.encode(&t("/r1/c1/n1/temp")).unwrap();
        for lvl in 0..3 {
            assert_eq!(a.level(lvl), b.level(lvl));
        }
        assert_ne!(a.level(3), b.level(3));
    }

    #[test]
    fn decode_rejects_gaps_unknowns_and_empty() {
        let d = LevelDictionary::new();
        d.encode(&t("/a/b")).unwrap();
        let gap = SensorId::from_levels([1, 0, 1, 0, 0, 0, 0, 0]);
        assert_eq!(d.decode(gap), Err(SidError::NoncontiguousLevels));
        let unknown = SensorId::from_levels([7, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(
            d.decode(unknown),
            Err(SidError::UnknownOrdinal { level: 0, ordinal: 7 })
        );
        assert_eq!(d.decode(SensorId(0)), Err(SidError::Empty));
    }

    #[test]
    fn level_field_layout_is_big_endian_msb_first() {
        let sid = SensorId::from_levels([0x0102, 0x0304, 0, 0, 0, 0, 0, 0]);
        assert_eq!(sid.0 >> 112, 0x0102);
        assert_eq!(sid.level(0), 0x0102);
        assert_eq!(sid.level(1), 0x0304);
        assert_eq!(sid.depth(), 2);
        assert!(sid.is_well_formed());
        assert!(!SensorId::from_levels([0, 1, 0, 0, 0, 0, 0, 0]).is_well_formed());
    }

    #[test]
    fn hex_roundtrip() {
        let sid = SensorId::from_levels([1, 2, 3, 4, 5, 6, 7, 8]);
        assert_eq!(SensorId::from_hex(&sid.to_hex()), Some(sid));
        assert_eq!(sid.to_hex().len(), 32);
        assert_eq!(SensorId::from_hex("zz"), None);
    }

    #[test]
    fn save_load_replays_identically() {
        let d = LevelDictionary::new();
        let topics = ["/r1/c1/n1/power", "/r1/c2/n1/temp", "/vs/agg", "/r1/c1/n2/power"];
        let sids: Vec<SensorId> = topics.iter().map(|s| d.encode(&t(s)).unwrap()).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dictionary.tsv");
        d.save(&path).unwrap();
        let d2 = LevelDictionary::load(&path).unwrap();
        for (topic, sid) in topics.iter().zip(&sids) {
            assert_eq!(d2.encode(&t(topic)).unwrap(), *sid);
            assert_eq!(d2.decode(*sid).unwrap(), t(topic));
        }
        // Saving the loaded dictionary reproduces the file byte for byte.
        let path2 = dir.path().join("d2.tsv");
        d2.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn load_rejects_sparse_ordinals() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tsv");
        std::fs::write(&path, "0\t2\tname\n").unwrap();
        assert!(matches!(
            LevelDictionary::load(&path),
            Err(DictError::Corrupt { line: 1, .. })
        ));
    }

    #[test]
    fn dirty_flag_tracks_registrations() {
        let d = LevelDictionary::new();
        assert!(!d.take_dirty());
        d.encode(&t("/a")).unwrap();
        assert!(d.take_dirty());
        assert!(!d.take_dirty());
        d.encode(&t("/a")).unwrap(); // no new registration
        assert!(!d.take_dirty());
    }
}
