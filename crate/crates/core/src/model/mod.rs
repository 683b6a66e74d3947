//! Shared domain types: topics, sensor ids, units, metadata, readings.

pub mod meta;
pub mod sid;
pub mod topic;
pub mod unit;

pub use meta::{scaled, MetaError, SensorMetadata};
pub use sid::{DictError, LevelDictionary, SensorId, SidError, LEVELS};
pub use topic::{Topic, TopicError, MAX_COMPONENTS, MAX_SERIALIZED_BYTES};
pub use unit::{convert, Dimension, Unit, UnitError};

/// One stored observation. Raw values are integers; scaling to physical
/// units happens at query time via [`SensorMetadata`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SensorReading {
    pub sid: SensorId,
    pub timestamp_ns: u64,
    pub value: i64,
}

impl SensorReading {
    pub fn new(sid: SensorId, timestamp_ns: u64, value: i64) -> SensorReading {
        SensorReading { sid, timestamp_ns, value }
    }
}

/// Stable 64-bit FNV-1a, used wherever a deterministic hash must survive
/// process restarts (send-phase staggering, shard selection).
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv1a64_matches_reference_vectors() {
        // Published FNV-1a test vectors.
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }
}
