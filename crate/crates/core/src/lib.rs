//! Core library of the shv monitoring pipeline.
//!
//! The data path is push-based: sampling daemons ("pushers") host plugins
//! that read sensors on synchronized ticks, batch readings per sensor, and
//! publish them over a minimal MQTT 3.1.1 subset to a collect agent. The
//! agent maps hierarchical topics onto 128-bit sensor ids, answers REST
//! queries from an in-memory cache, and persists readings in an embedded
//! partitioned time-series store. Virtual sensors evaluate arithmetic
//! expressions over stored series on demand and cache their results back
//! into the store.

pub mod bench;
pub mod cache;
pub mod clock;
pub mod collectagent;
pub mod model;
pub mod plugins;
pub mod proptree;
pub mod pusher;
pub mod querylib;
pub mod rest;
pub mod storage;
pub mod vsensor;
pub mod wire;

pub use model::{SensorId, SensorMetadata, SensorReading, Topic, Unit};
