//! Per-sensor descriptive metadata: unit, scaling, expected cadence, retention.

use super::topic::Topic;
use super::unit::Unit;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetaError {
    #[error("scale must be non-zero")]
    ZeroScale,
    #[error("interval must be positive")]
    ZeroInterval,
}

/// How to interpret a sensor's raw integer readings.
///
/// `scale` maps raw to physical: physical = raw * scale. `ttl_ns == 0`
/// means "keep forever".
#[derive(Debug, Clone, PartialEq)]
pub struct SensorMetadata {
    pub topic: Topic,
    pub unit: Unit,
    pub scale: f64,
    pub interval_ns: u64,
    pub ttl_ns: u64,
}

impl SensorMetadata {
    pub fn new(topic: Topic, unit: Unit, scale: f64, interval_ns: u64, ttl_ns: u64) -> Result<SensorMetadata, MetaError> {
        if scale == 0.0 || !scale.is_finite() {
            return Err(MetaError::ZeroScale);
        }
        if interval_ns == 0 {
            return Err(MetaError::ZeroInterval);
        }
        Ok(SensorMetadata { topic, unit, scale, interval_ns, ttl_ns })
    }

    /// Defaults for data that was pushed without explicit configuration.
    pub fn default_for(topic: Topic) -> SensorMetadata {
        SensorMetadata {
            topic,
            unit: Unit::dimensionless(),
            scale: 1.0,
            interval_ns: 1_000_000_000,
            ttl_ns: 0,
        }
    }
}

/// Applies the metadata scale to one raw value.
pub fn scaled(raw: i64, meta: &SensorMetadata) -> f64 {
    raw as f64 * meta.scale
}
