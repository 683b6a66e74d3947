//! The pusher daemon: hosts sampling plugins, stamps readings on aligned
//! ticks, keeps a short in-memory cache per sensor, and publishes batches
//! to the collect agent over MQTT.

mod config;
mod daemon;
mod engine;

pub use config::{ConfigError, ConfigSource, PusherConfig};
pub use daemon::{run_pusher, run_pusher_with_clock, PusherHandle};
pub use engine::{
    align_next, send_phase, ControlError, Counters, EngineError, PluginAction, PusherEngine,
};
