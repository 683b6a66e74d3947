//! Deterministic sampling core. All scheduling is driven by an explicit
//! `now_ns` so the same engine runs under the wall clock in the daemon
//! and under a simulated clock in tests.

use super::config::PusherConfig;
use crate::cache::SensorCache;
use crate::model::{fnv1a64, Topic, TopicError, Unit};
use crate::plugins::{self, Plugin, PluginError};
use crate::proptree::PtNode;
use crate::wire::{MAX_PAYLOAD_BYTES, RECORD_BYTES};
use std::collections::HashMap;
use thiserror::Error;

/// First multiple of `interval` strictly after `x`. Sampling on this
/// lattice gives every host the same tick timestamps regardless of when
/// its pusher started.
pub fn align_next(x: u64, interval: u64) -> u64 {
    (x / interval + 1) * interval
}

/// Deterministic per-pusher offset within the send interval, so pushers
/// sharing an agent do not flush in lockstep.
pub fn send_phase(client_id: &str, send_interval_ns: u64) -> u64 {
    fnv1a64(client_id.as_bytes()) % send_interval_ns
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct Counters {
    /// Readings successfully sampled into the cache and send queue.
    pub sampled: u64,
    pub read_errors: u64,
    /// Ticks skipped because a group read outlasted its interval.
    pub overruns: u64,
    /// Readings discarded after outliving the cache window unsent.
    pub dropped: u64,
    /// Readings written to the broker connection.
    pub published: u64,
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Plugin(#[from] PluginError),
    #[error("sensor topic: {0}")]
    Topic(#[from] TopicError),
}

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("no plugin named {0:?}")]
    UnknownPlugin(String),
    #[error("reload failed, previous configuration kept: {0}")]
    ReloadFailed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PluginAction {
    Start,
    Stop,
    Reload,
}

impl PluginAction {
    pub fn parse(s: &str) -> Option<PluginAction> {
        match s {
            "start" => Some(PluginAction::Start),
            "stop" => Some(PluginAction::Stop),
            "reload" => Some(PluginAction::Reload),
            _ => None,
        }
    }
}

struct SensorRt {
    name: String,
    topic: Topic,
    cache: SensorCache,
    pending: Vec<(u64, i64)>,
}

struct GroupRt {
    plugin: usize,
    group: usize,
    interval_ns: u64,
    next_due_ns: u64,
    unit: Unit,
    scale: f64,
    sensors: Vec<SensorRt>,
}

struct PluginSlot {
    kind: String,
    config: PtNode,
    plugin: Box<dyn Plugin>,
    running: bool,
}

pub struct PusherEngine {
    client_id: String,
    prefix: Topic,
    send_interval_ns: u64,
    send_phase_ns: u64,
    cache_window_ns: u64,
    next_send_ns: u64,
    plugins: Vec<PluginSlot>,
    groups: Vec<GroupRt>,
    by_topic: HashMap<Topic, (usize, usize)>,
    counters: Counters,
}

const MAX_RECORDS_PER_PUBLISH: usize = MAX_PAYLOAD_BYTES / RECORD_BYTES;

impl PusherEngine {
    pub fn new(config: &PusherConfig, now_ns: u64) -> Result<PusherEngine, EngineError> {
        let mut slots = Vec::new();
        for (kind, node) in &config.plugins {
            let plugin = plugins::build(kind, node)?;
            slots.push(PluginSlot { kind: kind.clone(), config: node.clone(), plugin, running: true });
        }
        let phase = send_phase(&config.client_id, config.send_interval_ns);
        let mut engine = PusherEngine {
            client_id: config.client_id.clone(),
            prefix: config.prefix.clone(),
            send_interval_ns: config.send_interval_ns,
            send_phase_ns: phase,
            cache_window_ns: config.cache_window_ns,
            next_send_ns: next_on_lattice(now_ns, config.send_interval_ns, phase),
            plugins: slots,
            groups: Vec::new(),
            by_topic: HashMap::new(),
            counters: Counters::default(),
        };
        for idx in 0..engine.plugins.len() {
            let groups = engine.build_groups(idx, now_ns)?;
            engine.groups.extend(groups);
        }
        engine.rebuild_topic_index();
        Ok(engine)
    }

    fn build_groups(&self, plugin_idx: usize, now_ns: u64) -> Result<Vec<GroupRt>, TopicError> {
        let mut out = Vec::new();
        for (gi, spec) in self.plugins[plugin_idx].plugin.groups().iter().enumerate() {
            let group_topic = self.prefix.join(&spec.name)?;
            let mut sensors = Vec::with_capacity(spec.sensors.len());
            for name in &spec.sensors {
                sensors.push(SensorRt {
                    name: name.clone(),
                    topic: group_topic.join(name)?,
                    cache: SensorCache::new(self.cache_window_ns),
                    pending: Vec::new(),
                });
            }
            out.push(GroupRt {
                plugin: plugin_idx,
                group: gi,
                interval_ns: spec.interval_ns,
                next_due_ns: align_next(now_ns, spec.interval_ns),
                unit: spec.unit.clone(),
                scale: spec.scale,
                sensors,
            });
        }
        Ok(out)
    }

    fn rebuild_topic_index(&mut self) {
        self.by_topic.clear();
        for (gidx, g) in self.groups.iter().enumerate() {
            for (sidx, s) in g.sensors.iter().enumerate() {
                self.by_topic.insert(s.topic.clone(), (gidx, sidx));
            }
        }
    }

    /// Samples every group whose tick has arrived. Readings are stamped
    /// with the scheduled tick, not the read time; a read that finishes
    /// past its next tick skips the missed ticks and counts them.
    pub fn run_due(&mut self, now_ns: u64) -> u64 {
        let mut groups_sampled = 0;
        for gidx in 0..self.groups.len() {
            let (running, tick) = {
                let g = &self.groups[gidx];
                (self.plugins[g.plugin].running, g.next_due_ns)
            };
            if !running || tick > now_ns {
                continue;
            }
            let (pidx, group) = (self.groups[gidx].plugin, self.groups[gidx].group);
            let samples = self.plugins[pidx].plugin.read_group(group);
            let g = &mut self.groups[gidx];
            debug_assert_eq!(samples.len(), g.sensors.len());
            for (sensor, (name, result)) in g.sensors.iter_mut().zip(samples) {
                debug_assert_eq!(sensor.name, name);
                match result {
                    Ok(value) => {
                        sensor.cache.insert(tick, value);
                        sensor.pending.push((tick, value));
                        self.counters.sampled += 1;
                    }
                    Err(_) => self.counters.read_errors += 1,
                }
            }
            let next = align_next(now_ns.max(tick), g.interval_ns);
            self.counters.overruns += (next - tick) / g.interval_ns - 1;
            g.next_due_ns = next;
            groups_sampled += 1;
        }
        groups_sampled
    }

    /// Earliest pending tick across running groups, for sleep scheduling.
    pub fn earliest_due(&self) -> Option<u64> {
        self.groups
            .iter()
            .filter(|g| self.plugins[g.plugin].running)
            .map(|g| g.next_due_ns)
            .min()
    }

    pub fn next_send_ns(&self) -> u64 {
        self.next_send_ns
    }

    pub fn send_due(&self, now_ns: u64) -> bool {
        now_ns >= self.next_send_ns
    }

    /// Drains queued readings for publishing and advances the send tick.
    pub fn take_send_batches(&mut self, now_ns: u64) -> Vec<(Topic, Vec<(u64, i64)>)> {
        while self.next_send_ns <= now_ns {
            self.next_send_ns += self.send_interval_ns;
        }
        self.drain_pending()
    }

    /// Drains queued readings without touching the send schedule; used at
    /// shutdown so nothing sampled is left behind.
    pub fn force_flush(&mut self) -> Vec<(Topic, Vec<(u64, i64)>)> {
        self.drain_pending()
    }

    fn drain_pending(&mut self) -> Vec<(Topic, Vec<(u64, i64)>)> {
        let mut out = Vec::new();
        for g in &mut self.groups {
            for s in &mut g.sensors {
                if s.pending.is_empty() {
                    continue;
                }
                let rows = std::mem::take(&mut s.pending);
                // One publish holds at most the payload limit.
                for chunk in rows.chunks(MAX_RECORDS_PER_PUBLISH) {
                    out.push((s.topic.clone(), chunk.to_vec()));
                }
            }
        }
        out
    }

    /// Returns unsent batches to their queues after a failed publish.
    /// Readings older than the cache window are dropped and counted.
    pub fn requeue(&mut self, batches: Vec<(Topic, Vec<(u64, i64)>)>, now_ns: u64) {
        let cutoff = now_ns.saturating_sub(self.cache_window_ns);
        for (topic, mut rows) in batches {
            match self.by_topic.get(&topic) {
                None => self.counters.dropped += rows.len() as u64,
                Some(&(gidx, sidx)) => {
                    let sensor = &mut self.groups[gidx].sensors[sidx];
                    rows.extend(std::mem::take(&mut sensor.pending));
                    let before = rows.len();
                    rows.retain(|&(ts, _)| ts >= cutoff);
                    self.counters.dropped += (before - rows.len()) as u64;
                    sensor.pending = rows;
                }
            }
        }
    }

    pub fn plugin_control(&mut self, name: &str, action: PluginAction, now_ns: u64) -> Result<(), ControlError> {
        let idx = self
            .plugins
            .iter()
            .position(|p| p.kind == name)
            .ok_or_else(|| ControlError::UnknownPlugin(name.to_owned()))?;
        match action {
            PluginAction::Stop => self.plugins[idx].running = false,
            PluginAction::Start => {
                if !self.plugins[idx].running {
                    self.plugins[idx].running = true;
                    // No backfill: next tick is in the future.
                    for g in self.groups.iter_mut().filter(|g| g.plugin == idx) {
                        g.next_due_ns = align_next(now_ns, g.interval_ns);
                    }
                }
            }
            PluginAction::Reload => {
                let config = self.plugins[idx].config.clone();
                self.reload_plugin_with(name, config, now_ns)?;
            }
        }
        Ok(())
    }

    /// Rebuilds one plugin from a config block. On failure the old
    /// instance keeps running untouched.
    pub fn reload_plugin_with(&mut self, name: &str, config: PtNode, now_ns: u64) -> Result<(), ControlError> {
        let idx = self
            .plugins
            .iter()
            .position(|p| p.kind == name)
            .ok_or_else(|| ControlError::UnknownPlugin(name.to_owned()))?;
        let fresh = plugins::build(&self.plugins[idx].kind, &config)
            .map_err(|e| ControlError::ReloadFailed(e.to_string()))?;
        let staged = PluginSlot { kind: self.plugins[idx].kind.clone(), config, plugin: fresh, running: true };
        let old = std::mem::replace(&mut self.plugins[idx], staged);
        match self.build_groups(idx, now_ns) {
            Err(e) => {
                self.plugins[idx] = old;
                Err(ControlError::ReloadFailed(e.to_string()))
            }
            Ok(new_groups) => {
                self.groups.retain(|g| g.plugin != idx);
                self.groups.extend(new_groups);
                self.rebuild_topic_index();
                Ok(())
            }
        }
    }

    pub fn plugin_states(&self) -> Vec<(String, bool)> {
        self.plugins.iter().map(|p| (p.kind.clone(), p.running)).collect()
    }

    pub fn sensors(&self) -> Vec<Topic> {
        let mut out: Vec<Topic> = self.by_topic.keys().cloned().collect();
        out.sort_by_key(|t| t.to_string());
        out
    }

    /// Cache average over the trailing window, in scaled units.
    pub fn cache_avg(&self, topic: &Topic, window_ns: u64) -> Option<f64> {
        let &(gidx, sidx) = self.by_topic.get(topic)?;
        let g = &self.groups[gidx];
        Some(g.sensors[sidx].cache.average(window_ns)? * g.scale)
    }

    pub fn cache_latest(&self, topic: &Topic) -> Option<(u64, f64)> {
        let &(gidx, sidx) = self.by_topic.get(topic)?;
        let g = &self.groups[gidx];
        let (ts, raw) = g.sensors[sidx].cache.latest()?;
        Some((ts, raw as f64 * g.scale))
    }

    pub fn cache_len(&self, topic: &Topic) -> Option<usize> {
        let &(gidx, sidx) = self.by_topic.get(topic)?;
        Some(self.groups[gidx].sensors[sidx].cache.len())
    }

    /// Cache contents oldest-first, in scaled units.
    pub fn cache_rows(&self, topic: &Topic) -> Option<Vec<(u64, f64)>> {
        let &(gidx, sidx) = self.by_topic.get(topic)?;
        let g = &self.groups[gidx];
        Some(g.sensors[sidx].cache.rows().map(|(ts, raw)| (ts, raw as f64 * g.scale)).collect())
    }

    pub fn sensor_unit(&self, topic: &Topic) -> Option<Unit> {
        let &(gidx, _) = self.by_topic.get(topic)?;
        Some(self.groups[gidx].unit.clone())
    }

    pub fn counters(&self) -> Counters {
        self.counters
    }

    pub fn note_published(&mut self, readings: u64) {
        self.counters.published += readings;
    }

    pub fn client_id(&self) -> &str {
        &self.client_id
    }

    pub fn send_phase_ns(&self) -> u64 {
        self.send_phase_ns
    }
}

/// First `phase + k * interval` strictly after `now`.
fn next_on_lattice(now_ns: u64, interval_ns: u64, phase_ns: u64) -> u64 {
    if now_ns < phase_ns {
        phase_ns
    } else {
        phase_ns + ((now_ns - phase_ns) / interval_ns + 1) * interval_ns
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const S: u64 = 1_000_000_000;

    fn tester_config(sensors: u32, interval_ms: u64) -> PusherConfig {
        PusherConfig::parse(&format!(
            "global {{\n    mqttprefix /r1/c1/n1\n    mqttClientId p1\n}}\nplugin tester {{\n    group g1 {{\n        interval {interval_ms}\n        sensors {sensors}\n    }}\n}}\n"
        ))
        .unwrap()
    }

    #[test]
    fn align_next_is_strictly_future_and_aligned() {
        assert_eq!(align_next(0, S), S);
        assert_eq!(align_next(1, S), S);
        assert_eq!(align_next(S - 1, S), S);
        assert_eq!(align_next(S, S), 2 * S);
        assert_eq!(align_next(S + 1, S), 2 * S);
    }

    #[test]
    fn send_phase_is_stable_and_in_range() {
        let p = send_phase("p1", S);
        assert_eq!(p, send_phase("p1", S));
        assert!(p < S);
        // Different clients almost surely land on different phases.
        assert_ne!(send_phase("p1", S), send_phase("p2", S));
    }

    #[test]
    fn ticks_are_stamped_on_the_grid_with_counter_values() {
        let cfg = tester_config(3, 1000);
        // Start mid-second: first tick still lands on the grid.
        let mut e = PusherEngine::new(&cfg, 300_000_000).unwrap();
        for k in 1..=5u64 {
            assert_eq!(e.run_due(k * S), 1, "tick {k}");
            assert_eq!(e.run_due(k * S), 0, "tick {k} repeat is idle");
        }
        let batches = e.force_flush();
        assert_eq!(batches.len(), 3);
        for (topic, rows) in &batches {
            assert!(topic.to_string().starts_with("/r1/c1/n1/g1/s"));
            let expect: Vec<(u64, i64)> = (1..=5).map(|k| (k * S, k as i64)).collect();
            assert_eq!(rows, &expect);
        }
        assert_eq!(e.counters().sampled, 15);
        assert_eq!(e.counters().overruns, 0);
    }

    #[test]
    fn missed_ticks_are_skipped_and_counted() {
        let cfg = tester_config(1, 1000);
        let mut e = PusherEngine::new(&cfg, 0).unwrap();
        assert_eq!(e.run_due(S), 1);
        // Jump 3.5 intervals: the group samples once at its scheduled
        // tick 2s, then skips ticks 3s and 4s.
        assert_eq!(e.run_due(4 * S + S / 2), 1);
        assert_eq!(e.counters().overruns, 2);
        let batches = e.force_flush();
        assert_eq!(batches[0].1, vec![(S, 1), (2 * S, 2)]);
        assert_eq!(e.earliest_due(), Some(5 * S));
    }

    #[test]
    fn send_schedule_follows_the_phase_lattice() {
        let cfg = tester_config(1, 1000);
        let e = PusherEngine::new(&cfg, 0).unwrap();
        let phase = e.send_phase_ns();
        assert_eq!(phase, send_phase("p1", S));
        assert_eq!(e.next_send_ns() % S, phase);
        assert!(e.next_send_ns() > 0);
        assert!(!e.send_due(phase.saturating_sub(1)));
        assert!(e.send_due(e.next_send_ns()));
    }

    #[test]
    fn take_batches_advances_schedule_and_drains_once() {
        let cfg = tester_config(2, 1000);
        let mut e = PusherEngine::new(&cfg, 0).unwrap();
        e.run_due(S);
        e.run_due(2 * S);
        let due = e.next_send_ns();
        let batches = e.take_send_batches(due);
        assert_eq!(batches.len(), 2);
        assert!(e.next_send_ns() > due);
        assert_eq!(e.next_send_ns() % S, e.send_phase_ns());
        assert!(e.take_send_batches(e.next_send_ns()).is_empty());
    }

    #[test]
    fn requeue_restores_order_and_drops_expired() {
        let mut cfg = tester_config(1, 1000);
        cfg.cache_window_ns = 3 * S;
        let mut e = PusherEngine::new(&cfg, 0).unwrap();
        e.run_due(S);
        e.run_due(2 * S);
        let batches = e.take_send_batches(e.next_send_ns().max(2 * S));
        // Send failed; meanwhile another tick lands.
        e.run_due(3 * S);
        e.requeue(batches, 3 * S);
        let again = e.force_flush();
        assert_eq!(again[0].1, vec![(S, 1), (2 * S, 2), (3 * S, 3)]);
        assert_eq!(e.counters().dropped, 0);
        // Re-queue far in the future: everything has expired.
        e.requeue(again, 100 * S);
        assert!(e.force_flush().is_empty());
        assert_eq!(e.counters().dropped, 3);
    }

    #[test]
    fn stop_start_keeps_counters_reload_resets() {
        let cfg = tester_config(1, 1000);
        let mut e = PusherEngine::new(&cfg, 0).unwrap();
        e.run_due(S);
        e.run_due(2 * S);
        e.plugin_control("tester", PluginAction::Stop, 2 * S).unwrap();
        assert_eq!(e.run_due(3 * S), 0, "stopped plugin does not sample");
        assert_eq!(e.plugin_states(), vec![("tester".into(), false)]);
        e.plugin_control("tester", PluginAction::Start, 3 * S + S / 2).unwrap();
        // Counter resumes where it left off.
        e.run_due(4 * S);
        let rows = e.force_flush();
        assert_eq!(rows[0].1.last(), Some(&(4 * S, 3)));
        e.plugin_control("tester", PluginAction::Reload, 4 * S).unwrap();
        e.run_due(5 * S);
        let rows = e.force_flush();
        assert_eq!(rows[0].1, vec![(5 * S, 1)], "reload rebuilt the plugin");
        assert!(matches!(
            e.plugin_control("nope", PluginAction::Stop, 0),
            Err(ControlError::UnknownPlugin(_))
        ));
    }

    #[test]
    fn failed_reload_keeps_old_plugin() {
        let cfg = tester_config(2, 1000);
        let mut e = PusherEngine::new(&cfg, 0).unwrap();
        e.run_due(S);
        let bad = crate::proptree::parse("group g {\n    sensors 0\n}\n").unwrap();
        let err = e.reload_plugin_with("tester", bad, S).unwrap_err();
        assert!(matches!(err, ControlError::ReloadFailed(_)));
        // Old instance still running with its counters.
        e.run_due(2 * S);
        let rows = e.force_flush();
        assert_eq!(rows[0].1, vec![(S, 1), (2 * S, 2)]);
    }

    #[test]
    fn cache_queries_scale_values() {
        let cfg = PusherConfig::parse(
            "global {\n    mqttprefix /n\n}\nplugin tester {\n    group g {\n        interval 1000\n        sensors 1\n        unit W\n        scale 0.5\n    }\n}\n",
        )
        .unwrap();
        let mut e = PusherEngine::new(&cfg, 0).unwrap();
        for k in 1..=4 {
            e.run_due(k * S);
        }
        let topic: Topic = "/n/g/s0".parse().unwrap();
        // Raw 1..4 scaled by 0.5. A 2 s window keeps readings strictly
        // newer than 2 s: raw {3, 4}, mean 3.5, scaled 1.75.
        assert_eq!(e.cache_latest(&topic), Some((4 * S, 2.0)));
        assert_eq!(e.cache_avg(&topic, 2 * S), Some(1.75));
        assert_eq!(e.cache_len(&topic), Some(4));
        assert_eq!(e.sensor_unit(&topic).unwrap().symbol(), "W");
        assert_eq!(e.cache_avg(&"/n/g/zzz".parse().unwrap(), S), None);
    }

    #[test]
    fn sensors_lists_all_topics_sorted() {
        let cfg = tester_config(3, 1000);
        let e = PusherEngine::new(&cfg, 0).unwrap();
        let names: Vec<String> = e.sensors().iter().map(|t| t.to_string()).collect();
        assert_eq!(names, vec!["/r1/c1/n1/g1/s0", "/r1/c1/n1/g1/s1", "/r1/c1/n1/g1/s2"]);
    }

    #[test]
    fn oversized_pending_queues_chunk_at_the_payload_limit() {
        let cfg = tester_config(1, 1000);
        let mut e = PusherEngine::new(&cfg, 0).unwrap();
        let topic: Topic = "/r1/c1/n1/g1/s0".parse().unwrap();
        let rows: Vec<(u64, i64)> = (0..MAX_RECORDS_PER_PUBLISH as u64 + 10).map(|k| (k + 1, 1)).collect();
        e.requeue(vec![(topic, rows)], 0);
        let batches = e.force_flush();
        assert_eq!(batches.len(), 2);
        assert_eq!(batches[0].1.len(), MAX_RECORDS_PER_PUBLISH);
        assert_eq!(batches[1].1.len(), 10);
    }
}
