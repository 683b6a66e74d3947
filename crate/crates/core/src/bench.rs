//! Measurement harness: the runtime-overhead metric, the linear
//! rate-to-CPU-load model, per-component CPU/memory accounting, and
//! end-to-end ingest sweeps that drive synthetic pusher fleets into an
//! in-process agent.
//!
//! Pushers and agent share this process, so CPU is attributed by thread
//! name prefix and the reported peak RSS is the process high-water mark.

use crate::collectagent::{run_agent, AgentConfig};
use crate::pusher::{run_pusher, ConfigSource};
use crate::storage::StoreConfig;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("bad sweep config: {0}")]
    Config(String),
    #[error("harness failure: {0}")]
    Harness(String),
}

/// One overhead measurement: how long a workload took alone and with a
/// pusher running beside it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverheadSample {
    pub reference_s: f64,
    pub with_pusher_s: f64,
}

impl OverheadSample {
    pub fn new(reference_s: f64, with_pusher_s: f64) -> Result<OverheadSample, ModelError> {
        if !(reference_s > 0.0) || !reference_s.is_finite() || !with_pusher_s.is_finite() {
            return Err(ModelError::DegenerateInput(
                "reference runtime must be positive and finite".into(),
            ));
        }
        Ok(OverheadSample { reference_s, with_pusher_s })
    }

    /// Relative slowdown. Negative means the monitored run was faster;
    /// the raw value is preserved and only reports clamp it.
    pub fn overhead(&self) -> f64 {
        (self.with_pusher_s - self.reference_s) / self.reference_s
    }

    /// Overhead as reported: a faster-than-reference run counts as none.
    pub fn reported(&self) -> f64 {
        self.overhead().max(0.0)
    }
}

/// Linear CPU-load model anchored on two calibration points
/// (rate in readings/s, load as fraction of a core).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingModel {
    a: (f64, f64),
    b: (f64, f64),
}

impl ScalingModel {
    pub fn new(a: (f64, f64), b: (f64, f64)) -> Result<ScalingModel, ModelError> {
        if ![a.0, a.1, b.0, b.1].iter().all(|v| v.is_finite()) {
            return Err(ModelError::DegenerateInput("calibration points must be finite".into()));
        }
        if a.0 == b.0 {
            return Err(ModelError::DegenerateInput(
                "calibration rates must differ".into(),
            ));
        }
        Ok(ScalingModel { a, b })
    }

    /// Load at rate `s` by interpolating (or extrapolating) the anchors:
    /// `L(a) + (s - a) * (L(b) - L(a)) / (b - a)`. No clamping.
    pub fn predict(&self, s: f64) -> f64 {
        let (ax, ay) = self.a;
        let (bx, by) = self.b;
        ay + (s - ax) * ((by - ay) / (bx - ax))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Ordinary least squares over (rate, load) points.
pub fn fit(points: &[(f64, f64)]) -> Result<LineFit, ModelError> {
    if points.len() < 2 {
        return Err(ModelError::DegenerateInput("need at least two points".into()));
    }
    if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(ModelError::DegenerateInput("points must be finite".into()));
    }
    let n = points.len() as f64;
    let mean_x = points.iter().map(|(x, _)| x).sum::<f64>() / n;
    let mean_y = points.iter().map(|(_, y)| y).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|(x, _)| (x - mean_x) * (x - mean_x)).sum();
    if sxx == 0.0 {
        return Err(ModelError::DegenerateInput("all rates are equal".into()));
    }
    let sxy: f64 = points.iter().map(|(x, y)| (x - mean_x) * (y - mean_y)).sum();
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let ss_res: f64 = points
        .iter()
        .map(|(x, y)| {
            let e = y - (intercept + slope * x);
            e * e
        })
        .sum();
    let ss_tot: f64 = points.iter().map(|(_, y)| (y - mean_y) * (y - mean_y)).sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok(LineFit { slope, intercept, r2 })
}

fn clock_seconds(clock: libc::clockid_t) -> f64 {
    let mut ts = libc::timespec { tv_sec: 0, tv_nsec: 0 };
    // Always valid for the CPU-time clock ids used below.
    unsafe { libc::clock_gettime(clock, &mut ts) };
    ts.tv_sec as f64 + ts.tv_nsec as f64 * 1e-9
}

/// CPU time consumed by the calling thread.
pub fn thread_cpu_seconds() -> f64 {
    clock_seconds(libc::CLOCK_THREAD_CPUTIME_ID)
}

/// CPU time consumed by the whole process.
pub fn process_cpu_seconds() -> f64 {
    clock_seconds(libc::CLOCK_PROCESS_CPUTIME_ID)
}

/// Thread-name prefixes owned by pusher internals.
pub const PUSHER_THREADS: &[&str] = &["sampler", "flusher"];
/// Thread-name prefixes owned by agent internals.
pub const AGENT_THREADS: &[&str] = &["mqtt-", "writer", "housekeeping"];

/// Sums CPU seconds over live threads of this process whose name starts
/// with one of `prefixes`. Threads that already exited are not seen, so
/// sample while the component is still running.
pub fn cpu_seconds_by_prefix(prefixes: &[&str]) -> f64 {
    let mut total = 0.0;
    let Ok(tasks) = std::fs::read_dir("/proc/self/task") else {
        return 0.0;
    };
    for task in tasks.flatten() {
        let dir = task.path();
        let Ok(comm) = std::fs::read_to_string(dir.join("comm")) else {
            continue;
        };
        let comm = comm.trim_end();
        if !prefixes.iter().any(|p| comm.starts_with(p)) {
            continue;
        }
        total += task_cpu_seconds(&dir).unwrap_or(0.0);
    }
    total
}

fn task_cpu_seconds(dir: &std::path::Path) -> Option<f64> {
    // schedstat reports nanoseconds on-cpu; fall back to the coarser
    // utime+stime ticks when the kernel doesn't expose it.
    if let Ok(text) = std::fs::read_to_string(dir.join("schedstat")) {
        if let Some(ns) = text.split_whitespace().next().and_then(|t| t.parse::<u64>().ok()) {
            return Some(ns as f64 * 1e-9);
        }
    }
    let stat = std::fs::read_to_string(dir.join("stat")).ok()?;
    let rest = &stat[stat.rfind(')')? + 1..];
    let fields: Vec<&str> = rest.split_whitespace().collect();
    let utime: u64 = fields.get(11)?.parse().ok()?;
    let stime: u64 = fields.get(12)?.parse().ok()?;
    let tck = unsafe { libc::sysconf(libc::_SC_CLK_TCK) };
    if tck <= 0 {
        return None;
    }
    Some((utime + stime) as f64 / tck as f64)
}

/// Peak resident set of this process in MiB, from the kernel's
/// high-water mark.
pub fn peak_rss_mb() -> Option<f64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    for line in status.lines() {
        if let Some(rest) = line.strip_prefix("VmHWM:") {
            let kb: f64 = rest.trim().trim_end_matches("kB").trim().parse().ok()?;
            return Some(kb / 1024.0);
        }
    }
    None
}

/// One grid cell: a fleet shape and its sampling interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SweepCell {
    pub pushers: usize,
    /// Tester sensors per pusher.
    pub sensors: usize,
    pub interval_ms: u64,
}

#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub cells: Vec<SweepCell>,
    pub duration: Duration,
    /// Excluded from CPU-load measurement; counters still accumulate.
    pub warmup: Duration,
}

impl SweepConfig {
    /// Default warmup is the first tenth of the run.
    pub fn new(cells: Vec<SweepCell>, duration: Duration) -> Result<SweepConfig, BenchError> {
        let warmup = duration / 10;
        SweepConfig::with_warmup(cells, duration, warmup)
    }

    pub fn with_warmup(
        cells: Vec<SweepCell>,
        duration: Duration,
        warmup: Duration,
    ) -> Result<SweepConfig, BenchError> {
        if cells.is_empty() {
            return Err(BenchError::Config("empty grid".into()));
        }
        for c in &cells {
            if c.pushers == 0 || c.sensors == 0 || c.interval_ms == 0 {
                return Err(BenchError::Config(format!("degenerate cell {c:?}")));
            }
        }
        if warmup >= duration {
            return Err(BenchError::Config("warmup must be shorter than the run".into()));
        }
        Ok(SweepConfig { cells, duration, warmup })
    }

    /// Sensor-count by sampling-interval grid on a single pusher.
    pub fn grid(
        sensors: &[usize],
        intervals_ms: &[u64],
        duration: Duration,
    ) -> Result<SweepConfig, BenchError> {
        let mut cells = Vec::new();
        for &s in sensors {
            for &i in intervals_ms {
                cells.push(SweepCell { pushers: 1, sensors: s, interval_ms: i });
            }
        }
        SweepConfig::new(cells, duration)
    }
}

#[derive(Debug, Clone)]
pub struct CellReport {
    pub cell: SweepCell,
    /// Readings sampled by the fleet (the tester counters).
    pub offered: u64,
    /// Readings the agent committed to storage.
    pub stored: u64,
    /// Readings that aged out of pusher queues while the broker was
    /// unreachable.
    pub dropped_pusher: u64,
    /// Readings the agent received but could not keep.
    pub dropped_agent: u64,
    /// Readings handed to the transport.
    pub published: u64,
    /// Readings the agent accepted off the wire.
    pub received: u64,
    /// Wall clock covering the whole cell, seconds.
    pub wall_s: f64,
    /// Post-warmup CPU load in cores.
    pub pusher_cpu: f64,
    pub agent_cpu: f64,
    pub pusher_rss_mb: f64,
}

impl CellReport {
    pub fn offered_rps(&self) -> f64 {
        self.offered as f64 / self.wall_s
    }

    pub fn stored_rps(&self) -> f64 {
        self.stored as f64 / self.wall_s
    }

    pub fn loss(&self) -> f64 {
        if self.offered == 0 {
            0.0
        } else {
            (self.offered - self.stored) as f64 / self.offered as f64
        }
    }

    /// Every sampled reading is accounted for: stored, dropped at the
    /// pusher, or dropped at the agent. False means readings vanished in
    /// flight (a lost session or an unclean shutdown).
    pub fn balanced(&self) -> bool {
        self.offered == self.stored + self.dropped_pusher + self.dropped_agent
    }
}

pub const SWEEP_CSV_HEADER: &str =
    "pushers,sensors,interval_ms,offered_rps,stored_rps,loss,pusher_cpu,agent_cpu,pusher_rss_mb";

pub fn sweep_csv(rows: &[CellReport]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.1},{:.1},{:.6},{:.4},{:.4},{:.1}\n",
            r.cell.pushers,
            r.cell.sensors,
            r.cell.interval_ms,
            r.offered_rps(),
            r.stored_rps(),
            r.loss(),
            r.pusher_cpu,
            r.agent_cpu,
            r.pusher_rss_mb,
        ));
    }
    out
}

pub fn run_sweep(cfg: &SweepConfig) -> Result<Vec<CellReport>, BenchError> {
    cfg.cells
        .iter()
        .map(|cell| run_cell(cell, cfg.duration, cfg.warmup))
        .collect()
}

static SCRATCH_SEQ: AtomicU64 = AtomicU64::new(0);

/// Temp directory that disappears with the cell.
struct Scratch(PathBuf);

impl Scratch {
    fn new() -> Result<Scratch, BenchError> {
        let path = std::env::temp_dir().join(format!(
            "shv-bench-{}-{}",
            std::process::id(),
            SCRATCH_SEQ.fetch_add(1, Ordering::Relaxed)
        ));
        std::fs::create_dir_all(&path)
            .map_err(|e| BenchError::Harness(format!("scratch dir {}: {e}", path.display())))?;
        Ok(Scratch(path))
    }
}

impl Drop for Scratch {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.0);
    }
}

fn pusher_config_text(index: usize, port: u16, cell: &SweepCell) -> String {
    format!(
        "global {{\n    broker 127.0.0.1:{port}\n    mqttprefix /bench/p{index}\n    \
         mqttClientId bench-p{index}\n    threads 1\n}}\n\
         plugin tester {{\n    group g {{\n        interval {}\n        sensors {}\n    }}\n}}\n",
        cell.interval_ms, cell.sensors
    )
}

/// Runs one cell end to end: agent up, fleet up, measure, tear down in
/// ingest order so nothing is lost in flight.
pub fn run_cell(cell: &SweepCell, duration: Duration, warmup: Duration) -> Result<CellReport, BenchError> {
    let harness = |e: &dyn std::fmt::Display| BenchError::Harness(e.to_string());
    let scratch = Scratch::new()?;
    let agent = run_agent(AgentConfig {
        mqtt_port: 0,
        rest_port: None,
        cache_window_ns: 120_000_000_000,
        writers: 2,
        store: StoreConfig::new(scratch.0.join("store")),
    })
    .map_err(|e| harness(&e))?;
    let port = agent.mqtt_port();

    let mut fleet = Vec::with_capacity(cell.pushers);
    for i in 0..cell.pushers {
        let source = ConfigSource::Literal(pusher_config_text(i, port, cell));
        let config = source.read().map_err(|e| harness(&e))?;
        fleet.push(run_pusher(config, source).map_err(|e| harness(&e))?);
    }

    let started = Instant::now();
    std::thread::sleep(warmup);
    let measure_start = Instant::now();
    let pusher_cpu0 = cpu_seconds_by_prefix(PUSHER_THREADS);
    let agent_cpu0 = cpu_seconds_by_prefix(AGENT_THREADS);
    std::thread::sleep(duration.saturating_sub(started.elapsed()));
    let pusher_cpu1 = cpu_seconds_by_prefix(PUSHER_THREADS);
    let agent_cpu1 = cpu_seconds_by_prefix(AGENT_THREADS);
    let window_s = measure_start.elapsed().as_secs_f64();

    let mut offered = 0u64;
    let mut dropped_pusher = 0u64;
    let mut published = 0u64;
    for handle in fleet {
        let counters = handle.stop();
        offered += counters.sampled;
        dropped_pusher += counters.dropped;
        published += counters.published;
    }
    let wall_s = started.elapsed().as_secs_f64();

    // Let in-flight disconnects finish before tearing the agent down.
    let deadline = Instant::now() + Duration::from_secs(10);
    while agent.core().stats().sessions_active > 0 && Instant::now() < deadline {
        std::thread::sleep(Duration::from_millis(10));
    }
    let core = agent.stop();
    let stats = core.stats();

    Ok(CellReport {
        cell: *cell,
        offered,
        stored: stats.stored,
        dropped_pusher,
        dropped_agent: stats.readings.saturating_sub(stats.stored),
        published,
        received: stats.readings,
        wall_s,
        pusher_cpu: (pusher_cpu1 - pusher_cpu0) / window_s,
        agent_cpu: (agent_cpu1 - agent_cpu0) / window_s,
        pusher_rss_mb: peak_rss_mb().unwrap_or(0.0),
    })
}
