//! Threaded pusher runtime around [`PusherEngine`]: sampler threads fire
//! group ticks, a flusher publishes batches over MQTT with reconnect
//! backoff, and an optional status API serves cache queries and plugin
//! control.

use super::config::{ConfigSource, PusherConfig};
use super::engine::{Counters, PluginAction, PusherEngine};
use crate::clock::{Clock, SystemClock, Waker};
use crate::rest::{RestRequest, RestResponse, RestServer};
use crate::wire::{self, DecodeOutcome, Packet};
use std::io::{Read, Write};
use std::net::TcpStream;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DaemonError {
    #[error(transparent)]
    Engine(#[from] super::engine::EngineError),
    #[error("status api: {0}")]
    Rest(std::io::Error),
}

const KEEP_ALIVE_S: u16 = 60;
const BACKOFF_START: Duration = Duration::from_secs(1);
const BACKOFF_CAP: Duration = Duration::from_secs(60);
/// Sleep cap so shutdown and schedule changes are picked up promptly.
const NAP: Duration = Duration::from_millis(100);

pub struct PusherHandle {
    engine: Arc<Mutex<PusherEngine>>,
    shutdown: Arc<AtomicBool>,
    waker: Arc<Waker>,
    threads: Vec<JoinHandle<()>>,
    rest: Option<RestServer>,
}

impl PusherHandle {
    pub fn rest_port(&self) -> Option<u16> {
        self.rest.as_ref().map(|r| r.port())
    }

    pub fn engine(&self) -> Arc<Mutex<PusherEngine>> {
        Arc::clone(&self.engine)
    }

    /// Wakes the sampler and flusher threads so they re-read the clock
    /// immediately instead of finishing their nap. A no-op under the system
    /// clock; with an injected test clock it makes ticks take effect
    /// promptly after each advance.
    pub fn poke(&self) {
        self.waker.notify();
    }

    /// Stops sampling, flushes whatever is queued, and returns the final
    /// counters.
    pub fn stop(mut self) -> Counters {
        self.shutdown.store(true, Ordering::SeqCst);
        self.waker.notify();
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
        self.rest.take();
        let engine = self.engine.lock().unwrap();
        engine.counters()
    }
}

pub fn run_pusher(config: PusherConfig, source: ConfigSource) -> Result<PusherHandle, DaemonError> {
    run_pusher_with_clock(config, source, Arc::new(SystemClock))
}

/// [`run_pusher`] with an injected clock, so tests can drive sampling
/// tick by tick instead of waiting out real time.
pub fn run_pusher_with_clock(
    config: PusherConfig,
    source: ConfigSource,
    clock: Arc<dyn Clock>,
) -> Result<PusherHandle, DaemonError> {
    let engine = PusherEngine::new(&config, clock.now_ns())?;
    let engine = Arc::new(Mutex::new(engine));
    let shutdown = Arc::new(AtomicBool::new(false));
    let waker = Arc::new(Waker::new());

    let mut threads = Vec::new();
    for i in 0..config.threads {
        let engine = Arc::clone(&engine);
        let shutdown = Arc::clone(&shutdown);
        let waker = Arc::clone(&waker);
        let clock = Arc::clone(&clock);
        threads.push(
            std::thread::Builder::new()
                .name(format!("sampler{i}"))
                .spawn(move || sampler_loop(engine, shutdown, waker, clock))
                .map_err(DaemonError::Rest)?,
        );
    }
    {
        let engine = Arc::clone(&engine);
        let shutdown = Arc::clone(&shutdown);
        let waker = Arc::clone(&waker);
        let clock = Arc::clone(&clock);
        let broker = config.broker.clone();
        let client_id = config.client_id.clone();
        threads.push(
            std::thread::Builder::new()
                .name("flusher".into())
                .spawn(move || flusher_loop(engine, shutdown, waker, clock, broker, client_id))
                .map_err(DaemonError::Rest)?,
        );
    }

    let rest = match config.rest_port {
        None => None,
        Some(port) => {
            let handler = rest_handler(Arc::clone(&engine), source);
            Some(RestServer::start(&format!("127.0.0.1:{port}"), handler).map_err(DaemonError::Rest)?)
        }
    };

    Ok(PusherHandle { engine, shutdown, waker, threads, rest })
}

fn sampler_loop(
    engine: Arc<Mutex<PusherEngine>>,
    shutdown: Arc<AtomicBool>,
    waker: Arc<Waker>,
    clock: Arc<dyn Clock>,
) {
    while !shutdown.load(Ordering::SeqCst) {
        let now = clock.now_ns();
        let (sampled, next_due) = {
            let mut e = engine.lock().unwrap();
            (e.run_due(now), e.earliest_due())
        };
        if sampled > 0 {
            continue;
        }
        let sleep = match next_due {
            None => NAP,
            Some(due) => Duration::from_nanos(due.saturating_sub(clock.now_ns())).min(NAP),
        };
        if !sleep.is_zero() {
            waker.wait_timeout(sleep);
        }
    }
}

struct Broker {
    addr: String,
    client_id: String,
    conn: Option<TcpStream>,
    backoff: Duration,
    next_attempt: std::time::Instant,
}

impl Broker {
    fn new(addr: String, client_id: String) -> Broker {
        Broker {
            addr,
            client_id,
            conn: None,
            backoff: BACKOFF_START,
            next_attempt: std::time::Instant::now(),
        }
    }

    /// Connects and completes the session handshake if not already up.
    /// Failed attempts back off exponentially up to a minute.
    fn ensure(&mut self) -> Option<&mut TcpStream> {
        if self.conn.is_none() {
            if std::time::Instant::now() < self.next_attempt {
                return None;
            }
            match connect_session(&self.addr, &self.client_id) {
                Ok(stream) => {
                    self.conn = Some(stream);
                    self.backoff = BACKOFF_START;
                }
                Err(_) => {
                    self.next_attempt = std::time::Instant::now() + self.backoff;
                    self.backoff = (self.backoff * 2).min(BACKOFF_CAP);
                    return None;
                }
            }
        }
        self.conn.as_mut()
    }

    fn publish_batches(&mut self, batches: &[(crate::model::Topic, Vec<(u64, i64)>)]) -> std::io::Result<()> {
        let stream = self.conn.as_mut().ok_or_else(|| std::io::Error::from(std::io::ErrorKind::NotConnected))?;
        for (topic, rows) in batches {
            let packet = Packet::Publish {
                topic: topic.to_string(),
                payload: wire::encode_payload(rows),
            };
            let bytes = wire::encode_packet(&packet)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))?;
            stream.write_all(&bytes)?;
        }
        stream.flush()?;
        drain_incoming(stream);
        Ok(())
    }

    fn disconnect(&mut self) {
        if let Some(mut stream) = self.conn.take() {
            if let Ok(bytes) = wire::encode_packet(&Packet::Disconnect) {
                let _ = stream.write_all(&bytes);
                let _ = stream.flush();
            }
        }
    }
}

fn connect_session(addr: &str, client_id: &str) -> std::io::Result<TcpStream> {
    let mut stream = TcpStream::connect(addr)?;
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(Duration::from_secs(5)))?;
    let connect = Packet::Connect {
        client_id: client_id.to_owned(),
        keep_alive_s: KEEP_ALIVE_S,
        clean_session: true,
    };
    let bytes = wire::encode_packet(&connect)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))?;
    stream.write_all(&bytes)?;
    stream.flush()?;
    // The session is open once the agent acknowledges.
    let mut buf = [0u8; 4];
    stream.read_exact(&mut buf)?;
    match wire::decode_packet(&buf) {
        Ok(DecodeOutcome::Packet { packet: Packet::ConnAck { return_code: 0, .. }, .. }) => Ok(stream),
        _ => Err(std::io::Error::new(std::io::ErrorKind::ConnectionRefused, "connection rejected")),
    }
}

/// Discards any buffered broker-to-client bytes (ping replies). QoS 0
/// publishes are never acknowledged, so nothing here needs parsing.
fn drain_incoming(stream: &mut TcpStream) {
    let _ = stream.set_read_timeout(Some(Duration::from_millis(1)));
    let mut sink = [0u8; 256];
    loop {
        match stream.read(&mut sink) {
            Ok(0) | Err(_) => break,
            Ok(_) => continue,
        }
    }
    let _ = stream.set_read_timeout(Some(Duration::from_secs(5)));
}

fn flusher_loop(
    engine: Arc<Mutex<PusherEngine>>,
    shutdown: Arc<AtomicBool>,
    waker: Arc<Waker>,
    clock: Arc<dyn Clock>,
    broker_addr: String,
    client_id: String,
) {
    let mut broker = Broker::new(broker_addr, client_id);
    let mut last_io = clock.now_ns();
    loop {
        let stopping = shutdown.load(Ordering::SeqCst);
        let now = clock.now_ns();
        let batches = {
            let mut e = engine.lock().unwrap();
            if stopping {
                e.force_flush()
            } else if e.send_due(now) {
                e.take_send_batches(now)
            } else {
                Vec::new()
            }
        };
        if !batches.is_empty() {
            let sent = send_or_requeue(&mut broker, &engine, batches, now);
            if sent {
                last_io = now;
            }
        } else if !stopping && broker.conn.is_some() && now.saturating_sub(last_io) > KEEP_ALIVE_S as u64 * 500_000_000 {
            // Idle half the keep-alive window: ping so the agent keeps
            // the session.
            let ping = wire::encode_packet(&Packet::PingReq).expect("static packet");
            let alive = match broker.conn.as_mut() {
                Some(s) => s.write_all(&ping).and_then(|_| s.flush()).is_ok(),
                None => false,
            };
            if alive {
                if let Some(s) = broker.conn.as_mut() {
                    drain_incoming(s);
                }
                last_io = now;
            } else {
                broker.conn = None;
            }
        }
        if stopping {
            broker.disconnect();
            return;
        }
        let next_send = engine.lock().unwrap().next_send_ns();
        let sleep = Duration::from_nanos(next_send.saturating_sub(clock.now_ns())).min(NAP);
        if !sleep.is_zero() {
            waker.wait_timeout(sleep);
        }
    }
}

fn send_or_requeue(
    broker: &mut Broker,
    engine: &Arc<Mutex<PusherEngine>>,
    batches: Vec<(crate::model::Topic, Vec<(u64, i64)>)>,
    now: u64,
) -> bool {
    let connected = broker.ensure().is_some();
    let outcome = if connected { broker.publish_batches(&batches) } else { Err(std::io::ErrorKind::NotConnected.into()) };
    match outcome {
        Ok(()) => {
            let readings: u64 = batches.iter().map(|(_, r)| r.len() as u64).sum();
            engine.lock().unwrap().note_published(readings);
            true
        }
        Err(_) => {
            broker.conn = None;
            engine.lock().unwrap().requeue(batches, now);
            false
        }
    }
}

fn rest_handler(engine: Arc<Mutex<PusherEngine>>, source: ConfigSource) -> Arc<crate::rest::Handler> {
    Arc::new(move |req: &RestRequest| route(&engine, &source, req))
}

fn route(engine: &Arc<Mutex<PusherEngine>>, source: &ConfigSource, req: &RestRequest) -> RestResponse {
    match (req.method.as_str(), req.path.as_str()) {
        ("GET", "/version") => RestResponse::ok(env!("CARGO_PKG_VERSION")),
        ("GET", "/sensors") => {
            let e = engine.lock().unwrap();
            let mut body = String::new();
            for t in e.sensors() {
                body.push_str(&t.to_string());
                body.push('\n');
            }
            RestResponse::ok(body)
        }
        ("GET", "/sensors/avg") => average(engine, req),
        ("GET", "/sensors/cache") => cache_rows(engine, req),
        ("GET", "/plugins") => {
            let e = engine.lock().unwrap();
            let mut body = String::new();
            for (name, running) in e.plugin_states() {
                body.push_str(&format!("{name} {}\n", if running { "running" } else { "stopped" }));
            }
            RestResponse::ok(body)
        }
        ("GET", "/stats") => {
            let c = engine.lock().unwrap().counters();
            RestResponse::ok(format!(
                "sampled {}\nreadErrors {}\noverruns {}\ndropped {}\npublished {}\n",
                c.sampled, c.read_errors, c.overruns, c.dropped, c.published
            ))
        }
        ("POST", path) => plugin_control(engine, source, path, req),
        _ => RestResponse::not_found("no such route"),
    }
}

fn parse_topic(req: &RestRequest) -> Result<crate::model::Topic, RestResponse> {
    let raw = req
        .params
        .get("topic")
        .ok_or_else(|| RestResponse::bad_request("missing topic parameter"))?;
    raw.parse().map_err(|e| RestResponse::bad_request(format!("topic: {e}")))
}

fn parse_window_ns(req: &RestRequest) -> Result<u64, RestResponse> {
    match req.params.get("window") {
        None => Ok(u64::MAX),
        Some(raw) => raw
            .parse::<u64>()
            .ok()
            .and_then(|ms| ms.checked_mul(1_000_000))
            .ok_or_else(|| RestResponse::bad_request("window must be milliseconds")),
    }
}

fn average(engine: &Arc<Mutex<PusherEngine>>, req: &RestRequest) -> RestResponse {
    let topic = match parse_topic(req) {
        Ok(t) => t,
        Err(resp) => return resp,
    };
    let window = match parse_window_ns(req) {
        Ok(w) => w,
        Err(resp) => return resp,
    };
    let e = engine.lock().unwrap();
    if e.cache_len(&topic).is_none() {
        return RestResponse::not_found(format!("unknown sensor {topic}"));
    }
    match e.cache_avg(&topic, window) {
        Some(avg) => RestResponse::ok(format!("{avg}")),
        None => RestResponse::unavailable("no readings in the cache yet"),
    }
}

/// Cache contents as `sensor,timestamp,value` CSV, matching the query
/// tooling's export format.
fn cache_rows(engine: &Arc<Mutex<PusherEngine>>, req: &RestRequest) -> RestResponse {
    let topic = match parse_topic(req) {
        Ok(t) => t,
        Err(resp) => return resp,
    };
    let e = engine.lock().unwrap();
    match e.cache_rows(&topic) {
        None => RestResponse::not_found(format!("unknown sensor {topic}")),
        Some(rows) => {
            let mut body = format!("{}\n", crate::querylib::CSV_HEADER);
            for (ts, v) in rows {
                body.push_str(&format!("{topic},{ts},{v}\n"));
            }
            RestResponse::ok(body)
        }
    }
}

/// `POST /plugins/{name}?action=start|stop|reload`.
fn plugin_control(
    engine: &Arc<Mutex<PusherEngine>>,
    source: &ConfigSource,
    path: &str,
    req: &RestRequest,
) -> RestResponse {
    let parts: Vec<&str> = path.trim_start_matches('/').split('/').collect();
    let ["plugins", name] = parts.as_slice() else {
        return RestResponse::not_found("no such route");
    };
    let Some(raw_action) = req.params.get("action") else {
        return RestResponse::bad_request("missing action parameter");
    };
    let Some(action) = PluginAction::parse(raw_action) else {
        return RestResponse::bad_request(format!("unknown action {raw_action:?}"));
    };
    let now = SystemClock.now_ns();
    if action == PluginAction::Reload {
        // Reload re-reads the configuration source so edits take effect.
        let fresh = match source.read() {
            Ok(cfg) => cfg,
            Err(e) => return RestResponse::unavailable(format!("config re-read failed: {e}")),
        };
        let Some((_, node)) = fresh.plugins.into_iter().find(|(kind, _)| kind == name) else {
            return RestResponse::not_found(format!("no plugin {name:?} in configuration"));
        };
        return match engine.lock().unwrap().reload_plugin_with(name, node, now) {
            Ok(()) => RestResponse::ok("reloaded"),
            Err(super::engine::ControlError::UnknownPlugin(_)) => {
                RestResponse::not_found(format!("unknown plugin {name:?}"))
            }
            Err(e) => RestResponse::unavailable(e.to_string()),
        };
    }
    match engine.lock().unwrap().plugin_control(name, action, now) {
        Ok(()) => RestResponse::ok("ok"),
        Err(super::engine::ControlError::UnknownPlugin(_)) => {
            RestResponse::not_found(format!("unknown plugin {name:?}"))
        }
        Err(e) => RestResponse::unavailable(e.to_string()),
    }
}
