//! Network front end for the agent core: a publish-only MQTT listener
//! with one thread per session, plus the status/query API.

use super::core::{AgentCore, QueryOutcome};
use super::AgentConfig;
use crate::clock::{Clock, SystemClock};
use crate::rest::{RestRequest, RestResponse, RestServer};
use crate::wire::{self, DecodeOutcome, Packet};
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServeError {
    #[error(transparent)]
    Core(#[from] super::core::AgentError),
    #[error("listener: {0}")]
    Bind(std::io::Error),
}

/// Sessions poll their socket at this cadence so shutdown and keep-alive
/// deadlines are enforced without long blocking reads.
const POLL: Duration = Duration::from_millis(100);
/// A client gets this long to send its Connect packet.
const CONNECT_GRACE: Duration = Duration::from_secs(10);

pub struct AgentHandle {
    core: Arc<AgentCore>,
    shutdown: Arc<AtomicBool>,
    mqtt_port: u16,
    rest: Option<RestServer>,
    threads: Vec<JoinHandle<()>>,
    sessions: Arc<Mutex<Vec<JoinHandle<()>>>>,
}

impl AgentHandle {
    pub fn mqtt_port(&self) -> u16 {
        self.mqtt_port
    }

    pub fn rest_port(&self) -> Option<u16> {
        self.rest.as_ref().map(|r| r.port())
    }

    pub fn core(&self) -> Arc<AgentCore> {
        Arc::clone(&self.core)
    }

    /// Stops accepting, closes sessions, drains the write queue, and
    /// flushes everything durable.
    pub fn stop(mut self) -> Arc<AgentCore> {
        self.shutdown.store(true, Ordering::SeqCst);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
        let sessions = std::mem::take(&mut *self.sessions.lock().unwrap());
        for s in sessions {
            let _ = s.join();
        }
        self.rest.take();
        let _ = self.core.drain();
        self.core
    }
}

pub fn run_agent(config: AgentConfig) -> Result<AgentHandle, ServeError> {
    let core = Arc::new(AgentCore::open(&config)?);
    let shutdown = Arc::new(AtomicBool::new(false));
    let sessions: Arc<Mutex<Vec<JoinHandle<()>>>> = Arc::new(Mutex::new(Vec::new()));

    let listener = TcpListener::bind(("127.0.0.1", config.mqtt_port)).map_err(ServeError::Bind)?;
    let mqtt_port = listener.local_addr().map_err(ServeError::Bind)?.port();
    listener.set_nonblocking(true).map_err(ServeError::Bind)?;

    let mut threads = Vec::new();
    {
        let core = Arc::clone(&core);
        let shutdown = Arc::clone(&shutdown);
        let sessions = Arc::clone(&sessions);
        threads.push(
            std::thread::Builder::new()
                .name("mqtt-accept".into())
                .spawn(move || accept_loop(listener, core, shutdown, sessions))
                .map_err(ServeError::Bind)?,
        );
    }
    {
        // Housekeeping: persist the topic dictionary as it grows.
        let core = Arc::clone(&core);
        let shutdown = Arc::clone(&shutdown);
        threads.push(
            std::thread::Builder::new()
                .name("housekeeping".into())
                .spawn(move || {
                    while !shutdown.load(Ordering::SeqCst) {
                        let _ = core.persist_dict();
                        std::thread::sleep(Duration::from_millis(500));
                    }
                })
                .map_err(ServeError::Bind)?,
        );
    }

    let rest = match config.rest_port {
        None => None,
        Some(port) => {
            let handler = rest_handler(Arc::clone(&core));
            Some(RestServer::start(&format!("127.0.0.1:{port}"), handler).map_err(ServeError::Bind)?)
        }
    };

    Ok(AgentHandle { core, shutdown, mqtt_port, rest, threads, sessions })
}

fn accept_loop(
    listener: TcpListener,
    core: Arc<AgentCore>,
    shutdown: Arc<AtomicBool>,
    sessions: Arc<Mutex<Vec<JoinHandle<()>>>>,
) {
    while !shutdown.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, _)) => {
                let core = Arc::clone(&core);
                let shutdown = Arc::clone(&shutdown);
                let handle = std::thread::Builder::new()
                    .name("mqtt-session".into())
                    .spawn(move || session_loop(stream, core, shutdown));
                if let Ok(handle) = handle {
                    sessions.lock().unwrap().push(handle);
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                std::thread::sleep(Duration::from_millis(20));
            }
            Err(_) => break,
        }
    }
}

fn session_loop(mut stream: TcpStream, core: Arc<AgentCore>, shutdown: Arc<AtomicBool>) {
    core.session_opened();
    let _ = stream.set_nodelay(true);
    let _ = stream.set_read_timeout(Some(POLL));
    let mut buf: Vec<u8> = Vec::new();
    let mut chunk = vec![0u8; 64 * 1024];
    let mut connected = false;
    let mut deadline = Instant::now() + CONNECT_GRACE;
    let mut keep_alive: Option<Duration> = None;

    'session: loop {
        if shutdown.load(Ordering::SeqCst) || Instant::now() > deadline {
            break;
        }
        let n = match stream.read(&mut chunk) {
            Ok(0) => break,
            Ok(n) => n,
            Err(e) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {
                continue;
            }
            Err(_) => break,
        };
        buf.extend_from_slice(&chunk[..n]);
        if let Some(ka) = keep_alive {
            deadline = Instant::now() + ka;
        }

        let mut off = 0;
        loop {
            let outcome = match wire::decode_packet(&buf[off..]) {
                Ok(o) => o,
                Err(_) => {
                    // Framing is broken; nothing after this point can be
                    // trusted.
                    core.note_violation();
                    break 'session;
                }
            };
            let (packet, consumed) = match outcome {
                DecodeOutcome::NeedMoreBytes => break,
                DecodeOutcome::Packet { packet, consumed } => (packet, consumed),
            };
            off += consumed;
            if !connected {
                match packet {
                    Packet::Connect { keep_alive_s, .. } => {
                        connected = true;
                        // A clientside keep-alive of zero disables the
                        // idle timeout; otherwise allow half again as
                        // long, as the protocol prescribes.
                        keep_alive = (keep_alive_s > 0)
                            .then(|| Duration::from_millis(keep_alive_s as u64 * 1500));
                        deadline = keep_alive.map_or(Instant::now() + Duration::from_secs(86_400), |ka| Instant::now() + ka);
                        let ack = Packet::ConnAck { session_present: false, return_code: 0 };
                        let bytes = wire::encode_packet(&ack).expect("static packet");
                        if stream.write_all(&bytes).and_then(|_| stream.flush()).is_err() {
                            break 'session;
                        }
                    }
                    _ => {
                        core.note_violation();
                        break 'session;
                    }
                }
                continue;
            }
            match packet {
                Packet::Publish { topic, payload } => {
                    // A malformed message is dropped and counted inside
                    // handle_publish; the session lives on.
                    let _ = core.handle_publish(&topic, &payload);
                }
                Packet::PingReq => {
                    let bytes = wire::encode_packet(&Packet::PingResp).expect("static packet");
                    if stream.write_all(&bytes).and_then(|_| stream.flush()).is_err() {
                        break 'session;
                    }
                }
                Packet::Disconnect => break 'session,
                Packet::Connect { .. } | Packet::ConnAck { .. } | Packet::PingResp => {
                    core.note_violation();
                    break 'session;
                }
            }
        }
        buf.drain(..off);
    }
    core.session_closed();
}

fn rest_handler(core: Arc<AgentCore>) -> Arc<crate::rest::Handler> {
    Arc::new(move |req: &RestRequest| route(&core, req))
}

fn route(core: &Arc<AgentCore>, req: &RestRequest) -> RestResponse {
    if req.method != "GET" {
        return RestResponse::bad_request("only GET here");
    }
    match req.path.as_str() {
        "/version" => RestResponse::ok(env!("CARGO_PKG_VERSION")),
        "/sensors" => {
            let mut body = String::new();
            for t in core.topics() {
                body.push_str(&t.to_string());
                body.push('\n');
            }
            RestResponse::ok(body)
        }
        "/sensors/latest" => {
            let topic = match topic_param(req) {
                Ok(t) => t,
                Err(resp) => return resp,
            };
            let outcome = core.latest(&topic, SystemClock.now_ns());
            respond_outcome(outcome, true)
        }
        "/sensors/avg" => {
            let topic = match topic_param(req) {
                Ok(t) => t,
                Err(resp) => return resp,
            };
            let window = match window_param(req) {
                Ok(w) => w,
                Err(resp) => return resp,
            };
            respond_outcome(core.average(&topic, window), false)
        }
        "/stats" => {
            let s = core.stats();
            RestResponse::ok(format!(
                "sessionsOpened {}\nsessionsActive {}\nmessages {}\nreadings {}\nstored {}\nmalformed {}\nviolations {}\nstoreErrors {}\n",
                s.sessions_opened, s.sessions_active, s.messages, s.readings, s.stored, s.malformed, s.violations, s.store_errors
            ))
        }
        _ => RestResponse::not_found("no such route"),
    }
}

fn topic_param(req: &RestRequest) -> Result<crate::model::Topic, RestResponse> {
    let raw = req
        .params
        .get("topic")
        .ok_or_else(|| RestResponse::bad_request("missing topic parameter"))?;
    raw.parse().map_err(|e| RestResponse::bad_request(format!("topic: {e}")))
}

fn window_param(req: &RestRequest) -> Result<u64, RestResponse> {
    match req.params.get("window") {
        None => Ok(u64::MAX),
        Some(raw) => raw
            .parse::<u64>()
            .ok()
            .and_then(|ms| ms.checked_mul(1_000_000))
            .ok_or_else(|| RestResponse::bad_request("window must be milliseconds")),
    }
}

fn respond_outcome(outcome: QueryOutcome, with_ts: bool) -> RestResponse {
    match outcome {
        QueryOutcome::UnknownSensor => RestResponse::not_found("unknown sensor"),
        QueryOutcome::NoData => RestResponse::unavailable("no recent readings"),
        QueryOutcome::Value { timestamp_ns, value, unit } => {
            let mut body = if with_ts { format!("{timestamp_ns} {value}") } else { format!("{value}") };
            if !unit.symbol().is_empty() {
                body.push(' ');
                body.push_str(unit.symbol());
            }
            RestResponse::ok(body)
        }
    }
}
