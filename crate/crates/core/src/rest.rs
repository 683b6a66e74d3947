//! Small HTTP layer shared by the pusher and collect agent status APIs.
//!
//! Wraps a threaded server around a single handler function; routing
//! stays with the daemons, this module only deals in paths, decoded
//! query parameters, and plain-text responses.

use std::collections::HashMap;
use std::io;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RestRequest {
    /// Uppercase method, e.g. "GET" or "POST".
    pub method: String,
    /// Path with the query string stripped, e.g. "/sensors/avg".
    pub path: String,
    pub params: HashMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RestResponse {
    pub status: u16,
    pub body: String,
}

impl RestResponse {
    pub fn ok(body: impl Into<String>) -> RestResponse {
        RestResponse { status: 200, body: body.into() }
    }

    pub fn bad_request(msg: impl Into<String>) -> RestResponse {
        RestResponse { status: 400, body: msg.into() }
    }

    pub fn not_found(msg: impl Into<String>) -> RestResponse {
        RestResponse { status: 404, body: msg.into() }
    }

    pub fn unavailable(msg: impl Into<String>) -> RestResponse {
        RestResponse { status: 503, body: msg.into() }
    }
}

pub type Handler = dyn Fn(&RestRequest) -> RestResponse + Send + Sync;

/// Percent-decodes a query component; '+' is a space.
pub fn percent_decode(s: &str) -> String {
    let bytes = s.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'+' => {
                out.push(b' ');
                i += 1;
            }
            b'%' if i + 2 < bytes.len() => {
                let hex = &s[i + 1..i + 3];
                match u8::from_str_radix(hex, 16) {
                    Ok(b) => {
                        out.push(b);
                        i += 3;
                    }
                    Err(_) => {
                        out.push(b'%');
                        i += 1;
                    }
                }
            }
            b => {
                out.push(b);
                i += 1;
            }
        }
    }
    String::from_utf8_lossy(&out).into_owned()
}

/// Splits "/path?a=1&b=x%20y" into the path and decoded parameters.
pub fn split_query(url: &str) -> (String, HashMap<String, String>) {
    match url.split_once('?') {
        None => (url.to_owned(), HashMap::new()),
        Some((path, query)) => {
            let mut params = HashMap::new();
            for pair in query.split('&').filter(|p| !p.is_empty()) {
                let (k, v) = pair.split_once('=').unwrap_or((pair, ""));
                params.insert(percent_decode(k), percent_decode(v));
            }
            (path.to_owned(), params)
        }
    }
}

/// Threaded HTTP server bound to `addr` ("host:port", port 0 for ephemeral).
pub struct RestServer {
    port: u16,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl RestServer {
    pub fn start(addr: &str, handler: Arc<Handler>) -> io::Result<RestServer> {
        let server = tiny_http::Server::http(addr)
            .map_err(|e| io::Error::new(io::ErrorKind::AddrInUse, e.to_string()))?;
        let port = server
            .server_addr()
            .to_ip()
            .map(|a| a.port())
            .unwrap_or(0);
        let stop = Arc::new(AtomicBool::new(false));
        let stop_flag = Arc::clone(&stop);
        let thread = std::thread::Builder::new()
            .name("rest".into())
            .spawn(move || serve_loop(server, stop_flag, handler))?;
        Ok(RestServer { port, stop, thread: Some(thread) })
    }

    pub fn port(&self) -> u16 {
        self.port
    }
}

impl Drop for RestServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn serve_loop(server: tiny_http::Server, stop: Arc<AtomicBool>, handler: Arc<Handler>) {
    while !stop.load(Ordering::SeqCst) {
        let request = match server.recv_timeout(Duration::from_millis(50)) {
            Ok(Some(r)) => r,
            Ok(None) => continue,
            Err(_) => break,
        };
        let (path, params) = split_query(request.url());
        let rest_request = RestRequest {
            method: request.method().as_str().to_ascii_uppercase(),
            path,
            params,
        };
        let response = handler(&rest_request);
        let _ = request.respond(
            tiny_http::Response::from_string(response.body)
                .with_status_code(tiny_http::StatusCode(response.status)),
        );
    }
}
