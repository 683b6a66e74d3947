//! Shared plumbing for the command-line tools: store location, timestamp
//! parsing, and cooperative shutdown for the daemons.
//!
//! Conventions across the binaries: data goes to stdout, diagnostics to
//! stderr; exit 0 on success, 1 on runtime errors, 2 on usage errors.

use anyhow::{bail, Context, Result};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};

/// Store root from the --store flag or the SHV_STORE environment variable.
pub fn store_root(flag: Option<PathBuf>) -> Result<PathBuf> {
    match flag.or_else(|| std::env::var_os("SHV_STORE").map(PathBuf::from)) {
        Some(p) => Ok(p),
        None => bail!("no store given: pass --store or set SHV_STORE"),
    }
}

/// A point in time: integer nanoseconds since the epoch, or an RFC 3339
/// date-time (anything containing '-').
pub fn parse_ts(text: &str) -> Result<u64> {
    if text.contains('-') {
        let dt = chrono::DateTime::parse_from_rfc3339(text)
            .with_context(|| format!("bad timestamp {text:?}"))?;
        let ns = dt.timestamp_nanos_opt().context("timestamp out of range")?;
        u64::try_from(ns).context("timestamp before the epoch")
    } else {
        text.parse().with_context(|| format!("bad timestamp {text:?}"))
    }
}

static SHUTDOWN: AtomicBool = AtomicBool::new(false);

extern "C" fn on_signal(_: libc::c_int) {
    SHUTDOWN.store(true, Ordering::SeqCst);
}

/// Arms SIGINT and SIGTERM to request a graceful stop instead of killing
/// the process mid-flush.
pub fn arm_signals() {
    let handler: extern "C" fn(libc::c_int) = on_signal;
    unsafe {
        libc::signal(libc::SIGINT, handler as libc::sighandler_t);
        libc::signal(libc::SIGTERM, handler as libc::sighandler_t);
    }
}

pub fn shutdown_requested() -> bool {
    SHUTDOWN.load(Ordering::SeqCst)
}
