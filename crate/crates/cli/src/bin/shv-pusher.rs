use anyhow::Result;
use clap::Parser;
use shv_cli::{arm_signals, shutdown_requested};
use shv_core::pusher::{run_pusher, PusherConfig};
use std::path::PathBuf;
use std::time::{Duration, Instant};

#[derive(Parser)]
#[command(name = "shv-pusher", about = "Sample plugin sensors and push them to a collect agent")]
struct Cli {
    /// Config file (global block plus plugin blocks)
    #[arg(long)]
    config: PathBuf,
    /// Stop after this long instead of waiting for SIGINT/SIGTERM
    #[arg(long)]
    run_for_ms: Option<u64>,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    arm_signals();
    let (config, source) = PusherConfig::load(&cli.config)?;
    let handle = run_pusher(config, source)?;
    if let Some(port) = handle.rest_port() {
        eprintln!("status api on 127.0.0.1:{port}");
    }
    let deadline = cli.run_for_ms.map(|ms| Instant::now() + Duration::from_millis(ms));
    while !shutdown_requested() && deadline.is_none_or(|d| Instant::now() < d) {
        std::thread::sleep(Duration::from_millis(100));
    }
    let c = handle.stop();
    eprintln!(
        "sampled {} readErrors {} overruns {} dropped {} published {}",
        c.sampled, c.read_errors, c.overruns, c.dropped, c.published
    );
    Ok(())
}
