use anyhow::Result;
use clap::Parser;
use shv_cli::{arm_signals, shutdown_requested};
use shv_core::collectagent::{run_agent, AgentConfig};
use std::path::PathBuf;
use std::time::{Duration, Instant};

#[derive(Parser)]
#[command(
    name = "shv-agent",
    about = "Accept pushed sensor readings over MQTT and store them"
)]
struct Cli {
    /// Config file (global and storage blocks)
    #[arg(long)]
    config: PathBuf,
    /// Stop after this long instead of waiting for SIGINT/SIGTERM
    #[arg(long)]
    run_for_ms: Option<u64>,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    arm_signals();
    let config = AgentConfig::load(&cli.config)?;
    let handle = run_agent(config)?;
    eprintln!("mqtt on 127.0.0.1:{}", handle.mqtt_port());
    if let Some(port) = handle.rest_port() {
        eprintln!("status api on 127.0.0.1:{port}");
    }
    let deadline = cli.run_for_ms.map(|ms| Instant::now() + Duration::from_millis(ms));
    while !shutdown_requested() && deadline.is_none_or(|d| Instant::now() < d) {
        std::thread::sleep(Duration::from_millis(100));
    }
    let core = handle.stop();
    let s = core.stats();
    eprintln!(
        "sessions {} messages {} readings {} stored {} malformed {} violations {} storeErrors {}",
        s.sessions_opened, s.messages, s.readings, s.stored, s.malformed, s.violations, s.store_errors
    );
    Ok(())
}
