use anyhow::{anyhow, Result};
use clap::{Parser, Subcommand};
use shv_core::bench::{run_sweep, sweep_csv, ScalingModel, SweepCell, SweepConfig};
use std::time::Duration;

#[derive(Parser)]
#[command(name = "shv-bench", about = "Ingest sweeps and the rate-to-load model")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a fleet/rate grid against an in-process agent; CSV on stdout
    Sweep {
        /// Tester sensors per pusher, comma separated
        #[arg(long, value_delimiter = ',', default_value = "100,1000")]
        sensors: Vec<usize>,
        /// Sampling intervals in ms, comma separated
        #[arg(long, value_delimiter = ',', default_value = "1000,100")]
        intervals_ms: Vec<u64>,
        /// Pusher counts, comma separated
        #[arg(long, value_delimiter = ',', default_value = "1")]
        pushers: Vec<usize>,
        /// Seconds per cell
        #[arg(long, default_value_t = 10)]
        duration_s: u64,
    },
    /// Predict CPU load at a rate from two calibration points
    Predict {
        /// First calibration point as rate:load, e.g. 1000:0.005
        #[arg(long)]
        a: String,
        /// Second calibration point as rate:load
        #[arg(long)]
        b: String,
        /// Rate to predict at, readings/s
        #[arg(long)]
        rate: f64,
    },
}

fn parse_point(text: &str) -> Result<(f64, f64)> {
    let (x, y) = text
        .split_once(':')
        .ok_or_else(|| anyhow!("expected rate:load, got {text:?}"))?;
    Ok((x.trim().parse()?, y.trim().parse()?))
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Sweep { sensors, intervals_ms, pushers, duration_s } => {
            let mut cells = Vec::new();
            for &p in &pushers {
                for &s in &sensors {
                    for &i in &intervals_ms {
                        cells.push(SweepCell { pushers: p, sensors: s, interval_ms: i });
                    }
                }
            }
            let cfg = SweepConfig::new(cells, Duration::from_secs(duration_s))?;
            let rows = run_sweep(&cfg)?;
            for r in &rows {
                if !r.balanced() {
                    eprintln!(
                        "warning: cell {:?} lost readings in flight (offered {}, stored {}, dropped {}+{})",
                        r.cell, r.offered, r.stored, r.dropped_pusher, r.dropped_agent
                    );
                }
            }
            print!("{}", sweep_csv(&rows));
        }
        Cmd::Predict { a, b, rate } => {
            let model = ScalingModel::new(parse_point(&a)?, parse_point(&b)?)?;
            println!("{}", model.predict(rate));
        }
    }
    Ok(())
}
