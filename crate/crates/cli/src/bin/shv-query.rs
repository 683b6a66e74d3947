use anyhow::{bail, Result};
use clap::Parser;
use shv_cli::{parse_ts, store_root};
use shv_core::model::Topic;
use shv_core::querylib::QueryHandle;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "shv-query",
    about = "Read series from a store as text, CSV, integrals, or rates"
)]
struct Cli {
    /// Store root (defaults to $SHV_STORE)
    #[arg(long)]
    store: Option<PathBuf>,
    /// Sensors to read; one except with --csv
    #[arg(required = true)]
    sensors: Vec<Topic>,
    /// Range start, nanoseconds or RFC 3339 (default: beginning)
    #[arg(long)]
    from: Option<String>,
    /// Range end, exclusive (default: everything)
    #[arg(long)]
    to: Option<String>,
    /// Stored integers instead of scaled values
    #[arg(long, conflicts_with_all = ["integral", "derivative"])]
    raw: bool,
    /// Trapezoidal time integral over the range
    #[arg(long, conflicts_with_all = ["derivative", "csv"])]
    integral: bool,
    /// Finite-difference rate of change
    #[arg(long, conflicts_with = "csv")]
    derivative: bool,
    /// CSV on stdout (sensor,timestamp,value), multiple sensors allowed
    #[arg(long)]
    csv: bool,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let q = QueryHandle::open(store_root(cli.store)?)?;
    let t0 = cli.from.as_deref().map(parse_ts).transpose()?.unwrap_or(0);
    let t1 = cli.to.as_deref().map(parse_ts).transpose()?.unwrap_or(u64::MAX);

    if cli.csv {
        let mut out = std::io::stdout().lock();
        if cli.raw {
            q.csv_export_raw(&cli.sensors, t0, t1, &mut out)?;
        } else {
            q.csv_export(&cli.sensors, t0, t1, &mut out)?;
        }
        q.persist_dict()?;
        return Ok(());
    }

    if cli.sensors.len() != 1 {
        bail!("this mode reads exactly one sensor");
    }
    let topic = &cli.sensors[0];
    if cli.integral {
        let (value, unit) = q.integral(topic, t0, t1)?;
        if unit.symbol().is_empty() {
            println!("{value}");
        } else {
            println!("{value} {}", unit.symbol());
        }
    } else if cli.derivative {
        for (ts, v) in q.derivative(topic, t0, t1)?.points {
            println!("{ts} {v}");
        }
    } else if cli.raw {
        for (ts, v) in q.fetch_raw(topic, t0, t1)? {
            println!("{ts} {v}");
        }
    } else {
        for (ts, v) in q.fetch(topic, t0, t1)?.points {
            println!("{ts} {v}");
        }
    }
    // Reading a virtual sensor may have registered its topic.
    q.persist_dict()?;
    Ok(())
}
