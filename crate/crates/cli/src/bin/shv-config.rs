use anyhow::{anyhow, bail, Result};
use clap::{Parser, Subcommand};
use shv_cli::{parse_ts, store_root};
use shv_core::clock::{Clock, SystemClock};
use shv_core::model::{SensorMetadata, Topic, Unit};
use shv_core::querylib::QueryHandle;
use shv_core::storage::MetaEntry;
use shv_core::vsensor::{parse_expr, VSensorDef};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "shv-config", about = "Inspect and edit sensor metadata and the store")]
struct Cli {
    /// Store root (defaults to $SHV_STORE)
    #[arg(long, global = true)]
    store: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Physical sensor metadata
    #[command(subcommand)]
    Sensor(SensorCmd),
    /// Derived sensors computed from expressions
    #[command(subcommand)]
    Vsensor(VsensorCmd),
    /// Store maintenance
    #[command(subcommand)]
    Db(DbCmd),
}

#[derive(Subcommand)]
enum SensorCmd {
    /// Create a sensor entry or update the given fields of one
    Set {
        topic: Topic,
        #[arg(long)]
        unit: Option<String>,
        #[arg(long)]
        scale: Option<f64>,
        #[arg(long)]
        interval_ms: Option<u64>,
        /// Retention; 0 keeps readings forever
        #[arg(long)]
        ttl_ms: Option<u64>,
    },
    /// Print one entry, physical or virtual
    Show { topic: Topic },
    /// All topics with metadata
    List,
}

#[derive(Subcommand)]
enum VsensorCmd {
    /// Define or replace a derived sensor
    Define {
        topic: Topic,
        /// Expression over <topic> operands, e.g. "(</a> + </b>) / 2"
        #[arg(long)]
        expr: String,
        #[arg(long)]
        unit: Option<String>,
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        #[arg(long, default_value_t = 1000)]
        interval_ms: u64,
        /// Grid origin in nanoseconds
        #[arg(long, default_value_t = 0)]
        tzero_ns: u64,
    },
    /// All derived sensors with their expressions
    List,
}

#[derive(Subcommand)]
enum DbCmd {
    /// Delete readings older than a timestamp, or per-sensor TTLs
    Deleteold {
        /// Cutoff: nanoseconds or RFC 3339
        ts: Option<String>,
        /// Apply each sensor's configured TTL instead
        #[arg(long, conflicts_with = "ts")]
        ttl: bool,
    },
    /// Rewrite segments dropping deleted rows
    Compact,
}

fn unit_arg(text: Option<String>, fallback: Unit) -> Result<Unit> {
    match text {
        None => Ok(fallback),
        Some(s) => Unit::parse(&s).ok_or_else(|| anyhow!("unknown unit {s:?}")),
    }
}

fn show_entry(entry: &MetaEntry) {
    match entry {
        MetaEntry::Sensor(m) => {
            println!("topic {}", m.topic);
            println!("kind sensor");
            println!("unit {}", m.unit.symbol());
            println!("scale {}", m.scale);
            println!("interval_ns {}", m.interval_ns);
            println!("ttl_ns {}", m.ttl_ns);
        }
        MetaEntry::Virtual(def) => {
            println!("topic {}", def.topic);
            println!("kind virtual");
            println!("expr {}", def.expr);
            println!("unit {}", def.unit.symbol());
            println!("scale {}", def.scale);
            println!("interval_ns {}", def.eval_interval_ns);
            println!("tzero_ns {}", def.t_zero_ns);
        }
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let q = QueryHandle::open(store_root(cli.store)?)?;
    match cli.cmd {
        Cmd::Sensor(SensorCmd::Set { topic, unit, scale, interval_ms, ttl_ms }) => {
            let base = match q.metadata().get(&topic) {
                Some(MetaEntry::Sensor(m)) => m,
                Some(MetaEntry::Virtual(_)) => bail!("{topic} is a virtual sensor"),
                None => SensorMetadata::default_for(topic.clone()),
            };
            let meta = SensorMetadata::new(
                topic,
                unit_arg(unit, base.unit)?,
                scale.unwrap_or(base.scale),
                interval_ms.map_or(base.interval_ns, |ms| ms * 1_000_000),
                ttl_ms.map_or(base.ttl_ns, |ms| ms * 1_000_000),
            )?;
            q.metadata().set_sensor(meta)?;
        }
        Cmd::Sensor(SensorCmd::Show { topic }) => match q.metadata().get(&topic) {
            Some(entry) => show_entry(&entry),
            None => bail!("no metadata for {topic}"),
        },
        Cmd::Sensor(SensorCmd::List) => {
            for t in q.metadata().topics() {
                println!("{t}");
            }
        }
        Cmd::Vsensor(VsensorCmd::Define { topic, expr, unit, scale, interval_ms, tzero_ns }) => {
            let def = VSensorDef {
                topic,
                expr: parse_expr(&expr).map_err(|e| anyhow!("expr: {e}"))?,
                unit: unit_arg(unit, Unit::dimensionless())?,
                eval_interval_ns: interval_ms * 1_000_000,
                t_zero_ns: tzero_ns,
                scale,
            };
            q.metadata().define_vsensor(def)?;
        }
        Cmd::Vsensor(VsensorCmd::List) => {
            for def in q.metadata().vsensors() {
                println!("{} {}", def.topic, def.expr);
            }
        }
        Cmd::Db(DbCmd::Deleteold { ts, ttl }) => {
            let deleted = if ttl {
                let now = SystemClock.now_ns();
                let mut total = 0u64;
                for m in q.metadata().sensors() {
                    if m.ttl_ns == 0 {
                        continue;
                    }
                    let Some(sid) = q.dict().lookup(&m.topic) else { continue };
                    total += q.store().delete_before_sid(sid, now.saturating_sub(m.ttl_ns))?;
                }
                total
            } else {
                let ts = ts.ok_or_else(|| anyhow!("give a cutoff timestamp or --ttl"))?;
                q.store().delete_before(parse_ts(&ts)?)?
            };
            q.store().flush()?;
            println!("{deleted}");
        }
        Cmd::Db(DbCmd::Compact) => {
            q.store().compact()?;
        }
    }
    Ok(())
}
