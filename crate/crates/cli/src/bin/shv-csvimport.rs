use anyhow::{Context, Result};
use clap::Parser;
use shv_cli::store_root;
use shv_core::querylib::QueryHandle;
use std::io::BufReader;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "shv-csvimport",
    about = "Load a sensor,timestamp,value CSV into a store (all rows or none)"
)]
struct Cli {
    /// Store root (defaults to $SHV_STORE)
    #[arg(long)]
    store: Option<PathBuf>,
    /// Input file; stdin when omitted
    file: Option<PathBuf>,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let q = QueryHandle::open(store_root(cli.store)?)?;
    let count = match &cli.file {
        Some(path) => {
            let file = std::fs::File::open(path)
                .with_context(|| format!("open {}", path.display()))?;
            q.csv_import(BufReader::new(file))?
        }
        None => q.csv_import(std::io::stdin().lock())?,
    };
    println!("{count}");
    Ok(())
}
