//! The `pdp` operator CLI.

use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use pdp_core::demo::run_demo_scenario;
use pdp_core::ids::IdGenerator;
use pdp_core::plane::DataPlane;
use pdp_core::SnapshotId;
use pdp_scanner::ScanOptions;

use crate::{open_plane, serve, system_clock, Config, GatewayError};

/// Exit code when a data-map diff shows added markers.
pub const EXIT_ADDED_MARKERS: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "pdp", about = "Personal data plane operator CLI")]
pub struct Cli {
    /// Config file; PDP_CONFIG takes precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Serve the HTTP API.
    Serve,
    /// Scan a source tree for personal data annotations.
    Scan {
        root: PathBuf,
        #[arg(long)]
        include: Vec<String>,
        #[arg(long)]
        exclude: Vec<String>,
        /// Map file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare two data maps; exits 3 when markers were added.
    Diff { old: PathBuf, new: PathBuf },
    /// Run the scripted demo into the configured, empty storage.
    Demo {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Snapshot the stores holding personal data.
    Backup,
    /// Restore a snapshot, then reapply later rectifications and erasures.
    Restore { snapshot: String },
}

pub async fn run(cli: Cli) -> u8 {
    match execute(cli).await {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn print(text: &str) -> Result<(), GatewayError> {
    let mut out = std::io::stdout().lock();
    out.write_all(text.as_bytes())?;
    out.flush()?;
    Ok(())
}

async fn execute(cli: Cli) -> Result<u8, GatewayError> {
    match cli.command {
        Command::Scan {
            root,
            include,
            exclude,
            out,
        } => {
            let report = pdp_scanner::scan(&root, &ScanOptions { include, exclude })?;
            for u in &report.unreadable {
                eprintln!("unreadable: {} ({})", u.path, u.reason);
            }
            let json = pdp_scanner::to_json(&report.map);
            match out {
                Some(path) => std::fs::write(path, json)?,
                None => print(&json)?,
            }
            Ok(0)
        }
        Command::Diff { old, new } => {
            let d = pdp_scanner::diff(&pdp_scanner::read_map(&old)?, &pdp_scanner::read_map(&new)?);
            print(&format!(
                "{}\n",
                serde_json::to_string_pretty(&d).expect("diff serializes")
            ))?;
            Ok(if d.added.is_empty() {
                0
            } else {
                EXIT_ADDED_MARKERS
            })
        }
        Command::Serve => {
            let config = Config::resolve(cli.config.as_deref())?;
            let handle = serve(config, system_clock()).await?;
            eprintln!("listening on {}", handle.addr);
            handle.wait().await?;
            Ok(0)
        }
        Command::Demo { seed } => {
            let config = Config::resolve(cli.config.as_deref())?;
            let mut plane = DataPlane::open(
                config.plane_config()?,
                Some(&config.storage_dir),
                IdGenerator::seeded(seed),
                pdp_core::demo::demo_epoch(),
            )?;
            let demo = run_demo_scenario(&mut plane, seed)?;
            print(&demo.transcript.render())?;
            Ok(0)
        }
        Command::Backup => {
            let config = Config::resolve(cli.config.as_deref())?;
            let now = chrono::Utc::now();
            let id = open_plane(&config, now)?.backup(now)?;
            print(&format!("{id}\n"))?;
            Ok(0)
        }
        Command::Restore { snapshot } => {
            let config = Config::resolve(cli.config.as_deref())?;
            let now = chrono::Utc::now();
            open_plane(&config, now)?.restore(&SnapshotId::new(snapshot.clone()), now)?;
            print(&format!("restored {snapshot}\n"))?;
            Ok(0)
        }
    }
}
