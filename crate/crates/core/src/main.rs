use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mmloc::cli::{self, BaselineMethod, SplitName};
use mmloc::curation::{parse_sensor_set, Sensor};
use mmloc::Error;

/// Multi-sensor indoor localization: simulate, curate, train, evaluate.
#[derive(Parser, Debug)]
#[command(name = "mmloc", version)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic recording with anchors and manifest.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Calibrate, clip and window a recording.
    Curate {
        /// Recording CSV written by `simulate` (or a real capture).
        recording: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a fusion model on a curated dataset directory.
    Train {
        dataset: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated subset of rssi,csi,uwb,imu.
        #[arg(long, value_parser = parse_sensors)]
        sensors: Option<SensorSet>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one split of a curated dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        dataset: PathBuf,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: SplitName,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a classical baseline (uwb-tri, rssi-tri, rssi-fp, csi-fp).
    Baseline {
        #[arg(long, value_parser = parse_method)]
        method: BaselineMethod,
        dataset: PathBuf,
        #[arg(long)]
        anchors: PathBuf,
        /// Split whose windows are localized; fingerprints come from train.
        #[arg(long, default_value = "test", value_parser = parse_split)]
        query: SplitName,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Debug)]
struct SensorSet(Vec<Sensor>);

fn parse_sensors(s: &str) -> Result<SensorSet, String> {
    parse_sensor_set(s).map(SensorSet).map_err(|e| e.to_string())
}

fn parse_split(s: &str) -> Result<SplitName, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_method(s: &str) -> Result<BaselineMethod, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn run(cmd: Command) -> mmloc::Result<()> {
    match cmd {
        Command::Simulate { config, seed, out } => cli::cmd_simulate(config.as_deref(), seed, &out).map(drop),
        Command::Curate { recording, config, out } => cli::cmd_curate(&recording, config.as_deref(), &out).map(drop),
        Command::Train { dataset, config, seed, sensors, out } => {
            cli::cmd_train(&dataset, config.as_deref(), seed, sensors.map(|s| s.0), &out).map(drop)
        }
        Command::Eval { checkpoint, dataset, split, out } => cli::cmd_eval(&checkpoint, &dataset, split, &out).map(drop),
        Command::Baseline { method, dataset, anchors, query, out } => {
            cli::cmd_baseline(method, &dataset, &anchors, query, &out).map(drop)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(args.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}
