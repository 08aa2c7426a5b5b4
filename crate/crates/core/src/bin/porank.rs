use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use porank::experiment::config::parse_ring_spec;
use porank::experiment::dataset::{ring_records, write_records};
use porank::experiment::report::significance_table;
use porank::experiment::{compare_reports, run_experiment, ExperimentConfig, RunReport};
use porank::synthetic::generate_rings;
use porank::{Error, Result};

#[derive(Parser)]
#[command(name = "porank", version, about = "Train and evaluate partial-order ranking losses")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every configured loss on every seed and report retrieval metrics.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Replace the configured seeds with this single seed.
        #[arg(long)]
        seed_override: Option<u64>,
        /// Write report.json and report.txt here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Paired signed-rank tests on per-seed median ranks of two reports.
    Compare {
        #[arg(long, num_args = 2, value_names = ["A", "B"])]
        reports: Vec<PathBuf>,
    },
    /// Write a ring dataset as JSONL.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, seed_override, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(seed) = seed_override {
                cfg.seeds = vec![seed];
            }
            let report = run_experiment(&cfg)?;
            let table = report.table();
            print!("{table}");
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                fs::write(dir.join("report.json"), report.to_json()? + "\n")?;
                fs::write(dir.join("report.txt"), table)?;
            }
        }
        Command::Compare { reports } => {
            let a = RunReport::from_json(&read(&reports[0])?)?;
            let b = RunReport::from_json(&read(&reports[1])?)?;
            let tests = compare_reports(&a, &b)?;
            print!("{}", significance_table(&tests));
            println!("{}", serde_json::to_string(&tests)?);
        }
        Command::Synth { spec, out } => {
            let spec = parse_ring_spec(&read(&spec)?)?;
            let data = generate_rings(&spec)?;
            let mut w = BufWriter::new(fs::File::create(&out)?);
            write_records(&mut w, &ring_records(&data))?;
            w.flush()?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{msg}");
            ExitCode::FAILURE
        }
    }
}
