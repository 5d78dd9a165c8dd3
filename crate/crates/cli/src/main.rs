//! `flocksim` command-line front end.
//!
//! Exit codes: 0 on success, 2 on configuration errors, 3 when a ledger fails
//! verification, 1 for anything else.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use flocksim::harness::{self, ScenarioConfig, ScenarioResult};
use flocksim::ledger::{self, ChainStatus, Ledger};
use flocksim::Error;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_LEDGER: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "flocksim", version, about = "Deterministic simulator of a stake-weighted federated-learning protocol")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one scenario and write its metrics, models and ledger.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Master seed; replaces the one in the config file.
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a built-in scenario as JSON.
    Preset {
        /// One of: attack-comparison, cross-domain, local-vs-fed.
        name: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a ledger's hash chain and re-settle every round.
    VerifyLedger {
        path: PathBuf,
        /// Also export the entries as JSON lines.
        #[arg(long)]
        export_json: Option<PathBuf>,
    },
    /// Summarize one or more metrics CSV files.
    Report {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a scenario once per value of a single parameter.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Dotted path into the scenario, e.g. `filter.kappa` or `aggregator`.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true, allow_hyphen_values = true)]
        values: Vec<String>,
        /// Replaces the master seed of the config file.
        #[arg(long)]
        seed: Option<u64>,
        /// Writes each run's outputs plus `sweep.csv` here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// An error tagged with the exit code it should produce.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = match error.downcast_ref::<Error>() {
            Some(Error::Config { .. }) => EXIT_CONFIG,
            Some(Error::Ledger(_)) => EXIT_LEDGER,
            _ => EXIT_FAILURE,
        };
        Failure { code, error }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::new(e).into()
    }
}

fn ledger_failure(error: anyhow::Error) -> Failure {
    Failure {
        code: EXIT_LEDGER,
        error,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = configure_threads().and_then(|()| dispatch(cli.command));
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("FLOCKSIM_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| Error::Config {
            path: "FLOCKSIM_THREADS".into(),
            reason: format!("`{raw}` is not a positive integer"),
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| anyhow!("cannot size the thread pool: {e}"))?;
    Ok(())
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run { config, seed, out } => {
            let mut cfg = ScenarioConfig::load(&config)?;
            cfg.master_seed = seed;
            let result = harness::run_scenario(&cfg)?;
            result.write_outputs(&out)?;
            println!("{}", summary_line(&result));
            println!("outputs written to {}", out.display());
            Ok(())
        }
        Command::Preset { name, out } => {
            let cfg = harness::preset(&name)?;
            write_file(&out, cfg.to_json_pretty().as_bytes())?;
            println!("wrote preset `{name}` to {}", out.display());
            Ok(())
        }
        Command::VerifyLedger { path, export_json } => verify_ledger(&path, export_json.as_deref()),
        Command::Report { csv, out } => {
            let report = harness::report(&csv)?;
            report.write(&out)?;
            print!("{}", report.summary_csv());
            println!("report written to {}", out.display());
            Ok(())
        }
        Command::Sweep {
            config,
            param,
            values,
            seed,
            out,
        } => sweep(&config, &param, &values, seed, out.as_deref()),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn summary_line(r: &ScenarioResult) -> String {
    let last = r.metrics.last();
    let acc = last.map_or(f64::NAN, |m| m.accuracy);
    let asr = last
        .and_then(|m| m.asr)
        .map_or_else(|| "-".to_string(), |a| format!("{a:.4}"));
    format!(
        "scenario={} aggregator={} seed={} rounds={} final_accuracy={acc:.4} final_asr={asr}",
        r.config.name,
        r.config.aggregator.as_str(),
        r.config.master_seed,
        r.metrics.len()
    )
}

fn verify_ledger(path: &Path, export_json: Option<&Path>) -> Result<(), Failure> {
    let log = Ledger::load(path)
        .with_context(|| format!("reading ledger {}", path.display()))
        .map_err(ledger_failure)?;
    if let ChainStatus::BrokenAt(k) = log.verify_chain() {
        return Err(ledger_failure(anyhow!("hash chain broken at entry {k}")));
    }
    let replay = ledger::replay_recorded(&log)
        .context("replaying settlements")
        .map_err(ledger_failure)?;
    if !replay.is_ok() {
        for m in &replay.mismatches {
            eprintln!(
                "round {}: {} stored {} but recomputed {}",
                m.round, m.field, m.stored, m.recomputed
            );
        }
        return Err(ledger_failure(anyhow!(
            "{} settlement mismatch(es) in {} rounds",
            replay.mismatches.len(),
            replay.rounds
        )));
    }
    if let Some(dest) = export_json {
        log.export_jsonl(dest)?;
    }
    println!(
        "ledger ok: {} entries, head {}",
        log.len(),
        hex_digest(&log.head_digest())
    );
    Ok(())
}

fn hex_digest(d: &[u8; 32]) -> String {
    d.iter().map(|b| format!("{b:02x}")).collect()
}

fn sweep(
    config: &Path,
    param: &str,
    values: &[String],
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<(), Failure> {
    let mut base = ScenarioConfig::load(config)?;
    if let Some(s) = seed {
        base.master_seed = s;
    }
    // validate every point before spending time on any run
    let configs = values
        .iter()
        .map(|v| base.with_override(param, v.trim()))
        .collect::<flocksim::Result<Vec<_>>>()?;

    let mut table = String::from("value,final_accuracy,final_asr,asr_at_40\n");
    for (value, cfg) in values.iter().zip(&configs) {
        let result = harness::run_scenario(cfg)?;
        let last = result.metrics.last();
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let at40 = result.metrics.iter().find(|m| m.round == 40).and_then(|m| m.asr);
        table.push_str(&format!(
            "{},{},{},{}\n",
            csv_field(value.trim()),
            last.map_or(f64::NAN, |m| m.accuracy),
            opt(last.and_then(|m| m.asr)),
            opt(at40)
        ));
        println!("{param}={} {}", value.trim(), summary_line(&result));
        if let Some(dir) = out {
            result.write_outputs(&dir.join(sanitize(&format!("{param}={}", value.trim()))))?;
        }
    }
    if let Some(dir) = out {
        write_file(&dir.join("sweep.csv"), table.as_bytes())?;
    }
    Ok(())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "=._-".contains(c) { c } else { '_' })
        .collect()
}
