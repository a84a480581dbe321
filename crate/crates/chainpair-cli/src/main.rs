//! Command-line scenario runner: seeded, reproducible batches of pairing
//! simulations and attacks, reported as human-readable text or structured
//! JSON.

use anyhow::{bail, Context, Result};
use chainpair::ledger::export_chain;
use chainpair::scenario::{
    emit_report, expected_success_rate, expected_verdict_holds, run_scenario_with_artifacts,
    ReportFormat, ScenarioConfig, ScenarioKind,
};
use clap::{Parser, ValueEnum};
use serde::Deserialize;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CliFormat {
    HumanText,
    Structured,
}

impl CliFormat {
    fn to_report_format(self) -> ReportFormat {
        match self {
            CliFormat::HumanText => ReportFormat::HumanText,
            CliFormat::Structured => ReportFormat::Structured,
        }
    }

    fn parse_name(s: &str) -> Option<CliFormat> {
        match s {
            "human-text" => Some(CliFormat::HumanText),
            "structured" => Some(CliFormat::Structured),
            _ => None,
        }
    }
}

fn parse_scenario(s: &str) -> Result<ScenarioKind, String> {
    ScenarioKind::parse(s).ok_or_else(|| {
        let names: Vec<&str> = ScenarioKind::ALL.iter().map(|k| k.name()).collect();
        format!("unknown scenario '{s}' (expected one of: {})", names.join(", "))
    })
}

/// Deterministic simulator of legacy pairing, its key-exchange attacks, and
/// a ledger-mediated mitigation. Every run is reproducible from its seed.
#[derive(Parser, Debug)]
#[command(name = "chainpair", version)]
struct Cli {
    /// Scenario to run (required here or in the config file)
    #[arg(long, value_parser = parse_scenario)]
    scenario: Option<ScenarioKind>,
    /// Base seed; run i uses seed + i
    #[arg(long)]
    seed: Option<u64>,
    /// Number of independent seeded runs
    #[arg(long)]
    runs: Option<u32>,
    /// PIN length for the simulated devices (4 or 6)
    #[arg(long)]
    pin_digits: Option<u8>,
    /// Minimum entropy the endpoints will accept (1..=16)
    #[arg(long)]
    min_entropy: Option<u8>,
    /// Ledger replica count (members = endpoints + observers)
    #[arg(long)]
    replicas: Option<u32>,
    /// Replicas that withhold consensus votes
    #[arg(long)]
    faulty_voters: Option<u32>,
    /// Report format
    #[arg(long, value_enum)]
    format: Option<CliFormat>,
    /// Write run 0's chain to this path (ledger scenarios only)
    #[arg(long)]
    export_chain: Option<PathBuf>,
    /// JSON file with the same field names; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// Exit nonzero unless the report matches the scenario's documented
    /// verdict (for CI)
    #[arg(long)]
    assert_expected: bool,
}

/// Config-file form: every field optional, flags win.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    scenario: Option<ScenarioKind>,
    seed: Option<u64>,
    runs: Option<u32>,
    pin_digits: Option<u8>,
    min_entropy: Option<u8>,
    replicas: Option<u32>,
    faulty_voters: Option<u32>,
    format: Option<String>,
    export_chain: Option<PathBuf>,
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run() -> Result<ExitCode> {
    let cli = Cli::parse();

    let file: FileConfig = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config file {}", path.display()))?;
            serde_json::from_str(&text)
                .with_context(|| format!("parsing config file {}", path.display()))?
        }
        None => FileConfig::default(),
    };

    let scenario = cli
        .scenario
        .or(file.scenario)
        .context("no scenario given; pass --scenario or set it in the config file")?;
    let mut config = ScenarioConfig::new(scenario);
    if let Some(v) = cli.seed.or(file.seed) {
        config.seed = v;
    }
    if let Some(v) = cli.runs.or(file.runs) {
        config.runs = v;
    }
    if let Some(v) = cli.pin_digits.or(file.pin_digits) {
        config.pin_digits = v;
    }
    if let Some(v) = cli.min_entropy.or(file.min_entropy) {
        config.min_entropy = Some(v);
    }
    if let Some(v) = cli.replicas.or(file.replicas) {
        config.replicas = v;
    }
    if let Some(v) = cli.faulty_voters.or(file.faulty_voters) {
        config.faulty_voters = v;
    }
    let format = match (cli.format, &file.format) {
        (Some(f), _) => f,
        (None, Some(name)) => CliFormat::parse_name(name)
            .with_context(|| format!("unknown format '{name}' in config file"))?,
        (None, None) => CliFormat::HumanText,
    };
    let export_path = cli.export_chain.or(file.export_chain);

    let (report, chain) = run_scenario_with_artifacts(&config)?;

    if let Some(path) = &export_path {
        match chain {
            Some(chain) => std::fs::write(path, export_chain(&chain))
                .with_context(|| format!("writing chain export to {}", path.display()))?,
            None => bail!("scenario '{scenario}' builds no ledger; nothing to export"),
        }
    }

    std::io::stdout().write_all(&emit_report(&report, format.to_report_format()))?;

    if cli.assert_expected && !expected_verdict_holds(&report) {
        eprintln!(
            "assert-expected: success rate {} differs from the documented {}",
            report.aggregate.success_rate,
            expected_success_rate(&config)
        );
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}
