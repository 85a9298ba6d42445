use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use mpa_core::harness::{self, AttackKind, Engine, RunReport, Scenario, BUNDLED};

use crate::{Format, Outcome};

#[derive(Args, Debug)]
pub struct OutputArgs {
    /// What to print on standard output.
    #[arg(long, value_enum, default_value = "table")]
    pub format: Format,
    /// Also write the JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write the message trace (JSON) here.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

fn emit(report: &RunReport, output: &OutputArgs) -> Result<Outcome> {
    if let Some(path) = &output.out {
        std::fs::write(path, report.to_json() + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
    }
    match output.format {
        Format::Json => println!("{}", report.to_json()),
        Format::Table => print!("{}", report.to_table()),
    }
    Ok(if report.passed() {
        Outcome::Ok
    } else {
        Outcome::AssertionsFailed
    })
}

fn load_scenario(name: &str) -> Result<Scenario> {
    let path = Path::new(name);
    if path.exists() {
        return Ok(Scenario::load(path)?);
    }
    if BUNDLED.iter().any(|(n, _)| *n == name) {
        return Ok(Scenario::bundled(name)?);
    }
    let names: Vec<&str> = BUNDLED.iter().map(|(n, _)| *n).collect();
    bail!("no scenario file `{name}` and no bundled scenario of that name (bundled: {})", names.join(", "))
}

pub fn simulate(name: &str, seed: Option<u64>, output: &OutputArgs) -> Result<Outcome> {
    let mut scenario = load_scenario(name)?;
    if let Some(seed) = seed {
        scenario.seed = seed;
    }
    let out = Engine::new(&scenario)?.run()?;
    if let Some(path) = &output.trace {
        let json = serde_json::to_string_pretty(&out.trace)?;
        std::fs::write(path, json + "\n").with_context(|| format!("writing {}", path.display()))?;
    }
    emit(&out.report, output)
}

pub fn attack(kind: &str, trials: Option<u64>, first_seed: u64, output: &OutputArgs) -> Result<Outcome> {
    let kind: AttackKind = kind.parse().map_err(anyhow::Error::msg)?;
    let seeds: Vec<u64> = match trials {
        Some(0) => bail!("--trials must be at least 1"),
        Some(n) => (first_seed..first_seed + n).collect(),
        None => harness::default_attack_seeds(kind)
            .into_iter()
            .map(|s| s + first_seed - 1)
            .collect(),
    };
    if output.trace.is_some() {
        bail!("--trace is only available for `simulate`");
    }
    let report = harness::attack(kind, &seeds)?;
    emit(&report, output)
}

pub fn report(input: &Path, format: Format) -> Result<Outcome> {
    let text = if input == Path::new("-") {
        let mut s = String::new();
        std::io::stdin().read_to_string(&mut s)?;
        s
    } else {
        std::fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?
    };
    let report: RunReport = serde_json::from_str(&text).context("not a run report")?;
    match format {
        Format::Json => println!("{}", report.to_json()),
        Format::Table => print!("{}", report.to_table()),
    }
    Ok(Outcome::Ok)
}
