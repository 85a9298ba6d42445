//! Scripted scenarios over the simulator and the attack suite.

mod engine;
pub mod report;
pub mod scenario;

pub use engine::{scenario_config, Engine, RunOutput, ATTACKER};
pub use report::{Aggregates, Delivery, RowKind, RunReport, TxnRow};
pub use scenario::{Action, AttackKind, BiometricCapture, PayAction, Scenario, ScenarioError, BUNDLED, SCHEMA};

pub fn run_scenario(scenario: &Scenario) -> Result<RunReport, ScenarioError> {
    Ok(Engine::new(scenario)?.run()?.report)
}

/// Default seeds for an attack run: replay is checked across many seeds.
pub fn default_attack_seeds(kind: AttackKind) -> Vec<u64> {
    match kind {
        AttackKind::Replay => (1..=100).collect(),
        _ => vec![1],
    }
}

/// Run the bundled scenario for `kind` once per seed.
pub fn attack(kind: AttackKind, seeds: &[u64]) -> Result<RunReport, ScenarioError> {
    let base = Scenario::bundled(&format!("attack_{}", kind.name()))?;
    let reports = seeds
        .iter()
        .map(|&seed| {
            let sc = Scenario { seed, ..base.clone() };
            run_scenario(&sc)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(RunReport::merge(reports))
}
