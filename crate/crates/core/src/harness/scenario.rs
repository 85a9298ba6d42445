use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::deploy::VerifierKind;
use crate::netsim::LinkFaults;
use crate::network::DecisionPolicy;
use crate::nodes::{Verdict, DEFAULT_TOLERANCE_CELLS, DEFAULT_WINDOW_S};
use crate::token::{AmountMinor, BiometricTemplate, FactorTag, GeoCell};

/// Fixed simulator addresses.
pub const NETWORK: &str = "network";
pub const POS: &str = "pos";
pub const FUND: &str = "fund";
pub const BIO: &str = "bio";
pub const LOC: &str = "loc";

pub fn wallet_addr(name: &str) -> String {
    format!("wallet:{name}")
}

pub fn extension_addr(tag: FactorTag) -> String {
    format!("ext:{tag}")
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{source_name}:{line}:{column}: {message}")]
    Parse {
        source_name: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("unknown bundled scenario `{0}`")]
    UnknownBundled(String),
    #[error("simulation did not settle: {0}")]
    Stuck(String),
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid {
        field: field.into(),
        message: message.into(),
    }
}

fn default_seed() -> u64 {
    1
}

fn default_start() -> u64 {
    1_700_000_000
}

fn default_window() -> u64 {
    DEFAULT_WINDOW_S
}

fn default_tolerance() -> u32 {
    DEFAULT_TOLERANCE_CELLS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WalletSpec {
    pub name: String,
    pub pan: String,
    pub balance: AmountMinor,
    /// Enrolled biometric; derived from the seed when absent.
    #[serde(default)]
    pub template: Option<BiometricTemplate>,
    pub home: GeoCell,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    pub from: String,
    pub to: String,
    pub faults: LinkFaults,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtensionSpec {
    pub tag: FactorTag,
    pub verifier: VerifierKind,
}

/// Biometric presented at the sensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BiometricCapture {
    Named(Enrolled),
    FlipBits { flip_bits: Vec<usize> },
    Template { template: BiometricTemplate },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Enrolled {
    Enrolled,
}

impl Default for BiometricCapture {
    fn default() -> Self {
        BiometricCapture::Named(Enrolled::Enrolled)
    }
}

impl BiometricCapture {
    pub fn apply(&self, enrolled: &BiometricTemplate) -> BiometricTemplate {
        match self {
            BiometricCapture::Named(Enrolled::Enrolled) => *enrolled,
            BiometricCapture::FlipBits { flip_bits } => flip_bits
                .iter()
                .fold(*enrolled, |b, bit| b.with_bit_flipped(*bit)),
            BiometricCapture::Template { template } => *template,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Replay,
    Tamper,
    StolenToken,
    WrongLocation,
    StaleClock,
}

impl AttackKind {
    pub const ALL: [AttackKind; 5] = [
        AttackKind::Replay,
        AttackKind::Tamper,
        AttackKind::StolenToken,
        AttackKind::WrongLocation,
        AttackKind::StaleClock,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Replay => "replay",
            AttackKind::Tamper => "tamper",
            AttackKind::StolenToken => "stolen_token",
            AttackKind::WrongLocation => "wrong_location",
            AttackKind::StaleClock => "stale_clock",
        }
    }
}

impl std::str::FromStr for AttackKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AttackKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = AttackKind::ALL.iter().map(|k| k.name()).collect();
                format!("unknown attack kind `{s}` (expected one of {})", names.join(", "))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PayAction {
    pub wallet: String,
    pub label: String,
    pub amount: AmountMinor,
    #[serde(default)]
    pub biometric: BiometricCapture,
    /// Captured location; the wallet's home cell when absent.
    #[serde(default)]
    pub cell: Option<GeoCell>,
    #[serde(default)]
    pub clock_skew_s: i64,
    /// Factors to attach; everything enrolled when absent.
    #[serde(default)]
    pub factors: Option<Vec<FactorTag>>,
    #[serde(default)]
    pub attack: Option<AttackKind>,
    #[serde(default)]
    pub expect: Option<Verdict>,
    #[serde(default)]
    pub expect_reason: Option<String>,
    #[serde(default)]
    pub expect_factor: Option<FactorTag>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case", deny_unknown_fields)]
pub enum Action {
    /// Provision the card, enroll every configured factor and report the
    /// home location.
    Enroll { wallet: String },
    FixLocation { wallet: String, cell: GeoCell },
    Pay(PayAction),
    /// Tap the exact bytes of an earlier payment again.
    Replay {
        of: String,
        #[serde(default)]
        delay_ms: u64,
    },
    /// Flip one bit in each byte position of a fresh copy of an earlier
    /// payment, one tap per position.
    TamperSweep {
        of: String,
        #[serde(default = "default_mask")]
        mask: u8,
    },
    Advance { seconds: u64 },
    PayBaseline {
        wallet: String,
        label: String,
        #[serde(default)]
        corrupt: bool,
        #[serde(default)]
        expect: Option<Verdict>,
    },
    Kill { role: String },
    SetLink {
        from: String,
        to: String,
        faults: LinkFaults,
    },
}

fn default_mask() -> u8 {
    0x01
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_start")]
    pub start_time_s: u64,
    #[serde(default = "default_window")]
    pub window_s: u64,
    #[serde(default = "default_tolerance")]
    pub tolerance_cells: u32,
    #[serde(default)]
    pub policy: DecisionPolicy,
    #[serde(default)]
    pub default_link: LinkFaults,
    #[serde(default)]
    pub links: Vec<LinkSpec>,
    pub wallets: Vec<WalletSpec>,
    /// PANs known to the issuer; every wallet's PAN when absent.
    #[serde(default)]
    pub issuer_pans: Option<Vec<String>>,
    #[serde(default)]
    pub extensions: Vec<ExtensionSpec>,
    pub script: Vec<Action>,
}

pub const BUNDLED: [(&str, &str); 9] = [
    ("happy_path", include_str!("../../scenarios/happy_path.json")),
    ("daily_use", include_str!("../../scenarios/daily_use.json")),
    ("insufficient_funds", include_str!("../../scenarios/insufficient_funds.json")),
    ("node_outage", include_str!("../../scenarios/node_outage.json")),
    ("attack_replay", include_str!("../../scenarios/attack_replay.json")),
    ("attack_tamper", include_str!("../../scenarios/attack_tamper.json")),
    ("attack_stolen_token", include_str!("../../scenarios/attack_stolen_token.json")),
    ("attack_wrong_location", include_str!("../../scenarios/attack_wrong_location.json")),
    ("attack_stale_clock", include_str!("../../scenarios/attack_stale_clock.json")),
];

pub const SCHEMA: &str = include_str!("../../scenarios/scenario.schema.json");

impl Scenario {
    pub fn parse(source_name: &str, text: &str) -> Result<Self, ScenarioError> {
        let sc: Scenario = serde_json::from_str(text).map_err(|e| ScenarioError::Parse {
            source_name: source_name.to_string(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&path.display().to_string(), &text)
    }

    pub fn bundled(name: &str) -> Result<Self, ScenarioError> {
        let (_, text) = BUNDLED
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| ScenarioError::UnknownBundled(name.to_string()))?;
        Self::parse(&format!("{name}.json"), text)
    }

    pub fn addresses(&self) -> BTreeSet<String> {
        let mut out: BTreeSet<String> = [NETWORK, POS, FUND, BIO, LOC, super::ATTACKER].map(String::from).into();
        out.extend(self.wallets.iter().map(|w| wallet_addr(&w.name)));
        out.extend(self.extensions.iter().map(|e| extension_addr(e.tag)));
        out
    }

    /// Reference and range checks beyond what the JSON structure enforces.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        self.policy
            .validate()
            .map_err(|e| invalid("policy", e.to_string()))?;
        let mut factors: BTreeSet<FactorTag> = [FactorTag::FUND, FactorTag::BIO, FactorTag::LOC].into();
        for (i, e) in self.extensions.iter().enumerate() {
            if !e.tag.is_extension() {
                return Err(invalid(format!("extensions[{i}].tag"), "must be in 0x80-0xff"));
            }
            if !factors.insert(e.tag) {
                return Err(invalid(format!("extensions[{i}].tag"), "duplicate tag"));
            }
        }
        for f in self.policy.factors() {
            if !factors.contains(&f) {
                return Err(invalid("policy", format!("factor {f} has no node")));
            }
        }
        let addrs = self.addresses();
        let check_faults = |field: String, f: &LinkFaults| f.validate().map_err(|m| invalid(field, m));
        check_faults("default_link".into(), &self.default_link)?;
        for (i, l) in self.links.iter().enumerate() {
            for (end, a) in [("from", &l.from), ("to", &l.to)] {
                if !addrs.contains(a) {
                    return Err(invalid(format!("links[{i}].{end}"), format!("unknown address `{a}`")));
                }
            }
            check_faults(format!("links[{i}].faults"), &l.faults)?;
        }
        let mut names = BTreeSet::new();
        for (i, w) in self.wallets.iter().enumerate() {
            if !names.insert(w.name.as_str()) {
                return Err(invalid(format!("wallets[{i}].name"), "duplicate wallet name"));
            }
        }
        let wallet = |field: String, name: &str| {
            if names.contains(name) {
                Ok(())
            } else {
                Err(invalid(field, format!("unknown wallet `{name}`")))
            }
        };
        let mut labels = BTreeSet::new();
        for (i, action) in self.script.iter().enumerate() {
            let at = |f: &str| format!("script[{i}].{f}");
            match action {
                Action::Enroll { wallet: w } | Action::FixLocation { wallet: w, .. } => {
                    wallet(at("wallet"), w)?
                }
                Action::Pay(p) => {
                    wallet(at("wallet"), &p.wallet)?;
                    if !labels.insert(p.label.clone()) {
                        return Err(invalid(at("label"), format!("duplicate label `{}`", p.label)));
                    }
                    for f in p.factors.iter().flatten() {
                        if !factors.contains(f) {
                            return Err(invalid(at("factors"), format!("factor {f} has no node")));
                        }
                    }
                    if let BiometricCapture::FlipBits { flip_bits } = &p.biometric {
                        if let Some(b) = flip_bits.iter().find(|b| **b >= 256) {
                            return Err(invalid(at("biometric"), format!("bit {b} out of range")));
                        }
                    }
                    if let Some(expect_factor) = &p.expect_factor {
                        if !factors.contains(expect_factor) {
                            return Err(invalid(at("expect_factor"), "unknown factor"));
                        }
                    }
                }
                Action::Replay { of, .. } | Action::TamperSweep { of, .. } => {
                    if !labels.contains(of) {
                        return Err(invalid(at("of"), format!("no earlier payment labelled `{of}`")));
                    }
                }
                Action::PayBaseline { wallet: w, label, .. } => {
                    wallet(at("wallet"), w)?;
                    if !labels.insert(label.clone()) {
                        return Err(invalid(at("label"), format!("duplicate label `{label}`")));
                    }
                }
                Action::Kill { role } => {
                    if !addrs.contains(role) {
                        return Err(invalid(at("role"), format!("unknown role `{role}`")));
                    }
                }
                Action::SetLink { from, to, faults } => {
                    for (end, a) in [("from", from), ("to", to)] {
                        if !addrs.contains(a) {
                            return Err(invalid(at(end), format!("unknown address `{a}`")));
                        }
                    }
                    check_faults(at("faults"), faults)?;
                }
                Action::Advance { .. } => {}
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_scenarios_parse() {
        for (name, _) in BUNDLED {
            let sc = Scenario::bundled(name).unwrap();
            assert_eq!(sc.name, name);
        }
    }

    #[test]
    fn schema_lists_every_action() {
        let schema: serde_json::Value = serde_json::from_str(SCHEMA).unwrap();
        let text = schema.to_string();
        for action in [
            "enroll",
            "fix_location",
            "pay",
            "replay",
            "tamper_sweep",
            "advance",
            "pay_baseline",
            "kill",
            "set_link",
        ] {
            assert!(text.contains(&format!("\"{action}\"")), "{action}");
        }
    }

    #[test]
    fn diagnostics_carry_position_and_field() {
        let err = Scenario::parse("x.json", "{\n  \"name\": \"a\",\n  \"wallets\": 3\n}").unwrap_err();
        match err {
            ScenarioError::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("{other}"),
        }
        let text = r#"{"name":"a","wallets":[],"script":[{"action":"enroll","wallet":"bob"}]}"#;
        match Scenario::parse("x.json", text).unwrap_err() {
            ScenarioError::Invalid { field, .. } => assert_eq!(field, "script[0].wallet"),
            other => panic!("{other}"),
        }
        let text = r#"{"name":"a","wallets":[],"script":[{"action":"replay","of":"p1"}]}"#;
        assert!(matches!(
            Scenario::parse("x.json", text),
            Err(ScenarioError::Invalid { .. })
        ));
        let text = r#"{"name":"a","wallets":[],"script":[{"action":"dance"}]}"#;
        assert!(matches!(Scenario::parse("x.json", text), Err(ScenarioError::Parse { .. })));
    }

    #[test]
    fn biometric_capture_forms() {
        let enrolled = BiometricTemplate([0; 32]);
        let c: BiometricCapture = serde_json::from_str(r#""enrolled""#).unwrap();
        assert_eq!(c.apply(&enrolled), enrolled);
        let c: BiometricCapture = serde_json::from_str(r#"{"flip_bits":[0]}"#).unwrap();
        assert_eq!(c.apply(&enrolled).0[0], 1);
        let c: BiometricCapture = serde_json::from_str(&format!(r#"{{"template":"{}"}}"#, "ff".repeat(32))).unwrap();
        assert_eq!(c.apply(&enrolled), BiometricTemplate([0xff; 32]));
    }
}
