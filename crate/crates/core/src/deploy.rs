//! Deployment configuration shared by `serve` and the single-shot commands,
//! plus JSON state persistence.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand_core::{OsRng, RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::netsim::{Role, Simulator};
use crate::network::{CardNetworkRole, DecisionPolicy, NetworkState, NodeKey, PolicyError, ProvisionRegistry};
use crate::nodes::{
    always_approve, always_decline, register_extension_verifier, shared_secret_verifier,
    AuthNodeRole, BioNode, ExtensionRegistry, ExtensionStore, ExtensionVerifier, FactorNode,
    FreshnessGuard, FundNode, LocNode, NodeIdentity, DEFAULT_TOLERANCE_CELLS, DEFAULT_WINDOW_S,
};
use crate::pos::{DirectoryEntry, PosConfig, PosRole, DEFAULT_MARGIN_MS};
use crate::token::{AmountMinor, BiometricTemplate, FactorTag, GeoCell, SecretToken};
use crate::wallet::{WalletRole, WalletState};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T, StoreError> {
    let bytes = fs::read(path).map_err(|source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_slice(&bytes).map_err(|source| StoreError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Write via a temporary file and rename. `private` restricts the file to
/// its owner on unix.
pub fn save_json_atomic<T: Serialize + ?Sized>(path: &Path, value: &T, private: bool) -> Result<(), StoreError> {
    let io_err = |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|source| StoreError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    bytes.push(b'\n');
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    let mut options = fs::OpenOptions::new();
    options.write(true).create(true).truncate(true);
    #[cfg(unix)]
    if private {
        use std::os::unix::fs::OpenOptionsExt;
        options.mode(0o600);
    }
    #[cfg(not(unix))]
    let _ = private;
    let mut f = options.open(&tmp).map_err(io_err)?;
    f.write_all(&bytes).map_err(io_err)?;
    f.sync_all().map_err(io_err)?;
    drop(f);
    fs::rename(&tmp, path).map_err(io_err)
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("config has no `{0}` section")]
    MissingSection(String),
    #[error("invalid policy: {0}")]
    Policy(#[from] PolicyError),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum RoleKind {
    Wallet,
    Pos,
    Fund,
    Bio,
    Loc,
    Network,
    Extension(FactorTag),
}

impl RoleKind {
    pub const CORE: [RoleKind; 6] = [
        RoleKind::Network,
        RoleKind::Fund,
        RoleKind::Bio,
        RoleKind::Loc,
        RoleKind::Pos,
        RoleKind::Wallet,
    ];
}

impl fmt::Display for RoleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RoleKind::Wallet => f.write_str("wallet"),
            RoleKind::Pos => f.write_str("pos"),
            RoleKind::Fund => f.write_str("fund"),
            RoleKind::Bio => f.write_str("bio"),
            RoleKind::Loc => f.write_str("loc"),
            RoleKind::Network => f.write_str("network"),
            RoleKind::Extension(tag) => write!(f, "ext:{tag}"),
        }
    }
}

impl FromStr for RoleKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "wallet" => RoleKind::Wallet,
            "pos" => RoleKind::Pos,
            "fund" => RoleKind::Fund,
            "bio" => RoleKind::Bio,
            "loc" => RoleKind::Loc,
            "network" => RoleKind::Network,
            other => match other.strip_prefix("ext:") {
                Some(tag) => RoleKind::Extension(tag.parse().map_err(|e| format!("{e}"))?),
                None => {
                    return Err(format!(
                        "unknown role `{other}` (wallet, pos, fund, bio, loc, network, ext:<tag>)"
                    ))
                }
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccountSpec {
    pub account_id: String,
    pub balance: AmountMinor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub addr: String,
    #[serde(default)]
    pub state: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PosSection {
    pub addr: String,
    #[serde(default = "default_pos_id")]
    pub pos_id: String,
    /// Defaults to every configured node.
    #[serde(default)]
    pub directory: Option<Vec<DirectoryEntry>>,
    #[serde(default = "default_margin")]
    pub margin_ms: u64,
    #[serde(default)]
    pub receipt_log: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSection {
    pub addr: String,
    pub node_id: String,
    pub mac_key: SecretToken,
    #[serde(default)]
    pub state: Option<PathBuf>,
    /// Accounts opened on first start (fund node only).
    #[serde(default)]
    pub accounts: Vec<AccountSpec>,
    #[serde(default)]
    pub tolerance_cells: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifierKind {
    SharedSecret,
    AlwaysApprove,
    AlwaysDecline,
}

impl VerifierKind {
    pub fn build(self, tag: FactorTag) -> ExtensionVerifier {
        match self {
            VerifierKind::SharedSecret => shared_secret_verifier(tag),
            VerifierKind::AlwaysApprove => always_approve(),
            VerifierKind::AlwaysDecline => always_decline(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtensionSection {
    pub tag: FactorTag,
    pub verifier: VerifierKind,
    pub addr: String,
    pub node_id: String,
    pub mac_key: SecretToken,
    #[serde(default)]
    pub state: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WalletSection {
    #[serde(default)]
    pub addr: Option<String>,
    pub state: PathBuf,
    pub pan: String,
    pub account_id: String,
    pub device_id: String,
    /// Enrolled template; random when absent.
    #[serde(default)]
    pub template: Option<BiometricTemplate>,
    /// Location reported to the location node when the wallet enrolls.
    #[serde(default)]
    pub fix: Option<GeoCell>,
}

fn default_window() -> u64 {
    DEFAULT_WINDOW_S
}

fn default_pos_id() -> String {
    "pos-1".into()
}

fn default_margin() -> u64 {
    DEFAULT_MARGIN_MS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeployConfig {
    /// Seeds every RNG when set; otherwise secrets come from the OS.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_window")]
    pub window_s: u64,
    #[serde(default)]
    pub policy: DecisionPolicy,
    #[serde(default)]
    pub issuer_pans: Vec<String>,
    #[serde(default)]
    pub network: Option<NetworkSection>,
    #[serde(default)]
    pub pos: Option<PosSection>,
    #[serde(default)]
    pub fund: Option<NodeSection>,
    #[serde(default)]
    pub bio: Option<NodeSection>,
    #[serde(default)]
    pub loc: Option<NodeSection>,
    #[serde(default)]
    pub extensions: Vec<ExtensionSection>,
    #[serde(default)]
    pub wallet: Option<WalletSection>,
}

/// Command-line overrides for `serve`.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub listen: Option<String>,
    pub node_id: Option<String>,
    pub window_s: Option<u64>,
    pub tolerance_cells: Option<u32>,
    pub state: Option<PathBuf>,
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl DeployConfig {
    /// Load, resolve relative paths against the config's directory and
    /// validate.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let mut cfg: DeployConfig = load_json(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(n) = cfg.network.as_mut() {
            resolve(base, &mut n.state);
        }
        if let Some(p) = cfg.pos.as_mut() {
            resolve(base, &mut p.receipt_log);
        }
        for n in [&mut cfg.fund, &mut cfg.bio, &mut cfg.loc].into_iter().flatten() {
            resolve(base, &mut n.state);
        }
        for e in &mut cfg.extensions {
            resolve(base, &mut e.state);
        }
        if let Some(w) = cfg.wallet.as_mut() {
            let mut state = Some(w.state.clone());
            resolve(base, &mut state);
            w.state = state.expect("set above");
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.policy.validate()?;
        let mut tags = ExtensionRegistry::default();
        for e in &self.extensions {
            register_extension_verifier(&mut tags, e.tag, always_approve(), self.window_s)
                .map_err(|err| ConfigError::Invalid(format!("extension: {err}")))?;
        }
        let mut ids = BTreeMap::new();
        for (id, role) in self.node_sections().map(|(k, id, _, _)| (id, k)) {
            if let Some(other) = ids.insert(id.to_string(), role) {
                return Err(ConfigError::Invalid(format!(
                    "node_id `{id}` used by both {other} and {role}"
                )));
            }
        }
        Ok(())
    }

    /// `(role, node_id, factor, mac_key)` for every configured node.
    fn node_sections(&self) -> impl Iterator<Item = (RoleKind, &str, FactorTag, &SecretToken)> {
        let builtin = [
            (RoleKind::Fund, FactorTag::FUND, &self.fund),
            (RoleKind::Bio, FactorTag::BIO, &self.bio),
            (RoleKind::Loc, FactorTag::LOC, &self.loc),
        ]
        .into_iter()
        .filter_map(|(k, f, s)| s.as_ref().map(|s| (k, s.node_id.as_str(), f, &s.mac_key)));
        let ext = self
            .extensions
            .iter()
            .map(|e| (RoleKind::Extension(e.tag), e.node_id.as_str(), e.tag, &e.mac_key));
        builtin.chain(ext)
    }

    /// Every configured factor node: built-in ones first, then extensions.
    pub fn enrollment_targets(&self) -> Vec<(FactorTag, String)> {
        self.node_sections()
            .map(|(_, _, factor, _)| (factor, self.factor_addr(factor).expect("configured").to_string()))
            .collect()
    }

    /// MAC keys the network uses to authenticate node results.
    pub fn node_keys(&self) -> BTreeMap<String, NodeKey> {
        self.node_sections()
            .map(|(_, id, factor, key)| {
                (
                    id.to_string(),
                    NodeKey {
                        factor,
                        mac_key: *key,
                    },
                )
            })
            .collect()
    }

    fn node_section(&self, kind: RoleKind) -> Result<&NodeSection, ConfigError> {
        let s = match kind {
            RoleKind::Fund => &self.fund,
            RoleKind::Bio => &self.bio,
            RoleKind::Loc => &self.loc,
            _ => &None,
        };
        s.as_ref().ok_or_else(|| ConfigError::MissingSection(kind.to_string()))
    }

    fn extension(&self, tag: FactorTag) -> Result<&ExtensionSection, ConfigError> {
        self.extensions
            .iter()
            .find(|e| e.tag == tag)
            .ok_or_else(|| ConfigError::MissingSection(format!("extensions[{tag}]")))
    }

    pub fn network(&self) -> Result<&NetworkSection, ConfigError> {
        self.network
            .as_ref()
            .ok_or_else(|| ConfigError::MissingSection("network".into()))
    }

    pub fn pos(&self) -> Result<&PosSection, ConfigError> {
        self.pos.as_ref().ok_or_else(|| ConfigError::MissingSection("pos".into()))
    }

    pub fn wallet(&self) -> Result<&WalletSection, ConfigError> {
        self.wallet
            .as_ref()
            .ok_or_else(|| ConfigError::MissingSection("wallet".into()))
    }

    /// Node address for a factor.
    pub fn factor_addr(&self, factor: FactorTag) -> Result<&str, ConfigError> {
        let kind = match factor {
            FactorTag::FUND => RoleKind::Fund,
            FactorTag::BIO => RoleKind::Bio,
            FactorTag::LOC => RoleKind::Loc,
            tag => return Ok(&self.extension(tag)?.addr),
        };
        Ok(&self.node_section(kind)?.addr)
    }

    pub fn addr(&self, kind: RoleKind) -> Result<&str, ConfigError> {
        Ok(match kind {
            RoleKind::Network => &self.network()?.addr,
            RoleKind::Pos => &self.pos()?.addr,
            RoleKind::Wallet => self
                .wallet()?
                .addr
                .as_deref()
                .ok_or_else(|| ConfigError::MissingSection("wallet.addr".into()))?,
            RoleKind::Extension(tag) => &self.extension(tag)?.addr,
            node => &self.node_section(node)?.addr,
        })
    }

    pub fn state_path(&self, kind: RoleKind) -> Result<Option<&Path>, ConfigError> {
        Ok(match kind {
            RoleKind::Network => self.network()?.state.as_deref(),
            RoleKind::Pos => None,
            RoleKind::Wallet => Some(self.wallet()?.state.as_path()),
            RoleKind::Extension(tag) => self.extension(tag)?.state.as_deref(),
            node => self.node_section(node)?.state.as_deref(),
        })
    }

    /// Every role with a section, in a fixed order.
    pub fn configured_roles(&self) -> Vec<RoleKind> {
        let mut out: Vec<RoleKind> = RoleKind::CORE
            .into_iter()
            .filter(|k| match k {
                RoleKind::Wallet => self.wallet.as_ref().is_some_and(|w| w.addr.is_some()),
                k => self.addr(*k).is_ok(),
            })
            .collect();
        out.extend(self.extensions.iter().map(|e| RoleKind::Extension(e.tag)));
        out
    }

    pub fn apply_overrides(&mut self, kind: RoleKind, ov: &Overrides) -> Result<(), ConfigError> {
        if let Some(w) = ov.window_s {
            self.window_s = w;
        }
        if let Some(listen) = &ov.listen {
            match kind {
                RoleKind::Network => self.network.as_mut().map(|s| s.addr = listen.clone()),
                RoleKind::Pos => self.pos.as_mut().map(|s| s.addr = listen.clone()),
                RoleKind::Wallet => self.wallet.as_mut().map(|s| s.addr = Some(listen.clone())),
                RoleKind::Fund => self.fund.as_mut().map(|s| s.addr = listen.clone()),
                RoleKind::Bio => self.bio.as_mut().map(|s| s.addr = listen.clone()),
                RoleKind::Loc => self.loc.as_mut().map(|s| s.addr = listen.clone()),
                RoleKind::Extension(tag) => self
                    .extensions
                    .iter_mut()
                    .find(|e| e.tag == tag)
                    .map(|s| s.addr = listen.clone()),
            }
            .ok_or_else(|| ConfigError::MissingSection(kind.to_string()))?;
        }
        let node = match kind {
            RoleKind::Fund => self.fund.as_mut(),
            RoleKind::Bio => self.bio.as_mut(),
            RoleKind::Loc => self.loc.as_mut(),
            _ => None,
        };
        if let Some(node) = node {
            if let Some(id) = &ov.node_id {
                node.node_id = id.clone();
            }
            if let Some(t) = ov.tolerance_cells {
                node.tolerance_cells = Some(t);
            }
            if let Some(s) = &ov.state {
                node.state = Some(s.clone());
            }
        } else if ov.node_id.is_some() || ov.tolerance_cells.is_some() {
            if let RoleKind::Extension(tag) = kind {
                if let (Some(e), Some(id)) = (self.extensions.iter_mut().find(|e| e.tag == tag), &ov.node_id) {
                    e.node_id = id.clone();
                }
            } else {
                return Err(ConfigError::Invalid(format!(
                    "--node-id and --tolerance-cells only apply to node roles, not {kind}"
                )));
            }
        }
        if let Some(s) = &ov.state {
            match kind {
                RoleKind::Network => {
                    if let Some(n) = self.network.as_mut() {
                        n.state = Some(s.clone())
                    }
                }
                RoleKind::Wallet => {
                    if let Some(w) = self.wallet.as_mut() {
                        w.state = s.clone()
                    }
                }
                RoleKind::Extension(tag) => {
                    if let Some(e) = self.extensions.iter_mut().find(|e| e.tag == tag) {
                        e.state = Some(s.clone())
                    }
                }
                _ => {}
            }
        }
        self.validate()
    }

    /// RNG for a role: seeded from the config seed, the role and its current
    /// state (so a restarted node does not reissue old secrets), else the OS.
    pub fn role_rng(&self, kind: RoleKind, state: Option<&serde_json::Value>) -> Box<dyn RngCore + Send> {
        match self.seed {
            Some(seed) => {
                let mut h = Sha256::new();
                h.update(seed.to_be_bytes());
                h.update(kind.to_string().as_bytes());
                if let Some(s) = state {
                    h.update(s.to_string().as_bytes());
                }
                Box::new(Xoshiro256PlusPlus::from_seed(h.finalize().into()))
            }
            None => Box::new(OsRng),
        }
    }

    fn load_state<T: DeserializeOwned>(&self, kind: RoleKind) -> Result<Option<T>, ConfigError> {
        match self.state_path(kind)? {
            Some(p) if p.exists() => Ok(Some(load_json(p)?)),
            _ => Ok(None),
        }
    }

    fn node_role<N: FactorNode>(
        &self,
        kind: RoleKind,
        node_id: &str,
        mac_key: SecretToken,
        node: N,
    ) -> Result<Box<dyn Role>, ConfigError> {
        let rng = self.role_rng(kind, Some(&node.state_json()));
        let identity = NodeIdentity {
            node_id: node_id.to_string(),
            mac_key,
            network_addr: self.network()?.addr.clone(),
        };
        Ok(Box::new(AuthNodeRole::new(identity, node, rng)))
    }

    /// Build a role, loading persisted state if its state file exists.
    pub fn build_role(&self, kind: RoleKind) -> Result<Box<dyn Role>, ConfigError> {
        let w = self.window_s;
        match kind {
            RoleKind::Network => {
                let state = self.load_state::<NetworkState>(kind)?.unwrap_or_else(|| NetworkState {
                    registry: ProvisionRegistry::default(),
                });
                let mut state = state;
                state.registry.issuer_pans.extend(self.issuer_pans.iter().cloned());
                let rng = self.role_rng(kind, Some(&serde_json::to_value(&state).expect("serializes")));
                Ok(Box::new(CardNetworkRole::new(
                    state,
                    self.policy.clone(),
                    w,
                    self.node_keys(),
                    rng,
                )))
            }
            RoleKind::Pos => {
                let s = self.pos()?;
                let directory = match &s.directory {
                    Some(d) => d.clone(),
                    None => self
                        .node_sections()
                        .map(|(_, _, factor, _)| DirectoryEntry {
                            factor,
                            addr: self.factor_addr(factor).expect("configured").to_string(),
                        })
                        .collect(),
                };
                Ok(Box::new(PosRole::new(PosConfig {
                    pos_id: s.pos_id.clone(),
                    network_addr: self.network()?.addr.clone(),
                    directory,
                    deadline_ms: self.policy.deadline_ms,
                    margin_ms: s.margin_ms,
                    receipt_log: s.receipt_log.clone(),
                })))
            }
            RoleKind::Fund => {
                let s = self.node_section(kind)?;
                let mut node = self.load_state::<FundNode>(kind)?.unwrap_or_else(|| FundNode::new(w));
                node.guard.set_window(w);
                for a in &s.accounts {
                    if !node.ledger.has_account(&a.account_id) {
                        node.ledger.open_account(a.account_id.clone(), a.balance);
                    }
                }
                self.node_role(kind, &s.node_id, s.mac_key, node)
            }
            RoleKind::Bio => {
                let s = self.node_section(kind)?;
                let mut node = self.load_state::<BioNode>(kind)?.unwrap_or_else(|| BioNode::new(w));
                node.guard.set_window(w);
                self.node_role(kind, &s.node_id, s.mac_key, node)
            }
            RoleKind::Loc => {
                let s = self.node_section(kind)?;
                let tolerance = s.tolerance_cells.unwrap_or(DEFAULT_TOLERANCE_CELLS);
                let mut node = self
                    .load_state::<LocNode>(kind)?
                    .unwrap_or_else(|| LocNode::new(w, tolerance));
                node.guard.set_window(w);
                node.tolerance_cells = tolerance;
                self.node_role(kind, &s.node_id, s.mac_key, node)
            }
            RoleKind::Extension(tag) => {
                #[derive(Deserialize)]
                struct Saved {
                    store: ExtensionStore,
                    guard: FreshnessGuard,
                }
                let s = self.extension(tag)?;
                let mut registry = ExtensionRegistry::default();
                let mut node = register_extension_verifier(&mut registry, tag, s.verifier.build(tag), w)
                    .map_err(|e| ConfigError::Invalid(e.to_string()))?;
                if let Some(saved) = self.load_state::<Saved>(kind)? {
                    node.store = saved.store;
                    node.guard = saved.guard;
                    node.guard.set_window(w);
                }
                self.node_role(kind, &s.node_id, s.mac_key, node)
            }
            RoleKind::Wallet => {
                let state = self.load_or_create_wallet()?;
                Ok(Box::new(WalletRole::new(state, &self.pos()?.addr)))
            }
        }
    }

    /// The wallet's persisted state, or a fresh unenrolled wallet.
    pub fn load_or_create_wallet(&self) -> Result<WalletState, ConfigError> {
        let s = self.wallet()?;
        if s.state.exists() {
            return WalletState::load(&s.state).map_err(|e| ConfigError::Invalid(e.to_string()));
        }
        let mut rng = self.role_rng(RoleKind::Wallet, None);
        let template = s.template.unwrap_or_else(|| {
            let mut b = [0u8; 32];
            rng.fill_bytes(&mut b);
            BiometricTemplate(b)
        });
        Ok(WalletState::new(rng.as_mut(), template, &s.device_id, &s.account_id))
    }

    /// Persist a role's state if it has a state path.
    pub fn save_role_state(&self, kind: RoleKind, state: Option<serde_json::Value>) -> Result<(), ConfigError> {
        if let (Some(path), Some(state)) = (self.state_path(kind)?, state) {
            save_json_atomic(path, &state, true)?;
        }
        Ok(())
    }

    /// Every configured role except the wallet, registered in a simulator
    /// under its configured address.
    pub fn sim_world(&self, start_ms: u64) -> Result<Simulator, ConfigError> {
        let mut sim = Simulator::new(self.seed.unwrap_or(0), start_ms);
        for kind in self.configured_roles() {
            if kind != RoleKind::Wallet {
                sim.add_role(self.addr(kind)?, self.build_role(kind)?);
            }
        }
        Ok(sim)
    }

    /// Write back the state of every simulated role.
    pub fn save_world(&self, sim: &Simulator) -> Result<(), ConfigError> {
        for kind in self.configured_roles() {
            if kind != RoleKind::Wallet {
                self.save_role_state(kind, sim.role_state(self.addr(kind)?))?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample() -> serde_json::Value {
        serde_json::json!({
            "seed": 7,
            "issuer_pans": ["4111111111111111"],
            "network": {"addr": "net", "state": "state/network.json"},
            "pos": {"addr": "pos"},
            "fund": {"addr": "fund", "node_id": "fund-1", "mac_key": "11".repeat(32),
                     "state": "state/fund.json",
                     "accounts": [{"account_id": "acct-1", "balance": {"minor_units": 5000, "currency": "USD"}}]},
            "bio": {"addr": "bio", "node_id": "bio-1", "mac_key": "22".repeat(32)},
            "loc": {"addr": "loc", "node_id": "loc-1", "mac_key": "33".repeat(32), "tolerance_cells": 2},
            "wallet": {"state": "state/wallet.json", "pan": "4111111111111111",
                       "account_id": "acct-1", "device_id": "dev-1",
                       "fix": {"lat_cell": 10, "lon_cell": 20}}
        })
    }

    fn write(dir: &Path, v: &serde_json::Value) -> PathBuf {
        let p = dir.join("deploy.json");
        fs::write(&p, serde_json::to_vec(v).unwrap()).unwrap();
        p
    }

    #[test]
    fn load_resolves_paths_and_builds_every_role() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DeployConfig::load(&write(dir.path(), &sample())).unwrap();
        assert_eq!(
            cfg.state_path(RoleKind::Fund).unwrap().unwrap(),
            dir.path().join("state/fund.json")
        );
        assert_eq!(cfg.node_keys().len(), 3);
        assert_eq!(
            cfg.configured_roles(),
            vec![RoleKind::Network, RoleKind::Fund, RoleKind::Bio, RoleKind::Loc, RoleKind::Pos]
        );
        let sim = cfg.sim_world(0).unwrap();
        assert_eq!(sim.role_addrs().count(), 5);
        cfg.save_world(&sim).unwrap();
        assert!(dir.path().join("state/fund.json").exists());
        assert!(dir.path().join("state/network.json").exists());
    }

    #[test]
    fn bad_configs_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut v = sample();
        v["bogus"] = 1.into();
        assert!(DeployConfig::load(&write(dir.path(), &v)).is_err());

        let mut v = sample();
        v["bio"]["node_id"] = "fund-1".into();
        assert!(matches!(
            DeployConfig::load(&write(dir.path(), &v)),
            Err(ConfigError::Invalid(_))
        ));

        let mut v = sample();
        v["policy"] = serde_json::json!({"required": ["FUND"], "optional": ["FUND"], "deadline_ms": 5});
        assert!(matches!(
            DeployConfig::load(&write(dir.path(), &v)),
            Err(ConfigError::Policy(_))
        ));

        let mut v = sample();
        v["fund"]["mac_key"] = "zz".into();
        assert!(DeployConfig::load(&write(dir.path(), &v)).is_err());
    }

    #[test]
    fn overrides() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = DeployConfig::load(&write(dir.path(), &sample())).unwrap();
        cfg.apply_overrides(
            RoleKind::Loc,
            &Overrides {
                listen: Some("127.0.0.1:9".into()),
                node_id: Some("loc-9".into()),
                tolerance_cells: Some(0),
                ..Overrides::default()
            },
        )
        .unwrap();
        assert_eq!(cfg.addr(RoleKind::Loc).unwrap(), "127.0.0.1:9");
        assert!(cfg.node_keys().contains_key("loc-9"));
        assert!(cfg
            .apply_overrides(
                RoleKind::Pos,
                &Overrides {
                    node_id: Some("x".into()),
                    ..Overrides::default()
                }
            )
            .is_err());
    }

    #[test]
    fn role_names() {
        for k in RoleKind::CORE {
            assert_eq!(k.to_string().parse::<RoleKind>().unwrap(), k);
        }
        assert_eq!("ext:0x80".parse::<RoleKind>().unwrap(), RoleKind::Extension(FactorTag(0x80)));
        assert!("teller".parse::<RoleKind>().is_err());
    }

    #[test]
    fn atomic_save_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x/y.json");
        save_json_atomic(&p, &serde_json::json!({"a": 1}), false).unwrap();
        save_json_atomic(&p, &serde_json::json!({"a": 2}), false).unwrap();
        let v: serde_json::Value = load_json(&p).unwrap();
        assert_eq!(v["a"], 2);
        assert_eq!(fs::read_dir(dir.path().join("x")).unwrap().count(), 1);
    }
}
