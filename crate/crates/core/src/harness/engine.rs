use std::collections::BTreeMap;

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use sha2::{Digest, Sha256};

use super::report::{Delivery, RowKind, RunReport, TxnRow};
use super::scenario::{
    extension_addr, wallet_addr, Action, AttackKind, PayAction, Scenario, ScenarioError, WalletSpec,
    BIO, FUND, LOC, NETWORK, POS,
};
use crate::deploy::{AccountSpec, DeployConfig, ExtensionSection, NetworkSection, NodeSection, PosSection};
use crate::netsim::{BaselineValidateReq, Message, PaymentSubmit, SimChannel, Simulator, TraceEntry};
use crate::network::{CardNetworkRole, Decision};
use crate::nodes::{AuthNodeRole, FundNode, Verdict};
use crate::pos::DEFAULT_MARGIN_MS;
use crate::token::{BiometricTemplate, FactorTag, SecretToken, TimeStamp, TxnId};
use crate::wallet::{CaptureInputs, WalletState};

/// Source address for taps made by someone other than the wallet owner.
pub const ATTACKER: &str = "attacker";

/// Upper bound on virtual time spent settling one tap.
const SETTLE_HORIZON_MS: u64 = 600_000;

pub struct RunOutput {
    pub report: RunReport,
    pub trace: Vec<TraceEntry>,
    /// Every frame put on a simulated link, when recording was requested.
    pub frames: Vec<Vec<u8>>,
}

struct PayRecord {
    action: PayAction,
    token: Vec<u8>,
}

struct TapOutcome {
    deliveries: Vec<(u64, Decision)>,
    latency_ms: Option<u64>,
}

/// Drives one scenario over the simulator. Wallets are driven directly by
/// the engine; every other role runs inside the simulator.
pub struct Engine {
    scenario: Scenario,
    sim: Simulator,
    wallets: BTreeMap<String, (WalletSpec, WalletState)>,
    last_fix: BTreeMap<String, u64>,
    payments: BTreeMap<String, PayRecord>,
    rows: Vec<TxnRow>,
}

fn derive(seed: u64, label: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_be_bytes());
    h.update(label.as_bytes());
    h.finalize().into()
}

fn step_err(index: usize, message: impl std::fmt::Display) -> ScenarioError {
    ScenarioError::Invalid {
        field: format!("script[{index}]"),
        message: message.to_string(),
    }
}

/// The deployment a scenario describes, with node MAC keys derived from
/// the seed.
pub fn scenario_config(sc: &Scenario) -> DeployConfig {
    let node = |addr: &str, node_id: &str, accounts: Vec<AccountSpec>, tolerance: Option<u32>| NodeSection {
        addr: addr.to_string(),
        node_id: node_id.to_string(),
        mac_key: SecretToken(derive(sc.seed, &format!("mac:{node_id}"))),
        state: None,
        accounts,
        tolerance_cells: tolerance,
    };
    let accounts = sc
        .wallets
        .iter()
        .map(|w| AccountSpec {
            account_id: account_id(&w.name),
            balance: w.balance,
        })
        .collect();
    DeployConfig {
        seed: Some(sc.seed),
        window_s: sc.window_s,
        policy: sc.policy.clone(),
        issuer_pans: sc
            .issuer_pans
            .clone()
            .unwrap_or_else(|| sc.wallets.iter().map(|w| w.pan.clone()).collect()),
        network: Some(NetworkSection {
            addr: NETWORK.into(),
            state: None,
        }),
        pos: Some(PosSection {
            addr: POS.into(),
            pos_id: "pos-1".into(),
            directory: None,
            margin_ms: DEFAULT_MARGIN_MS,
            receipt_log: None,
        }),
        fund: Some(node(FUND, "fund-1", accounts, None)),
        bio: Some(node(BIO, "bio-1", vec![], None)),
        loc: Some(node(LOC, "loc-1", vec![], Some(sc.tolerance_cells))),
        extensions: sc
            .extensions
            .iter()
            .map(|e| {
                let node_id = format!("ext-{:02x}", e.tag.0);
                ExtensionSection {
                    tag: e.tag,
                    verifier: e.verifier,
                    addr: extension_addr(e.tag),
                    mac_key: SecretToken(derive(sc.seed, &format!("mac:{node_id}"))),
                    node_id,
                    state: None,
                }
            })
            .collect(),
        wallet: None,
    }
}

fn account_id(wallet: &str) -> String {
    format!("acct-{wallet}")
}

impl Engine {
    pub fn new(scenario: &Scenario) -> Result<Self, ScenarioError> {
        let cfg = scenario_config(scenario);
        cfg.validate().map_err(|e| ScenarioError::Invalid {
            field: "deployment".into(),
            message: e.to_string(),
        })?;
        let mut sim = cfg
            .sim_world(scenario.start_time_s * 1000)
            .map_err(|e| ScenarioError::Invalid {
                field: "deployment".into(),
                message: e.to_string(),
            })?;
        sim.set_default_faults(scenario.default_link);
        for l in &scenario.links {
            sim.set_link(&l.from, &l.to, l.faults);
        }
        let wallets = scenario
            .wallets
            .iter()
            .map(|w| {
                let mut rng = Xoshiro256PlusPlus::from_seed(derive(scenario.seed, &format!("wallet:{}", w.name)));
                let template = w.template.unwrap_or_else(|| {
                    let mut b = [0u8; 32];
                    rng.fill_bytes(&mut b);
                    BiometricTemplate(b)
                });
                let state = WalletState::new(&mut rng, template, &format!("dev-{}", w.name), &account_id(&w.name));
                (w.name.clone(), (w.clone(), state))
            })
            .collect();
        Ok(Self {
            scenario: scenario.clone(),
            sim,
            wallets,
            last_fix: BTreeMap::new(),
            payments: BTreeMap::new(),
            rows: Vec::new(),
        })
    }

    pub fn record_frames(&mut self, on: bool) {
        self.sim.record_frames(on);
    }

    pub fn simulator(&self) -> &Simulator {
        &self.sim
    }

    pub fn wallet(&self, name: &str) -> Option<&WalletState> {
        self.wallets.get(name).map(|(_, w)| w)
    }

    fn now_s(&self) -> u64 {
        self.sim.now_ms() / 1000
    }

    fn advance_ms(&mut self, ms: u64) {
        let t = self.sim.now_ms() + ms;
        self.sim.run_until(t);
    }

    pub fn run(mut self) -> Result<RunOutput, ScenarioError> {
        let script = std::mem::take(&mut self.scenario.script);
        for (i, action) in script.iter().enumerate() {
            self.apply(i, action)?;
        }
        let forged = self
            .sim
            .role::<CardNetworkRole>(NETWORK)
            .map(|n| n.table().forged_results())
            .unwrap_or(0);
        let report = RunReport::new(&self.scenario.name, vec![self.scenario.seed], self.rows, forged);
        Ok(RunOutput {
            report,
            trace: self.sim.trace().to_vec(),
            frames: self.sim.frames().to_vec(),
        })
    }

    fn apply(&mut self, i: usize, action: &Action) -> Result<(), ScenarioError> {
        match action {
            Action::Enroll { wallet } => self.enroll(i, wallet),
            Action::FixLocation { wallet, cell } => self.fix_location(i, wallet, *cell),
            Action::Pay(p) => self.pay(i, p),
            Action::Replay { of, delay_ms } => {
                self.advance_ms(*delay_ms);
                let rec = &self.payments[of];
                let (token, wallet) = (rec.token.clone(), rec.action.wallet.clone());
                let prefix = format!("{of}/replay");
                let n = self.rows.iter().filter(|r| r.label.starts_with(&prefix)).count();
                let label = format!("{prefix}{}", n + 1);
                let out = self.tap(ATTACKER, token.clone())?;
                self.push_row(label, RowKind::Replay, Some(AttackKind::Replay), &wallet, &token, out, None);
                self.advance_ms(1000);
                Ok(())
            }
            Action::TamperSweep { of, mask } => self.tamper_sweep(i, of, *mask),
            Action::Advance { seconds } => {
                self.advance_ms(seconds * 1000);
                Ok(())
            }
            Action::PayBaseline {
                wallet,
                label,
                corrupt,
                expect,
            } => self.pay_baseline(i, wallet, label, *corrupt, *expect),
            Action::Kill { role } => {
                self.sim.kill(role);
                Ok(())
            }
            Action::SetLink { from, to, faults } => {
                self.sim.set_link(from, to, *faults);
                Ok(())
            }
        }
    }

    fn enroll(&mut self, i: usize, name: &str) -> Result<(), ScenarioError> {
        let addr = wallet_addr(name);
        self.sim.take_mailbox(&addr);
        let (spec, mut state) = self.wallets.remove(name).expect("validated");
        let mut nodes = vec![(FactorTag::FUND, FUND.to_string()), (FactorTag::BIO, BIO.into()), (FactorTag::LOC, LOC.into())];
        nodes.extend(self.scenario.extensions.iter().map(|e| (e.tag, extension_addr(e.tag))));
        let mut chan = SimChannel::new(&mut self.sim, &addr);
        let result = state.enroll_all(&spec.pan, NETWORK, &nodes, &mut chan);
        self.wallets.insert(name.to_string(), (spec.clone(), state));
        result.map_err(|e| step_err(i, format!("enrolling {name}: {e}")))?;
        self.fix_location(i, name, spec.home)
    }

    fn fix_location(&mut self, i: usize, name: &str, cell: crate::token::GeoCell) -> Result<(), ScenarioError> {
        if let Some(&last) = self.last_fix.get(name) {
            if self.now_s() <= last {
                self.sim.run_until((last + 1) * 1000);
            }
        }
        let t = TimeStamp::new(self.now_s());
        let addr = wallet_addr(name);
        self.sim.take_mailbox(&addr);
        let (_, state) = &self.wallets[name];
        let mut chan = SimChannel::new(&mut self.sim, &addr);
        let accepted = state
            .report_fix(cell, t, LOC, &mut chan)
            .map_err(|e| step_err(i, format!("location fix for {name}: {e}")))?;
        if !accepted {
            return Err(step_err(i, format!("location fix for {name} was refused")));
        }
        self.last_fix.insert(name.to_string(), t.0);
        Ok(())
    }

    fn build_token(&self, i: usize, p: &PayAction, t: TimeStamp) -> Result<Vec<u8>, ScenarioError> {
        let (spec, state) = &self.wallets[&p.wallet];
        let inputs = CaptureInputs {
            biometric_reading: p.biometric.apply(&state.enrolled_template),
            location_fix: p.cell.unwrap_or(spec.home),
            amount: p.amount,
            t,
        };
        let factors = p.factors.clone().unwrap_or_else(|| state.enrolled_factors());
        state
            .initiate_payment(&inputs, &factors)
            .map_err(|e| step_err(i, format!("payment `{}`: {e}", p.label)))
    }

    fn pay(&mut self, i: usize, p: &PayAction) -> Result<(), ScenarioError> {
        let t = TimeStamp::new(self.now_s()).offset(p.clock_skew_s);
        let token = self.build_token(i, p, t)?;
        let out = self.tap(&wallet_addr(&p.wallet), token.clone())?;
        let expect = (p.expect.is_some() || p.expect_reason.is_some() || p.expect_factor.is_some())
            .then_some(p);
        self.push_row(p.label.clone(), RowKind::Pay, p.attack, &p.wallet, &token, out, expect);
        self.payments.insert(
            p.label.clone(),
            PayRecord {
                action: p.clone(),
                token,
            },
        );
        self.advance_ms(1000);
        Ok(())
    }

    fn tamper_sweep(&mut self, i: usize, of: &str, mask: u8) -> Result<(), ScenarioError> {
        let action = self.payments[of].action.clone();
        let len = self.payments[of].token.len();
        for pos in 0..len {
            let t = TimeStamp::new(self.now_s()).offset(action.clock_skew_s);
            let mut token = self.build_token(i, &action, t)?;
            token[pos] ^= mask;
            let out = self.tap(ATTACKER, token.clone())?;
            self.push_row(
                format!("{of}/tamper[{pos}]"),
                RowKind::Tamper,
                Some(AttackKind::Tamper),
                &action.wallet,
                &token,
                out,
                None,
            );
            self.advance_ms(1000);
        }
        Ok(())
    }

    fn pay_baseline(
        &mut self,
        i: usize,
        name: &str,
        label: &str,
        corrupt: bool,
        expect: Option<Verdict>,
    ) -> Result<(), ScenarioError> {
        let t = TimeStamp::new(self.now_s());
        let (_, state) = &self.wallets[name];
        let mut ottc = state
            .baseline_ottc(t)
            .map_err(|e| step_err(i, format!("baseline `{label}`: {e}")))?;
        if corrupt {
            ottc.0[0] ^= 1;
        }
        let wallet_id = state.wallet_id;
        let addr = wallet_addr(name);
        self.sim.take_mailbox(&addr);
        let t0 = self.sim.now_ms();
        self.sim.inject(
            &addr,
            POS,
            Message::BaselineValidateReq(BaselineValidateReq {
                wallet_id,
                t,
                ottc,
                session: 0,
            }),
        );
        self.settle()?;
        let resp = self.sim.take_mailbox(&addr).into_iter().find_map(|env| match env.msg {
            Message::BaselineValidateResp(r) => Some((env.t_ms, r)),
            _ => None,
        });
        let (verdict, reason, latency) = match resp {
            Some((at, r)) if r.valid => (Verdict::Approve, None, Some(at - t0)),
            Some((at, r)) => (
                Verdict::Decline,
                Some(r.error.unwrap_or_else(|| "INVALID".into())),
                Some(at - t0),
            ),
            None => (Verdict::Decline, Some("NO_DECISION".into()), None),
        };
        self.rows.push(TxnRow {
            label: label.to_string(),
            kind: RowKind::Baseline,
            attack: None,
            wallet: name.to_string(),
            txn_id: None,
            verdict,
            decline_factor: None,
            decline_reason: reason,
            factors: vec![],
            deliveries: vec![],
            duplicate_results: 0,
            latency_ms: latency,
            expectation_met: expect.map(|e| e == verdict),
        });
        self.advance_ms(1000);
        Ok(())
    }

    fn settle(&mut self) -> Result<(), ScenarioError> {
        let horizon = self.sim.now_ms() + SETTLE_HORIZON_MS;
        self.sim
            .run_until_idle(horizon)
            .map(|_| ())
            .map_err(|e| ScenarioError::Stuck(e.to_string()))
    }

    /// Tap `token` at the POS from `from` and run until the network is idle.
    fn tap(&mut self, from: &str, token: Vec<u8>) -> Result<TapOutcome, ScenarioError> {
        self.sim.take_mailbox(from);
        let t0 = self.sim.now_ms();
        self.sim
            .inject(from, POS, Message::PaymentSubmit(PaymentSubmit::token(token)));
        self.settle()?;
        // A duplicated tap opens a second POS session; the lowest session
        // is the one the device's own tap opened.
        let mut arrivals: BTreeMap<u64, (u64, Decision)> = BTreeMap::new();
        for env in self.sim.take_mailbox(from) {
            if let Message::Decision(d) = env.msg {
                arrivals.entry(d.session).or_insert((env.t_ms, d.decision));
            }
        }
        let latency_ms = arrivals.values().next().map(|(t, _)| t - t0);
        let deliveries: Vec<(u64, Decision)> = arrivals.into_iter().map(|(s, (_, d))| (s, d)).collect();
        self.settle_holds(&deliveries);
        Ok(TapOutcome {
            deliveries,
            latency_ms,
        })
    }

    /// Capture the hold of an approved transaction, release any other.
    fn settle_holds(&mut self, deliveries: &[(u64, Decision)]) {
        let Some(fund) = self.sim.role_mut::<AuthNodeRole<FundNode>>(FUND) else {
            return;
        };
        let mut txns: BTreeMap<TxnId, bool> = BTreeMap::new();
        for (_, d) in deliveries {
            *txns.entry(d.txn_id).or_default() |= d.verdict == Verdict::Approve;
        }
        for (txn, approved) in txns {
            if fund.node.ledger.hold(&txn).is_some() {
                if approved {
                    fund.node.ledger.capture(&txn);
                } else {
                    fund.node.ledger.void(&txn);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn push_row(
        &mut self,
        label: String,
        kind: RowKind,
        attack: Option<AttackKind>,
        wallet: &str,
        token: &[u8],
        out: TapOutcome,
        expect: Option<&PayAction>,
    ) {
        let first = out.deliveries.first().map(|(_, d)| d.clone());
        let txn_id = first.as_ref().map(|d| d.txn_id).unwrap_or_else(|| TxnId::of_token(token));
        let (verdict, factors, decline_factor, decline_reason) = match &first {
            Some(d) => (
                d.verdict,
                d.contributing.clone(),
                d.decline_reason.as_ref().and_then(|r| r.factor()),
                d.decline_reason.as_ref().map(|r| r.code()),
            ),
            None => (Verdict::Decline, vec![], None, Some("NO_DECISION".to_string())),
        };
        let duplicate_results = self
            .sim
            .role::<CardNetworkRole>(NETWORK)
            .map(|n| n.table().extra_results(&txn_id))
            .unwrap_or(0);
        let expectation_met = expect.map(|p| {
            p.expect.is_none_or(|v| v == verdict)
                && p
                    .expect_reason
                    .as_ref()
                    .is_none_or(|r| decline_reason.as_ref().is_some_and(|d| d.eq_ignore_ascii_case(r)))
                && p.expect_factor.is_none_or(|f| decline_factor == Some(f))
        });
        let deliveries = out
            .deliveries
            .iter()
            .map(|(session, d)| Delivery {
                session: *session,
                verdict: d.verdict,
                decline_reason: d.decline_reason.as_ref().map(|r| r.code()),
            })
            .collect();
        self.rows.push(TxnRow {
            label,
            kind,
            attack,
            wallet: wallet.to_string(),
            txn_id: Some(txn_id),
            verdict,
            decline_factor,
            decline_reason,
            factors,
            deliveries,
            duplicate_results,
            latency_ms: out.latency_ms,
            expectation_met,
        });
    }
}
