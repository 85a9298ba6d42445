#![allow(dead_code)]

use std::collections::BTreeMap;
use std::net::TcpListener;
use std::thread;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use hmac::{Hmac, Mac};
use mpa_core::deploy::{DeployConfig, RoleKind};
use mpa_core::harness::{scenario_config, Action, Scenario};
use mpa_core::netsim::{
    CaptureSubmit, Message, PayIntent, PaymentSubmit, RequestChannel, TcpChannel, TcpNode, TcpNodeHandle,
};
use mpa_core::wallet::{WalletRole, WalletState};
use mpa_core::{BiometricTemplate, Decision, FactorTag, TimeStamp};
use rand_core::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use sha2::Sha256;

/// Plain HMAC-SHA-256, written against the `hmac` crate directly.
pub fn oracle_hmac(key: &[u8], msg: &[u8]) -> [u8; 32] {
    let mut mac = Hmac::<Sha256>::new_from_slice(key).unwrap();
    mac.update(msg);
    mac.finalize().into_bytes().into()
}

/// Keyed hash of a per-time key: `H(H(secret, t), msg)`.
pub fn oracle_factor_token(secret: &[u8; 32], t: u64, msg: &[u8]) -> [u8; 32] {
    oracle_hmac(&oracle_hmac(secret, &t.to_be_bytes()), msg)
}

pub fn rng(seed: u64) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

pub fn free_addr() -> String {
    let l = TcpListener::bind("127.0.0.1:0").unwrap();
    l.local_addr().unwrap().to_string()
}

pub fn wall_s() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).unwrap().as_secs()
}

/// A scenario's deployment served over loopback TCP, one listener per role.
pub struct TcpWorld {
    pub cfg: DeployConfig,
    pub handles: BTreeMap<RoleKind, TcpNodeHandle>,
    pub wallets: BTreeMap<String, (WalletState, TcpNodeHandle)>,
    last_pay_s: u64,
}

impl TcpWorld {
    pub fn start(sc: &Scenario) -> Self {
        let mut cfg = scenario_config(sc);
        cfg.network.as_mut().unwrap().addr = free_addr();
        cfg.pos.as_mut().unwrap().addr = free_addr();
        for n in [&mut cfg.fund, &mut cfg.bio, &mut cfg.loc].into_iter().flatten() {
            n.addr = free_addr();
        }
        for e in &mut cfg.extensions {
            e.addr = free_addr();
        }
        cfg.validate().unwrap();
        let mut handles = BTreeMap::new();
        for kind in cfg.configured_roles() {
            let role = cfg.build_role(kind).unwrap();
            let h = TcpNode::spawn(cfg.addr(kind).unwrap(), role).unwrap();
            handles.insert(kind, h);
        }
        Self {
            cfg,
            handles,
            wallets: BTreeMap::new(),
            last_pay_s: 0,
        }
    }

    pub fn kill(&mut self, kind: RoleKind) {
        if let Some(h) = self.handles.remove(&kind) {
            h.shutdown();
        }
    }

    /// Enroll a scenario wallet over TCP and serve it.
    pub fn enroll(&mut self, sc: &Scenario, name: &str) {
        let spec = sc.wallets.iter().find(|w| w.name == name).unwrap();
        let mut r = rng(sc.seed ^ 0x5eed);
        let template = spec.template.unwrap_or(BiometricTemplate([0x3c; 32]));
        let mut state = WalletState::new(&mut r, template, &format!("dev-{name}"), &format!("acct-{name}"));
        let mut chan = TcpChannel::new(Duration::from_secs(5));
        let network = self.cfg.network().unwrap().addr.clone();
        state
            .enroll_all(&spec.pan, &network, &self.cfg.enrollment_targets(), &mut chan)
            .unwrap();
        let loc = self.cfg.factor_addr(FactorTag::LOC).unwrap().to_string();
        assert!(state
            .report_fix(spec.home, TimeStamp::new(wall_s()), &loc, &mut chan)
            .unwrap());
        let role = WalletRole::new(state.clone(), &self.cfg.pos().unwrap().addr);
        let handle = TcpNode::spawn("127.0.0.1:0", Box::new(role)).unwrap();
        self.wallets.insert(name.to_string(), (state, handle));
    }

    /// Send a pay intent to a served wallet. Payments from one wallet are
    /// spaced into distinct seconds: a wallet's timestamps must differ.
    pub fn pay(&mut self, wallet: &str, intent: PayIntent) -> Decision {
        while wall_s() <= self.last_pay_s {
            thread::sleep(Duration::from_millis(20));
        }
        self.last_pay_s = wall_s();
        let addr = self.wallets[wallet].1.addr().to_string();
        let mut chan = TcpChannel::new(Duration::from_secs(10));
        let msg = Message::PaymentSubmit(PaymentSubmit::Capture(CaptureSubmit { capture: intent }));
        match chan.request(&addr, msg).unwrap() {
            Message::Decision(d) => d.decision,
            other => panic!("unexpected reply {other:?}"),
        }
    }

    /// Run the enroll and pay steps of a scenario; returns the verdicts of
    /// the payments in order.
    pub fn run_script(&mut self, sc: &Scenario) -> Vec<(String, Decision)> {
        let mut out = Vec::new();
        for action in &sc.script {
            match action {
                Action::Enroll { wallet } => self.enroll(sc, wallet),
                Action::Pay(p) => {
                    let spec = sc.wallets.iter().find(|w| w.name == p.wallet).unwrap();
                    let enrolled = self.wallets[&p.wallet].0.enrolled_template;
                    let intent = PayIntent {
                        amount: p.amount,
                        biometric: p.biometric.apply(&enrolled),
                        cell: p.cell.unwrap_or(spec.home),
                        clock_skew_s: p.clock_skew_s,
                        factors: p.factors.clone(),
                    };
                    out.push((p.label.clone(), self.pay(&p.wallet, intent)));
                }
                other => panic!("tcp runner does not support {other:?}"),
            }
        }
        out
    }
}
