//! Point-of-sale terminal: takes a tapped token, registers it with the card
//! network, forwards it untouched to the authentication nodes and relays the
//! decision back to the tapper.

use std::any::Any;
use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::netsim::{
    BaselineValidateReq, BaselineValidateResp, Context, DecisionMsg, Message, PaymentSubmit, Role,
    TxnRegister,
};
use crate::network::{Decision, DeclineReason};
use crate::nodes::Verdict;
use crate::token::{parse_payment_token, FactorTag, TxnId};

/// Largest token accepted over the tap channel.
pub const TAP_MTU: usize = 4096;
pub const DEFAULT_MARGIN_MS: u64 = 200;
const SESSION_CAP: usize = 4096;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectoryEntry {
    pub factor: FactorTag,
    pub addr: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FailReason {
    Malformed,
    NoDecision,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", content = "detail", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SessionState {
    AwaitingTap,
    FannedOut,
    Decided(Verdict),
    Failed(FailReason),
}

impl SessionState {
    fn rank(self) -> u8 {
        match self {
            SessionState::AwaitingTap => 0,
            SessionState::FannedOut => 1,
            SessionState::Decided(_) | SessionState::Failed(_) => 2,
        }
    }

    pub fn is_terminal(self) -> bool {
        self.rank() == 2
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PosSession {
    pub id: u64,
    pub txn_id: TxnId,
    pub token: Vec<u8>,
    /// Factor tags the token carries; empty when the tap was malformed.
    pub factors: Vec<FactorTag>,
    state: SessionState,
}

impl PosSession {
    pub fn state(&self) -> SessionState {
        self.state
    }

    /// Move forward along AWAITING -> FANNED_OUT -> DECIDED | FAILED.
    /// Any other transition is refused.
    pub fn transition(&mut self, next: SessionState) -> bool {
        let ok = match (self.state, next) {
            (SessionState::AwaitingTap, SessionState::Failed(FailReason::Malformed)) => true,
            (from, to) => !from.is_terminal() && to.rank() == from.rank() + 1,
        };
        if ok {
            self.state = next;
        }
        ok
    }
}

/// Parse the structure of a tapped token. Nothing cryptographic is checked.
pub fn receive_tap(id: u64, bytes: &[u8]) -> PosSession {
    let txn_id = TxnId::of_token(bytes);
    let parsed = (bytes.len() <= TAP_MTU)
        .then(|| parse_payment_token(bytes).ok())
        .flatten();
    match parsed {
        Some(token) => PosSession {
            id,
            txn_id,
            token: bytes.to_vec(),
            factors: token.tags().collect(),
            state: SessionState::AwaitingTap,
        },
        None => PosSession {
            id,
            txn_id,
            token: Vec::new(),
            factors: Vec::new(),
            state: SessionState::Failed(FailReason::Malformed),
        },
    }
}

/// Forward the token to each directory entry whose factor it carries and
/// register it with the network once. Returns the number of node submits.
pub fn fan_out(
    session: &mut PosSession,
    directory: &[DirectoryEntry],
    network_addr: &str,
    ctx: &mut dyn Context,
) -> usize {
    if session.state != SessionState::AwaitingTap {
        return 0;
    }
    let mut submits = 0;
    for entry in directory {
        if session.factors.contains(&entry.factor) {
            ctx.send(
                &entry.addr,
                Message::PaymentSubmit(PaymentSubmit::token(session.token.clone())),
            );
            submits += 1;
        }
    }
    ctx.send(
        network_addr,
        Message::TxnRegister(TxnRegister {
            txn_id: session.txn_id,
            session: session.id,
            factors: session.factors.clone(),
        }),
    );
    session.transition(SessionState::FannedOut);
    submits
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Receipt {
    pub session: u64,
    pub txn_id: TxnId,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decline_reason: Option<DeclineReason>,
    pub t_ms: u64,
}

#[derive(Debug, Clone)]
pub struct PosConfig {
    pub pos_id: String,
    pub network_addr: String,
    pub directory: Vec<DirectoryEntry>,
    pub deadline_ms: u64,
    pub margin_ms: u64,
    /// Line-delimited JSON receipts are appended here when set.
    pub receipt_log: Option<PathBuf>,
}

struct Live {
    session: PosSession,
    tapper: String,
}

pub struct PosRole {
    pub config: PosConfig,
    sessions: BTreeMap<u64, Live>,
    baseline: BTreeMap<u64, (String, u64)>,
    next_session: u64,
    receipts: Vec<Receipt>,
}

impl PosRole {
    pub fn new(config: PosConfig) -> Self {
        Self {
            config,
            sessions: BTreeMap::new(),
            baseline: BTreeMap::new(),
            next_session: 0,
            receipts: Vec::new(),
        }
    }

    pub fn receipts(&self) -> &[Receipt] {
        &self.receipts
    }

    pub fn session(&self, id: u64) -> Option<&PosSession> {
        self.sessions.get(&id).map(|l| &l.session)
    }

    pub fn sessions(&self) -> impl Iterator<Item = &PosSession> {
        self.sessions.values().map(|l| &l.session)
    }

    fn new_session_id(&mut self) -> u64 {
        self.next_session += 1;
        self.next_session
    }

    fn finish(&mut self, ctx: &mut dyn Context, id: u64, state: SessionState, decision: Decision) {
        let Some(live) = self.sessions.get_mut(&id) else {
            return;
        };
        if !live.session.transition(state) {
            return;
        }
        let receipt = Receipt {
            session: id,
            txn_id: decision.txn_id,
            verdict: decision.verdict,
            decline_reason: decision.decline_reason.clone(),
            t_ms: ctx.now_ms(),
        };
        if let Some(path) = &self.config.receipt_log {
            let line = serde_json::to_string(&receipt).expect("receipt serializes");
            let written = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .and_then(|mut f| writeln!(f, "{line}"));
            if let Err(e) = written {
                log::warn!("cannot append receipt to {}: {e}", path.display());
            }
        }
        self.receipts.push(receipt);
        let tapper = live.tapper.clone();
        ctx.send(&tapper, Message::Decision(DecisionMsg { session: id, decision }));
        self.prune();
    }

    fn prune(&mut self) {
        while self.sessions.len() > SESSION_CAP {
            let oldest = self
                .sessions
                .iter()
                .find(|(_, l)| l.session.state.is_terminal())
                .map(|(id, _)| *id);
            match oldest {
                Some(id) => {
                    self.sessions.remove(&id);
                }
                None => break,
            }
        }
    }

    fn on_tap(&mut self, ctx: &mut dyn Context, from: &str, token: &[u8]) {
        let id = self.new_session_id();
        let mut session = receive_tap(id, token);
        let malformed = session.state == SessionState::Failed(FailReason::Malformed);
        if !malformed {
            let submits = fan_out(&mut session, &self.config.directory, &self.config.network_addr, ctx);
            log::debug!(
                "{} session {id} txn {} fanned out to {submits} nodes",
                self.config.pos_id,
                session.txn_id
            );
            ctx.set_timer(self.config.deadline_ms + self.config.margin_ms, id);
        }
        let txn_id = session.txn_id;
        self.sessions.insert(
            id,
            Live {
                session,
                tapper: from.to_string(),
            },
        );
        if malformed {
            // Already terminal; reply without a state change.
            let decision = Decision::declined(txn_id, DeclineReason::Malformed);
            ctx.send(from, Message::Decision(DecisionMsg { session: id, decision }));
        }
    }
}

impl Role for PosRole {
    fn on_message(&mut self, ctx: &mut dyn Context, from: &str, msg: Message) {
        match msg {
            Message::PaymentSubmit(PaymentSubmit::Token(submit)) => {
                self.on_tap(ctx, from, &submit.token)
            }
            Message::Decision(DecisionMsg { session, decision }) => {
                let matches = self
                    .sessions
                    .get(&session)
                    .is_some_and(|l| l.session.txn_id == decision.txn_id);
                if !matches {
                    log::debug!("ignoring decision for unknown session {session}");
                    return;
                }
                self.finish(ctx, session, SessionState::Decided(decision.verdict), decision);
            }
            Message::BaselineValidateReq(req) => {
                let id = self.new_session_id();
                self.baseline.insert(id, (from.to_string(), req.session));
                let forwarded = BaselineValidateReq { session: id, ..req };
                ctx.send(&self.config.network_addr, Message::BaselineValidateReq(forwarded));
            }
            Message::BaselineValidateResp(resp) => {
                if let Some((to, client_session)) = self.baseline.remove(&resp.session) {
                    let relayed = BaselineValidateResp {
                        session: client_session,
                        ..resp
                    };
                    ctx.send(&to, Message::BaselineValidateResp(relayed));
                }
            }
            other => log::debug!("pos ignoring {} from {from}", other.msg_type().name()),
        }
    }

    fn on_timer(&mut self, ctx: &mut dyn Context, session: u64) {
        let Some(live) = self.sessions.get(&session) else {
            return;
        };
        if live.session.state == SessionState::FannedOut {
            let decision = Decision::declined(live.session.txn_id, DeclineReason::NoDecision);
            self.finish(ctx, session, SessionState::Failed(FailReason::NoDecision), decision);
        }
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}
