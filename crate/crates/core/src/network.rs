//! Card network: provisions original tokens, validates baseline codes and
//! aggregates node results into the final decision.

use std::any::Any;
use std::collections::{BTreeMap, BTreeSet, VecDeque};

use hmac::{Hmac, Mac};
use rand_core::RngCore;
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use thiserror::Error;

use crate::netsim::{
    BaselineValidateReq, BaselineValidateResp, Context, DecisionMsg, Message, ProvisionReq,
    ProvisionResp, Role, TxnRegister,
};
use crate::nodes::{AuthResult, Reason, Verdict};
use crate::token::{Digest32, FactorTag, SecretToken, TimeStamp, TxnId, WalletId};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProvisionError {
    #[error("wallet {0} is already provisioned")]
    AlreadyProvisioned(WalletId),
    #[error("issuer does not recognise the PAN")]
    UnknownPan,
    #[error("wallet {0} is not provisioned")]
    UnknownWallet(WalletId),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvisionRegistry {
    pub ots: BTreeMap<WalletId, SecretToken>,
    /// Stub issuer table: PANs the issuer will vouch for.
    pub issuer_pans: BTreeSet<String>,
    /// Last four digits of the PAN each wallet was provisioned with.
    #[serde(default)]
    pub linked: BTreeMap<WalletId, String>,
}

impl ProvisionRegistry {
    pub fn with_issuer_pans<I: IntoIterator<Item = String>>(pans: I) -> Self {
        Self {
            issuer_pans: pans.into_iter().collect(),
            ..Self::default()
        }
    }
}

pub fn provision_token(
    pan: &str,
    wallet_id: WalletId,
    registry: &mut ProvisionRegistry,
    rng: &mut dyn RngCore,
) -> Result<SecretToken, ProvisionError> {
    if registry.ots.contains_key(&wallet_id) {
        return Err(ProvisionError::AlreadyProvisioned(wallet_id));
    }
    if !registry.issuer_pans.contains(pan) {
        return Err(ProvisionError::UnknownPan);
    }
    let mut ot = [0u8; 32];
    rng.fill_bytes(&mut ot);
    let ot = SecretToken(ot);
    registry.ots.insert(wallet_id, ot);
    registry
        .linked
        .insert(wallet_id, pan[pan.len().saturating_sub(4)..].to_string());
    Ok(ot)
}

/// Regenerate the baseline code from the registry's copy of the original
/// token and compare in constant time.
pub fn validate_baseline(
    ottc: &Digest32,
    wallet_id: WalletId,
    t: TimeStamp,
    registry: &ProvisionRegistry,
    now: TimeStamp,
    window_s: u64,
) -> Result<bool, ProvisionError> {
    let ot = registry
        .ots
        .get(&wallet_id)
        .ok_or(ProvisionError::UnknownWallet(wallet_id))?;
    let mut mac = Hmac::<Sha256>::new_from_slice(&ot.0).expect("any key length");
    mac.update(&t.encode());
    let matches = mac.verify_slice(&ottc.0).is_ok();
    Ok(matches && now.abs_diff(t) <= window_s)
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PolicyError {
    #[error("factor {0} is both required and optional")]
    Overlap(FactorTag),
    #[error("quorum {quorum} exceeds the {optional} optional factors")]
    QuorumTooLarge { quorum: usize, optional: usize },
    #[error("deadline must be positive")]
    ZeroDeadline,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionPolicy {
    pub required: BTreeSet<FactorTag>,
    #[serde(default)]
    pub optional: BTreeSet<FactorTag>,
    #[serde(default)]
    pub optional_quorum: usize,
    pub deadline_ms: u64,
}

impl Default for DecisionPolicy {
    fn default() -> Self {
        Self {
            required: [FactorTag::FUND, FactorTag::BIO, FactorTag::LOC].into(),
            optional: BTreeSet::new(),
            optional_quorum: 0,
            deadline_ms: 500,
        }
    }
}

impl DecisionPolicy {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if let Some(tag) = self.required.intersection(&self.optional).next() {
            return Err(PolicyError::Overlap(*tag));
        }
        if self.optional_quorum > self.optional.len() {
            return Err(PolicyError::QuorumTooLarge {
                quorum: self.optional_quorum,
                optional: self.optional.len(),
            });
        }
        if self.deadline_ms == 0 {
            return Err(PolicyError::ZeroDeadline);
        }
        Ok(())
    }

    pub fn factors(&self) -> impl Iterator<Item = FactorTag> + '_ {
        self.required.union(&self.optional).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DeclineReason {
    /// A required factor reported a decline.
    Factor { factor: FactorTag, reason: Reason },
    /// A required factor did not report before the deadline.
    Timeout { factor: FactorTag },
    QuorumShortfall { approvals: usize, required: usize },
    /// The transaction was already registered by another session.
    Duplicate,
    /// The POS gave up waiting for the network.
    NoDecision,
    /// The POS could not parse the tapped token.
    Malformed,
}

impl DeclineReason {
    pub fn factor(&self) -> Option<FactorTag> {
        match self {
            DeclineReason::Factor { factor, .. } | DeclineReason::Timeout { factor } => {
                Some(*factor)
            }
            _ => None,
        }
    }

    pub fn code(&self) -> String {
        match self {
            DeclineReason::Factor { reason, .. } => reason.name().to_string(),
            DeclineReason::Timeout { .. } => "TIMEOUT".into(),
            DeclineReason::QuorumShortfall { .. } => "QUORUM_SHORTFALL".into(),
            DeclineReason::Duplicate => "DUPLICATE".into(),
            DeclineReason::NoDecision => "NO_DECISION".into(),
            DeclineReason::Malformed => "MALFORMED".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Contribution {
    pub factor: FactorTag,
    pub verdict: Verdict,
    pub reason: Reason,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Decision {
    pub txn_id: TxnId,
    pub verdict: Verdict,
    pub contributing: Vec<Contribution>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decline_reason: Option<DeclineReason>,
}

impl Decision {
    pub fn declined(txn_id: TxnId, reason: DeclineReason) -> Self {
        Self {
            txn_id,
            verdict: Verdict::Decline,
            contributing: Vec::new(),
            decline_reason: Some(reason),
        }
    }
}

/// Apply a policy to the per-factor reasons received so far; factors with no
/// entry are treated as not having reported.
pub fn evaluate_policy(
    policy: &DecisionPolicy,
    reported: &BTreeMap<FactorTag, Reason>,
) -> (Verdict, Option<DeclineReason>) {
    for factor in &policy.required {
        match reported.get(factor) {
            Some(Reason::Ok) => {}
            Some(reason) => {
                return (
                    Verdict::Decline,
                    Some(DeclineReason::Factor {
                        factor: *factor,
                        reason: *reason,
                    }),
                )
            }
            None => return (Verdict::Decline, Some(DeclineReason::Timeout { factor: *factor })),
        }
    }
    let approvals = policy
        .optional
        .iter()
        .filter(|f| reported.get(f) == Some(&Reason::Ok))
        .count();
    if approvals < policy.optional_quorum {
        return (
            Verdict::Decline,
            Some(DeclineReason::QuorumShortfall {
                approvals,
                required: policy.optional_quorum,
            }),
        );
    }
    (Verdict::Approve, None)
}

/// Outcome of [`evaluate_policy`] if it no longer depends on factors that
/// have yet to report.
pub fn settled_outcome(
    policy: &DecisionPolicy,
    reported: &BTreeMap<FactorTag, Reason>,
) -> Option<(Verdict, Option<DeclineReason>)> {
    let mut best = reported.clone();
    let mut worst = reported.clone();
    for f in policy.factors() {
        best.entry(f).or_insert(Reason::Ok);
        worst.entry(f).or_insert(Reason::Malformed);
    }
    let best = evaluate_policy(policy, &best);
    let worst = evaluate_policy(policy, &worst);
    (best.0 == worst.0).then_some(best)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeKey {
    pub factor: FactorTag,
    pub mac_key: SecretToken,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CollectOutcome {
    Recorded,
    /// Same factor already reported; first write wins.
    Ignored,
    Forged,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Registration {
    at_ms: u64,
    reply_to: String,
    session: u64,
    factors: BTreeSet<FactorTag>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct PendingTxn {
    registration: Option<Registration>,
    results: BTreeMap<FactorTag, AuthResult>,
    extra_results: u32,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NetworkError {
    #[error("unknown transaction {0}")]
    UnknownTxn(TxnId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegisterOutcome {
    Registered,
    /// Same session registered again (link duplicate).
    Repeat,
    /// Another session already owns this transaction.
    Duplicate,
}

const DECIDED_CAP: usize = 65_536;

/// Results per transaction, before and after the decision.
#[derive(Debug, Default)]
pub struct PendingTable {
    pending: BTreeMap<TxnId, PendingTxn>,
    decided: BTreeMap<TxnId, (String, u64)>,
    decided_order: VecDeque<TxnId>,
    extra_results: BTreeMap<TxnId, u32>,
    forged: u64,
}

impl PendingTable {
    pub fn forged_results(&self) -> u64 {
        self.forged
    }

    pub fn extra_results(&self, txn_id: &TxnId) -> u32 {
        self.extra_results.get(txn_id).copied().unwrap_or(0)
            + self.pending.get(txn_id).map_or(0, |p| p.extra_results)
    }

    pub fn is_pending(&self, txn_id: &TxnId) -> bool {
        self.pending
            .get(txn_id)
            .is_some_and(|p| p.registration.is_some())
    }

    pub fn register(&mut self, reg: &TxnRegister, reply_to: &str, now_ms: u64) -> RegisterOutcome {
        let owner = |r: &str, s: u64| r == reply_to && s == reg.session;
        if let Some((r, s)) = self.decided.get(&reg.txn_id) {
            return if owner(r, *s) {
                RegisterOutcome::Repeat
            } else {
                RegisterOutcome::Duplicate
            };
        }
        let entry = self.pending.entry(reg.txn_id).or_default();
        match &entry.registration {
            Some(r) if owner(&r.reply_to, r.session) => RegisterOutcome::Repeat,
            Some(_) => RegisterOutcome::Duplicate,
            None => {
                entry.registration = Some(Registration {
                    at_ms: now_ms,
                    reply_to: reply_to.to_string(),
                    session: reg.session,
                    factors: reg.factors.iter().copied().collect(),
                });
                RegisterOutcome::Registered
            }
        }
    }

    /// Verify a node result and record it under its transaction.
    pub fn collect_result(
        &mut self,
        result: AuthResult,
        keys: &BTreeMap<String, NodeKey>,
    ) -> CollectOutcome {
        let authentic = keys
            .get(&result.node_id)
            .is_some_and(|k| k.factor == result.factor && result.verify(&k.mac_key));
        if !authentic {
            self.forged += 1;
            return CollectOutcome::Forged;
        }
        if self.decided.contains_key(&result.txn_id) {
            *self.extra_results.entry(result.txn_id).or_default() += 1;
            return CollectOutcome::Ignored;
        }
        let entry = self.pending.entry(result.txn_id).or_default();
        if entry.results.contains_key(&result.factor) {
            entry.extra_results += 1;
            return CollectOutcome::Ignored;
        }
        entry.results.insert(result.factor, result);
        CollectOutcome::Recorded
    }

    fn reported(&self, txn_id: &TxnId, policy: &DecisionPolicy) -> BTreeMap<FactorTag, Reason> {
        let Some(p) = self.pending.get(txn_id) else {
            return BTreeMap::new();
        };
        let mut reported: BTreeMap<FactorTag, Reason> =
            p.results.iter().map(|(f, r)| (*f, r.reason)).collect();
        if let Some(reg) = &p.registration {
            // A required factor the token does not carry will never be
            // verified by anyone.
            for f in &policy.required {
                if !reg.factors.contains(f) {
                    reported.entry(*f).or_insert(Reason::Malformed);
                }
            }
        }
        reported
    }

    /// True once the verdict can no longer change.
    pub fn is_settled(&self, txn_id: &TxnId, policy: &DecisionPolicy) -> bool {
        self.is_pending(txn_id) && settled_outcome(policy, &self.reported(txn_id, policy)).is_some()
    }

    /// Render the decision and retire the transaction. Returns the decision
    /// together with the registering session's reply address and id.
    pub fn decide(
        &mut self,
        txn_id: &TxnId,
        policy: &DecisionPolicy,
    ) -> Result<(Decision, String, u64), NetworkError> {
        if !self.is_pending(txn_id) {
            return Err(NetworkError::UnknownTxn(*txn_id));
        }
        let reported = self.reported(txn_id, policy);
        let (verdict, decline_reason) =
            settled_outcome(policy, &reported).unwrap_or_else(|| evaluate_policy(policy, &reported));
        let p = self.pending.remove(txn_id).expect("checked above");
        let reg = p.registration.expect("checked above");
        let decision = Decision {
            txn_id: *txn_id,
            verdict,
            contributing: p
                .results
                .values()
                .map(|r| Contribution {
                    factor: r.factor,
                    verdict: r.verdict,
                    reason: r.reason,
                })
                .collect(),
            decline_reason,
        };
        if p.extra_results > 0 {
            self.extra_results.insert(*txn_id, p.extra_results);
        }
        self.decided
            .insert(*txn_id, (reg.reply_to.clone(), reg.session));
        self.decided_order.push_back(*txn_id);
        while self.decided_order.len() > DECIDED_CAP {
            if let Some(old) = self.decided_order.pop_front() {
                self.decided.remove(&old);
                self.extra_results.remove(&old);
            }
        }
        Ok((decision, reg.reply_to, reg.session))
    }

    pub fn registered_at(&self, txn_id: &TxnId) -> Option<u64> {
        self.pending.get(txn_id)?.registration.as_ref().map(|r| r.at_ms)
    }
}

/// Persisted part of the card network.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkState {
    pub registry: ProvisionRegistry,
}

pub struct CardNetworkRole {
    pub state: NetworkState,
    pub policy: DecisionPolicy,
    pub window_s: u64,
    node_keys: BTreeMap<String, NodeKey>,
    table: PendingTable,
    timers: BTreeMap<u64, TxnId>,
    next_timer: u64,
    rng: Box<dyn RngCore + Send>,
    decisions: Vec<(u64, Decision)>,
}

impl CardNetworkRole {
    pub fn new(
        state: NetworkState,
        policy: DecisionPolicy,
        window_s: u64,
        node_keys: BTreeMap<String, NodeKey>,
        rng: Box<dyn RngCore + Send>,
    ) -> Self {
        Self {
            state,
            policy,
            window_s,
            node_keys,
            table: PendingTable::default(),
            timers: BTreeMap::new(),
            next_timer: 0,
            rng,
            decisions: Vec::new(),
        }
    }

    pub fn table(&self) -> &PendingTable {
        &self.table
    }

    /// Every decision sent, with the session it answered.
    pub fn decisions(&self) -> &[(u64, Decision)] {
        &self.decisions
    }

    fn send_decision(&mut self, ctx: &mut dyn Context, to: &str, session: u64, decision: Decision) {
        log::debug!(
            "decision {} {} {:?}",
            decision.txn_id,
            decision.verdict,
            decision.decline_reason
        );
        self.decisions.push((session, decision.clone()));
        ctx.send(to, Message::Decision(DecisionMsg { session, decision }));
    }

    fn try_settle(&mut self, ctx: &mut dyn Context, txn_id: &TxnId, deadline_passed: bool) {
        if !(deadline_passed || self.table.is_settled(txn_id, &self.policy)) {
            return;
        }
        if let Ok((decision, to, session)) = self.table.decide(txn_id, &self.policy) {
            self.send_decision(ctx, &to, session, decision);
        }
    }

    fn on_register(&mut self, ctx: &mut dyn Context, from: &str, reg: TxnRegister) {
        match self.table.register(&reg, from, ctx.now_ms()) {
            RegisterOutcome::Registered => {
                self.next_timer += 1;
                self.timers.insert(self.next_timer, reg.txn_id);
                ctx.set_timer(self.policy.deadline_ms, self.next_timer);
                self.try_settle(ctx, &reg.txn_id, false);
            }
            RegisterOutcome::Repeat => {}
            RegisterOutcome::Duplicate => {
                log::info!("duplicate registration of {}", reg.txn_id);
                let decision = Decision::declined(reg.txn_id, DeclineReason::Duplicate);
                self.send_decision(ctx, from, reg.session, decision);
            }
        }
    }

    fn on_provision(&mut self, req: ProvisionReq) -> ProvisionResp {
        match provision_token(&req.pan, req.wallet_id, &mut self.state.registry, self.rng.as_mut()) {
            Ok(ot) => ProvisionResp {
                wallet_id: req.wallet_id,
                ot: Some(ot),
                error: None,
            },
            Err(e) => ProvisionResp {
                wallet_id: req.wallet_id,
                ot: None,
                error: Some(e.to_string()),
            },
        }
    }

    fn on_baseline(&self, now_ms: u64, req: BaselineValidateReq) -> BaselineValidateResp {
        let outcome = validate_baseline(
            &req.ottc,
            req.wallet_id,
            req.t,
            &self.state.registry,
            TimeStamp::from_millis(now_ms),
            self.window_s,
        );
        BaselineValidateResp {
            wallet_id: req.wallet_id,
            t: req.t,
            session: req.session,
            valid: outcome.as_ref().is_ok_and(|v| *v),
            error: outcome.err().map(|e| e.to_string()),
        }
    }
}

impl Role for CardNetworkRole {
    fn on_message(&mut self, ctx: &mut dyn Context, from: &str, msg: Message) {
        match msg {
            Message::ProvisionReq(req) => {
                let resp = self.on_provision(req);
                ctx.send(from, Message::ProvisionResp(resp));
            }
            Message::TxnRegister(reg) => self.on_register(ctx, from, reg),
            Message::AuthResult(result) => {
                let txn_id = result.txn_id;
                match self.table.collect_result(result, &self.node_keys) {
                    CollectOutcome::Recorded => self.try_settle(ctx, &txn_id, false),
                    CollectOutcome::Ignored => {}
                    CollectOutcome::Forged => log::warn!("discarding forged result from {from}"),
                }
            }
            Message::BaselineValidateReq(req) => {
                let resp = self.on_baseline(ctx.now_ms(), req);
                ctx.send(from, Message::BaselineValidateResp(resp));
            }
            other => log::debug!("network ignoring {} from {from}", other.msg_type().name()),
        }
    }

    fn on_timer(&mut self, ctx: &mut dyn Context, timer_id: u64) {
        if let Some(txn_id) = self.timers.remove(&timer_id) {
            self.try_settle(ctx, &txn_id, true);
        }
    }

    fn state_json(&self) -> Option<serde_json::Value> {
        Some(serde_json::to_value(&self.state).expect("network state serializes"))
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}
