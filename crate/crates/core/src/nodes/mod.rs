//! Authentication nodes. Each node receives the whole payment token, checks
//! only its own entry against what the wallet enrolled, and reports a
//! MACed [`AuthResult`] to the card network.
//!
//! Check order is fixed for every node: regeneration (or signature), then
//! freshness, then replay, then any node-specific resource check (funds).
//! The first failing check determines the reason code.

mod bio;
mod ext;
mod fund;
mod loc;
mod replay;

pub use bio::{bio_verify, BioNode, BioRecord};
pub use ext::{
    always_approve, always_decline, register_extension_verifier, shared_secret_verifier,
    ExtensionError, ExtensionNode, ExtensionRegistry, ExtensionStore, ExtensionVerifier,
};
pub use fund::{fund_verify, AccountLedger, FundNode, FundRecord, Hold, LedgerError};
pub use loc::{
    ingest_location_fix, loc_verify, DeviceTrack, Fix, LocNode, LocRecord, LocationError,
    LocationStore, DEFAULT_HISTORY_CAP, DEFAULT_TOLERANCE_CELLS,
};
pub use replay::{FreshnessGuard, ReplayCache};

use std::any::Any;
use std::collections::BTreeMap;
use std::fmt;

use hmac::{Hmac, Mac};
use rand_core::RngCore;
use serde::{Deserialize, Serialize};
use sha2::Sha256;

use crate::netsim::{Context, EnrollReq, EnrollResp, LocationFixMsg, Message, PaymentSubmit, Role};
use crate::token::{
    parse_payment_token, BiometricTemplate, Digest32, FactorTag, PaymentToken, PublicKey,
    SecretToken, TimeStamp, TxnId, WalletId,
};

pub const DEFAULT_WINDOW_S: u64 = 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Approve,
    Decline,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Approve => "APPROVE",
            Verdict::Decline => "DECLINE",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Reason {
    Ok,
    BadSignature,
    Stale,
    Duplicate,
    InsufficientFunds,
    Mismatch,
    NotEnrolled,
    Malformed,
}

impl Reason {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            Reason::Ok => "OK",
            Reason::BadSignature => "BAD_SIGNATURE",
            Reason::Stale => "STALE",
            Reason::Duplicate => "DUPLICATE",
            Reason::InsufficientFunds => "INSUFFICIENT_FUNDS",
            Reason::Mismatch => "MISMATCH",
            Reason::NotEnrolled => "NOT_ENROLLED",
            Reason::Malformed => "MALFORMED",
        }
    }

    pub fn verdict(self) -> Verdict {
        if self == Reason::Ok {
            Verdict::Approve
        } else {
            Verdict::Decline
        }
    }
}

impl fmt::Display for Reason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A failed check: reason code plus optional human-readable detail.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rejection {
    pub reason: Reason,
    pub detail: Option<String>,
}

impl Rejection {
    pub fn new(reason: Reason) -> Self {
        Self {
            reason,
            detail: None,
        }
    }

    pub fn with_detail(reason: Reason, detail: impl Into<String>) -> Self {
        Self {
            reason,
            detail: Some(detail.into()),
        }
    }
}

pub type Outcome = Result<(), Rejection>;

/// One node's verdict on one transaction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuthResult {
    pub txn_id: TxnId,
    pub factor: FactorTag,
    pub verdict: Verdict,
    pub reason: Reason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
    pub node_id: String,
    pub result_mac: Digest32,
}

type HmacSha256 = Hmac<Sha256>;

impl AuthResult {
    pub fn signed(
        txn_id: TxnId,
        factor: FactorTag,
        outcome: &Outcome,
        node_id: &str,
        mac_key: &SecretToken,
    ) -> Self {
        let (reason, detail) = match outcome {
            Ok(()) => (Reason::Ok, None),
            Err(r) => (r.reason, r.detail.clone()),
        };
        let mut result = Self {
            txn_id,
            factor,
            verdict: reason.verdict(),
            reason,
            detail,
            node_id: node_id.to_string(),
            result_mac: Digest32([0; 32]),
        };
        result.result_mac = crate::token::hmac32(&mac_key.0, &result.canonical_bytes());
        result
    }

    /// `txn_id | factor | verdict | reason | len(node_id) | node_id | len(detail) | detail`
    /// with one-byte lengths (longer strings are truncated to 255 bytes).
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let node = &self.node_id.as_bytes()[..self.node_id.len().min(255)];
        let detail = self.detail.as_deref().unwrap_or("").as_bytes();
        let detail = &detail[..detail.len().min(255)];
        let mut out = Vec::with_capacity(22 + node.len() + detail.len());
        out.extend_from_slice(&self.txn_id.0);
        out.push(self.factor.0);
        out.push(self.verdict as u8);
        out.push(self.reason.code());
        out.push(node.len() as u8);
        out.extend_from_slice(node);
        out.push(detail.len() as u8);
        out.extend_from_slice(detail);
        out
    }

    /// MAC check (constant time) plus the APPROVE-iff-OK invariant.
    pub fn verify(&self, mac_key: &SecretToken) -> bool {
        if (self.verdict == Verdict::Approve) != (self.reason == Reason::Ok) {
            return false;
        }
        let mut mac = HmacSha256::new_from_slice(&mac_key.0).expect("any key length");
        mac.update(&self.canonical_bytes());
        mac.verify_slice(&self.result_mac.0).is_ok()
    }
}

/// What a wallet submits to a node at enrollment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnrollMaterial {
    Fund {
        public_key: PublicKey,
        account_id: String,
    },
    Biometric {
        template: BiometricTemplate,
    },
    Location {
        device_id: String,
    },
    Extension {},
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[serde(rename_all = "snake_case")]
pub enum EnrollFailure {
    #[error("factor already enrolled for this wallet")]
    Duplicate,
    #[error("unknown account")]
    UnknownAccount,
    #[error("node does not verify this factor")]
    WrongFactor,
    #[error("enrollment material does not match the factor")]
    UnsupportedMaterial,
    #[error("invalid public key")]
    InvalidKey,
}

pub type Records<R> = BTreeMap<WalletId, R>;

/// Issue a fresh pre-shared token and store the record built from it.
pub fn issue_preshared<R>(
    records: &mut Records<R>,
    wallet_id: WalletId,
    rng: &mut dyn RngCore,
    make_record: impl FnOnce(SecretToken) -> R,
) -> Result<SecretToken, EnrollFailure> {
    if records.contains_key(&wallet_id) {
        return Err(EnrollFailure::Duplicate);
    }
    let mut secret = [0u8; 32];
    rng.fill_bytes(&mut secret);
    let secret = SecretToken(secret);
    records.insert(wallet_id, make_record(secret));
    Ok(secret)
}

/// Factor-specific node logic, wrapped into a [`Role`] by [`AuthNodeRole`].
pub trait FactorNode: Send + 'static {
    fn factor(&self) -> FactorTag;

    fn verify(&mut self, txn_id: TxnId, token: &PaymentToken, now: TimeStamp) -> Outcome;

    /// Returns the pre-shared token issued to the wallet, if the factor uses one.
    fn enroll(
        &mut self,
        wallet_id: WalletId,
        material: &EnrollMaterial,
        rng: &mut dyn RngCore,
    ) -> Result<Option<SecretToken>, EnrollFailure>;

    /// Location reports; `None` for nodes that do not track devices.
    fn ingest_fix(&mut self, _fix: &LocationFixMsg) -> Option<Result<(), LocationError>> {
        None
    }

    fn state_json(&self) -> serde_json::Value;
}

/// Identity and network wiring shared by every node.
#[derive(Debug, Clone)]
pub struct NodeIdentity {
    pub node_id: String,
    pub mac_key: SecretToken,
    pub network_addr: String,
}

pub struct AuthNodeRole<N> {
    pub identity: NodeIdentity,
    pub node: N,
    rng: Box<dyn RngCore + Send>,
    metrics: BTreeMap<Reason, u64>,
}

impl<N: FactorNode> AuthNodeRole<N> {
    pub fn new(identity: NodeIdentity, node: N, rng: Box<dyn RngCore + Send>) -> Self {
        Self {
            identity,
            node,
            rng,
            metrics: BTreeMap::new(),
        }
    }

    /// Verify one serialized token and produce the signed result.
    pub fn process(&mut self, token_bytes: &[u8], now: TimeStamp) -> AuthResult {
        let txn_id = TxnId::of_token(token_bytes);
        let outcome = match parse_payment_token(token_bytes) {
            Ok(token) => self.node.verify(txn_id, &token, now),
            Err(e) => Err(Rejection::with_detail(Reason::Malformed, e.to_string())),
        };
        let result = AuthResult::signed(
            txn_id,
            self.node.factor(),
            &outcome,
            &self.identity.node_id,
            &self.identity.mac_key,
        );
        *self.metrics.entry(result.reason).or_default() += 1;
        result
    }

    pub fn metrics(&self) -> &BTreeMap<Reason, u64> {
        &self.metrics
    }

    fn handle_enroll(&mut self, req: EnrollReq) -> EnrollResp {
        let outcome = if req.factor != self.node.factor() {
            Err(EnrollFailure::WrongFactor)
        } else {
            self.node.enroll(req.wallet_id, &req.material, self.rng.as_mut())
        };
        match outcome {
            Ok(preshared) => EnrollResp {
                wallet_id: req.wallet_id,
                factor: req.factor,
                preshared,
                error: None,
            },
            Err(e) => EnrollResp {
                wallet_id: req.wallet_id,
                factor: req.factor,
                preshared: None,
                error: Some(e),
            },
        }
    }
}

impl<N: FactorNode> Role for AuthNodeRole<N> {
    fn on_message(&mut self, ctx: &mut dyn Context, from: &str, msg: Message) {
        match msg {
            Message::PaymentSubmit(PaymentSubmit::Token(submit)) => {
                let now = TimeStamp::from_millis(ctx.now_ms());
                let result = self.process(&submit.token, now);
                log::debug!(
                    "{} {} {} {}",
                    self.identity.node_id,
                    result.txn_id,
                    result.verdict,
                    result.reason
                );
                ctx.send(&self.identity.network_addr, Message::AuthResult(result));
            }
            Message::EnrollReq(req) => {
                let resp = self.handle_enroll(req);
                ctx.send(from, Message::EnrollResp(resp));
            }
            Message::LocationFix(fix) => {
                if let Some(outcome) = self.node.ingest_fix(&fix) {
                    if let Err(e) = &outcome {
                        log::info!("{}: fix rejected: {e}", self.identity.node_id);
                    }
                    let ack = LocationFixMsg {
                        accepted: Some(outcome.is_ok()),
                        ..fix
                    };
                    ctx.send(from, Message::LocationFix(ack));
                }
            }
            other => log::debug!(
                "{}: ignoring {} from {from}",
                self.identity.node_id,
                other.msg_type().name()
            ),
        }
    }

    fn state_json(&self) -> Option<serde_json::Value> {
        Some(self.node.state_json())
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}
