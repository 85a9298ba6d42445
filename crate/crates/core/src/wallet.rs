//! Digital wallet: card provisioning, per-factor enrollment and payment
//! token assembly.

use std::any::Any;
use std::collections::{BTreeMap, VecDeque};
use std::path::Path;

use ed25519_dalek::SigningKey;
use rand_core::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::deploy::{load_json, save_json_atomic, StoreError};
use crate::netsim::{
    Context, DecisionMsg, EnrollReq, LocationFixMsg, Message, PayIntent, PaymentSubmit,
    ProvisionReq, RequestChannel, Role, TransportError,
};
use crate::network::{Decision, DeclineReason};
use crate::nodes::{EnrollFailure, EnrollMaterial};
use crate::token::{
    assemble_payment_token, build_biometric_token, build_extension_token, build_fund_token,
    build_location_token, ottc_baseline, AmountMinor, BiometricTemplate, Digest32, FactorTag,
    GeoCell, PublicKey, SecretToken, TimeStamp, TokenError, TxnId, WalletId,
};

#[derive(Debug, Error)]
pub enum WalletError {
    #[error("PAN must be 16-19 digits with a valid check digit")]
    InvalidPan,
    #[error("wallet is already provisioned")]
    AlreadyProvisioned,
    #[error("provisioning declined: {0}")]
    ProvisionDeclined(String),
    #[error("enrollment of {factor} rejected: {failure}")]
    EnrollRejected {
        factor: FactorTag,
        failure: EnrollFailure,
    },
    #[error("no enrollment for factor {0}")]
    MissingEnrollment(FactorTag),
    #[error("wallet has not been provisioned with a card")]
    NotProvisioned,
    #[error("unexpected {0} reply")]
    UnexpectedReply(&'static str),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Token(#[from] TokenError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl WalletError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, WalletError::Transport(e) if e.is_retryable())
    }
}

/// Luhn check over a 16-19 digit PAN.
pub fn luhn_valid(pan: &str) -> bool {
    if !(16..=19).contains(&pan.len()) || !pan.bytes().all(|b| b.is_ascii_digit()) {
        return false;
    }
    let sum: u32 = pan
        .bytes()
        .rev()
        .enumerate()
        .map(|(i, b)| {
            let d = u32::from(b - b'0');
            if i % 2 == 1 {
                let x = d * 2;
                if x > 9 {
                    x - 9
                } else {
                    x
                }
            } else {
                d
            }
        })
        .sum();
    sum.is_multiple_of(10)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WalletState {
    pub wallet_id: WalletId,
    /// Ed25519 seed of the wallet's signing key.
    pub signing_seed: SecretToken,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ot: Option<SecretToken>,
    #[serde(default)]
    pub preshared: BTreeMap<FactorTag, SecretToken>,
    #[serde(default)]
    pub fund_registered: bool,
    pub enrolled_template: BiometricTemplate,
    pub device_id: String,
    pub account_id: String,
}

/// What the device captured at the moment of payment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CaptureInputs {
    pub biometric_reading: BiometricTemplate,
    pub location_fix: GeoCell,
    pub amount: AmountMinor,
    pub t: TimeStamp,
}

impl WalletState {
    pub fn new(
        rng: &mut dyn RngCore,
        enrolled_template: BiometricTemplate,
        device_id: &str,
        account_id: &str,
    ) -> Self {
        let mut id = [0u8; 16];
        rng.fill_bytes(&mut id);
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        Self {
            wallet_id: WalletId(id),
            signing_seed: SecretToken(seed),
            ot: None,
            preshared: BTreeMap::new(),
            fund_registered: false,
            enrolled_template,
            device_id: device_id.to_string(),
            account_id: account_id.to_string(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, WalletError> {
        Ok(load_json(path)?)
    }

    /// Written atomically with owner-only permissions: the file holds secrets.
    pub fn save(&self, path: &Path) -> Result<(), WalletError> {
        Ok(save_json_atomic(path, self, true)?)
    }

    pub fn signing_key(&self) -> SigningKey {
        SigningKey::from_bytes(&self.signing_seed.0)
    }

    pub fn public_key(&self) -> PublicKey {
        PublicKey::from(&self.signing_key().verifying_key())
    }

    pub fn is_enrolled(&self, factor: FactorTag) -> bool {
        if factor == FactorTag::FUND {
            self.fund_registered
        } else {
            self.preshared.contains_key(&factor)
        }
    }

    /// Every factor the wallet can currently attach, ascending.
    pub fn enrolled_factors(&self) -> Vec<FactorTag> {
        let mut out: Vec<FactorTag> = self.fund_registered.then_some(FactorTag::FUND).into_iter().collect();
        out.extend(self.preshared.keys().copied());
        out
    }

    pub fn provision_card(
        &mut self,
        pan: &str,
        network_addr: &str,
        chan: &mut dyn RequestChannel,
    ) -> Result<SecretToken, WalletError> {
        if !luhn_valid(pan) {
            return Err(WalletError::InvalidPan);
        }
        if self.ot.is_some() {
            return Err(WalletError::AlreadyProvisioned);
        }
        let reply = chan.request(
            network_addr,
            Message::ProvisionReq(ProvisionReq {
                wallet_id: self.wallet_id,
                pan: pan.to_string(),
            }),
        )?;
        let Message::ProvisionResp(resp) = reply else {
            return Err(WalletError::UnexpectedReply(reply.msg_type().name()));
        };
        match (resp.ot, resp.error) {
            (Some(ot), None) => {
                self.ot = Some(ot);
                Ok(ot)
            }
            (_, err) => Err(WalletError::ProvisionDeclined(
                err.unwrap_or_else(|| "no token in response".into()),
            )),
        }
    }

    pub fn enrollment_material(&self, factor: FactorTag) -> EnrollMaterial {
        match factor {
            FactorTag::FUND => EnrollMaterial::Fund {
                public_key: self.public_key(),
                account_id: self.account_id.clone(),
            },
            FactorTag::BIO => EnrollMaterial::Biometric {
                template: self.enrolled_template,
            },
            FactorTag::LOC => EnrollMaterial::Location {
                device_id: self.device_id.clone(),
            },
            _ => EnrollMaterial::Extension {},
        }
    }

    /// Enroll with one node. FUND registration returns `None`; every other
    /// factor returns the pre-shared token now stored in the wallet.
    pub fn enroll_factor(
        &mut self,
        factor: FactorTag,
        node_addr: &str,
        chan: &mut dyn RequestChannel,
    ) -> Result<Option<SecretToken>, WalletError> {
        let reply = chan.request(
            node_addr,
            Message::EnrollReq(EnrollReq {
                wallet_id: self.wallet_id,
                factor,
                material: self.enrollment_material(factor),
            }),
        )?;
        let Message::EnrollResp(resp) = reply else {
            return Err(WalletError::UnexpectedReply(reply.msg_type().name()));
        };
        if let Some(failure) = resp.error {
            return Err(WalletError::EnrollRejected { factor, failure });
        }
        if factor == FactorTag::FUND {
            self.fund_registered = true;
            return Ok(None);
        }
        let ps = resp.preshared.ok_or(WalletError::UnexpectedReply("EnrollResp"))?;
        self.preshared.insert(factor, ps);
        Ok(Some(ps))
    }

    /// Provision if needed, then enroll with every listed node the wallet
    /// is not yet enrolled with.
    pub fn enroll_all(
        &mut self,
        pan: &str,
        network_addr: &str,
        nodes: &[(FactorTag, String)],
        chan: &mut dyn RequestChannel,
    ) -> Result<(), WalletError> {
        if self.ot.is_none() {
            self.provision_card(pan, network_addr, chan)?;
        }
        for (factor, addr) in nodes {
            if !self.is_enrolled(*factor) {
                self.enroll_factor(*factor, addr, chan)?;
            }
        }
        Ok(())
    }

    /// Report the device's current location to the location node.
    pub fn report_fix(
        &self,
        cell: GeoCell,
        t: TimeStamp,
        loc_addr: &str,
        chan: &mut dyn RequestChannel,
    ) -> Result<bool, WalletError> {
        let reply = chan.request(
            loc_addr,
            Message::LocationFix(LocationFixMsg {
                device_id: self.device_id.clone(),
                cell,
                t,
                accepted: None,
            }),
        )?;
        match reply {
            Message::LocationFix(ack) => Ok(ack.accepted.unwrap_or(false)),
            other => Err(WalletError::UnexpectedReply(other.msg_type().name())),
        }
    }

    /// Assemble the composite token for `factors`, all bound to `inputs.t`.
    pub fn initiate_payment(
        &self,
        inputs: &CaptureInputs,
        factors: &[FactorTag],
    ) -> Result<Vec<u8>, WalletError> {
        if self.ot.is_none() {
            return Err(WalletError::NotProvisioned);
        }
        let t = inputs.t;
        let mut entries = Vec::with_capacity(factors.len());
        for &factor in factors {
            let value = match factor {
                FactorTag::FUND => {
                    if !self.fund_registered {
                        return Err(WalletError::MissingEnrollment(factor));
                    }
                    build_fund_token(inputs.amount, t, &self.signing_key())
                        .to_bytes()
                        .to_vec()
                }
                _ => {
                    let ps = self
                        .preshared
                        .get(&factor)
                        .ok_or(WalletError::MissingEnrollment(factor))?;
                    let digest = match factor {
                        FactorTag::BIO => build_biometric_token(&inputs.biometric_reading, t, ps),
                        FactorTag::LOC => build_location_token(&inputs.location_fix, t, ps)?,
                        _ => build_extension_token(factor, ps, t),
                    };
                    digest.0.to_vec()
                }
            };
            entries.push((factor, value));
        }
        Ok(assemble_payment_token(self.wallet_id, t, &entries)?)
    }

    /// Baseline one-time code for time `t`.
    pub fn baseline_ottc(&self, t: TimeStamp) -> Result<Digest32, WalletError> {
        let ot = self.ot.as_ref().ok_or(WalletError::NotProvisioned)?;
        Ok(ottc_baseline(ot, t))
    }
}

/// A wallet served as a process: accepts pay intents, builds the token from
/// the captured inputs and taps the POS.
pub struct WalletRole {
    pub state: WalletState,
    pub pos_addr: String,
    waiting: BTreeMap<TxnId, VecDeque<String>>,
}

impl WalletRole {
    pub fn new(state: WalletState, pos_addr: &str) -> Self {
        Self {
            state,
            pos_addr: pos_addr.to_string(),
            waiting: BTreeMap::new(),
        }
    }

    fn on_intent(&mut self, ctx: &mut dyn Context, from: &str, intent: PayIntent) {
        let t = TimeStamp::from_millis(ctx.now_ms()).offset(intent.clock_skew_s);
        let inputs = CaptureInputs {
            biometric_reading: intent.biometric,
            location_fix: intent.cell,
            amount: intent.amount,
            t,
        };
        let factors = intent
            .factors
            .unwrap_or_else(|| self.state.enrolled_factors());
        match self.state.initiate_payment(&inputs, &factors) {
            Ok(token) => {
                let txn_id = TxnId::of_token(&token);
                self.waiting.entry(txn_id).or_default().push_back(from.to_string());
                ctx.send(&self.pos_addr, Message::PaymentSubmit(PaymentSubmit::token(token)));
            }
            Err(e) => {
                log::warn!("cannot build payment token: {e}");
                let decision = Decision::declined(TxnId([0; 16]), DeclineReason::Malformed);
                ctx.send(from, Message::Decision(DecisionMsg { session: 0, decision }));
            }
        }
    }
}

impl Role for WalletRole {
    fn on_message(&mut self, ctx: &mut dyn Context, from: &str, msg: Message) {
        match msg {
            Message::PaymentSubmit(PaymentSubmit::Capture(c)) => self.on_intent(ctx, from, c.capture),
            Message::Decision(d) => {
                let requester = self
                    .waiting
                    .get_mut(&d.decision.txn_id)
                    .and_then(VecDeque::pop_front);
                if self.waiting.get(&d.decision.txn_id).is_some_and(VecDeque::is_empty) {
                    self.waiting.remove(&d.decision.txn_id);
                }
                match requester {
                    Some(to) => ctx.send(&to, Message::Decision(d)),
                    None => log::debug!("decision for unknown txn {}", d.decision.txn_id),
                }
            }
            other => log::debug!("wallet ignoring {} from {from}", other.msg_type().name()),
        }
    }

    fn state_json(&self) -> Option<serde_json::Value> {
        serde_json::to_value(&self.state).ok()
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}
