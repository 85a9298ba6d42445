use std::collections::BTreeMap;

use rand_core::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{EnrollFailure, EnrollMaterial, FactorNode, FreshnessGuard, Outcome, Reason, Records, Rejection};
use crate::token::{
    verify_fund_token, AmountMinor, FactorTag, FundCheckError, FundToken, PaymentToken, PublicKey,
    SecretToken, TimeStamp, TxnId, WalletId,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FundRecord {
    pub account_id: String,
    pub public_key: PublicKey,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hold {
    pub account_id: String,
    pub amount: AmountMinor,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LedgerError {
    #[error("unknown account {0}")]
    UnknownAccount(String),
    #[error("currency {got} does not match account currency {expected}")]
    CurrencyMismatch { expected: String, got: String },
    #[error("insufficient funds: available {available}, requested {requested}")]
    InsufficientFunds { available: u64, requested: u64 },
    #[error("a hold already exists for this transaction")]
    HoldExists,
}

/// Account balances with per-transaction holds. A hold reserves funds
/// without moving them; `capture` debits, `void` releases.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccountLedger {
    balances: BTreeMap<String, AmountMinor>,
    holds: BTreeMap<TxnId, Hold>,
}

impl AccountLedger {
    pub fn open_account(&mut self, account_id: impl Into<String>, balance: AmountMinor) {
        self.balances.insert(account_id.into(), balance);
    }

    pub fn has_account(&self, account_id: &str) -> bool {
        self.balances.contains_key(account_id)
    }

    pub fn balance(&self, account_id: &str) -> Option<AmountMinor> {
        self.balances.get(account_id).copied()
    }

    pub fn held(&self, account_id: &str) -> u64 {
        self.holds
            .values()
            .filter(|h| h.account_id == account_id)
            .map(|h| h.amount.minor_units)
            .sum()
    }

    pub fn available(&self, account_id: &str) -> Option<u64> {
        let balance = self.balances.get(account_id)?;
        Some(balance.minor_units.saturating_sub(self.held(account_id)))
    }

    pub fn hold(&self, txn_id: &TxnId) -> Option<&Hold> {
        self.holds.get(txn_id)
    }

    pub fn holds(&self) -> impl Iterator<Item = (&TxnId, &Hold)> {
        self.holds.iter()
    }

    pub fn accounts(&self) -> impl Iterator<Item = (&String, &AmountMinor)> {
        self.balances.iter()
    }

    pub fn place_hold(
        &mut self,
        txn_id: TxnId,
        account_id: &str,
        amount: AmountMinor,
    ) -> Result<(), LedgerError> {
        let balance = self
            .balances
            .get(account_id)
            .ok_or_else(|| LedgerError::UnknownAccount(account_id.to_string()))?;
        if balance.currency != amount.currency {
            return Err(LedgerError::CurrencyMismatch {
                expected: balance.currency.to_string(),
                got: amount.currency.to_string(),
            });
        }
        if self.holds.contains_key(&txn_id) {
            return Err(LedgerError::HoldExists);
        }
        let available = self.available(account_id).unwrap_or(0);
        if amount.minor_units > available {
            return Err(LedgerError::InsufficientFunds {
                available,
                requested: amount.minor_units,
            });
        }
        self.holds.insert(
            txn_id,
            Hold {
                account_id: account_id.to_string(),
                amount,
            },
        );
        Ok(())
    }

    /// Debit the held amount. Returns false if there was no hold.
    pub fn capture(&mut self, txn_id: &TxnId) -> bool {
        let Some(hold) = self.holds.remove(txn_id) else {
            return false;
        };
        if let Some(balance) = self.balances.get_mut(&hold.account_id) {
            balance.minor_units = balance.minor_units.saturating_sub(hold.amount.minor_units);
        }
        true
    }

    pub fn void(&mut self, txn_id: &TxnId) -> bool {
        self.holds.remove(txn_id).is_some()
    }
}

/// Fund-node checks: signature, freshness, replay, then funds. An approval
/// places a hold keyed by the transaction id.
pub fn fund_verify(
    txn_id: TxnId,
    token: &PaymentToken,
    records: &Records<FundRecord>,
    ledger: &mut AccountLedger,
    guard: &mut FreshnessGuard,
    now: TimeStamp,
) -> Outcome {
    let record = records
        .get(&token.wallet_id)
        .ok_or_else(|| Rejection::new(Reason::NotEnrolled))?;
    let entry = token
        .entry(FactorTag::FUND)
        .ok_or_else(|| Rejection::with_detail(Reason::Malformed, "no fund entry"))?;
    if entry.len() != FundToken::ENCODED_LEN {
        return Err(Rejection::with_detail(
            Reason::Malformed,
            format!("fund entry is {} bytes", entry.len()),
        ));
    }
    let key = record
        .public_key
        .to_verifying_key()
        .ok_or_else(|| Rejection::with_detail(Reason::BadSignature, "enrolled key invalid"))?;
    let ft = verify_fund_token(entry, &key).map_err(|e| match e {
        FundCheckError::Malformed(inner) => Rejection::with_detail(Reason::Malformed, inner.to_string()),
        FundCheckError::BadSignature => Rejection::new(Reason::BadSignature),
    })?;
    if ft.t != token.t {
        return Err(Rejection::with_detail(
            Reason::Malformed,
            "fund timestamp differs from header",
        ));
    }
    guard.admit(token.wallet_id, token.t, now)?;
    ledger
        .place_hold(txn_id, &record.account_id, ft.amount)
        .map_err(|e| match e {
            LedgerError::InsufficientFunds { .. } => {
                Rejection::with_detail(Reason::InsufficientFunds, e.to_string())
            }
            LedgerError::CurrencyMismatch { .. } => Rejection::with_detail(Reason::Mismatch, e.to_string()),
            LedgerError::UnknownAccount(_) => Rejection::with_detail(Reason::NotEnrolled, e.to_string()),
            LedgerError::HoldExists => Rejection::new(Reason::Duplicate),
        })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FundNode {
    pub records: Records<FundRecord>,
    pub ledger: AccountLedger,
    pub guard: FreshnessGuard,
}

impl FundNode {
    pub fn new(window_s: u64) -> Self {
        Self {
            records: Records::new(),
            ledger: AccountLedger::default(),
            guard: FreshnessGuard::new(window_s),
        }
    }
}

impl FactorNode for FundNode {
    fn factor(&self) -> FactorTag {
        FactorTag::FUND
    }

    fn verify(&mut self, txn_id: TxnId, token: &PaymentToken, now: TimeStamp) -> Outcome {
        fund_verify(txn_id, token, &self.records, &mut self.ledger, &mut self.guard, now)
    }

    fn enroll(
        &mut self,
        wallet_id: WalletId,
        material: &EnrollMaterial,
        _rng: &mut dyn RngCore,
    ) -> Result<Option<SecretToken>, EnrollFailure> {
        let EnrollMaterial::Fund {
            public_key,
            account_id,
        } = material
        else {
            return Err(EnrollFailure::UnsupportedMaterial);
        };
        if self.records.contains_key(&wallet_id) {
            return Err(EnrollFailure::Duplicate);
        }
        if public_key.to_verifying_key().is_none() {
            return Err(EnrollFailure::InvalidKey);
        }
        if !self.ledger.has_account(account_id) {
            return Err(EnrollFailure::UnknownAccount);
        }
        self.records.insert(
            wallet_id,
            FundRecord {
                account_id: account_id.clone(),
                public_key: *public_key,
            },
        );
        Ok(None)
    }

    fn state_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("fund node state serializes")
    }
}
