use rand_core::RngCore;
use serde::{Deserialize, Serialize};

use super::{
    issue_preshared, EnrollFailure, EnrollMaterial, FactorNode, FreshnessGuard, Outcome, Reason,
    Records, Rejection,
};
use crate::token::{
    build_biometric_token, BiometricTemplate, FactorTag, PaymentToken, SecretToken, TimeStamp,
    TxnId, WalletId,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BioRecord {
    pub template: BiometricTemplate,
    pub bps: SecretToken,
}

/// Regenerate the biometric sub-token from the enrolled template and compare.
pub fn bio_verify(
    token: &PaymentToken,
    records: &Records<BioRecord>,
    guard: &mut FreshnessGuard,
    now: TimeStamp,
) -> Outcome {
    let record = records
        .get(&token.wallet_id)
        .ok_or_else(|| Rejection::new(Reason::NotEnrolled))?;
    let entry = token
        .entry(FactorTag::BIO)
        .ok_or_else(|| Rejection::with_detail(Reason::Malformed, "no biometric entry"))?;
    if entry.len() != 32 {
        return Err(Rejection::with_detail(
            Reason::Malformed,
            format!("biometric entry is {} bytes", entry.len()),
        ));
    }
    let expected = build_biometric_token(&record.template, token.t, &record.bps);
    if expected.0 != entry {
        return Err(Rejection::new(Reason::Mismatch));
    }
    guard.admit(token.wallet_id, token.t, now)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BioNode {
    pub records: Records<BioRecord>,
    pub guard: FreshnessGuard,
}

impl BioNode {
    pub fn new(window_s: u64) -> Self {
        Self {
            records: Records::new(),
            guard: FreshnessGuard::new(window_s),
        }
    }
}

impl FactorNode for BioNode {
    fn factor(&self) -> FactorTag {
        FactorTag::BIO
    }

    fn verify(&mut self, _txn_id: TxnId, token: &PaymentToken, now: TimeStamp) -> Outcome {
        bio_verify(token, &self.records, &mut self.guard, now)
    }

    fn enroll(
        &mut self,
        wallet_id: WalletId,
        material: &EnrollMaterial,
        rng: &mut dyn RngCore,
    ) -> Result<Option<SecretToken>, EnrollFailure> {
        let EnrollMaterial::Biometric { template } = material else {
            return Err(EnrollFailure::UnsupportedMaterial);
        };
        issue_preshared(&mut self.records, wallet_id, rng, |bps| BioRecord {
            template: *template,
            bps,
        })
        .map(Some)
    }

    fn state_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("bio node state serializes")
    }
}
