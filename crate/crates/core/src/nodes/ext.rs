use std::collections::BTreeSet;
use std::sync::Arc;

use rand_core::RngCore;
use thiserror::Error;

use super::{
    issue_preshared, EnrollFailure, EnrollMaterial, FactorNode, FreshnessGuard, Outcome, Reason,
    Records, Rejection,
};
use crate::token::{build_extension_token, FactorTag, PaymentToken, SecretToken, TimeStamp, TxnId, WalletId};

/// Pre-shared tokens issued by an extension node, by wallet.
pub type ExtensionStore = Records<SecretToken>;

/// Pluggable check for an extension factor. Freshness and replay are
/// applied by the node after the verifier approves.
pub type ExtensionVerifier =
    Arc<dyn Fn(&PaymentToken, &ExtensionStore, TimeStamp) -> Outcome + Send + Sync>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExtensionError {
    #[error("factor tag {0} is already registered")]
    TagCollision(FactorTag),
    #[error("factor tag {0} is outside the extension range 0x80-0xff")]
    NotExtensionTag(FactorTag),
}

/// Tracks which factor tags have a verifier. Built-in tags are reserved.
#[derive(Debug, Clone)]
pub struct ExtensionRegistry {
    taken: BTreeSet<FactorTag>,
}

impl Default for ExtensionRegistry {
    fn default() -> Self {
        Self {
            taken: [FactorTag::FUND, FactorTag::BIO, FactorTag::LOC].into(),
        }
    }
}

impl ExtensionRegistry {
    pub fn is_registered(&self, tag: FactorTag) -> bool {
        self.taken.contains(&tag)
    }

    pub fn tags(&self) -> impl Iterator<Item = FactorTag> + '_ {
        self.taken.iter().copied()
    }
}

pub fn register_extension_verifier(
    registry: &mut ExtensionRegistry,
    tag: FactorTag,
    verifier: ExtensionVerifier,
    window_s: u64,
) -> Result<ExtensionNode, ExtensionError> {
    if registry.taken.contains(&tag) {
        return Err(ExtensionError::TagCollision(tag));
    }
    if !tag.is_extension() {
        return Err(ExtensionError::NotExtensionTag(tag));
    }
    registry.taken.insert(tag);
    Ok(ExtensionNode {
        tag,
        verifier,
        store: ExtensionStore::new(),
        guard: FreshnessGuard::new(window_s),
    })
}

/// Possession check: the entry must equal the extension sub-token
/// regenerated from the wallet's pre-shared token.
pub fn shared_secret_verifier(tag: FactorTag) -> ExtensionVerifier {
    Arc::new(move |token, store, _now| {
        let ps = store
            .get(&token.wallet_id)
            .ok_or_else(|| Rejection::new(Reason::NotEnrolled))?;
        let entry = token
            .entry(tag)
            .ok_or_else(|| Rejection::with_detail(Reason::Malformed, "no extension entry"))?;
        if build_extension_token(tag, ps, token.t).0 != entry {
            return Err(Rejection::new(Reason::Mismatch));
        }
        Ok(())
    })
}

pub fn always_approve() -> ExtensionVerifier {
    Arc::new(|_, _, _| Ok(()))
}

pub fn always_decline() -> ExtensionVerifier {
    Arc::new(|_, _, _| Err(Rejection::with_detail(Reason::Mismatch, "declined by policy")))
}

pub struct ExtensionNode {
    tag: FactorTag,
    verifier: ExtensionVerifier,
    pub store: ExtensionStore,
    pub guard: FreshnessGuard,
}

impl std::fmt::Debug for ExtensionNode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExtensionNode")
            .field("tag", &self.tag)
            .field("enrolled", &self.store.len())
            .finish()
    }
}

impl FactorNode for ExtensionNode {
    fn factor(&self) -> FactorTag {
        self.tag
    }

    fn verify(&mut self, _txn_id: TxnId, token: &PaymentToken, now: TimeStamp) -> Outcome {
        (self.verifier)(token, &self.store, now)?;
        self.guard.admit(token.wallet_id, token.t, now)
    }

    fn enroll(
        &mut self,
        wallet_id: WalletId,
        material: &EnrollMaterial,
        rng: &mut dyn RngCore,
    ) -> Result<Option<SecretToken>, EnrollFailure> {
        if !matches!(material, EnrollMaterial::Extension {}) {
            return Err(EnrollFailure::UnsupportedMaterial);
        }
        issue_preshared(&mut self.store, wallet_id, rng, |ps| ps).map(Some)
    }

    fn state_json(&self) -> serde_json::Value {
        serde_json::json!({
            "tag": self.tag,
            "store": self.store,
            "guard": self.guard,
        })
    }
}
