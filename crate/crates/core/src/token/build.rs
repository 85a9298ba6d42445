use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use hmac::{Hmac, Mac};
use sha2::Sha256;
use thiserror::Error;

use super::{
    AmountMinor, BiometricTemplate, Digest32, FactorTag, FundToken, GeoCell, SecretToken,
    TimeStamp, TokenError,
};

type HmacSha256 = Hmac<Sha256>;

/// HMAC-SHA-256 of `msg` under `key`.
pub fn hmac32(key: &[u8], msg: &[u8]) -> Digest32 {
    // HMAC accepts keys of any length, including empty.
    let mut mac = HmacSha256::new_from_slice(key).expect("hmac takes any key length");
    mac.update(msg);
    Digest32(mac.finalize().into_bytes().into())
}

/// Baseline one-time transaction code: HMAC keyed by the original token over `t`.
pub fn ottc_baseline(ot: &SecretToken, t: TimeStamp) -> Digest32 {
    hmac32(&ot.0, &t.encode())
}

/// Per-transaction factor key: the pre-shared token keys an HMAC over `t`.
pub fn derive_factor_key(ps: &SecretToken, t: TimeStamp) -> Digest32 {
    hmac32(&ps.0, &t.encode())
}

pub fn build_biometric_token(b: &BiometricTemplate, t: TimeStamp, bps: &SecretToken) -> Digest32 {
    let key = derive_factor_key(bps, t);
    hmac32(&key.0, &b.0)
}

pub fn build_location_token(
    l: &GeoCell,
    t: TimeStamp,
    lps: &SecretToken,
) -> Result<Digest32, TokenError> {
    // Re-validate: a GeoCell can only be built in range, but keep the
    // contract explicit for callers constructing cells from raw parts.
    let cell = GeoCell::new(l.lat_cell(), l.lon_cell())?;
    let key = derive_factor_key(lps, t);
    Ok(hmac32(&key.0, &cell.encode()))
}

/// Sub-token for a pre-shared-secret extension factor (possession proof
/// bound to `t` and to the factor tag).
pub fn build_extension_token(tag: FactorTag, ps: &SecretToken, t: TimeStamp) -> Digest32 {
    let key = derive_factor_key(ps, t);
    hmac32(&key.0, &[tag.0])
}

pub fn build_fund_token(amount: AmountMinor, t: TimeStamp, signing_key: &SigningKey) -> FundToken {
    let signature = signing_key.sign(&FundToken::signed_bytes(&amount, t));
    FundToken {
        amount,
        t,
        signature: signature.to_bytes(),
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FundCheckError {
    #[error("malformed fund entry: {0}")]
    Malformed(TokenError),
    #[error("fund signature does not verify")]
    BadSignature,
}

/// Decode a serialized fund entry and check its signature.
pub fn verify_fund_token(bytes: &[u8], key: &VerifyingKey) -> Result<FundToken, FundCheckError> {
    let token = FundToken::from_bytes(bytes).map_err(FundCheckError::Malformed)?;
    let signature = Signature::from_bytes(&token.signature);
    key.verify(&FundToken::signed_bytes(&token.amount, token.t), &signature)
        .map_err(|_| FundCheckError::BadSignature)?;
    Ok(token)
}
