//! Token primitives: the value types that make up a payment token, the
//! HMAC and signature constructions over them, and the binary token format.
//!
//! Every builder here is a pure function. Secrets ([`SecretToken`]) are
//! only ever used as keys and never end up in serialized token bytes.

mod build;
mod wire;

pub use build::{
    build_biometric_token, build_extension_token, build_fund_token, build_location_token,
    derive_factor_key, hmac32, ottc_baseline, verify_fund_token, FundCheckError,
};
pub use wire::{
    assemble_payment_token, parse_payment_token, PaymentToken, HEADER_LEN, MAGIC, MAX_VALUE_LEN,
    VERSION,
};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::hexser;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TokenError {
    #[error("geo cell out of range: lat_cell={lat_cell}, lon_cell={lon_cell}")]
    GeoCellOutOfRange { lat_cell: i32, lon_cell: i32 },
    #[error("invalid currency code {0:?}: expected three uppercase ASCII letters")]
    InvalidCurrency(String),
    #[error("duplicate factor tag {0}")]
    DuplicateTag(FactorTag),
    #[error("factor tag {0} is not a known or extension tag")]
    UnknownTag(FactorTag),
    #[error("unrecognized factor name {0:?}")]
    UnknownFactorName(String),
    #[error("fund entry timestamp {entry} does not match header timestamp {header}")]
    FundTimestampMismatch { header: u64, entry: u64 },
    #[error("fund entry too short to carry a timestamp ({0} bytes)")]
    FundEntryTooShort(usize),
    #[error("entry value of {0} bytes exceeds the 65535-byte limit")]
    ValueTooLong(usize),
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0:#04x}")]
    BadVersion(u8),
    #[error("truncated token: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("entry tags out of ascending order: {prev} then {next}")]
    UnorderedTags { prev: FactorTag, next: FactorTag },
    #[error("{0} trailing bytes after last entry")]
    TrailingBytes(usize),
    #[error("header declares {declared} entries but only {found} present")]
    EntryCountMismatch { declared: u8, found: u8 },
    #[error("expected {expected} bytes, got {got}")]
    BadLength { expected: usize, got: usize },
}

/// Seconds since the Unix epoch (UTC).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TimeStamp(pub u64);

impl TimeStamp {
    pub const fn new(seconds: u64) -> Self {
        Self(seconds)
    }

    pub fn seconds(self) -> u64 {
        self.0
    }

    pub fn encode(self) -> [u8; 8] {
        self.0.to_be_bytes()
    }

    pub fn decode(bytes: [u8; 8]) -> Self {
        Self(u64::from_be_bytes(bytes))
    }

    pub fn from_millis(ms: u64) -> Self {
        Self(ms / 1000)
    }

    /// Shift by a signed number of seconds, saturating at the epoch bounds.
    pub fn offset(self, delta_s: i64) -> Self {
        Self(self.0.saturating_add_signed(delta_s))
    }

    pub fn abs_diff(self, other: TimeStamp) -> u64 {
        self.0.abs_diff(other.0)
    }
}

impl fmt::Display for TimeStamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

macro_rules! byte_newtype {
    ($(#[$meta:meta])* $name:ident, $len:expr) => {
        $(#[$meta])*
        #[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(#[serde(with = "hexser")] pub [u8; $len]);

        impl $name {
            pub const LEN: usize = $len;

            pub fn as_bytes(&self) -> &[u8; $len] {
                &self.0
            }

            pub fn from_slice(bytes: &[u8]) -> Result<Self, TokenError> {
                bytes
                    .try_into()
                    .map(Self)
                    .map_err(|_| TokenError::BadLength { expected: $len, got: bytes.len() })
            }

            pub fn to_hex(&self) -> String {
                hex::encode(self.0)
            }
        }

        impl FromStr for $name {
            type Err = TokenError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                let raw = hex::decode(s.trim()).map_err(|_| TokenError::BadLength {
                    expected: $len,
                    got: s.len() / 2,
                })?;
                Self::from_slice(&raw)
            }
        }
    };
}

byte_newtype!(
    /// HMAC-SHA-256 output.
    Digest32,
    32
);
byte_newtype!(
    /// 32-byte secret: OT, BPS, LPS or an extension pre-shared token.
    SecretToken,
    32
);
byte_newtype!(
    /// Canonical exact-match biometric template.
    BiometricTemplate,
    32
);
byte_newtype!(WalletId, 16);
byte_newtype!(
    /// Transaction id: SHA-256 of the serialized token, truncated to 16 bytes.
    TxnId,
    16
);

impl fmt::Debug for Digest32 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest32({})", self.to_hex())
    }
}

impl fmt::Debug for SecretToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SecretToken(<redacted>)")
    }
}

impl fmt::Debug for BiometricTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("BiometricTemplate(<redacted>)")
    }
}

impl fmt::Debug for WalletId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "WalletId({})", self.to_hex())
    }
}

impl fmt::Display for WalletId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for TxnId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TxnId({})", self.to_hex())
    }
}

impl fmt::Display for TxnId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl TxnId {
    pub fn of_token(bytes: &[u8]) -> Self {
        let digest = Sha256::digest(bytes);
        let mut out = [0u8; 16];
        out.copy_from_slice(&digest[..16]);
        Self(out)
    }
}

impl BiometricTemplate {
    /// Copy of the template with one bit inverted.
    pub fn with_bit_flipped(&self, bit: usize) -> Self {
        let mut out = self.0;
        out[(bit / 8) % 32] ^= 1 << (bit % 8);
        Self(out)
    }
}

/// ISO-4217 alphabetic currency code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Currency([u8; 3]);

impl Currency {
    pub const USD: Currency = Currency(*b"USD");

    pub fn new(code: &str) -> Result<Self, TokenError> {
        let bytes = code.as_bytes();
        match bytes {
            [a, b, c] if bytes.iter().all(u8::is_ascii_uppercase) => Ok(Self([*a, *b, *c])),
            _ => Err(TokenError::InvalidCurrency(code.to_string())),
        }
    }

    pub fn as_str(&self) -> &str {
        // Constructor guarantees ASCII.
        std::str::from_utf8(&self.0).unwrap_or("???")
    }

    pub fn bytes(&self) -> [u8; 3] {
        self.0
    }
}

impl fmt::Display for Currency {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for Currency {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Currency {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let code = String::deserialize(d)?;
        Currency::new(&code).map_err(serde::de::Error::custom)
    }
}

/// Amount in minor units (cents) of a currency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AmountMinor {
    pub minor_units: u64,
    pub currency: Currency,
}

impl AmountMinor {
    pub const ENCODED_LEN: usize = 11;

    pub fn new(minor_units: u64, currency: Currency) -> Self {
        Self {
            minor_units,
            currency,
        }
    }

    pub fn usd(minor_units: u64) -> Self {
        Self::new(minor_units, Currency::USD)
    }

    pub fn encode(&self) -> [u8; 11] {
        let mut out = [0u8; 11];
        out[..8].copy_from_slice(&self.minor_units.to_be_bytes());
        out[8..].copy_from_slice(&self.currency.0);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, TokenError> {
        let bytes: &[u8; 11] = bytes.try_into().map_err(|_| TokenError::BadLength {
            expected: 11,
            got: bytes.len(),
        })?;
        let mut units = [0u8; 8];
        units.copy_from_slice(&bytes[..8]);
        let code = &bytes[8..];
        if !code.iter().all(u8::is_ascii_uppercase) {
            return Err(TokenError::InvalidCurrency(
                String::from_utf8_lossy(code).into_owned(),
            ));
        }
        Ok(Self {
            minor_units: u64::from_be_bytes(units),
            currency: Currency([code[0], code[1], code[2]]),
        })
    }
}

impl fmt::Display for AmountMinor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.minor_units, self.currency)
    }
}

/// Location quantized to a 0.01 degree grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "RawCell")]
pub struct GeoCell {
    lat_cell: i32,
    lon_cell: i32,
}

#[derive(Deserialize)]
struct RawCell {
    lat_cell: i32,
    lon_cell: i32,
}

impl TryFrom<RawCell> for GeoCell {
    type Error = TokenError;

    fn try_from(raw: RawCell) -> Result<Self, Self::Error> {
        GeoCell::new(raw.lat_cell, raw.lon_cell)
    }
}

impl GeoCell {
    pub const LAT_RANGE: std::ops::RangeInclusive<i32> = -9000..=8999;
    pub const LON_RANGE: std::ops::RangeInclusive<i32> = -18000..=17999;

    pub fn new(lat_cell: i32, lon_cell: i32) -> Result<Self, TokenError> {
        if Self::LAT_RANGE.contains(&lat_cell) && Self::LON_RANGE.contains(&lon_cell) {
            Ok(Self { lat_cell, lon_cell })
        } else {
            Err(TokenError::GeoCellOutOfRange { lat_cell, lon_cell })
        }
    }

    pub fn from_degrees(lat: f64, lon: f64) -> Result<Self, TokenError> {
        let lat_cell = (lat * 100.0).floor();
        let lon_cell = (lon * 100.0).floor();
        // Casts saturate; range check rejects anything out of bounds.
        Self::new(lat_cell as i32, lon_cell as i32)
    }

    pub fn lat_cell(&self) -> i32 {
        self.lat_cell
    }

    pub fn lon_cell(&self) -> i32 {
        self.lon_cell
    }

    pub fn encode(&self) -> [u8; 8] {
        let mut out = [0u8; 8];
        out[..4].copy_from_slice(&self.lat_cell.to_be_bytes());
        out[4..].copy_from_slice(&self.lon_cell.to_be_bytes());
        out
    }

    /// Cell displaced by the given offsets, if it stays on the grid.
    pub fn shifted(&self, d_lat: i32, d_lon: i32) -> Option<Self> {
        Self::new(
            self.lat_cell.checked_add(d_lat)?,
            self.lon_cell.checked_add(d_lon)?,
        )
        .ok()
    }

    pub fn chebyshev(&self, other: &GeoCell) -> u32 {
        let d_lat = self.lat_cell.abs_diff(other.lat_cell);
        let d_lon = self.lon_cell.abs_diff(other.lon_cell);
        d_lat.max(d_lon)
    }
}

impl fmt::Display for GeoCell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.lat_cell, self.lon_cell)
    }
}

/// One-byte factor tag identifying a token entry and the node that checks it.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FactorTag(pub u8);

impl FactorTag {
    pub const FUND: FactorTag = FactorTag(0x01);
    pub const BIO: FactorTag = FactorTag(0x02);
    pub const LOC: FactorTag = FactorTag(0x03);
    pub const FIRST_EXTENSION: u8 = 0x80;

    pub fn is_builtin(self) -> bool {
        matches!(self.0, 0x01..=0x03)
    }

    pub fn is_extension(self) -> bool {
        self.0 >= Self::FIRST_EXTENSION
    }

    pub fn is_known(self) -> bool {
        self.is_builtin() || self.is_extension()
    }

    pub fn name(self) -> String {
        match self {
            Self::FUND => "FUND".into(),
            Self::BIO => "BIO".into(),
            Self::LOC => "LOC".into(),
            FactorTag(other) => format!("0x{other:02x}"),
        }
    }
}

impl fmt::Debug for FactorTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl fmt::Display for FactorTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for FactorTag {
    type Err = TokenError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let tag = match s.to_ascii_uppercase().as_str() {
            "FUND" => Self::FUND,
            "BIO" => Self::BIO,
            "LOC" => Self::LOC,
            other => {
                let digits = other.strip_prefix("0X").unwrap_or(other);
                let value = u8::from_str_radix(digits, 16)
                    .map_err(|_| TokenError::UnknownFactorName(s.to_string()))?;
                FactorTag(value)
            }
        };
        if tag.is_known() {
            Ok(tag)
        } else {
            Err(TokenError::UnknownTag(tag))
        }
    }
}

impl Serialize for FactorTag {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.name())
    }
}

impl<'de> Deserialize<'de> for FactorTag {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

/// Fund sub-token: the amount and time, signed by the wallet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FundToken {
    pub amount: AmountMinor,
    pub t: TimeStamp,
    pub signature: [u8; 64],
}

impl FundToken {
    pub const ENCODED_LEN: usize = 83;

    /// Bytes covered by the signature.
    pub fn signed_bytes(amount: &AmountMinor, t: TimeStamp) -> [u8; 19] {
        let mut out = [0u8; 19];
        out[..11].copy_from_slice(&amount.encode());
        out[11..].copy_from_slice(&t.encode());
        out
    }

    pub fn to_bytes(&self) -> [u8; 83] {
        let mut out = [0u8; 83];
        out[..19].copy_from_slice(&Self::signed_bytes(&self.amount, self.t));
        out[19..].copy_from_slice(&self.signature);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TokenError> {
        if bytes.len() != Self::ENCODED_LEN {
            return Err(TokenError::BadLength {
                expected: Self::ENCODED_LEN,
                got: bytes.len(),
            });
        }
        let amount = AmountMinor::decode(&bytes[..11])?;
        let t = Self::embedded_time(bytes).expect("length checked");
        let mut signature = [0u8; 64];
        signature.copy_from_slice(&bytes[19..]);
        Ok(Self {
            amount,
            t,
            signature,
        })
    }

    /// Timestamp embedded in a serialized fund entry, if long enough.
    pub fn embedded_time(bytes: &[u8]) -> Option<TimeStamp> {
        let raw: [u8; 8] = bytes.get(11..19)?.try_into().ok()?;
        Some(TimeStamp::decode(raw))
    }
}

/// Ed25519 public key as registered with the fund node.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PublicKey(#[serde(with = "hexser")] pub [u8; 32]);

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({})", hex::encode(self.0))
    }
}

impl PublicKey {
    pub fn to_verifying_key(&self) -> Option<ed25519_dalek::VerifyingKey> {
        ed25519_dalek::VerifyingKey::from_bytes(&self.0).ok()
    }
}

impl From<&ed25519_dalek::VerifyingKey> for PublicKey {
    fn from(key: &ed25519_dalek::VerifyingKey) -> Self {
        Self(key.to_bytes())
    }
}
