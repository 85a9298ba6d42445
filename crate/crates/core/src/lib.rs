//! Multi-factor mobile payment authorization: token construction, wallet,
//! point-of-sale, authentication nodes, card network, a deterministic network
//! simulator with a TCP backend, and a scenario harness.

pub mod deploy;
pub mod harness;
pub mod hexser;
pub mod netsim;
pub mod network;
pub mod nodes;
pub mod pos;
pub mod token;
pub mod wallet;

pub use network::{Decision, DecisionPolicy, DeclineReason};
pub use nodes::{AuthResult, Reason, Verdict};
pub use token::{
    AmountMinor, BiometricTemplate, Digest32, FactorTag, GeoCell, PaymentToken, SecretToken,
    TimeStamp, TxnId, WalletId,
};
