use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::frame::{encode_frame, FrameError, MsgType};
use crate::hexser;
use crate::network::Decision;
use crate::nodes::{AuthResult, EnrollFailure, EnrollMaterial};
use crate::token::{
    AmountMinor, BiometricTemplate, Digest32, FactorTag, GeoCell, SecretToken, TimeStamp, TxnId,
    WalletId,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProvisionReq {
    pub wallet_id: WalletId,
    pub pan: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProvisionResp {
    pub wallet_id: WalletId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ot: Option<SecretToken>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnrollReq {
    pub wallet_id: WalletId,
    pub factor: FactorTag,
    pub material: EnrollMaterial,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnrollResp {
    pub wallet_id: WalletId,
    pub factor: FactorTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preshared: Option<SecretToken>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<EnrollFailure>,
}

/// A serialized payment token in transit (wallet to POS, POS to node).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenSubmit {
    #[serde(with = "hexser::vec")]
    pub token: Vec<u8>,
}

/// Capture inputs handed to a running wallet, which builds and taps the token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PayIntent {
    pub amount: AmountMinor,
    pub biometric: BiometricTemplate,
    pub cell: GeoCell,
    #[serde(default)]
    pub clock_skew_s: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factors: Option<Vec<FactorTag>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptureSubmit {
    pub capture: PayIntent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PaymentSubmit {
    Token(TokenSubmit),
    Capture(CaptureSubmit),
}

impl PaymentSubmit {
    pub fn token(bytes: Vec<u8>) -> Self {
        PaymentSubmit::Token(TokenSubmit { token: bytes })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TxnRegister {
    pub txn_id: TxnId,
    pub session: u64,
    /// Factor tags present in the token.
    pub factors: Vec<FactorTag>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionMsg {
    pub session: u64,
    pub decision: Decision,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineValidateReq {
    pub wallet_id: WalletId,
    pub t: TimeStamp,
    pub ottc: Digest32,
    pub session: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineValidateResp {
    pub wallet_id: WalletId,
    pub t: TimeStamp,
    pub session: u64,
    pub valid: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// A device location report. The location node echoes it back with
/// `accepted` filled in.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocationFixMsg {
    pub device_id: String,
    pub cell: GeoCell,
    pub t: TimeStamp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accepted: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    ProvisionReq(ProvisionReq),
    ProvisionResp(ProvisionResp),
    EnrollReq(EnrollReq),
    EnrollResp(EnrollResp),
    PaymentSubmit(PaymentSubmit),
    AuthResult(AuthResult),
    TxnRegister(TxnRegister),
    Decision(DecisionMsg),
    BaselineValidateReq(BaselineValidateReq),
    BaselineValidateResp(BaselineValidateResp),
    LocationFix(LocationFixMsg),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MessageError {
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error("bad {msg_type} payload: {detail}")]
    Payload {
        msg_type: &'static str,
        detail: String,
    },
}

fn parse<T: DeserializeOwned>(msg_type: MsgType, payload: &[u8]) -> Result<T, MessageError> {
    serde_json::from_slice(payload).map_err(|e| MessageError::Payload {
        msg_type: msg_type.name(),
        detail: e.to_string(),
    })
}

impl Message {
    pub fn msg_type(&self) -> MsgType {
        match self {
            Message::ProvisionReq(_) => MsgType::ProvisionReq,
            Message::ProvisionResp(_) => MsgType::ProvisionResp,
            Message::EnrollReq(_) => MsgType::EnrollReq,
            Message::EnrollResp(_) => MsgType::EnrollResp,
            Message::PaymentSubmit(_) => MsgType::PaymentSubmit,
            Message::AuthResult(_) => MsgType::AuthResultMsg,
            Message::TxnRegister(_) => MsgType::TxnRegister,
            Message::Decision(_) => MsgType::DecisionMsg,
            Message::BaselineValidateReq(_) => MsgType::BaselineValidateReq,
            Message::BaselineValidateResp(_) => MsgType::BaselineValidateResp,
            Message::LocationFix(_) => MsgType::LocationFix,
        }
    }

    pub fn payload(&self) -> Vec<u8> {
        let encoded = match self {
            Message::ProvisionReq(m) => serde_json::to_vec(m),
            Message::ProvisionResp(m) => serde_json::to_vec(m),
            Message::EnrollReq(m) => serde_json::to_vec(m),
            Message::EnrollResp(m) => serde_json::to_vec(m),
            Message::PaymentSubmit(m) => serde_json::to_vec(m),
            Message::AuthResult(m) => serde_json::to_vec(m),
            Message::TxnRegister(m) => serde_json::to_vec(m),
            Message::Decision(m) => serde_json::to_vec(m),
            Message::BaselineValidateReq(m) => serde_json::to_vec(m),
            Message::BaselineValidateResp(m) => serde_json::to_vec(m),
            Message::LocationFix(m) => serde_json::to_vec(m),
        };
        encoded.expect("message payloads serialize")
    }

    pub fn to_frame(&self) -> Result<Vec<u8>, FrameError> {
        encode_frame(self.msg_type(), &self.payload())
    }

    pub fn from_payload(raw_type: u8, payload: &[u8]) -> Result<Self, MessageError> {
        let t = MsgType::try_from(raw_type)?;
        Ok(match t {
            MsgType::ProvisionReq => Message::ProvisionReq(parse(t, payload)?),
            MsgType::ProvisionResp => Message::ProvisionResp(parse(t, payload)?),
            MsgType::EnrollReq => Message::EnrollReq(parse(t, payload)?),
            MsgType::EnrollResp => Message::EnrollResp(parse(t, payload)?),
            MsgType::PaymentSubmit => Message::PaymentSubmit(parse(t, payload)?),
            MsgType::AuthResultMsg => Message::AuthResult(parse(t, payload)?),
            MsgType::TxnRegister => Message::TxnRegister(parse(t, payload)?),
            MsgType::DecisionMsg => Message::Decision(parse(t, payload)?),
            MsgType::BaselineValidateReq => Message::BaselineValidateReq(parse(t, payload)?),
            MsgType::BaselineValidateResp => Message::BaselineValidateResp(parse(t, payload)?),
            MsgType::LocationFix => Message::LocationFix(parse(t, payload)?),
        })
    }

    pub fn from_frame(bytes: &[u8]) -> Result<Self, MessageError> {
        let (raw_type, payload, used) = super::frame::split_frame(bytes)?;
        if used != bytes.len() {
            return Err(FrameError::Trailing(bytes.len() - used).into());
        }
        Self::from_payload(raw_type, payload)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn submit_variants_are_distinguished() {
        let tok = Message::PaymentSubmit(PaymentSubmit::token(vec![0xab, 0x01]));
        assert_eq!(tok.payload(), br#"{"token":"ab01"}"#);
        assert_eq!(Message::from_frame(&tok.to_frame().unwrap()).unwrap(), tok);

        let cap = Message::PaymentSubmit(PaymentSubmit::Capture(CaptureSubmit {
            capture: PayIntent {
                amount: AmountMinor::usd(100),
                biometric: BiometricTemplate([1; 32]),
                cell: GeoCell::new(1, 2).unwrap(),
                clock_skew_s: -5,
                factors: None,
            },
        }));
        assert_eq!(Message::from_frame(&cap.to_frame().unwrap()).unwrap(), cap);

        let bad = crate::netsim::frame::encode_frame(MsgType::PaymentSubmit, br#"{"token":"zz"}"#).unwrap();
        assert!(matches!(Message::from_frame(&bad), Err(MessageError::Payload { .. })));
    }

    #[test]
    fn unknown_type_is_a_typed_error() {
        let raw = crate::netsim::frame::encode_raw(0x42, b"{}").unwrap();
        assert_eq!(
            Message::from_frame(&raw),
            Err(MessageError::Frame(FrameError::UnknownType(0x42)))
        );
    }

    #[test]
    fn fix_round_trip() {
        let m = Message::LocationFix(LocationFixMsg {
            device_id: "d1".into(),
            cell: GeoCell::new(-5, 7).unwrap(),
            t: TimeStamp(99),
            accepted: None,
        });
        let json: serde_json::Value = serde_json::from_slice(&m.payload()).unwrap();
        assert!(json.get("accepted").is_none());
        assert_eq!(Message::from_frame(&m.to_frame().unwrap()).unwrap(), m);
    }
}
