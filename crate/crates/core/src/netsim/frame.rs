//! Length-prefixed frames: `len (4, BE) | msg_type (1) | payload`, where
//! `len` counts the type byte plus the payload.

use std::io::{self, Read, Write};

use thiserror::Error;

/// Largest allowed value of the length field.
pub const MAX_FRAME_LEN: usize = 1 << 20;
pub const MAX_PAYLOAD_LEN: usize = MAX_FRAME_LEN - 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum MsgType {
    ProvisionReq = 0x01,
    ProvisionResp = 0x02,
    EnrollReq = 0x03,
    EnrollResp = 0x04,
    PaymentSubmit = 0x05,
    AuthResultMsg = 0x06,
    TxnRegister = 0x07,
    DecisionMsg = 0x08,
    BaselineValidateReq = 0x09,
    BaselineValidateResp = 0x0A,
    LocationFix = 0x0B,
}

impl MsgType {
    pub const ALL: [MsgType; 11] = [
        MsgType::ProvisionReq,
        MsgType::ProvisionResp,
        MsgType::EnrollReq,
        MsgType::EnrollResp,
        MsgType::PaymentSubmit,
        MsgType::AuthResultMsg,
        MsgType::TxnRegister,
        MsgType::DecisionMsg,
        MsgType::BaselineValidateReq,
        MsgType::BaselineValidateResp,
        MsgType::LocationFix,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MsgType::ProvisionReq => "ProvisionReq",
            MsgType::ProvisionResp => "ProvisionResp",
            MsgType::EnrollReq => "EnrollReq",
            MsgType::EnrollResp => "EnrollResp",
            MsgType::PaymentSubmit => "PaymentSubmit",
            MsgType::AuthResultMsg => "AuthResultMsg",
            MsgType::TxnRegister => "TxnRegister",
            MsgType::DecisionMsg => "DecisionMsg",
            MsgType::BaselineValidateReq => "BaselineValidateReq",
            MsgType::BaselineValidateResp => "BaselineValidateResp",
            MsgType::LocationFix => "LocationFix",
        }
    }
}

impl TryFrom<u8> for MsgType {
    type Error = FrameError;

    fn try_from(value: u8) -> Result<Self, Self::Error> {
        MsgType::ALL
            .into_iter()
            .find(|t| *t as u8 == value)
            .ok_or(FrameError::UnknownType(value))
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FrameError {
    #[error("payload of {0} bytes exceeds frame limit")]
    Oversize(usize),
    #[error("truncated frame: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("frame length field is zero")]
    Empty,
    #[error("unknown message type {0:#04x}")]
    UnknownType(u8),
    #[error("{0} bytes after end of frame")]
    Trailing(usize),
}

pub fn encode_frame(msg_type: MsgType, payload: &[u8]) -> Result<Vec<u8>, FrameError> {
    encode_raw(msg_type as u8, payload)
}

pub(crate) fn encode_raw(msg_type: u8, payload: &[u8]) -> Result<Vec<u8>, FrameError> {
    if payload.len() > MAX_PAYLOAD_LEN {
        return Err(FrameError::Oversize(payload.len()));
    }
    let mut out = Vec::with_capacity(5 + payload.len());
    out.extend_from_slice(&((payload.len() + 1) as u32).to_be_bytes());
    out.push(msg_type);
    out.extend_from_slice(payload);
    Ok(out)
}

/// Decode one complete frame occupying all of `bytes`.
pub fn decode_frame(bytes: &[u8]) -> Result<(MsgType, Vec<u8>), FrameError> {
    let (raw_type, payload, used) = split_frame(bytes)?;
    if used != bytes.len() {
        return Err(FrameError::Trailing(bytes.len() - used));
    }
    Ok((MsgType::try_from(raw_type)?, payload.to_vec()))
}

/// Split the first frame off a buffer: `(type byte, payload, bytes consumed)`.
/// The type byte is not validated here so a reader can skip unknown types.
pub fn split_frame(bytes: &[u8]) -> Result<(u8, &[u8], usize), FrameError> {
    if bytes.len() < 4 {
        return Err(FrameError::Truncated {
            needed: 4,
            available: bytes.len(),
        });
    }
    let len = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
    if len == 0 {
        return Err(FrameError::Empty);
    }
    if len > MAX_FRAME_LEN {
        return Err(FrameError::Oversize(len - 1));
    }
    if bytes.len() - 4 < len {
        return Err(FrameError::Truncated {
            needed: 4 + len,
            available: bytes.len(),
        });
    }
    Ok((bytes[4], &bytes[5..4 + len], 4 + len))
}

/// Read one frame from a stream. Returns `Ok(None)` on clean EOF at a frame
/// boundary.
pub fn read_frame<R: Read>(reader: &mut R) -> io::Result<Option<(u8, Vec<u8>)>> {
    let mut head = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        match reader.read(&mut head[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(io::ErrorKind::UnexpectedEof.into()),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    let len = u32::from_be_bytes(head) as usize;
    if len == 0 || len > MAX_FRAME_LEN {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("bad frame length {len}"),
        ));
    }
    let mut body = vec![0u8; len];
    reader.read_exact(&mut body)?;
    let payload = body.split_off(1);
    Ok(Some((body[0], payload)))
}

pub fn write_frame<W: Write>(writer: &mut W, frame: &[u8]) -> io::Result<()> {
    writer.write_all(frame)?;
    writer.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_payment_submit_frame() {
        assert_eq!(
            encode_frame(MsgType::PaymentSubmit, &[]).unwrap(),
            vec![0, 0, 0, 1, 5]
        );
    }

    #[test]
    fn type_table_is_fixed() {
        let codes: Vec<u8> = MsgType::ALL.iter().map(|t| *t as u8).collect();
        assert_eq!(codes, (1..=11).collect::<Vec<u8>>());
        assert_eq!(MsgType::try_from(0x0C), Err(FrameError::UnknownType(0x0C)));
        assert_eq!(MsgType::try_from(0), Err(FrameError::UnknownType(0)));
    }

    #[test]
    fn truncation_and_oversize() {
        let frame = encode_frame(MsgType::TxnRegister, b"hello").unwrap();
        assert!(matches!(
            decode_frame(&frame[..frame.len() - 1]),
            Err(FrameError::Truncated { .. })
        ));
        assert!(matches!(decode_frame(&frame[..2]), Err(FrameError::Truncated { .. })));
        assert_eq!(decode_frame(&[0, 0, 0, 0]), Err(FrameError::Empty));
        let huge = ((MAX_FRAME_LEN + 1) as u32).to_be_bytes();
        assert!(matches!(decode_frame(&huge), Err(FrameError::Oversize(_))));
        assert!(matches!(
            encode_frame(MsgType::TxnRegister, &vec![0; MAX_PAYLOAD_LEN + 1]),
            Err(FrameError::Oversize(_))
        ));
        assert!(encode_frame(MsgType::TxnRegister, &vec![0; MAX_PAYLOAD_LEN]).is_ok());
        let mut trailing = frame.clone();
        trailing.push(9);
        assert_eq!(decode_frame(&trailing), Err(FrameError::Trailing(1)));
    }

    #[test]
    fn stream_reader_skips_nothing_and_stops_at_eof() {
        let mut buf = encode_frame(MsgType::LocationFix, b"a").unwrap();
        buf.extend(encode_raw(0x7f, b"bc").unwrap());
        let mut cursor = io::Cursor::new(buf);
        assert_eq!(read_frame(&mut cursor).unwrap(), Some((0x0B, b"a".to_vec())));
        assert_eq!(read_frame(&mut cursor).unwrap(), Some((0x7f, b"bc".to_vec())));
        assert_eq!(read_frame(&mut cursor).unwrap(), None);
        let mut partial = io::Cursor::new(vec![0, 0, 0, 5, 1]);
        assert!(read_frame(&mut partial).is_err());
    }

    proptest! {
        #[test]
        fn frame_round_trip(idx in 0usize..11, payload in prop::collection::vec(any::<u8>(), 0..512)) {
            let t = MsgType::ALL[idx];
            let frame = encode_frame(t, &payload).unwrap();
            prop_assert_eq!(frame.len(), 5 + payload.len());
            prop_assert_eq!(decode_frame(&frame).unwrap(), (t, payload));
        }

        #[test]
        fn decoder_is_total(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
            let _ = decode_frame(&bytes);
        }
    }
}
