//! Binary payment token format.
//!
//! ```text
//! header  = "MPA1" | 0x01 | wallet_id (16) | t (8, BE) | entry_count (1)
//! entry   = tag (1) | len (2, BE) | value (len)
//! ```
//!
//! Entries are serialized in strictly ascending tag order.

use super::{FactorTag, FundToken, TimeStamp, TokenError, TxnId, WalletId};

pub const MAGIC: [u8; 4] = *b"MPA1";
pub const VERSION: u8 = 0x01;
pub const HEADER_LEN: usize = 30;
pub const MAX_VALUE_LEN: usize = u16::MAX as usize;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaymentToken {
    pub wallet_id: WalletId,
    pub t: TimeStamp,
    /// Ascending by tag.
    pub entries: Vec<(FactorTag, Vec<u8>)>,
}

impl PaymentToken {
    pub fn entry(&self, tag: FactorTag) -> Option<&[u8]> {
        self.entries
            .binary_search_by_key(&tag, |(t, _)| *t)
            .ok()
            .map(|i| self.entries[i].1.as_slice())
    }

    pub fn tags(&self) -> impl Iterator<Item = FactorTag> + '_ {
        self.entries.iter().map(|(tag, _)| *tag)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, TokenError> {
        assemble_payment_token(self.wallet_id, self.t, &self.entries)
    }

    pub fn txn_id(&self) -> Result<TxnId, TokenError> {
        self.to_bytes().map(|bytes| TxnId::of_token(&bytes))
    }
}

pub fn assemble_payment_token(
    wallet_id: WalletId,
    t: TimeStamp,
    subtokens: &[(FactorTag, Vec<u8>)],
) -> Result<Vec<u8>, TokenError> {
    let mut sorted: Vec<&(FactorTag, Vec<u8>)> = subtokens.iter().collect();
    sorted.sort_by_key(|(tag, _)| *tag);
    for pair in sorted.windows(2) {
        if pair[0].0 == pair[1].0 {
            return Err(TokenError::DuplicateTag(pair[0].0));
        }
    }
    let mut body_len = 0;
    for (tag, value) in &sorted {
        if !tag.is_known() {
            return Err(TokenError::UnknownTag(*tag));
        }
        if value.len() > MAX_VALUE_LEN {
            return Err(TokenError::ValueTooLong(value.len()));
        }
        if *tag == FactorTag::FUND {
            let entry = FundToken::embedded_time(value)
                .ok_or(TokenError::FundEntryTooShort(value.len()))?;
            if entry != t {
                return Err(TokenError::FundTimestampMismatch {
                    header: t.0,
                    entry: entry.0,
                });
            }
        }
        body_len += 3 + value.len();
    }

    let mut out = Vec::with_capacity(HEADER_LEN + body_len);
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&wallet_id.0);
    out.extend_from_slice(&t.encode());
    // At most 3 built-in + 128 extension tags, always fits a byte.
    out.push(sorted.len() as u8);
    for (tag, value) in sorted {
        out.push(tag.0);
        out.extend_from_slice(&(value.len() as u16).to_be_bytes());
        out.extend_from_slice(value);
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TokenError> {
        let available = self.bytes.len() - self.offset;
        if available < n {
            return Err(TokenError::Truncated {
                offset: self.offset,
                needed: n,
                available,
            });
        }
        let out = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(out)
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.offset
    }
}

pub fn parse_payment_token(bytes: &[u8]) -> Result<PaymentToken, TokenError> {
    let mut r = Reader { bytes, offset: 0 };
    if r.take(4)? != MAGIC {
        return Err(TokenError::BadMagic);
    }
    let version = r.take(1)?[0];
    if version != VERSION {
        return Err(TokenError::BadVersion(version));
    }
    let wallet_id = WalletId::from_slice(r.take(16)?)?;
    let t = TimeStamp::decode(r.take(8)?.try_into().expect("8 bytes"));
    let declared = r.take(1)?[0];

    let mut entries: Vec<(FactorTag, Vec<u8>)> = Vec::with_capacity(declared as usize);
    for found in 0..declared {
        if r.remaining() == 0 {
            return Err(TokenError::EntryCountMismatch { declared, found });
        }
        let head = r.take(3)?;
        let tag = FactorTag(head[0]);
        if !tag.is_known() {
            return Err(TokenError::UnknownTag(tag));
        }
        if let Some((prev, _)) = entries.last() {
            if *prev == tag {
                return Err(TokenError::DuplicateTag(tag));
            }
            if *prev > tag {
                return Err(TokenError::UnorderedTags {
                    prev: *prev,
                    next: tag,
                });
            }
        }
        let len = u16::from_be_bytes([head[1], head[2]]) as usize;
        entries.push((tag, r.take(len)?.to_vec()));
    }
    if r.remaining() > 0 {
        return Err(TokenError::TrailingBytes(r.remaining()));
    }
    Ok(PaymentToken {
        wallet_id,
        t,
        entries,
    })
}
