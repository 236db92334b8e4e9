//! Binary block encoding. Everything hashed or signed on the chain goes
//! through here.
//!
//! ```text
//! genesis = "COVG" || u64 height(0) || [0u8; 32] || len32(chain_id)
//!           || u32 n || n × (len32(name) || public_key[32])
//! entry   = len32(cert_id text) || digest[32] || u64 submitted_at_ms
//! body    = "COVB" || u64 height || parent[32] || u32 producer
//!           || u64 produced_at_ms || u32 count || count × entry
//! block   = body || signature[64]
//! ```
//! Integers are big-endian. A block's digest is SHA-256 of `block`; the
//! producer signs `body`.

use serde::{Deserialize, Serialize};

use crate::crypto::{digest, verify_sig, Did, Digest, PublicKey};
use crate::encoding::{b64url, b64url_decode, put_len_prefixed};

const GENESIS_MAGIC: &[u8; 4] = b"COVG";
const BLOCK_MAGIC: &[u8; 4] = b"COVB";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Authority {
    pub name: String,
    pub public_key: PublicKey,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Genesis {
    pub chain_id: String,
    pub authorities: Vec<Authority>,
}

impl Genesis {
    pub fn encode(&self) -> Vec<u8> {
        let mut buf = GENESIS_MAGIC.to_vec();
        buf.extend_from_slice(&0u64.to_be_bytes());
        buf.extend_from_slice(Digest::ZERO.as_bytes());
        put_len_prefixed(&mut buf, self.chain_id.as_bytes());
        buf.extend_from_slice(&(self.authorities.len() as u32).to_be_bytes());
        for a in &self.authorities {
            put_len_prefixed(&mut buf, a.name.as_bytes());
            buf.extend_from_slice(&a.public_key.0);
        }
        buf
    }

    pub fn digest(&self) -> Digest {
        digest(&self.encode())
    }

    /// Producer index for a block at `height` (>= 1): round-robin from authority 0.
    pub fn scheduled_producer(&self, height: u64) -> u32 {
        debug_assert!(height >= 1);
        ((height - 1) % self.authorities.len() as u64) as u32
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorEntry {
    pub cert_id: Did,
    pub digest: Digest,
    pub submitted_at: u64,
}

impl AnchorEntry {
    fn encode_into(&self, buf: &mut Vec<u8>) {
        put_len_prefixed(buf, self.cert_id.to_string().as_bytes());
        buf.extend_from_slice(self.digest.as_bytes());
        buf.extend_from_slice(&self.submitted_at.to_be_bytes());
    }

    pub fn tx_id(&self) -> Digest {
        let mut buf = Vec::new();
        self.encode_into(&mut buf);
        digest(&buf)
    }
}

mod sig64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(sig: &[u8; 64], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&super::b64url(sig))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 64], D::Error> {
        let text = String::deserialize(d)?;
        super::b64url_decode(&text)
            .map_err(serde::de::Error::custom)?
            .try_into()
            .map_err(|_| serde::de::Error::custom("signature must be 64 bytes"))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub height: u64,
    pub parent_digest: Digest,
    pub producer: u32,
    pub entries: Vec<AnchorEntry>,
    pub produced_at: u64,
    #[serde(with = "sig64")]
    pub producer_signature: [u8; 64],
}

impl Block {
    pub fn body(&self) -> Vec<u8> {
        let mut buf = BLOCK_MAGIC.to_vec();
        buf.extend_from_slice(&self.height.to_be_bytes());
        buf.extend_from_slice(self.parent_digest.as_bytes());
        buf.extend_from_slice(&self.producer.to_be_bytes());
        buf.extend_from_slice(&self.produced_at.to_be_bytes());
        buf.extend_from_slice(&(self.entries.len() as u32).to_be_bytes());
        for e in &self.entries {
            e.encode_into(&mut buf);
        }
        buf
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = self.body();
        buf.extend_from_slice(&self.producer_signature);
        buf
    }

    pub fn digest(&self) -> Digest {
        digest(&self.encode())
    }

    pub fn signature_valid(&self, key: &PublicKey) -> bool {
        verify_sig(key, &self.body(), &self.producer_signature)
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("corrupt chain record: {0}")]
pub struct DecodeError(pub String);

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.buf.len() < n {
            return Err(DecodeError("truncated".into()));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn arr32(&mut self) -> Result<[u8; 32], DecodeError> {
        Ok(self.take(32)?.try_into().unwrap())
    }

    fn text(&mut self) -> Result<String, DecodeError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| DecodeError(e.to_string()))
    }

    fn done(&self) -> Result<(), DecodeError> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(DecodeError("trailing bytes".into()))
        }
    }
}

pub fn decode_genesis(bytes: &[u8]) -> Result<Genesis, DecodeError> {
    let mut r = Reader { buf: bytes };
    if r.take(4)? != GENESIS_MAGIC {
        return Err(DecodeError("bad genesis magic".into()));
    }
    if r.u64()? != 0 || r.arr32()? != [0u8; 32] {
        return Err(DecodeError("genesis must be height 0 with zero parent".into()));
    }
    let chain_id = r.text()?;
    let n = r.u32()?;
    let mut authorities = Vec::new();
    for _ in 0..n {
        let name = r.text()?;
        authorities.push(Authority {
            name,
            public_key: PublicKey(r.arr32()?),
        });
    }
    r.done()?;
    Ok(Genesis {
        chain_id,
        authorities,
    })
}

pub fn decode_block(bytes: &[u8]) -> Result<Block, DecodeError> {
    let mut r = Reader { buf: bytes };
    if r.take(4)? != BLOCK_MAGIC {
        return Err(DecodeError("bad block magic".into()));
    }
    let height = r.u64()?;
    let parent_digest = Digest(r.arr32()?);
    let producer = r.u32()?;
    let produced_at = r.u64()?;
    let count = r.u32()?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let cert_id = r
            .text()?
            .parse()
            .map_err(|e: crate::crypto::CryptoError| DecodeError(e.to_string()))?;
        let digest = Digest(r.arr32()?);
        let submitted_at = r.u64()?;
        entries.push(AnchorEntry {
            cert_id,
            digest,
            submitted_at,
        });
    }
    let producer_signature: [u8; 64] = r.take(64)?.try_into().unwrap();
    r.done()?;
    Ok(Block {
        height,
        parent_digest,
        producer,
        entries,
        produced_at,
        producer_signature,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::generate_keypair;

    fn sample() -> Block {
        Block {
            height: 3,
            parent_digest: digest(b"p"),
            producer: 2,
            entries: vec![AnchorEntry {
                cert_id: Did::from_digest(&digest(b"c")),
                digest: digest(b"d"),
                submitted_at: 1234,
            }],
            produced_at: 5678,
            producer_signature: [7; 64],
        }
    }

    #[test]
    fn block_decode_inverts_encode() {
        let b = sample();
        assert_eq!(decode_block(&b.encode()).unwrap(), b);
        assert!(decode_block(&b.encode()[..10]).is_err());
        let mut extra = b.encode();
        extra.push(0);
        assert!(decode_block(&extra).is_err());
    }

    #[test]
    fn genesis_layout_starts_with_zero_parent() {
        let g = Genesis {
            chain_id: "c".into(),
            authorities: vec![Authority {
                name: "a".into(),
                public_key: generate_keypair(Some(&[1; 32])).unwrap().public_key(),
            }],
        };
        let bytes = g.encode();
        assert_eq!(&bytes[..4], b"COVG");
        assert_eq!(&bytes[4..44], &[0u8; 40][..]);
        assert_eq!(decode_genesis(&bytes).unwrap(), g);
    }

    #[test]
    fn schedule_is_round_robin_from_first_block() {
        let g = Genesis {
            chain_id: "c".into(),
            authorities: (0..5)
                .map(|i| Authority {
                    name: format!("a{i}"),
                    public_key: PublicKey([i; 32]),
                })
                .collect(),
        };
        let producers: Vec<u32> = (1..=10).map(|h| g.scheduled_producer(h)).collect();
        assert_eq!(producers, vec![0, 1, 2, 3, 4, 0, 1, 2, 3, 4]);
    }
}
