//! Keys, DIDs, signatures and digests.
//!
//! Ed25519 for signatures, SHA-256 for every digest. DIDs use the local
//! `cov` method: `did:cov:<base58 of a 32-byte digest>`. Public keys for a
//! DID come from a [`KeyResolver`]; [`DidRegistry`] is the in-process one.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ed25519_dalek::{Signer, SigningKey, VerifyingKey};
use parking_lot::RwLock;
use rand::RngCore;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};

use crate::encoding::{b64url, b64url_decode, put_len_prefixed};

/// Domain-separation tag for DID preimages.
const DID_TAG: u8 = 0x01;

pub const DID_PREFIX: &str = "did:cov:";

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum CryptoError {
    #[error("seed must be exactly 32 bytes, got {0}")]
    InvalidSeed(usize),
    #[error("document number must not be empty")]
    EmptyDocument,
    #[error("malformed DID {0:?}")]
    InvalidDid(String),
    #[error("malformed digest: {0}")]
    InvalidDigest(String),
    #[error("malformed key material")]
    InvalidKey,
    #[error("DID {0} is already bound to a different key")]
    DidTaken(Did),
}

/// A 32-byte SHA-256 output.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub const ZERO: Digest = Digest([0; 32]);

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    /// Lowercase, 64 characters.
    pub fn to_hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn from_hex(text: &str) -> Result<Self, CryptoError> {
        if text.len() != 64 || !text.is_ascii() {
            return Err(CryptoError::InvalidDigest(format!(
                "expected 64 hex characters, got {}",
                text.len()
            )));
        }
        // Lowercase only: one spelling per digest.
        let nibble = |c: u8| match c {
            b'0'..=b'9' => Ok(c - b'0'),
            b'a'..=b'f' => Ok(c - b'a' + 10),
            _ => Err(CryptoError::InvalidDigest(format!("not lowercase hex: {:?}", c as char))),
        };
        let bytes = text.as_bytes();
        let mut out = [0u8; 32];
        for (i, slot) in out.iter_mut().enumerate() {
            *slot = nibble(bytes[2 * i])? << 4 | nibble(bytes[2 * i + 1])?;
        }
        Ok(Digest(out))
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.to_hex())
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Digest {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        Digest::from_hex(&text).map_err(serde::de::Error::custom)
    }
}

/// SHA-256 of `bytes`.
pub fn digest(bytes: &[u8]) -> Digest {
    Digest(Sha256::digest(bytes).into())
}

/// A 32-byte Ed25519 verification key.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct PublicKey(pub [u8; 32]);

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({})", b64url(&self.0))
    }
}

impl Serialize for PublicKey {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&b64url(&self.0))
    }
}

impl<'de> Deserialize<'de> for PublicKey {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        let bytes = b64url_decode(&text).map_err(serde::de::Error::custom)?;
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|_| serde::de::Error::custom("public key must be 32 bytes"))?;
        Ok(PublicKey(arr))
    }
}

/// Ed25519 signing key plus its derived public half.
#[derive(Clone)]
pub struct KeyPair {
    signing: SigningKey,
}

impl KeyPair {
    pub fn public_key(&self) -> PublicKey {
        PublicKey(self.signing.verifying_key().to_bytes())
    }

    pub fn secret_bytes(&self) -> [u8; 32] {
        self.signing.to_bytes()
    }

    pub fn sign_raw(&self, message: &[u8]) -> [u8; 64] {
        self.signing.sign(message).to_bytes()
    }
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair")
            .field("public_key", &self.public_key())
            .finish_non_exhaustive()
    }
}

impl Serialize for KeyPair {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&b64url(&self.secret_bytes()))
    }
}

impl<'de> Deserialize<'de> for KeyPair {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        let bytes = b64url_decode(&text).map_err(serde::de::Error::custom)?;
        generate_keypair(Some(&bytes)).map_err(serde::de::Error::custom)
    }
}

/// Builds a keypair from a 32-byte seed, or from fresh OS entropy when `seed` is `None`.
pub fn generate_keypair(seed: Option<&[u8]>) -> Result<KeyPair, CryptoError> {
    let secret: [u8; 32] = match seed {
        Some(bytes) => bytes
            .try_into()
            .map_err(|_| CryptoError::InvalidSeed(bytes.len()))?,
        None => random_bytes(),
    };
    Ok(KeyPair {
        signing: SigningKey::from_bytes(&secret),
    })
}

pub fn random_bytes<const N: usize>() -> [u8; N] {
    let mut out = [0u8; N];
    rand::rngs::OsRng.fill_bytes(&mut out);
    out
}

/// `did:cov:<base58>` where the identifier always decodes to 32 bytes.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Did {
    identifier: String,
}

impl Did {
    pub const METHOD: &'static str = "cov";

    pub fn from_digest(d: &Digest) -> Self {
        Did {
            identifier: bs58::encode(d.as_bytes()).into_string(),
        }
    }

    /// A fresh DID with no preimage anyone could recompute; used for certificate ids.
    pub fn random() -> Self {
        Did::from_digest(&digest(&random_bytes::<32>()))
    }

    pub fn identifier(&self) -> &str {
        &self.identifier
    }

    pub fn id_bytes(&self) -> [u8; 32] {
        let mut out = [0u8; 32];
        bs58::decode(&self.identifier)
            .onto(&mut out)
            .expect("identifier validated on construction");
        out
    }
}

impl fmt::Display for Did {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{DID_PREFIX}{}", self.identifier)
    }
}

impl fmt::Debug for Did {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Did({self})")
    }
}

impl FromStr for Did {
    type Err = CryptoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || CryptoError::InvalidDid(s.to_owned());
        let ident = s.strip_prefix(DID_PREFIX).ok_or_else(bad)?;
        let bytes = bs58::decode(ident).into_vec().map_err(|_| bad())?;
        if bytes.len() != 32 {
            return Err(bad());
        }
        // Reject non-canonical spellings (leading-zero aliases).
        if bs58::encode(&bytes).into_string() != ident {
            return Err(bad());
        }
        Ok(Did {
            identifier: ident.to_owned(),
        })
    }
}

impl Serialize for Did {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Did {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

pub type DidSalt = [u8; 16];

/// `did:cov:base58(SHA-256(0x01 || len32(document_number) || salt))`.
pub fn derive_did(document_number: &str, pairwise_salt: &DidSalt) -> Result<Did, CryptoError> {
    if document_number.is_empty() {
        return Err(CryptoError::EmptyDocument);
    }
    let mut pre = vec![DID_TAG];
    put_len_prefixed(&mut pre, document_number.as_bytes());
    pre.extend_from_slice(pairwise_salt);
    Ok(Did::from_digest(&digest(&pre)))
}

/// A 64-byte Ed25519 signature attributed to a DID.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Signature {
    pub bytes: [u8; 64],
    pub signer: Did,
}

impl Signature {
    /// Checks the signature with the key the resolver binds to `self.signer`.
    pub fn verify_with(&self, resolver: &dyn KeyResolver, message: &[u8]) -> bool {
        resolver
            .resolve(&self.signer)
            .is_some_and(|pk| verify_sig(&pk, message, &self.bytes))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SignatureRepr {
    signer: Did,
    value: String,
}

impl Serialize for Signature {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        SignatureRepr {
            signer: self.signer.clone(),
            value: b64url(&self.bytes),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Signature {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let repr = SignatureRepr::deserialize(d)?;
        let bytes = b64url_decode(&repr.value).map_err(serde::de::Error::custom)?;
        let bytes: [u8; 64] = bytes
            .try_into()
            .map_err(|_| serde::de::Error::custom("signature must be 64 bytes"))?;
        Ok(Signature {
            bytes,
            signer: repr.signer,
        })
    }
}

pub fn sign(key: &KeyPair, signer: &Did, message: &[u8]) -> Signature {
    Signature {
        bytes: key.sign_raw(message),
        signer: signer.clone(),
    }
}

/// Never panics: malformed keys or signatures simply fail.
pub fn verify_sig(public_key: &PublicKey, message: &[u8], signature: &[u8]) -> bool {
    let Ok(vk) = VerifyingKey::from_bytes(&public_key.0) else {
        return false;
    };
    let Ok(sig) = ed25519_dalek::Signature::from_slice(signature) else {
        return false;
    };
    vk.verify_strict(message, &sig).is_ok()
}

/// Maps a DID to its current verification key.
pub trait KeyResolver: Send + Sync {
    fn resolve(&self, did: &Did) -> Option<PublicKey>;
}

impl KeyResolver for BTreeMap<Did, PublicKey> {
    fn resolve(&self, did: &Did) -> Option<PublicKey> {
        self.get(did).copied()
    }
}

/// Process-local DID method registry; bindings are first-write-wins.
#[derive(Debug, Default)]
pub struct DidRegistry {
    keys: RwLock<BTreeMap<Did, PublicKey>>,
}

impl DidRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&self, did: &Did, key: PublicKey) -> Result<(), CryptoError> {
        let mut keys = self.keys.write();
        match keys.get(did) {
            Some(existing) if *existing != key => Err(CryptoError::DidTaken(did.clone())),
            _ => {
                keys.insert(did.clone(), key);
                Ok(())
            }
        }
    }

    pub fn snapshot(&self) -> BTreeMap<Did, PublicKey> {
        self.keys.read().clone()
    }

    pub fn from_snapshot(keys: BTreeMap<Did, PublicKey>) -> Self {
        DidRegistry {
            keys: RwLock::new(keys),
        }
    }
}

impl KeyResolver for DidRegistry {
    fn resolve(&self, did: &Did) -> Option<PublicKey> {
        self.keys.read().get(did).copied()
    }
}
