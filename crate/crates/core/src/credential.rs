//! Certificate data model with salted per-claim commitments.
//!
//! A [`Certificate`] never carries claim values. Each claim is committed as
//! `SHA-256(0x02 || len32(name) || len32(value) || salt)` and only the
//! commitments enter the canonical form that is signed and anchored. The
//! holder keeps the openings ([`Claim`]) and later reveals a subset of them
//! in a [`Presentation`].

use std::collections::{BTreeMap, BTreeSet};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::crypto::{digest, random_bytes, sign, Did, Digest, KeyPair, KeyResolver, Signature};
use crate::encoding::{b64_bytes, canonical_json, put_len_prefixed, to_canonical_json};

const COMMITMENT_TAG: u8 = 0x02;
const LAB_ENDORSEMENT_TAG: u8 = 0x04;

pub const PHOTO_CLAIM: &str = "photo";

pub type Salt = [u8; 16];

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum CredentialError {
    #[error("claim {0:?} appears more than once")]
    DuplicateClaim(String),
    #[error("claim names must not be empty")]
    EmptyClaimName,
    #[error("issuer and holder must be different DIDs")]
    SelfIssuance,
    #[error("holder countersignature requires the issuer signature first")]
    SignatureOrder,
    #[error("key does not belong to {expected}")]
    WrongSigner { expected: Did },
    #[error("no claim named {0:?}")]
    UnknownClaim(String),
    #[error("certificate has no anchor locator yet")]
    NotAnchored,
    #[error("malformed certificate JSON: {0}")]
    Malformed(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClaimValue {
    Text(String),
    Bytes(#[serde(with = "b64_bytes")] Vec<u8>),
}

impl ClaimValue {
    pub fn as_bytes(&self) -> &[u8] {
        match self {
            ClaimValue::Text(t) => t.as_bytes(),
            ClaimValue::Bytes(b) => b,
        }
    }
}

impl From<&str> for ClaimValue {
    fn from(s: &str) -> Self {
        ClaimValue::Text(s.to_owned())
    }
}

impl From<String> for ClaimValue {
    fn from(s: String) -> Self {
        ClaimValue::Text(s)
    }
}

mod salt_b64 {
    use super::Salt;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(salt: &Salt, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&crate::encoding::b64url(salt))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Salt, D::Error> {
        let text = String::deserialize(d)?;
        crate::encoding::b64url_decode(&text)
            .map_err(serde::de::Error::custom)?
            .try_into()
            .map_err(|_| serde::de::Error::custom("salt must be 16 bytes"))
    }
}

/// An opened claim: the value and the salt that reproduce its commitment.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Claim {
    pub name: String,
    pub value: ClaimValue,
    #[serde(with = "salt_b64")]
    pub salt: Salt,
}

impl Claim {
    pub fn commitment(&self) -> Commitment {
        Commitment {
            name: self.name.clone(),
            digest: commit(&self.name, self.value.as_bytes(), &self.salt),
        }
    }
}

pub fn commit(name: &str, value: &[u8], salt: &Salt) -> Digest {
    let mut pre = Vec::with_capacity(1 + 8 + name.len() + value.len() + salt.len());
    pre.push(COMMITMENT_TAG);
    put_len_prefixed(&mut pre, name.as_bytes());
    put_len_prefixed(&mut pre, value);
    pre.extend_from_slice(salt);
    digest(&pre)
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Commitment {
    pub name: String,
    pub digest: Digest,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pending,
    Issued,
    Complete,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Status::Pending => "pending",
            Status::Issued => "issued",
            Status::Complete => "complete",
        }
    }
}

/// Lab countersignature chaining a completed certificate to the pending one
/// the issuer signed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabEndorsement {
    pub pending_digest: Digest,
    /// Claim names the lab added on completion.
    pub added: Vec<String>,
    pub signature: Signature,
}

impl LabEndorsement {
    fn message(final_digest: &Digest, pending_digest: &Digest, added: &[String]) -> Vec<u8> {
        let mut msg = vec![LAB_ENDORSEMENT_TAG];
        msg.extend_from_slice(final_digest.as_bytes());
        msg.extend_from_slice(pending_digest.as_bytes());
        for name in added {
            put_len_prefixed(&mut msg, name.as_bytes());
        }
        msg
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Certificate {
    pub id: Did,
    pub issuer: Did,
    pub holder: Did,
    pub issued_at: u64,
    pub status: Status,
    pub photo_bound: bool,
    pub commitments: Vec<Commitment>,
    pub issuer_signature: Option<Signature>,
    pub holder_signature: Option<Signature>,
    pub lab_endorsement: Option<LabEndorsement>,
    pub anchor_url: Option<String>,
}

/// The holder's full record: the certificate and every claim opening.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeldCertificate {
    pub certificate: Certificate,
    pub claims: Vec<Claim>,
}

impl HeldCertificate {
    pub fn claim(&self, name: &str) -> Option<&Claim> {
        self.claims.iter().find(|c| c.name == name)
    }
}

pub fn now_secs() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Fresh id, current time, random salts.
pub fn new_certificate(
    issuer: &Did,
    holder: &Did,
    claims: Vec<(String, ClaimValue)>,
    photo: Option<Vec<u8>>,
    status: Status,
) -> Result<HeldCertificate, CredentialError> {
    new_certificate_with(
        issuer,
        holder,
        claims,
        photo,
        status,
        Did::random(),
        now_secs(),
        &mut random_bytes::<16>,
    )
}

/// Like [`new_certificate`] with the id, timestamp and salt source supplied.
#[allow(clippy::too_many_arguments)]
pub fn new_certificate_with(
    issuer: &Did,
    holder: &Did,
    claims: Vec<(String, ClaimValue)>,
    photo: Option<Vec<u8>>,
    status: Status,
    id: Did,
    issued_at: u64,
    salts: &mut dyn FnMut() -> Salt,
) -> Result<HeldCertificate, CredentialError> {
    if issuer == holder {
        return Err(CredentialError::SelfIssuance);
    }
    let photo_bound = photo.is_some();
    let mut all = claims;
    if let Some(bytes) = photo {
        all.push((PHOTO_CLAIM.to_owned(), ClaimValue::Bytes(bytes)));
    }
    let mut seen = BTreeSet::new();
    for (name, _) in &all {
        if name.is_empty() {
            return Err(CredentialError::EmptyClaimName);
        }
        if !seen.insert(name.as_str()) {
            return Err(CredentialError::DuplicateClaim(name.clone()));
        }
    }
    let openings: Vec<Claim> = all
        .into_iter()
        .map(|(name, value)| Claim {
            name,
            value,
            salt: salts(),
        })
        .collect();
    let mut commitments: Vec<Commitment> = openings.iter().map(Claim::commitment).collect();
    commitments.sort();
    Ok(HeldCertificate {
        certificate: Certificate {
            id,
            issuer: issuer.clone(),
            holder: holder.clone(),
            issued_at,
            status,
            photo_bound,
            commitments,
            issuer_signature: None,
            holder_signature: None,
            lab_endorsement: None,
            anchor_url: None,
        },
        claims: openings,
    })
}

impl Certificate {
    /// The bytes that are hashed, signed and anchored.
    ///
    /// A compact JSON array in fixed order:
    /// `[id, issuer, holder, issued_at, status, photo_bound, [[name, digest_hex], ...]]`
    /// with commitments sorted by name. Signatures, the lab endorsement and
    /// the anchor locator are attached after the digest exists and are not
    /// part of it.
    pub fn canonical_form(&self) -> Vec<u8> {
        let mut commitments: Vec<&Commitment> = self.commitments.iter().collect();
        commitments.sort_by(|a, b| a.name.as_bytes().cmp(b.name.as_bytes()));
        let commitments: Vec<_> = commitments
            .into_iter()
            .map(|c| json!([c.name, c.digest.to_hex()]))
            .collect();
        let value = json!([
            self.id.to_string(),
            self.issuer.to_string(),
            self.holder.to_string(),
            self.issued_at,
            self.status.as_str(),
            self.photo_bound,
            commitments,
        ]);
        canonical_json(&value).into_bytes()
    }

    pub fn canonical_digest(&self) -> Digest {
        digest(&self.canonical_form())
    }

    /// The pending certificate a lab completion was built on, reconstructed
    /// from the commitments the lab did not add.
    pub fn pending_form(&self) -> Option<Certificate> {
        let lab = self.lab_endorsement.as_ref()?;
        let added: BTreeSet<&str> = lab.added.iter().map(String::as_str).collect();
        Some(Certificate {
            status: Status::Pending,
            commitments: self
                .commitments
                .iter()
                .filter(|c| !added.contains(c.name.as_str()))
                .cloned()
                .collect(),
            issuer_signature: None,
            holder_signature: None,
            lab_endorsement: None,
            anchor_url: None,
            ..self.clone()
        })
    }

    /// What the issuer signature covers: the canonical digest, or for a
    /// lab-completed certificate the digest of the pending form.
    pub fn issuer_signed_digest(&self) -> Digest {
        match &self.lab_endorsement {
            Some(lab) => lab.pending_digest,
            None => self.canonical_digest(),
        }
    }

    pub fn commitment(&self, name: &str) -> Option<&Commitment> {
        self.commitments.iter().find(|c| c.name == name)
    }

    pub fn to_json(&self) -> String {
        to_canonical_json(self).expect("certificate always serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, CredentialError> {
        serde_json::from_str(text).map_err(|e| CredentialError::Malformed(e.to_string()))
    }
}

fn check_signer(
    resolver: &dyn KeyResolver,
    expected: &Did,
    key: &KeyPair,
) -> Result<(), CredentialError> {
    match resolver.resolve(expected) {
        Some(pk) if pk == key.public_key() => Ok(()),
        _ => Err(CredentialError::WrongSigner {
            expected: expected.clone(),
        }),
    }
}

pub fn issuer_sign(
    cert: &Certificate,
    issuer_key: &KeyPair,
    resolver: &dyn KeyResolver,
) -> Result<Certificate, CredentialError> {
    check_signer(resolver, &cert.issuer, issuer_key)?;
    let mut out = cert.clone();
    out.issuer_signature = Some(sign(
        issuer_key,
        &cert.issuer,
        cert.canonical_digest().as_bytes(),
    ));
    out.holder_signature = None;
    Ok(out)
}

pub fn holder_countersign(
    cert: &Certificate,
    holder_key: &KeyPair,
    resolver: &dyn KeyResolver,
) -> Result<Certificate, CredentialError> {
    if cert.issuer_signature.is_none() {
        return Err(CredentialError::SignatureOrder);
    }
    check_signer(resolver, &cert.holder, holder_key)?;
    let mut out = cert.clone();
    out.holder_signature = Some(sign(
        holder_key,
        &cert.holder,
        cert.canonical_digest().as_bytes(),
    ));
    Ok(out)
}

/// Turns a pending certificate into a complete one carrying the lab's
/// result commitments. The issuer's pending-stage signature is kept and the
/// lab signs the chain `final digest -> pending digest`. The holder
/// countersigns the result separately.
pub fn lab_complete(
    base: &Certificate,
    results: Vec<(String, ClaimValue)>,
    lab: &Did,
    lab_key: &KeyPair,
    resolver: &dyn KeyResolver,
    salts: &mut dyn FnMut() -> Salt,
) -> Result<(Certificate, Vec<Claim>), CredentialError> {
    check_signer(resolver, lab, lab_key)?;
    if base.issuer_signature.is_none() {
        return Err(CredentialError::SignatureOrder);
    }
    let mut names: BTreeSet<String> = base.commitments.iter().map(|c| c.name.clone()).collect();
    let mut added_claims = Vec::with_capacity(results.len());
    for (name, value) in results {
        if name.is_empty() {
            return Err(CredentialError::EmptyClaimName);
        }
        if !names.insert(name.clone()) {
            return Err(CredentialError::DuplicateClaim(name));
        }
        added_claims.push(Claim {
            name,
            value,
            salt: salts(),
        });
    }
    let pending_digest = base.canonical_digest();
    let mut commitments = base.commitments.clone();
    commitments.extend(added_claims.iter().map(Claim::commitment));
    commitments.sort();
    let mut added: Vec<String> = added_claims.iter().map(|c| c.name.clone()).collect();
    added.sort();
    let mut done = Certificate {
        status: Status::Complete,
        commitments,
        holder_signature: None,
        lab_endorsement: None,
        anchor_url: None,
        ..base.clone()
    };
    let msg = LabEndorsement::message(&done.canonical_digest(), &pending_digest, &added);
    done.lab_endorsement = Some(LabEndorsement {
        pending_digest,
        added,
        signature: sign(lab_key, lab, &msg),
    });
    Ok((done, added_claims))
}

/// Where a revealed value lives.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Disclosed {
    Inline(ClaimValue),
    /// Fetched by the verifier from the holder's store (large photos).
    External(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RevealedClaim {
    pub name: String,
    pub value: Disclosed,
    #[serde(with = "salt_b64")]
    pub salt: Salt,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Presentation {
    pub certificate: Certificate,
    pub revealed: Vec<RevealedClaim>,
    pub anchor_url: String,
}

/// Holder-side disclosure rules applied on top of the explicit reveal set.
#[derive(Clone, Debug, Default)]
pub struct DisclosurePolicy {
    /// Add the photo claim whenever the certificate is photo-bound.
    pub force_photo: bool,
    /// Claims disclosed by locator instead of inline value.
    pub by_reference: BTreeMap<String, String>,
}

pub fn make_presentation(
    cert: &Certificate,
    full_claims: &[Claim],
    reveal: &BTreeSet<String>,
    policy: &DisclosurePolicy,
) -> Result<Presentation, CredentialError> {
    let anchor_url = cert
        .anchor_url
        .clone()
        .ok_or(CredentialError::NotAnchored)?;
    let mut names = reveal.clone();
    if policy.force_photo && cert.photo_bound {
        names.insert(PHOTO_CLAIM.to_owned());
    }
    let mut revealed = Vec::with_capacity(names.len());
    for name in &names {
        let claim = full_claims
            .iter()
            .find(|c| &c.name == name)
            .filter(|_| cert.commitment(name).is_some())
            .ok_or_else(|| CredentialError::UnknownClaim(name.clone()))?;
        let value = match policy.by_reference.get(name) {
            Some(locator) => Disclosed::External(locator.clone()),
            None => Disclosed::Inline(claim.value.clone()),
        };
        revealed.push(RevealedClaim {
            name: name.clone(),
            value,
            salt: claim.salt,
        });
    }
    Ok(Presentation {
        certificate: cert.clone(),
        revealed,
        anchor_url,
    })
}

impl Presentation {
    pub fn to_json(&self) -> String {
        to_canonical_json(self).expect("presentation always serializes")
    }

    /// Replaces external disclosures with fetched bytes; entries whose fetch
    /// fails stay external and are reported back by name.
    pub fn resolve_external(
        &self,
        fetch: &mut dyn FnMut(&str) -> Option<Vec<u8>>,
    ) -> (Presentation, Vec<String>) {
        let mut out = self.clone();
        let mut missing = Vec::new();
        for r in &mut out.revealed {
            if let Disclosed::External(locator) = &r.value {
                match fetch(locator) {
                    Some(bytes) => r.value = Disclosed::Inline(ClaimValue::Bytes(bytes)),
                    None => missing.push(r.name.clone()),
                }
            }
        }
        (out, missing)
    }
}

/// Outcome of checking a presentation; failures are entries, never errors.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PresentationReport {
    pub anchor_match: bool,
    pub issuer_sig: bool,
    pub holder_sig: bool,
    /// `None` when the certificate has no lab endorsement.
    pub lab_sig: Option<bool>,
    pub commitments: bool,
    pub revealed: Vec<(String, ClaimValue)>,
    pub failures: Vec<String>,
}

impl PresentationReport {
    pub fn valid(&self) -> bool {
        self.anchor_match
            && self.issuer_sig
            && self.holder_sig
            && self.lab_sig.unwrap_or(true)
            && self.commitments
    }
}

/// Checks the anchored digest, every signature, and every revealed opening.
pub fn verify_presentation(
    pres: &Presentation,
    anchored: &Digest,
    resolver: &dyn KeyResolver,
) -> PresentationReport {
    let cert = &pres.certificate;
    let local = cert.canonical_digest();
    verify_presentation_with_digest(pres, &local, anchored, resolver)
}

/// As [`verify_presentation`] but trusting a caller-computed canonical digest.
pub fn verify_presentation_with_digest(
    pres: &Presentation,
    local: &Digest,
    anchored: &Digest,
    resolver: &dyn KeyResolver,
) -> PresentationReport {
    let cert = &pres.certificate;
    let mut failures = Vec::new();

    let anchor_match = local == anchored;
    if !anchor_match {
        failures.push("canonical digest differs from anchored digest".to_owned());
    }

    let issuer_sig = match (&cert.issuer_signature, &cert.lab_endorsement) {
        (Some(sig), None) => sig.signer == cert.issuer && sig.verify_with(resolver, local.as_bytes()),
        (Some(sig), Some(lab)) => {
            let pending_ok = cert
                .pending_form()
                .is_some_and(|p| p.canonical_digest() == lab.pending_digest);
            pending_ok
                && sig.signer == cert.issuer
                && sig.verify_with(resolver, lab.pending_digest.as_bytes())
        }
        (None, _) => false,
    };
    if !issuer_sig {
        failures.push("issuer signature missing or invalid".to_owned());
    }

    let holder_sig = cert
        .holder_signature
        .as_ref()
        .is_some_and(|sig| sig.signer == cert.holder && sig.verify_with(resolver, local.as_bytes()));
    if !holder_sig {
        failures.push("holder signature missing or invalid".to_owned());
    }

    let lab_sig = cert.lab_endorsement.as_ref().map(|lab| {
        let msg = LabEndorsement::message(local, &lab.pending_digest, &lab.added);
        let ok = lab.signature.verify_with(resolver, &msg);
        if !ok {
            failures.push("lab endorsement invalid".to_owned());
        }
        ok
    });

    let mut commitments = true;
    let mut seen = BTreeSet::new();
    let mut revealed = Vec::new();
    for r in &pres.revealed {
        if !seen.insert(r.name.as_str()) {
            commitments = false;
            failures.push(format!("claim {:?} revealed twice", r.name));
            continue;
        }
        let Some(stored) = cert.commitment(&r.name) else {
            commitments = false;
            failures.push(format!("revealed claim {:?} is not committed", r.name));
            continue;
        };
        match &r.value {
            Disclosed::Inline(value) => {
                if commit(&r.name, value.as_bytes(), &r.salt) == stored.digest {
                    revealed.push((r.name.clone(), value.clone()));
                } else {
                    commitments = false;
                    failures.push(format!("revealed claim {:?} does not match its commitment", r.name));
                }
            }
            Disclosed::External(_) => {
                commitments = false;
                failures.push(format!("revealed claim {:?} could not be fetched", r.name));
            }
        }
    }

    PresentationReport {
        anchor_match,
        issuer_sig,
        holder_sig,
        lab_sig,
        commitments,
        revealed,
        failures,
    }
}
