//! Request and response bodies of the HTTP interface, shared by the server,
//! the benchmark client and the CLI.
//!
//! Authenticated calls carry two headers: [`DID_HEADER`] with the caller's
//! DID and [`SIGNATURE_HEADER`] with a base64url Ed25519 signature over
//! `METHOD\npath?query\nhex(sha256(body))`.

use serde::{Deserialize, Serialize};

use covcert_core::credential::{Certificate, ClaimValue, Presentation, PresentationReport};
use covcert_core::crypto::{Did, Digest, KeyPair, PublicKey};
use covcert_core::encoding::{b64_bytes, b64url};
use covcert_core::flows::{AccountState, FailReason, Role};
use covcert_core::pod::sign_request;
use covcert_core::qrcodec::SampleTag;

pub const DID_HEADER: &str = "x-covcert-did";
pub const SIGNATURE_HEADER: &str = "x-covcert-signature";

/// Header pairs authenticating one request.
pub fn auth_headers(
    key: &KeyPair,
    did: &Did,
    method: &str,
    path_and_query: &str,
    body: &[u8],
) -> [(&'static str, String); 2] {
    let sig = sign_request(key, did, method, path_and_query, body);
    [
        (DID_HEADER, did.to_string()),
        (SIGNATURE_HEADER, b64url(&sig.bytes)),
    ]
}

/// Proof-of-possession header for registrations, where no DID exists yet.
pub fn key_proof_header(key: &KeyPair, method: &str, path_and_query: &str, body: &[u8]) -> (&'static str, String) {
    let msg = covcert_core::pod::request_message(method, path_and_query, body);
    (SIGNATURE_HEADER, b64url(&key.sign_raw(&msg)))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HashMode {
    Local,
    Server,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Pong {
    pub message: String,
    pub server_time_ms: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IssueRequest {
    pub certificate: Certificate,
    /// Client-computed canonical digest; required with `hash=local`.
    #[serde(default)]
    pub digest: Option<Digest>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IssueResponse {
    pub tx_id: Digest,
    pub anchor_url: String,
    pub digest: Digest,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyRequest {
    pub presentation: Presentation,
    #[serde(default)]
    pub digest: Option<Digest>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyResponse {
    pub valid: bool,
    pub reason: Option<FailReason>,
    pub report: Option<PresentationReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyQrRequest {
    pub qr_text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UploadResponse {
    pub path: String,
    pub version: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnchorRequest {
    pub cert_id: Did,
    pub digest: Digest,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnchorStatus {
    pub anchor_url: String,
    pub digest: Digest,
    pub height: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainTip {
    pub chain_id: String,
    pub height: u64,
    pub tip: Digest,
    pub authorities: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DidDocument {
    pub did: Did,
    pub public_key: PublicKey,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegisterIssuerRequest {
    pub registration_no: String,
    pub branch: String,
    pub email: String,
    pub role: Role,
    pub public_key: PublicKey,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IssuerStatus {
    pub did: Did,
    pub role: Role,
    pub organisation: String,
    pub state: AccountState,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfirmRequest {
    pub token: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegisterHolderRequest {
    pub public_key: PublicKey,
    pub document_number: String,
    #[serde(with = "b64_bytes")]
    pub did_salt: Vec<u8>,
    #[serde(with = "b64_bytes")]
    pub photo: Vec<u8>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegisterHolderResponse {
    pub did: Did,
    pub identity_anchor: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompleteSampleRequest {
    pub tag: SampleTag,
    pub certificate: Certificate,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PodListing {
    pub owner: Did,
    pub paths: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

/// Revealed claims as rendered for display.
pub fn claim_text(value: &ClaimValue) -> String {
    match value {
        ClaimValue::Text(t) => t.clone(),
        ClaimValue::Bytes(b) => format!("<{} bytes>", b.len()),
    }
}
