//! HTTP facade over the ledger, pod host and role workflows.
//!
//! All client traffic reaches ledger node 0, the worst case for the
//! consortium. With `workers = 1` every request is handled on one thread.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, Method, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use serde::Deserialize;
use tokio::sync::oneshot;

use covcert_core::credential::{now_secs, verify_presentation_with_digest, Presentation, Status};
use covcert_core::crypto::{verify_sig, Did, KeyResolver, Signature};
use covcert_core::encoding::b64url_decode;
use covcert_core::flows::{FailReason, FlowError, Outbox, Role, World, WorldState};
use covcert_core::ledger::runtime::{LedgerRuntime, RuntimeConfig};
use covcert_core::ledger::{anchor_url, now_ms, parse_anchor_url, Cluster, LedgerError};
use covcert_core::pod::{request_message, verify_request, AccessRule, PodError, PodServer, PutOptions};
use covcert_core::qrcodec::QrError;

use crate::api::*;
use crate::config::Config;

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error("cannot bind {addr}: {message}")]
    BindFailed { addr: SocketAddr, message: String },
    #[error("storage: {0}")]
    Storage(String),
    #[error("runtime: {0}")]
    Runtime(String),
}

pub struct AppState {
    pub world: Arc<World>,
    pub cluster: Cluster,
    state_file: Option<PathBuf>,
}

/// Builds the services described by `config`. Must run inside a tokio
/// runtime: the ledger authorities start as tasks on it.
pub fn build_state(config: &Config) -> Result<AppState, ServeError> {
    let storage = |e: &dyn std::fmt::Display| ServeError::Storage(e.to_string());
    let cluster = match &config.state_dir {
        Some(dir) => Cluster::open(&config.chain_id, config.authorities, &dir.join("chain")).map_err(|e| storage(&e))?,
        None => Cluster::new(&config.chain_id, config.authorities),
    };
    let ledger = LedgerRuntime::start(
        &cluster,
        RuntimeConfig {
            block_interval: Duration::from_millis(config.block_interval_ms),
            min_delay: Duration::from_millis(config.link_delay_ms.0),
            max_delay: Duration::from_millis(config.link_delay_ms.1),
            seed: now_ms(),
            stop_at_height: None,
        },
    );
    let pods = match &config.pod_store {
        Some(dir) => PodServer::open("pods", dir).map_err(|e| storage(&e))?,
        None => PodServer::in_memory("pods"),
    };
    let cloud = match &config.state_dir {
        Some(dir) => PodServer::open("cloud", &dir.join("cloud")).map_err(|e| storage(&e))?,
        None => PodServer::in_memory("cloud"),
    };
    let mut world = World::new(Arc::new(ledger), Arc::new(pods), Arc::new(cloud));
    let mut state_file = None;
    if let Some(dir) = &config.state_dir {
        world = world.with_outbox(Outbox::to_file(dir.join("outbox.jsonl")));
        let file = dir.join("world.json");
        if file.exists() {
            let text = std::fs::read_to_string(&file).map_err(|e| storage(&e))?;
            let state: WorldState = serde_json::from_str(&text).map_err(|e| storage(&e))?;
            world.load_state(state).map_err(|e| storage(&e))?;
        }
        state_file = Some(file);
    }
    Ok(AppState {
        world: Arc::new(world),
        cluster,
        state_file,
    })
}

impl AppState {
    fn persist(&self) -> Result<(), ApiError> {
        let Some(file) = &self.state_file else {
            return Ok(());
        };
        let text = serde_json::to_string(&self.world.state()).expect("serializable");
        let tmp = file.with_extension("json.tmp");
        std::fs::write(&tmp, text)
            .and_then(|_| std::fs::rename(&tmp, file))
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Storage", e.to_string()))
    }

    /// The authenticated caller, `None` for anonymous requests.
    fn caller(&self, method: &Method, uri: &Uri, headers: &HeaderMap, body: &[u8]) -> Result<Option<Did>, ApiError> {
        let did = headers.get(DID_HEADER).and_then(|v| v.to_str().ok());
        let sig = headers.get(SIGNATURE_HEADER).and_then(|v| v.to_str().ok());
        let (did, sig) = match (did, sig) {
            (None, None) => return Ok(None),
            (Some(d), Some(s)) => (d, s),
            _ => return Err(ApiError::unauthorized("both auth headers are required")),
        };
        let did: Did = did.parse().map_err(|_| ApiError::unauthorized("malformed DID header"))?;
        let bytes: [u8; 64] = b64url_decode(sig)
            .ok()
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| ApiError::unauthorized("malformed signature header"))?;
        let signature = Signature {
            bytes,
            signer: did.clone(),
        };
        if !verify_request(self.world.registry.as_ref(), &signature, method.as_str(), path_and_query(uri), body) {
            return Err(ApiError::unauthorized("request signature invalid"));
        }
        Ok(Some(did))
    }

    fn require_caller(&self, method: &Method, uri: &Uri, headers: &HeaderMap, body: &[u8]) -> Result<Did, ApiError> {
        self.caller(method, uri, headers, body)?
            .ok_or_else(|| ApiError::unauthorized("authentication required"))
    }
}

fn path_and_query(uri: &Uri) -> &str {
    uri.path_and_query().map(|p| p.as_str()).unwrap_or("/")
}

/// Checks a registration's proof that the caller holds `key`.
fn check_key_proof(
    key: &covcert_core::crypto::PublicKey,
    method: &Method,
    uri: &Uri,
    headers: &HeaderMap,
    body: &[u8],
) -> Result<(), ApiError> {
    let sig = headers
        .get(SIGNATURE_HEADER)
        .and_then(|v| v.to_str().ok())
        .and_then(|s| b64url_decode(s).ok())
        .ok_or_else(|| ApiError::unauthorized("key proof required"))?;
    if !verify_sig(key, &request_message(method.as_str(), path_and_query(uri), body), &sig) {
        return Err(ApiError::unauthorized("key proof invalid"));
    }
    Ok(())
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    kind: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, kind: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            kind,
            message: message.into(),
        }
    }

    fn bad_request(kind: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, kind, message)
    }

    fn unauthorized(message: &str) -> Self {
        Self::new(StatusCode::UNAUTHORIZED, "Unauthorized", message)
    }

    fn forbidden(kind: &'static str, message: &str) -> Self {
        Self::new(StatusCode::FORBIDDEN, kind, message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "NotFound", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.kind.to_owned(),
            message: self.message,
        };
        (self.status, Json(body)).into_response()
    }
}

impl From<PodError> for ApiError {
    fn from(e: PodError) -> Self {
        let (status, kind) = match &e {
            PodError::PodExists(_) => (StatusCode::CONFLICT, "PodExists"),
            PodError::NoSuchPod(_) => (StatusCode::NOT_FOUND, "NoSuchPod"),
            PodError::NotFound(_) => (StatusCode::NOT_FOUND, "NotFound"),
            PodError::Forbidden(_) => (StatusCode::FORBIDDEN, "Forbidden"),
            PodError::BadPath(_) => (StatusCode::BAD_REQUEST, "BadPath"),
            PodError::SyncFailed(_) => (StatusCode::BAD_GATEWAY, "SyncFailed"),
            PodError::Io(_) | PodError::Corrupt(_) => (StatusCode::INTERNAL_SERVER_ERROR, "Storage"),
        };
        ApiError::new(status, kind, e.to_string())
    }
}

impl From<LedgerError> for ApiError {
    fn from(e: LedgerError) -> Self {
        let (status, kind) = match &e {
            LedgerError::DuplicateAnchor(_) => (StatusCode::CONFLICT, "DuplicateAnchor"),
            LedgerError::NotFound => (StatusCode::NOT_FOUND, "NotFound"),
            LedgerError::Pending => (StatusCode::ACCEPTED, "Pending"),
            LedgerError::BadAnchorUrl(_) => (StatusCode::BAD_REQUEST, "BadAnchorUrl"),
            LedgerError::WrongChain(_) => (StatusCode::BAD_REQUEST, "WrongChain"),
            LedgerError::Timeout => (StatusCode::GATEWAY_TIMEOUT, "Timeout"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "Ledger"),
        };
        ApiError::new(status, kind, e.to_string())
    }
}

impl From<QrError> for ApiError {
    fn from(e: QrError) -> Self {
        let kind = match &e {
            QrError::PayloadTooLarge { .. } => "PayloadTooLarge",
            QrError::NotOurCode => "NotOurCode",
            QrError::CorruptPayload => "CorruptPayload",
            QrError::MalformedPayload(_) => "MalformedPayload",
            QrError::PhotoRequired => "PhotoRequired",
            QrError::NotAPresentation => "NotAPresentation",
        };
        ApiError::bad_request(kind, e.to_string())
    }
}

impl From<FlowError> for ApiError {
    fn from(e: FlowError) -> Self {
        use StatusCode as S;
        let (status, kind) = match e {
            FlowError::Pod(p) => return p.into(),
            FlowError::Ledger(l) => return l.into(),
            FlowError::Qr(q) => return q.into(),
            FlowError::RegistryRejected => (S::UNPROCESSABLE_ENTITY, "RegistryRejected"),
            FlowError::BadEmailDomain(_) => (S::UNPROCESSABLE_ENTITY, "BadEmailDomain"),
            FlowError::TokenRejected => (S::FORBIDDEN, "TokenRejected"),
            FlowError::EmptyDocument => (S::BAD_REQUEST, "EmptyDocument"),
            FlowError::EmptyPhoto => (S::BAD_REQUEST, "EmptyPhoto"),
            FlowError::IdentityMismatch => (S::CONFLICT, "IdentityMismatch"),
            FlowError::IssuerInactive => (S::FORBIDDEN, "IssuerInactive"),
            FlowError::NotALab => (S::FORBIDDEN, "NotALab"),
            FlowError::SampleUnknown => (S::NOT_FOUND, "SampleUnknown"),
            FlowError::DuplicateSample(_) => (S::CONFLICT, "DuplicateSample"),
            FlowError::AlreadyComplete => (S::CONFLICT, "AlreadyComplete"),
            FlowError::MissingClaim(_) => (S::BAD_REQUEST, "MissingClaim"),
            FlowError::NoSuchCertificate(_) => (S::NOT_FOUND, "NoSuchCertificate"),
            FlowError::BadDelivery => (S::UNPROCESSABLE_ENTITY, "BadDelivery"),
            FlowError::Credential(_) => (S::UNPROCESSABLE_ENTITY, "Credential"),
            FlowError::Crypto(_) => (S::CONFLICT, "Crypto"),
            FlowError::Outbox(_) => (S::INTERNAL_SERVER_ERROR, "Outbox"),
        };
        ApiError::new(status, kind, e.to_string())
    }
}

fn parse<T: serde::de::DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request("MalformedBody", e.to_string()))
}

fn parse_did(text: &str) -> Result<Did, ApiError> {
    text.parse().map_err(|_| ApiError::bad_request("BadDid", format!("{text:?} is not a DID")))
}

type Shared = State<Arc<AppState>>;
type ApiResult = Result<Response, ApiError>;

#[derive(Debug, Deserialize)]
struct HashQuery {
    hash: Option<HashMode>,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/ping", get(ping))
        .route("/issue", post(issue))
        .route("/verify", post(verify))
        .route("/verify/qr", post(verify_qr))
        .route("/upload", put(upload))
        .route("/anchor", post(submit_anchor))
        .route("/anchors/{cert_id}", get(anchor_status))
        .route("/chain/tip", get(chain_tip))
        .route("/dids/{did}", get(resolve_did))
        .route("/issuers", post(register_issuer))
        .route("/issuers/{did}", get(issuer_status))
        .route("/issuers/{did}/confirm", post(confirm_issuer))
        .route("/outbox", get(outbox))
        .route("/holders", post(register_holder))
        .route("/pending", post(submit_pending))
        .route("/pending/{sample_id}", get(pending_entry))
        .route("/pending/{sample_id}/complete", post(complete_sample))
        .route("/pods/{owner}", get(pod_list))
        .route("/pods/{owner}/{*path}", get(pod_get).put(pod_put).delete(pod_delete))
        .with_state(state)
}

async fn ping() -> Json<Pong> {
    Json(Pong {
        message: "pong".into(),
        server_time_ms: now_ms(),
    })
}

async fn issue(State(s): Shared, Query(q): Query<HashQuery>, method: Method, uri: Uri, headers: HeaderMap, body: Bytes) -> ApiResult {
    let did = s.require_caller(&method, &uri, &headers, &body)?;
    s.world.require_active(&did, Role::Issuer)?;
    let req: IssueRequest = parse(&body)?;
    let cert = &req.certificate;
    if cert.issuer != did {
        return Err(ApiError::forbidden("NotCertificateIssuer", "caller is not the certificate issuer"));
    }
    let digest = match q.hash.unwrap_or(HashMode::Local) {
        HashMode::Server => cert.canonical_digest(),
        HashMode::Local => req
            .digest
            .ok_or_else(|| ApiError::bad_request("MissingDigest", "hash=local needs a digest"))?,
    };
    let reg = s.world.registry.as_ref();
    let signed_by = |sig: &Option<Signature>, who: &Did| {
        sig.as_ref()
            .is_some_and(|sig| &sig.signer == who && sig.verify_with(reg, digest.as_bytes()))
    };
    if cert.status == Status::Pending
        || cert.lab_endorsement.is_some()
        || !signed_by(&cert.issuer_signature, &cert.issuer)
        || !signed_by(&cert.holder_signature, &cert.holder)
    {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "BadSignature",
            "certificate must carry issuer and holder signatures over the digest",
        ));
    }
    let receipt = s.world.ledger.submit_anchor(&cert.id, digest)?;
    Ok((
        StatusCode::ACCEPTED,
        Json(IssueResponse {
            tx_id: receipt.tx_id,
            anchor_url: receipt.anchor_url,
            digest,
        }),
    )
        .into_response())
}

async fn verify(State(s): Shared, Query(q): Query<HashQuery>, body: Bytes) -> ApiResult {
    let req: VerifyRequest = parse(&body)?;
    let pres = &req.presentation;
    let cert = &pres.certificate;
    let invalid = |reason| {
        Json(VerifyResponse {
            valid: false,
            reason: Some(reason),
            report: None,
        })
        .into_response()
    };
    if cert.status == Status::Pending {
        return Ok(invalid(FailReason::Pending));
    }
    let local = match q.hash.unwrap_or(HashMode::Local) {
        HashMode::Server => cert.canonical_digest(),
        HashMode::Local => req
            .digest
            .ok_or_else(|| ApiError::bad_request("MissingDigest", "hash=local needs a digest"))?,
    };
    if !parse_anchor_url(&pres.anchor_url).is_ok_and(|(_, id)| id == cert.id) {
        return Ok(invalid(FailReason::AnchorUrlMismatch));
    }
    let anchored = match s.world.ledger.lookup_anchor(&pres.anchor_url) {
        Ok(rec) => rec.digest,
        Err(LedgerError::NotFound) => return Ok(invalid(FailReason::AnchorMissing)),
        Err(LedgerError::Pending) => return Ok(invalid(FailReason::Pending)),
        Err(_) => return Ok(invalid(FailReason::AnchorUrlMismatch)),
    };
    let report = verify_presentation_with_digest(pres, &local, &anchored, s.world.registry.as_ref());
    let valid = report.valid();
    Ok(Json(VerifyResponse {
        valid,
        reason: (!valid).then_some(FailReason::ChecksFailed),
        report: Some(report),
    })
    .into_response())
}

async fn verify_qr(State(s): Shared, body: Bytes) -> ApiResult {
    let req: VerifyQrRequest = parse(&body)?;
    Ok(Json(s.world.verify(&req.qr_text)?).into_response())
}

#[derive(Debug, Deserialize)]
struct UploadQuery {
    path: String,
}

fn content_type(headers: &HeaderMap) -> String {
    headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .unwrap_or("application/octet-stream")
        .to_owned()
}

async fn upload(State(s): Shared, Query(q): Query<UploadQuery>, method: Method, uri: Uri, headers: HeaderMap, body: Bytes) -> ApiResult {
    let did = s.require_caller(&method, &uri, &headers, &body)?;
    let version = s
        .world
        .pods
        .put_resource(&did, Some(&did), &q.path, body.to_vec(), PutOptions::typed(&content_type(&headers)))?;
    Ok((StatusCode::CREATED, Json(UploadResponse { path: q.path, version })).into_response())
}

async fn submit_anchor(State(s): Shared, method: Method, uri: Uri, headers: HeaderMap, body: Bytes) -> ApiResult {
    let did = s.require_caller(&method, &uri, &headers, &body)?;
    if s.world.require_active(&did, Role::Issuer).is_err() {
        s.world.require_active(&did, Role::Lab)?;
    }
    let req: AnchorRequest = parse(&body)?;
    let receipt = s.world.ledger.submit_anchor(&req.cert_id, req.digest)?;
    Ok((
        StatusCode::ACCEPTED,
        Json(IssueResponse {
            tx_id: receipt.tx_id,
            anchor_url: receipt.anchor_url,
            digest: req.digest,
        }),
    )
        .into_response())
}

async fn anchor_status(State(s): Shared, Path(cert_id): Path<String>) -> ApiResult {
    let id = parse_did(&cert_id)?;
    let url = anchor_url(&s.world.ledger.chain_id(), &id);
    let rec = s.world.ledger.lookup_anchor(&url)?;
    Ok(Json(AnchorStatus {
        anchor_url: url,
        digest: rec.digest,
        height: rec.height,
    })
    .into_response())
}

async fn chain_tip(State(s): Shared) -> Json<ChainTip> {
    let node = s.cluster.entry_node().read();
    Json(ChainTip {
        chain_id: node.chain_id().to_owned(),
        height: node.height(),
        tip: node.tip_digest(),
        authorities: node.genesis().authorities.iter().map(|a| a.name.clone()).collect(),
    })
}

async fn resolve_did(State(s): Shared, Path(did): Path<String>) -> ApiResult {
    let did = parse_did(&did)?;
    let key = s
        .world
        .registry
        .resolve(&did)
        .ok_or_else(|| ApiError::not_found(format!("{did} is not registered")))?;
    Ok(Json(DidDocument { did, public_key: key }).into_response())
}

fn issuer_json(rec: covcert_core::flows::IssuerRecord) -> IssuerStatus {
    IssuerStatus {
        did: rec.did,
        role: rec.role,
        organisation: rec.organisation,
        state: rec.state,
    }
}

async fn register_issuer(State(s): Shared, method: Method, uri: Uri, headers: HeaderMap, body: Bytes) -> ApiResult {
    let req: RegisterIssuerRequest = parse(&body)?;
    check_key_proof(&req.public_key, &method, &uri, &headers, &body)?;
    let (rec, _token) = s
        .world
        .register_issuer(&req.registration_no, &req.branch, &req.email, req.role, req.public_key)?;
    s.persist()?;
    Ok((StatusCode::CREATED, Json(issuer_json(rec))).into_response())
}

async fn issuer_status(State(s): Shared, Path(did): Path<String>) -> ApiResult {
    let did = parse_did(&did)?;
    let rec = s
        .world
        .issuer_record(&did)
        .ok_or_else(|| ApiError::not_found("no such issuer"))?;
    Ok(Json(issuer_json(rec)).into_response())
}

async fn confirm_issuer(State(s): Shared, Path(did): Path<String>, body: Bytes) -> ApiResult {
    let did = parse_did(&did)?;
    let req: ConfirmRequest = parse(&body)?;
    s.world.confirm_token(&did, &req.token, now_secs())?;
    s.persist()?;
    let rec = s.world.issuer_record(&did).expect("just confirmed");
    Ok(Json(issuer_json(rec)).into_response())
}

#[derive(Debug, Deserialize)]
struct OutboxQuery {
    to: Option<String>,
}

/// Simulated mailbox.
async fn outbox(State(s): Shared, Query(q): Query<OutboxQuery>) -> ApiResult {
    let msgs: Vec<_> = s
        .world
        .outbox
        .messages()
        .into_iter()
        .filter(|m| q.to.as_ref().is_none_or(|to| &m.to == to))
        .collect();
    Ok(Json(msgs).into_response())
}

async fn register_holder(State(s): Shared, method: Method, uri: Uri, headers: HeaderMap, body: Bytes) -> ApiResult {
    let req: RegisterHolderRequest = parse(&body)?;
    check_key_proof(&req.public_key, &method, &uri, &headers, &body)?;
    let salt: [u8; 16] = req
        .did_salt
        .as_slice()
        .try_into()
        .map_err(|_| ApiError::bad_request("BadSalt", "did_salt must be 16 bytes"))?;
    let world = s.world.clone();
    // waits for the identity anchor to confirm
    let (did, identity_anchor) = tokio::task::spawn_blocking(move || {
        world.register_holder(req.public_key, &req.document_number, &salt, &req.photo)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string()))??;
    s.persist()?;
    Ok((StatusCode::CREATED, Json(RegisterHolderResponse { did, identity_anchor })).into_response())
}

async fn submit_pending(State(s): Shared, method: Method, uri: Uri, headers: HeaderMap, body: Bytes) -> ApiResult {
    let did = s.require_caller(&method, &uri, &headers, &body)?;
    let entry: covcert_core::flows::PendingEntry = parse(&body)?;
    if entry.certificate.issuer != did {
        return Err(ApiError::forbidden("NotCertificateIssuer", "caller is not the certificate issuer"));
    }
    s.world.submit_pending(entry)?;
    s.persist()?;
    Ok(StatusCode::CREATED.into_response())
}

async fn pending_entry(State(s): Shared, Path(sample_id): Path<String>, method: Method, uri: Uri, headers: HeaderMap) -> ApiResult {
    let did = s.require_caller(&method, &uri, &headers, b"")?;
    s.world.require_active(&did, Role::Lab)?;
    let entry = s
        .world
        .pending_entry(&sample_id)
        .ok_or(FlowError::SampleUnknown)?;
    Ok(Json(entry).into_response())
}

async fn complete_sample(
    State(s): Shared,
    Path(sample_id): Path<String>,
    method: Method,
    uri: Uri,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult {
    let did = s.require_caller(&method, &uri, &headers, &body)?;
    let req: CompleteSampleRequest = parse(&body)?;
    if req.tag.sample_id != sample_id {
        return Err(ApiError::bad_request("TagMismatch", "tag names another sample"));
    }
    let base = s.world.claim_sample(&did, &req.tag)?;
    let done = &req.certificate;
    let digest = done.canonical_digest();
    let probe = Presentation {
        certificate: done.clone(),
        revealed: Vec::new(),
        anchor_url: String::new(),
    };
    let report = verify_presentation_with_digest(&probe, &digest, &digest, s.world.registry.as_ref());
    let chained = done.id == base.id
        && done.status == Status::Complete
        && done.lab_endorsement.as_ref().is_some_and(|lab| {
            lab.signature.signer == did && lab.pending_digest == base.canonical_digest()
        });
    if !(chained && report.issuer_sig && report.lab_sig == Some(true)) {
        s.world.release_sample(&sample_id);
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "BadDelivery",
            "certificate does not extend the pending one under this lab's signature",
        ));
    }
    let receipt = match s.world.ledger.submit_anchor(&done.id, digest) {
        Ok(r) => r,
        Err(e) => {
            s.world.release_sample(&sample_id);
            return Err(e.into());
        }
    };
    s.persist()?;
    Ok((
        StatusCode::ACCEPTED,
        Json(IssueResponse {
            tx_id: receipt.tx_id,
            anchor_url: receipt.anchor_url,
            digest,
        }),
    )
        .into_response())
}

fn pod_path(path: &str) -> String {
    format!("/{path}")
}

async fn pod_list(State(s): Shared, Path(owner): Path<String>, method: Method, uri: Uri, headers: HeaderMap) -> ApiResult {
    let caller = s.caller(&method, &uri, &headers, b"")?;
    let owner = parse_did(&owner)?;
    let paths = s.world.pods.list(&owner, caller.as_ref())?;
    Ok(Json(PodListing { owner, paths }).into_response())
}

#[derive(Debug, Deserialize)]
struct PodQuery {
    version: Option<u64>,
    acl: Option<String>,
    permanent: Option<bool>,
}

async fn pod_get(
    State(s): Shared,
    Path((owner, path)): Path<(String, String)>,
    Query(q): Query<PodQuery>,
    method: Method,
    uri: Uri,
    headers: HeaderMap,
) -> ApiResult {
    let caller = s.caller(&method, &uri, &headers, b"")?;
    let owner = parse_did(&owner)?;
    let path = pod_path(&path);
    let fetched = match q.version {
        Some(v) => s.world.pods.get_version(&owner, caller.as_ref(), &path, v)?,
        None => s.world.pods.get_resource(&owner, caller.as_ref(), &path)?,
    };
    Ok((
        [
            (header::CONTENT_TYPE, fetched.content_type),
            (header::HeaderName::from_static("x-covcert-version"), fetched.version.to_string()),
        ],
        fetched.bytes,
    )
        .into_response())
}

async fn pod_put(
    State(s): Shared,
    Path((owner, path)): Path<(String, String)>,
    Query(q): Query<PodQuery>,
    method: Method,
    uri: Uri,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult {
    let caller = s.caller(&method, &uri, &headers, &body)?;
    let owner = parse_did(&owner)?;
    let path = pod_path(&path);
    if q.acl.is_some() {
        let acl: Vec<AccessRule> = parse(&body)?;
        s.world.pods.set_acl(&owner, caller.as_ref(), &path, acl)?;
        return Ok(StatusCode::NO_CONTENT.into_response());
    }
    let mut opts = PutOptions::typed(&content_type(&headers));
    opts.permanent = q.permanent.unwrap_or(false);
    let version = s
        .world
        .pods
        .put_resource(&owner, caller.as_ref(), &path, body.to_vec(), opts)?;
    Ok((StatusCode::CREATED, Json(UploadResponse { path, version })).into_response())
}

async fn pod_delete(
    State(s): Shared,
    Path((owner, path)): Path<(String, String)>,
    method: Method,
    uri: Uri,
    headers: HeaderMap,
) -> ApiResult {
    let caller = s.caller(&method, &uri, &headers, b"")?;
    let owner = parse_did(&owner)?;
    s.world.pods.delete_resource(&owner, caller.as_ref(), &pod_path(&path))?;
    Ok(StatusCode::NO_CONTENT.into_response())
}

/// A server running on its own thread and runtime.
pub struct ServerHandle {
    pub addr: SocketAddr,
    pub state: Arc<AppState>,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl ServerHandle {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn world(&self) -> &Arc<World> {
        &self.state.world
    }

    pub fn stop(mut self) {
        self.halt();
    }

    fn halt(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.halt();
    }
}

fn runtime(workers: usize) -> Result<tokio::runtime::Runtime, ServeError> {
    let rt = if workers <= 1 {
        tokio::runtime::Builder::new_current_thread().enable_all().build()
    } else {
        tokio::runtime::Builder::new_multi_thread()
            .worker_threads(workers)
            .enable_all()
            .build()
    };
    rt.map_err(|e| ServeError::Runtime(e.to_string()))
}

async fn bind(config: &Config) -> Result<tokio::net::TcpListener, ServeError> {
    tokio::net::TcpListener::bind(config.addr())
        .await
        .map_err(|e| ServeError::BindFailed {
            addr: config.addr(),
            message: e.to_string(),
        })
}

/// Starts a server on a background thread and returns once it listens.
pub fn spawn(config: Config) -> Result<ServerHandle, ServeError> {
    let (ready_tx, ready_rx) = std::sync::mpsc::channel();
    let (stop_tx, stop_rx) = oneshot::channel::<()>();
    let thread = std::thread::Builder::new()
        .name("covcert-server".into())
        .spawn(move || {
            let rt = match runtime(config.workers) {
                Ok(rt) => rt,
                Err(e) => {
                    let _ = ready_tx.send(Err(e));
                    return;
                }
            };
            rt.block_on(async move {
                let started = async {
                    let listener = bind(&config).await?;
                    let state = Arc::new(build_state(&config)?);
                    let addr = listener.local_addr().map_err(|e| ServeError::Runtime(e.to_string()))?;
                    Ok::<_, ServeError>((listener, state, addr))
                };
                let (listener, state) = match started.await {
                    Ok((l, st, addr)) => {
                        let _ = ready_tx.send(Ok((addr, st.clone())));
                        (l, st)
                    }
                    Err(e) => {
                        let _ = ready_tx.send(Err(e));
                        return;
                    }
                };
                let app = router(state);
                let _ = axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = stop_rx.await;
                    })
                    .await;
            });
        })
        .map_err(|e| ServeError::Runtime(e.to_string()))?;
    let (addr, state) = ready_rx
        .recv()
        .map_err(|_| ServeError::Runtime("server thread exited".into()))??;
    Ok(ServerHandle {
        addr,
        state,
        shutdown: Some(stop_tx),
        thread: Some(thread),
    })
}

/// Runs in the foreground until Ctrl-C.
pub fn serve(config: Config, on_ready: impl FnOnce(SocketAddr)) -> Result<(), ServeError> {
    let rt = runtime(config.workers)?;
    rt.block_on(async move {
        let listener = bind(&config).await?;
        let state = Arc::new(build_state(&config)?);
        on_ready(listener.local_addr().map_err(|e| ServeError::Runtime(e.to_string()))?);
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| ServeError::Runtime(e.to_string()))
    })
}
