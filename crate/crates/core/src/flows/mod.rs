//! Role workflows: onboarding, certification, presentation, verification,
//! the lab and vaccination variants, and opt-out.
//!
//! A [`World`] bundles the shared services (DID registry, ledger, pod host,
//! cloud replica, regulator fixture, outbox). Accounts are plain values held
//! by whoever plays the role; the world keeps no claim data of its own.

mod certify;
mod onboarding;
mod optout;
mod verify;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::credential::{Certificate, CredentialError};
use crate::crypto::{CryptoError, Did, DidRegistry, Digest, KeyPair, PublicKey};
use crate::ledger::{AnchorLedger, Cluster, LedgerError, DEFAULT_CHAIN_ID};
use crate::pod::{PodError, PodServer};
use crate::qrcodec::QrError;

pub use certify::{CertifyOptions, Issued, PhotoDelivery};
pub use onboarding::{identity_digest, HolderDevice, IdentityDocument, TOKEN_TTL_SECS};
pub use optout::ErasureReport;
pub use verify::{BoundaryLog, FailReason, Verifier, VerifyReport};

pub const IDENTITY_DOCUMENT_PATH: &str = "/identity/document";
pub const IDENTITY_PHOTO_PATH: &str = "/identity/photo";
pub const REGISTRATION_PATH: &str = "/registration";

#[derive(Debug, thiserror::Error)]
pub enum FlowError {
    #[error("registration and branch not found in the regulator registry")]
    RegistryRejected,
    #[error("email {0:?} is not at the registered domain")]
    BadEmailDomain(String),
    #[error("confirmation token rejected")]
    TokenRejected,
    #[error("document number is empty")]
    EmptyDocument,
    #[error("identity photo is empty")]
    EmptyPhoto,
    #[error("holder identity does not match its ledger anchor")]
    IdentityMismatch,
    #[error("issuer account is not active")]
    IssuerInactive,
    #[error("account is not a lab")]
    NotALab,
    #[error("no pending certificate for this sample")]
    SampleUnknown,
    #[error("sample {0:?} already has a pending certificate")]
    DuplicateSample(String),
    #[error("sample already completed")]
    AlreadyComplete,
    #[error("claim {0:?} is missing")]
    MissingClaim(String),
    #[error("holder has no certificate {0}")]
    NoSuchCertificate(Did),
    #[error("delivered certificate does not extend the pending one")]
    BadDelivery,
    #[error(transparent)]
    Pod(#[from] PodError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Credential(#[from] CredentialError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Qr(#[from] QrError),
    #[error("outbox: {0}")]
    Outbox(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Issuer,
    Lab,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccountState {
    PendingRegistry,
    PendingEmail,
    Active,
}

/// Server-side record of an issuer or lab registration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IssuerRecord {
    pub did: Did,
    pub role: Role,
    pub registration_no: String,
    pub branch: String,
    pub email: String,
    pub organisation: String,
    pub state: AccountState,
    /// Digest of the outstanding email token; the token itself is never kept.
    pub token_digest: Option<Digest>,
    pub token_issued_at: u64,
}

/// What an issuer's app keeps. `state` mirrors the server record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IssuerAccount {
    pub did: Did,
    pub role: Role,
    pub organisation: String,
    pub state: AccountState,
    pub keypair: KeyPair,
}

impl IssuerAccount {
    pub fn is_active(&self) -> bool {
        self.state == AccountState::Active
    }
}

/// What the holder's app keeps. The document number lives only in the pod.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HolderAccount {
    pub did: Did,
    pub keypair: KeyPair,
    pub identity_anchor: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub registration_no: String,
    pub branch: String,
    pub organisation: String,
    pub domain: String,
}

/// Stand-in for the regulator's register of pharmacies and labs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Regulator {
    pub entries: Vec<RegistryEntry>,
}

impl Regulator {
    pub fn fixture() -> Self {
        let e = |reg: &str, branch: &str, org: &str, domain: &str| RegistryEntry {
            registration_no: reg.into(),
            branch: branch.into(),
            organisation: org.into(),
            domain: domain.into(),
        };
        Regulator {
            entries: vec![
                e("GPHC-1040221", "Milton Keynes", "Walton Pharmacy", "waltonpharmacy.co.uk"),
                e("GPHC-1187730", "Leeds Central", "Northgate Chemists", "northgate-chemists.co.uk"),
                e("GPHC-2209514", "Bristol Harbourside", "Quayside Health", "quaysidehealth.com"),
                e("UKAS-8842", "Cambridge", "Fenland Diagnostics", "fenlanddx.org"),
            ],
        }
    }

    pub fn lookup(&self, registration_no: &str, branch: &str) -> Option<&RegistryEntry> {
        self.entries
            .iter()
            .find(|e| e.registration_no == registration_no && e.branch == branch)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutboxMessage {
    pub to: String,
    pub subject: String,
    pub body: String,
}

/// Outgoing email, kept in memory and optionally appended to a JSON-lines file.
#[derive(Debug, Default)]
pub struct Outbox {
    messages: Mutex<Vec<OutboxMessage>>,
    file: Option<PathBuf>,
}

impl Outbox {
    pub fn to_file(path: PathBuf) -> Self {
        Outbox {
            messages: Mutex::default(),
            file: Some(path),
        }
    }

    pub fn send(&self, msg: OutboxMessage) -> Result<(), FlowError> {
        if let Some(path) = &self.file {
            let line = serde_json::to_string(&msg).map_err(|e| FlowError::Outbox(e.to_string()))?;
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| FlowError::Outbox(e.to_string()))?;
            writeln!(f, "{line}").map_err(|e| FlowError::Outbox(e.to_string()))?;
        }
        self.messages.lock().push(msg);
        Ok(())
    }

    pub fn messages(&self) -> Vec<OutboxMessage> {
        self.messages.lock().clone()
    }
}

/// A pending certificate waiting for its lab result. Holds commitments only.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingEntry {
    pub sample_id: String,
    pub holder: Did,
    pub certificate: Certificate,
    pub completed: bool,
}

pub struct World {
    pub registry: Arc<DidRegistry>,
    pub ledger: Arc<dyn AnchorLedger>,
    /// Pod host the holders' apps talk to.
    pub pods: Arc<PodServer>,
    /// Cloud replica for backup and restore.
    pub cloud: Arc<PodServer>,
    pub regulator: Regulator,
    pub outbox: Outbox,
    pub confirm_timeout: Duration,
    issuers: Mutex<BTreeMap<Did, IssuerRecord>>,
    pending: Mutex<BTreeMap<String, PendingEntry>>,
}

/// Persistent service-side state that is not already in pods or the ledger.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct WorldState {
    pub keys: BTreeMap<Did, PublicKey>,
    pub issuers: Vec<IssuerRecord>,
    pub pending: Vec<PendingEntry>,
}

impl World {
    pub fn new(ledger: Arc<dyn AnchorLedger>, pods: Arc<PodServer>, cloud: Arc<PodServer>) -> Self {
        World {
            registry: Arc::new(DidRegistry::new()),
            ledger,
            pods,
            cloud,
            regulator: Regulator::fixture(),
            outbox: Outbox::default(),
            confirm_timeout: Duration::from_secs(10),
            issuers: Mutex::default(),
            pending: Mutex::default(),
        }
    }

    /// Five-authority synchronous ledger and in-memory pod hosts.
    pub fn in_memory() -> Self {
        World::new(
            Arc::new(Cluster::new(DEFAULT_CHAIN_ID, 5)),
            Arc::new(PodServer::in_memory("pods")),
            Arc::new(PodServer::in_memory("cloud")),
        )
    }

    pub fn with_registry(mut self, registry: Arc<DidRegistry>) -> Self {
        self.registry = registry;
        self
    }

    pub fn with_regulator(mut self, regulator: Regulator) -> Self {
        self.regulator = regulator;
        self
    }

    pub fn with_outbox(mut self, outbox: Outbox) -> Self {
        self.outbox = outbox;
        self
    }

    pub fn pending_entry(&self, sample_id: &str) -> Option<PendingEntry> {
        self.pending.lock().get(sample_id).cloned()
    }

    pub fn issuer_record(&self, did: &Did) -> Option<IssuerRecord> {
        self.issuers.lock().get(did).cloned()
    }

    /// Active issuer (or lab, when `role` says so) or an error.
    pub fn require_active(&self, did: &Did, role: Role) -> Result<IssuerRecord, FlowError> {
        let rec = self.issuer_record(did).ok_or(FlowError::IssuerInactive)?;
        if rec.role != role {
            return Err(match role {
                Role::Lab => FlowError::NotALab,
                Role::Issuer => FlowError::IssuerInactive,
            });
        }
        if rec.state != AccountState::Active {
            return Err(FlowError::IssuerInactive);
        }
        Ok(rec)
    }

    pub fn state(&self) -> WorldState {
        WorldState {
            keys: self.registry.snapshot(),
            issuers: self.issuers.lock().values().cloned().collect(),
            pending: self.pending.lock().values().cloned().collect(),
        }
    }

    pub fn load_state(&self, state: WorldState) -> Result<(), FlowError> {
        for (did, key) in state.keys {
            self.registry.register(&did, key)?;
        }
        self.issuers
            .lock()
            .extend(state.issuers.into_iter().map(|r| (r.did.clone(), r)));
        self.pending
            .lock()
            .extend(state.pending.into_iter().map(|e| (e.sample_id.clone(), e)));
        Ok(())
    }

    pub fn verifier(&self) -> Verifier<'_> {
        Verifier::new(self.ledger.as_ref(), self.registry.as_ref()).with_pods(&self.pods)
    }
}

fn cert_path(id: &Did) -> String {
    format!("/certs/{}", id.identifier())
}

fn inbox_path(id: &Did) -> String {
    format!("/inbox/{}", id.identifier())
}

fn notification_path(id: &Did) -> String {
    format!("/notifications/{}", id.identifier())
}

/// `pod://<owner did>/<path>`
pub fn pod_locator(owner: &Did, path: &str) -> String {
    format!("pod://{owner}{path}")
}

pub fn parse_pod_locator(locator: &str) -> Option<(Did, String)> {
    let rest = locator.strip_prefix("pod://")?;
    let slash = rest.find('/')?;
    let owner = rest[..slash].parse().ok()?;
    Some((owner, rest[slash..].to_owned()))
}
