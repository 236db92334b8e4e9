use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::*;
use crate::credential::{verify_presentation, ClaimValue, Disclosed, Status, PHOTO_CLAIM};
use crate::crypto::KeyResolver;
use crate::ledger::parse_anchor_url;
use crate::qrcodec::{self, QrBody};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailReason {
    /// Certificate still waits for its lab result.
    Pending,
    AnchorMissing,
    /// The anchor URL does not name this certificate on this ledger.
    AnchorUrlMismatch,
    ChecksFailed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub overall: bool,
    pub reason: Option<FailReason>,
    pub certificate_id: Did,
    pub issuer: Did,
    pub status: Status,
    pub photo_bound: bool,
    /// Keys: anchor_match, issuer_sig, holder_sig, commitments,
    /// photo_available, and lab_sig for lab-completed certificates.
    pub checks: BTreeMap<String, bool>,
    pub revealed: Vec<(String, ClaimValue)>,
    /// No photo in the certificate: the holder must show a physical ID.
    pub physical_id_required: bool,
    pub failures: Vec<String>,
}

impl VerifyReport {
    pub fn check(&self, name: &str) -> Option<bool> {
        self.checks.get(name).copied()
    }

    pub fn revealed_value(&self, name: &str) -> Option<&ClaimValue> {
        self.revealed.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }
}

/// Every byte handed to the verifier, in arrival order.
#[derive(Debug, Default)]
pub struct BoundaryLog {
    chunks: Mutex<Vec<Vec<u8>>>,
}

impl BoundaryLog {
    pub fn record(&self, bytes: &[u8]) {
        self.chunks.lock().push(bytes.to_vec());
    }

    pub fn chunks(&self) -> Vec<Vec<u8>> {
        self.chunks.lock().clone()
    }

    pub fn contains(&self, needle: &[u8]) -> bool {
        !needle.is_empty()
            && self
                .chunks
                .lock()
                .iter()
                .any(|c| c.windows(needle.len()).any(|w| w == needle))
    }
}

/// Account-free verifier: reads the ledger, resolves keys, and fetches
/// photos shared by reference as an anonymous pod client.
pub struct Verifier<'a> {
    ledger: &'a dyn AnchorLedger,
    keys: &'a dyn KeyResolver,
    pods: Option<&'a PodServer>,
    boundary: Option<&'a BoundaryLog>,
}

impl<'a> Verifier<'a> {
    pub fn new(ledger: &'a dyn AnchorLedger, keys: &'a dyn KeyResolver) -> Self {
        Verifier {
            ledger,
            keys,
            pods: None,
            boundary: None,
        }
    }

    pub fn with_pods(mut self, pods: &'a PodServer) -> Self {
        self.pods = Some(pods);
        self
    }

    pub fn with_boundary(mut self, log: &'a BoundaryLog) -> Self {
        self.boundary = Some(log);
        self
    }

    fn saw(&self, bytes: &[u8]) {
        if let Some(log) = self.boundary {
            log.record(bytes);
        }
    }

    fn fetch(&self, locator: &str) -> Option<Vec<u8>> {
        let (owner, path) = parse_pod_locator(locator)?;
        let bytes = self.pods?.get_resource(&owner, None, &path).ok()?.bytes;
        self.saw(&bytes);
        Some(bytes)
    }

    pub fn verify(&self, qr_text: &str) -> Result<VerifyReport, FlowError> {
        self.saw(qr_text.as_bytes());
        let payload = qrcodec::decode(qr_text)?;
        let QrBody::Presentation(pres) = payload.body else {
            return Err(QrError::NotAPresentation.into());
        };
        self.saw(pres.to_json().as_bytes());
        let cert = &pres.certificate;
        let mut report = VerifyReport {
            overall: false,
            reason: None,
            certificate_id: cert.id.clone(),
            issuer: cert.issuer.clone(),
            status: cert.status,
            photo_bound: cert.photo_bound,
            checks: BTreeMap::new(),
            revealed: Vec::new(),
            physical_id_required: !cert.photo_bound,
            failures: Vec::new(),
        };
        let fail = |mut r: VerifyReport, reason: FailReason, why: &str| {
            r.reason = Some(reason);
            r.failures.push(why.to_owned());
            Ok(r)
        };

        if cert.status == Status::Pending {
            return fail(report, FailReason::Pending, "certificate is pending");
        }
        let names_cert = parse_anchor_url(&pres.anchor_url)
            .is_ok_and(|(chain, id)| chain == self.ledger.chain_id() && id == cert.id);
        if payload.anchor_url != pres.anchor_url
            || cert.anchor_url.as_deref() != Some(pres.anchor_url.as_str())
            || !names_cert
        {
            return fail(report, FailReason::AnchorUrlMismatch, "anchor url does not name this certificate");
        }
        let anchored = match self.ledger.lookup_anchor(&pres.anchor_url) {
            Ok(rec) => rec.digest,
            Err(LedgerError::NotFound) => {
                return fail(report, FailReason::AnchorMissing, "no anchor on the ledger")
            }
            Err(LedgerError::Pending) => {
                return fail(report, FailReason::Pending, "anchor not yet confirmed")
            }
            Err(e) => return fail(report, FailReason::AnchorUrlMismatch, &e.to_string()),
        };
        self.saw(anchored.to_hex().as_bytes());

        let (mut resolved, missing) = pres.resolve_external(&mut |loc| self.fetch(loc));
        resolved
            .revealed
            .retain(|r| !matches!(r.value, Disclosed::External(_)));
        for name in &missing {
            report.failures.push(format!("claim {name:?} could not be fetched"));
        }

        let pr = verify_presentation(&resolved, &anchored, self.keys);
        let photo_available = cert.photo_bound && pr.revealed.iter().any(|(n, _)| n == PHOTO_CLAIM);
        report.checks.insert("anchor_match".into(), pr.anchor_match);
        report.checks.insert("issuer_sig".into(), pr.issuer_sig);
        report.checks.insert("holder_sig".into(), pr.holder_sig);
        report.checks.insert("commitments".into(), pr.commitments);
        report.checks.insert("photo_available".into(), photo_available);
        if let Some(lab) = pr.lab_sig {
            report.checks.insert("lab_sig".into(), lab);
        }
        report.overall = pr.valid() && (photo_available || !cert.photo_bound);
        if cert.photo_bound && !photo_available {
            report.failures.push("photo-bound certificate without a usable photo".into());
        }
        report.failures.extend(pr.failures);
        report.revealed = pr.revealed;
        if !report.overall {
            report.reason = Some(FailReason::ChecksFailed);
        }
        Ok(report)
    }
}

impl World {
    pub fn verify(&self, qr_text: &str) -> Result<VerifyReport, FlowError> {
        self.verifier().verify(qr_text)
    }
}
