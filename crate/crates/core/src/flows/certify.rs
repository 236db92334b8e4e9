use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::*;
use crate::credential::{
    self, holder_countersign, issuer_sign, make_presentation, new_certificate, now_secs, Claim,
    ClaimValue, DisclosurePolicy, HeldCertificate, Status, PHOTO_CLAIM,
};
use crate::crypto::{derive_did, random_bytes};
use crate::ledger::anchor_url;
use crate::pod::{AccessRule, Agent, Mode, PutOptions};
use crate::qrcodec::{self, QrBody, QrPayload, SampleTag, ENVELOPE_VERSION};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhotoDelivery {
    /// Inline when the QR has room, otherwise by reference.
    #[default]
    Auto,
    Inline,
    /// A public copy in the holder's pod, fetched by the verifier.
    Reference,
}

#[derive(Debug, Clone, Default)]
pub struct CertifyOptions {
    pub photo_binding: bool,
    /// Claims revealed by the QR handed over at issue; all claims when unset.
    pub reveal: Option<BTreeSet<String>>,
    pub photo_delivery: PhotoDelivery,
}

impl CertifyOptions {
    pub fn with_photo() -> Self {
        CertifyOptions {
            photo_binding: true,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct Issued {
    pub certificate: Certificate,
    pub payload: QrPayload,
    pub qr_text: String,
}

/// Lab result as dropped into the holder's inbox.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Delivery {
    certificate: Certificate,
    claims: Vec<Claim>,
}

fn public_write() -> Vec<AccessRule> {
    vec![AccessRule::new(Agent::Public, &[Mode::Write])]
}

impl World {
    /// Identity steps (A) and (B): with the holder's temporary grant the
    /// issuer reads the identity resources, recomputes the identity digest
    /// and compares it with the ledger. Returns the photo.
    fn check_identity(&self, issuer: &Did, holder: &Did) -> Result<Vec<u8>, FlowError> {
        let paths = [IDENTITY_DOCUMENT_PATH, IDENTITY_PHOTO_PATH];
        for p in paths {
            self.pods.set_acl(holder, Some(holder), p, vec![AccessRule::read(issuer)])?;
        }
        let read = (|| {
            let doc = self.pods.get_resource(holder, Some(issuer), IDENTITY_DOCUMENT_PATH)?;
            let photo = self.pods.get_resource(holder, Some(issuer), IDENTITY_PHOTO_PATH)?;
            Ok::<_, FlowError>((doc.bytes, photo.bytes))
        })();
        for p in paths {
            self.pods.set_acl(holder, Some(holder), p, Vec::new())?;
        }
        let (doc, photo) = read?;

        let doc: IdentityDocument =
            serde_json::from_slice(&doc).map_err(|_| FlowError::IdentityMismatch)?;
        let salt: [u8; 16] = doc
            .did_salt
            .as_slice()
            .try_into()
            .map_err(|_| FlowError::IdentityMismatch)?;
        if derive_did(&doc.document_number, &salt).ok().as_ref() != Some(holder) {
            return Err(FlowError::IdentityMismatch);
        }
        let url = anchor_url(&self.ledger.chain_id(), holder);
        let anchored = match self.ledger.lookup_anchor(&url) {
            Ok(rec) => rec.digest,
            Err(LedgerError::NotFound) | Err(LedgerError::Pending) => {
                return Err(FlowError::IdentityMismatch)
            }
            Err(e) => return Err(e.into()),
        };
        if identity_digest(holder, &doc.document_number, &photo) != anchored {
            return Err(FlowError::IdentityMismatch);
        }
        Ok(photo)
    }

    fn store_held(&self, holder: &HolderAccount, held: &HeldCertificate) -> Result<(), FlowError> {
        self.pods.put_resource(
            &holder.did,
            Some(&holder.did),
            &cert_path(&held.certificate.id),
            serde_json::to_vec(held).expect("serializable"),
            PutOptions::typed("application/json"),
        )?;
        Ok(())
    }

    pub fn load_held(&self, holder: &HolderAccount, cert_id: &Did) -> Result<HeldCertificate, FlowError> {
        let fetched = match self.pods.get_resource(&holder.did, Some(&holder.did), &cert_path(cert_id)) {
            Ok(f) => f,
            Err(PodError::NotFound(_)) => return Err(FlowError::NoSuchCertificate(cert_id.clone())),
            Err(e) => return Err(e.into()),
        };
        serde_json::from_slice(&fetched.bytes)
            .map_err(|e| FlowError::Credential(CredentialError::Malformed(e.to_string())))
    }

    /// Every certificate in the holder's pod.
    pub fn held_certificates(&self, holder: &HolderAccount) -> Result<Vec<HeldCertificate>, FlowError> {
        let mut out = Vec::new();
        for path in self.pods.list(&holder.did, Some(&holder.did))? {
            if let Some(id) = path.strip_prefix("/certs/") {
                let id: Did = format!("did:cov:{id}")
                    .parse()
                    .map_err(|_| PodError::Corrupt(path.clone()))?;
                out.push(self.load_held(holder, &id)?);
            }
        }
        Ok(out)
    }

    fn anchor(&self, cert: &mut Certificate) -> Result<(), FlowError> {
        let receipt = self.ledger.submit_anchor(&cert.id, cert.canonical_digest())?;
        self.ledger.await_confirmation(&receipt, self.confirm_timeout)?;
        cert.anchor_url = Some(receipt.anchor_url);
        Ok(())
    }

    pub fn certify(
        &self,
        issuer: &IssuerAccount,
        holder: &HolderAccount,
        claims: Vec<(String, ClaimValue)>,
        options: &CertifyOptions,
    ) -> Result<Issued, FlowError> {
        self.require_active(&issuer.did, Role::Issuer)?;
        let photo = self.check_identity(&issuer.did, &holder.did)?;
        let reveal = options
            .reveal
            .clone()
            .unwrap_or_else(|| claims.iter().map(|(n, _)| n.clone()).collect());

        let held = new_certificate(
            &issuer.did,
            &holder.did,
            claims,
            options.photo_binding.then_some(photo),
            Status::Complete,
        )?;
        let mut cert = issuer_sign(&held.certificate, &issuer.keypair, self.registry.as_ref())?;
        cert = holder_countersign(&cert, &holder.keypair, self.registry.as_ref())?;
        self.anchor(&mut cert)?;
        let held = HeldCertificate {
            certificate: cert,
            claims: held.claims,
        };
        self.store_held(holder, &held)?;
        self.present(holder, &held.certificate.id, &reveal, options.photo_delivery)
    }

    pub fn certify_vaccination(
        &self,
        issuer: &IssuerAccount,
        holder: &HolderAccount,
        vaccine_source: &str,
        vaccine_batch: &str,
        options: &CertifyOptions,
    ) -> Result<Issued, FlowError> {
        for (name, value) in [("vaccine_source", vaccine_source), ("vaccine_batch", vaccine_batch)] {
            if value.trim().is_empty() {
                return Err(FlowError::MissingClaim(name.to_owned()));
            }
        }
        let claims = vec![
            ("event".to_owned(), ClaimValue::from("vaccination")),
            ("vaccine_source".to_owned(), vaccine_source.into()),
            ("vaccine_batch".to_owned(), vaccine_batch.into()),
            ("administered_at".to_owned(), now_secs().to_string().as_str().into()),
        ];
        self.certify(issuer, holder, claims, options)
    }

    /// Holder-side: builds and encodes a presentation of a stored certificate.
    pub fn present(
        &self,
        holder: &HolderAccount,
        cert_id: &Did,
        reveal: &BTreeSet<String>,
        delivery: PhotoDelivery,
    ) -> Result<Issued, FlowError> {
        let held = self.load_held(holder, cert_id)?;
        let cert = &held.certificate;
        let mut policy = DisclosurePolicy {
            force_photo: true,
            ..Default::default()
        };
        let inline = |policy: &DisclosurePolicy| -> Result<(QrPayload, Result<String, QrError>), FlowError> {
            let pres = make_presentation(cert, &held.claims, reveal, policy)?;
            let payload = QrPayload::presentation(pres);
            let text = qrcodec::encode(&payload);
            Ok((payload, text))
        };
        let by_reference = match delivery {
            PhotoDelivery::Inline => false,
            PhotoDelivery::Reference => cert.photo_bound,
            PhotoDelivery::Auto => {
                let (payload, text) = inline(&policy)?;
                match text {
                    Err(QrError::PayloadTooLarge { .. }) if cert.photo_bound => true,
                    text => {
                        return Ok(Issued {
                            certificate: cert.clone(),
                            payload,
                            qr_text: text?,
                        })
                    }
                }
            }
        };
        if by_reference {
            let photo = held
                .claim(PHOTO_CLAIM)
                .ok_or_else(|| CredentialError::UnknownClaim(PHOTO_CLAIM.to_owned()))?;
            let path = format!("/shared/{}/photo", cert.id.identifier());
            self.pods.put_resource(
                &holder.did,
                Some(&holder.did),
                &path,
                photo.value.as_bytes().to_vec(),
                PutOptions::typed("image/jpeg").with_acl(vec![AccessRule::public_read()]),
            )?;
            policy
                .by_reference
                .insert(PHOTO_CLAIM.to_owned(), pod_locator(&holder.did, &path));
        }
        let (payload, text) = inline(&policy)?;
        Ok(Issued {
            certificate: cert.clone(),
            payload,
            qr_text: text?,
        })
    }

    /// Off-site lab variant, first half: a pending certificate naming only the
    /// test and sample, plus the tag that travels with the sample.
    pub fn certify_pending(
        &self,
        issuer: &IssuerAccount,
        holder: &HolderAccount,
        sample_id: &str,
        test_type: &str,
    ) -> Result<Issued, FlowError> {
        self.require_active(&issuer.did, Role::Issuer)?;
        if sample_id.trim().is_empty() {
            return Err(FlowError::MissingClaim("sample_id".into()));
        }
        if self.pending.lock().contains_key(sample_id) {
            return Err(FlowError::DuplicateSample(sample_id.to_owned()));
        }
        self.check_identity(&issuer.did, &holder.did)?;
        let held = new_certificate(
            &issuer.did,
            &holder.did,
            vec![
                ("test_type".to_owned(), test_type.into()),
                ("sample_id".to_owned(), sample_id.into()),
            ],
            None,
            Status::Pending,
        )?;
        let cert = issuer_sign(&held.certificate, &issuer.keypair, self.registry.as_ref())?;
        let held = HeldCertificate {
            certificate: cert.clone(),
            claims: held.claims,
        };
        self.store_held(holder, &held)?;
        for path in [inbox_path(&cert.id), notification_path(&cert.id)] {
            self.pods.put_resource(
                &holder.did,
                Some(&holder.did),
                &path,
                Vec::new(),
                PutOptions::typed("application/json").with_acl(public_write()),
            )?;
        }

        let tag = SampleTag {
            sample_id: sample_id.to_owned(),
            holder_did: holder.did.clone(),
            pending_cert_id: cert.id.clone(),
        };
        self.submit_pending(PendingEntry {
            sample_id: sample_id.to_owned(),
            holder: holder.did.clone(),
            certificate: cert.clone(),
            completed: false,
        })?;
        let payload = QrPayload {
            version: ENVELOPE_VERSION,
            anchor_url: anchor_url(&self.ledger.chain_id(), &cert.id),
            body: QrBody::SampleTag(tag),
        };
        let qr_text = qrcodec::encode(&payload)?;
        Ok(Issued {
            certificate: cert,
            payload,
            qr_text,
        })
    }

    /// Off-site lab variant, second half: the lab adds its results, anchors
    /// the completed certificate and drops it into the holder's inbox.
    pub fn lab_complete(
        &self,
        lab: &IssuerAccount,
        tag: &SampleTag,
        results: Vec<(String, ClaimValue)>,
    ) -> Result<Certificate, FlowError> {
        let base = self.claim_sample(&lab.did, tag)?;
        let run = || -> Result<Certificate, FlowError> {
            let (mut done, added) = credential::lab_complete(
                &base,
                results,
                &lab.did,
                &lab.keypair,
                self.registry.as_ref(),
                &mut random_bytes::<16>,
            )?;
            self.anchor(&mut done)?;
            let delivery = Delivery {
                certificate: done.clone(),
                claims: added,
            };
            self.pods.put_resource(
                &tag.holder_did,
                Some(&lab.did),
                &inbox_path(&done.id),
                serde_json::to_vec(&delivery).expect("serializable"),
                PutOptions::typed("application/json"),
            )?;
            let note = serde_json::json!({
                "certificate": done.id,
                "sample_id": tag.sample_id,
                "status": "complete",
                "lab": lab.did,
            });
            self.pods.put_resource(
                &tag.holder_did,
                Some(&lab.did),
                &notification_path(&done.id),
                note.to_string().into_bytes(),
                PutOptions::typed("application/json"),
            )?;
            Ok(done)
        };
        let out = run();
        if out.is_err() {
            self.release_sample(&tag.sample_id);
        }
        out
    }

    /// Marks the sample as being completed by `lab` and returns the pending
    /// certificate. Undo with [`World::release_sample`] on failure.
    pub fn claim_sample(&self, lab: &Did, tag: &SampleTag) -> Result<Certificate, FlowError> {
        self.require_active(lab, Role::Lab)?;
        let mut queue = self.pending.lock();
        let entry = queue.get_mut(&tag.sample_id).ok_or(FlowError::SampleUnknown)?;
        if entry.certificate.id != tag.pending_cert_id || entry.holder != tag.holder_did {
            return Err(FlowError::SampleUnknown);
        }
        if entry.completed {
            return Err(FlowError::AlreadyComplete);
        }
        entry.completed = true;
        Ok(entry.certificate.clone())
    }

    pub fn release_sample(&self, sample_id: &str) {
        if let Some(entry) = self.pending.lock().get_mut(sample_id) {
            entry.completed = false;
        }
    }

    /// Queues an issuer-signed pending certificate for its lab.
    pub fn submit_pending(&self, entry: PendingEntry) -> Result<(), FlowError> {
        let cert = &entry.certificate;
        self.require_active(&cert.issuer, Role::Issuer)?;
        let signed = cert.issuer_signature.as_ref().is_some_and(|sig| {
            sig.signer == cert.issuer && sig.verify_with(self.registry.as_ref(), cert.canonical_digest().as_bytes())
        });
        if cert.status != Status::Pending || !signed || entry.holder != cert.holder || entry.completed {
            return Err(FlowError::BadDelivery);
        }
        let mut queue = self.pending.lock();
        if queue.contains_key(&entry.sample_id) {
            return Err(FlowError::DuplicateSample(entry.sample_id));
        }
        queue.insert(entry.sample_id.clone(), entry);
        Ok(())
    }

    /// Holder app: takes completed certificates out of the inbox, checks they
    /// extend the pending ones and match the ledger, countersigns and stores them.
    pub fn holder_accept_results(&self, holder: &HolderAccount) -> Result<Vec<HeldCertificate>, FlowError> {
        let me = Some(&holder.did);
        let mut accepted = Vec::new();
        for path in self.pods.list(&holder.did, me)? {
            if !path.starts_with("/inbox/") {
                continue;
            }
            let bytes = self.pods.get_resource(&holder.did, me, &path)?.bytes;
            if bytes.is_empty() {
                continue;
            }
            let delivery: Delivery = serde_json::from_slice(&bytes).map_err(|_| FlowError::BadDelivery)?;
            let done = delivery.certificate;
            let pending = self.load_held(holder, &done.id)?;
            let extends = done
                .pending_form()
                .is_some_and(|p| p.canonical_digest() == pending.certificate.canonical_digest());
            let url = done.anchor_url.clone().ok_or(FlowError::BadDelivery)?;
            let anchored = self.ledger.lookup_anchor(&url)?.digest;
            if !extends || anchored != done.canonical_digest() {
                return Err(FlowError::BadDelivery);
            }
            let signed = holder_countersign(&done, &holder.keypair, self.registry.as_ref())?;
            let mut claims = pending.claims;
            claims.extend(delivery.claims);
            let held = HeldCertificate {
                certificate: signed,
                claims,
            };
            self.store_held(holder, &held)?;
            self.pods.delete_resource(&holder.did, me, &path)?;
            accepted.push(held);
        }
        Ok(accepted)
    }
}
