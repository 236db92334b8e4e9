use serde::{Deserialize, Serialize};

use super::*;
use crate::credential::now_secs;
use crate::crypto::{derive_did, digest, generate_keypair, random_bytes, DidSalt, PublicKey};
use crate::encoding::{b64_bytes, put_len_prefixed};
use crate::pod::PutOptions;

pub const TOKEN_TTL_SECS: u64 = 24 * 3600;

const IDENTITY_TAG: u8 = 0x03;

/// Digest anchored for a holder's identity at onboarding and rechecked by
/// issuers before certifying.
pub fn identity_digest(holder: &Did, document_number: &str, photo: &[u8]) -> Digest {
    let mut pre = vec![IDENTITY_TAG];
    put_len_prefixed(&mut pre, holder.to_string().as_bytes());
    put_len_prefixed(&mut pre, document_number.as_bytes());
    put_len_prefixed(&mut pre, photo);
    digest(&pre)
}

/// Secret material that never leaves the holder's phone. Key and DID salt
/// both derive from it, so onboarding twice on one device hits the same pod.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HolderDevice {
    #[serde(with = "b64_bytes")]
    pub seed: Vec<u8>,
}

impl HolderDevice {
    pub fn random() -> Self {
        HolderDevice {
            seed: random_bytes::<32>().to_vec(),
        }
    }

    pub fn from_seed(seed: [u8; 32]) -> Self {
        HolderDevice { seed: seed.to_vec() }
    }

    fn derive(&self, label: &[u8]) -> Digest {
        let mut pre = label.to_vec();
        pre.extend_from_slice(&self.seed);
        digest(&pre)
    }

    pub fn did_salt(&self) -> DidSalt {
        self.derive(b"covcert/did-salt").0[..16].try_into().expect("16 bytes")
    }

    pub fn keypair(&self) -> KeyPair {
        generate_keypair(Some(&self.derive(b"covcert/holder-key").0)).expect("32-byte seed")
    }
}

/// Stored at [`IDENTITY_DOCUMENT_PATH`]; readable by an issuer only while the
/// holder grants it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentityDocument {
    pub document_number: String,
    #[serde(with = "b64_bytes")]
    pub did_salt: Vec<u8>,
}

impl World {
    /// Registry cross-check, email domain check and token dispatch for a
    /// key the applicant already holds.
    pub fn register_issuer(
        &self,
        registration_no: &str,
        branch: &str,
        email: &str,
        role: Role,
        public_key: PublicKey,
    ) -> Result<(IssuerRecord, String), FlowError> {
        let entry = self
            .regulator
            .lookup(registration_no, branch)
            .ok_or(FlowError::RegistryRejected)?
            .clone();
        let domain = match email.split_once('@') {
            Some((local, domain)) if !local.is_empty() && !domain.contains('@') => domain,
            _ => return Err(FlowError::BadEmailDomain(email.to_owned())),
        };
        if !domain.eq_ignore_ascii_case(&entry.domain) {
            return Err(FlowError::BadEmailDomain(email.to_owned()));
        }

        let salt: DidSalt = random_bytes();
        let did = derive_did(&format!("{registration_no}/{branch}"), &salt)?;
        self.registry.register(&did, public_key)?;
        self.pods.create_pod(&did)?;
        let registration = serde_json::json!({
            "registration_no": registration_no,
            "branch": branch,
            "organisation": entry.organisation,
            "email": email,
            "role": role,
        });
        self.pods.put_resource(
            &did,
            Some(&did),
            REGISTRATION_PATH,
            registration.to_string().into_bytes(),
            PutOptions::typed("application/json"),
        )?;

        // hex so it survives copy and paste into a shell
        let token: String = random_bytes::<16>().iter().map(|b| format!("{b:02x}")).collect();
        self.outbox.send(OutboxMessage {
            to: email.to_owned(),
            subject: "Confirm your covcert registration".into(),
            body: format!("Confirmation token for {did}: {token}"),
        })?;
        let record = IssuerRecord {
            did: did.clone(),
            role,
            registration_no: registration_no.to_owned(),
            branch: branch.to_owned(),
            email: email.to_owned(),
            organisation: entry.organisation,
            state: AccountState::PendingEmail,
            token_digest: Some(digest(token.as_bytes())),
            token_issued_at: now_secs(),
        };
        self.issuers.lock().insert(did, record.clone());
        Ok((record, token))
    }

    /// App-side onboarding: fresh key, then [`World::register_issuer`].
    pub fn onboard_issuer(
        &self,
        registration_no: &str,
        branch: &str,
        email: &str,
        role: Role,
    ) -> Result<(IssuerAccount, String), FlowError> {
        let keypair = generate_keypair(None)?;
        let (rec, token) = self.register_issuer(registration_no, branch, email, role, keypair.public_key())?;
        Ok((
            IssuerAccount {
                did: rec.did,
                role,
                organisation: rec.organisation,
                state: rec.state,
                keypair,
            },
            token,
        ))
    }

    /// Redeems the email token. Wrong, expired and reused tokens are all rejected.
    pub fn confirm_token(&self, did: &Did, token: &str, now: u64) -> Result<AccountState, FlowError> {
        let mut issuers = self.issuers.lock();
        let rec = issuers.get_mut(did).ok_or(FlowError::TokenRejected)?;
        if rec.state != AccountState::PendingEmail {
            return Err(FlowError::TokenRejected);
        }
        let expected = rec.token_digest.ok_or(FlowError::TokenRejected)?;
        if digest(token.as_bytes()) != expected || now.saturating_sub(rec.token_issued_at) > TOKEN_TTL_SECS {
            return Err(FlowError::TokenRejected);
        }
        rec.token_digest = None;
        rec.state = AccountState::Active;
        Ok(rec.state)
    }

    pub fn confirm_issuer(&self, account: &mut IssuerAccount, token: &str) -> Result<(), FlowError> {
        self.confirm_issuer_at(account, token, now_secs())
    }

    pub fn confirm_issuer_at(&self, account: &mut IssuerAccount, token: &str, now: u64) -> Result<(), FlowError> {
        account.state = self.confirm_token(&account.did, token, now)?;
        Ok(())
    }

    /// Creates the holder's pod, stores the identity resources and anchors
    /// the identity digest. Returns the DID and the identity anchor URL.
    pub fn register_holder(
        &self,
        public_key: PublicKey,
        document_number: &str,
        did_salt: &DidSalt,
        photo: &[u8],
    ) -> Result<(Did, String), FlowError> {
        if document_number.trim().is_empty() {
            return Err(FlowError::EmptyDocument);
        }
        if photo.is_empty() {
            return Err(FlowError::EmptyPhoto);
        }
        let did = derive_did(document_number, did_salt)?;
        self.pods.create_pod(&did)?;
        self.registry.register(&did, public_key)?;

        let doc = IdentityDocument {
            document_number: document_number.to_owned(),
            did_salt: did_salt.to_vec(),
        };
        self.pods.put_resource(
            &did,
            Some(&did),
            IDENTITY_DOCUMENT_PATH,
            serde_json::to_vec(&doc).expect("serializable"),
            PutOptions::typed("application/json"),
        )?;
        self.pods.put_resource(
            &did,
            Some(&did),
            IDENTITY_PHOTO_PATH,
            photo.to_vec(),
            PutOptions::typed("image/jpeg").permanent(),
        )?;

        let receipt = self
            .ledger
            .submit_anchor(&did, identity_digest(&did, document_number, photo))?;
        self.ledger.await_confirmation(&receipt, self.confirm_timeout)?;
        Ok((did, receipt.anchor_url))
    }

    pub fn onboard_holder(
        &self,
        device: &HolderDevice,
        document_number: &str,
        photo: &[u8],
    ) -> Result<HolderAccount, FlowError> {
        let keypair = device.keypair();
        let (did, identity_anchor) =
            self.register_holder(keypair.public_key(), document_number, &device.did_salt(), photo)?;
        Ok(HolderAccount {
            did,
            keypair,
            identity_anchor,
        })
    }
}
