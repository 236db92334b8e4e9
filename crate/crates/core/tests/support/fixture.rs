//! The fixed certificate that tools/oracle/freeze_fixture.py encodes
//! independently. Shared by the core oracle test and the acceptance suite.

use std::collections::{BTreeMap, BTreeSet};

use covcert_core::credential::{
    holder_countersign, issuer_sign, make_presentation, new_certificate_with, ClaimValue,
    DisclosurePolicy, Presentation, Status,
};
use covcert_core::crypto::{derive_did, digest, generate_keypair, Did, KeyPair, PublicKey};

pub const FIXTURE_JSON: &str = include_str!("../fixtures/presentation_fixture.json");

#[allow(dead_code)]
pub struct Built {
    pub presentation: Presentation,
    pub issuer: (Did, KeyPair),
    pub holder: (Did, KeyPair),
    pub resolver: BTreeMap<Did, PublicKey>,
}

pub fn build() -> Built {
    let issuer_key = generate_keypair(Some(&[0x11; 32])).unwrap();
    let holder_key = generate_keypair(Some(&[0x22; 32])).unwrap();
    let issuer = derive_did("GPHC-1040221", &[0xA1; 16]).unwrap();
    let holder = derive_did("DL1234567", &[0xB2; 16]).unwrap();
    let id = Did::from_digest(&digest(b"fixture-certificate"));
    let resolver: BTreeMap<Did, PublicKey> = [
        (issuer.clone(), issuer_key.public_key()),
        (holder.clone(), holder_key.public_key()),
    ]
    .into();

    let mut next = 0u8;
    let mut salts = || {
        next += 1;
        [next; 16]
    };
    let held = new_certificate_with(
        &issuer,
        &holder,
        vec![
            ("test_type".into(), ClaimValue::from("antigen")),
            ("result".into(), ClaimValue::from("negative")),
            ("name".into(), ClaimValue::from("Alex Example")),
        ],
        Some(b"\x89PNG\r\n\x1a\nfixture-photo".to_vec()),
        Status::Issued,
        id.clone(),
        1_700_000_000,
        &mut salts,
    )
    .unwrap();
    let cert = issuer_sign(&held.certificate, &issuer_key, &resolver).unwrap();
    let mut cert = holder_countersign(&cert, &holder_key, &resolver).unwrap();
    cert.anchor_url = Some(format!("anchor://covcert-local/{id}"));
    let reveal: BTreeSet<String> = ["result".to_owned(), "test_type".to_owned()].into();
    let policy = DisclosurePolicy {
        force_photo: true,
        ..Default::default()
    };
    let presentation = make_presentation(&cert, &held.claims, &reveal, &policy).unwrap();
    Built {
        presentation,
        issuer: (issuer, issuer_key),
        holder: (holder, holder_key),
        resolver,
    }
}

pub fn expected(field: &str) -> String {
    let v: serde_json::Value = serde_json::from_str(FIXTURE_JSON).unwrap();
    v[field].as_str().unwrap().to_owned()
}
