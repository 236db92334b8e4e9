mod common;

use std::collections::{BTreeMap, BTreeSet};

use reqwest::{Method, StatusCode};

use common::*;
use covcert_core::credential::{
    self, holder_countersign, issuer_sign, make_presentation, new_certificate, ClaimValue, DisclosurePolicy,
    HeldCertificate, Status,
};
use covcert_core::crypto::{random_bytes, Did, KeyPair, PublicKey};
use covcert_core::flows::{AccountState, FailReason, HolderDevice, Role};
use covcert_core::pod::{AccessRule, Agent, Mode};
use covcert_gateway::api::*;
use covcert_gateway::config::Config;
use covcert_gateway::server::{self, ServeError};

fn signed(issuer: (&Did, &KeyPair), holder: (&Did, &KeyPair)) -> HeldCertificate {
    let keys: BTreeMap<Did, PublicKey> = BTreeMap::from([
        (issuer.0.clone(), issuer.1.public_key()),
        (holder.0.clone(), holder.1.public_key()),
    ]);
    let mut held = new_certificate(
        issuer.0,
        holder.0,
        vec![("test_type".into(), "PCR".into()), ("result".into(), "negative".into())],
        None,
        Status::Complete,
    )
    .unwrap();
    let cert = issuer_sign(&held.certificate, issuer.1, &keys).unwrap();
    held.certificate = holder_countersign(&cert, holder.1, &keys).unwrap();
    held
}

#[test]
fn ping_answers_with_server_time() {
    let srv = start(1000);
    let api = Api::new(&srv);
    let r = api.get("/ping");
    assert_eq!(r.status, StatusCode::OK);
    let pong: Pong = r.json();
    assert_eq!(pong.message, "pong");
    assert!(pong.server_time_ms > 1_600_000_000_000);
}

#[test]
fn occupied_port_is_bind_failed() {
    let srv = start(1000);
    let taken = Config {
        port: srv.addr.port(),
        ..Config::default()
    };
    assert!(matches!(server::spawn(taken), Err(ServeError::BindFailed { .. })));
}

#[test]
fn issuer_registration_checks() {
    let srv = start(1000);
    let api = Api::new(&srv);
    let (_, _, r) = api.register_issuer(Role::Issuer, "GPHC-0000000", "Nowhere", "x@waltonpharmacy.co.uk");
    assert_eq!((r.status, r.error_kind().as_str()), (StatusCode::UNPROCESSABLE_ENTITY, "RegistryRejected"));
    let (_, _, r) = api.register_issuer(Role::Issuer, "GPHC-1040221", "Milton Keynes", "x@gmail.com");
    assert_eq!(r.error_kind(), "BadEmailDomain");

    // proof made with another key
    let other = covcert_core::crypto::generate_keypair(None).unwrap();
    let body = serde_json::to_vec(&RegisterIssuerRequest {
        registration_no: "GPHC-1040221".into(),
        branch: "Milton Keynes".into(),
        email: "a@waltonpharmacy.co.uk".into(),
        role: Role::Issuer,
        public_key: covcert_core::crypto::generate_keypair(None).unwrap().public_key(),
    })
    .unwrap();
    let proof = key_proof_header(&other, "POST", "/issuers", &body);
    assert_eq!(api.raw(Method::POST, "/issuers", body, &[proof]).status, StatusCode::UNAUTHORIZED);

    let email = "pending@waltonpharmacy.co.uk";
    let (did, _, r) = api.register_issuer(Role::Issuer, "GPHC-1040221", "Milton Keynes", email);
    assert_eq!(r.status, StatusCode::CREATED);
    let status: IssuerStatus = api.get(&format!("/issuers/{did}")).json();
    assert_eq!(status.state, AccountState::PendingEmail);
    let bad = api.post(&format!("/issuers/{did}/confirm"), &ConfirmRequest { token: "nope".into() }, None);
    assert_eq!(bad.status, StatusCode::FORBIDDEN);
    let token = api.token_for(&did, email);
    let ok = api.post(&format!("/issuers/{did}/confirm"), &ConfirmRequest { token: token.clone() }, None);
    assert_eq!(ok.json::<IssuerStatus>().state, AccountState::Active);
    let again = api.post(&format!("/issuers/{did}/confirm"), &ConfirmRequest { token }, None);
    assert_eq!(again.error_kind(), "TokenRejected");
    let doc: DidDocument = api.get(&format!("/dids/{did}")).json();
    assert_eq!(doc.did, did);
    assert_eq!(api.get(&format!("/dids/{}", Did::random())).status, StatusCode::NOT_FOUND);
}

#[test]
fn issue_and_verify_in_both_hash_modes() {
    let srv = start(200);
    let api = Api::new(&srv);
    let (issuer, ikey) = api.active_issuer(Role::Issuer);
    let device = HolderDevice::random();
    let r = api.register_holder(&device, "DL7654321", b"\xff\xd8photo");
    assert_eq!(r.status, StatusCode::CREATED);
    let holder: RegisterHolderResponse = r.json();
    assert_eq!(api.register_holder(&device, "DL7654321", b"\xff\xd8photo").error_kind(), "PodExists");
    let hkey = device.keypair();

    for mode in ["local", "server"] {
        let held = signed((&issuer, &ikey), (&holder.did, &hkey));
        let mut cert = held.certificate.clone();
        let digest = (mode == "local").then(|| cert.canonical_digest());
        let pq = format!("/issue?hash={mode}");
        let req = IssueRequest {
            certificate: cert.clone(),
            digest,
        };

        assert_eq!(api.post(&pq, &req, None).status, StatusCode::UNAUTHORIZED);
        assert_eq!(api.post(&pq, &req, Some((&hkey, &holder.did))).status, StatusCode::FORBIDDEN);
        let r = api.post(&pq, &req, Some((&ikey, &issuer)));
        assert_eq!(r.status, StatusCode::ACCEPTED, "{}", String::from_utf8_lossy(&r.body));
        let issued: IssueResponse = r.json();
        assert_eq!(issued.digest, cert.canonical_digest());
        assert_eq!(api.post(&pq, &req, Some((&ikey, &issuer))).error_kind(), "DuplicateAnchor");

        let status = api.wait_anchored(&cert.id);
        assert_eq!(status.digest, cert.canonical_digest());
        cert.anchor_url = Some(issued.anchor_url);
        let reveal: BTreeSet<String> = ["result".to_owned()].into();
        let pres = make_presentation(&cert, &held.claims, &reveal, &DisclosurePolicy::default()).unwrap();
        let vq = format!("/verify?hash={mode}");
        let v: VerifyResponse = api
            .post(&vq, &VerifyRequest { presentation: pres.clone(), digest }, None)
            .json();
        assert!(v.valid, "{v:?}");
        assert_eq!(v.report.unwrap().revealed, vec![("result".to_owned(), ClaimValue::from("negative"))]);

        let mut forged = pres.clone();
        forged.revealed[0].value = credential::Disclosed::Inline("positive".into());
        let v: VerifyResponse = api.post(&vq, &VerifyRequest { presentation: forged, digest }, None).json();
        assert!(!v.valid);
        assert_eq!(v.reason, Some(FailReason::ChecksFailed));
        assert!(!v.report.unwrap().commitments);
    }

    let unsigned = signed((&issuer, &ikey), (&holder.did, &hkey));
    let mut bare = unsigned.certificate.clone();
    bare.holder_signature = None;
    let r = api.post("/issue?hash=server", &IssueRequest { certificate: bare, digest: None }, Some((&ikey, &issuer)));
    assert_eq!(r.error_kind(), "BadSignature");
    let r = api.post(
        "/issue?hash=local",
        &IssueRequest {
            certificate: unsigned.certificate.clone(),
            digest: None,
        },
        Some((&ikey, &issuer)),
    );
    assert_eq!(r.error_kind(), "MissingDigest");

    // never anchored
    let mut ghost = unsigned.certificate.clone();
    ghost.anchor_url = Some(covcert_core::ledger::anchor_url(covcert_core::ledger::DEFAULT_CHAIN_ID, &ghost.id));
    let pres = make_presentation(&ghost, &unsigned.claims, &BTreeSet::new(), &DisclosurePolicy::default()).unwrap();
    let v: VerifyResponse = api
        .post("/verify?hash=server", &VerifyRequest { presentation: pres, digest: None }, None)
        .json();
    assert_eq!(v.reason, Some(FailReason::AnchorMissing));
    assert_eq!(api.get(&format!("/anchors/{}", ghost.id)).status, StatusCode::NOT_FOUND);

    let tip: ChainTip = api.get("/chain/tip").json();
    assert_eq!(tip.authorities.len(), 5);
    assert!(tip.height >= 3);
}

#[test]
fn uploads_and_pod_access_control() {
    let srv = start(200);
    let api = Api::new(&srv);
    let device = HolderDevice::random();
    let holder: RegisterHolderResponse = api.register_holder(&device, "P998877", b"\xff\xd8me").json();
    let key = device.keypair();
    let did = holder.did;

    let r = api.call(Method::PUT, "/upload?path=/notes/a", b"hello".to_vec(), Some((&key, &did)));
    assert_eq!(r.status, StatusCode::CREATED);
    let v1 = r.json::<UploadResponse>().version;
    let r = api.call(Method::PUT, "/upload?path=/notes/b", b"bye".to_vec(), Some((&key, &did)));
    assert!(r.json::<UploadResponse>().version > v1, "versions grow pod-wide");
    assert_eq!(api.call(Method::PUT, "/upload?path=/notes/a", b"x".to_vec(), None).status, StatusCode::UNAUTHORIZED);

    let pq = format!("/pods/{did}/notes/a");
    let own = api.call(Method::GET, &pq, Vec::new(), Some((&key, &did)));
    assert_eq!((own.status, own.body.as_slice()), (StatusCode::OK, b"hello".as_slice()));
    assert_eq!(api.get(&pq).error_kind(), "Forbidden");

    // signature over another path is rejected
    let headers = auth_headers(&key, &did, "GET", "/pods/elsewhere", b"");
    assert_eq!(api.raw(Method::GET, &pq, Vec::new(), &headers).status, StatusCode::UNAUTHORIZED);

    let acl = vec![AccessRule::new(Agent::Owner, &[Mode::Read, Mode::Write, Mode::Control]), AccessRule::public_read()];
    let r = api.call(Method::PUT, &format!("{pq}?acl"), serde_json::to_vec(&acl).unwrap(), Some((&key, &did)));
    assert_eq!(r.status, StatusCode::NO_CONTENT);
    assert_eq!(api.get(&pq).body, b"hello");

    let photo = api.get(&format!("/pods/{did}/identity/photo"));
    assert_eq!(photo.status, StatusCode::FORBIDDEN);
    let over = api.call(Method::PUT, &format!("/pods/{did}/identity/photo"), b"new".to_vec(), Some((&key, &did)));
    assert_eq!((over.status, over.error_kind().as_str()), (StatusCode::FORBIDDEN, "Forbidden"));
    let listing: PodListing = api.call(Method::GET, &format!("/pods/{did}"), Vec::new(), Some((&key, &did))).json();
    assert!(listing.paths.contains(&"/notes/a".to_owned()));
    assert!(listing.paths.contains(&"/identity/photo".to_owned()));
    let del = api.call(Method::DELETE, &pq, Vec::new(), Some((&key, &did)));
    assert_eq!(del.status, StatusCode::NO_CONTENT);
}

#[test]
fn lab_completion_over_http() {
    let srv = start(200);
    let api = Api::new(&srv);
    let world = srv.world().clone();
    let (issuer_did, ikey) = api.active_issuer(Role::Issuer);
    let (lab, lkey) = api.active_issuer(Role::Lab);
    let issuer = covcert_core::flows::IssuerAccount {
        did: issuer_did,
        role: Role::Issuer,
        organisation: String::new(),
        state: AccountState::Active,
        keypair: ikey,
    };
    let holder = world
        .onboard_holder(&HolderDevice::random(), "DL5550001", b"\xff\xd8x")
        .unwrap();
    let pending = world.certify_pending(&issuer, &holder, "S-1", "PCR").unwrap();
    let covcert_core::qrcodec::QrBody::SampleTag(tag) = pending.payload.body else {
        panic!("tag expected")
    };

    let pq = "/pending/S-1";
    assert_eq!(api.call(Method::GET, pq, Vec::new(), Some((&ikey_of(&issuer), &issuer.did))).error_kind(), "NotALab");
    let entry: covcert_core::flows::PendingEntry = api.call(Method::GET, pq, Vec::new(), Some((&lkey, &lab))).json();
    assert_eq!(entry.certificate.id, tag.pending_cert_id);
    assert!(entry.certificate.commitments.iter().all(|c| c.name != "result"));

    let keys = world.registry.snapshot();
    let (done, _claims) = credential::lab_complete(
        &entry.certificate,
        vec![("result".into(), "negative".into())],
        &lab,
        &lkey,
        &keys,
        &mut random_bytes::<16>,
    )
    .unwrap();
    let mut tampered = done.clone();
    tampered.issued_at += 1;
    let cq = "/pending/S-1/complete";
    let r = api.post(cq, &CompleteSampleRequest { tag: tag.clone(), certificate: tampered }, Some((&lkey, &lab)));
    assert_eq!(r.error_kind(), "BadDelivery");
    let r = api.post(cq, &CompleteSampleRequest { tag: tag.clone(), certificate: done.clone() }, Some((&lkey, &lab)));
    assert_eq!(r.status, StatusCode::ACCEPTED, "{}", String::from_utf8_lossy(&r.body));
    let r = api.post(cq, &CompleteSampleRequest { tag: tag.clone(), certificate: done.clone() }, Some((&lkey, &lab)));
    assert_eq!(r.error_kind(), "AlreadyComplete");
    assert_eq!(api.wait_anchored(&done.id).digest, done.canonical_digest());
}

fn ikey_of(acct: &covcert_core::flows::IssuerAccount) -> KeyPair {
    acct.keypair.clone()
}

#[test]
fn qr_verification_endpoint() {
    let srv = start(200);
    let api = Api::new(&srv);
    let world = srv.world().clone();
    let (mut issuer, token) = world
        .onboard_issuer("GPHC-1187730", "Leeds Central", "a@northgate-chemists.co.uk", Role::Issuer)
        .unwrap();
    world.confirm_issuer(&mut issuer, &token).unwrap();
    let holder = world.onboard_holder(&HolderDevice::random(), "DL0001", b"\xff\xd8y").unwrap();
    let issued = world
        .certify(
            &issuer,
            &holder,
            vec![("result".into(), "negative".into())],
            &covcert_core::flows::CertifyOptions::with_photo(),
        )
        .unwrap();
    let r = api.post("/verify/qr", &VerifyQrRequest { qr_text: issued.qr_text.clone() }, None);
    let report: covcert_core::flows::VerifyReport = r.json();
    assert!(report.overall);
    let mut bad = issued.qr_text.clone();
    bad.insert(20, 'x');
    let r = api.post("/verify/qr", &VerifyQrRequest { qr_text: bad }, None);
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
}
