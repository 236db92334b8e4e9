//! Property tests for the module invariants.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use proptest::collection::{btree_map, vec};
use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use covcert_core::credential::*;
use covcert_core::crypto::*;
use covcert_core::encoding::b64url;
use covcert_core::ledger::runtime::{LedgerRuntime, RuntimeConfig};
use covcert_core::ledger::*;
use covcert_core::pod::*;
use covcert_core::qrcodec::{encode, render_paper, QrPayload};

fn did_from(seed: u64) -> Did {
    Did::from_digest(&digest(&seed.to_be_bytes()))
}

fn contains(hay: &[u8], needle: &[u8]) -> bool {
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle)
}

// ------------------------------------------------------------------- crypto

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn sign_verify_and_single_bit_flips(
        seed in any::<[u8; 32]>(),
        msg in vec(any::<u8>(), 1..256),
        bit in any::<prop::sample::Index>(),
        in_sig in any::<bool>(),
    ) {
        let key = generate_keypair(Some(&seed)).unwrap();
        let pk = key.public_key();
        let sig = key.sign_raw(&msg);
        prop_assert!(verify_sig(&pk, &msg, &sig));
        prop_assert_eq!(generate_keypair(Some(&seed)).unwrap().public_key(), pk);
        if in_sig {
            let mut bad = sig;
            let i = bit.index(64 * 8);
            bad[i / 8] ^= 1 << (i % 8);
            prop_assert!(!verify_sig(&pk, &msg, &bad));
        } else {
            let mut bad = msg.clone();
            let i = bit.index(bad.len() * 8);
            bad[i / 8] ^= 1 << (i % 8);
            prop_assert!(!verify_sig(&pk, &bad, &sig));
        }
    }
}

proptest! {
    #[test]
    fn derive_did_is_pure(doc in "[A-Z0-9]{1,16}", salt in any::<[u8; 16]>()) {
        let first = derive_did(&doc, &salt).unwrap();
        for _ in 0..100 {
            prop_assert_eq!(&derive_did(&doc, &salt).unwrap(), &first);
        }
        let text = first.to_string();
        prop_assert!(text.starts_with("did:cov:"));
        prop_assert_eq!(text.parse::<Did>().unwrap().id_bytes().len(), 32);
    }

    #[test]
    fn salts_give_distinct_dids(doc in "[A-Z0-9]{1,16}", salts in prop::collection::btree_set(any::<[u8; 16]>(), 100)) {
        let dids: BTreeSet<Did> = salts.iter().map(|s| derive_did(&doc, s).unwrap()).collect();
        prop_assert_eq!(dids.len(), 100);
    }
}

#[test]
fn digest_length_is_fixed() {
    for len in [0usize, 1, 1_000_000] {
        let d = digest(&vec![0xa5; len]);
        assert_eq!(d.as_bytes().len(), 32);
        let hex = d.to_hex();
        assert_eq!(hex.len(), 64);
        assert_eq!(hex, hex.to_lowercase());
    }
}

// --------------------------------------------------------------- credential

fn claim_set() -> impl Strategy<Value = BTreeMap<String, String>> {
    btree_map("[a-z_]{1,12}", "[A-Za-z0-9 ]{0,20}", 1..8)
}

fn certificate(claims: &BTreeMap<String, String>, issued_at: u64, salt_seed: u64) -> HeldCertificate {
    let mut rng = StdRng::seed_from_u64(salt_seed);
    new_certificate_with(
        &did_from(1),
        &did_from(2),
        claims.iter().map(|(k, v)| (k.clone(), ClaimValue::from(v.as_str()))).collect(),
        None,
        Status::Issued,
        did_from(3),
        issued_at,
        &mut || rng.gen(),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn any_single_change_moves_the_digest(
        claims in claim_set(),
        issued_at in any::<u64>(),
        pick in any::<prop::sample::Index>(),
        what in 0..5u8,
    ) {
        let held = certificate(&claims, issued_at, 7);
        let before = held.certificate.canonical_digest();
        let mut cert = held.certificate.clone();
        let claim = &held.claims[pick.index(held.claims.len())];
        let i = cert.commitments.iter().position(|c| c.name == claim.name).unwrap();
        match what {
            0 => {
                let mut value = claim.value.as_bytes().to_vec();
                value.push(b'!');
                cert.commitments[i].digest = commit(&claim.name, &value, &claim.salt);
            }
            1 => {
                let mut salt = claim.salt;
                salt[0] ^= 1;
                cert.commitments[i].digest = commit(&claim.name, claim.value.as_bytes(), &salt);
            }
            2 => cert.issued_at = issued_at.wrapping_add(1),
            3 => cert.holder = did_from(4),
            _ => cert.issuer = did_from(5),
        }
        prop_assert_ne!(cert.canonical_digest(), before);
    }

    #[test]
    fn hidden_claims_leave_no_bytes(claims in claim_set(), mask in any::<u64>()) {
        // markers make accidental substring matches impossible
        let claims: BTreeMap<String, String> = claims
            .into_iter()
            .enumerate()
            .map(|(i, (k, v))| (k, format!("{v}#{i}-{mask:016x}")))
            .collect();
        let held = certificate(&claims, 1_700_000_000, mask);
        let mut cert = held.certificate.clone();
        cert.anchor_url = Some(anchor_url("t", &cert.id));
        let reveal: BTreeSet<String> = claims
            .keys()
            .enumerate()
            .filter(|(i, _)| mask >> i & 1 == 1)
            .map(|(_, k)| k.clone())
            .collect();
        let pres = make_presentation(&cert, &held.claims, &reveal, &DisclosurePolicy::default()).unwrap();
        let json = pres.to_json().into_bytes();
        for c in &held.claims {
            let shown = contains(&json, c.value.as_bytes()) || contains(&json, b64url(&c.salt).as_bytes());
            prop_assert_eq!(shown, reveal.contains(&c.name), "{}", c.name);
        }
    }

    #[test]
    fn canonical_json_is_stable(claims in claim_set(), issued_at in any::<u64>()) {
        let held = certificate(&claims, issued_at, issued_at);
        let text = held.certificate.to_json();
        let again = Certificate::from_json(&text).unwrap().to_json();
        prop_assert_eq!(&again, &text);
        let form = held.certificate.canonical_form();
        prop_assert_eq!(Certificate::from_json(&text).unwrap().canonical_form(), form);
    }
}

#[test]
fn commitment_forgery_not_found() {
    let target = commit("result", b"negative", &[7; 16]);
    let mut rng = StdRng::seed_from_u64(11);
    for i in 0..100_000u32 {
        let value = format!("positive-{i}");
        let salt: Salt = rng.gen();
        assert_ne!(commit("result", value.as_bytes(), &salt), target);
    }
}

// ------------------------------------------------------------------- ledger

#[test]
fn confirmed_digests_never_change() {
    let cluster = Cluster::new("immutability", 5);
    let mut rng = StdRng::seed_from_u64(12);
    let mut anchored = Vec::new();
    for i in 0..50u64 {
        let d = digest(&i.to_le_bytes());
        let r = cluster.submit_anchor(&did_from(i), d).unwrap();
        anchored.push((r.anchor_url, d));
        if rng.gen_bool(0.3) {
            cluster.settle();
        }
    }
    cluster.settle();
    for k in 0..10_000u64 {
        let (url, d) = &anchored[rng.gen_range(0..anchored.len())];
        assert_eq!(cluster.lookup_anchor(url).unwrap().digest, *d);
        if k % 500 == 0 {
            cluster.submit_anchor(&did_from(1_000 + k), digest(&k.to_be_bytes())).unwrap();
            cluster.settle();
        }
    }
    // resubmitting a confirmed id is refused, so the stored digest stays put
    let (url, d) = &anchored[0];
    assert!(cluster.submit_anchor(&did_from(0), digest(b"other")).is_err());
    assert_eq!(cluster.lookup_anchor(url).unwrap().digest, *d);
}

#[tokio::test(start_paused = true)]
async fn reordered_gossip_converges() {
    for (n, seed) in [(2u32, 21u64), (5, 22), (8, 23)] {
        let cluster = Cluster::new("replication", n);
        let ledger = LedgerRuntime::start(
            &cluster,
            RuntimeConfig {
                min_delay: Duration::from_millis(1),
                max_delay: Duration::from_millis(1500),
                seed,
                stop_at_height: Some(30),
                ..RuntimeConfig::default()
            },
        );
        let mut rng = StdRng::seed_from_u64(seed);
        for i in 0..60u64 {
            tokio::time::sleep(Duration::from_millis(rng.gen_range(0..400))).await;
            let _ = ledger.submit(rng.gen_range(0..n as usize), &did_from(i), digest(&i.to_be_bytes()));
        }
        ledger.wait_height(30, Duration::from_secs(300)).await.unwrap();
        tokio::time::sleep(Duration::from_secs(5)).await;
        let tips = ledger.tips();
        assert!(tips.iter().all(|t| *t == tips[0]), "n={n}: {tips:?}");
        let chains: BTreeSet<Vec<u8>> = ledger.nodes().iter().map(|node| node.read().encoded_chain()).collect();
        assert_eq!(chains.len(), 1, "n={n}: chains differ byte-wise");
    }
}

// ---------------------------------------------------------------------- pod

fn pod_path() -> impl Strategy<Value = String> {
    "(/[a-z0-9]{1,8}){1,3}"
}

proptest! {
    #[test]
    fn unlisted_agents_are_denied(
        paths in prop::collection::btree_set(pod_path(), 1..6),
        probe in pod_path(),
        stranger in any::<u64>(),
        anonymous in any::<bool>(),
    ) {
        let pods = PodServer::in_memory("p");
        let owner = did_from(u64::MAX);
        pods.create_pod(&owner).unwrap();
        for p in &paths {
            pods.put_resource(&owner, Some(&owner), p, b"x".to_vec(), PutOptions::typed("text/plain")).unwrap();
        }
        let other = did_from(stranger % (u64::MAX - 1));
        let who = if anonymous { None } else { Some(&other) };
        for p in paths.iter().chain([&probe]) {
            let forbidden = |r: Result<(), PodError>| matches!(r, Err(PodError::Forbidden(_)));
            prop_assert!(forbidden(pods.get_resource(&owner, who, p).map(|_| ())));
            prop_assert!(forbidden(pods.put_resource(&owner, who, p, b"y".to_vec(), PutOptions::typed("t")).map(|_| ())));
            prop_assert!(forbidden(pods.delete_resource(&owner, who, p)));
            prop_assert!(forbidden(pods.set_acl(&owner, who, p, vec![AccessRule::public_read()])));
        }
        prop_assert!(matches!(pods.list(&owner, who), Err(PodError::Forbidden(_))));
    }

    #[test]
    fn owner_keeps_control(path in pod_path(), grant_public in any::<bool>(), permanent in any::<bool>()) {
        let pods = PodServer::in_memory("p");
        let owner = did_from(1);
        let me = Some(&owner);
        pods.create_pod(&owner).unwrap();
        let acl = if grant_public { vec![AccessRule::new(Agent::Public, &[Mode::Read])] } else { Vec::new() };
        let mut opts = PutOptions::typed("t").with_acl(acl);
        if permanent {
            opts = opts.permanent();
        }
        pods.put_resource(&owner, me, &path, b"one".to_vec(), opts).unwrap();
        prop_assert_eq!(pods.get_resource(&owner, me, &path).unwrap().bytes, b"one".to_vec());
        let second = pods.put_resource(&owner, me, &path, b"two".to_vec(), PutOptions::typed("t"));
        if permanent {
            prop_assert_eq!(second, Err(PodError::Forbidden(Denial::PermanentResource)));
        } else {
            prop_assert!(second.is_ok());
        }
        prop_assert!(pods.set_acl(&owner, me, &path, Vec::new()).is_ok());
        prop_assert!(pods.delete_resource(&owner, me, &path).is_ok());
        prop_assert!(matches!(pods.get_resource(&owner, me, &path), Err(PodError::NotFound(_))));
    }

    #[test]
    fn replicating_twice_equals_once(contents in btree_map(pod_path(), vec(any::<u8>(), 0..64), 0..6), drop_first in any::<bool>()) {
        let pods = PodServer::in_memory("phone");
        let once = PodServer::in_memory("a");
        let twice = PodServer::in_memory("b");
        let owner = did_from(9);
        let me = Some(&owner);
        pods.create_pod(&owner).unwrap();
        for (p, bytes) in &contents {
            pods.put_resource(&owner, me, p, bytes.clone(), PutOptions::typed("t")).unwrap();
        }
        if drop_first {
            if let Some(p) = contents.keys().next() {
                pods.replicate_to(&owner, me, &twice).unwrap();
                pods.delete_resource(&owner, me, p).unwrap();
            }
        }
        pods.replicate_to(&owner, me, &once).unwrap();
        pods.replicate_to(&owner, me, &twice).unwrap();
        pods.replicate_to(&owner, me, &twice).unwrap();
        prop_assert_eq!(once.export(&owner, me).unwrap(), twice.export(&owner, me).unwrap());
        prop_assert_eq!(once.export(&owner, me).unwrap(), pods.export(&owner, me).unwrap());
    }
}

#[test]
fn deleted_payloads_leave_the_store_file() {
    let dir = tempfile::tempdir().unwrap();
    let pods = PodServer::open("p", dir.path()).unwrap();
    let owner = did_from(3);
    let me = Some(&owner);
    pods.create_pod(&owner).unwrap();
    let secret = b"erase-me-4f1c9a0b77".to_vec();
    pods.put_resource(&owner, me, "/a", secret.clone(), PutOptions::typed("t")).unwrap();
    pods.put_resource(&owner, me, "/a", b"v2 erase-me-4f1c9a0b77 again".to_vec(), PutOptions::typed("t")).unwrap();
    pods.put_resource(&owner, me, "/keep", b"kept".to_vec(), PutOptions::typed("t")).unwrap();
    let file = pods.pod_file(&owner).unwrap();
    assert!(contains(&std::fs::read(&file).unwrap(), &secret));
    pods.delete_resource(&owner, me, "/a").unwrap();
    let stored = std::fs::read(&file).unwrap();
    assert!(!contains(&stored, &secret));
    assert!(contains(&stored, b"kept"));
}

// -------------------------------------------------------------------- codec

#[test]
fn printed_and_digital_qr_are_identical() {
    let issuer_key = generate_keypair(Some(&[1; 32])).unwrap();
    let holder_key = generate_keypair(Some(&[2; 32])).unwrap();
    let resolver: BTreeMap<Did, PublicKey> =
        [(did_from(1), issuer_key.public_key()), (did_from(2), holder_key.public_key())].into();
    let photo = b"jpeg bytes".to_vec();
    let held = new_certificate(
        &did_from(1),
        &did_from(2),
        vec![("result".into(), "negative".into())],
        Some(photo.clone()),
        Status::Complete,
    )
    .unwrap();
    let cert = issuer_sign(&held.certificate, &issuer_key, &resolver).unwrap();
    let mut cert = holder_countersign(&cert, &holder_key, &resolver).unwrap();
    cert.anchor_url = Some(anchor_url("t", &cert.id));
    let policy = DisclosurePolicy {
        force_photo: true,
        ..Default::default()
    };
    let pres = make_presentation(&cert, &held.claims, &["result".to_owned()].into(), &policy).unwrap();
    let payload = QrPayload::presentation(pres);
    assert_eq!(render_paper(&payload, Some(&photo)).unwrap().qr_text, encode(&payload).unwrap());
}
