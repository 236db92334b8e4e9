#![allow(dead_code)]

use std::time::{Duration, Instant};

use reqwest::blocking::Client;
use reqwest::{Method, StatusCode};
use serde::de::DeserializeOwned;
use serde::Serialize;

use covcert_core::crypto::{generate_keypair, Did, KeyPair};
use covcert_core::flows::{HolderDevice, OutboxMessage, Role};
use covcert_gateway::api::*;
use covcert_gateway::config::Config;
use covcert_gateway::server::{self, ServerHandle};

pub fn start(block_interval_ms: u64) -> ServerHandle {
    server::spawn(Config {
        port: 0,
        block_interval_ms,
        ..Config::default()
    })
    .expect("server starts")
}

pub struct Api {
    pub base: String,
    pub http: Client,
}

pub struct Reply {
    pub status: StatusCode,
    pub body: Vec<u8>,
}

impl Reply {
    pub fn json<T: DeserializeOwned>(&self) -> T {
        serde_json::from_slice(&self.body)
            .unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&self.body)))
    }

    pub fn error_kind(&self) -> String {
        self.json::<ErrorBody>().error
    }
}

impl Api {
    pub fn new(srv: &ServerHandle) -> Api {
        Api {
            base: srv.url(),
            http: Client::new(),
        }
    }

    pub fn raw(&self, method: Method, pq: &str, body: Vec<u8>, headers: &[(&'static str, String)]) -> Reply {
        let mut req = self.http.request(method, format!("{}{pq}", self.base)).body(body);
        for (k, v) in headers {
            req = req.header(*k, v);
        }
        let resp = req.send().expect("request reaches server");
        Reply {
            status: resp.status(),
            body: resp.bytes().expect("body").to_vec(),
        }
    }

    pub fn call(&self, method: Method, pq: &str, body: Vec<u8>, auth: Option<(&KeyPair, &Did)>) -> Reply {
        let headers: Vec<_> = match auth {
            Some((key, did)) => auth_headers(key, did, method.as_str(), pq, &body).to_vec(),
            None => Vec::new(),
        };
        self.raw(method, pq, body, &headers)
    }

    pub fn post<B: Serialize>(&self, pq: &str, body: &B, auth: Option<(&KeyPair, &Did)>) -> Reply {
        self.call(Method::POST, pq, serde_json::to_vec(body).unwrap(), auth)
    }

    pub fn get(&self, pq: &str) -> Reply {
        self.call(Method::GET, pq, Vec::new(), None)
    }

    pub fn register_issuer(&self, role: Role, reg: &str, branch: &str, email: &str) -> (Did, KeyPair, Reply) {
        let key = generate_keypair(None).unwrap();
        let body = serde_json::to_vec(&RegisterIssuerRequest {
            registration_no: reg.into(),
            branch: branch.into(),
            email: email.into(),
            role,
            public_key: key.public_key(),
        })
        .unwrap();
        let proof = key_proof_header(&key, "POST", "/issuers", &body);
        let reply = self.raw(Method::POST, "/issuers", body, &[proof]);
        let did = if reply.status == StatusCode::CREATED {
            reply.json::<IssuerStatus>().did
        } else {
            covcert_core::crypto::Did::random()
        };
        (did, key, reply)
    }

    pub fn token_for(&self, did: &Did, email: &str) -> String {
        let msgs: Vec<OutboxMessage> = self.get(&format!("/outbox?to={email}")).json();
        let msg = msgs
            .iter()
            .rev()
            .find(|m| m.body.contains(&did.to_string()))
            .expect("token mailed");
        msg.body.rsplit(": ").next().unwrap().trim().to_owned()
    }

    /// Registered and confirmed.
    pub fn active_issuer(&self, role: Role) -> (Did, KeyPair) {
        let (reg, branch, email) = match role {
            Role::Issuer => ("GPHC-1040221", "Milton Keynes", "staff@waltonpharmacy.co.uk"),
            Role::Lab => ("UKAS-8842", "Cambridge", "bench@fenlanddx.org"),
        };
        let (did, key, reply) = self.register_issuer(role, reg, branch, email);
        assert_eq!(reply.status, StatusCode::CREATED);
        let token = self.token_for(&did, email);
        let r = self.post(&format!("/issuers/{did}/confirm"), &ConfirmRequest { token }, None);
        assert_eq!(r.status, StatusCode::OK);
        (did, key)
    }

    pub fn register_holder(&self, device: &HolderDevice, doc: &str, photo: &[u8]) -> Reply {
        let key = device.keypair();
        let body = serde_json::to_vec(&RegisterHolderRequest {
            public_key: key.public_key(),
            document_number: doc.into(),
            did_salt: device.did_salt().to_vec(),
            photo: photo.to_vec(),
        })
        .unwrap();
        let proof = key_proof_header(&key, "POST", "/holders", &body);
        self.raw(Method::POST, "/holders", body, &[proof])
    }

    pub fn wait_anchored(&self, cert_id: &Did) -> AnchorStatus {
        let deadline = Instant::now() + Duration::from_secs(20);
        loop {
            let r = self.get(&format!("/anchors/{cert_id}"));
            if r.status == StatusCode::OK {
                return r.json();
            }
            assert!(Instant::now() < deadline, "anchor never confirmed: {}", r.status);
            std::thread::sleep(Duration::from_millis(50));
        }
    }
}
