//! Consortium proof-of-authority ledger that stores only anchor digests.
//!
//! A fixed authority set listed in the genesis takes turns producing
//! blocks: height `h` belongs to authority `(h - 1) mod n`. Blocks carry
//! [`AnchorEntry`] values (certificate DID + digest + time) and nothing else.
//! Out-of-turn, stale or badly signed blocks are rejected; there are no forks.
//!
//! [`Cluster`] drives a set of nodes synchronously (blocks on demand),
//! [`runtime::LedgerRuntime`] runs them as tokio tasks with timed block
//! production and delayed gossip.

mod block;
mod node;
pub mod runtime;
mod store;

use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use crate::crypto::{generate_keypair, Did, Digest, KeyPair};

pub use block::{decode_block, decode_genesis, AnchorEntry, Authority, Block, DecodeError, Genesis};
pub use node::{validate_block, verify_blocks, Node, DEFAULT_MAX_ENTRIES};
pub use store::ChainStore;

pub const DEFAULT_CHAIN_ID: &str = "covcert-consortium";
pub const DEFAULT_BLOCK_INTERVAL: Duration = Duration::from_secs(1);

/// Fixture names for the consortium members; larger sets get numbered names.
pub const CONSORTIUM: [&str; 5] = [
    "open-university",
    "bt",
    "condatis",
    "inrupt",
    "chiba-institute-of-technology",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
pub enum RejectReason {
    #[error("parent digest does not match local tip")]
    BadParent,
    #[error("producer is not scheduled for this height")]
    BadProducer,
    #[error("producer signature invalid")]
    BadSignature,
    #[error("height already present")]
    StaleHeight,
    #[error("height is ahead of the local tip")]
    FutureHeight,
    #[error("entry already confirmed or repeated")]
    DuplicateEntry,
    #[error("too many entries")]
    Oversize,
    #[error("chain file write failed")]
    Storage,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LedgerError {
    #[error("{0} is already anchored")]
    DuplicateAnchor(Did),
    #[error("authority {got} is not scheduled (expected {expected})")]
    NotScheduled { expected: u32, got: u32 },
    #[error("no anchor for this certificate")]
    NotFound,
    #[error("anchor submitted but not yet confirmed")]
    Pending,
    #[error("malformed anchor url {0:?}")]
    BadAnchorUrl(String),
    #[error("anchor url names chain {0:?}")]
    WrongChain(String),
    #[error("block rejected: {0}")]
    Rejected(RejectReason),
    #[error("key does not match authority {0} in genesis")]
    KeyMismatch(u32),
    #[error("timed out waiting for confirmation")]
    Timeout,
    #[error("chain storage: {0}")]
    Io(String),
    #[error("chain storage corrupt: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Receipt {
    pub tx_id: Digest,
    pub anchor_url: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorRecord {
    pub digest: Digest,
    pub height: u64,
}

pub fn anchor_url(chain_id: &str, cert_id: &Did) -> String {
    format!("anchor://{chain_id}/{cert_id}")
}

pub fn parse_anchor_url(url: &str) -> Result<(String, Did), LedgerError> {
    let bad = || LedgerError::BadAnchorUrl(url.to_owned());
    let rest = url.strip_prefix("anchor://").ok_or_else(bad)?;
    let (chain, did) = rest.split_once('/').ok_or_else(bad)?;
    if chain.is_empty() {
        return Err(bad());
    }
    Ok((chain.to_owned(), did.parse().map_err(|_| bad())?))
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Deterministic fixture keys for authority `i`.
pub fn authority_key(i: u32) -> KeyPair {
    let mut seed = [0u8; 32];
    seed[..8].copy_from_slice(b"covauth!");
    seed[8..12].copy_from_slice(&i.to_be_bytes());
    generate_keypair(Some(&seed)).expect("32-byte seed")
}

pub fn fixture_genesis(chain_id: &str, n: u32) -> (Genesis, Vec<KeyPair>) {
    assert!(n >= 1, "authority set must not be empty");
    let keys: Vec<KeyPair> = (0..n).map(authority_key).collect();
    let authorities = keys
        .iter()
        .enumerate()
        .map(|(i, k)| Authority {
            name: match CONSORTIUM.get(i) {
                Some(name) => (*name).to_owned(),
                None => format!("authority-{i}"),
            },
            public_key: k.public_key(),
        })
        .collect();
    (
        Genesis {
            chain_id: chain_id.to_owned(),
            authorities,
        },
        keys,
    )
}

/// The ledger surface the role workflows depend on.
pub trait AnchorLedger: Send + Sync {
    fn chain_id(&self) -> String;
    fn submit_anchor(&self, cert_id: &Did, digest: Digest) -> Result<Receipt, LedgerError>;
    fn lookup_anchor(&self, anchor_url: &str) -> Result<AnchorRecord, LedgerError>;
    /// Waits until the anchor behind `receipt` is in a block.
    fn await_confirmation(&self, receipt: &Receipt, timeout: Duration) -> Result<AnchorRecord, LedgerError>;
}

pub type SharedNode = Arc<RwLock<Node>>;

/// Authorities connected by instant, lossless links; blocks are produced
/// when asked.
#[derive(Clone)]
pub struct Cluster {
    nodes: Vec<SharedNode>,
    /// Node that receives client traffic.
    entry: usize,
}

impl Cluster {
    pub fn new(chain_id: &str, authorities: u32) -> Self {
        let (genesis, keys) = fixture_genesis(chain_id, authorities);
        let nodes = keys
            .into_iter()
            .enumerate()
            .map(|(i, k)| {
                Arc::new(RwLock::new(
                    Node::new(genesis.clone(), i as u32, k).expect("fixture keys match genesis"),
                ))
            })
            .collect();
        Cluster { nodes, entry: 0 }
    }

    /// Like [`Cluster::new`] with every node persisting to `dir/node-<i>.chain`.
    pub fn open(chain_id: &str, authorities: u32, dir: &std::path::Path) -> Result<Self, LedgerError> {
        std::fs::create_dir_all(dir).map_err(|e| LedgerError::Io(e.to_string()))?;
        let (genesis, keys) = fixture_genesis(chain_id, authorities);
        let mut nodes = Vec::new();
        for (i, k) in keys.into_iter().enumerate() {
            let node = Node::new(genesis.clone(), i as u32, k)?
                .with_store(&dir.join(format!("node-{i}.chain")))?;
            nodes.push(Arc::new(RwLock::new(node)));
        }
        Ok(Cluster { nodes, entry: 0 })
    }

    pub fn nodes(&self) -> &[SharedNode] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> &SharedNode {
        &self.nodes[i]
    }

    pub fn entry_node(&self) -> &SharedNode {
        &self.nodes[self.entry]
    }

    pub fn submit_via(&self, node: usize, cert_id: &Did, digest: Digest) -> Result<Receipt, LedgerError> {
        let (receipt, entry) = {
            let mut n = self.nodes[node].write();
            let receipt = n.submit_anchor(cert_id, digest, now_ms())?;
            let entry = n.mempool().last().cloned().expect("just admitted");
            (receipt, entry)
        };
        for (i, peer) in self.nodes.iter().enumerate() {
            if i != node {
                peer.write().admit(entry.clone());
            }
        }
        Ok(receipt)
    }

    /// The scheduled authority produces one block and every peer applies it.
    pub fn produce_next(&self) -> Block {
        let height = self.nodes[0].read().height() + 1;
        let producer = self.nodes[0].read().genesis().scheduled_producer(height) as usize;
        let block = self.nodes[producer]
            .write()
            .produce_block(now_ms())
            .expect("scheduled producer");
        for (i, peer) in self.nodes.iter().enumerate() {
            if i != producer {
                peer.write()
                    .apply_block(&block)
                    .expect("lossless links keep peers in step");
            }
        }
        block
    }

    /// Produces blocks until no node has pending entries.
    pub fn settle(&self) {
        while self.nodes.iter().any(|n| !n.read().mempool().is_empty()) {
            self.produce_next();
        }
    }

    pub fn tips(&self) -> Vec<(u64, Digest)> {
        self.nodes
            .iter()
            .map(|n| {
                let n = n.read();
                (n.height(), n.tip_digest())
            })
            .collect()
    }
}

impl AnchorLedger for Cluster {
    fn chain_id(&self) -> String {
        self.entry_node().read().chain_id().to_owned()
    }

    fn submit_anchor(&self, cert_id: &Did, digest: Digest) -> Result<Receipt, LedgerError> {
        self.submit_via(self.entry, cert_id, digest)
    }

    fn lookup_anchor(&self, anchor_url: &str) -> Result<AnchorRecord, LedgerError> {
        self.entry_node().read().lookup_anchor(anchor_url)
    }

    fn await_confirmation(&self, receipt: &Receipt, _timeout: Duration) -> Result<AnchorRecord, LedgerError> {
        match self.lookup_anchor(&receipt.anchor_url) {
            Err(LedgerError::Pending) => {
                self.settle();
                self.lookup_anchor(&receipt.anchor_url)
            }
            other => other,
        }
    }
}
