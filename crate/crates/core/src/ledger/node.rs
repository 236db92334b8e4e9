use std::collections::{HashMap, HashSet};
use std::path::Path;

use crate::crypto::{Did, Digest, KeyPair};

use super::block::{AnchorEntry, Block, Genesis};
use super::store::ChainStore;
use super::{anchor_url, parse_anchor_url, AnchorRecord, LedgerError, Receipt, RejectReason};

pub const DEFAULT_MAX_ENTRIES: usize = 256;

/// One authority's replica: chain, mempool and anchor index.
///
/// All mutation goes through `&mut self`; callers wrap a node in a lock to
/// get single-writer semantics.
#[derive(Debug)]
pub struct Node {
    authority: u32,
    key: KeyPair,
    genesis: Genesis,
    genesis_digest: Digest,
    blocks: Vec<Block>,
    tip: Digest,
    mempool: Vec<AnchorEntry>,
    pooled: HashSet<Did>,
    confirmed: HashMap<Did, AnchorRecord>,
    store: Option<ChainStore>,
    max_entries: usize,
}

impl Node {
    pub fn new(genesis: Genesis, authority: u32, key: KeyPair) -> Result<Self, LedgerError> {
        match genesis.authorities.get(authority as usize) {
            Some(a) if a.public_key == key.public_key() => {}
            _ => return Err(LedgerError::KeyMismatch(authority)),
        }
        let genesis_digest = genesis.digest();
        Ok(Node {
            authority,
            key,
            genesis,
            genesis_digest,
            blocks: Vec::new(),
            tip: genesis_digest,
            mempool: Vec::new(),
            pooled: HashSet::new(),
            confirmed: HashMap::new(),
            store: None,
            max_entries: DEFAULT_MAX_ENTRIES,
        })
    }

    /// Attaches an append-only chain file, replaying it first if it exists.
    pub fn with_store(mut self, path: &Path) -> Result<Self, LedgerError> {
        if path.exists() {
            let (store, genesis, blocks) = ChainStore::open(path)?;
            if genesis != self.genesis {
                return Err(LedgerError::Corrupt("chain file has a different genesis".into()));
            }
            for b in &blocks {
                self.apply_block(b).map_err(LedgerError::Rejected)?;
            }
            self.store = Some(store);
        } else {
            let mut store = ChainStore::create(path, &self.genesis)?;
            for b in &self.blocks {
                store.append(b)?;
            }
            self.store = Some(store);
        }
        Ok(self)
    }

    pub fn with_max_entries(mut self, max: usize) -> Self {
        self.max_entries = max.max(1);
        self
    }

    pub fn authority(&self) -> u32 {
        self.authority
    }

    pub fn genesis(&self) -> &Genesis {
        &self.genesis
    }

    pub fn chain_id(&self) -> &str {
        &self.genesis.chain_id
    }

    pub fn height(&self) -> u64 {
        self.blocks.len() as u64
    }

    pub fn tip_digest(&self) -> Digest {
        self.tip
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn mempool(&self) -> &[AnchorEntry] {
        &self.mempool
    }

    /// Produced-at time of the tip, or `None` at genesis.
    pub fn tip_time(&self) -> Option<u64> {
        self.blocks.last().map(|b| b.produced_at)
    }

    pub fn is_scheduled(&self) -> bool {
        self.genesis.scheduled_producer(self.height() + 1) == self.authority
    }

    pub fn submit_anchor(
        &mut self,
        cert_id: &Did,
        digest: Digest,
        now_ms: u64,
    ) -> Result<Receipt, LedgerError> {
        if self.confirmed.contains_key(cert_id) || self.pooled.contains(cert_id) {
            return Err(LedgerError::DuplicateAnchor(cert_id.clone()));
        }
        let entry = AnchorEntry {
            cert_id: cert_id.clone(),
            digest,
            submitted_at: now_ms,
        };
        let receipt = Receipt {
            tx_id: entry.tx_id(),
            anchor_url: anchor_url(self.chain_id(), cert_id),
        };
        self.pooled.insert(cert_id.clone());
        self.mempool.push(entry);
        Ok(receipt)
    }

    /// Mempool admission for an entry gossiped by a peer. Returns whether it was new.
    pub fn admit(&mut self, entry: AnchorEntry) -> bool {
        if self.confirmed.contains_key(&entry.cert_id) || !self.pooled.insert(entry.cert_id.clone()) {
            return false;
        }
        self.mempool.push(entry);
        true
    }

    pub fn produce_block(&mut self, now_ms: u64) -> Result<Block, LedgerError> {
        let height = self.height() + 1;
        let expected = self.genesis.scheduled_producer(height);
        if expected != self.authority {
            return Err(LedgerError::NotScheduled {
                expected,
                got: self.authority,
            });
        }
        let take = self.mempool.len().min(self.max_entries);
        let entries: Vec<AnchorEntry> = self.mempool[..take].to_vec();
        let mut block = Block {
            height,
            parent_digest: self.tip,
            producer: self.authority,
            entries,
            produced_at: now_ms.max(self.tip_time().unwrap_or(0)),
            producer_signature: [0; 64],
        };
        block.producer_signature = self.key.sign_raw(&block.body());
        self.append(block.clone())?;
        Ok(block)
    }

    fn check_block(&self, block: &Block) -> Result<(), RejectReason> {
        validate_block(&self.genesis, self.height(), &self.tip, block)?;
        let mut seen = HashSet::new();
        for e in &block.entries {
            if self.confirmed.contains_key(&e.cert_id) || !seen.insert(&e.cert_id) {
                return Err(RejectReason::DuplicateEntry);
            }
        }
        if block.entries.len() > self.max_entries {
            return Err(RejectReason::Oversize);
        }
        Ok(())
    }

    pub fn apply_block(&mut self, block: &Block) -> Result<(), RejectReason> {
        self.check_block(block)?;
        self.append(block.clone()).map_err(|_| RejectReason::Storage)
    }

    fn append(&mut self, block: Block) -> Result<(), LedgerError> {
        if let Some(store) = &mut self.store {
            store.append(&block)?;
        }
        for e in &block.entries {
            self.confirmed.insert(
                e.cert_id.clone(),
                AnchorRecord {
                    digest: e.digest,
                    height: block.height,
                },
            );
        }
        let included: HashSet<&Did> = block.entries.iter().map(|e| &e.cert_id).collect();
        self.mempool.retain(|e| !included.contains(&e.cert_id));
        for id in included {
            self.pooled.remove(id);
        }
        self.tip = block.digest();
        self.blocks.push(block);
        Ok(())
    }

    pub fn lookup_anchor(&self, url: &str) -> Result<AnchorRecord, LedgerError> {
        let (chain, cert_id) = parse_anchor_url(url)?;
        if chain != self.chain_id() {
            return Err(LedgerError::WrongChain(chain));
        }
        self.lookup_cert(&cert_id)
    }

    pub fn lookup_cert(&self, cert_id: &Did) -> Result<AnchorRecord, LedgerError> {
        if let Some(rec) = self.confirmed.get(cert_id) {
            return Ok(*rec);
        }
        if self.pooled.contains(cert_id) {
            return Err(LedgerError::Pending);
        }
        Err(LedgerError::NotFound)
    }

    /// Re-validates linkage, schedule and signatures from genesis.
    pub fn verify_chain(&self) -> bool {
        verify_blocks(&self.genesis, &self.blocks)
    }

    /// The chain exactly as persisted: every record, length-prefixed.
    pub fn encoded_chain(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let mut push = |rec: Vec<u8>| {
            out.extend_from_slice(&(rec.len() as u32).to_be_bytes());
            out.extend_from_slice(&rec);
        };
        push(self.genesis.encode());
        for b in &self.blocks {
            push(b.encode());
        }
        out
    }

    pub fn genesis_digest(&self) -> Digest {
        self.genesis_digest
    }
}

/// Checks `block` as the successor of a chain at `height` with tip `tip`.
pub fn validate_block(
    genesis: &Genesis,
    height: u64,
    tip: &Digest,
    block: &Block,
) -> Result<(), RejectReason> {
    if block.height <= height {
        return Err(RejectReason::StaleHeight);
    }
    if block.height > height + 1 {
        return Err(RejectReason::FutureHeight);
    }
    if block.parent_digest != *tip {
        return Err(RejectReason::BadParent);
    }
    if block.producer != genesis.scheduled_producer(block.height) {
        return Err(RejectReason::BadProducer);
    }
    let key = &genesis.authorities[block.producer as usize].public_key;
    if !block.signature_valid(key) {
        return Err(RejectReason::BadSignature);
    }
    Ok(())
}

pub fn verify_blocks(genesis: &Genesis, blocks: &[Block]) -> bool {
    let mut tip = genesis.digest();
    let mut seen = HashSet::new();
    for (i, b) in blocks.iter().enumerate() {
        if validate_block(genesis, i as u64, &tip, b).is_err() {
            return false;
        }
        if !b.entries.iter().all(|e| seen.insert(e.cert_id.clone())) {
            return false;
        }
        tip = b.digest();
    }
    true
}
