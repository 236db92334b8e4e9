//! Timed block production over simulated links.
//!
//! Every node runs as a tokio task. The scheduled authority produces a block
//! one interval after its parent; blocks and gossiped entries reach peers
//! after a random per-message delay, so arrival order is not send order.
//! Blocks that arrive ahead of the local tip are buffered until their parent
//! shows up.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use tokio::sync::{mpsc, watch};
use tokio::task::JoinHandle;
use tokio::time::Instant;

use super::{
    now_ms, AnchorEntry, AnchorLedger, AnchorRecord, Block, Cluster, LedgerError, Receipt,
    SharedNode, DEFAULT_BLOCK_INTERVAL,
};
use crate::crypto::{Did, Digest};

#[derive(Debug, Clone)]
pub struct RuntimeConfig {
    pub block_interval: Duration,
    pub min_delay: Duration,
    pub max_delay: Duration,
    pub seed: u64,
    /// Producers stop once the chain reaches this height.
    pub stop_at_height: Option<u64>,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        RuntimeConfig {
            block_interval: DEFAULT_BLOCK_INTERVAL,
            min_delay: Duration::from_millis(5),
            max_delay: Duration::from_millis(50),
            seed: 0,
            stop_at_height: None,
        }
    }
}

enum Msg {
    Block(Block),
    Tx(AnchorEntry),
}

/// Wall-clock milliseconds anchored to tokio's (possibly paused) clock.
#[derive(Clone, Copy)]
struct Clock {
    base: Instant,
    base_ms: u64,
}

impl Clock {
    fn now_ms(&self) -> u64 {
        self.base_ms + self.base.elapsed().as_millis() as u64
    }

    fn instant_at(&self, ms: u64) -> Instant {
        self.base + Duration::from_millis(ms.saturating_sub(self.base_ms))
    }
}

struct Links {
    inboxes: Vec<mpsc::UnboundedSender<Msg>>,
    rng: Mutex<StdRng>,
    min: Duration,
    max: Duration,
    /// Lets callers on non-runtime threads submit.
    handle: tokio::runtime::Handle,
}

impl Links {
    fn send(&self, to: usize, msg: Msg) {
        let delay = if self.max > self.min {
            self.rng.lock().gen_range(self.min..=self.max)
        } else {
            self.min
        };
        let tx = self.inboxes[to].clone();
        self.handle.spawn(async move {
            tokio::time::sleep(delay).await;
            let _ = tx.send(msg);
        });
    }

    fn broadcast(&self, from: usize, msg: impl Fn() -> Msg) {
        for to in 0..self.inboxes.len() {
            if to != from {
                self.send(to, msg());
            }
        }
    }
}

pub struct LedgerRuntime {
    nodes: Vec<SharedNode>,
    links: Arc<Links>,
    heights: Vec<watch::Receiver<u64>>,
    tasks: Vec<JoinHandle<()>>,
    clock: Clock,
}

impl LedgerRuntime {
    /// Spawns one task per node of `cluster` on the current tokio runtime.
    pub fn start(cluster: &Cluster, cfg: RuntimeConfig) -> Self {
        let nodes: Vec<SharedNode> = cluster.nodes().to_vec();
        let clock = Clock {
            base: Instant::now(),
            base_ms: now_ms(),
        };
        let mut inboxes = Vec::new();
        let mut receivers = Vec::new();
        for _ in &nodes {
            let (tx, rx) = mpsc::unbounded_channel();
            inboxes.push(tx);
            receivers.push(rx);
        }
        let links = Arc::new(Links {
            inboxes,
            rng: Mutex::new(StdRng::seed_from_u64(cfg.seed)),
            min: cfg.min_delay,
            max: cfg.max_delay,
            handle: tokio::runtime::Handle::current(),
        });
        let mut heights = Vec::new();
        let mut tasks = Vec::new();
        for (i, rx) in receivers.into_iter().enumerate() {
            let (htx, hrx) = watch::channel(nodes[i].read().height());
            heights.push(hrx);
            tasks.push(tokio::spawn(run_node(
                i,
                nodes[i].clone(),
                rx,
                links.clone(),
                htx,
                clock,
                cfg.clone(),
            )));
        }
        LedgerRuntime {
            nodes,
            links,
            heights,
            tasks,
            clock,
        }
    }

    pub fn nodes(&self) -> &[SharedNode] {
        &self.nodes
    }

    pub fn now_ms(&self) -> u64 {
        self.clock.now_ms()
    }

    /// Admits an entry at `node` and gossips it to the other authorities.
    pub fn submit(&self, node: usize, cert_id: &Did, digest: Digest) -> Result<Receipt, LedgerError> {
        let (receipt, entry) = {
            let mut n = self.nodes[node].write();
            let receipt = n.submit_anchor(cert_id, digest, self.clock.now_ms())?;
            (receipt, n.mempool().last().cloned().expect("just admitted"))
        };
        self.links.broadcast(node, || Msg::Tx(entry.clone()));
        Ok(receipt)
    }

    pub fn lookup(&self, node: usize, anchor_url: &str) -> Result<AnchorRecord, LedgerError> {
        self.nodes[node].read().lookup_anchor(anchor_url)
    }

    pub async fn wait_confirmed(
        &self,
        node: usize,
        anchor_url: &str,
        timeout: Duration,
    ) -> Result<AnchorRecord, LedgerError> {
        let mut rx = self.heights[node].clone();
        let deadline = Instant::now() + timeout;
        loop {
            match self.lookup(node, anchor_url) {
                Err(LedgerError::Pending) | Err(LedgerError::NotFound) => {}
                other => return other,
            }
            match tokio::time::timeout_at(deadline, rx.changed()).await {
                Ok(Ok(())) => {}
                _ => return Err(LedgerError::Timeout),
            }
        }
    }

    /// Waits until every node is at least at `height`.
    pub async fn wait_height(&self, height: u64, timeout: Duration) -> Result<(), LedgerError> {
        let deadline = Instant::now() + timeout;
        for rx in &self.heights {
            let mut rx = rx.clone();
            loop {
                if *rx.borrow_and_update() >= height {
                    break;
                }
                match tokio::time::timeout_at(deadline, rx.changed()).await {
                    Ok(Ok(())) => {}
                    _ => return Err(LedgerError::Timeout),
                }
            }
        }
        Ok(())
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

    pub fn shutdown(&mut self) {
        for t in self.tasks.drain(..) {
            t.abort();
        }
    }
}

impl Drop for LedgerRuntime {
    fn drop(&mut self) {
        self.shutdown();
    }
}

impl AnchorLedger for LedgerRuntime {
    fn chain_id(&self) -> String {
        self.nodes[0].read().chain_id().to_owned()
    }

    fn submit_anchor(&self, cert_id: &Did, digest: Digest) -> Result<Receipt, LedgerError> {
        self.submit(0, cert_id, digest)
    }

    fn lookup_anchor(&self, anchor_url: &str) -> Result<AnchorRecord, LedgerError> {
        self.lookup(0, anchor_url)
    }

    /// Polls from the calling thread; must not be called on a runtime worker.
    fn await_confirmation(&self, receipt: &Receipt, timeout: Duration) -> Result<AnchorRecord, LedgerError> {
        let deadline = std::time::Instant::now() + timeout;
        loop {
            match self.lookup(0, &receipt.anchor_url) {
                Err(LedgerError::Pending) => {}
                other => return other,
            }
            if std::time::Instant::now() >= deadline {
                return Err(LedgerError::Timeout);
            }
            std::thread::sleep(Duration::from_millis(10));
        }
    }
}

async fn run_node(
    me: usize,
    node: SharedNode,
    mut inbox: mpsc::UnboundedReceiver<Msg>,
    links: Arc<Links>,
    height_tx: watch::Sender<u64>,
    clock: Clock,
    cfg: RuntimeConfig,
) {
    let interval_ms = cfg.block_interval.as_millis() as u64;
    let mut ahead: BTreeMap<u64, Block> = BTreeMap::new();
    loop {
        let deadline = {
            let n = node.read();
            let below_cap = cfg.stop_at_height.is_none_or(|cap| n.height() < cap);
            (n.is_scheduled() && below_cap)
                .then(|| clock.instant_at(n.tip_time().unwrap_or(clock.base_ms) + interval_ms))
        };
        let produce = async {
            match deadline {
                Some(at) => tokio::time::sleep_until(at).await,
                None => std::future::pending().await,
            }
        };
        tokio::select! {
            msg = inbox.recv() => match msg {
                None => return,
                Some(Msg::Tx(entry)) => {
                    node.write().admit(entry);
                }
                Some(Msg::Block(block)) => {
                    ahead.insert(block.height, block);
                    let mut n = node.write();
                    while let Some(b) = ahead.remove(&(n.height() + 1)) {
                        // Rejected blocks are dropped; valid successors may still arrive.
                        let _ = n.apply_block(&b);
                    }
                    let h = n.height();
                    ahead.retain(|&k, _| k > h);
                    let _ = height_tx.send(h);
                }
            },
            _ = produce => {
                let block = node.write().produce_block(clock.now_ms());
                if let Ok(block) = block {
                    let _ = height_tx.send(block.height);
                    links.broadcast(me, || Msg::Block(block.clone()));
                }
            }
        }
    }
}
