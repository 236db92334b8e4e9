use serde::{Deserialize, Serialize};

use super::*;
use crate::pod::SyncReport;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErasureReport {
    pub holder: Did,
    pub deleted: Vec<String>,
    /// False when the replica could not be reached; it still holds data.
    pub replica_cleared: bool,
    pub pending_dropped: usize,
    /// Anchors that still resolve but no longer point at any data.
    pub orphaned_anchor_urls: Vec<String>,
}

impl World {
    /// Copies the holder's pod to the cloud replica.
    pub fn backup(&self, holder: &HolderAccount) -> Result<SyncReport, FlowError> {
        Ok(self.pods.replicate_to(&holder.did, Some(&holder.did), &self.cloud)?)
    }

    /// Pulls the holder's pod back from the cloud replica.
    pub fn restore(&self, holder: &HolderAccount) -> Result<SyncReport, FlowError> {
        Ok(self.pods.restore_from(&holder.did, Some(&holder.did), &self.cloud)?)
    }

    /// Deletes everything the holder stored, replica included. Ledger
    /// anchors cannot be removed; they are listed as orphans.
    pub fn opt_out(&self, holder: &HolderAccount) -> ErasureReport {
        let me = Some(&holder.did);
        let mut anchors = vec![holder.identity_anchor.clone()];
        if let Ok(held) = self.held_certificates(holder) {
            anchors.extend(held.into_iter().filter_map(|h| h.certificate.anchor_url));
        }
        let mut deleted = Vec::new();
        if let Ok(paths) = self.pods.list(&holder.did, me) {
            for path in paths {
                if self.pods.delete_resource(&holder.did, me, &path).is_ok() {
                    deleted.push(path);
                }
            }
        }
        let replica_cleared = !self.cloud.has_pod(&holder.did)
            || self.pods.replicate_to(&holder.did, me, &self.cloud).is_ok();

        let pending_dropped = {
            let mut q = self.pending.lock();
            let before = q.len();
            q.retain(|_, e| e.holder != holder.did);
            before - q.len()
        };
        anchors.sort();
        anchors.dedup();
        let orphaned_anchor_urls = anchors
            .into_iter()
            .filter(|url| self.ledger.lookup_anchor(url).is_ok())
            .collect();
        ErasureReport {
            holder: holder.did.clone(),
            deleted,
            replica_cleared,
            pending_dropped,
            orphaned_anchor_urls,
        }
    }
}
