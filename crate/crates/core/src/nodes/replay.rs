use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{Reason, Rejection};
use crate::token::{TimeStamp, WalletId};

/// Recently seen `(wallet_id, t)` pairs. Entries older than the window are
/// evicted before every lookup; anything that old already fails freshness.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ReplayCache {
    window_s: u64,
    seen: BTreeSet<(TimeStamp, WalletId)>,
}

impl ReplayCache {
    pub fn new(window_s: u64) -> Self {
        Self {
            window_s,
            seen: BTreeSet::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.seen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seen.is_empty()
    }

    fn evict(&mut self, now: TimeStamp) {
        let horizon = TimeStamp(now.0.saturating_sub(self.window_s));
        self.seen = self.seen.split_off(&(horizon, WalletId([0; 16])));
    }

    /// Record the pair; false if it was already present.
    pub fn check_and_insert(&mut self, wallet_id: WalletId, t: TimeStamp, now: TimeStamp) -> bool {
        self.evict(now);
        self.seen.insert((t, wallet_id))
    }
}

/// Freshness window plus replay cache, applied in that order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FreshnessGuard {
    pub window_s: u64,
    pub replay: ReplayCache,
}

impl FreshnessGuard {
    pub fn new(window_s: u64) -> Self {
        Self {
            window_s,
            replay: ReplayCache::new(window_s),
        }
    }

    pub fn set_window(&mut self, window_s: u64) {
        self.window_s = window_s;
        self.replay.window_s = window_s;
    }

    pub fn is_fresh(&self, t: TimeStamp, now: TimeStamp) -> bool {
        now.abs_diff(t) <= self.window_s
    }

    pub fn admit(&mut self, wallet_id: WalletId, t: TimeStamp, now: TimeStamp) -> Result<(), Rejection> {
        if !self.is_fresh(t, now) {
            return Err(Rejection::new(Reason::Stale));
        }
        if !self.replay.check_and_insert(wallet_id, t, now) {
            return Err(Rejection::new(Reason::Duplicate));
        }
        Ok(())
    }
}
