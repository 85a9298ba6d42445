use std::collections::{BTreeMap, VecDeque};

use rand_core::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    issue_preshared, EnrollFailure, EnrollMaterial, FactorNode, FreshnessGuard, Outcome, Reason,
    Records, Rejection,
};
use crate::netsim::LocationFixMsg;
use crate::token::{
    build_location_token, FactorTag, GeoCell, PaymentToken, SecretToken, TimeStamp, TxnId,
    WalletId,
};

pub const DEFAULT_TOLERANCE_CELLS: u32 = 1;
pub const DEFAULT_HISTORY_CAP: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocRecord {
    pub device_id: String,
    pub lps: SecretToken,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fix {
    pub cell: GeoCell,
    pub t: TimeStamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceTrack {
    pub current: Fix,
    /// Oldest first.
    pub history: VecDeque<Fix>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocationStore {
    pub history_cap: usize,
    pub devices: BTreeMap<String, DeviceTrack>,
}

impl Default for LocationStore {
    fn default() -> Self {
        Self {
            history_cap: DEFAULT_HISTORY_CAP,
            devices: BTreeMap::new(),
        }
    }
}

impl LocationStore {
    pub fn current(&self, device_id: &str) -> Option<Fix> {
        self.devices.get(device_id).map(|track| track.current)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LocationError {
    #[error("fix at t={got} is not after the latest fix at t={latest}")]
    NonMonotonic { latest: u64, got: u64 },
}

pub fn ingest_location_fix(
    store: &mut LocationStore,
    device_id: &str,
    fix: Fix,
) -> Result<(), LocationError> {
    let cap = store.history_cap;
    match store.devices.get_mut(device_id) {
        None => {
            store.devices.insert(
                device_id.to_string(),
                DeviceTrack {
                    current: fix,
                    history: VecDeque::new(),
                },
            );
        }
        Some(track) => {
            if fix.t <= track.current.t {
                return Err(LocationError::NonMonotonic {
                    latest: track.current.t.0,
                    got: fix.t.0,
                });
            }
            let previous = std::mem::replace(&mut track.current, fix);
            track.history.push_back(previous);
            while track.history.len() > cap {
                track.history.pop_front();
            }
        }
    }
    Ok(())
}

/// Regenerate the location sub-token for every cell within `tolerance_cells`
/// (Chebyshev) of the device's current fix; approve if any matches.
pub fn loc_verify(
    token: &PaymentToken,
    records: &Records<LocRecord>,
    store: &LocationStore,
    guard: &mut FreshnessGuard,
    now: TimeStamp,
    tolerance_cells: u32,
) -> Outcome {
    let record = records
        .get(&token.wallet_id)
        .ok_or_else(|| Rejection::new(Reason::NotEnrolled))?;
    let entry = token
        .entry(FactorTag::LOC)
        .ok_or_else(|| Rejection::with_detail(Reason::Malformed, "no location entry"))?;
    if entry.len() != 32 {
        return Err(Rejection::with_detail(
            Reason::Malformed,
            format!("location entry is {} bytes", entry.len()),
        ));
    }
    let fix = store
        .current(&record.device_id)
        .ok_or_else(|| Rejection::with_detail(Reason::Mismatch, "NO_FIX"))?;
    let radius = tolerance_cells.min(i32::MAX as u32) as i32;
    let matched = (-radius..=radius)
        .flat_map(|d_lat| (-radius..=radius).map(move |d_lon| (d_lat, d_lon)))
        .filter_map(|(d_lat, d_lon)| fix.cell.shifted(d_lat, d_lon))
        .any(|cell| {
            build_location_token(&cell, token.t, &record.lps)
                .map(|lt| lt.0 == entry)
                .unwrap_or(false)
        });
    if !matched {
        return Err(Rejection::new(Reason::Mismatch));
    }
    guard.admit(token.wallet_id, token.t, now)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocNode {
    pub records: Records<LocRecord>,
    pub store: LocationStore,
    pub guard: FreshnessGuard,
    pub tolerance_cells: u32,
}

impl LocNode {
    pub fn new(window_s: u64, tolerance_cells: u32) -> Self {
        Self {
            records: Records::new(),
            store: LocationStore::default(),
            guard: FreshnessGuard::new(window_s),
            tolerance_cells,
        }
    }
}

impl FactorNode for LocNode {
    fn factor(&self) -> FactorTag {
        FactorTag::LOC
    }

    fn verify(&mut self, _txn_id: TxnId, token: &PaymentToken, now: TimeStamp) -> Outcome {
        loc_verify(
            token,
            &self.records,
            &self.store,
            &mut self.guard,
            now,
            self.tolerance_cells,
        )
    }

    fn enroll(
        &mut self,
        wallet_id: WalletId,
        material: &EnrollMaterial,
        rng: &mut dyn RngCore,
    ) -> Result<Option<SecretToken>, EnrollFailure> {
        let EnrollMaterial::Location { device_id } = material else {
            return Err(EnrollFailure::UnsupportedMaterial);
        };
        issue_preshared(&mut self.records, wallet_id, rng, |lps| LocRecord {
            device_id: device_id.clone(),
            lps,
        })
        .map(Some)
    }

    fn ingest_fix(&mut self, fix: &LocationFixMsg) -> Option<Result<(), LocationError>> {
        Some(ingest_location_fix(
            &mut self.store,
            &fix.device_id,
            Fix {
                cell: fix.cell,
                t: fix.t,
            },
        ))
    }

    fn state_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("loc node state serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::token::{assemble_payment_token, parse_payment_token};

    const WALLET: WalletId = WalletId([4; 16]);
    const NOW: TimeStamp = TimeStamp(1_700_000_000);

    fn cell(lat: i32, lon: i32) -> GeoCell {
        GeoCell::new(lat, lon).unwrap()
    }

    fn setup(tolerance: u32, fix: GeoCell) -> LocNode {
        let mut node = LocNode::new(60, tolerance);
        node.records.insert(
            WALLET,
            LocRecord {
                device_id: "dev".into(),
                lps: SecretToken([8; 32]),
            },
        );
        ingest_location_fix(&mut node.store, "dev", Fix { cell: fix, t: TimeStamp(NOW.0 - 10) }).unwrap();
        node
    }

    fn token_at(submitted: GeoCell) -> PaymentToken {
        let lt = build_location_token(&submitted, NOW, &SecretToken([8; 32])).unwrap();
        let bytes = assemble_payment_token(WALLET, NOW, &[(FactorTag::LOC, lt.0.to_vec())]).unwrap();
        parse_payment_token(&bytes).unwrap()
    }

    fn verify(node: &mut LocNode, tok: &PaymentToken) -> Reason {
        node.verify(TxnId([0; 16]), tok, NOW)
            .err()
            .map(|r| r.reason)
            .unwrap_or(Reason::Ok)
    }

    #[test]
    fn exact_cell_approves() {
        let home = cell(3590, -7890);
        assert_eq!(verify(&mut setup(1, home), &token_at(home)), Reason::Ok);
    }

    #[test]
    fn neighborhood_brute_force() {
        // Enumerate the 5x5 block around the fix: exactly the inner 3x3
        // approves at tolerance 1.
        let home = cell(100, 100);
        let mut approved = Vec::new();
        for d_lat in -2..=2 {
            for d_lon in -2..=2 {
                let submitted = home.shifted(d_lat, d_lon).unwrap();
                let mut node = setup(1, home);
                if verify(&mut node, &token_at(submitted)) == Reason::Ok {
                    approved.push((d_lat, d_lon));
                }
                let expect_ok = submitted.chebyshev(&home) <= 1;
                assert_eq!(approved.contains(&(d_lat, d_lon)), expect_ok);
            }
        }
        assert_eq!(approved.len(), 9);
    }

    #[test]
    fn zero_tolerance_rejects_adjacent() {
        let home = cell(0, 0);
        assert_eq!(verify(&mut setup(0, home), &token_at(cell(0, 1))), Reason::Mismatch);
        assert_eq!(verify(&mut setup(0, home), &token_at(home)), Reason::Ok);
    }

    #[test]
    fn grid_edge_neighborhood_is_clipped() {
        let corner = cell(8999, 17999);
        assert_eq!(verify(&mut setup(1, corner), &token_at(cell(8998, 17998))), Reason::Ok);
    }

    #[test]
    fn no_fix_is_mismatch_with_detail() {
        let mut node = LocNode::new(60, 1);
        node.records.insert(
            WALLET,
            LocRecord {
                device_id: "dev".into(),
                lps: SecretToken([8; 32]),
            },
        );
        let err = node.verify(TxnId([0; 16]), &token_at(cell(0, 0)), NOW).unwrap_err();
        assert_eq!(err.reason, Reason::Mismatch);
        assert_eq!(err.detail.as_deref(), Some("NO_FIX"));
    }

    #[test]
    fn fixes_are_monotonic_and_bounded() {
        let mut store = LocationStore {
            history_cap: 2,
            ..Default::default()
        };
        let f = |t| Fix { cell: cell(1, 1), t: TimeStamp(t) };
        ingest_location_fix(&mut store, "d", f(10)).unwrap();
        assert!(store.devices["d"].history.is_empty());
        ingest_location_fix(&mut store, "d", f(20)).unwrap();
        assert_eq!(store.devices["d"].history.len(), 1);
        assert_eq!(
            ingest_location_fix(&mut store, "d", f(15)),
            Err(LocationError::NonMonotonic { latest: 20, got: 15 })
        );
        assert!(ingest_location_fix(&mut store, "d", f(20)).is_err());
        ingest_location_fix(&mut store, "d", f(30)).unwrap();
        ingest_location_fix(&mut store, "d", f(40)).unwrap();
        let track = &store.devices["d"];
        assert_eq!(track.history.len(), 2);
        let times: Vec<u64> = track.history.iter().map(|f| f.t.0).chain([track.current.t.0]).collect();
        assert_eq!(times, vec![20, 30, 40]);
    }
}
