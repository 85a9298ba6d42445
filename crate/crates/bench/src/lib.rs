//! Shared fixtures for the benchmarks.

use mpa_core::nodes::{BioNode, FactorNode, FundNode, LocNode};
use mpa_core::netsim::LocationFixMsg;
use mpa_core::token::{AmountMinor, GeoCell};
use mpa_core::wallet::{CaptureInputs, WalletState};
use mpa_core::{BiometricTemplate, FactorTag, SecretToken, TimeStamp};
use rand_core::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

pub const WINDOW_S: u64 = 60;
pub const ALL: [FactorTag; 3] = [FactorTag::FUND, FactorTag::BIO, FactorTag::LOC];

/// One wallet enrolled with a fresh node of each kind.
pub struct Fixture {
    pub wallet: WalletState,
    pub fund: FundNode,
    pub bio: BioNode,
    pub loc: LocNode,
    pub home: GeoCell,
    pub now: TimeStamp,
}

impl Fixture {
    pub fn new() -> Self {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(42);
        let template = BiometricTemplate([0x5a; 32]);
        let mut wallet = WalletState::new(&mut rng, template, "dev-bench", "acct-bench");
        wallet.ot = Some(SecretToken([1; 32]));
        let home = GeoCell::new(4071, -7400).unwrap();
        let now = TimeStamp::new(1_700_000_000);

        let mut fund = FundNode::new(WINDOW_S);
        fund.ledger.open_account("acct-bench", AmountMinor::usd(u64::MAX / 2));
        let mut bio = BioNode::new(WINDOW_S);
        let mut loc = LocNode::new(WINDOW_S, 1);
        for (tag, node) in [
            (FactorTag::FUND, &mut fund as &mut dyn FactorNode),
            (FactorTag::BIO, &mut bio),
            (FactorTag::LOC, &mut loc),
        ] {
            let material = wallet.enrollment_material(tag);
            if let Some(ps) = node.enroll(wallet.wallet_id, &material, &mut rng).unwrap() {
                wallet.preshared.insert(tag, ps);
            }
        }
        wallet.fund_registered = true;
        loc.ingest_fix(&LocationFixMsg {
            device_id: wallet.device_id.clone(),
            cell: home,
            t: now.offset(-10),
            accepted: None,
        });
        Self {
            wallet,
            fund,
            bio,
            loc,
            home,
            now,
        }
    }

    pub fn inputs(&self, amount: u64) -> CaptureInputs {
        CaptureInputs {
            biometric_reading: self.wallet.enrolled_template,
            location_fix: self.home,
            amount: AmountMinor::usd(amount),
            t: self.now,
        }
    }

    pub fn token(&self, amount: u64) -> Vec<u8> {
        self.wallet.initiate_payment(&self.inputs(amount), &ALL).unwrap()
    }
}

impl Default for Fixture {
    fn default() -> Self {
        Self::new()
    }
}
