mod common;

use common::TcpWorld;
use mpa_core::deploy::RoleKind;
use mpa_core::harness::Scenario;
use mpa_core::netsim::PayIntent;
use mpa_core::token::{AmountMinor, Currency};
use mpa_core::{DeclineReason, FactorTag, Reason, Verdict};

fn intent(world: &TcpWorld, sc: &Scenario, amount: AmountMinor) -> PayIntent {
    let spec = &sc.wallets[0];
    PayIntent {
        amount,
        biometric: world.wallets[&spec.name].0.enrolled_template,
        cell: spec.home,
        clock_skew_s: 0,
        factors: None,
    }
}

#[test]
fn loopback_deployment_approves_and_declines() {
    let sc = Scenario::bundled("happy_path").unwrap();
    let mut world = TcpWorld::start(&sc);
    let name = sc.wallets[0].name.clone();
    world.enroll(&sc, &name);

    let ok = world.pay(&name, intent(&world, &sc, AmountMinor::usd(250)));
    assert_eq!(ok.verdict, Verdict::Approve, "{ok:?}");
    assert_eq!(ok.contributing.len(), 3);

    let mut smudged = intent(&world, &sc, AmountMinor::usd(250));
    smudged.biometric = smudged.biometric.with_bit_flipped(17);
    let d = world.pay(&name, smudged);
    assert_eq!(
        d.decline_reason,
        Some(DeclineReason::Factor {
            factor: FactorTag::BIO,
            reason: Reason::Mismatch
        })
    );

    let euro = world.pay(&name, intent(&world, &sc, AmountMinor::new(100, Currency::new("EUR").unwrap())));
    assert_eq!(euro.verdict, Verdict::Decline);
    assert_eq!(euro.decline_reason.as_ref().and_then(|r| r.factor()), Some(FactorTag::FUND));
}

#[test]
fn killed_location_node_times_out() {
    let sc = Scenario::bundled("happy_path").unwrap();
    let mut world = TcpWorld::start(&sc);
    let name = sc.wallets[0].name.clone();
    world.enroll(&sc, &name);
    world.kill(RoleKind::Loc);
    let d = world.pay(&name, intent(&world, &sc, AmountMinor::usd(100)));
    assert_eq!(d.verdict, Verdict::Decline);
    assert_eq!(d.decline_reason, Some(DeclineReason::Timeout { factor: FactorTag::LOC }));
    assert!(d.contributing.iter().all(|c| c.factor != FactorTag::LOC));
}
