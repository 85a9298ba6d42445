//! One line per acceptance criterion. Runs without the libtest harness so the
//! lines are printed even when the suite passes.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic;
use std::process::ExitCode;
use std::time::Instant;

use common::{oracle_factor_token, oracle_hmac, rng, TcpWorld};
use mpa_core::harness::{self, AttackKind, Engine, RowKind, Scenario, BUNDLED};
use mpa_core::netsim::{LocationFixMsg, Message, TxnRegister};
use mpa_core::network::{provision_token, settled_outcome, validate_baseline, NodeKey, PendingTable, ProvisionRegistry};
use mpa_core::nodes::{BioNode, FactorNode, FundNode, LocNode, Rejection};
use mpa_core::pos::receive_tap;
use mpa_core::token::{parse_payment_token, AmountMinor, FundToken, GeoCell};
use mpa_core::wallet::{CaptureInputs, WalletState};
use mpa_core::{
    AuthResult, BiometricTemplate, DecisionPolicy, DeclineReason, FactorTag, Reason, SecretToken, TimeStamp,
    TxnId, Verdict, WalletId,
};
use rand_core::RngCore;

const W: u64 = 60;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn baseline_equivalence() -> Check {
    let mut r = rng(11);
    let mut registry = ProvisionRegistry::with_issuer_pans(["4111111111111111".to_string()]);
    for trial in 0..1000 {
        let mut id = [0u8; 16];
        r.fill_bytes(&mut id);
        let wallet_id = WalletId(id);
        let ot = provision_token("4111111111111111", wallet_id, &mut registry, &mut r).map_err(|e| e.to_string())?;
        let t = TimeStamp::new(r.next_u64() % (1 << 40));
        let mut wallet = WalletState::new(&mut r, BiometricTemplate([0; 32]), "d", "a");
        wallet.wallet_id = wallet_id;
        wallet.ot = Some(ot);
        let code = wallet.baseline_ottc(t).map_err(|e| e.to_string())?;
        let expected = oracle_hmac(&ot.0, &t.0.to_be_bytes());
        ensure(code.0 == expected, || format!("trial {trial}: wallet code differs from oracle"))?;
        let ok = validate_baseline(&code, wallet_id, t, &registry, t, W).map_err(|e| e.to_string())?;
        ensure(ok, || format!("trial {trial}: network rejected a genuine code"))?;
        for i in 0..32 {
            let mut bad = code;
            bad.0[i] ^= 1 + (r.next_u32() % 255) as u8;
            let accepted = validate_baseline(&bad, wallet_id, t, &registry, t, W).map_err(|e| e.to_string())?;
            ensure(!accepted, || format!("trial {trial}: corruption at byte {i} accepted"))?;
        }
    }
    Ok("1000 trials, 32000 corruptions rejected".into())
}

fn regeneration_symmetry() -> Check {
    let mut r = rng(12);
    let mut bit_rejections = 0u64;
    let mut cell_rejections = 0u64;
    for trial in 0..1000 {
        let mut b = [0u8; 32];
        r.fill_bytes(&mut b);
        let template = BiometricTemplate(b);
        let mut wallet = WalletState::new(&mut r, template, &format!("dev-{trial}"), "acct");
        wallet.ot = Some(SecretToken([9; 32]));
        let mut bio = BioNode::new(W);
        let mut loc = LocNode::new(W, 1);
        let bps = bio
            .enroll(wallet.wallet_id, &wallet.enrollment_material(FactorTag::BIO), &mut r)
            .map_err(|e| e.to_string())?
            .ok_or("no biometric pre-shared token")?;
        let lps = loc
            .enroll(wallet.wallet_id, &wallet.enrollment_material(FactorTag::LOC), &mut r)
            .map_err(|e| e.to_string())?
            .ok_or("no location pre-shared token")?;
        wallet.preshared.insert(FactorTag::BIO, bps);
        wallet.preshared.insert(FactorTag::LOC, lps);
        let lat = (r.next_u32() % 17000) as i32 - 8500;
        let lon = (r.next_u32() % 35000) as i32 - 17500;
        let fix = GeoCell::new(lat, lon).unwrap();
        let t = TimeStamp::new(1_700_000_000 + (r.next_u32() % 1_000_000) as u64);
        loc.ingest_fix(&LocationFixMsg {
            device_id: wallet.device_id.clone(),
            cell: fix,
            t,
            accepted: None,
        });

        let build = |reading: BiometricTemplate, cell: GeoCell| {
            let inputs = CaptureInputs {
                biometric_reading: reading,
                location_fix: cell,
                amount: AmountMinor::usd(1),
                t,
            };
            let bytes = wallet.initiate_payment(&inputs, &[FactorTag::BIO, FactorTag::LOC]).unwrap();
            parse_payment_token(&bytes).unwrap()
        };
        let token = build(template, fix);
        let bt = oracle_factor_token(&bps.0, t.0, &b);
        let mut cell_bytes = [0u8; 8];
        cell_bytes[..4].copy_from_slice(&lat.to_be_bytes());
        cell_bytes[4..].copy_from_slice(&lon.to_be_bytes());
        let lt = oracle_factor_token(&lps.0, t.0, &cell_bytes);
        ensure(token.entry(FactorTag::BIO) == Some(&bt[..]), || format!("trial {trial}: BT differs from oracle"))?;
        ensure(token.entry(FactorTag::LOC) == Some(&lt[..]), || format!("trial {trial}: LT differs from oracle"))?;
        let fresh = |n: &mut BioNode| n.guard = mpa_core::nodes::FreshnessGuard::new(W);
        fresh(&mut bio);
        ensure(bio.verify(TxnId([0; 16]), &token, t).is_ok(), || format!("trial {trial}: genuine BT declined"))?;
        loc.guard = mpa_core::nodes::FreshnessGuard::new(W);
        ensure(loc.verify(TxnId([0; 16]), &token, t).is_ok(), || format!("trial {trial}: genuine LT declined"))?;

        for bit in 0..256 {
            let bad = build(template.with_bit_flipped(bit), fix);
            fresh(&mut bio);
            let out = bio.verify(TxnId([0; 16]), &bad, t);
            ensure(matches!(out, Err(Rejection { reason: Reason::Mismatch, .. })), || {
                format!("trial {trial}: bit {bit} flip gave {out:?}")
            })?;
            bit_rejections += 1;
        }
        for d_lat in -2..=2i32 {
            for d_lon in -2..=2i32 {
                if d_lat.abs().max(d_lon.abs()) != 2 {
                    continue;
                }
                let Some(cell) = fix.shifted(d_lat, d_lon) else { continue };
                let bad = build(template, cell);
                loc.guard = mpa_core::nodes::FreshnessGuard::new(W);
                let out = loc.verify(TxnId([0; 16]), &bad, t);
                ensure(matches!(out, Err(Rejection { reason: Reason::Mismatch, .. })), || {
                    format!("trial {trial}: cell offset ({d_lat},{d_lon}) gave {out:?}")
                })?;
                cell_rejections += 1;
            }
        }
    }
    Ok(format!(
        "1000 enrollments, {bit_rejections} biometric bit flips and {cell_rejections} out-of-tolerance cells declined"
    ))
}

fn fund_checks() -> Check {
    let mut r = rng(13);
    let now = TimeStamp::new(1_700_000_000);
    let mut wallet = WalletState::new(&mut r, BiometricTemplate([1; 32]), "dev", "acct-1");
    wallet.ot = Some(SecretToken([2; 32]));
    wallet.fund_registered = true;
    let fresh_node = |r: &mut dyn RngCore| {
        let mut node = FundNode::new(W);
        node.ledger.open_account("acct-1", AmountMinor::usd(1000));
        node.enroll(wallet.wallet_id, &wallet.enrollment_material(FactorTag::FUND), r)
            .unwrap();
        node
    };
    let pay = |amount: u64, t: TimeStamp| {
        let inputs = CaptureInputs {
            biometric_reading: BiometricTemplate([1; 32]),
            location_fix: GeoCell::new(0, 0).unwrap(),
            amount: AmountMinor::usd(amount),
            t,
        };
        wallet.initiate_payment(&inputs, &[FactorTag::FUND]).unwrap()
    };
    let verify = |node: &mut FundNode, bytes: &[u8]| {
        let token = parse_payment_token(bytes).unwrap();
        node.verify(TxnId::of_token(bytes), &token, now).map_err(|e| e.reason)
    };
    for delta in [-(W as i64) - 1, -(W as i64), W as i64, W as i64 + 1] {
        let mut node = fresh_node(&mut r);
        let out = verify(&mut node, &pay(10, now.offset(delta)));
        let expect_fresh = delta.unsigned_abs() <= W;
        ensure(out.is_ok() == expect_fresh, || format!("skew {delta}s gave {out:?}"))?;
        if !expect_fresh {
            ensure(out == Err(Reason::Stale), || format!("skew {delta}s gave {out:?}"))?;
        }
    }
    let mut node = fresh_node(&mut r);
    ensure(verify(&mut node, &pay(1000, now)).is_ok(), || "amount = balance declined".into())?;
    let mut node = fresh_node(&mut r);
    let out = verify(&mut node, &pay(1001, now));
    ensure(out == Err(Reason::InsufficientFunds), || format!("balance + 1 gave {out:?}"))?;

    let genuine = pay(10, now);
    let token = parse_payment_token(&genuine).unwrap();
    let ft = token.entry(FactorTag::FUND).unwrap().to_vec();
    ensure(ft.len() == FundToken::ENCODED_LEN, || "fund entry length".into())?;
    let offset = genuine.windows(ft.len()).position(|w| w == ft).unwrap();
    let mut corruptions = 0;
    for i in 0..FundToken::ENCODED_LEN {
        for mask in [0x01u8, 0x80, 0xff] {
            let mut bad = genuine.clone();
            bad[offset + i] ^= mask;
            let mut node = fresh_node(&mut r);
            let out = verify(&mut node, &bad);
            ensure(matches!(out, Err(Reason::BadSignature) | Err(Reason::Malformed)), || {
                format!("fund byte {i} ^ {mask:#04x} gave {out:?}")
            })?;
            corruptions += 1;
        }
    }
    Ok(format!("window edges exact, balance edge exact, {corruptions} fund-token corruptions declined"))
}

fn replay_defense() -> Check {
    let seeds: Vec<u64> = (1..=100).collect();
    let report = harness::attack(AttackKind::Replay, &seeds).map_err(|e| e.to_string())?;
    let mut second_deliveries = 0;
    for row in &report.rows {
        match row.kind {
            RowKind::Pay => {
                ensure(row.verdict == Verdict::Approve, || format!("{}: honest payment declined", row.label))?;
                ensure(row.deliveries.len() == 2, || {
                    format!("{}: {} deliveries under dup_prob = 1", row.label, row.deliveries.len())
                })?;
                let second = &row.deliveries[1];
                ensure(
                    second.verdict == Verdict::Decline && second.decline_reason.as_deref() == Some("DUPLICATE"),
                    || format!("{}: second delivery {second:?}", row.label),
                )?;
                second_deliveries += 1;
            }
            RowKind::Replay => ensure(
                row.deliveries.iter().all(|d| d.decline_reason.as_deref() == Some("DUPLICATE")),
                || format!("{}: {:?}", row.label, row.deliveries),
            )?,
            _ => {}
        }
    }
    let a = &report.aggregates;
    ensure(a.attack_approvals == 0 && a.extra_approvals == 0, || {
        format!("{} fraudulent approvals, {} double approvals", a.attack_approvals, a.extra_approvals)
    })?;
    Ok(format!(
        "100 seeded runs, {second_deliveries} second deliveries declined DUPLICATE, {} replays, 0 fraudulent approvals",
        a.attack_transactions
    ))
}

#[derive(Clone, Copy, PartialEq)]
enum Slot {
    Required,
    Optional,
    Unused,
}

/// Straight enumeration of the rule: every required factor approves and at
/// least `quorum` optional ones do; otherwise cite the first required
/// failure in tag order, or the quorum.
fn oracle_decide(
    factors: &[FactorTag],
    slots: &[Slot],
    quorum: usize,
    reported: &BTreeMap<FactorTag, Reason>,
) -> (Verdict, Option<DeclineReason>) {
    for (f, s) in factors.iter().zip(slots) {
        if *s == Slot::Required {
            match reported.get(f) {
                None => return (Verdict::Decline, Some(DeclineReason::Timeout { factor: *f })),
                Some(Reason::Ok) => {}
                Some(reason) => {
                    return (
                        Verdict::Decline,
                        Some(DeclineReason::Factor {
                            factor: *f,
                            reason: *reason,
                        }),
                    )
                }
            }
        }
    }
    let approvals = factors
        .iter()
        .zip(slots)
        .filter(|(f, s)| **s == Slot::Optional && reported.get(f) == Some(&Reason::Ok))
        .count();
    if approvals < quorum {
        return (
            Verdict::Decline,
            Some(DeclineReason::QuorumShortfall {
                approvals,
                required: quorum,
            }),
        );
    }
    (Verdict::Approve, None)
}

fn decision_policy() -> Check {
    let universe = [FactorTag::FUND, FactorTag::BIO, FactorTag::LOC, FactorTag(0x80)];
    let states = [Some(Reason::Ok), Some(Reason::Mismatch), Some(Reason::InsufficientFunds), None];
    let keys: BTreeMap<String, NodeKey> = universe
        .iter()
        .map(|f| {
            (
                format!("node-{}", f.0),
                NodeKey {
                    factor: *f,
                    mac_key: SecretToken([f.0; 32]),
                },
            )
        })
        .collect();
    let mut table = PendingTable::default();
    let mut cases = 0u64;
    let mut txn_counter = 0u128;
    for assign in 0..3usize.pow(4) {
        let slots: Vec<Slot> = (0..4)
            .map(|i| match (assign / 3usize.pow(i)) % 3 {
                0 => Slot::Required,
                1 => Slot::Optional,
                _ => Slot::Unused,
            })
            .collect();
        let pick = |s: Slot| -> BTreeSet<FactorTag> {
            universe.iter().zip(&slots).filter(|(_, x)| **x == s).map(|(f, _)| *f).collect()
        };
        let (required, optional) = (pick(Slot::Required), pick(Slot::Optional));
        let in_policy: Vec<FactorTag> = universe.iter().zip(&slots).filter(|(_, s)| **s != Slot::Unused).map(|(f, _)| *f).collect();
        for quorum in 0..=optional.len() {
            let policy = DecisionPolicy {
                required: required.clone(),
                optional: optional.clone(),
                optional_quorum: quorum,
                deadline_ms: 500,
            };
            for vector in 0..states.len().pow(in_policy.len() as u32) {
                let mut reported = BTreeMap::new();
                for (i, f) in in_policy.iter().enumerate() {
                    if let Some(reason) = states[(vector / states.len().pow(i as u32)) % states.len()] {
                        reported.insert(*f, reason);
                    }
                }
                // Early settlement: settled exactly when every way of filling
                // in the silent factors gives the same verdict.
                let silent: Vec<FactorTag> = in_policy.iter().filter(|f| !reported.contains_key(f)).copied().collect();
                let verdicts: BTreeSet<Verdict> = (0..1u32 << silent.len())
                    .map(|fill| {
                        let mut full = reported.clone();
                        for (i, f) in silent.iter().enumerate() {
                            full.insert(*f, if fill >> i & 1 == 1 { Reason::Ok } else { Reason::Mismatch });
                        }
                        oracle_decide(&universe, &slots, quorum, &full).0
                    })
                    .collect();
                // A settled outcome cites what the optimistic fill cites: a
                // known failure outranks a factor that is merely late.
                let expected = if verdicts.len() == 1 {
                    let mut best = reported.clone();
                    for f in &silent {
                        best.insert(*f, Reason::Ok);
                    }
                    oracle_decide(&universe, &slots, quorum, &best)
                } else {
                    oracle_decide(&universe, &slots, quorum, &reported)
                };

                txn_counter += 1;
                let txn_id = TxnId(txn_counter.to_be_bytes());
                table.register(
                    &TxnRegister {
                        txn_id,
                        session: 1,
                        factors: in_policy.clone(),
                    },
                    "pos",
                    0,
                );
                for (f, reason) in &reported {
                    let outcome = if *reason == Reason::Ok { Ok(()) } else { Err(Rejection::new(*reason)) };
                    let node_id = format!("node-{}", f.0);
                    let result = AuthResult::signed(txn_id, *f, &outcome, &node_id, &keys[&node_id].mac_key);
                    table.collect_result(result, &keys);
                }
                let (decision, _, _) = table.decide(&txn_id, &policy).map_err(|e| e.to_string())?;
                ensure((decision.verdict, decision.decline_reason.clone()) == expected, || {
                    format!("policy {policy:?} reported {reported:?}: got {decision:?}, oracle {expected:?}")
                })?;

                let settled = settled_outcome(&policy, &reported);
                ensure(settled.is_some() == (verdicts.len() == 1), || {
                    format!("policy {policy:?} reported {reported:?}: settled = {settled:?}")
                })?;
                if let Some((v, _)) = settled {
                    ensure(verdicts.contains(&v), || format!("settled verdict {v} not reachable"))?;
                }
                cases += 1;
            }
        }
    }
    Ok(format!("{cases} policy/verdict combinations match the enumeration"))
}

fn end_to_end() -> Check {
    let happy = Scenario::bundled("happy_path").map_err(|e| e.to_string())?;
    let sim = harness::run_scenario(&happy).map_err(|e| e.to_string())?;
    let sim_verdicts: Vec<(String, Verdict)> = sim
        .rows
        .iter()
        .filter(|r| r.kind == RowKind::Pay)
        .map(|r| (r.label.clone(), r.verdict))
        .collect();
    ensure(
        !sim_verdicts.is_empty() && sim_verdicts.iter().all(|(_, v)| *v == Verdict::Approve),
        || format!("simulator verdicts {sim_verdicts:?}"),
    )?;
    let mut world = TcpWorld::start(&happy);
    let tcp_verdicts: Vec<(String, Verdict)> = world
        .run_script(&happy)
        .into_iter()
        .map(|(label, d)| (label, d.verdict))
        .collect();
    ensure(tcp_verdicts == sim_verdicts, || format!("tcp {tcp_verdicts:?} vs sim {sim_verdicts:?}"))?;
    drop(world);

    let mut attacks = Vec::new();
    for kind in AttackKind::ALL {
        let report = harness::attack(kind, &harness::default_attack_seeds(kind)).map_err(|e| e.to_string())?;
        let a = &report.aggregates;
        ensure(a.attack_transactions > 0, || format!("{}: no attack transactions", kind.name()))?;
        ensure(a.attack_approvals == 0 && report.passed(), || {
            format!("{}: {} attack approvals\n{}", kind.name(), a.attack_approvals, report.to_table())
        })?;
        attacks.push(format!("{} {}/0", kind.name(), a.attack_transactions));
    }
    Ok(format!(
        "happy path APPROVE on sim and tcp; attacks (tried/approved): {}",
        attacks.join(", ")
    ))
}

fn determinism() -> Check {
    for (name, _) in BUNDLED {
        let sc = Scenario::bundled(name).map_err(|e| e.to_string())?;
        let run = || {
            let out = Engine::new(&sc).unwrap().run().unwrap();
            (serde_json::to_string(&out.trace).unwrap(), out.report.to_json())
        };
        let (a, b) = (run(), run());
        ensure(a.0 == b.0, || format!("{name}: traces differ"))?;
        ensure(a.1 == b.1, || format!("{name}: reports differ"))?;
    }
    Ok(format!("{} bundled scenarios, traces and reports byte-identical", BUNDLED.len()))
}

fn parser_robustness() -> Check {
    let sc = Scenario::bundled("daily_use").map_err(|e| e.to_string())?;
    let mut engine = Engine::new(&sc).map_err(|e| e.to_string())?;
    engine.record_frames(true);
    let frames = engine.run().map_err(|e| e.to_string())?.frames;
    let tokens: Vec<Vec<u8>> = frames
        .iter()
        .filter_map(|f| match Message::from_frame(f) {
            Ok(Message::PaymentSubmit(mpa_core::netsim::PaymentSubmit::Token(t))) => Some(t.token),
            _ => None,
        })
        .collect();
    ensure(!tokens.is_empty() && !frames.is_empty(), || "empty seed corpus".into())?;

    let mut r = rng(14);
    let mut mutate = |seed: &[u8]| -> Vec<u8> {
        let mut b = seed.to_vec();
        match r.next_u32() % 6 {
            0 => {
                let n = (r.next_u32() % 400) as usize;
                b = vec![0; n];
                r.fill_bytes(&mut b);
            }
            1 => b.truncate((r.next_u32() as usize) % (b.len() + 1)),
            2 => {
                for _ in 0..1 + r.next_u32() % 4 {
                    if !b.is_empty() {
                        let i = r.next_u32() as usize % b.len();
                        b[i] ^= 1 << (r.next_u32() % 8);
                    }
                }
            }
            3 => {
                let i = r.next_u32() as usize % (b.len() + 1);
                b.insert(i, r.next_u32() as u8);
            }
            4 => {
                if !b.is_empty() {
                    let i = r.next_u32() as usize % b.len();
                    b.remove(i);
                }
            }
            _ => {
                if !b.is_empty() {
                    let i = r.next_u32() as usize % b.len().min(8);
                    b[i] = r.next_u32() as u8;
                }
            }
        }
        b
    };
    let prev = panic::take_hook();
    panic::set_hook(Box::new(|_| {}));
    let mut crashes = 0u64;
    let mut inputs = 0u64;
    for i in 0..60_000usize {
        let input = mutate(&tokens[i % tokens.len()]);
        inputs += 1;
        let ok = panic::catch_unwind(|| {
            let _ = parse_payment_token(&input);
            let _ = receive_tap(1, &input);
        });
        crashes += ok.is_err() as u64;
    }
    for i in 0..60_000usize {
        let input = mutate(&frames[i % frames.len()]);
        inputs += 1;
        let ok = panic::catch_unwind(|| {
            let _ = Message::from_frame(&input);
        });
        crashes += ok.is_err() as u64;
    }
    panic::set_hook(prev);
    ensure(crashes == 0, || format!("{crashes} of {inputs} inputs panicked"))?;
    Ok(format!("{inputs} mutated token and frame inputs, 0 crashes"))
}

fn main() -> ExitCode {
    let checks: [Criterion; 8] = [
        ("baseline_equivalence", baseline_equivalence),
        ("regeneration_symmetry", regeneration_symmetry),
        ("fund_checks", fund_checks),
        ("replay_defense", replay_defense),
        ("decision_policy_oracle", decision_policy),
        ("end_to_end_sim_and_tcp", end_to_end),
        ("determinism", determinism),
        ("parser_robustness", parser_robustness),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        let started = Instant::now();
        let result = panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = started.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("acceptance PASS {name} ({secs:.1}s): {detail}"),
            Err(why) => {
                failed += 1;
                println!("acceptance FAIL {name} ({secs:.1}s): {why}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
