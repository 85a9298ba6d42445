use std::path::Path;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, ValueEnum};
use mpa_core::deploy::DeployConfig;
use mpa_core::netsim::{
    CaptureSubmit, Message, PayIntent, PaymentSubmit, RequestChannel, SimChannel, TcpChannel,
};
use mpa_core::nodes::{AuthNodeRole, FundNode};
use mpa_core::token::{AmountMinor, Currency, GeoCell};
use mpa_core::wallet::{CaptureInputs, WalletState};
use mpa_core::{BiometricTemplate, Decision, FactorTag, TimeStamp, Verdict};

use crate::{ConfigArg, Format, Outcome, Transport};

/// Address the wallet uses inside the simulator when none is configured.
const SIM_WALLET_ADDR: &str = "wallet";
const SETTLE_HORIZON_MS: u64 = 600_000;

fn wall_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn parse_cell(s: &str) -> Result<GeoCell, String> {
    let (lat, lon) = s
        .split_once(',')
        .ok_or_else(|| format!("expected LAT_CELL,LON_CELL, got `{s}`"))?;
    let lat: i32 = lat.trim().parse().map_err(|e| format!("lat_cell: {e}"))?;
    let lon: i32 = lon.trim().parse().map_err(|e| format!("lon_cell: {e}"))?;
    GeoCell::new(lat, lon).map_err(|e| e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Expect {
    Approve,
    Decline,
}

#[derive(Args, Debug)]
pub struct PayArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Amount in minor units (cents).
    #[arg(long)]
    amount: u64,
    #[arg(long, default_value = "USD")]
    currency: String,
    /// Captured location as LAT_CELL,LON_CELL; the wallet's configured fix
    /// when omitted.
    #[arg(long, value_parser = parse_cell, allow_hyphen_values = true)]
    cell: Option<GeoCell>,
    /// Captured biometric template (64 hex digits); the enrolled one when
    /// omitted.
    #[arg(long)]
    biometric: Option<BiometricTemplate>,
    /// Flip these bits of the captured biometric.
    #[arg(long)]
    flip_bit: Vec<usize>,
    #[arg(long, default_value_t = 0, allow_hyphen_values = true)]
    clock_skew_s: i64,
    /// Factors to attach, comma separated; everything enrolled by default.
    #[arg(long, value_delimiter = ',')]
    factors: Option<Vec<FactorTag>>,
    #[arg(long, value_enum, default_value = "sim")]
    transport: Transport,
    /// Exit with status 2 unless the decision matches.
    #[arg(long, value_enum)]
    expect: Option<Expect>,
    #[arg(long, value_enum, default_value = "table")]
    format: Format,
}

fn report_fix(
    cfg: &DeployConfig,
    wallet: &WalletState,
    now_ms: u64,
    chan: &mut dyn RequestChannel,
) -> Result<()> {
    let (Some(cell), Ok(loc)) = (cfg.wallet()?.fix, cfg.factor_addr(FactorTag::LOC)) else {
        return Ok(());
    };
    if !wallet.report_fix(cell, TimeStamp::from_millis(now_ms), loc, chan)? {
        log::warn!("location node refused the fix (an equal or newer one is already stored)");
    }
    Ok(())
}

pub fn enroll(config: &Path, transport: Transport) -> Result<Outcome> {
    let cfg = DeployConfig::load(config)?;
    let ws = cfg.wallet()?.clone();
    let mut wallet = cfg.load_or_create_wallet()?;
    let targets = cfg.enrollment_targets();
    let network = cfg.network()?.addr.clone();
    let result = match transport {
        Transport::Sim => {
            let mut sim = cfg.sim_world(wall_ms())?;
            let client = ws.addr.clone().unwrap_or_else(|| SIM_WALLET_ADDR.into());
            let mut chan = SimChannel::new(&mut sim, &client);
            let r = wallet
                .enroll_all(&ws.pan, &network, &targets, &mut chan)
                .map_err(anyhow::Error::from)
                .and_then(|()| {
                    let now = chan.sim.now_ms();
                    report_fix(&cfg, &wallet, now, &mut chan)
                });
            cfg.save_world(&sim)?;
            r
        }
        Transport::Tcp => {
            let mut chan = TcpChannel::new(Duration::from_secs(5));
            wallet
                .enroll_all(&ws.pan, &network, &targets, &mut chan)
                .map_err(anyhow::Error::from)
                .and_then(|()| report_fix(&cfg, &wallet, wall_ms(), &mut chan))
        }
    };
    // Keep whatever was obtained: a provisioned token cannot be fetched twice.
    wallet
        .save(&ws.state)
        .with_context(|| format!("saving wallet state to {}", ws.state.display()))?;
    result?;
    let factors: Vec<String> = wallet.enrolled_factors().iter().map(|f| f.name()).collect();
    println!("wallet {} enrolled: {}", wallet.wallet_id, factors.join(", "));
    Ok(Outcome::Ok)
}

fn captured_biometric(args: &PayArgs, enrolled: Option<BiometricTemplate>) -> Result<BiometricTemplate> {
    let base = args
        .biometric
        .or(enrolled)
        .ok_or_else(|| anyhow!("no biometric available: pass --biometric"))?;
    if let Some(bit) = args.flip_bit.iter().find(|b| **b >= 256) {
        bail!("--flip-bit {bit} is out of range (0-255)");
    }
    Ok(args.flip_bit.iter().fold(base, |b, bit| b.with_bit_flipped(*bit)))
}

pub fn pay(args: &PayArgs) -> Result<Outcome> {
    let cfg = DeployConfig::load(&args.config.config)?;
    let ws = cfg.wallet()?.clone();
    let currency = Currency::new(&args.currency)?;
    let amount = AmountMinor::new(args.amount, currency);
    let cell = args
        .cell
        .or(ws.fix)
        .ok_or_else(|| anyhow!("no location: pass --cell or set wallet.fix in the config"))?;
    let decision = match args.transport {
        Transport::Sim => {
            if !ws.state.exists() {
                bail!("wallet has no state at {}; run `mpa enroll` first", ws.state.display());
            }
            let wallet = WalletState::load(&ws.state)?;
            let inputs = CaptureInputs {
                biometric_reading: captured_biometric(args, Some(wallet.enrolled_template))?,
                location_fix: cell,
                amount,
                t: TimeStamp::from_millis(wall_ms()).offset(args.clock_skew_s),
            };
            let factors = args.factors.clone().unwrap_or_else(|| wallet.enrolled_factors());
            let token = wallet.initiate_payment(&inputs, &factors)?;
            sim_pay(&cfg, ws.addr.as_deref().unwrap_or(SIM_WALLET_ADDR), token)?
        }
        Transport::Tcp => {
            let addr = ws
                .addr
                .clone()
                .ok_or_else(|| anyhow!("wallet.addr is not configured; cannot reach the wallet server"))?;
            let enrolled = ws.template.or_else(|| {
                WalletState::load(&ws.state).ok().map(|w| w.enrolled_template)
            });
            let intent = PayIntent {
                amount,
                biometric: captured_biometric(args, enrolled)?,
                cell,
                clock_skew_s: args.clock_skew_s,
                factors: args.factors.clone(),
            };
            let margin = cfg.pos().map(|p| p.margin_ms).unwrap_or(0);
            let wait = Duration::from_millis(cfg.policy.deadline_ms + margin + 5_000);
            let mut chan = TcpChannel::new(wait);
            let msg = Message::PaymentSubmit(PaymentSubmit::Capture(CaptureSubmit { capture: intent }));
            match chan.request(&addr, msg)? {
                Message::Decision(d) => d.decision,
                other => bail!("wallet answered with {}", other.msg_type().name()),
            }
        }
    };
    print_decision(&decision, args.format);
    let met = match args.expect {
        None => true,
        Some(Expect::Approve) => decision.verdict == Verdict::Approve,
        Some(Expect::Decline) => decision.verdict == Verdict::Decline,
    };
    Ok(if met { Outcome::Ok } else { Outcome::AssertionsFailed })
}

/// Run one tap through a simulator built from the config's persisted
/// state, then write the state back.
fn sim_pay(cfg: &DeployConfig, client: &str, token: Vec<u8>) -> Result<Decision> {
    let now = wall_ms();
    let mut sim = cfg.sim_world(now)?;
    let pos = cfg.pos()?.addr.clone();
    sim.inject(client, &pos, Message::PaymentSubmit(PaymentSubmit::token(token)));
    sim.run_until_idle(now + SETTLE_HORIZON_MS)
        .map_err(|e| anyhow!("simulation did not settle: {e}"))?;
    let decision = sim
        .take_mailbox(client)
        .into_iter()
        .filter_map(|env| match env.msg {
            Message::Decision(d) => Some((d.session, d.decision)),
            _ => None,
        })
        .min_by_key(|(session, _)| *session)
        .map(|(_, d)| d)
        .ok_or_else(|| anyhow!("no decision reached the wallet"))?;
    if let Ok(fund) = cfg.factor_addr(FactorTag::FUND) {
        if let Some(role) = sim.role_mut::<AuthNodeRole<FundNode>>(fund) {
            let ledger = &mut role.node.ledger;
            if ledger.hold(&decision.txn_id).is_some() {
                if decision.verdict == Verdict::Approve {
                    ledger.capture(&decision.txn_id);
                } else {
                    ledger.void(&decision.txn_id);
                }
            }
        }
    }
    cfg.save_world(&sim)?;
    Ok(decision)
}

fn print_decision(d: &Decision, format: Format) {
    match format {
        Format::Json => println!(
            "{}",
            serde_json::to_string_pretty(d).expect("decision serializes")
        ),
        Format::Table => {
            println!("txn      {}", d.txn_id);
            println!("verdict  {}", d.verdict);
            if let Some(r) = &d.decline_reason {
                match r.factor() {
                    Some(f) => println!("reason   {} at {f}", r.code()),
                    None => println!("reason   {}", r.code()),
                }
            }
            for c in &d.contributing {
                println!("  {:<6} {:<8} {}", c.factor.name(), c.verdict, c.reason);
            }
        }
    }
}
