use std::path::PathBuf;
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, Context, Result};
use clap::Args;
use mpa_core::deploy::{DeployConfig, Overrides, RoleKind};
use mpa_core::netsim::{TcpChannel, TcpNode, TransportError};
use mpa_core::wallet::{WalletError, WalletRole};
use mpa_core::{FactorTag, TimeStamp};

use crate::{ConfigArg, Outcome};

#[derive(Args, Debug)]
pub struct ServeArgs {
    /// wallet, pos, fund, bio, loc, network or ext:<tag>.
    #[arg(long)]
    role: RoleKind,
    #[command(flatten)]
    config: ConfigArg,
    /// Listen address, replacing the configured one.
    #[arg(long)]
    listen: Option<String>,
    #[arg(long)]
    node_id: Option<String>,
    #[arg(long)]
    window_s: Option<u64>,
    #[arg(long)]
    tolerance_cells: Option<u32>,
    /// State file, replacing the configured one.
    #[arg(long)]
    state: Option<PathBuf>,
    /// Seconds between state snapshots while running.
    #[arg(long, default_value_t = 2)]
    snapshot_s: u64,
}

const ENROLL_ATTEMPTS: u32 = 20;

/// Provision and enroll a served wallet before it starts taking intents.
/// Peers may still be starting, so transport failures are retried.
fn prepare_wallet(cfg: &DeployConfig, role: &mut WalletRole) -> Result<()> {
    let ws = cfg.wallet()?;
    let targets = cfg.enrollment_targets();
    let network = cfg.network()?.addr.clone();
    let mut chan = TcpChannel::new(Duration::from_secs(3));
    let mut attempt = 0;
    loop {
        attempt += 1;
        let r = role.state.enroll_all(&ws.pan, &network, &targets, &mut chan);
        role.state.save(&ws.state)?;
        match r {
            Ok(()) => break,
            Err(e) if e.is_retryable() && attempt < ENROLL_ATTEMPTS => {
                log::info!("enrollment attempt {attempt} failed: {e}; retrying");
                thread::sleep(Duration::from_millis(250));
            }
            Err(e) => return Err(e).context("enrolling the wallet"),
        }
    }
    if let (Some(cell), Ok(loc)) = (ws.fix, cfg.factor_addr(FactorTag::LOC)) {
        let now = SystemTime::now().duration_since(UNIX_EPOCH)?.as_millis() as u64;
        match role.state.report_fix(cell, TimeStamp::from_millis(now), loc, &mut chan) {
            Ok(true) => {}
            Ok(false) => log::warn!("location node refused the configured fix"),
            Err(WalletError::Transport(TransportError::Timeout { .. })) => {
                log::warn!("location node did not acknowledge the fix")
            }
            Err(e) => return Err(e).context("reporting the wallet's location"),
        }
    }
    Ok(())
}

pub fn serve(args: &ServeArgs) -> Result<Outcome> {
    let mut cfg = DeployConfig::load(&args.config.config)?;
    let kind = args.role;
    cfg.apply_overrides(
        kind,
        &Overrides {
            listen: args.listen.clone(),
            node_id: args.node_id.clone(),
            window_s: args.window_s,
            tolerance_cells: args.tolerance_cells,
            state: args.state.clone(),
        },
    )?;
    let addr = cfg
        .addr(kind)
        .map_err(|_| anyhow!("no listen address configured for {kind}"))?
        .to_string();
    let mut role = cfg.build_role(kind)?;
    if kind == RoleKind::Wallet {
        let wallet = role
            .as_any_mut()
            .downcast_mut::<WalletRole>()
            .expect("wallet role");
        prepare_wallet(&cfg, wallet)?;
    }
    let handle = TcpNode::spawn(&addr, role).with_context(|| format!("binding {addr}"))?;
    log::info!("{kind} listening on {}", handle.addr());
    println!("{kind} listening on {}", handle.addr());

    let (tx, rx) = mpsc::channel();
    ctrlc::set_handler(move || {
        tx.send(()).ok();
    })
    .context("installing the signal handler")?;
    let every = Duration::from_secs(args.snapshot_s.max(1));
    let mut last = None;
    // Anything but a timeout (a signal, or the sender gone) ends the loop.
    while let Err(mpsc::RecvTimeoutError::Timeout) = rx.recv_timeout(every) {
        let state = handle.state_json();
        if state != last {
            cfg.save_role_state(kind, state.clone())?;
            last = state;
        }
    }
    log::info!("{kind} shutting down");
    let state = handle.shutdown();
    cfg.save_role_state(kind, state)?;
    Ok(Outcome::Ok)
}
