use std::io::Write;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::thread;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

fn mpa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mpa"))
        .args(args)
        .env_remove("MPA_CONFIG")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn free_addr() -> String {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().to_string()
}

fn config(dir: &Path, addrs: [&str; 6], balance: u64) -> PathBuf {
    let [net, pos, fund, bio, loc, wallet] = addrs;
    let v = serde_json::json!({
        "issuer_pans": ["4111111111111111"],
        "network": {"addr": net, "state": "state/network.json"},
        "pos": {"addr": pos},
        "fund": {"addr": fund, "node_id": "fund-1", "mac_key": "11".repeat(32), "state": "state/fund.json",
                 "accounts": [{"account_id": "acct-1", "balance": {"minor_units": balance, "currency": "USD"}}]},
        "bio": {"addr": bio, "node_id": "bio-1", "mac_key": "22".repeat(32), "state": "state/bio.json"},
        "loc": {"addr": loc, "node_id": "loc-1", "mac_key": "33".repeat(32), "state": "state/loc.json"},
        "wallet": {"addr": wallet, "state": "state/wallet.json", "pan": "4111111111111111",
                   "account_id": "acct-1", "device_id": "dev-1",
                   "template": "ab".repeat(32),
                   "fix": {"lat_cell": 4071, "lon_cell": -7400}}
    });
    let p = dir.join("deploy.json");
    std::fs::write(&p, serde_json::to_vec_pretty(&v).unwrap()).unwrap();
    p
}

fn next_second() {
    let now = SystemTime::now().duration_since(UNIX_EPOCH).unwrap();
    thread::sleep(Duration::from_millis(1000 - now.subsec_millis() as u64 + 20));
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&mpa(&[])), 1);
    assert_eq!(code(&mpa(&["frobnicate"])), 1);
    assert_eq!(code(&mpa(&["pay", "--amount", "ten", "--config", "x.json"])), 1);
    assert_eq!(code(&mpa(&["attack", "--kind", "teleport"])), 1);
    assert_eq!(code(&mpa(&["attack", "--kind", "tamper", "--trials", "0"])), 1);
    assert_eq!(code(&mpa(&["simulate", "--scenario", "no_such_thing"])), 1);
    assert_eq!(code(&mpa(&["--help"])), 0);
    assert_eq!(code(&mpa(&["--version"])), 0);
}

#[test]
fn malformed_config_exits_1_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("deploy.json");
    std::fs::write(&p, "{\"fund\": {\"addr\": 5}").unwrap();
    let o = mpa(&["serve", "--role", "fund", "--config", p.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("deploy.json"), "{}", stderr(&o));

    std::fs::write(&p, "{\"bogus\": 1}").unwrap();
    let o = mpa(&["serve", "--role", "fund", "--config", p.to_str().unwrap()]);
    assert_eq!(code(&o), 1);

    let o = mpa(&["serve", "--role", "fund", "--config", "/nonexistent/deploy.json"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn bundled_scenario_and_attack_pass() {
    let o = mpa(&["simulate", "--scenario", "happy_path"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("result: PASS"));

    let o = mpa(&["attack", "--kind", "stale_clock", "--format", "json"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["aggregates"]["attack_approvals"], 0);
}

#[test]
fn unmet_expectation_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s.json");
    std::fs::write(
        &p,
        r#"{"name": "wrong", "wallets": [{"name": "a", "pan": "4111111111111111",
            "balance": {"minor_units": 1000, "currency": "USD"}, "home": {"lat_cell": 0, "lon_cell": 0}}],
            "script": [{"action": "enroll", "wallet": "a"},
                       {"action": "pay", "wallet": "a", "label": "p", "amount": {"minor_units": 5, "currency": "USD"},
                        "expect": "DECLINE"}]}"#,
    )
    .unwrap();
    let o = mpa(&["simulate", "--scenario", p.to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stdout(&o).contains("result: FAIL"));
}

#[test]
fn saved_reports_render() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.json");
    let trace_path = dir.path().join("t.json");
    let o = mpa(&[
        "simulate",
        "--scenario",
        "daily_use",
        "--format",
        "json",
        "--out",
        out.to_str().unwrap(),
        "--trace",
        trace_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    let trace: serde_json::Value = serde_json::from_slice(&std::fs::read(&trace_path).unwrap()).unwrap();
    assert!(!trace.as_array().unwrap().is_empty());

    let o = mpa(&["report", "--input", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("smudged"), "{}", stdout(&o));

    let mut child = Command::new(env!("CARGO_BIN_EXE_mpa"))
        .args(["report", "--format", "json"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(&std::fs::read(&out).unwrap())
        .unwrap();
    let o = child.wait_with_output().unwrap();
    assert_eq!(code(&o), 0);
    let a: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let b: serde_json::Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!(a, b);

    // A trace is not a report.
    let o = mpa(&["report", "--input", trace_path.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
}

#[test]
fn sim_enroll_then_pay() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), ["net", "pos", "fund", "bio", "loc", "wallet"], 5000);
    let c = cfg.to_str().unwrap();

    let o = mpa(&["pay", "--config", c, "--amount", "100"]);
    assert_eq!(code(&o), 1, "paying before enrolling");

    let o = mpa(&["enroll", "--config", c]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("FUND, BIO, LOC"), "{}", stdout(&o));
    assert!(dir.path().join("state/wallet.json").exists());

    let o = mpa(&["pay", "--config", c, "--amount", "1200", "--expect", "approve"]);
    assert_eq!(code(&o), 0, "{}\n{}", stdout(&o), stderr(&o));

    next_second();
    let o = mpa(&["pay", "--config", c, "--amount", "4000", "--expect", "approve"]);
    assert_eq!(code(&o), 2, "captured funds are gone: {}", stdout(&o));
    assert!(stdout(&o).contains("INSUFFICIENT_FUNDS"), "{}", stdout(&o));

    next_second();
    let o = mpa(&["pay", "--config", c, "--amount", "10", "--flip-bit", "3", "--format", "json"]);
    assert_eq!(code(&o), 0);
    let d: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(d["verdict"], "DECLINE");

    next_second();
    let o = mpa(&["pay", "--config", c, "--amount", "10", "--cell", "4075,-7400", "--expect", "decline"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains("at LOC"), "{}", stdout(&o));
}

struct Servers(Vec<Child>);

impl Drop for Servers {
    fn drop(&mut self) {
        for c in &mut self.0 {
            c.kill().ok();
            c.wait().ok();
        }
    }
}

fn wait_for(addr: &str) {
    let start = Instant::now();
    while std::net::TcpStream::connect(addr).is_err() {
        assert!(start.elapsed() < Duration::from_secs(15), "{addr} never came up");
        thread::sleep(Duration::from_millis(50));
    }
}

#[test]
fn served_deployment_over_tcp() {
    let dir = tempfile::tempdir().unwrap();
    let addrs: Vec<String> = (0..6).map(|_| free_addr()).collect();
    let a: Vec<&str> = addrs.iter().map(String::as_str).collect();
    let cfg = config(dir.path(), [a[0], a[1], a[2], a[3], a[4], a[5]], 5000);
    let mut servers = Servers(Vec::new());
    for (role, addr) in ["network", "fund", "bio", "loc", "pos", "wallet"].iter().zip([a[0], a[2], a[3], a[4], a[1], a[5]]) {
        let child = Command::new(env!("CARGO_BIN_EXE_mpa"))
            .args(["serve", "--role", role])
            .env("MPA_CONFIG", &cfg)
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn()
            .unwrap();
        servers.0.push(child);
        wait_for(addr);
    }
    let c = cfg.to_str().unwrap();
    let o = mpa(&["pay", "--config", c, "--transport", "tcp", "--amount", "700", "--expect", "approve"]);
    assert_eq!(code(&o), 0, "{}\n{}", stdout(&o), stderr(&o));

    next_second();
    let o = mpa(&["pay", "--config", c, "--transport", "tcp", "--amount", "700", "--clock-skew-s", "-300"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("STALE"), "{}", stdout(&o));
    drop(servers);
}
