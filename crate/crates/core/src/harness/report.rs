use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::scenario::AttackKind;
use crate::network::Contribution;
use crate::nodes::Verdict;
use crate::token::{FactorTag, TxnId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowKind {
    Pay,
    Replay,
    Tamper,
    Baseline,
}

impl RowKind {
    fn name(self) -> &'static str {
        match self {
            RowKind::Pay => "pay",
            RowKind::Replay => "replay",
            RowKind::Tamper => "tamper",
            RowKind::Baseline => "baseline",
        }
    }
}

/// One decision that reached the tapping device.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Delivery {
    pub session: u64,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decline_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TxnRow {
    pub label: String,
    pub kind: RowKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack: Option<AttackKind>,
    pub wallet: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub txn_id: Option<TxnId>,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decline_factor: Option<FactorTag>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decline_reason: Option<String>,
    #[serde(default)]
    pub factors: Vec<Contribution>,
    /// Every distinct decision the device received, by POS session.
    #[serde(default)]
    pub deliveries: Vec<Delivery>,
    /// Node results beyond the first per factor seen by the network.
    #[serde(default)]
    pub duplicate_results: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expectation_met: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Aggregates {
    pub transactions: u64,
    pub approvals: u64,
    pub declines: u64,
    pub declines_by_reason: BTreeMap<String, u64>,
    pub attack_transactions: u64,
    pub attack_approvals: u64,
    /// Approvals delivered for a transaction that was already approved.
    pub extra_approvals: u64,
    pub forged_results: u64,
    pub expectation_failures: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunReport {
    pub scenario: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<TxnRow>,
    pub aggregates: Aggregates,
}

impl Aggregates {
    pub fn tally(rows: &[TxnRow], forged_results: u64) -> Self {
        let mut agg = Aggregates {
            forged_results,
            ..Default::default()
        };
        let mut approved: BTreeSet<TxnId> = BTreeSet::new();
        for row in rows {
            agg.transactions += 1;
            match row.verdict {
                Verdict::Approve => agg.approvals += 1,
                Verdict::Decline => {
                    agg.declines += 1;
                    let reason = row.decline_reason.clone().unwrap_or_else(|| "UNSPECIFIED".into());
                    *agg.declines_by_reason.entry(reason).or_default() += 1;
                }
            }
            if row.attack.is_some() {
                agg.attack_transactions += 1;
                if row.deliveries.iter().any(|d| d.verdict == Verdict::Approve)
                    || row.verdict == Verdict::Approve
                {
                    agg.attack_approvals += 1;
                }
            }
            if row.expectation_met == Some(false) {
                agg.expectation_failures += 1;
            }
            if let Some(txn) = row.txn_id {
                let approvals = row.deliveries.iter().filter(|d| d.verdict == Verdict::Approve).count();
                for _ in 0..approvals {
                    if !approved.insert(txn) {
                        agg.extra_approvals += 1;
                    }
                }
            }
        }
        agg
    }
}

impl RunReport {
    pub fn new(scenario: &str, seeds: Vec<u64>, rows: Vec<TxnRow>, forged_results: u64) -> Self {
        let aggregates = Aggregates::tally(&rows, forged_results);
        Self {
            scenario: scenario.to_string(),
            seeds,
            rows,
            aggregates,
        }
    }

    /// Concatenate runs of one scenario under different seeds; row labels
    /// get a `seed<N>/` prefix.
    pub fn merge(reports: Vec<RunReport>) -> Self {
        let scenario = reports.first().map(|r| r.scenario.clone()).unwrap_or_default();
        let mut seeds = Vec::new();
        let mut rows = Vec::new();
        let mut forged = 0;
        for r in reports {
            forged += r.aggregates.forged_results;
            let prefix = match r.seeds.as_slice() {
                [one] => format!("seed{one}/"),
                _ => String::new(),
            };
            seeds.extend(r.seeds);
            rows.extend(r.rows.into_iter().map(|mut row| {
                row.label = format!("{prefix}{}", row.label);
                row
            }));
        }
        Self::new(&scenario, seeds, rows, forged)
    }

    /// No failed expectation, no approved attack and no double approval.
    pub fn passed(&self) -> bool {
        let a = &self.aggregates;
        a.expectation_failures == 0 && a.attack_approvals == 0 && a.extra_approvals == 0
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let header = ["label", "kind", "attack", "wallet", "verdict", "factor", "reason", "latency", "expect"];
        let cells: Vec<[String; 9]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.label.clone(),
                    r.kind.name().to_string(),
                    r.attack.map(|a| a.name().to_string()).unwrap_or_else(|| "-".into()),
                    r.wallet.clone(),
                    r.verdict.to_string(),
                    r.decline_factor.map(|f| f.name()).unwrap_or_else(|| "-".into()),
                    r.decline_reason.clone().unwrap_or_else(|| "-".into()),
                    r.latency_ms.map(|l| format!("{l}ms")).unwrap_or_else(|| "-".into()),
                    match r.expectation_met {
                        Some(true) => "ok".into(),
                        Some(false) => "FAILED".into(),
                        None => "-".into(),
                    },
                ]
            })
            .collect();
        let mut widths = header.map(str::len);
        for row in &cells {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let mut out = String::new();
        let line = |out: &mut String, fields: &[&str]| {
            let parts: Vec<String> = fields
                .iter()
                .zip(widths)
                .map(|(f, w)| format!("{f:<w$}"))
                .collect();
            let _ = writeln!(out, "{}", parts.join("  ").trim_end());
        };
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(out, "scenario {} (seed {})", self.scenario, seeds.join(","));
        line(&mut out, &header);
        for row in &cells {
            let fields: Vec<&str> = row.iter().map(String::as_str).collect();
            line(&mut out, &fields);
        }
        let a = &self.aggregates;
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "transactions {}  approvals {}  declines {}",
            a.transactions, a.approvals, a.declines
        );
        for (reason, n) in &a.declines_by_reason {
            let _ = writeln!(out, "  {reason:<20} {n}");
        }
        let _ = writeln!(
            out,
            "attack transactions {}  attack approvals {}  extra approvals {}",
            a.attack_transactions, a.attack_approvals, a.extra_approvals
        );
        let _ = writeln!(
            out,
            "forged results {}  expectation failures {}",
            a.forged_results, a.expectation_failures
        );
        let _ = writeln!(out, "result: {}", if self.passed() { "PASS" } else { "FAIL" });
        out
    }
}
