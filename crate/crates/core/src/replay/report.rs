use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::trace::{Category, Trace};
use crate::engine::AlertRecord;
use crate::fsm::SessionState;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceResult {
    pub name: String,
    /// Attack id, `None` for benign traces.
    pub expected: Option<String>,
    pub category: Category,
    pub expected_sinks: Vec<SessionState>,
    pub expected_path: Option<String>,
    pub alerts: Vec<AlertRecord>,
    /// An alert entered one of the expected sinks.
    pub detected: bool,
    /// An alert was attributed to the expected path.
    pub path_matched: bool,
    /// Alerts raised before the final attack step, or on a benign trace.
    pub false_alerts: usize,
    pub passed: bool,
}

impl TraceResult {
    pub fn evaluate(trace: &Trace, alerts: &[AlertRecord]) -> TraceResult {
        let m = &trace.meta;
        let category = m.category.unwrap_or(if m.is_benign() {
            Category::Benign
        } else {
            Category::Session
        });
        let (detected, path_matched, false_alerts) = if m.is_benign() {
            (false, false, alerts.len())
        } else {
            let cut = m.final_seq.unwrap_or(0);
            (
                alerts.iter().any(|a| m.sinks.contains(&a.sink)),
                m.path
                    .as_ref()
                    .is_none_or(|p| alerts.iter().any(|a| a.path.as_ref() == Some(p))),
                alerts.iter().filter(|a| a.seq < cut).count(),
            )
        };
        let passed = false_alerts == 0 && (m.is_benign() || (detected && path_matched));
        TraceResult {
            name: m.name.clone(),
            expected: m.attack.clone(),
            category,
            expected_sinks: m.sinks.clone(),
            expected_path: m.path.clone(),
            alerts: alerts.to_vec(),
            detected,
            path_matched,
            false_alerts,
            passed,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Summary {
    pub session_detected: usize,
    pub session_total: usize,
    pub packet_detected: usize,
    pub packet_total: usize,
    pub benign_total: usize,
    /// Alerts on benign traces.
    pub false_positives: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub traces: Vec<TraceResult>,
    pub summary: Summary,
}

impl DetectionReport {
    pub fn new(traces: Vec<TraceResult>) -> DetectionReport {
        let mut s = Summary::default();
        for t in &traces {
            let ok = t.detected && t.path_matched;
            match (t.expected.is_some(), t.category) {
                (false, _) => {
                    s.benign_total += 1;
                    s.false_positives += t.alerts.len();
                }
                (true, Category::Packet) => {
                    s.packet_total += 1;
                    s.packet_detected += usize::from(ok);
                }
                (true, _) => {
                    s.session_total += 1;
                    s.session_detected += usize::from(ok);
                }
            }
        }
        s.passed = traces.iter().all(|t| t.passed);
        DetectionReport { traces, summary: s }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.traces {
            let verdict = if t.passed { "ok  " } else { "FAIL" };
            let alerts: Vec<String> = t
                .alerts
                .iter()
                .map(|a| {
                    format!(
                        "{}@{} rule={} path={}",
                        a.sink,
                        a.seq,
                        a.rule.as_deref().unwrap_or("-"),
                        a.path.as_deref().unwrap_or("-")
                    )
                })
                .collect();
            let _ = writeln!(
                out,
                "{verdict} {:<34} {:<8} expect={:<26} alerts=[{}]",
                t.name,
                t.category.name(),
                t.expected.as_deref().unwrap_or("benign"),
                alerts.join("; ")
            );
        }
        let s = &self.summary;
        let _ = writeln!(
            out,
            "session-based {}/{}  packet-based {}/{}  benign false positives {} over {} traces",
            s.session_detected,
            s.session_total,
            s.packet_detected,
            s.packet_total,
            s.false_positives,
            s.benign_total
        );
        out
    }
}
