use std::fmt;

use serde::{Deserialize, Serialize};

use super::{EventKind, LogEntry, SessionState};
use crate::pdu::PduKind;

/// Conditions a log entry's event must meet to match a path step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventPredicate {
    pub event: EventKind,
    pub pdu: Option<PduKind>,
    pub bonded: Option<bool>,
    pub rule: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathStep {
    pub state: SessionState,
    pub predicate: EventPredicate,
}

/// An ordered sequence of (state, event) steps whose full, in-order
/// occurrence within one session window signals an attack.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaliciousPath {
    pub id: String,
    pub sink: SessionState,
    pub steps: Vec<PathStep>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("line {line}: {reason}")]
pub struct PathError {
    pub line: usize,
    pub reason: String,
}

impl PathStep {
    pub fn matches(&self, e: &LogEntry) -> bool {
        let p = &self.predicate;
        // A step naming an exploiting state with a non-alert event describes
        // the event that drives the session into that sink, wherever it occurs.
        let state_ok =
            e.state == self.state || (self.state.is_exploiting() && p.event != EventKind::Alert);
        state_ok
            && e.event == p.event
            && p.pdu.is_none_or(|k| e.pdu == Some(k))
            && p.bonded.is_none_or(|b| e.bonded == b)
            && p.rule.as_ref().is_none_or(|r| e.rule.as_ref() == Some(r))
    }
}

impl MaliciousPath {
    /// Whether the final step is an alert raised by a rule, as opposed to a
    /// path whose coverage itself raises the alert.
    pub fn ends_in_alert(&self) -> bool {
        self.steps
            .last()
            .is_some_and(|s| s.predicate.event == EventKind::Alert)
    }

    /// Parses `<id> <sink> STATE:EVENT[+bonded|+unbonded][+pdu=KIND][+rule=ID] ...`.
    pub fn parse_line(line: &str, lineno: usize) -> Result<MaliciousPath, PathError> {
        let err = |reason: String| PathError {
            line: lineno,
            reason,
        };
        let mut parts = line.split_whitespace();
        let id = parts.next().ok_or_else(|| err("missing path id".into()))?;
        let sink_s = parts.next().ok_or_else(|| err("missing sink".into()))?;
        let sink = SessionState::from_name(sink_s)
            .filter(|s| s.is_exploiting())
            .ok_or_else(|| err(format!("sink `{sink_s}` is not an exploiting state")))?;
        let mut steps = Vec::new();
        for tok in parts {
            let mut mods = tok.split('+');
            let head = mods.next().unwrap_or_default();
            let (st, ev) = head
                .split_once(':')
                .ok_or_else(|| err(format!("step `{tok}` is not STATE:EVENT")))?;
            let state =
                SessionState::from_name(st).ok_or_else(|| err(format!("unknown state `{st}`")))?;
            let event =
                EventKind::from_name(ev).ok_or_else(|| err(format!("unknown event `{ev}`")))?;
            let mut predicate = EventPredicate {
                event,
                pdu: None,
                bonded: None,
                rule: None,
            };
            for m in mods {
                match m.split_once('=') {
                    None if m == "bonded" => predicate.bonded = Some(true),
                    None if m == "unbonded" => predicate.bonded = Some(false),
                    Some(("pdu", k)) => {
                        predicate.pdu = Some(
                            PduKind::from_name(k)
                                .ok_or_else(|| err(format!("unknown PDU kind `{k}`")))?,
                        )
                    }
                    Some(("rule", r)) if !r.is_empty() => predicate.rule = Some(r.to_string()),
                    _ => return Err(err(format!("unknown step modifier `{m}`"))),
                }
            }
            steps.push(PathStep { state, predicate });
        }
        if steps.is_empty() {
            return Err(err("path has no steps".into()));
        }
        Ok(MaliciousPath {
            id: id.to_string(),
            sink,
            steps,
        })
    }

    /// Parses a paths file; blank lines and `#` comments are skipped.
    pub fn parse_file(text: &str) -> Result<Vec<MaliciousPath>, PathError> {
        text.lines()
            .enumerate()
            .filter(|(_, l)| {
                let t = l.trim();
                !t.is_empty() && !t.starts_with('#')
            })
            .map(|(i, l)| MaliciousPath::parse_line(l, i + 1))
            .collect()
    }
}

impl fmt::Display for MaliciousPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.id, self.sink)?;
        for s in &self.steps {
            write!(f, " {}:{}", s.state, s.predicate.event)?;
            match s.predicate.bonded {
                Some(true) => write!(f, "+bonded")?,
                Some(false) => write!(f, "+unbonded")?,
                None => {}
            }
            if let Some(k) = s.predicate.pdu {
                write!(f, "+pdu={k}")?;
            }
            if let Some(r) = &s.predicate.rule {
                write!(f, "+rule={r}")?;
            }
        }
        Ok(())
    }
}

/// True iff every step of `path` matches some entry of `log`, in order
/// (entries in between are allowed). `log` is one session window.
pub fn path_covered(log: &[LogEntry], path: &MaliciousPath) -> bool {
    if path.steps.is_empty() {
        return false;
    }
    let mut steps = path.steps.iter().peekable();
    for e in log {
        match steps.peek() {
            Some(s) if s.matches(e) => {
                steps.next();
            }
            Some(_) => {}
            None => break,
        }
    }
    steps.peek().is_none()
}
