//! Line-oriented trace files.
//!
//! ```text
//! #! name=knob expect=attack category=session sinks=PAIRING_EXPLOITATION path=knob final=13
//! 1 TX LL_TX c0ffee000001 40060100deadbeef # advertise
//! ```
//!
//! `#!` lines carry metadata as `key=value` pairs; other `#` lines are
//! comments. `final` is the sequence number of the first record of the last
//! attack step.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::abi::HookPoint;
use crate::fsm::{Direction, SessionState};
use crate::pdu::{hex, Address};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Benign,
    Session,
    Packet,
}

impl Category {
    pub fn name(self) -> &'static str {
        match self {
            Category::Benign => "benign",
            Category::Session => "session",
            Category::Packet => "packet",
        }
    }
}

impl FromStr for Category {
    type Err = String;

    fn from_str(s: &str) -> Result<Category, String> {
        match s {
            "benign" => Ok(Category::Benign),
            "session" => Ok(Category::Session),
            "packet" => Ok(Category::Packet),
            _ => Err(format!("unknown category `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TraceMeta {
    pub name: String,
    /// `None` for benign traces.
    pub attack: Option<String>,
    pub category: Option<Category>,
    /// Sinks any of which counts as a correct detection.
    pub sinks: Vec<SessionState>,
    /// Path id the alert is expected to be attributed to.
    pub path: Option<String>,
    pub final_seq: Option<u64>,
}

impl TraceMeta {
    pub fn is_benign(&self) -> bool {
        self.attack.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub seq: u64,
    pub dir: Direction,
    pub hook: HookPoint,
    pub peer: Address,
    pub payload: Vec<u8>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Trace {
    pub meta: TraceMeta,
    pub records: Vec<TraceRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("line {line}: {reason}")]
pub struct TraceError {
    pub line: usize,
    pub reason: String,
}

impl Trace {
    pub fn parse(text: &str) -> Result<Trace, TraceError> {
        let mut t = Trace::default();
        let mut last_seq: Option<u64> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let err = |reason: String| TraceError {
                line: i + 1,
                reason,
            };
            if let Some(meta) = line.strip_prefix("#!") {
                parse_meta(&mut t.meta, meta).map_err(err)?;
                continue;
            }
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (body, note) = match line.split_once('#') {
                Some((b, n)) => (b.trim(), Some(n.trim().to_string())),
                None => (line, None),
            };
            let f: Vec<&str> = body.split_whitespace().collect();
            if f.len() != 5 {
                return Err(err(format!("expected 5 fields, got {}", f.len())));
            }
            let seq: u64 = f[0]
                .parse()
                .map_err(|_| err(format!("bad sequence number `{}`", f[0])))?;
            if last_seq.is_some_and(|l| seq <= l) {
                return Err(err(format!("sequence number {seq} is not increasing")));
            }
            last_seq = Some(seq);
            let dir = match f[1] {
                "RX" => Direction::Rx,
                "TX" => Direction::Tx,
                d => return Err(err(format!("bad direction `{d}`"))),
            };
            let hook = HookPoint::from_name(f[2])
                .ok_or_else(|| err(format!("unknown hook `{}`", f[2])))?;
            let peer: Address = f[3]
                .parse()
                .map_err(|_| err(format!("bad peer address `{}`", f[3])))?;
            let payload =
                hex::decode(f[4]).ok_or_else(|| err(format!("bad payload hex `{}`", f[4])))?;
            t.records.push(TraceRecord {
                seq,
                dir,
                hook,
                peer,
                payload,
                note: note.filter(|n| !n.is_empty()),
            });
        }
        Ok(t)
    }

    /// The trace without its last attack step: every record from
    /// `final_seq` on is dropped.
    pub fn truncated(&self) -> Option<Trace> {
        let cut = self.meta.final_seq?;
        let mut t = self.clone();
        t.records.retain(|r| r.seq < cut);
        t.meta.name = format!("{}-truncated", self.meta.name);
        t.meta.attack = None;
        t.meta.category = Some(Category::Benign);
        t.meta.sinks.clear();
        t.meta.path = None;
        t.meta.final_seq = None;
        Some(t)
    }
}

fn parse_meta(m: &mut TraceMeta, s: &str) -> Result<(), String> {
    for kv in s.split_whitespace() {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| format!("metadata `{kv}` is not key=value"))?;
        match k {
            "name" => m.name = v.to_string(),
            "expect" if v == "benign" => m.attack = None,
            "expect" => m.attack = Some(v.to_string()),
            "category" => m.category = Some(v.parse()?),
            "sinks" => {
                m.sinks = v
                    .split(',')
                    .map(|s| {
                        SessionState::from_name(s)
                            .filter(|s| s.is_exploiting())
                            .ok_or_else(|| format!("`{s}` is not an exploiting state"))
                    })
                    .collect::<Result<_, _>>()?
            }
            "path" => m.path = Some(v.to_string()),
            "final" => m.final_seq = Some(v.parse().map_err(|_| format!("bad final `{v}`"))?),
            _ => return Err(format!("unknown metadata key `{k}`")),
        }
    }
    Ok(())
}

impl fmt::Display for Trace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = &self.meta;
        let mut head = format!("#! name={}", m.name);
        let _ = write!(head, " expect={}", m.attack.as_deref().unwrap_or("benign"));
        if let Some(c) = m.category {
            let _ = write!(head, " category={}", c.name());
        }
        if !m.sinks.is_empty() {
            let sinks: Vec<_> = m.sinks.iter().map(|s| s.name()).collect();
            let _ = write!(head, " sinks={}", sinks.join(","));
        }
        if let Some(p) = &m.path {
            let _ = write!(head, " path={p}");
        }
        if let Some(s) = m.final_seq {
            let _ = write!(head, " final={s}");
        }
        writeln!(f, "{head}")?;
        for r in &self.records {
            let dir = match r.dir {
                Direction::Rx => "RX",
                Direction::Tx => "TX",
            };
            write!(
                f,
                "{} {dir} {} {} {}",
                r.seq,
                r.hook,
                r.peer,
                hex::encode(&r.payload)
            )?;
            if let Some(n) = &r.note {
                write!(f, " # {n}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}
