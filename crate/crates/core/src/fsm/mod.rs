//! Connection-level state machine: benign states, exploiting sinks, and the
//! per-session event history that malicious paths are matched against.

mod path;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::abi::DC_SLOTS;
use crate::pdu::{Address, PduKind};

pub use path::{path_covered, EventPredicate, MaliciousPath, PathError, PathStep};

/// Upper bound on logged PACKET_OBSERVED entries per session window; state
/// transitions are always logged.
pub const MAX_OBSERVED_LOG: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SessionState {
    Standby = 0,
    Discovery = 1,
    LlConnection = 2,
    KeySharing = 3,
    DataExchange = 4,
    DiscoveryError = 5,
    ConnectionBreak = 6,
    PairingExploitation = 7,
    EncryptionFailure = 8,
}

impl SessionState {
    pub const ALL: [SessionState; 9] = [
        SessionState::Standby,
        SessionState::Discovery,
        SessionState::LlConnection,
        SessionState::KeySharing,
        SessionState::DataExchange,
        SessionState::DiscoveryError,
        SessionState::ConnectionBreak,
        SessionState::PairingExploitation,
        SessionState::EncryptionFailure,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<SessionState> {
        SessionState::ALL.get(c as usize).copied()
    }

    pub fn is_exploiting(self) -> bool {
        self.code() >= SessionState::DiscoveryError.code()
    }

    /// The exploiting state an alert raised in this state drives into.
    pub fn sink(self) -> SessionState {
        match self {
            SessionState::Standby | SessionState::Discovery => SessionState::DiscoveryError,
            SessionState::LlConnection => SessionState::ConnectionBreak,
            SessionState::KeySharing => SessionState::PairingExploitation,
            SessionState::DataExchange => SessionState::EncryptionFailure,
            s => s,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SessionState::Standby => "STANDBY",
            SessionState::Discovery => "DISCOVERY",
            SessionState::LlConnection => "LL_CONNECTION",
            SessionState::KeySharing => "KEY_SHARING",
            SessionState::DataExchange => "DATA_EXCHANGE",
            SessionState::DiscoveryError => "DISCOVERY_ERROR",
            SessionState::ConnectionBreak => "CONNECTION_BREAK",
            SessionState::PairingExploitation => "PAIRING_EXPLOITATION",
            SessionState::EncryptionFailure => "ENCRYPTION_FAILURE",
        }
    }

    pub fn from_name(s: &str) -> Option<SessionState> {
        SessionState::ALL.iter().copied().find(|v| v.name() == s)
    }
}

impl fmt::Display for SessionState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventKind {
    AdvertisingStarted = 0,
    ConnectionEstablished = 1,
    PairingStarted = 2,
    EncryptionStarted = 3,
    PlaintextDataStarted = 4,
    SessionFinished = 5,
    Alert = 6,
    PacketObserved = 7,
    /// Marker opening every session window.
    Init = 8,
}

impl EventKind {
    pub const ALL: [EventKind; 9] = [
        EventKind::AdvertisingStarted,
        EventKind::ConnectionEstablished,
        EventKind::PairingStarted,
        EventKind::EncryptionStarted,
        EventKind::PlaintextDataStarted,
        EventKind::SessionFinished,
        EventKind::Alert,
        EventKind::PacketObserved,
        EventKind::Init,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<EventKind> {
        EventKind::ALL.get(c as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            EventKind::AdvertisingStarted => "ADVERTISING_STARTED",
            EventKind::ConnectionEstablished => "CONNECTION_ESTABLISHED",
            EventKind::PairingStarted => "PAIRING_STARTED",
            EventKind::EncryptionStarted => "ENCRYPTION_STARTED",
            EventKind::PlaintextDataStarted => "PLAINTEXT_DATA_STARTED",
            EventKind::SessionFinished => "SESSION_FINISHED",
            EventKind::Alert => "ALERT",
            EventKind::PacketObserved => "PACKET_OBSERVED",
            EventKind::Init => "INIT",
        }
    }

    pub fn from_name(s: &str) -> Option<EventKind> {
        EventKind::ALL.iter().copied().find(|v| v.name() == s)
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Rx,
    Tx,
}

/// An input to [`fsm_step`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FsmEvent {
    pub kind: EventKind,
    pub pdu: Option<PduKind>,
    pub direction: Option<Direction>,
    /// For ALERT: the exploiting state to enter.
    pub sink: Option<SessionState>,
    /// For ALERT: the rule or structural check that raised it.
    pub rule: Option<String>,
}

impl FsmEvent {
    pub fn new(kind: EventKind) -> FsmEvent {
        FsmEvent {
            kind,
            pdu: None,
            direction: None,
            sink: None,
            rule: None,
        }
    }

    pub fn with_pdu(kind: EventKind, pdu: PduKind) -> FsmEvent {
        FsmEvent {
            pdu: Some(pdu),
            ..FsmEvent::new(kind)
        }
    }

    pub fn observed(pdu: PduKind, direction: Direction) -> FsmEvent {
        FsmEvent {
            pdu: Some(pdu),
            direction: Some(direction),
            ..FsmEvent::new(EventKind::PacketObserved)
        }
    }

    pub fn alert(sink: SessionState, rule: impl Into<String>) -> FsmEvent {
        FsmEvent {
            sink: Some(sink),
            rule: Some(rule.into()),
            ..FsmEvent::new(EventKind::Alert)
        }
    }
}

/// One entry of the session history: the state reached and the event that
/// led there (for PACKET_OBSERVED, the state it was observed in).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub state: SessionState,
    pub event: EventKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pdu: Option<PduKind>,
    pub bonded: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rule: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SessionFlags {
    /// The peer had a bond record when the connection was established.
    pub peer_bonded: bool,
    /// Pairing produced the keys encryption can start from.
    pub keys_ready: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TransitionOutcome {
    Unchanged,
    Advanced(SessionState),
    Alerted(SessionState),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FsmError {
    #[error("event {event} is not admissible in state {state}")]
    IllegalEvent {
        state: SessionState,
        event: EventKind,
    },
}

/// Per-connection inspection state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionContext {
    pub state: SessionState,
    pub peer: Address,
    pub log: Vec<LogEntry>,
    pub dc_param: [u64; DC_SLOTS],
    pub counters: BTreeMap<PduKind, u32>,
    pub flags: SessionFlags,
    observed_logged: usize,
}

impl SessionContext {
    pub fn new(peer: Address) -> SessionContext {
        let mut ctx = SessionContext {
            state: SessionState::Standby,
            peer,
            log: Vec::new(),
            dc_param: [0; DC_SLOTS],
            counters: BTreeMap::new(),
            flags: SessionFlags::default(),
            observed_logged: 0,
        };
        reset(&mut ctx);
        ctx
    }

    fn push(&mut self, state: SessionState, ev: &FsmEvent) {
        if ev.kind == EventKind::PacketObserved {
            if self.observed_logged >= MAX_OBSERVED_LOG {
                return;
            }
            self.observed_logged += 1;
        }
        self.log.push(LogEntry {
            state,
            event: ev.kind,
            pdu: ev.pdu,
            bonded: self.flags.peer_bonded,
            rule: ev.rule.clone(),
        });
    }

    /// Whether `event` would be accepted in the current state, without
    /// applying it.
    pub fn admissible(&self, event: EventKind) -> bool {
        next_state(self, event).is_ok()
    }

    /// The state `event` would lead to, if admissible.
    pub fn target(&self, event: EventKind) -> Option<SessionState> {
        next_state(self, event).ok()
    }
}

fn next_state(ctx: &SessionContext, event: EventKind) -> Result<SessionState, FsmError> {
    use EventKind as E;
    use SessionState as S;
    let s = ctx.state;
    let illegal = Err(FsmError::IllegalEvent { state: s, event });
    if s.is_exploiting() {
        return match event {
            E::SessionFinished => Ok(S::Standby),
            _ => illegal,
        };
    }
    let f = ctx.flags;
    match (s, event) {
        (_, E::SessionFinished) => Ok(S::Standby),
        (_, E::PacketObserved) => Ok(s),
        (S::Standby | S::Discovery, E::AdvertisingStarted) => Ok(S::Discovery),
        (S::Discovery, E::ConnectionEstablished) => Ok(S::LlConnection),
        (S::LlConnection | S::DataExchange, E::PairingStarted) => Ok(S::KeySharing),
        (S::LlConnection | S::DataExchange, E::PlaintextDataStarted) => Ok(S::DataExchange),
        (S::LlConnection, E::EncryptionStarted) if f.peer_bonded => Ok(S::DataExchange),
        (S::KeySharing, E::EncryptionStarted) if f.keys_ready => Ok(S::DataExchange),
        (S::DataExchange, E::EncryptionStarted) if f.peer_bonded || f.keys_ready => {
            Ok(S::DataExchange)
        }
        _ => illegal,
    }
}

/// Applies one event. ALERT enters the event's sink (an exploiting state);
/// SESSION_FINISHED resets the session window. Inadmissible events leave
/// the context untouched and return [`FsmError::IllegalEvent`].
pub fn fsm_step(ctx: &mut SessionContext, event: &FsmEvent) -> Result<TransitionOutcome, FsmError> {
    if event.kind == EventKind::Alert {
        let sink = event
            .sink
            .filter(|s| s.is_exploiting())
            .unwrap_or_else(|| ctx.state.sink());
        ctx.state = sink;
        ctx.push(sink, event);
        return Ok(TransitionOutcome::Alerted(sink));
    }
    if event.kind == EventKind::Init {
        return Err(FsmError::IllegalEvent {
            state: ctx.state,
            event: EventKind::Init,
        });
    }
    let next = next_state(ctx, event.kind)?;
    if event.kind == EventKind::SessionFinished {
        let was = ctx.state;
        reset(ctx);
        return Ok(if was == SessionState::Standby {
            TransitionOutcome::Unchanged
        } else {
            TransitionOutcome::Advanced(SessionState::Standby)
        });
    }
    let prev = ctx.state;
    ctx.state = next;
    ctx.push(next, event);
    Ok(if next == prev {
        TransitionOutcome::Unchanged
    } else {
        TransitionOutcome::Advanced(next)
    })
}

/// Returns the session to STANDBY with a fresh window. Bond-derived history
/// lives in the bond store and is untouched.
pub fn reset(ctx: &mut SessionContext) {
    ctx.state = SessionState::Standby;
    ctx.log.clear();
    ctx.flags = SessionFlags::default();
    ctx.log.push(LogEntry {
        state: SessionState::Standby,
        event: EventKind::Init,
        pdu: None,
        bonded: false,
        rule: None,
    });
    ctx.observed_logged = 0;
    ctx.counters.clear();
    ctx.dc_param = [0; DC_SLOTS];
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx() -> SessionContext {
        SessionContext::new(Address::default())
    }

    fn step(c: &mut SessionContext, k: EventKind) -> Result<TransitionOutcome, FsmError> {
        fsm_step(c, &FsmEvent::new(k))
    }

    #[test]
    fn benign_walk() {
        let mut c = ctx();
        assert_eq!(
            step(&mut c, EventKind::AdvertisingStarted),
            Ok(TransitionOutcome::Advanced(SessionState::Discovery))
        );
        step(&mut c, EventKind::ConnectionEstablished).unwrap();
        step(&mut c, EventKind::PairingStarted).unwrap();
        assert_eq!(c.state, SessionState::KeySharing);
        assert!(step(&mut c, EventKind::EncryptionStarted).is_err());
        c.flags.keys_ready = true;
        step(&mut c, EventKind::EncryptionStarted).unwrap();
        assert_eq!(c.state, SessionState::DataExchange);
        assert_eq!(c.log.len(), 5);
        assert_eq!(c.log[0].event, EventKind::Init);
    }

    #[test]
    fn encryption_in_standby_is_illegal() {
        let mut c = ctx();
        let before = c.clone();
        assert_eq!(
            step(&mut c, EventKind::EncryptionStarted),
            Err(FsmError::IllegalEvent {
                state: SessionState::Standby,
                event: EventKind::EncryptionStarted
            })
        );
        assert_eq!(c, before);
    }

    #[test]
    fn finish_in_standby_is_unchanged() {
        let mut c = ctx();
        assert_eq!(
            step(&mut c, EventKind::SessionFinished),
            Ok(TransitionOutcome::Unchanged)
        );
        assert_eq!(c, ctx());
    }

    #[test]
    fn exploiting_states_are_terminal() {
        let mut c = ctx();
        step(&mut c, EventKind::AdvertisingStarted).unwrap();
        fsm_step(&mut c, &FsmEvent::alert(SessionState::DiscoveryError, "r")).unwrap();
        for k in EventKind::ALL {
            if k == EventKind::SessionFinished || k == EventKind::Alert {
                continue;
            }
            assert!(step(&mut c, k).is_err(), "{k}");
        }
        step(&mut c, EventKind::SessionFinished).unwrap();
        assert_eq!(c.state, SessionState::Standby);
    }

    #[test]
    fn reset_is_idempotent() {
        let mut c = ctx();
        step(&mut c, EventKind::AdvertisingStarted).unwrap();
        c.counters.insert(PduKind::ScanReq, 3);
        reset(&mut c);
        let once = c.clone();
        reset(&mut c);
        assert_eq!(c, once);
        assert!(c.counters.is_empty());
    }

    #[test]
    fn sinks() {
        assert_eq!(
            SessionState::KeySharing.sink(),
            SessionState::PairingExploitation
        );
        assert_eq!(SessionState::Discovery.sink(), SessionState::DiscoveryError);
        for s in SessionState::ALL {
            assert!(s.sink().is_exploiting());
            assert_eq!(SessionState::from_name(s.name()), Some(s));
            assert_eq!(SessionState::from_code(s.code()), Some(s));
        }
    }
}
