//! Runtime pipeline: decodes each hook observation, runs the policies bound
//! to the session's (state, event), and advances the session FSM only once
//! the local stack has answered a request positively.

pub mod bond;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::abi::*;
use crate::fsm::{
    fsm_step, path_covered, reset, Direction, EventKind, FsmEvent, SessionContext, SessionState,
};
use crate::pdu::{
    att_kind, connect_ind_fields, decode_ll, ll_kind_from_header, pdu_kind_of_ll, Address,
    AssociationModel, AttPdu, ControlPdu, DataBody, L2capPayload, LinkLayerPdu, LlChannel,
    PairingFeatures, PduError, PduKind, SmpPdu, CID_LE_SIGNALING,
};
use crate::vm::store::{MAP_DESCS, MAP_SESSION_FLAGS, MAP_SPECIFICATIONS};
use crate::vm::{execute, verdict_of, Helpers, MapDesc, PolicyStore, Snapshot, Verdict, VmMap};
pub use bond::{method_code, BondError, BondRecord, BondStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EngineAction {
    Deliver,
    Drop,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineConfig {
    /// Reject any key-size change against the bond, not only reductions.
    pub strict_keysize: bool,
    /// Total occurrences of a request within one session window at which
    /// repeat rules reject.
    pub repeat_threshold: u64,
    /// Keep a record of every program invocation.
    pub record_dispatch: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            strict_keysize: false,
            repeat_threshold: 2,
            record_dispatch: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlertRecord {
    pub seq: u64,
    pub peer: Address,
    /// Program id, or `fsm:illegal-<EVENT>` for structural violations.
    pub rule: Option<String>,
    /// Longest registered malicious path the session window covers.
    pub path: Option<String>,
    pub sink: SessionState,
    /// State the session was in when the alert was raised.
    pub state: SessionState,
    pub pdu: Option<PduKind>,
}

/// A request seen on RX whose state change waits for the local response.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PendingTransition {
    pub event: EventKind,
    pub hook: HookPoint,
    pub pdu: PduKind,
    pub raw: Vec<u8>,
    pub created_at: u64,
}

/// One program invocation, recorded when `record_dispatch` is set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DispatchRecord {
    pub seq: u64,
    pub program: String,
    pub hook: HookPoint,
    pub event: EventKind,
    pub state: SessionState,
    pub verdict: Verdict,
    pub insns: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineStats {
    pub rx: u64,
    pub tx: u64,
    pub dropped: u64,
    pub invocations: u64,
    pub faults: u64,
    pub max_insns: u64,
    pub total_insns: u64,
    /// Transitions committed after a matching positive response.
    pub gated_commits: u64,
    /// RX request / TX positive response pairs observed.
    pub matched_pairs: u64,
}

const RX: usize = 0;
const TX: usize = 1;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct Pairing {
    req: Option<PairingFeatures>,
    rsp: Option<PairingFeatures>,
    confirm: [bool; 2],
    random: [bool; 2],
    public_key: [bool; 2],
    dhkey_check: [bool; 2],
}

impl Pairing {
    fn secure_connections(&self) -> bool {
        matches!((&self.req, &self.rsp), (Some(a), Some(b)) if a.secure_connections() && b.secure_connections())
    }

    fn key_size(&self) -> Option<u8> {
        match (&self.req, &self.rsp) {
            (Some(a), Some(b)) => Some(a.max_enc_key_size.min(b.max_enc_key_size)),
            (Some(a), None) => Some(a.max_enc_key_size),
            _ => None,
        }
    }

    fn method(&self) -> Option<AssociationModel> {
        match (&self.req, &self.rsp) {
            (Some(a), Some(b)) => Some(crate::pdu::association_model(a, b)),
            _ => None,
        }
    }

    fn keys_ready(&self) -> bool {
        let both = |f: [bool; 2]| f[RX] && f[TX];
        if self.rsp.is_none() {
            false
        } else if self.secure_connections() {
            both(self.public_key) && both(self.dhkey_check)
        } else {
            both(self.confirm) && both(self.random)
        }
    }

    fn observe(&mut self, smp: &SmpPdu, dir: usize) {
        match smp {
            SmpPdu::PairingConfirm(_) => self.confirm[dir] = true,
            SmpPdu::PairingRandom(_) => self.random[dir] = true,
            SmpPdu::PublicKey { .. } => self.public_key[dir] = true,
            SmpPdu::DhKeyCheck(_) => self.dhkey_check[dir] = true,
            _ => {}
        }
    }
}

/// Per-peer inspection state.
#[derive(Debug, Clone)]
pub struct Session {
    pub ctx: SessionContext,
    pub pending: Option<PendingTransition>,
    pub encrypted: bool,
    /// Set by an alert; records are dropped until the local device
    /// advertises again.
    pub terminated: bool,
    pub id: u64,
    pairing: Pairing,
    link_level: u8,
    att_error: u8,
    last_att_handle: Option<u16>,
    /// Gated request delivered to the stack and not yet answered.
    awaiting: Option<PduKind>,
}

impl Session {
    fn new(peer: Address) -> Session {
        Session {
            ctx: SessionContext::new(peer),
            pending: None,
            encrypted: false,
            terminated: false,
            id: 0,
            pairing: Pairing::default(),
            link_level: 1,
            att_error: 0,
            last_att_handle: None,
            awaiting: None,
        }
    }

    fn connected(&self) -> bool {
        matches!(
            self.ctx.state,
            SessionState::LlConnection | SessionState::KeySharing | SessionState::DataExchange
        ) || self
            .pending
            .as_ref()
            .is_some_and(|p| p.event == EventKind::ConnectionEstablished)
    }

    fn channel(&self) -> LlChannel {
        if self.connected() {
            LlChannel::Data
        } else {
            LlChannel::Advertising
        }
    }

    fn clear_window(&mut self) {
        reset(&mut self.ctx);
        self.pending = None;
        self.encrypted = false;
        self.pairing = Pairing::default();
        self.link_level = 1;
        self.att_error = 0;
        self.last_att_handle = None;
        self.awaiting = None;
    }

    fn refund(&mut self, kind: PduKind) {
        if let Some(c) = self.ctx.counters.get_mut(&kind) {
            *c = c.saturating_sub(1);
        }
    }

    pub fn state(&self) -> SessionState {
        self.ctx.state
    }
}

/// A raw observation with whatever could be decoded from it.
struct Packet<'a> {
    raw: &'a [u8],
    pdu: Option<LinkLayerPdu>,
    kind: PduKind,
    status: u64,
    channel: LlChannel,
}

impl<'a> Packet<'a> {
    fn classify(raw: &'a [u8], channel: LlChannel) -> Packet<'a> {
        match decode_ll(raw, channel) {
            Ok(pdu) => Packet {
                raw,
                kind: pdu_kind_of_ll(&pdu),
                pdu: Some(pdu),
                status: DECODE_OK,
                channel,
            },
            Err(e) => Packet {
                raw,
                pdu: None,
                kind: ll_kind_from_header(raw, channel).map_or(PduKind::Unknown, Into::into),
                status: match e {
                    PduError::TruncatedPdu { .. } => DECODE_TRUNCATED,
                    PduError::OversizedPdu(_) => DECODE_OVERSIZED,
                    PduError::LengthMismatch { .. } => DECODE_LENGTH_MISMATCH,
                    PduError::IllegalFieldValue { .. } => DECODE_ILLEGAL_FIELD,
                    PduError::InvariantViolation(_) => DECODE_INVARIANT,
                },
                channel,
            },
        }
    }

    fn control(&self) -> Option<&ControlPdu> {
        match &self.pdu {
            Some(LinkLayerPdu::Data {
                body: DataBody::Control(c),
                ..
            }) => Some(c),
            _ => None,
        }
    }

    fn l2cap(&self) -> Option<(u16, &L2capPayload)> {
        match &self.pdu {
            Some(LinkLayerPdu::Data {
                body: DataBody::L2cap(f),
                ..
            }) => Some((f.cid, &f.payload)),
            _ => None,
        }
    }

    fn smp(&self) -> Option<&SmpPdu> {
        match self.l2cap()? {
            (_, L2capPayload::Smp(s)) => Some(s),
            _ => None,
        }
    }

    fn att(&self) -> Option<&AttPdu> {
        match self.l2cap()? {
            (_, L2capPayload::Att(a)) => Some(a),
            _ => None,
        }
    }

    /// Header fields of an L2CAP start fragment, read from the raw bytes so
    /// they are available even when decoding failed.
    fn l2cap_header(&self) -> Option<(u16, u16)> {
        let r = self.raw;
        (self.channel == LlChannel::Data && r.len() >= 6 && r[0] & 0x03 == 0x02).then(|| {
            (
                u16::from_le_bytes([r[2], r[3]]),
                u16::from_le_bytes([r[4], r[5]]),
            )
        })
    }
}

struct EngineHelpers<'a> {
    snap: &'a Snapshot,
    flags: &'a VmMap,
    tick: &'a mut u64,
}

impl Helpers for EngineHelpers<'_> {
    fn map_desc(&self, handle: u64) -> Option<MapDesc> {
        MAP_DESCS.get(usize::try_from(handle).ok()?).copied()
    }

    fn map_get(&mut self, handle: u64, key: &[u8]) -> Option<Vec<u8>> {
        match handle {
            MAP_SPECIFICATIONS => self.snap.spec_get(key).map(|v| v.to_le_bytes().to_vec()),
            MAP_SESSION_FLAGS => self.flags.get(key).ok().flatten(),
            _ => None,
        }
    }

    fn map_put(&mut self, handle: u64, key: &[u8], value: &[u8]) -> bool {
        handle == MAP_SESSION_FLAGS && self.flags.put(key, value).is_ok()
    }

    fn map_delete(&mut self, handle: u64, key: &[u8]) -> bool {
        handle == MAP_SESSION_FLAGS && self.flags.delete(key).unwrap_or(false)
    }

    fn session_tick(&mut self) -> u64 {
        *self.tick
    }
}

enum Resolution {
    Positive,
    Negative,
}

pub struct Engine {
    store: Arc<PolicyStore>,
    bonds: BondStore,
    config: EngineConfig,
    sessions: BTreeMap<Address, Session>,
    alerts: Vec<AlertRecord>,
    stats: EngineStats,
    dispatch_log: Vec<DispatchRecord>,
    audit: Vec<u64>,
    next_session_id: u64,
    tick: u64,
}

impl Engine {
    pub fn new(store: Arc<PolicyStore>, bonds: BondStore, config: EngineConfig) -> Engine {
        Engine {
            store,
            bonds,
            config,
            sessions: BTreeMap::new(),
            alerts: Vec::new(),
            stats: EngineStats::default(),
            dispatch_log: Vec::new(),
            audit: Vec::new(),
            next_session_id: 0,
            tick: 0,
        }
    }

    pub fn store(&self) -> &Arc<PolicyStore> {
        &self.store
    }

    pub fn bonds(&self) -> &BondStore {
        &self.bonds
    }

    pub fn bonds_mut(&mut self) -> &mut BondStore {
        &mut self.bonds
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn session(&self, peer: &Address) -> Option<&Session> {
        self.sessions.get(peer)
    }

    pub fn alerts(&self) -> &[AlertRecord] {
        &self.alerts
    }

    pub fn stats(&self) -> &EngineStats {
        &self.stats
    }

    pub fn dispatch_log(&self) -> &[DispatchRecord] {
        &self.dispatch_log
    }

    /// Sequence numbers of every RX record mediated, in arrival order.
    /// Recorded only with `record_dispatch`.
    pub fn audit(&self) -> &[u64] {
        &self.audit
    }

    /// Dispatches one observation by direction.
    pub fn process(
        &mut self,
        seq: u64,
        dir: Direction,
        hook: HookPoint,
        peer: Address,
        raw: &[u8],
    ) -> EngineAction {
        match dir {
            Direction::Rx => self.on_rx(seq, peer, hook, raw),
            Direction::Tx => self.on_tx(seq, peer, hook, raw),
        }
    }

    /// Inspects a PDU received from `peer`. Nothing is delivered to the
    /// stack and no state changes before the bound policies have passed it.
    pub fn on_rx(&mut self, seq: u64, peer: Address, hook: HookPoint, raw: &[u8]) -> EngineAction {
        self.stats.rx += 1;
        self.tick += 1;
        if self.config.record_dispatch {
            self.audit.push(seq);
        }
        if !hook.is_rx() {
            log::warn!("seq {seq}: RX record on TX hook {hook}");
            return self.drop_record();
        }
        let s = sess(&mut self.sessions, peer);
        if s.terminated {
            return self.drop_record();
        }
        let pkt = Packet::classify(raw, s.channel());
        let counter = s.ctx.counters.entry(pkt.kind).or_insert(0);
        let repeat = *counter;
        *counter = counter.saturating_add(1);
        let state = s.ctx.state;
        let proposal = propose_rx(s, &pkt);
        let sink = proposal
            .and_then(|e| s.ctx.target(e))
            .unwrap_or(state)
            .sink();
        let _ = fsm_step(&mut s.ctx, &FsmEvent::observed(pkt.kind, Direction::Rx));

        if let Some(att) = pkt.att() {
            if matches!(
                att,
                AttPdu::ReadRequest { .. }
                    | AttPdu::WriteRequest { .. }
                    | AttPdu::WriteCommand { .. }
            ) {
                s.last_att_handle = att.handle();
            }
        }
        if let Some(rule) = self.run_rules(seq, peer, hook, EventKind::PacketObserved, &pkt, repeat)
        {
            self.on_alert(seq, peer, sink, Some(&rule), Some(pkt.kind));
            return self.drop_record();
        }

        let s = sess(&mut self.sessions, peer);
        if let Some(smp) = pkt.smp() {
            if let SmpPdu::PairingRequest(f) = smp {
                s.pairing = Pairing {
                    req: Some(*f),
                    ..Pairing::default()
                };
            }
            s.pairing.observe(smp, RX);
            s.ctx.flags.keys_ready = s.pairing.keys_ready();
        }
        let Some(event) = proposal else {
            return EngineAction::Deliver;
        };
        if !s.ctx.admissible(event) {
            let rule = format!("fsm:illegal-{event}");
            self.on_alert(
                seq,
                peer,
                SessionState::ConnectionBreak,
                Some(&rule),
                Some(pkt.kind),
            );
            return self.drop_record();
        }
        if is_gated(event) {
            s.awaiting = Some(pkt.kind);
            s.pending = Some(PendingTransition {
                event,
                hook,
                pdu: pkt.kind,
                raw: raw.to_vec(),
                created_at: seq,
            });
            return EngineAction::Deliver;
        }
        self.commit(seq, peer, event, hook, &pkt)
    }

    /// Observes a PDU the local stack sends to `peer`, resolving any pending
    /// transition it answers.
    pub fn on_tx(&mut self, seq: u64, peer: Address, hook: HookPoint, raw: &[u8]) -> EngineAction {
        self.stats.tx += 1;
        self.tick += 1;
        if hook.is_rx() {
            log::warn!("seq {seq}: TX record on RX hook {hook}");
            return EngineAction::Deliver;
        }
        let s = sess(&mut self.sessions, peer);
        let adv = Packet::classify(raw, LlChannel::Advertising);
        let readvertising = adv.status == DECODE_OK && adv.kind == PduKind::AdvInd;
        if s.terminated {
            if !readvertising {
                return EngineAction::Deliver;
            }
            s.terminated = false;
        }
        let pkt = if readvertising {
            adv
        } else {
            Packet::classify(raw, s.channel())
        };
        let _ = fsm_step(&mut s.ctx, &FsmEvent::observed(pkt.kind, Direction::Tx));

        if let Some(req) = s.awaiting {
            let answered = match req {
                PduKind::ConnectInd => !readvertising && pkt.kind != PduKind::LlTerminateInd,
                PduKind::SmpPairingRequest => pkt.kind == PduKind::SmpPairingResponse,
                _ => pkt.kind == PduKind::LlEncRsp,
            };
            let refused = readvertising
                || matches!(
                    pkt.kind,
                    PduKind::LlTerminateInd
                        | PduKind::SmpPairingFailed
                        | PduKind::LlRejectInd
                        | PduKind::LlRejectExtInd
                );
            if answered {
                self.stats.matched_pairs += 1;
            }
            if answered || refused {
                s.awaiting = None;
            }
        }

        if let Some(p) = s.pending.clone() {
            match resolve(&p, &pkt, readvertising) {
                Some(Resolution::Positive) => {
                    s.pending = None;
                    if let Some(SmpPdu::PairingResponse(f)) = pkt.smp() {
                        s.pairing.rsp = Some(*f);
                    }
                    let req = Packet::classify(&p.raw, LlChannel::Data);
                    let req = if p.event == EventKind::ConnectionEstablished {
                        Packet::classify(&p.raw, LlChannel::Advertising)
                    } else {
                        req
                    };
                    return self.commit(seq, peer, p.event, p.hook, &req);
                }
                Some(Resolution::Negative) => {
                    s.pending = None;
                    if p.event == EventKind::PairingStarted {
                        s.pairing = Pairing::default();
                    }
                }
                None => {}
            }
        }

        let s = sess(&mut self.sessions, peer);
        if let Some(c) = pkt.control() {
            match c {
                ControlPdu::RejectExtInd { reject_opcode, .. } => {
                    s.refund(control_kind(*reject_opcode));
                }
                ControlPdu::UnknownRsp { unknown_type } => s.refund(control_kind(*unknown_type)),
                ControlPdu::RejectInd { .. } => s.refund(PduKind::LlEncReq),
                _ => {}
            }
        }
        if let Some(smp) = pkt.smp() {
            if let SmpPdu::PairingFailed { .. } = smp {
                s.refund(PduKind::SmpPairingRequest);
                s.pairing = Pairing::default();
            }
            s.pairing.observe(smp, TX);
            s.ctx.flags.keys_ready = s.pairing.keys_ready();
        }
        match pkt.att() {
            Some(AttPdu::ErrorResponse(e)) => {
                s.att_error = e.error_code;
                s.refund(att_kind(e.request_opcode));
            }
            Some(AttPdu::ReadResponse { .. } | AttPdu::WriteResponse) if s.encrypted => {
                if let Some(h) = s.last_att_handle {
                    let level = s.link_level;
                    if let Err(e) = self.bonds.record_attr_level(&peer, h, level) {
                        log::warn!("bond store: {e}");
                    }
                }
            }
            _ => {}
        }

        let s = sess(&mut self.sessions, peer);
        let event = match pkt.kind {
            PduKind::AdvInd | PduKind::ScanRsp if s.ctx.state == SessionState::Standby => {
                Some(EventKind::AdvertisingStarted)
            }
            PduKind::LlTerminateInd => Some(EventKind::SessionFinished),
            _ => None,
        };
        match event {
            Some(e) => self.commit(seq, peer, e, hook, &pkt),
            None => EngineAction::Deliver,
        }
    }

    /// Applies a committed event, then runs the policies bound to it in the
    /// state it leads to.
    fn commit(
        &mut self,
        seq: u64,
        peer: Address,
        event: EventKind,
        hook: HookPoint,
        pkt: &Packet<'_>,
    ) -> EngineAction {
        let bonded = self.bonds.contains(&peer);
        let s = sess(&mut self.sessions, peer);
        let prev = s.ctx.state;
        if event == EventKind::ConnectionEstablished {
            s.ctx.flags.peer_bonded = bonded;
        }
        if let Err(e) = fsm_step(&mut s.ctx, &FsmEvent::with_pdu(event, pkt.kind)) {
            log::debug!("seq {seq}: {e}");
            let rule = format!("fsm:illegal-{event}");
            self.on_alert(
                seq,
                peer,
                SessionState::ConnectionBreak,
                Some(&rule),
                Some(pkt.kind),
            );
            return self.drop_record();
        }
        if is_gated(event) {
            self.stats.gated_commits += 1;
        }
        match event {
            EventKind::ConnectionEstablished => {
                self.next_session_id += 1;
                let id = self.next_session_id;
                sess(&mut self.sessions, peer).id = id;
            }
            EventKind::PairingStarted => {
                s.ctx.flags.keys_ready = false;
            }
            EventKind::EncryptionStarted => {
                s.encrypted = true;
                if prev == SessionState::KeySharing {
                    let p = s.pairing.clone();
                    s.link_level = link_level(&p, None);
                    self.bond_commit(peer, &p);
                } else {
                    let rec = self.bonds.get(&peer).cloned();
                    let s = sess(&mut self.sessions, peer);
                    s.link_level = link_level(&Pairing::default(), rec.as_ref());
                }
            }
            EventKind::SessionFinished => {
                s.clear_window();
                return EngineAction::Deliver;
            }
            _ => {}
        }
        let state = sess(&mut self.sessions, peer).ctx.state;
        if let Some(rule) = self.run_rules(seq, peer, hook, event, pkt, 0) {
            self.on_alert(seq, peer, state.sink(), Some(&rule), Some(pkt.kind));
            return self.drop_record();
        }
        self.check_paths(seq, peer, pkt.kind);
        if sess(&mut self.sessions, peer).terminated {
            return self.drop_record();
        }
        EngineAction::Deliver
    }

    /// Records the pairing that just produced an encrypted link.
    fn bond_commit(&mut self, peer: Address, p: &Pairing) {
        let (Some(size), Some(method)) = (p.key_size(), p.method()) else {
            return;
        };
        let mut flags = if p.secure_connections() {
            BT_KEYS_LTK_P256
        } else {
            BT_KEYS_LTK
        };
        if method != AssociationModel::JustWorks {
            flags |= BT_KEYS_AUTHENTICATED;
        }
        let rec = BondRecord {
            peer,
            enc_key_size: size.clamp(7, 16),
            method,
            key_flags: flags,
            attr_levels: BTreeMap::new(),
        };
        if let Err(e) = self.bonds.upsert(rec) {
            log::warn!("bond store: {e}");
        }
    }

    /// Drives the session into `sink`, reports it, and resets the session.
    pub fn on_alert(
        &mut self,
        seq: u64,
        peer: Address,
        sink: SessionState,
        rule: Option<&str>,
        pdu: Option<PduKind>,
    ) {
        let snap = self.store.snapshot();
        let s = sess(&mut self.sessions, peer);
        let state = s.ctx.state;
        let mut ev = FsmEvent::alert(sink, rule.unwrap_or_default());
        if rule.is_none() {
            ev.rule = None;
        }
        ev.pdu = pdu;
        let _ = fsm_step(&mut s.ctx, &ev);
        let path = snap
            .paths
            .iter()
            .filter(|p| path_covered(&s.ctx.log, p))
            .max_by_key(|p| p.steps.len())
            .map(|p| p.id.clone());
        log::info!(
            "seq {seq}: alert {} -> {sink} (rule {}, path {})",
            peer,
            rule.unwrap_or("-"),
            path.as_deref().unwrap_or("-")
        );
        self.alerts.push(AlertRecord {
            seq,
            peer,
            rule: rule.map(str::to_string),
            path,
            sink,
            state,
            pdu,
        });
        s.clear_window();
        s.terminated = true;
    }

    /// Raises an alert for any path that does not end in a rule alert and
    /// is now fully covered.
    fn check_paths(&mut self, seq: u64, peer: Address, pdu: PduKind) {
        let snap = self.store.snapshot();
        let s = sess(&mut self.sessions, peer);
        let hit = snap
            .paths
            .iter()
            .filter(|p| !p.ends_in_alert())
            .find(|p| path_covered(&s.ctx.log, p))
            .map(|p| p.sink);
        if let Some(sink) = hit {
            self.on_alert(seq, peer, sink, None, Some(pdu));
        }
    }

    fn drop_record(&mut self) -> EngineAction {
        self.stats.dropped += 1;
        EngineAction::Drop
    }

    fn build_ctx(
        &self,
        s: &Session,
        hook: HookPoint,
        event: EventKind,
        pkt: &Packet<'_>,
        repeat: u32,
    ) -> ([u8; CTX_SIZE], [u64; DC_SLOTS]) {
        let mut dc = [0u64; DC_SLOTS];
        let peer = s.ctx.peer;
        let bond = self.bonds.get(&peer);
        if let Some(b) = bond {
            dc[dc::SMP_KEYS] = b.key_flags;
            dc[dc::SMP_KEYS_FLAGS] = b.key_flags;
            dc[dc::SMP_ENC_SIZE_PREV] = u64::from(b.enc_key_size);
            dc[dc::SMP_METHOD_PREV] = method_code(b.method);
        }
        dc[dc::SMP_ENC_SIZE] = s.pairing.key_size().map_or(0, u64::from);
        dc[dc::SMP_METHOD] = s.pairing.method().map_or(METHOD_NONE, method_code);
        dc[dc::PEER_BONDED] = u64::from(
            if s.ctx.state == SessionState::Standby || s.ctx.state == SessionState::Discovery {
                bond.is_some()
            } else {
                s.ctx.flags.peer_bonded
            },
        );
        dc[dc::ATTR_SEC_LEVEL] = u64::from(if s.encrypted { s.link_level } else { 1 });
        let handle = pkt.att().and_then(AttPdu::handle);
        if let Some(h) = handle {
            dc[dc::ATT_HANDLE] = u64::from(h);
            dc[dc::ATTR_SEC_LEVEL_PREV] = bond
                .and_then(|b| b.attr_levels.get(&h))
                .map_or(0, |l| u64::from(*l));
        }
        dc[dc::REPEAT_COUNT] = u64::from(repeat);
        dc[dc::REPEAT_THRESHOLD] = self.config.repeat_threshold;
        dc[dc::STRICT_KEYSIZE] = u64::from(self.config.strict_keysize);
        if pkt.kind == PduKind::ConnectInd {
            if let Some(f) = connect_ind_fields(pkt.raw) {
                dc[dc::INTERVAL] = u64::from(f.interval);
                dc[dc::CHANNEL_MAP_POPCOUNT] =
                    u64::from((f.channel_map & crate::pdu::CHANNEL_MAP_DATA_MASK).count_ones());
                dc[dc::CHANNEL_MAP_RESERVED] = f.channel_map & !crate::pdu::CHANNEL_MAP_DATA_MASK;
                dc[dc::HOP] = u64::from(f.hop);
            }
        }
        dc[dc::PEER_ADDR] = peer.to_u64();
        dc[dc::SESSION_ID] = s.id;
        dc[dc::ATT_ERROR] = u64::from(s.att_error);
        if let Some((len, cid)) = pkt.l2cap_header() {
            dc[dc::L2CAP_LEN] = u64::from(len);
            dc[dc::L2CAP_CID] = u64::from(cid);
        }
        dc[dc::LINK_ENCRYPTED] = u64::from(s.encrypted);
        dc[dc::PAYLOAD_LEN] = pkt.raw.get(1).map_or(0, |b| u64::from(*b));

        let mut ctx = [0u8; CTX_SIZE];
        let mut put = |off: usize, v: u64| ctx[off..off + 8].copy_from_slice(&v.to_le_bytes());
        put(OFF_STATE, u64::from(s.ctx.state.code()));
        put(OFF_EVENT, u64::from(event.code()));
        put(OFF_HOOK, u64::from(hook.code()));
        put(OFF_PDU_KIND, pkt.kind.code());
        put(OFF_PKT_LEN, pkt.raw.len() as u64);
        put(OFF_DECODE_STATUS, pkt.status);
        for (i, v) in dc.iter().enumerate() {
            put(dc_offset(i), *v);
        }
        (ctx, dc)
    }

    /// Runs every program bound to (hook, event, current state) in order.
    /// Returns the id of the first one that rejects.
    fn run_rules(
        &mut self,
        seq: u64,
        peer: Address,
        hook: HookPoint,
        event: EventKind,
        pkt: &Packet<'_>,
        repeat: u32,
    ) -> Option<String> {
        let snap = self.store.snapshot();
        let state = sess(&mut self.sessions, peer).ctx.state;
        let programs = snap.dispatch(hook, event, state);
        if programs.is_empty() {
            return None;
        }
        let s = &self.sessions[&peer];
        let (ctx, dc) = self.build_ctx(s, hook, event, pkt, repeat);
        sess(&mut self.sessions, peer).ctx.dc_param = dc;
        let mut tick = self.tick;
        for p in programs {
            let mut h = EngineHelpers {
                snap: &snap,
                flags: self.store.session_flags(),
                tick: &mut tick,
            };
            let r = execute(&p.verified, &ctx, pkt.raw, &mut h);
            let verdict = verdict_of(&r);
            self.stats.invocations += 1;
            let insns = match &r {
                Ok(e) => e.insns,
                Err(f) => {
                    self.stats.faults += 1;
                    log::warn!("seq {seq}: program {} faulted: {f}", p.program.id);
                    0
                }
            };
            self.stats.total_insns += insns;
            self.stats.max_insns = self.stats.max_insns.max(insns);
            if self.config.record_dispatch {
                self.dispatch_log.push(DispatchRecord {
                    seq,
                    program: p.program.id.clone(),
                    hook,
                    event,
                    state,
                    verdict,
                    insns,
                });
            }
            if verdict == Verdict::Reject {
                return Some(p.program.id.clone());
            }
        }
        None
    }
}

fn sess(sessions: &mut BTreeMap<Address, Session>, peer: Address) -> &mut Session {
    sessions.entry(peer).or_insert_with(|| Session::new(peer))
}

fn is_gated(e: EventKind) -> bool {
    matches!(
        e,
        EventKind::ConnectionEstablished | EventKind::PairingStarted | EventKind::EncryptionStarted
    )
}

/// The FSM event an RX PDU asks for, if any.
fn propose_rx(s: &Session, pkt: &Packet<'_>) -> Option<EventKind> {
    match pkt.kind {
        PduKind::ConnectInd => Some(EventKind::ConnectionEstablished),
        PduKind::SmpPairingRequest => Some(EventKind::PairingStarted),
        PduKind::LlEncReq => Some(EventKind::EncryptionStarted),
        PduKind::LlTerminateInd => Some(EventKind::SessionFinished),
        _ if s.ctx.state != SessionState::LlConnection => None,
        _ if pkt.att().is_some() => Some(EventKind::PlaintextDataStarted),
        _ if matches!(pkt.l2cap(), Some((CID_LE_SIGNALING, _))) => {
            Some(EventKind::PlaintextDataStarted)
        }
        _ => None,
    }
}

fn resolve(p: &PendingTransition, tx: &Packet<'_>, readvertising: bool) -> Option<Resolution> {
    let terminate = tx.kind == PduKind::LlTerminateInd;
    match p.event {
        EventKind::ConnectionEstablished if readvertising || terminate => {
            Some(Resolution::Negative)
        }
        EventKind::ConnectionEstablished if tx.channel == LlChannel::Data => {
            Some(Resolution::Positive)
        }
        EventKind::PairingStarted => match tx.kind {
            PduKind::SmpPairingResponse => Some(Resolution::Positive),
            PduKind::SmpPairingFailed => Some(Resolution::Negative),
            _ if terminate => Some(Resolution::Negative),
            _ => None,
        },
        EventKind::EncryptionStarted => match tx.control() {
            Some(ControlPdu::EncRsp { .. }) => Some(Resolution::Positive),
            Some(ControlPdu::RejectInd { .. } | ControlPdu::TerminateInd { .. }) => {
                Some(Resolution::Negative)
            }
            Some(ControlPdu::RejectExtInd { reject_opcode, .. })
                if control_kind(*reject_opcode) == PduKind::LlEncReq =>
            {
                Some(Resolution::Negative)
            }
            _ => None,
        },
        _ => None,
    }
}

fn control_kind(opcode: u8) -> PduKind {
    ll_kind_from_header(&[0x03, 0x01, opcode], LlChannel::Data).map_or(PduKind::Unknown, Into::into)
}

/// Security level of the encrypted link: 2 unauthenticated, 3 authenticated,
/// 4 authenticated Secure Connections.
fn link_level(p: &Pairing, bond: Option<&BondRecord>) -> u8 {
    let (auth, sc) = match (p.method(), bond) {
        (Some(m), _) => (m != AssociationModel::JustWorks, p.secure_connections()),
        (None, Some(b)) => (b.authenticated(), b.key_flags & BT_KEYS_LTK_P256 != 0),
        (None, None) => (false, false),
    };
    match (auth, sc) {
        (false, _) => 2,
        (true, false) => 3,
        (true, true) => 4,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::replay::{corpus, replay, Trace};
    use crate::rules::default_store;

    fn peer() -> Address {
        Address([0xc0, 0xff, 0xee, 0, 0, 0x99])
    }

    fn engine(store: PolicyStore) -> Engine {
        Engine::new(
            Arc::new(store),
            BondStore::in_memory(),
            EngineConfig {
                record_dispatch: true,
                ..EngineConfig::default()
            },
        )
    }

    fn connected(e: &mut Engine) {
        e.on_tx(1, peer(), HookPoint::LlTx, &corpus::adv_ind());
        e.on_rx(2, peer(), HookPoint::LlRxCtrl, &corpus::connect_ind(peer()));
        e.on_tx(3, peer(), HookPoint::LlTx, &corpus::empty());
        assert_eq!(
            e.session(&peer()).unwrap().state(),
            SessionState::LlConnection
        );
    }

    fn pairing_request() -> Vec<u8> {
        corpus::smp(SmpPdu::PairingRequest(corpus::features(
            crate::pdu::IoCapability::KeyboardDisplay,
            0x05,
            16,
        )))
    }

    fn trace(name: &str) -> Trace {
        corpus::generate()
            .into_iter()
            .find(|t| t.meta.name == name)
            .unwrap()
    }

    #[test]
    fn connection_waits_for_local_answer() {
        let mut e = engine(PolicyStore::new());
        e.on_tx(1, peer(), HookPoint::LlTx, &corpus::adv_ind());
        e.on_rx(2, peer(), HookPoint::LlRxCtrl, &corpus::connect_ind(peer()));
        let s = e.session(&peer()).unwrap();
        assert_eq!(s.state(), SessionState::Discovery);
        assert_eq!(
            s.pending.as_ref().map(|p| p.event),
            Some(EventKind::ConnectionEstablished)
        );
        e.on_tx(3, peer(), HookPoint::LlTx, &corpus::empty());
        assert_eq!(
            e.session(&peer()).unwrap().state(),
            SessionState::LlConnection
        );
    }

    #[test]
    fn pairing_request_without_rules_is_parked() {
        let mut e = engine(PolicyStore::new());
        connected(&mut e);
        let a = e.on_rx(4, peer(), HookPoint::SmpRx, &pairing_request());
        assert_eq!(a, EngineAction::Deliver);
        let s = e.session(&peer()).unwrap();
        assert_eq!(s.state(), SessionState::LlConnection);
        assert_eq!(s.pending.as_ref().unwrap().event, EventKind::PairingStarted);
    }

    #[test]
    fn pairing_response_commits_key_sharing() {
        let mut e = engine(PolicyStore::new());
        connected(&mut e);
        e.on_rx(4, peer(), HookPoint::SmpRx, &pairing_request());
        let rsp = corpus::smp(SmpPdu::PairingResponse(corpus::features(
            crate::pdu::IoCapability::DisplayOnly,
            0x05,
            16,
        )));
        e.on_tx(5, peer(), HookPoint::SmpTx, &rsp);
        let s = e.session(&peer()).unwrap();
        assert_eq!(s.state(), SessionState::KeySharing);
        assert!(s.pending.is_none());
    }

    #[test]
    fn pairing_failed_discards_the_proposal() {
        let mut e = engine(PolicyStore::new());
        connected(&mut e);
        e.on_rx(4, peer(), HookPoint::SmpRx, &pairing_request());
        let before = e.session(&peer()).unwrap().state();
        e.on_tx(
            5,
            peer(),
            HookPoint::SmpTx,
            &corpus::smp(SmpPdu::PairingFailed { reason: 5 }),
        );
        let s = e.session(&peer()).unwrap();
        assert_eq!(s.state(), before);
        assert!(s.pending.is_none());
        assert_eq!(s.ctx.counters.get(&PduKind::SmpPairingRequest), Some(&0));
    }

    #[test]
    fn tx_without_pending_passes_through() {
        let mut e = engine(PolicyStore::new());
        connected(&mut e);
        let log = e.session(&peer()).unwrap().ctx.log.len();
        assert_eq!(
            e.on_tx(4, peer(), HookPoint::LlTx, &corpus::empty()),
            EngineAction::Deliver
        );
        let s = e.session(&peer()).unwrap();
        assert_eq!(s.state(), SessionState::LlConnection);
        assert_eq!(s.ctx.log.len(), log + 1);
    }

    #[test]
    fn interval_zero_is_dropped() {
        let mut e = engine(default_store().unwrap());
        e.on_tx(1, peer(), HookPoint::LlTx, &corpus::adv_ind());
        let mut raw = corpus::connect_ind(peer());
        raw[24] = 0;
        raw[25] = 0;
        assert_eq!(
            e.on_rx(2, peer(), HookPoint::LlRxCtrl, &raw),
            EngineAction::Drop
        );
        let a = &e.alerts()[0];
        assert_eq!(a.sink, SessionState::ConnectionBreak);
        assert_eq!(a.rule.as_deref(), Some("conn_interval"));
        let s = e.session(&peer()).unwrap();
        assert_eq!(s.state(), SessionState::Standby);
        assert!(s.terminated);
    }

    #[test]
    fn terminated_session_drops_until_readvertising() {
        let mut e = engine(default_store().unwrap());
        let t = trace("dup-feature-req");
        for r in &t.records {
            e.process(r.seq, r.dir, r.hook, r.peer, &r.payload);
        }
        assert_eq!(e.alerts().len(), 1);
        assert_eq!(
            e.on_rx(
                100,
                t.records[0].peer,
                HookPoint::LlRxData,
                &corpus::empty()
            ),
            EngineAction::Drop
        );
        e.on_tx(101, t.records[0].peer, HookPoint::LlTx, &corpus::adv_ind());
        let s = e.session(&t.records[0].peer).unwrap();
        assert!(!s.terminated);
        assert_eq!(s.state(), SessionState::Discovery);
        assert_eq!(s.ctx.log[0].event, EventKind::Init);
    }

    #[test]
    fn two_alerts_two_reports() {
        let store = Arc::new(default_store().unwrap());
        let mut t = trace("dup-feature-req");
        let mut second = trace("dup-dle-req");
        let base = t.records.last().unwrap().seq;
        for r in &mut second.records {
            r.seq += base;
        }
        t.records.extend(second.records);
        let (res, _) = replay(&t, store, BondStore::in_memory(), EngineConfig::default());
        assert_eq!(res.alerts.len(), 2);
        assert_ne!(res.alerts[0].peer, res.alerts[1].peer);
    }

    #[test]
    fn empty_policy_set_keeps_structural_checks() {
        let store = Arc::new(PolicyStore::new());
        store.set_paths(crate::rules::default_paths());
        let (knob, _) = replay(
            &trace("knob"),
            store.clone(),
            BondStore::in_memory(),
            EngineConfig::default(),
        );
        assert!(knob.alerts.is_empty());
        let (ooo, _) = replay(
            &trace("out-of-order-enc-zero-ltk"),
            store,
            BondStore::in_memory(),
            EngineConfig::default(),
        );
        assert_eq!(ooo.alerts.len(), 1);
        assert_eq!(ooo.alerts[0].sink, SessionState::ConnectionBreak);
    }

    #[test]
    fn knob_bond_and_verdicts() {
        let store = Arc::new(default_store().unwrap());
        let (r, e) = replay(
            &trace("knob"),
            store.clone(),
            BondStore::in_memory(),
            EngineConfig::default(),
        );
        assert_eq!(r.alerts[0].sink, SessionState::PairingExploitation);
        let bond = e.bonds().records().next().unwrap().clone();
        assert_eq!(bond.enc_key_size, 16);
        assert_eq!(bond.method, AssociationModel::PasskeyEntry);
        assert_eq!(bond.key_flags, BT_KEYS_LTK | BT_KEYS_AUTHENTICATED);
        assert_eq!(bond.attr_levels.get(&0x0010), Some(&3));

        let (b, e) = replay(
            &trace("first-pairing-keysize-7"),
            store,
            BondStore::in_memory(),
            EngineConfig::default(),
        );
        assert!(b.alerts.is_empty());
        assert_eq!(e.bonds().records().next().unwrap().enc_key_size, 7);
    }

    #[test]
    fn strict_mode_flags_key_size_increase() {
        let store = Arc::new(default_store().unwrap());
        let t = trace("normal-pair-16-then-reconnect");
        let peer = t.records[0].peer;
        let mut bonds = BondStore::in_memory();
        bonds
            .upsert(BondRecord {
                peer,
                enc_key_size: 12,
                method: AssociationModel::PasskeyEntry,
                key_flags: BT_KEYS_LTK | BT_KEYS_AUTHENTICATED,
                attr_levels: BTreeMap::new(),
            })
            .unwrap();
        let (lax, _) = replay(&t, store.clone(), bonds.clone(), EngineConfig::default());
        assert!(lax.alerts.is_empty());
        let strict = EngineConfig {
            strict_keysize: true,
            ..EngineConfig::default()
        };
        let (r, _) = replay(&t, store, bonds, strict);
        assert_eq!(r.alerts[0].rule.as_deref(), Some("knob_keysize"));
    }

    #[test]
    fn repeat_threshold_is_configurable() {
        let store = Arc::new(default_store().unwrap());
        let cfg = EngineConfig {
            repeat_threshold: 3,
            ..EngineConfig::default()
        };
        let (r, _) = replay(
            &trace("dup-feature-req"),
            store,
            BondStore::in_memory(),
            cfg,
        );
        assert!(r.alerts.is_empty());
    }

    #[test]
    fn gating_and_mediation_hold_over_corpus() {
        let store = Arc::new(default_store().unwrap());
        let cfg = EngineConfig {
            record_dispatch: true,
            ..EngineConfig::default()
        };
        for t in corpus::generate() {
            let (_, e) = replay(&t, store.clone(), BondStore::in_memory(), cfg.clone());
            let rx: Vec<u64> = t
                .records
                .iter()
                .filter(|r| r.dir == Direction::Rx)
                .map(|r| r.seq)
                .collect();
            assert_eq!(e.audit(), rx.as_slice(), "{}", t.meta.name);
            assert_eq!(
                e.stats().gated_commits,
                e.stats().matched_pairs,
                "{}",
                t.meta.name
            );
        }
    }

    #[test]
    fn bond_monotonic_under_attack() {
        let store = Arc::new(default_store().unwrap());
        for name in ["knob", "keysize-confusion", "blesa-reactive"] {
            let (r, e) = replay(
                &trace(name),
                store.clone(),
                BondStore::in_memory(),
                EngineConfig::default(),
            );
            let b = e.bonds().records().next().unwrap();
            assert_eq!(b.enc_key_size, 16, "{name}");
            assert!(b.authenticated());
            assert!(!r.alerts.is_empty());
        }
    }

    #[test]
    fn bonds_persist_to_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bonds.txt");
        let store = Arc::new(default_store().unwrap());
        let bonds = BondStore::open(&path).unwrap();
        let _ = replay(
            &trace("first-pairing-keysize-7"),
            store,
            bonds,
            EngineConfig::default(),
        );
        let back = BondStore::open(&path).unwrap();
        assert_eq!(back.records().next().unwrap().enc_key_size, 7);
    }

    #[test]
    fn garbage_never_panics() {
        let mut e = engine(default_store().unwrap());
        connected(&mut e);
        let mut x: u32 = 0x1234_5678;
        for seq in 10..5000u64 {
            let len = (x % 40) as usize;
            let mut raw = Vec::with_capacity(len);
            for _ in 0..len {
                x ^= x << 13;
                x ^= x >> 17;
                x ^= x << 5;
                raw.push(x as u8);
            }
            let hook = HookPoint::ALL[(x % 5) as usize];
            if hook.is_rx() {
                e.on_rx(seq, peer(), hook, &raw);
            } else {
                e.on_tx(seq, peer(), hook, &raw);
            }
        }
    }
}
