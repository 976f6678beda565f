//! Benign and attack trace generators.
//!
//! The protected device is the advertiser/peripheral. RX records come from
//! the peer (the attacker in attack traces), TX records are the local
//! stack's answers. Well-formed PDUs are produced by the codec; malformed
//! ones are well-formed PDUs with raw bytes patched afterwards.

use std::fs;
use std::path::{Path, PathBuf};

use crate::abi::HookPoint;
use crate::fsm::{Direction, SessionState};
use crate::pdu::{
    encode_ll, Address, AdvBody, AdvFlags, AttErrorResponse, AttPdu, ConnParams, ConnectInd,
    ControlPdu, DataBody, DataFlags, IoCapability, L2capFrame, L2capPayload, LengthParams,
    LinkLayerPdu, PairingFeatures, SmpPdu, AUTH_REQ_MITM, AUTH_REQ_SC, CID_ATT, CID_LE_SIGNALING,
    CID_SMP,
};

use super::trace::{Category, Trace, TraceMeta, TraceRecord};

const LOCAL: Address = Address([0x0a, 0x0b, 0x0c, 0x0d, 0x0e, 0x0f]);
const AUTH_BONDING: u8 = 0x01;

fn ll(pdu: LinkLayerPdu) -> Vec<u8> {
    encode_ll(&pdu).expect("corpus PDU encodes")
}

fn adv(body: AdvBody) -> Vec<u8> {
    ll(LinkLayerPdu::Advertising {
        flags: AdvFlags::default(),
        body,
    })
}

fn data(body: DataBody) -> Vec<u8> {
    ll(LinkLayerPdu::Data {
        flags: DataFlags::default(),
        body,
    })
}

pub fn adv_ind() -> Vec<u8> {
    adv(AdvBody::AdvInd {
        adv_address: LOCAL,
        data: vec![0x02, 0x01, 0x06],
    })
}

pub fn scan_req(peer: Address) -> Vec<u8> {
    adv(AdvBody::ScanReq {
        scan_address: peer,
        adv_address: LOCAL,
    })
}

pub fn scan_rsp() -> Vec<u8> {
    adv(AdvBody::ScanRsp {
        adv_address: LOCAL,
        data: vec![0x05, 0x09, b'l', b'o', b'c', b'k'],
    })
}

pub fn connect_ind(peer: Address) -> Vec<u8> {
    adv(AdvBody::ConnectInd(ConnectInd {
        initiator_address: peer,
        advertiser_address: LOCAL,
        access_address: 0x5065_a3c1,
        crc_init: 0x00a1_b2c3,
        win_size: 2,
        win_offset: 0,
        interval: 24,
        latency: 0,
        timeout: 72,
        channel_map: 0x1f_ffff_ffff,
        hop: 7,
        sca: 0,
    }))
}

/// Overwrites interval, channel map and hop of an encoded CONNECT_IND.
fn patch_connect_ind(mut raw: Vec<u8>, interval: u16, chm: u64, hop: u8) -> Vec<u8> {
    raw[24..26].copy_from_slice(&interval.to_le_bytes());
    raw[30..35].copy_from_slice(&chm.to_le_bytes()[..5]);
    raw[35] = (raw[35] & 0xe0) | (hop & 0x1f);
    raw
}

pub fn empty() -> Vec<u8> {
    data(DataBody::Empty)
}

pub fn control(c: ControlPdu) -> Vec<u8> {
    data(DataBody::Control(c))
}

fn l2cap(cid: u16, payload: L2capPayload) -> Vec<u8> {
    data(DataBody::L2cap(L2capFrame { cid, payload }))
}

pub fn smp(s: SmpPdu) -> Vec<u8> {
    l2cap(CID_SMP, L2capPayload::Smp(s))
}

pub fn att(a: AttPdu) -> Vec<u8> {
    l2cap(CID_ATT, L2capPayload::Att(a))
}

pub fn features(io: IoCapability, auth_req: u8, max_key: u8) -> PairingFeatures {
    PairingFeatures {
        io_capability: io,
        oob_flag: false,
        auth_req,
        max_enc_key_size: max_key,
        initiator_key_dist: 0x01,
        responder_key_dist: 0x01,
    }
}

fn conn_params() -> ConnParams {
    ConnParams {
        interval_min: 24,
        interval_max: 40,
        latency: 0,
        timeout: 500,
        preferred_periodicity: 0,
        reference_conn_event_count: 0,
        offsets: [0xffff; 6],
    }
}

fn length_params() -> LengthParams {
    LengthParams {
        max_rx_octets: 251,
        max_rx_time: 2120,
        max_tx_octets: 251,
        max_tx_time: 2120,
    }
}

fn enc_req(rand: u64, ediv: u16) -> Vec<u8> {
    control(ControlPdu::EncReq {
        rand,
        ediv,
        skd_m: 0x1122_3344_5566_7788,
        iv_m: 0x99aa_bbcc,
    })
}

fn enc_rsp() -> Vec<u8> {
    control(ControlPdu::EncRsp {
        skd_s: 0x0102_0304_0506_0708,
        iv_s: 0x0a0b_0c0d,
    })
}

/// Trace under construction.
struct Builder {
    meta: TraceMeta,
    peer: Address,
    seq: u64,
    records: Vec<TraceRecord>,
}

impl Builder {
    fn new(name: &str, peer: u8) -> Builder {
        Builder {
            meta: TraceMeta {
                name: name.to_string(),
                category: Some(Category::Benign),
                ..TraceMeta::default()
            },
            peer: Address([0xc0, 0xff, 0xee, 0x00, 0x00, peer]),
            seq: 0,
            records: Vec::new(),
        }
    }

    fn attack(mut self, id: &str, category: Category, sinks: &[SessionState], path: &str) -> Self {
        self.meta.attack = Some(id.to_string());
        self.meta.category = Some(category);
        self.meta.sinks = sinks.to_vec();
        self.meta.path = Some(path.to_string());
        self
    }

    fn push(&mut self, dir: Direction, hook: HookPoint, payload: Vec<u8>, note: &str) -> &mut Self {
        self.seq += 1;
        self.records.push(TraceRecord {
            seq: self.seq,
            dir,
            hook,
            peer: self.peer,
            payload,
            note: (!note.is_empty()).then(|| note.to_string()),
        });
        self
    }

    fn rx(&mut self, hook: HookPoint, payload: Vec<u8>, note: &str) -> &mut Self {
        self.push(Direction::Rx, hook, payload, note)
    }

    fn tx(&mut self, hook: HookPoint, payload: Vec<u8>, note: &str) -> &mut Self {
        self.push(Direction::Tx, hook, payload, note)
    }

    fn rx_ctrl(&mut self, c: ControlPdu, note: &str) -> &mut Self {
        self.rx(HookPoint::LlRxCtrl, control(c), note)
    }

    fn tx_ctrl(&mut self, c: ControlPdu, note: &str) -> &mut Self {
        self.tx(HookPoint::LlTx, control(c), note)
    }

    fn rx_smp(&mut self, s: SmpPdu, note: &str) -> &mut Self {
        self.rx(HookPoint::SmpRx, smp(s), note)
    }

    fn tx_smp(&mut self, s: SmpPdu, note: &str) -> &mut Self {
        self.tx(HookPoint::SmpTx, smp(s), note)
    }

    fn rx_att(&mut self, a: AttPdu, note: &str) -> &mut Self {
        self.rx(HookPoint::LlRxData, att(a), note)
    }

    fn tx_att(&mut self, a: AttPdu, note: &str) -> &mut Self {
        self.tx(HookPoint::LlTx, att(a), note)
    }

    /// Marks the next record as the start of the final attack step.
    fn final_step(&mut self) -> &mut Self {
        self.meta.final_seq = Some(self.seq + 1);
        self
    }

    fn advertise(&mut self) -> &mut Self {
        self.tx(HookPoint::LlTx, adv_ind(), "advertise")
    }

    fn connect(&mut self) -> &mut Self {
        self.advertise();
        let ci = connect_ind(self.peer);
        self.rx(HookPoint::LlRxCtrl, ci, "connect")
            .rx(HookPoint::LlRxData, empty(), "")
            .tx(HookPoint::LlTx, empty(), "connection accepted")
    }

    fn legacy_pairing(&mut self, req: PairingFeatures, rsp: PairingFeatures) -> &mut Self {
        self.rx_smp(SmpPdu::PairingRequest(req), "pairing request")
            .tx_smp(SmpPdu::PairingResponse(rsp), "pairing response")
            .rx_smp(SmpPdu::PairingConfirm([0x11; 16]), "")
            .tx_smp(SmpPdu::PairingConfirm([0x22; 16]), "")
            .rx_smp(SmpPdu::PairingRandom([0x33; 16]), "")
            .tx_smp(SmpPdu::PairingRandom([0x44; 16]), "")
    }

    fn sc_start(&mut self, key: u8) -> &mut Self {
        let auth = AUTH_BONDING | AUTH_REQ_MITM | AUTH_REQ_SC;
        self.rx_smp(
            SmpPdu::PairingRequest(features(IoCapability::KeyboardDisplay, auth, key)),
            "pairing request (secure connections)",
        )
        .tx_smp(
            SmpPdu::PairingResponse(features(IoCapability::DisplayYesNo, auth, 16)),
            "pairing response",
        )
    }

    fn public_keys(&mut self) -> &mut Self {
        self.rx_smp(public_key(0x51), "public key")
            .tx_smp(public_key(0x61), "public key")
    }

    fn passkey_pairing(&mut self, key: u8) -> &mut Self {
        let auth = AUTH_BONDING | AUTH_REQ_MITM;
        self.legacy_pairing(
            features(IoCapability::KeyboardDisplay, auth, key),
            features(IoCapability::DisplayOnly, auth, 16),
        )
    }

    fn encrypt(&mut self) -> &mut Self {
        self.rx(
            HookPoint::LlRxCtrl,
            enc_req(0x0123_4567_89ab_cdef, 0x4321),
            "start encryption",
        )
        .tx(HookPoint::LlTx, enc_rsp(), "encryption accepted")
    }

    fn read(&mut self, handle: u16) -> &mut Self {
        self.rx_att(AttPdu::ReadRequest { handle }, "read").tx_att(
            AttPdu::ReadResponse {
                value: vec![0x64, 0x00],
            },
            "",
        )
    }

    fn write(&mut self, handle: u16) -> &mut Self {
        self.rx_att(
            AttPdu::WriteRequest {
                handle,
                value: vec![0x01],
            },
            "write",
        )
        .tx_att(AttPdu::WriteResponse, "")
    }

    fn terminate(&mut self) -> &mut Self {
        self.rx_ctrl(ControlPdu::TerminateInd { error_code: 0x13 }, "terminate")
    }

    /// A completed first session: authenticated pairing at key size 16,
    /// encryption, an encrypted read of 0x0010, and disconnection.
    fn bonding_session(&mut self) -> &mut Self {
        self.connect()
            .passkey_pairing(16)
            .encrypt()
            .read(0x0010)
            .terminate()
    }

    fn build(self) -> Trace {
        Trace {
            meta: self.meta,
            records: self.records,
        }
    }
}

fn public_key(fill: u8) -> SmpPdu {
    SmpPdu::PublicKey {
        x: [fill; 32],
        y: [fill.wrapping_add(1); 32],
    }
}

/// The Pairing Request at key size 7 shared by the KNOB trace and its benign
/// counterpart.
fn short_key_request() -> SmpPdu {
    SmpPdu::PairingRequest(features(
        IoCapability::KeyboardDisplay,
        AUTH_BONDING | AUTH_REQ_MITM,
        7,
    ))
}

fn pairing_response(key: u8) -> SmpPdu {
    SmpPdu::PairingResponse(features(
        IoCapability::DisplayOnly,
        AUTH_BONDING | AUTH_REQ_MITM,
        key,
    ))
}

pub fn benign() -> Vec<Trace> {
    let mut v = Vec::new();

    let mut b = Builder::new("first-pairing-keysize-7", 0x01);
    b.connect()
        .rx_smp(short_key_request(), "pairing request at key size 7")
        .tx_smp(pairing_response(16), "pairing response")
        .rx_smp(SmpPdu::PairingConfirm([0x11; 16]), "")
        .tx_smp(SmpPdu::PairingConfirm([0x22; 16]), "")
        .rx_smp(SmpPdu::PairingRandom([0x33; 16]), "")
        .tx_smp(SmpPdu::PairingRandom([0x44; 16]), "")
        .encrypt()
        .read(0x0010)
        .terminate();
    v.push(b.build());

    let mut b = Builder::new("normal-pair-16-then-reconnect", 0x02);
    b.bonding_session()
        .connect()
        .encrypt()
        .read(0x0010)
        .write(0x0020)
        .terminate();
    v.push(b.build());

    let mut b = Builder::new("renegotiation-with-TX-error-retry", 0x03);
    b.connect()
        .rx_ctrl(
            ControlPdu::ConnectionParamReq(conn_params()),
            "parameter request",
        )
        .tx_ctrl(
            ControlPdu::RejectExtInd {
                reject_opcode: 0x0f,
                error_code: 0x1a,
            },
            "rejected",
        )
        .rx_ctrl(ControlPdu::ConnectionParamReq(conn_params()), "retry")
        .tx_ctrl(ControlPdu::ConnectionParamRsp(conn_params()), "")
        .rx_ctrl(ControlPdu::LengthReq(length_params()), "length request")
        .tx_ctrl(
            ControlPdu::UnknownRsp { unknown_type: 0x14 },
            "not supported yet",
        )
        .rx_ctrl(ControlPdu::LengthReq(length_params()), "retry")
        .tx_ctrl(ControlPdu::LengthRsp(length_params()), "")
        .rx_smp(
            SmpPdu::PairingRequest(features(
                IoCapability::KeyboardDisplay,
                AUTH_BONDING | AUTH_REQ_MITM,
                16,
            )),
            "pairing request",
        )
        .tx_smp(
            SmpPdu::PairingFailed { reason: 0x05 },
            "pairing not allowed yet",
        )
        .passkey_pairing(16)
        .encrypt()
        .read(0x0010)
        .terminate();
    v.push(b.build());

    let mut b = Builder::new("plaintext-data-session", 0x04);
    let peer = b.peer;
    b.advertise()
        .rx(HookPoint::LlRxCtrl, scan_req(peer), "scan")
        .tx(HookPoint::LlTx, scan_rsp(), "");
    b.rx(HookPoint::LlRxCtrl, connect_ind(peer), "connect")
        .rx(HookPoint::LlRxData, empty(), "")
        .tx(HookPoint::LlTx, empty(), "connection accepted")
        .rx_ctrl(ControlPdu::FeatureReq { features: 0x01 }, "features")
        .tx_ctrl(ControlPdu::FeatureRsp { features: 0x01 }, "")
        .rx_ctrl(ControlPdu::LengthReq(length_params()), "length")
        .tx_ctrl(ControlPdu::LengthRsp(length_params()), "")
        .read(0x0003)
        .write(0x0005)
        .rx(
            HookPoint::LlRxData,
            l2cap(
                CID_LE_SIGNALING,
                L2capPayload::Raw(vec![0x13, 0x01, 0x02, 0x00, 0x00, 0x00]),
            ),
            "signalling",
        )
        .rx_att(
            AttPdu::WriteCommand {
                handle: 0x0005,
                value: vec![0x02],
            },
            "write command",
        )
        .read(0x0003)
        .terminate();
    v.push(b.build());
    v
}

pub fn session_attacks() -> Vec<Trace> {
    use SessionState::*;
    let mut v = Vec::new();
    let session = Category::Session;

    let mut b = Builder::new("knob", 0x11).attack("knob", session, &[PairingExploitation], "knob");
    b.bonding_session().connect().final_step();
    b.rx_smp(short_key_request(), "pairing request at key size 7")
        .tx_smp(pairing_response(16), "pairing response");
    v.push(b.build());

    let mut b = Builder::new("keysize-confusion", 0x12).attack(
        "keysize_confusion",
        session,
        &[PairingExploitation],
        "keysize_confusion",
    );
    b.bonding_session()
        .connect()
        .encrypt()
        .read(0x0010)
        .final_step();
    b.rx_smp(
        SmpPdu::PairingRequest(features(
            IoCapability::KeyboardDisplay,
            AUTH_BONDING | AUTH_REQ_MITM,
            12,
        )),
        "re-pairing at key size 12",
    )
    .tx_smp(pairing_response(16), "pairing response");
    v.push(b.build());

    let mut b = Builder::new("blesa-reactive", 0x13).attack(
        "blesa",
        session,
        &[PairingExploitation, EncryptionFailure],
        "blesa",
    );
    b.bonding_session().connect().final_step();
    b.rx_att(
        AttPdu::ReadRequest { handle: 0x0010 },
        "plaintext read of protected attribute",
    );
    v.push(b.build());

    let mut b = Builder::new("downgrade-pin-key-missing", 0x14).attack(
        "pin_key_missing_downgrade",
        session,
        &[PairingExploitation, EncryptionFailure],
        "pin_key_missing_downgrade",
    );
    b.connect()
        .rx_att(
            AttPdu::WriteRequest {
                handle: 0x0020,
                value: vec![0x01],
            },
            "write",
        )
        .tx_att(
            AttPdu::ErrorResponse(AttErrorResponse {
                request_opcode: 0x12,
                handle: 0x0020,
                error_code: 0x06,
            }),
            "pin or key missing",
        )
        .final_step();
    b.rx_att(
        AttPdu::WriteRequest {
            handle: 0x0020,
            value: vec![0x01],
        },
        "write again without pairing",
    );
    v.push(b.build());

    let dups: [(&str, &str, ControlPdu, ControlPdu); 3] = [
        (
            "dup-feature-req",
            "dup_feature_req",
            ControlPdu::FeatureReq { features: 0x01 },
            ControlPdu::FeatureRsp { features: 0x01 },
        ),
        (
            "dup-conn-param-req",
            "dup_conn_param_req",
            ControlPdu::ConnectionParamReq(conn_params()),
            ControlPdu::ConnectionParamRsp(conn_params()),
        ),
        (
            "dup-dle-req",
            "dup_dle_req",
            ControlPdu::LengthReq(length_params()),
            ControlPdu::LengthRsp(length_params()),
        ),
    ];
    for (i, (name, id, req, rsp)) in dups.into_iter().enumerate() {
        let mut b = Builder::new(name, 0x15 + i as u8).attack(id, session, &[ConnectionBreak], id);
        b.connect()
            .rx_ctrl(req.clone(), "request")
            .tx_ctrl(rsp, "")
            .final_step()
            .rx_ctrl(req, "identical request");
        v.push(b.build());
    }

    let mut b = Builder::new("replay-pairing-requests", 0x18).attack(
        "replay_pairing",
        session,
        &[ConnectionBreak, PairingExploitation],
        "replay_pairing",
    );
    let req = SmpPdu::PairingRequest(features(
        IoCapability::KeyboardDisplay,
        AUTH_BONDING | AUTH_REQ_MITM,
        16,
    ));
    b.connect()
        .rx_smp(req.clone(), "pairing request")
        .tx_smp(pairing_response(16), "pairing response")
        .final_step()
        .rx_smp(req, "replayed pairing request");
    v.push(b.build());

    let mut b = Builder::new("out-of-order-enc-zero-ltk", 0x19).attack(
        "out_of_order_enc",
        session,
        &[ConnectionBreak, PairingExploitation],
        "out_of_order_enc",
    );
    b.connect()
        .rx_ctrl(ControlPdu::FeatureReq { features: 0x01 }, "features")
        .tx_ctrl(ControlPdu::FeatureRsp { features: 0x01 }, "")
        .final_step()
        .rx(
            HookPoint::LlRxCtrl,
            enc_req(0, 0),
            "encryption with zero LTK, no pairing",
        );
    v.push(b.build());

    let mut b = Builder::new("sequential-smp-public-keys", 0x1a).attack(
        "seq_public_keys",
        session,
        &[PairingExploitation],
        "seq_public_keys",
    );
    b.connect()
        .sc_start(16)
        .public_keys()
        .final_step()
        .rx_smp(public_key(0x52), "second public key");
    v.push(b.build());

    let mut b = Builder::new("repeated-scan-requests", 0x1b).attack(
        "repeated_scan_req",
        session,
        &[DiscoveryError],
        "repeated_scan_req",
    );
    let peer = b.peer;
    b.advertise()
        .rx(HookPoint::LlRxCtrl, scan_req(peer), "scan")
        .tx(HookPoint::LlTx, scan_rsp(), "")
        .final_step()
        .rx(HookPoint::LlRxCtrl, scan_req(peer), "scan again");
    v.push(b.build());

    let mut b = Builder::new("enc-setup-before-dh-check", 0x1c).attack(
        "enc_before_dh",
        session,
        &[ConnectionBreak, PairingExploitation],
        "enc_before_dh",
    );
    b.connect()
        .sc_start(16)
        .public_keys()
        .tx_smp(SmpPdu::PairingConfirm([0x22; 16]), "")
        .rx_smp(SmpPdu::PairingRandom([0x33; 16]), "")
        .tx_smp(SmpPdu::PairingRandom([0x44; 16]), "")
        .final_step()
        .rx(
            HookPoint::LlRxCtrl,
            enc_req(0, 0),
            "encryption before DHKey check",
        );
    v.push(b.build());
    v
}

pub fn packet_attacks() -> Vec<Trace> {
    use SessionState::*;
    let mut v = Vec::new();
    let packet = Category::Packet;

    let connect_variants: [(&str, &str, u16, u64, u8, u8); 3] = [
        ("interval-zero", "conn_interval", 0, 0x1f_ffff_ffff, 7, 0x21),
        (
            "invalid-channel-map",
            "conn_chan_map",
            24,
            0x00_0000_0001,
            7,
            0x22,
        ),
        ("invalid-hop", "conn_hop", 24, 0x1f_ffff_ffff, 2, 0x23),
    ];
    for (name, id, interval, chm, hop, peer) in connect_variants {
        let mut b = Builder::new(name, peer).attack(id, packet, &[ConnectionBreak], id);
        let raw = patch_connect_ind(connect_ind(b.peer), interval, chm, hop);
        b.advertise()
            .final_step()
            .rx(HookPoint::LlRxCtrl, raw, "malformed connect");
        v.push(b.build());
    }

    let mut b = Builder::new("scan-req-overflow", 0x24).attack(
        "scan_req_len",
        packet,
        &[DiscoveryError],
        "scan_req_len",
    );
    let mut raw = scan_req(b.peer);
    raw.extend_from_slice(&[0x41; 28]);
    raw[1] = (raw.len() - 2) as u8;
    b.advertise()
        .final_step()
        .rx(HookPoint::LlRxCtrl, raw, "oversized scan request");
    v.push(b.build());

    let mut b = Builder::new("oversized-l2cap-header", 0x25).attack(
        "l2cap_len",
        packet,
        &[ConnectionBreak, EncryptionFailure],
        "l2cap_len",
    );
    let mut raw = att(AttPdu::ReadRequest { handle: 0x0003 });
    raw[2..4].copy_from_slice(&0xfff0u16.to_le_bytes());
    b.connect()
        .final_step()
        .rx(HookPoint::LlRxData, raw, "L2CAP length beyond the PDU");
    v.push(b.build());

    let mut b = Builder::new("invalid-l2cap-cid", 0x26).attack(
        "l2cap_cid",
        packet,
        &[ConnectionBreak],
        "l2cap_cid",
    );
    let mut raw = att(AttPdu::ReadRequest { handle: 0x0003 });
    raw[4..6].copy_from_slice(&0x0003u16.to_le_bytes());
    b.connect()
        .final_step()
        .rx(HookPoint::LlRxData, raw, "reserved channel id");
    v.push(b.build());
    v
}

/// Every corpus trace: benign, session-based attacks, packet-based attacks.
pub fn generate() -> Vec<Trace> {
    let mut v = benign();
    v.extend(session_attacks());
    v.extend(packet_attacks());
    v
}

/// A connection followed by `reads` plaintext ATT read request/response
/// pairs, for latency measurement.
pub fn bench_trace(reads: usize) -> Trace {
    let mut b = Builder::new("bench", 0x30);
    b.connect();
    for i in 0..reads {
        b.read(0x0003 + (i % 8) as u16);
    }
    b.terminate();
    b.build()
}

/// Writes every corpus trace as `<name>.trace` into `dir`.
pub fn write_corpus(dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut out = Vec::new();
    for t in generate() {
        let p = dir.join(format!("{}.trace", t.meta.name));
        fs::write(&p, t.to_string())?;
        out.push(p);
    }
    Ok(out)
}
