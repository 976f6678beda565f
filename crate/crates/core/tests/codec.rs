use std::collections::BTreeMap;

use proptest::prelude::*;
use stateguard::pdu::{
    decode_ll, decode_smp, encode_ll, encode_smp, hex, ll_kind_from_header, Address, AdvBody,
    AdvFlags, AttErrorResponse, AttPdu, ConnParams, ConnectInd, ControlPdu, DataBody, DataFlags,
    IoCapability, L2capFrame, L2capPayload, LengthParams, LinkLayerPdu, LlChannel, PairingFeatures,
    PduError, PduKind, SmpPdu, CHANNEL_MAP_DATA_MASK,
};

const GOLDEN_PDUS: &str = include_str!("fixtures/golden_pdus.txt");
const GOLDEN_FIELDS: &str = include_str!("fixtures/golden_fields.txt");

fn lines(text: &str) -> impl Iterator<Item = Vec<&str>> {
    text.lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|l| l.split_whitespace().collect())
}

fn channel_for(kind: &str) -> LlChannel {
    match kind {
        "ADV_IND" | "SCAN_REQ" | "SCAN_RSP" | "CONNECT_IND" => LlChannel::Advertising,
        _ => LlChannel::Data,
    }
}

fn ll_fields(raw: &[u8], pdu: &LinkLayerPdu) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    let mut put = |k: &str, v: String| {
        m.insert(k.to_string(), v);
    };
    put("length", raw[1].to_string());
    match pdu {
        LinkLayerPdu::Advertising { body, .. } => {
            put("pdu_type", (raw[0] & 0x0f).to_string());
            match body {
                AdvBody::ConnectInd(c) => {
                    put("init_a", c.initiator_address.to_string());
                    put("adv_a", c.advertiser_address.to_string());
                    put("access_address", format!("{:#010x}", c.access_address));
                    put("crc_init", format!("{:#08x}", c.crc_init));
                    put("win_size", c.win_size.to_string());
                    put("win_offset", c.win_offset.to_string());
                    put("interval", c.interval.to_string());
                    put("latency", c.latency.to_string());
                    put("timeout", c.timeout.to_string());
                    put("channel_map", format!("{:#012x}", c.channel_map));
                    put("hop", c.hop.to_string());
                    put("sca", c.sca.to_string());
                }
                AdvBody::ScanReq {
                    scan_address,
                    adv_address,
                } => {
                    put("scan_a", scan_address.to_string());
                    put("adv_a", adv_address.to_string());
                }
                AdvBody::AdvInd { adv_address, .. } | AdvBody::ScanRsp { adv_address, .. } => {
                    put("adv_a", adv_address.to_string())
                }
                AdvBody::Unknown { .. } => {}
            }
        }
        LinkLayerPdu::Data { body, .. } => {
            put("llid", (raw[0] & 0x03).to_string());
            match body {
                DataBody::Control(c) => {
                    put("opcode", c.opcode().to_string());
                    match c {
                        ControlPdu::EncReq {
                            rand,
                            ediv,
                            skd_m,
                            iv_m,
                        } => {
                            put("rand", format!("{rand:#018x}"));
                            put("ediv", format!("{ediv:#06x}"));
                            put("skdm", format!("{skd_m:#018x}"));
                            put("ivm", format!("{iv_m:#010x}"));
                        }
                        ControlPdu::ConnectionParamReq(p) => {
                            put("interval_min", p.interval_min.to_string());
                            put("interval_max", p.interval_max.to_string());
                            put("timeout", p.timeout.to_string());
                        }
                        _ => {}
                    }
                }
                DataBody::L2cap(f) => {
                    put("l2cap_len", (raw.len() - 6).to_string());
                    put("l2cap_cid", f.cid.to_string());
                    if let L2capPayload::Att(AttPdu::ErrorResponse(e)) = &f.payload {
                        put("att_request", e.request_opcode.to_string());
                        put("att_handle", e.handle.to_string());
                        put("att_error", e.error_code.to_string());
                    }
                }
                _ => {}
            }
        }
    }
    m
}

fn smp_fields(pdu: &SmpPdu) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("opcode".into(), pdu.opcode_byte().to_string());
    match pdu {
        SmpPdu::PairingRequest(f) | SmpPdu::PairingResponse(f) => {
            for (k, v) in [
                ("io_capability", f.io_capability as u8),
                ("oob", u8::from(f.oob_flag)),
                ("auth_req", f.auth_req),
                ("max_enc_key_size", f.max_enc_key_size),
                ("initiator_key_dist", f.initiator_key_dist),
                ("responder_key_dist", f.responder_key_dist),
            ] {
                m.insert(k.into(), v.to_string());
            }
        }
        SmpPdu::PairingFailed { reason } => {
            m.insert("reason".into(), reason.to_string());
        }
        _ => {}
    }
    m
}

#[test]
fn golden_bytes_decode_to_expected_kind_and_re_encode() {
    let mut count = 0;
    for l in lines(GOLDEN_PDUS) {
        let (name, bytes, kind) = (l[0], hex::decode(l[1]).unwrap(), l[2]);
        if let Some(smp_kind) = kind
            .strip_prefix("SMP_")
            .filter(|_| name.starts_with("smp_"))
        {
            let pdu = decode_smp(&bytes).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(pdu.kind().name(), format!("SMP_{smp_kind}"), "{name}");
            assert_eq!(encode_smp(&pdu).unwrap(), bytes, "{name}");
        } else {
            let ch = channel_for(kind);
            let pdu = decode_ll(&bytes, ch).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(PduKind::from(pdu.kind()).name(), kind, "{name}");
            let header_kind = ll_kind_from_header(&bytes, ch).unwrap();
            assert_eq!(header_kind, pdu.kind(), "{name}");
            assert_eq!(encode_ll(&pdu).unwrap(), bytes, "{name}");
        }
        count += 1;
    }
    assert!(count >= 20);
}

#[test]
fn golden_bytes_match_reference_dissection() {
    let pdus: BTreeMap<&str, (Vec<u8>, &str)> = lines(GOLDEN_PDUS)
        .map(|l| (l[0], (hex::decode(l[1]).unwrap(), l[2])))
        .collect();
    for l in lines(GOLDEN_FIELDS) {
        let name = l[0];
        let (bytes, kind) = &pdus[name];
        let ours = if name.starts_with("smp_") {
            smp_fields(&decode_smp(bytes).unwrap())
        } else {
            ll_fields(bytes, &decode_ll(bytes, channel_for(kind)).unwrap())
        };
        for kv in &l[1..] {
            let (k, v) = kv.split_once('=').unwrap();
            assert_eq!(
                ours.get(k).map(String::as_str),
                Some(v),
                "{name}: field {k}"
            );
        }
    }
}

#[test]
fn interval_zero_decodes_for_policy_inspection() {
    let raw =
        hex::decode("0522665544332211ffeeddccbbaa284c655056341202030000000000f401ffffffff1f07")
            .unwrap();
    let pdu = decode_ll(&raw, LlChannel::Advertising).unwrap();
    match pdu {
        LinkLayerPdu::Advertising {
            body: AdvBody::ConnectInd(c),
            ..
        } => assert_eq!(c.interval, 0),
        other => panic!("{other:?}"),
    }
}

#[test]
fn empty_input_is_truncated() {
    assert!(matches!(
        decode_ll(&[], LlChannel::Data),
        Err(PduError::TruncatedPdu { .. })
    ));
    assert!(matches!(
        decode_smp(&[]),
        Err(PduError::TruncatedPdu { .. })
    ));
}

#[test]
fn pairing_key_size_bounds() {
    let seven = decode_smp(&[0x01, 0x03, 0x00, 0x01, 0x07, 0x01, 0x01]).unwrap();
    match seven {
        SmpPdu::PairingRequest(f) => assert_eq!(f.max_enc_key_size, 7),
        other => panic!("{other:?}"),
    }
    assert!(matches!(
        decode_smp(&[0x01, 0x03, 0x00, 0x01, 17, 0x01, 0x01]),
        Err(PduError::IllegalFieldValue { .. })
    ));
    assert!(matches!(
        decode_smp(&[0x01, 0x03, 0x00, 0x01, 3, 0x01, 0x01]),
        Err(PduError::IllegalFieldValue { .. })
    ));
}

fn connect_ind(hop: u8, interval: u16) -> LinkLayerPdu {
    LinkLayerPdu::Advertising {
        flags: AdvFlags::default(),
        body: AdvBody::ConnectInd(ConnectInd {
            initiator_address: "112233445566".parse().unwrap(),
            advertiser_address: "aabbccddeeff".parse().unwrap(),
            access_address: 0x5065_4c28,
            crc_init: 0x123456,
            win_size: 2,
            win_offset: 3,
            interval,
            latency: 0,
            timeout: 500,
            channel_map: CHANNEL_MAP_DATA_MASK,
            hop,
            sca: 0,
        }),
    }
}

#[test]
fn connect_ind_encode_bounds() {
    let ok = connect_ind(5, 6);
    let raw = encode_ll(&ok).unwrap();
    assert_eq!(decode_ll(&raw, LlChannel::Advertising).unwrap(), ok);
    assert!(matches!(
        encode_ll(&connect_ind(4, 6)),
        Err(PduError::InvariantViolation(_))
    ));
}

#[test]
fn pairing_request_sixteen_round_trips() {
    let pdu = SmpPdu::PairingRequest(PairingFeatures {
        io_capability: IoCapability::KeyboardDisplay,
        oob_flag: false,
        auth_req: 0x0d,
        max_enc_key_size: 16,
        initiator_key_dist: 7,
        responder_key_dist: 7,
    });
    match decode_smp(&encode_smp(&pdu).unwrap()).unwrap() {
        SmpPdu::PairingRequest(f) => assert_eq!(f.max_enc_key_size, 16),
        other => panic!("{other:?}"),
    }
}

fn address() -> impl Strategy<Value = Address> {
    any::<[u8; 6]>().prop_map(Address)
}

fn features() -> impl Strategy<Value = PairingFeatures> {
    (
        0u8..5,
        any::<bool>(),
        any::<u8>(),
        7u8..=16,
        any::<u8>(),
        any::<u8>(),
    )
        .prop_map(|(io, oob, auth, size, i, r)| PairingFeatures {
            io_capability: IoCapability::from_u8(io).unwrap(),
            oob_flag: oob,
            auth_req: auth,
            max_enc_key_size: size,
            initiator_key_dist: i,
            responder_key_dist: r,
        })
}

fn smp_pdu() -> impl Strategy<Value = SmpPdu> {
    prop_oneof![
        features().prop_map(SmpPdu::PairingRequest),
        features().prop_map(SmpPdu::PairingResponse),
        any::<[u8; 16]>().prop_map(SmpPdu::PairingConfirm),
        any::<[u8; 16]>().prop_map(SmpPdu::PairingRandom),
        any::<u8>().prop_map(|reason| SmpPdu::PairingFailed { reason }),
        any::<[u8; 16]>().prop_map(|ltk| SmpPdu::EncryptionInformation { ltk }),
        any::<[u8; 16]>().prop_map(|irk| SmpPdu::IdentityInformation { irk }),
        (any::<[u8; 32]>(), any::<[u8; 32]>()).prop_map(|(x, y)| SmpPdu::PublicKey { x, y }),
        any::<[u8; 16]>().prop_map(SmpPdu::DhKeyCheck),
        (
            prop::sample::select(vec![0x00u8, 0x07, 0x09, 0x0a, 0x0b, 0x0e, 0x20, 0xff]),
            prop::collection::vec(any::<u8>(), 0..40)
        )
            .prop_map(|(opcode, body)| SmpPdu::Unknown { opcode, body }),
    ]
}

fn att_pdu() -> impl Strategy<Value = AttPdu> {
    let bytes = || prop::collection::vec(any::<u8>(), 0..30);
    prop_oneof![
        (any::<u8>(), any::<u16>(), any::<u8>()).prop_map(|(r, h, e)| AttPdu::ErrorResponse(
            AttErrorResponse {
                request_opcode: r,
                handle: h,
                error_code: e
            }
        )),
        any::<u16>().prop_map(|handle| AttPdu::ReadRequest { handle }),
        bytes().prop_map(|value| AttPdu::ReadResponse { value }),
        (any::<u16>(), bytes()).prop_map(|(handle, value)| AttPdu::WriteRequest { handle, value }),
        Just(AttPdu::WriteResponse),
        (any::<u16>(), bytes()).prop_map(|(handle, value)| AttPdu::WriteCommand { handle, value }),
        (
            prop::sample::select(vec![0x02u8, 0x03, 0x08, 0x10, 0x1b]),
            bytes()
        )
            .prop_map(|(opcode, params)| AttPdu::Other { opcode, params }),
    ]
}

fn l2cap() -> impl Strategy<Value = L2capFrame> {
    prop_oneof![
        smp_pdu().prop_map(|s| L2capFrame {
            cid: 6,
            payload: L2capPayload::Smp(s)
        }),
        att_pdu().prop_map(|a| L2capFrame {
            cid: 4,
            payload: L2capPayload::Att(a)
        }),
        (
            any::<u16>().prop_filter("uninterpreted cid", |c| *c != 4 && *c != 6),
            prop::collection::vec(any::<u8>(), 0..100)
        )
            .prop_map(|(cid, b)| L2capFrame {
                cid,
                payload: L2capPayload::Raw(b)
            }),
    ]
}

fn conn_params() -> impl Strategy<Value = ConnParams> {
    (
        any::<[u16; 4]>(),
        any::<u8>(),
        any::<u16>(),
        any::<[u16; 6]>(),
    )
        .prop_map(|(a, p, r, offsets)| ConnParams {
            interval_min: a[0],
            interval_max: a[1],
            latency: a[2],
            timeout: a[3],
            preferred_periodicity: p,
            reference_conn_event_count: r,
            offsets,
        })
}

fn length_params() -> impl Strategy<Value = LengthParams> {
    any::<[u16; 4]>().prop_map(|a| LengthParams {
        max_rx_octets: a[0],
        max_rx_time: a[1],
        max_tx_octets: a[2],
        max_tx_time: a[3],
    })
}

fn control() -> impl Strategy<Value = ControlPdu> {
    prop_oneof![
        conn_params().prop_map(ControlPdu::ConnectionParamReq),
        conn_params().prop_map(ControlPdu::ConnectionParamRsp),
        any::<u64>().prop_map(|features| ControlPdu::FeatureReq { features }),
        any::<u64>().prop_map(|features| ControlPdu::FeatureRsp { features }),
        length_params().prop_map(ControlPdu::LengthReq),
        length_params().prop_map(ControlPdu::LengthRsp),
        (any::<u64>(), any::<u16>(), any::<u64>(), any::<u32>()).prop_map(
            |(rand, ediv, skd_m, iv_m)| ControlPdu::EncReq {
                rand,
                ediv,
                skd_m,
                iv_m
            }
        ),
        (any::<u64>(), any::<u32>()).prop_map(|(skd_s, iv_s)| ControlPdu::EncRsp { skd_s, iv_s }),
        any::<u8>().prop_map(|error_code| ControlPdu::TerminateInd { error_code }),
        any::<u8>().prop_map(|error_code| ControlPdu::RejectInd { error_code }),
        (any::<u8>(), any::<u8>()).prop_map(|(reject_opcode, error_code)| {
            ControlPdu::RejectExtInd {
                reject_opcode,
                error_code,
            }
        }),
        any::<u8>().prop_map(|unknown_type| ControlPdu::UnknownRsp { unknown_type }),
        (
            prop::sample::select(vec![0x00u8, 0x01, 0x05, 0x06, 0x0a, 0x0c, 0x12, 0x16, 0x20]),
            prop::collection::vec(any::<u8>(), 0..40)
        )
            .prop_map(|(opcode, body)| ControlPdu::Other { opcode, body }),
    ]
}

fn conn_ind() -> impl Strategy<Value = ConnectInd> {
    (
        address(),
        address(),
        any::<u32>(),
        0u32..0x0100_0000,
        any::<(u8, u16, u16, u16, u16)>(),
        1u64..=CHANNEL_MAP_DATA_MASK,
        5u8..=16,
        0u8..8,
    )
        .prop_map(
            |(ia, aa, access, crc, (ws, wo, iv, lat, to), chm, hop, sca)| ConnectInd {
                initiator_address: ia,
                advertiser_address: aa,
                access_address: access,
                crc_init: crc,
                win_size: ws,
                win_offset: wo,
                interval: iv,
                latency: lat,
                timeout: to,
                channel_map: chm,
                hop,
                sca,
            },
        )
}

fn ll_pdu() -> impl Strategy<Value = LinkLayerPdu> {
    let adv_flags = any::<(bool, bool, bool)>().prop_map(|(c, t, r)| AdvFlags {
        ch_sel: c,
        tx_add: t,
        rx_add: r,
    });
    let data_flags = any::<(bool, bool, bool)>().prop_map(|(n, s, m)| DataFlags {
        nesn: n,
        sn: s,
        md: m,
        cp: false,
    });
    let adv_data = || prop::collection::vec(any::<u8>(), 0..=31);
    let adv_body = prop_oneof![
        (address(), adv_data())
            .prop_map(|(adv_address, data)| AdvBody::AdvInd { adv_address, data }),
        (address(), adv_data())
            .prop_map(|(adv_address, data)| AdvBody::ScanRsp { adv_address, data }),
        (address(), address()).prop_map(|(scan_address, adv_address)| AdvBody::ScanReq {
            scan_address,
            adv_address
        }),
        conn_ind().prop_map(AdvBody::ConnectInd),
        (
            prop::sample::select(vec![1u8, 2, 6, 7, 8, 15]),
            prop::collection::vec(any::<u8>(), 0..60)
        )
            .prop_map(|(pdu_type, payload)| AdvBody::Unknown { pdu_type, payload }),
    ];
    let data_body = prop_oneof![
        Just(DataBody::Empty),
        control().prop_map(DataBody::Control),
        l2cap().prop_map(DataBody::L2cap),
        prop::collection::vec(any::<u8>(), 1..100)
            .prop_map(|payload| DataBody::Unknown { llid: 1, payload }),
        prop::collection::vec(any::<u8>(), 0..100)
            .prop_map(|payload| DataBody::Unknown { llid: 0, payload }),
    ];
    prop_oneof![
        (adv_flags, adv_body).prop_map(|(flags, body)| LinkLayerPdu::Advertising { flags, body }),
        (data_flags, data_body).prop_map(|(flags, body)| LinkLayerPdu::Data { flags, body }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn ll_round_trip(pdu in ll_pdu()) {
        let raw = encode_ll(&pdu).unwrap();
        let back = decode_ll(&raw, pdu.channel()).unwrap();
        prop_assert_eq!(&back, &pdu);
        prop_assert_eq!(ll_kind_from_header(&raw, pdu.channel()), Some(pdu.kind()));
        prop_assert_eq!(raw[1] as usize, raw.len() - 2);
    }

    #[test]
    fn smp_round_trip(pdu in smp_pdu()) {
        let raw = encode_smp(&pdu).unwrap();
        prop_assert_eq!(decode_smp(&raw).unwrap(), pdu);
    }

    #[test]
    fn decode_is_total(raw in prop::collection::vec(any::<u8>(), 0..300), adv in any::<bool>()) {
        let ch = if adv { LlChannel::Advertising } else { LlChannel::Data };
        if let Ok(pdu) = decode_ll(&raw, ch) {
            // Anything that decodes satisfies the type invariants and re-encodes
            // to the same bytes.
            if let LinkLayerPdu::Advertising { body: AdvBody::ConnectInd(c), .. } = &pdu {
                prop_assert!((5..=16).contains(&c.hop));
                prop_assert!(c.channel_map & CHANNEL_MAP_DATA_MASK != 0);
                prop_assert_eq!(c.channel_map & !CHANNEL_MAP_DATA_MASK, 0);
            }
            prop_assert_eq!(encode_ll(&pdu).unwrap(), raw.clone());
        }
        if let Ok(smp) = decode_smp(&raw) {
            if let SmpPdu::PairingRequest(f) | SmpPdu::PairingResponse(f) = &smp {
                prop_assert!((7..=16).contains(&f.max_enc_key_size));
            }
            prop_assert_eq!(encode_smp(&smp).unwrap(), raw);
        }
    }
}
