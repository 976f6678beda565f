use serde::{Deserialize, Serialize};

use super::att::AttPdu;
use super::smp::{decode_smp, encode_smp, SmpPdu};
use super::{Address, PduError, PduKind, Reader, Result};

/// Largest link-layer payload accepted (LE Data Length Extension maximum).
pub const MAX_PAYLOAD: usize = 251;

/// Bits of the 40-bit ChM field that name data channels 0..=36.
pub const CHANNEL_MAP_DATA_MASK: u64 = (1 << 37) - 1;

pub const CID_ATT: u16 = 0x0004;
pub const CID_LE_SIGNALING: u16 = 0x0005;
pub const CID_SMP: u16 = 0x0006;

const ADV_IND: u8 = 0x0;
const SCAN_REQ: u8 = 0x3;
const SCAN_RSP: u8 = 0x4;
const CONNECT_IND: u8 = 0x5;

const LLID_CONTINUATION: u8 = 0x1;
const LLID_START: u8 = 0x2;
const LLID_CONTROL: u8 = 0x3;

const OP_TERMINATE_IND: u8 = 0x02;
const OP_ENC_REQ: u8 = 0x03;
const OP_ENC_RSP: u8 = 0x04;
const OP_UNKNOWN_RSP: u8 = 0x07;
const OP_FEATURE_REQ: u8 = 0x08;
const OP_FEATURE_RSP: u8 = 0x09;
const OP_REJECT_IND: u8 = 0x0d;
const OP_CONNECTION_PARAM_REQ: u8 = 0x0f;
const OP_CONNECTION_PARAM_RSP: u8 = 0x10;
const OP_REJECT_EXT_IND: u8 = 0x11;
const OP_LENGTH_REQ: u8 = 0x14;
const OP_LENGTH_RSP: u8 = 0x15;

/// Which physical channel class a PDU was received on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LlChannel {
    Advertising,
    Data,
}

/// Kinds of link-layer PDU the decoder distinguishes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LlPduKind {
    AdvInd,
    ScanReq,
    ScanRsp,
    ConnectInd,
    LlConnectionParamReq,
    LlConnectionParamRsp,
    LlFeatureReq,
    LlFeatureRsp,
    LlLengthReq,
    LlLengthRsp,
    LlEncReq,
    LlEncRsp,
    LlTerminateInd,
    LlRejectInd,
    LlRejectExtInd,
    LlUnknownRsp,
    Empty,
    DataL2cap,
    Unknown,
}

impl From<LlPduKind> for PduKind {
    fn from(k: LlPduKind) -> PduKind {
        match k {
            LlPduKind::AdvInd => PduKind::AdvInd,
            LlPduKind::ScanReq => PduKind::ScanReq,
            LlPduKind::ScanRsp => PduKind::ScanRsp,
            LlPduKind::ConnectInd => PduKind::ConnectInd,
            LlPduKind::LlConnectionParamReq => PduKind::LlConnectionParamReq,
            LlPduKind::LlConnectionParamRsp => PduKind::LlConnectionParamRsp,
            LlPduKind::LlFeatureReq => PduKind::LlFeatureReq,
            LlPduKind::LlFeatureRsp => PduKind::LlFeatureRsp,
            LlPduKind::LlLengthReq => PduKind::LlLengthReq,
            LlPduKind::LlLengthRsp => PduKind::LlLengthRsp,
            LlPduKind::LlEncReq => PduKind::LlEncReq,
            LlPduKind::LlEncRsp => PduKind::LlEncRsp,
            LlPduKind::LlTerminateInd => PduKind::LlTerminateInd,
            LlPduKind::LlRejectInd => PduKind::LlRejectInd,
            LlPduKind::LlRejectExtInd => PduKind::LlRejectExtInd,
            LlPduKind::LlUnknownRsp => PduKind::LlUnknownRsp,
            LlPduKind::Empty => PduKind::Empty,
            LlPduKind::DataL2cap => PduKind::DataL2cap,
            LlPduKind::Unknown => PduKind::Unknown,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AdvFlags {
    pub ch_sel: bool,
    pub tx_add: bool,
    pub rx_add: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DataFlags {
    pub nesn: bool,
    pub sn: bool,
    pub md: bool,
    pub cp: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LinkLayerPdu {
    Advertising { flags: AdvFlags, body: AdvBody },
    Data { flags: DataFlags, body: DataBody },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdvBody {
    AdvInd {
        adv_address: Address,
        data: Vec<u8>,
    },
    ScanReq {
        scan_address: Address,
        adv_address: Address,
    },
    ScanRsp {
        adv_address: Address,
        data: Vec<u8>,
    },
    ConnectInd(ConnectInd),
    /// Any other advertising PDU type, kept opaque.
    Unknown {
        pdu_type: u8,
        payload: Vec<u8>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConnectInd {
    pub initiator_address: Address,
    pub advertiser_address: Address,
    pub access_address: u32,
    pub crc_init: u32,
    pub win_size: u8,
    pub win_offset: u16,
    pub interval: u16,
    pub latency: u16,
    pub timeout: u16,
    /// 40-bit ChM field; bits 37..=39 are reserved.
    pub channel_map: u64,
    pub hop: u8,
    pub sca: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum DataBody {
    Empty,
    Control(ControlPdu),
    L2cap(L2capFrame),
    /// Continuation fragments and reserved LLIDs.
    Unknown {
        llid: u8,
        payload: Vec<u8>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConnParams {
    pub interval_min: u16,
    pub interval_max: u16,
    pub latency: u16,
    pub timeout: u16,
    pub preferred_periodicity: u8,
    pub reference_conn_event_count: u16,
    pub offsets: [u16; 6],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LengthParams {
    pub max_rx_octets: u16,
    pub max_rx_time: u16,
    pub max_tx_octets: u16,
    pub max_tx_time: u16,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ControlPdu {
    ConnectionParamReq(ConnParams),
    ConnectionParamRsp(ConnParams),
    FeatureReq {
        features: u64,
    },
    FeatureRsp {
        features: u64,
    },
    LengthReq(LengthParams),
    LengthRsp(LengthParams),
    EncReq {
        rand: u64,
        ediv: u16,
        skd_m: u64,
        iv_m: u32,
    },
    EncRsp {
        skd_s: u64,
        iv_s: u32,
    },
    TerminateInd {
        error_code: u8,
    },
    RejectInd {
        error_code: u8,
    },
    RejectExtInd {
        reject_opcode: u8,
        error_code: u8,
    },
    UnknownRsp {
        unknown_type: u8,
    },
    /// Control opcodes the engine does not interpret.
    Other {
        opcode: u8,
        body: Vec<u8>,
    },
}

/// A complete (unfragmented) L2CAP basic frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct L2capFrame {
    pub cid: u16,
    pub payload: L2capPayload,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum L2capPayload {
    Smp(SmpPdu),
    Att(AttPdu),
    Raw(Vec<u8>),
}

impl LinkLayerPdu {
    pub fn channel(&self) -> LlChannel {
        match self {
            LinkLayerPdu::Advertising { .. } => LlChannel::Advertising,
            LinkLayerPdu::Data { .. } => LlChannel::Data,
        }
    }

    pub fn kind(&self) -> LlPduKind {
        match self {
            LinkLayerPdu::Advertising { body, .. } => match body {
                AdvBody::AdvInd { .. } => LlPduKind::AdvInd,
                AdvBody::ScanReq { .. } => LlPduKind::ScanReq,
                AdvBody::ScanRsp { .. } => LlPduKind::ScanRsp,
                AdvBody::ConnectInd(_) => LlPduKind::ConnectInd,
                AdvBody::Unknown { .. } => LlPduKind::Unknown,
            },
            LinkLayerPdu::Data { body, .. } => match body {
                DataBody::Empty => LlPduKind::Empty,
                DataBody::L2cap(_) => LlPduKind::DataL2cap,
                DataBody::Unknown { .. } => LlPduKind::Unknown,
                DataBody::Control(c) => c.kind(),
            },
        }
    }

    /// The payload length the header will declare once encoded.
    pub fn header_length(&self) -> Result<usize> {
        Ok(encode_ll(self)?.len() - 2)
    }
}

impl ControlPdu {
    pub fn opcode(&self) -> u8 {
        match self {
            ControlPdu::ConnectionParamReq(_) => OP_CONNECTION_PARAM_REQ,
            ControlPdu::ConnectionParamRsp(_) => OP_CONNECTION_PARAM_RSP,
            ControlPdu::FeatureReq { .. } => OP_FEATURE_REQ,
            ControlPdu::FeatureRsp { .. } => OP_FEATURE_RSP,
            ControlPdu::LengthReq(_) => OP_LENGTH_REQ,
            ControlPdu::LengthRsp(_) => OP_LENGTH_RSP,
            ControlPdu::EncReq { .. } => OP_ENC_REQ,
            ControlPdu::EncRsp { .. } => OP_ENC_RSP,
            ControlPdu::TerminateInd { .. } => OP_TERMINATE_IND,
            ControlPdu::RejectInd { .. } => OP_REJECT_IND,
            ControlPdu::RejectExtInd { .. } => OP_REJECT_EXT_IND,
            ControlPdu::UnknownRsp { .. } => OP_UNKNOWN_RSP,
            ControlPdu::Other { opcode, .. } => *opcode,
        }
    }

    pub fn kind(&self) -> LlPduKind {
        control_kind(self.opcode())
    }
}

fn control_kind(opcode: u8) -> LlPduKind {
    match opcode {
        OP_CONNECTION_PARAM_REQ => LlPduKind::LlConnectionParamReq,
        OP_CONNECTION_PARAM_RSP => LlPduKind::LlConnectionParamRsp,
        OP_FEATURE_REQ => LlPduKind::LlFeatureReq,
        OP_FEATURE_RSP => LlPduKind::LlFeatureRsp,
        OP_LENGTH_REQ => LlPduKind::LlLengthReq,
        OP_LENGTH_RSP => LlPduKind::LlLengthRsp,
        OP_ENC_REQ => LlPduKind::LlEncReq,
        OP_ENC_RSP => LlPduKind::LlEncRsp,
        OP_TERMINATE_IND => LlPduKind::LlTerminateInd,
        OP_REJECT_IND => LlPduKind::LlRejectInd,
        OP_REJECT_EXT_IND => LlPduKind::LlRejectExtInd,
        OP_UNKNOWN_RSP => LlPduKind::LlUnknownRsp,
        _ => LlPduKind::Unknown,
    }
}

/// Classifies a PDU from its header (and, for control PDUs, the opcode byte)
/// without decoding the body. Returns `None` if even those bytes are missing.
pub fn ll_kind_from_header(raw: &[u8], channel: LlChannel) -> Option<LlPduKind> {
    let h0 = *raw.first()?;
    let len = *raw.get(1)?;
    Some(match channel {
        LlChannel::Advertising => match h0 & 0x0f {
            ADV_IND => LlPduKind::AdvInd,
            SCAN_REQ => LlPduKind::ScanReq,
            SCAN_RSP => LlPduKind::ScanRsp,
            CONNECT_IND => LlPduKind::ConnectInd,
            _ => LlPduKind::Unknown,
        },
        LlChannel::Data => match h0 & 0x03 {
            LLID_CONTINUATION if len == 0 => LlPduKind::Empty,
            LLID_START => LlPduKind::DataL2cap,
            LLID_CONTROL => control_kind(*raw.get(2)?),
            _ => LlPduKind::Unknown,
        },
    })
}

/// Decodes one link-layer PDU (2-byte header followed by its payload).
///
/// The header length must equal the number of payload bytes present, and
/// fixed-size bodies must have exactly their size.
pub fn decode_ll(raw: &[u8], channel: LlChannel) -> Result<LinkLayerPdu> {
    let mut r = Reader::new(raw);
    let h0 = r.u8()?;
    let declared = r.u8()? as usize;
    if declared > MAX_PAYLOAD {
        return Err(PduError::OversizedPdu(declared));
    }
    if r.remaining() < declared {
        return Err(PduError::TruncatedPdu {
            needed: declared + 2,
            available: raw.len(),
        });
    }
    if r.remaining() > declared {
        return Err(PduError::LengthMismatch {
            declared,
            actual: r.remaining(),
        });
    }
    let payload = r.rest();
    match channel {
        LlChannel::Advertising => {
            if h0 & 0x10 != 0 {
                return Err(PduError::IllegalFieldValue {
                    field: "adv_header_rfu",
                    value: u64::from(h0),
                });
            }
            let flags = AdvFlags {
                ch_sel: h0 & 0x20 != 0,
                tx_add: h0 & 0x40 != 0,
                rx_add: h0 & 0x80 != 0,
            };
            let body = decode_adv_body(h0 & 0x0f, payload)?;
            Ok(LinkLayerPdu::Advertising { flags, body })
        }
        LlChannel::Data => {
            if h0 & 0xc0 != 0 {
                return Err(PduError::IllegalFieldValue {
                    field: "data_header_rfu",
                    value: u64::from(h0),
                });
            }
            let flags = DataFlags {
                nesn: h0 & 0x04 != 0,
                sn: h0 & 0x08 != 0,
                md: h0 & 0x10 != 0,
                cp: h0 & 0x20 != 0,
            };
            if flags.cp {
                // A CTEInfo byte would follow the length; not supported.
                return Err(PduError::IllegalFieldValue {
                    field: "cp",
                    value: 1,
                });
            }
            let body = decode_data_body(h0 & 0x03, payload)?;
            Ok(LinkLayerPdu::Data { flags, body })
        }
    }
}

fn check_range(field: &'static str, len: usize, min: usize, max: usize) -> Result<()> {
    if len < min {
        return Err(PduError::TruncatedPdu {
            needed: min + 2,
            available: len + 2,
        });
    }
    if len > max {
        return Err(PduError::IllegalFieldValue {
            field,
            value: len as u64,
        });
    }
    Ok(())
}

fn decode_adv_body(pdu_type: u8, p: &[u8]) -> Result<AdvBody> {
    let mut r = Reader::new(p);
    match pdu_type {
        ADV_IND => {
            check_range("adv_ind_length", p.len(), 6, 37)?;
            let adv_address = r.address()?;
            Ok(AdvBody::AdvInd {
                adv_address,
                data: r.rest().to_vec(),
            })
        }
        SCAN_RSP => {
            check_range("scan_rsp_length", p.len(), 6, 37)?;
            let adv_address = r.address()?;
            Ok(AdvBody::ScanRsp {
                adv_address,
                data: r.rest().to_vec(),
            })
        }
        SCAN_REQ => {
            check_range("scan_req_length", p.len(), 12, 12)?;
            Ok(AdvBody::ScanReq {
                scan_address: r.address()?,
                adv_address: r.address()?,
            })
        }
        CONNECT_IND => {
            check_range("connect_ind_length", p.len(), 34, 34)?;
            let c = ConnectInd {
                initiator_address: r.address()?,
                advertiser_address: r.address()?,
                access_address: r.u32()?,
                crc_init: r.u24()?,
                win_size: r.u8()?,
                win_offset: r.u16()?,
                interval: r.u16()?,
                latency: r.u16()?,
                timeout: r.u16()?,
                channel_map: r.u40()?,
                hop: 0,
                sca: 0,
            };
            let hs = r.u8()?;
            let c = ConnectInd {
                hop: hs & 0x1f,
                sca: hs >> 5,
                ..c
            };
            validate_connect_ind(&c)?;
            Ok(AdvBody::ConnectInd(c))
        }
        _ => Ok(AdvBody::Unknown {
            pdu_type,
            payload: p.to_vec(),
        }),
    }
}

fn validate_connect_ind(c: &ConnectInd) -> Result<()> {
    if c.channel_map & !CHANNEL_MAP_DATA_MASK != 0 {
        return Err(PduError::IllegalFieldValue {
            field: "channel_map",
            value: c.channel_map,
        });
    }
    if c.channel_map.count_ones() < 1 {
        return Err(PduError::IllegalFieldValue {
            field: "channel_map",
            value: c.channel_map,
        });
    }
    if !(5..=16).contains(&c.hop) {
        return Err(PduError::IllegalFieldValue {
            field: "hop",
            value: u64::from(c.hop),
        });
    }
    Ok(())
}

/// Raw CONNECT_IND fields read without validation, for policy evaluation of
/// PDUs the strict decoder refuses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConnectIndFields {
    pub interval: u16,
    pub channel_map: u64,
    pub hop: u8,
}

/// Reads interval, channel map and hop from a raw CONNECT_IND (header
/// included) when enough bytes are present, whatever their values.
pub fn connect_ind_fields(raw: &[u8]) -> Option<ConnectIndFields> {
    if raw.len() < 36 || raw[0] & 0x0f != CONNECT_IND {
        return None;
    }
    let interval = u16::from_le_bytes([raw[24], raw[25]]);
    let mut chm = [0u8; 8];
    chm[..5].copy_from_slice(&raw[30..35]);
    Some(ConnectIndFields {
        interval,
        channel_map: u64::from_le_bytes(chm),
        hop: raw[35] & 0x1f,
    })
}

fn decode_data_body(llid: u8, p: &[u8]) -> Result<DataBody> {
    match llid {
        LLID_CONTINUATION if p.is_empty() => Ok(DataBody::Empty),
        LLID_START => Ok(DataBody::L2cap(decode_l2cap(p)?)),
        LLID_CONTROL => Ok(DataBody::Control(decode_control(p)?)),
        _ => Ok(DataBody::Unknown {
            llid,
            payload: p.to_vec(),
        }),
    }
}

fn fixed(opcode_name: &'static str, body: &[u8], size: usize) -> Result<()> {
    if body.len() < size {
        return Err(PduError::TruncatedPdu {
            needed: size + 3,
            available: body.len() + 3,
        });
    }
    if body.len() > size {
        return Err(PduError::IllegalFieldValue {
            field: opcode_name,
            value: body.len() as u64,
        });
    }
    Ok(())
}

fn decode_conn_params(r: &mut Reader<'_>) -> Result<ConnParams> {
    let mut c = ConnParams {
        interval_min: r.u16()?,
        interval_max: r.u16()?,
        latency: r.u16()?,
        timeout: r.u16()?,
        preferred_periodicity: r.u8()?,
        reference_conn_event_count: r.u16()?,
        offsets: [0; 6],
    };
    for o in c.offsets.iter_mut() {
        *o = r.u16()?;
    }
    Ok(c)
}

fn decode_length_params(r: &mut Reader<'_>) -> Result<LengthParams> {
    Ok(LengthParams {
        max_rx_octets: r.u16()?,
        max_rx_time: r.u16()?,
        max_tx_octets: r.u16()?,
        max_tx_time: r.u16()?,
    })
}

fn decode_control(p: &[u8]) -> Result<ControlPdu> {
    let mut r = Reader::new(p);
    let opcode = r.u8()?;
    let body = &p[1..];
    let c = match opcode {
        OP_CONNECTION_PARAM_REQ | OP_CONNECTION_PARAM_RSP => {
            fixed("conn_param_length", body, 23)?;
            let params = decode_conn_params(&mut r)?;
            if opcode == OP_CONNECTION_PARAM_REQ {
                ControlPdu::ConnectionParamReq(params)
            } else {
                ControlPdu::ConnectionParamRsp(params)
            }
        }
        OP_FEATURE_REQ | OP_FEATURE_RSP => {
            fixed("feature_length", body, 8)?;
            let features = r.u64()?;
            if opcode == OP_FEATURE_REQ {
                ControlPdu::FeatureReq { features }
            } else {
                ControlPdu::FeatureRsp { features }
            }
        }
        OP_LENGTH_REQ | OP_LENGTH_RSP => {
            fixed("length_length", body, 8)?;
            let params = decode_length_params(&mut r)?;
            if opcode == OP_LENGTH_REQ {
                ControlPdu::LengthReq(params)
            } else {
                ControlPdu::LengthRsp(params)
            }
        }
        OP_ENC_REQ => {
            fixed("enc_req_length", body, 22)?;
            ControlPdu::EncReq {
                rand: r.u64()?,
                ediv: r.u16()?,
                skd_m: r.u64()?,
                iv_m: r.u32()?,
            }
        }
        OP_ENC_RSP => {
            fixed("enc_rsp_length", body, 12)?;
            ControlPdu::EncRsp {
                skd_s: r.u64()?,
                iv_s: r.u32()?,
            }
        }
        OP_TERMINATE_IND => {
            fixed("terminate_length", body, 1)?;
            ControlPdu::TerminateInd {
                error_code: r.u8()?,
            }
        }
        OP_REJECT_IND => {
            fixed("reject_length", body, 1)?;
            ControlPdu::RejectInd {
                error_code: r.u8()?,
            }
        }
        OP_REJECT_EXT_IND => {
            fixed("reject_ext_length", body, 2)?;
            ControlPdu::RejectExtInd {
                reject_opcode: r.u8()?,
                error_code: r.u8()?,
            }
        }
        OP_UNKNOWN_RSP => {
            fixed("unknown_rsp_length", body, 1)?;
            ControlPdu::UnknownRsp {
                unknown_type: r.u8()?,
            }
        }
        _ => ControlPdu::Other {
            opcode,
            body: body.to_vec(),
        },
    };
    Ok(c)
}

fn decode_l2cap(p: &[u8]) -> Result<L2capFrame> {
    let mut r = Reader::new(p);
    let len = r.u16()? as usize;
    let cid = r.u16()?;
    if len != r.remaining() {
        return Err(PduError::IllegalFieldValue {
            field: "l2cap_length",
            value: len as u64,
        });
    }
    let body = r.rest();
    let payload = match cid {
        CID_SMP => L2capPayload::Smp(decode_smp(body)?),
        CID_ATT => L2capPayload::Att(AttPdu::decode(body)?),
        _ => L2capPayload::Raw(body.to_vec()),
    };
    Ok(L2capFrame { cid, payload })
}

/// Encodes a PDU to header + payload bytes. Values the decoder would refuse
/// are refused here too, so encoded output always decodes.
pub fn encode_ll(pdu: &LinkLayerPdu) -> Result<Vec<u8>> {
    let (h0, payload) = match pdu {
        LinkLayerPdu::Advertising { flags, body } => {
            let (ty, payload) = encode_adv_body(body)?;
            let mut h0 = ty;
            if flags.ch_sel {
                h0 |= 0x20;
            }
            if flags.tx_add {
                h0 |= 0x40;
            }
            if flags.rx_add {
                h0 |= 0x80;
            }
            (h0, payload)
        }
        LinkLayerPdu::Data { flags, body } => {
            if flags.cp {
                return Err(PduError::IllegalFieldValue {
                    field: "cp",
                    value: 1,
                });
            }
            let (llid, payload) = encode_data_body(body)?;
            let mut h0 = llid;
            if flags.nesn {
                h0 |= 0x04;
            }
            if flags.sn {
                h0 |= 0x08;
            }
            if flags.md {
                h0 |= 0x10;
            }
            (h0, payload)
        }
    };
    if payload.len() > MAX_PAYLOAD {
        return Err(PduError::OversizedPdu(payload.len()));
    }
    let mut out = Vec::with_capacity(payload.len() + 2);
    out.push(h0);
    out.push(payload.len() as u8);
    out.extend_from_slice(&payload);
    Ok(out)
}

fn encode_adv_body(body: &AdvBody) -> Result<(u8, Vec<u8>)> {
    let mut out = Vec::new();
    let ty = match body {
        AdvBody::AdvInd { adv_address, data } | AdvBody::ScanRsp { adv_address, data } => {
            if data.len() > 31 {
                return Err(PduError::IllegalFieldValue {
                    field: "adv_data_length",
                    value: data.len() as u64,
                });
            }
            out.extend_from_slice(&adv_address.to_wire());
            out.extend_from_slice(data);
            if matches!(body, AdvBody::AdvInd { .. }) {
                ADV_IND
            } else {
                SCAN_RSP
            }
        }
        AdvBody::ScanReq {
            scan_address,
            adv_address,
        } => {
            out.extend_from_slice(&scan_address.to_wire());
            out.extend_from_slice(&adv_address.to_wire());
            SCAN_REQ
        }
        AdvBody::ConnectInd(c) => {
            validate_connect_ind(c).map_err(|e| PduError::InvariantViolation(e.to_string()))?;
            if c.crc_init > 0x00ff_ffff || c.sca > 7 {
                return Err(PduError::InvariantViolation(
                    "crc_init or sca out of range".into(),
                ));
            }
            out.extend_from_slice(&c.initiator_address.to_wire());
            out.extend_from_slice(&c.advertiser_address.to_wire());
            out.extend_from_slice(&c.access_address.to_le_bytes());
            out.extend_from_slice(&c.crc_init.to_le_bytes()[..3]);
            out.push(c.win_size);
            out.extend_from_slice(&c.win_offset.to_le_bytes());
            out.extend_from_slice(&c.interval.to_le_bytes());
            out.extend_from_slice(&c.latency.to_le_bytes());
            out.extend_from_slice(&c.timeout.to_le_bytes());
            out.extend_from_slice(&c.channel_map.to_le_bytes()[..5]);
            out.push(c.hop | (c.sca << 5));
            CONNECT_IND
        }
        AdvBody::Unknown { pdu_type, payload } => {
            if matches!(*pdu_type, ADV_IND | SCAN_REQ | SCAN_RSP | CONNECT_IND) || *pdu_type > 0x0f
            {
                return Err(PduError::InvariantViolation(format!(
                    "opaque advertising PDU with reserved type {pdu_type:#x}"
                )));
            }
            out.extend_from_slice(payload);
            *pdu_type
        }
    };
    Ok((ty, out))
}

fn encode_data_body(body: &DataBody) -> Result<(u8, Vec<u8>)> {
    match body {
        DataBody::Empty => Ok((LLID_CONTINUATION, Vec::new())),
        DataBody::Control(c) => Ok((LLID_CONTROL, encode_control(c)?)),
        DataBody::L2cap(f) => Ok((LLID_START, encode_l2cap(f)?)),
        DataBody::Unknown { llid, payload } => {
            let ok = match *llid {
                LLID_CONTINUATION => !payload.is_empty(),
                0 => true,
                _ => false,
            };
            if !ok {
                return Err(PduError::InvariantViolation(format!(
                    "opaque data PDU with LLID {llid}"
                )));
            }
            Ok((*llid, payload.clone()))
        }
    }
}

fn encode_conn_params(out: &mut Vec<u8>, c: &ConnParams) {
    out.extend_from_slice(&c.interval_min.to_le_bytes());
    out.extend_from_slice(&c.interval_max.to_le_bytes());
    out.extend_from_slice(&c.latency.to_le_bytes());
    out.extend_from_slice(&c.timeout.to_le_bytes());
    out.push(c.preferred_periodicity);
    out.extend_from_slice(&c.reference_conn_event_count.to_le_bytes());
    for o in c.offsets {
        out.extend_from_slice(&o.to_le_bytes());
    }
}

fn encode_length_params(out: &mut Vec<u8>, l: &LengthParams) {
    for v in [
        l.max_rx_octets,
        l.max_rx_time,
        l.max_tx_octets,
        l.max_tx_time,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn encode_control(c: &ControlPdu) -> Result<Vec<u8>> {
    let mut out = vec![c.opcode()];
    match c {
        ControlPdu::ConnectionParamReq(p) | ControlPdu::ConnectionParamRsp(p) => {
            encode_conn_params(&mut out, p)
        }
        ControlPdu::FeatureReq { features } | ControlPdu::FeatureRsp { features } => {
            out.extend_from_slice(&features.to_le_bytes())
        }
        ControlPdu::LengthReq(l) | ControlPdu::LengthRsp(l) => encode_length_params(&mut out, l),
        ControlPdu::EncReq {
            rand,
            ediv,
            skd_m,
            iv_m,
        } => {
            out.extend_from_slice(&rand.to_le_bytes());
            out.extend_from_slice(&ediv.to_le_bytes());
            out.extend_from_slice(&skd_m.to_le_bytes());
            out.extend_from_slice(&iv_m.to_le_bytes());
        }
        ControlPdu::EncRsp { skd_s, iv_s } => {
            out.extend_from_slice(&skd_s.to_le_bytes());
            out.extend_from_slice(&iv_s.to_le_bytes());
        }
        ControlPdu::TerminateInd { error_code } | ControlPdu::RejectInd { error_code } => {
            out.push(*error_code)
        }
        ControlPdu::RejectExtInd {
            reject_opcode,
            error_code,
        } => {
            out.push(*reject_opcode);
            out.push(*error_code);
        }
        ControlPdu::UnknownRsp { unknown_type } => out.push(*unknown_type),
        ControlPdu::Other { opcode, body } => {
            if control_kind(*opcode) != LlPduKind::Unknown {
                return Err(PduError::InvariantViolation(format!(
                    "opaque control PDU with interpreted opcode {opcode:#x}"
                )));
            }
            out.extend_from_slice(body);
        }
    }
    Ok(out)
}

fn encode_l2cap(f: &L2capFrame) -> Result<Vec<u8>> {
    let body = match &f.payload {
        L2capPayload::Smp(s) => {
            if f.cid != CID_SMP {
                return Err(PduError::InvariantViolation("SMP payload off CID 6".into()));
            }
            encode_smp(s)?
        }
        L2capPayload::Att(a) => {
            if f.cid != CID_ATT {
                return Err(PduError::InvariantViolation("ATT payload off CID 4".into()));
            }
            a.encode()?
        }
        L2capPayload::Raw(b) => {
            if f.cid == CID_SMP || f.cid == CID_ATT {
                return Err(PduError::InvariantViolation(
                    "opaque payload on an interpreted CID".into(),
                ));
            }
            b.clone()
        }
    };
    let mut out = Vec::with_capacity(body.len() + 4);
    out.extend_from_slice(&(body.len() as u16).to_le_bytes());
    out.extend_from_slice(&f.cid.to_le_bytes());
    out.extend_from_slice(&body);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pdu::hex_decode;

    fn h(s: &str) -> Vec<u8> {
        hex_decode(s).unwrap()
    }

    #[test]
    fn connect_ind_reference() {
        let raw = h("0522665544332211ffeeddccbbaa284c655056341202030018000000f401ffffffff1f07");
        let pdu = decode_ll(&raw, LlChannel::Advertising).unwrap();
        let LinkLayerPdu::Advertising {
            body: AdvBody::ConnectInd(c),
            ..
        } = &pdu
        else {
            panic!("{pdu:?}")
        };
        assert_eq!(c.interval, 24);
        assert_eq!(c.hop, 7);
        assert_eq!(c.channel_map, 0x1f_ffff_ffff);
        assert_eq!(c.crc_init, 0x123456);
        assert_eq!(encode_ll(&pdu).unwrap(), raw);
        let f = connect_ind_fields(&raw).unwrap();
        assert_eq!((f.interval, f.channel_map, f.hop), (24, 0x1f_ffff_ffff, 7));
    }

    #[test]
    fn connect_ind_invalid_fields() {
        let zero = h("0522665544332211ffeeddccbbaa284c655056341202030000000000f401ffffffff1f07");
        let pdu = decode_ll(&zero, LlChannel::Advertising).unwrap();
        let LinkLayerPdu::Advertising {
            body: AdvBody::ConnectInd(c),
            ..
        } = pdu
        else {
            panic!()
        };
        assert_eq!(c.interval, 0);
        let mut hop = h("0522665544332211ffeeddccbbaa284c655056341202030018000000f401ffffffff1f07");
        hop[35] = 0x11;
        assert!(matches!(
            decode_ll(&hop, LlChannel::Advertising),
            Err(PduError::IllegalFieldValue { field: "hop", .. })
        ));
        let mut chm = hop.clone();
        chm[35] = 0x07;
        chm[34] = 0xff;
        assert!(matches!(
            decode_ll(&chm, LlChannel::Advertising),
            Err(PduError::IllegalFieldValue {
                field: "channel_map",
                ..
            })
        ));
    }

    #[test]
    fn length_checks() {
        assert!(matches!(
            decode_ll(&[0x03, 0x05, 0x08], LlChannel::Data),
            Err(PduError::TruncatedPdu { .. })
        ));
        assert!(matches!(
            decode_ll(&[0x01, 0x00, 0x00], LlChannel::Data),
            Err(PduError::LengthMismatch { .. })
        ));
        let mut big = vec![0x01, 252];
        big.extend(std::iter::repeat_n(0, 252));
        assert_eq!(
            decode_ll(&big, LlChannel::Data),
            Err(PduError::OversizedPdu(252))
        );
        assert!(decode_ll(&[], LlChannel::Data).is_err());
    }

    #[test]
    fn scan_req_must_be_twelve_bytes() {
        let mut raw = h("030c665544332211ffeeddccbbaa");
        assert!(decode_ll(&raw, LlChannel::Advertising).is_ok());
        raw[1] = 13;
        raw.push(0);
        assert!(decode_ll(&raw, LlChannel::Advertising).is_err());
    }

    #[test]
    fn l2cap_length_mismatch_rejected() {
        let raw = h("020907000400010a100006");
        assert!(matches!(
            decode_ll(&raw, LlChannel::Data),
            Err(PduError::IllegalFieldValue {
                field: "l2cap_length",
                ..
            })
        ));
    }

    #[test]
    fn header_kind_matches_decoded_kind() {
        for (raw, ch) in [
            (h("030908ff01000000000000"), LlChannel::Data),
            (h("4009ffeeddccbbaa020106"), LlChannel::Advertising),
            (h("0100"), LlChannel::Data),
            (h("03020213"), LlChannel::Data),
        ] {
            let pdu = decode_ll(&raw, ch).unwrap();
            assert_eq!(ll_kind_from_header(&raw, ch), Some(pdu.kind()));
        }
    }
}
