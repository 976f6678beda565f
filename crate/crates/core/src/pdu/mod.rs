//! Bit-exact codecs for the Link Layer, L2CAP, SMP and ATT PDUs the engine
//! inspects.
//!
//! Traces carry deframed link-layer PDUs (header + payload). Access address,
//! preamble, CRC and whitening never reach this module. Advertising- and
//! data-channel headers share no distinguishing bits, so [`decode_ll`] takes
//! the [`LlChannel`] the PDU was received on; the kind is then derivable from
//! the two header bytes alone (see [`ll_kind_from_header`]).

mod att;
mod ll;
mod smp;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use att::{att_kind, AttErrorResponse, AttPdu, ERROR_PIN_OR_KEY_MISSING};
pub use ll::{
    connect_ind_fields, decode_ll, encode_ll, ll_kind_from_header, AdvBody, AdvFlags, ConnParams,
    ConnectInd, ConnectIndFields, ControlPdu, DataBody, DataFlags, L2capFrame, L2capPayload,
    LengthParams, LinkLayerPdu, LlChannel, LlPduKind, CHANNEL_MAP_DATA_MASK, CID_ATT,
    CID_LE_SIGNALING, CID_SMP, MAX_PAYLOAD,
};
pub use smp::{
    association_model, decode_smp, encode_smp, smp_kind, AssociationModel, IoCapability,
    PairingFeatures, SmpOpcode, SmpPdu, AUTH_REQ_MITM, AUTH_REQ_SC,
};

/// Errors produced by the PDU codecs.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PduError {
    #[error("truncated PDU: need {needed} bytes, {available} available")]
    TruncatedPdu { needed: usize, available: usize },
    #[error("oversized PDU: payload of {0} bytes exceeds {MAX_PAYLOAD}")]
    OversizedPdu(usize),
    #[error("declared length {declared} does not match {actual} payload bytes")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("illegal value {value:#x} for field `{field}`")]
    IllegalFieldValue { field: &'static str, value: u64 },
    #[error("invariant violated: {0}")]
    InvariantViolation(String),
}

pub type Result<T> = std::result::Result<T, PduError>;

/// A 48-bit device address, stored most-significant byte first (the order it
/// is usually printed in). On the wire BLE addresses are little-endian.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct Address(pub [u8; 6]);

impl Address {
    pub fn from_wire(bytes: &[u8]) -> Address {
        let mut a = [0u8; 6];
        for (i, b) in bytes.iter().take(6).enumerate() {
            a[5 - i] = *b;
        }
        Address(a)
    }

    pub fn to_wire(self) -> [u8; 6] {
        let mut w = self.0;
        w.reverse();
        w
    }

    pub fn to_u64(self) -> u64 {
        self.0
            .iter()
            .fold(0u64, |acc, b| (acc << 8) | u64::from(*b))
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

impl fmt::Debug for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Address({self})")
    }
}

impl FromStr for Address {
    type Err = PduError;

    /// Accepts `aabbccddeeff` or `aa:bb:cc:dd:ee:ff`.
    fn from_str(s: &str) -> Result<Address> {
        let digits: String = s.chars().filter(|c| *c != ':').collect();
        let bytes = hex_decode(&digits)
            .ok_or_else(|| PduError::InvariantViolation(format!("bad address `{s}`")))?;
        if bytes.len() != 6 {
            return Err(PduError::InvariantViolation(format!("bad address `{s}`")));
        }
        let mut a = [0u8; 6];
        a.copy_from_slice(&bytes);
        Ok(Address(a))
    }
}

/// Unified PDU kind codes exposed to policy programs through the context
/// block. The numeric values are part of the policy ABI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[repr(u16)]
pub enum PduKind {
    AdvInd = 0x01,
    ScanReq = 0x02,
    ScanRsp = 0x03,
    ConnectInd = 0x04,
    LlConnectionParamReq = 0x10,
    LlConnectionParamRsp = 0x11,
    LlFeatureReq = 0x12,
    LlFeatureRsp = 0x13,
    LlLengthReq = 0x14,
    LlLengthRsp = 0x15,
    LlEncReq = 0x16,
    LlEncRsp = 0x17,
    LlTerminateInd = 0x18,
    LlRejectInd = 0x19,
    LlRejectExtInd = 0x1a,
    LlUnknownRsp = 0x1b,
    Empty = 0x20,
    DataL2cap = 0x21,
    SmpPairingRequest = 0x41,
    SmpPairingResponse = 0x42,
    SmpPairingConfirm = 0x43,
    SmpPairingRandom = 0x44,
    SmpPairingFailed = 0x45,
    SmpEncryptionInformation = 0x46,
    SmpIdentityInformation = 0x48,
    SmpPublicKey = 0x4c,
    SmpDhKeyCheck = 0x4d,
    SmpUnknown = 0x4f,
    AttErrorResponse = 0x61,
    AttReadRequest = 0x6a,
    AttReadResponse = 0x6b,
    AttWriteRequest = 0x72,
    AttWriteResponse = 0x73,
    AttWriteCommand = 0x7e,
    AttOther = 0x7f,
    Unknown = 0xff,
}

impl PduKind {
    pub const ALL: [PduKind; 36] = [
        PduKind::AdvInd,
        PduKind::ScanReq,
        PduKind::ScanRsp,
        PduKind::ConnectInd,
        PduKind::LlConnectionParamReq,
        PduKind::LlConnectionParamRsp,
        PduKind::LlFeatureReq,
        PduKind::LlFeatureRsp,
        PduKind::LlLengthReq,
        PduKind::LlLengthRsp,
        PduKind::LlEncReq,
        PduKind::LlEncRsp,
        PduKind::LlTerminateInd,
        PduKind::LlRejectInd,
        PduKind::LlRejectExtInd,
        PduKind::LlUnknownRsp,
        PduKind::Empty,
        PduKind::DataL2cap,
        PduKind::SmpPairingRequest,
        PduKind::SmpPairingResponse,
        PduKind::SmpPairingConfirm,
        PduKind::SmpPairingRandom,
        PduKind::SmpPairingFailed,
        PduKind::SmpEncryptionInformation,
        PduKind::SmpIdentityInformation,
        PduKind::SmpPublicKey,
        PduKind::SmpDhKeyCheck,
        PduKind::SmpUnknown,
        PduKind::AttErrorResponse,
        PduKind::AttReadRequest,
        PduKind::AttReadResponse,
        PduKind::AttWriteRequest,
        PduKind::AttWriteResponse,
        PduKind::AttWriteCommand,
        PduKind::AttOther,
        PduKind::Unknown,
    ];

    pub fn code(self) -> u64 {
        self as u16 as u64
    }

    pub fn name(self) -> &'static str {
        match self {
            PduKind::AdvInd => "ADV_IND",
            PduKind::ScanReq => "SCAN_REQ",
            PduKind::ScanRsp => "SCAN_RSP",
            PduKind::ConnectInd => "CONNECT_IND",
            PduKind::LlConnectionParamReq => "LL_CONNECTION_PARAM_REQ",
            PduKind::LlConnectionParamRsp => "LL_CONNECTION_PARAM_RSP",
            PduKind::LlFeatureReq => "LL_FEATURE_REQ",
            PduKind::LlFeatureRsp => "LL_FEATURE_RSP",
            PduKind::LlLengthReq => "LL_LENGTH_REQ",
            PduKind::LlLengthRsp => "LL_LENGTH_RSP",
            PduKind::LlEncReq => "LL_ENC_REQ",
            PduKind::LlEncRsp => "LL_ENC_RSP",
            PduKind::LlTerminateInd => "LL_TERMINATE_IND",
            PduKind::LlRejectInd => "LL_REJECT_IND",
            PduKind::LlRejectExtInd => "LL_REJECT_EXT_IND",
            PduKind::LlUnknownRsp => "LL_UNKNOWN_RSP",
            PduKind::Empty => "EMPTY",
            PduKind::DataL2cap => "DATA_L2CAP",
            PduKind::SmpPairingRequest => "SMP_PAIRING_REQUEST",
            PduKind::SmpPairingResponse => "SMP_PAIRING_RESPONSE",
            PduKind::SmpPairingConfirm => "SMP_PAIRING_CONFIRM",
            PduKind::SmpPairingRandom => "SMP_PAIRING_RANDOM",
            PduKind::SmpPairingFailed => "SMP_PAIRING_FAILED",
            PduKind::SmpEncryptionInformation => "SMP_ENCRYPTION_INFORMATION",
            PduKind::SmpIdentityInformation => "SMP_IDENTITY_INFORMATION",
            PduKind::SmpPublicKey => "SMP_PUBLIC_KEY",
            PduKind::SmpDhKeyCheck => "SMP_DHKEY_CHECK",
            PduKind::SmpUnknown => "SMP_UNKNOWN",
            PduKind::AttErrorResponse => "ATT_ERROR_RSP",
            PduKind::AttReadRequest => "ATT_READ_REQ",
            PduKind::AttReadResponse => "ATT_READ_RSP",
            PduKind::AttWriteRequest => "ATT_WRITE_REQ",
            PduKind::AttWriteResponse => "ATT_WRITE_RSP",
            PduKind::AttWriteCommand => "ATT_WRITE_CMD",
            PduKind::AttOther => "ATT_OTHER",
            PduKind::Unknown => "UNKNOWN",
        }
    }

    pub fn from_name(name: &str) -> Option<PduKind> {
        PduKind::ALL.iter().copied().find(|k| k.name() == name)
    }
}

impl fmt::Display for PduKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// The most specific kind of a decoded link-layer PDU: SMP and ATT carried
/// over L2CAP report their own kind rather than `DATA_L2CAP`.
pub fn pdu_kind_of_ll(pdu: &LinkLayerPdu) -> PduKind {
    match pdu {
        LinkLayerPdu::Data {
            body: DataBody::L2cap(frame),
            ..
        } => match &frame.payload {
            L2capPayload::Smp(smp) => smp.kind(),
            L2capPayload::Att(att) => att.kind(),
            L2capPayload::Raw(_) => PduKind::DataL2cap,
        },
        other => other.kind().into(),
    }
}

pub(crate) fn hex_decode(s: &str) -> Option<Vec<u8>> {
    let s = s.trim();
    if !s.len().is_multiple_of(2) {
        return None;
    }
    (0..s.len())
        .step_by(2)
        .map(|i| s.get(i..i + 2).and_then(|b| u8::from_str_radix(b, 16).ok()))
        .collect()
}

pub(crate) fn hex_encode(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Public hex helpers shared by the file formats.
pub mod hex {
    pub fn decode(s: &str) -> Option<Vec<u8>> {
        super::hex_decode(s)
    }

    pub fn encode(bytes: &[u8]) -> String {
        super::hex_encode(bytes)
    }
}

/// Little-endian cursor over a byte slice. Every read is bounds-checked and
/// reports how many bytes it needed.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(PduError::TruncatedPdu {
                needed: self.pos + n,
                available: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn rest(&mut self) -> &'a [u8] {
        let s = &self.buf[self.pos..];
        self.pos = self.buf.len();
        s
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub fn u24(&mut self) -> Result<u32> {
        let b = self.take(3)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], 0]))
    }

    pub fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn u40(&mut self) -> Result<u64> {
        let b = self.take(5)?;
        Ok(u64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], 0, 0, 0]))
    }

    pub fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }

    pub fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut a = [0u8; N];
        a.copy_from_slice(self.take(N)?);
        Ok(a)
    }

    pub fn address(&mut self) -> Result<Address> {
        Ok(Address::from_wire(self.take(6)?))
    }
}
