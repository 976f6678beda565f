use serde::{Deserialize, Serialize};

use super::{PduError, PduKind, Reader, Result};

pub const AUTH_REQ_MITM: u8 = 0x04;
pub const AUTH_REQ_SC: u8 = 0x08;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SmpOpcode {
    PairingRequest,
    PairingResponse,
    PairingConfirm,
    PairingRandom,
    PairingFailed,
    EncryptionInformation,
    IdentityInformation,
    PublicKey,
    DhKeyCheck,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum IoCapability {
    DisplayOnly = 0,
    DisplayYesNo = 1,
    KeyboardOnly = 2,
    NoInputNoOutput = 3,
    KeyboardDisplay = 4,
}

impl IoCapability {
    pub fn from_u8(v: u8) -> Option<IoCapability> {
        Some(match v {
            0 => IoCapability::DisplayOnly,
            1 => IoCapability::DisplayYesNo,
            2 => IoCapability::KeyboardOnly,
            3 => IoCapability::NoInputNoOutput,
            4 => IoCapability::KeyboardDisplay,
            _ => return None,
        })
    }
}

/// Body of a Pairing Request or Pairing Response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairingFeatures {
    pub io_capability: IoCapability,
    pub oob_flag: bool,
    pub auth_req: u8,
    pub max_enc_key_size: u8,
    pub initiator_key_dist: u8,
    pub responder_key_dist: u8,
}

impl PairingFeatures {
    pub fn mitm(&self) -> bool {
        self.auth_req & AUTH_REQ_MITM != 0
    }

    pub fn secure_connections(&self) -> bool {
        self.auth_req & AUTH_REQ_SC != 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum SmpPdu {
    PairingRequest(PairingFeatures),
    PairingResponse(PairingFeatures),
    PairingConfirm([u8; 16]),
    PairingRandom([u8; 16]),
    PairingFailed {
        reason: u8,
    },
    EncryptionInformation {
        ltk: [u8; 16],
    },
    IdentityInformation {
        irk: [u8; 16],
    },
    PublicKey {
        x: [u8; 32],
        y: [u8; 32],
    },
    DhKeyCheck([u8; 16]),
    /// Any other opcode; the body is kept verbatim.
    Unknown {
        opcode: u8,
        body: Vec<u8>,
    },
}

const OP_PAIRING_REQUEST: u8 = 0x01;
const OP_PAIRING_RESPONSE: u8 = 0x02;
const OP_PAIRING_CONFIRM: u8 = 0x03;
const OP_PAIRING_RANDOM: u8 = 0x04;
const OP_PAIRING_FAILED: u8 = 0x05;
const OP_ENCRYPTION_INFORMATION: u8 = 0x06;
const OP_IDENTITY_INFORMATION: u8 = 0x08;
const OP_PUBLIC_KEY: u8 = 0x0c;
const OP_DHKEY_CHECK: u8 = 0x0d;

fn opcode_of(op: u8) -> SmpOpcode {
    match op {
        OP_PAIRING_REQUEST => SmpOpcode::PairingRequest,
        OP_PAIRING_RESPONSE => SmpOpcode::PairingResponse,
        OP_PAIRING_CONFIRM => SmpOpcode::PairingConfirm,
        OP_PAIRING_RANDOM => SmpOpcode::PairingRandom,
        OP_PAIRING_FAILED => SmpOpcode::PairingFailed,
        OP_ENCRYPTION_INFORMATION => SmpOpcode::EncryptionInformation,
        OP_IDENTITY_INFORMATION => SmpOpcode::IdentityInformation,
        OP_PUBLIC_KEY => SmpOpcode::PublicKey,
        OP_DHKEY_CHECK => SmpOpcode::DhKeyCheck,
        _ => SmpOpcode::Unknown,
    }
}

impl SmpPdu {
    pub fn opcode(&self) -> SmpOpcode {
        opcode_of(self.opcode_byte())
    }

    pub fn opcode_byte(&self) -> u8 {
        match self {
            SmpPdu::PairingRequest(_) => OP_PAIRING_REQUEST,
            SmpPdu::PairingResponse(_) => OP_PAIRING_RESPONSE,
            SmpPdu::PairingConfirm(_) => OP_PAIRING_CONFIRM,
            SmpPdu::PairingRandom(_) => OP_PAIRING_RANDOM,
            SmpPdu::PairingFailed { .. } => OP_PAIRING_FAILED,
            SmpPdu::EncryptionInformation { .. } => OP_ENCRYPTION_INFORMATION,
            SmpPdu::IdentityInformation { .. } => OP_IDENTITY_INFORMATION,
            SmpPdu::PublicKey { .. } => OP_PUBLIC_KEY,
            SmpPdu::DhKeyCheck(_) => OP_DHKEY_CHECK,
            SmpPdu::Unknown { opcode, .. } => *opcode,
        }
    }

    pub fn kind(&self) -> PduKind {
        smp_kind(self.opcode_byte())
    }
}

/// The kind of a bare SMP PDU from its opcode byte alone.
pub fn smp_kind(opcode: u8) -> PduKind {
    match opcode_of(opcode) {
        SmpOpcode::PairingRequest => PduKind::SmpPairingRequest,
        SmpOpcode::PairingResponse => PduKind::SmpPairingResponse,
        SmpOpcode::PairingConfirm => PduKind::SmpPairingConfirm,
        SmpOpcode::PairingRandom => PduKind::SmpPairingRandom,
        SmpOpcode::PairingFailed => PduKind::SmpPairingFailed,
        SmpOpcode::EncryptionInformation => PduKind::SmpEncryptionInformation,
        SmpOpcode::IdentityInformation => PduKind::SmpIdentityInformation,
        SmpOpcode::PublicKey => PduKind::SmpPublicKey,
        SmpOpcode::DhKeyCheck => PduKind::SmpDhKeyCheck,
        SmpOpcode::Unknown => PduKind::SmpUnknown,
    }
}

fn body_len(op: u8) -> Option<usize> {
    Some(match op {
        OP_PAIRING_REQUEST | OP_PAIRING_RESPONSE => 6,
        OP_PAIRING_CONFIRM | OP_PAIRING_RANDOM => 16,
        OP_PAIRING_FAILED => 1,
        OP_ENCRYPTION_INFORMATION | OP_IDENTITY_INFORMATION => 16,
        OP_PUBLIC_KEY => 64,
        OP_DHKEY_CHECK => 16,
        _ => return None,
    })
}

fn decode_features(r: &mut Reader<'_>) -> Result<PairingFeatures> {
    let io = r.u8()?;
    let io_capability = IoCapability::from_u8(io).ok_or(PduError::IllegalFieldValue {
        field: "io_capability",
        value: u64::from(io),
    })?;
    let oob = r.u8()?;
    if oob > 1 {
        return Err(PduError::IllegalFieldValue {
            field: "oob_flag",
            value: u64::from(oob),
        });
    }
    let f = PairingFeatures {
        io_capability,
        oob_flag: oob == 1,
        auth_req: r.u8()?,
        max_enc_key_size: r.u8()?,
        initiator_key_dist: r.u8()?,
        responder_key_dist: r.u8()?,
    };
    if !(7..=16).contains(&f.max_enc_key_size) {
        return Err(PduError::IllegalFieldValue {
            field: "max_enc_key_size",
            value: u64::from(f.max_enc_key_size),
        });
    }
    Ok(f)
}

/// Decodes a bare SMP PDU (opcode byte followed by its body).
pub fn decode_smp(raw: &[u8]) -> Result<SmpPdu> {
    let mut r = Reader::new(raw);
    let op = r.u8()?;
    if let Some(n) = body_len(op) {
        if r.remaining() < n {
            return Err(PduError::TruncatedPdu {
                needed: n + 1,
                available: raw.len(),
            });
        }
        if r.remaining() > n {
            return Err(PduError::LengthMismatch {
                declared: n,
                actual: r.remaining(),
            });
        }
    }
    let pdu = match op {
        OP_PAIRING_REQUEST => SmpPdu::PairingRequest(decode_features(&mut r)?),
        OP_PAIRING_RESPONSE => SmpPdu::PairingResponse(decode_features(&mut r)?),
        OP_PAIRING_CONFIRM => SmpPdu::PairingConfirm(r.array()?),
        OP_PAIRING_RANDOM => SmpPdu::PairingRandom(r.array()?),
        OP_PAIRING_FAILED => SmpPdu::PairingFailed { reason: r.u8()? },
        OP_ENCRYPTION_INFORMATION => SmpPdu::EncryptionInformation { ltk: r.array()? },
        OP_IDENTITY_INFORMATION => SmpPdu::IdentityInformation { irk: r.array()? },
        OP_PUBLIC_KEY => SmpPdu::PublicKey {
            x: r.array()?,
            y: r.array()?,
        },
        OP_DHKEY_CHECK => SmpPdu::DhKeyCheck(r.array()?),
        _ => SmpPdu::Unknown {
            opcode: op,
            body: r.rest().to_vec(),
        },
    };
    Ok(pdu)
}

fn encode_features(out: &mut Vec<u8>, f: &PairingFeatures) -> Result<()> {
    if !(7..=16).contains(&f.max_enc_key_size) {
        return Err(PduError::InvariantViolation(format!(
            "max_enc_key_size {} outside 7..16",
            f.max_enc_key_size
        )));
    }
    out.extend_from_slice(&[
        f.io_capability as u8,
        u8::from(f.oob_flag),
        f.auth_req,
        f.max_enc_key_size,
        f.initiator_key_dist,
        f.responder_key_dist,
    ]);
    Ok(())
}

pub fn encode_smp(pdu: &SmpPdu) -> Result<Vec<u8>> {
    let mut out = vec![pdu.opcode_byte()];
    match pdu {
        SmpPdu::PairingRequest(f) | SmpPdu::PairingResponse(f) => encode_features(&mut out, f)?,
        SmpPdu::PairingConfirm(v)
        | SmpPdu::PairingRandom(v)
        | SmpPdu::DhKeyCheck(v)
        | SmpPdu::EncryptionInformation { ltk: v }
        | SmpPdu::IdentityInformation { irk: v } => out.extend_from_slice(v),
        SmpPdu::PairingFailed { reason } => out.push(*reason),
        SmpPdu::PublicKey { x, y } => {
            out.extend_from_slice(x);
            out.extend_from_slice(y);
        }
        SmpPdu::Unknown { opcode, body } => {
            if body_len(*opcode).is_some() {
                return Err(PduError::InvariantViolation(format!(
                    "opaque SMP PDU with interpreted opcode {opcode:#x}"
                )));
            }
            out.extend_from_slice(body);
        }
    }
    Ok(out)
}

/// How the pairing peers authenticate each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AssociationModel {
    JustWorks,
    PasskeyEntry,
    NumericComparison,
    OutOfBand,
}

/// Selects the association model from the exchanged Pairing Request and
/// Pairing Response, for LE legacy or LE Secure Connections pairing.
pub fn association_model(req: &PairingFeatures, rsp: &PairingFeatures) -> AssociationModel {
    let sc = req.secure_connections() && rsp.secure_connections();
    let oob = if sc {
        req.oob_flag || rsp.oob_flag
    } else {
        req.oob_flag && rsp.oob_flag
    };
    if oob {
        return AssociationModel::OutOfBand;
    }
    if !req.mitm() && !rsp.mitm() {
        return AssociationModel::JustWorks;
    }
    use AssociationModel::*;
    use IoCapability::*;
    let nc_or_pe = if sc { NumericComparison } else { PasskeyEntry };
    let nc_or_jw = if sc { NumericComparison } else { JustWorks };
    match (req.io_capability, rsp.io_capability) {
        (NoInputNoOutput, _) | (_, NoInputNoOutput) => JustWorks,
        (DisplayOnly, DisplayOnly) | (DisplayOnly, DisplayYesNo) | (DisplayYesNo, DisplayOnly) => {
            JustWorks
        }
        (DisplayYesNo, DisplayYesNo) => nc_or_jw,
        (DisplayYesNo, KeyboardDisplay)
        | (KeyboardDisplay, DisplayYesNo)
        | (KeyboardDisplay, KeyboardDisplay) => nc_or_pe,
        _ => PasskeyEntry,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn features(io: IoCapability, auth_req: u8) -> PairingFeatures {
        PairingFeatures {
            io_capability: io,
            oob_flag: false,
            auth_req,
            max_enc_key_size: 16,
            initiator_key_dist: 0,
            responder_key_dist: 0,
        }
    }

    #[test]
    fn key_size_bounds() {
        assert!(decode_smp(&[1, 3, 0, 1, 7, 1, 1]).is_ok());
        assert!(matches!(
            decode_smp(&[1, 3, 0, 1, 17, 1, 1]),
            Err(PduError::IllegalFieldValue {
                field: "max_enc_key_size",
                ..
            })
        ));
        assert!(decode_smp(&[1, 3, 0, 1, 3, 1, 1]).is_err());
    }

    #[test]
    fn fixed_lengths_enforced() {
        assert!(matches!(
            decode_smp(&[5]),
            Err(PduError::TruncatedPdu { .. })
        ));
        assert!(matches!(
            decode_smp(&[5, 1, 2]),
            Err(PduError::LengthMismatch { .. })
        ));
        assert!(decode_smp(&[]).is_err());
        assert_eq!(
            decode_smp(&[0x0b, 1, 2]).unwrap(),
            SmpPdu::Unknown {
                opcode: 0x0b,
                body: vec![1, 2]
            }
        );
    }

    #[test]
    fn encode_rejects_bad_key_size() {
        let mut f = features(IoCapability::DisplayOnly, 0);
        f.max_enc_key_size = 6;
        assert!(matches!(
            encode_smp(&SmpPdu::PairingRequest(f)),
            Err(PduError::InvariantViolation(_))
        ));
    }

    #[test]
    fn association_models() {
        use IoCapability::*;
        let jw = association_model(&features(KeyboardDisplay, 0), &features(KeyboardDisplay, 0));
        assert_eq!(jw, AssociationModel::JustWorks);
        let pe = association_model(
            &features(KeyboardOnly, AUTH_REQ_MITM),
            &features(DisplayOnly, 0),
        );
        assert_eq!(pe, AssociationModel::PasskeyEntry);
        let nc = association_model(
            &features(DisplayYesNo, AUTH_REQ_MITM | AUTH_REQ_SC),
            &features(KeyboardDisplay, AUTH_REQ_SC),
        );
        assert_eq!(nc, AssociationModel::NumericComparison);
        let nio = association_model(
            &features(NoInputNoOutput, AUTH_REQ_MITM),
            &features(KeyboardDisplay, AUTH_REQ_MITM),
        );
        assert_eq!(nio, AssociationModel::JustWorks);
        let mut a = features(DisplayOnly, AUTH_REQ_SC);
        a.oob_flag = true;
        assert_eq!(
            association_model(&a, &features(DisplayOnly, AUTH_REQ_SC)),
            AssociationModel::OutOfBand
        );
    }
}
