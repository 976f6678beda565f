use serde::{Deserialize, Serialize};

use super::{PduError, PduKind, Reader, Result};

/// ATT error code reported when an attribute needs a key the peer lacks.
pub const ERROR_PIN_OR_KEY_MISSING: u8 = 0x06;

const OP_ERROR_RSP: u8 = 0x01;
const OP_READ_REQ: u8 = 0x0a;
const OP_READ_RSP: u8 = 0x0b;
const OP_WRITE_REQ: u8 = 0x12;
const OP_WRITE_RSP: u8 = 0x13;
const OP_WRITE_CMD: u8 = 0x52;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttErrorResponse {
    pub request_opcode: u8,
    pub handle: u16,
    pub error_code: u8,
}

/// The ATT operations the engine tracks; everything else stays opaque.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttPdu {
    ErrorResponse(AttErrorResponse),
    ReadRequest { handle: u16 },
    ReadResponse { value: Vec<u8> },
    WriteRequest { handle: u16, value: Vec<u8> },
    WriteResponse,
    WriteCommand { handle: u16, value: Vec<u8> },
    Other { opcode: u8, params: Vec<u8> },
}

impl AttPdu {
    pub fn opcode(&self) -> u8 {
        match self {
            AttPdu::ErrorResponse(_) => OP_ERROR_RSP,
            AttPdu::ReadRequest { .. } => OP_READ_REQ,
            AttPdu::ReadResponse { .. } => OP_READ_RSP,
            AttPdu::WriteRequest { .. } => OP_WRITE_REQ,
            AttPdu::WriteResponse => OP_WRITE_RSP,
            AttPdu::WriteCommand { .. } => OP_WRITE_CMD,
            AttPdu::Other { opcode, .. } => *opcode,
        }
    }

    pub fn kind(&self) -> PduKind {
        att_kind(self.opcode())
    }

    /// The attribute handle a request targets, if it names one.
    pub fn handle(&self) -> Option<u16> {
        match self {
            AttPdu::ErrorResponse(e) => Some(e.handle),
            AttPdu::ReadRequest { handle }
            | AttPdu::WriteRequest { handle, .. }
            | AttPdu::WriteCommand { handle, .. } => Some(*handle),
            _ => None,
        }
    }

    pub fn decode(raw: &[u8]) -> Result<AttPdu> {
        let mut r = Reader::new(raw);
        let op = r.u8()?;
        let exact = |n: usize| -> Result<()> {
            if raw.len() < n {
                Err(PduError::TruncatedPdu {
                    needed: n,
                    available: raw.len(),
                })
            } else if raw.len() > n {
                Err(PduError::LengthMismatch {
                    declared: n,
                    actual: raw.len(),
                })
            } else {
                Ok(())
            }
        };
        Ok(match op {
            OP_ERROR_RSP => {
                exact(5)?;
                AttPdu::ErrorResponse(AttErrorResponse {
                    request_opcode: r.u8()?,
                    handle: r.u16()?,
                    error_code: r.u8()?,
                })
            }
            OP_READ_REQ => {
                exact(3)?;
                AttPdu::ReadRequest { handle: r.u16()? }
            }
            OP_READ_RSP => AttPdu::ReadResponse {
                value: r.rest().to_vec(),
            },
            OP_WRITE_REQ => AttPdu::WriteRequest {
                handle: r.u16()?,
                value: r.rest().to_vec(),
            },
            OP_WRITE_RSP => {
                exact(1)?;
                AttPdu::WriteResponse
            }
            OP_WRITE_CMD => AttPdu::WriteCommand {
                handle: r.u16()?,
                value: r.rest().to_vec(),
            },
            _ => AttPdu::Other {
                opcode: op,
                params: r.rest().to_vec(),
            },
        })
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = vec![self.opcode()];
        match self {
            AttPdu::ErrorResponse(e) => {
                out.push(e.request_opcode);
                out.extend_from_slice(&e.handle.to_le_bytes());
                out.push(e.error_code);
            }
            AttPdu::ReadRequest { handle } => out.extend_from_slice(&handle.to_le_bytes()),
            AttPdu::ReadResponse { value } => out.extend_from_slice(value),
            AttPdu::WriteRequest { handle, value } | AttPdu::WriteCommand { handle, value } => {
                out.extend_from_slice(&handle.to_le_bytes());
                out.extend_from_slice(value);
            }
            AttPdu::WriteResponse => {}
            AttPdu::Other { opcode, params } => {
                if att_kind(*opcode) != PduKind::AttOther {
                    return Err(PduError::InvariantViolation(format!(
                        "opaque ATT PDU with interpreted opcode {opcode:#x}"
                    )));
                }
                out.extend_from_slice(params);
            }
        }
        Ok(out)
    }
}

pub fn att_kind(opcode: u8) -> PduKind {
    match opcode {
        OP_ERROR_RSP => PduKind::AttErrorResponse,
        OP_READ_REQ => PduKind::AttReadRequest,
        OP_READ_RSP => PduKind::AttReadResponse,
        OP_WRITE_REQ => PduKind::AttWriteRequest,
        OP_WRITE_RSP => PduKind::AttWriteResponse,
        OP_WRITE_CMD => PduKind::AttWriteCommand,
        _ => PduKind::AttOther,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_response_is_five_bytes() {
        let e = AttPdu::decode(&[0x01, 0x0a, 0x10, 0x00, 0x06]).unwrap();
        assert_eq!(
            e,
            AttPdu::ErrorResponse(AttErrorResponse {
                request_opcode: 0x0a,
                handle: 0x10,
                error_code: ERROR_PIN_OR_KEY_MISSING
            })
        );
        assert!(AttPdu::decode(&[0x01, 0x0a, 0x10, 0x00]).is_err());
        assert!(AttPdu::decode(&[0x01, 0x0a, 0x10, 0x00, 0x06, 0x00]).is_err());
        assert_eq!(e.encode().unwrap(), vec![0x01, 0x0a, 0x10, 0x00, 0x06]);
    }
}
