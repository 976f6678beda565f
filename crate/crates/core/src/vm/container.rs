//! Program container: `IFW1`, version, id, attach key, bytecode, CRC32.
//!
//! ```text
//! "IFW1" | ver u8 | id_len u8 | id | hook u8 | event u8 | state u8 | 0u8
//!        | len u32 LE | bytecode | crc32 LE (over everything before it)
//! ```

use super::{Attach, PolicyProgram, MAX_ID_LEN};
use crate::abi::{HookPoint, STATE_ANY};
use crate::fsm::{EventKind, SessionState};

pub const MAGIC: &[u8; 4] = b"IFW1";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ContainerError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u8),
    #[error("container truncated")]
    Truncated,
    #[error("{0} trailing bytes after container")]
    Trailing(usize),
    #[error("crc mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    BadCrc { stored: u32, computed: u32 },
    #[error("invalid {0}")]
    BadField(&'static str),
}

pub fn encode_container(p: &PolicyProgram) -> Result<Vec<u8>, ContainerError> {
    if p.id.is_empty() || p.id.len() > MAX_ID_LEN {
        return Err(ContainerError::BadField("program id"));
    }
    let len = u32::try_from(p.bytecode.len()).map_err(|_| ContainerError::BadField("length"))?;
    let mut out = Vec::with_capacity(20 + p.id.len() + p.bytecode.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(p.id.len() as u8);
    out.extend_from_slice(p.id.as_bytes());
    out.push(p.attach.hook.code());
    out.push(p.attach.event.code());
    out.push(p.attach.state.map_or(STATE_ANY, |s| s.code()));
    out.push(0);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&p.bytecode);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Parses a container. Returns the program and the number of bytes consumed;
/// the caller decides whether trailing bytes are acceptable.
pub fn decode_container_prefix(b: &[u8]) -> Result<(PolicyProgram, usize), ContainerError> {
    use ContainerError::*;
    let get = |r: std::ops::Range<usize>| b.get(r).ok_or(Truncated);
    if get(0..4)? != MAGIC {
        return Err(BadMagic);
    }
    let ver = get(4..5)?[0];
    if ver != VERSION {
        return Err(UnsupportedVersion(ver));
    }
    let id_len = get(5..6)?[0] as usize;
    let id = std::str::from_utf8(get(6..6 + id_len)?).map_err(|_| BadField("program id"))?;
    if id.is_empty() || id_len > MAX_ID_LEN {
        return Err(BadField("program id"));
    }
    let at = 6 + id_len;
    let hdr = get(at..at + 8)?;
    let len = u32::from_le_bytes([hdr[4], hdr[5], hdr[6], hdr[7]]) as usize;
    let body_end = (at + 8).checked_add(len).ok_or(Truncated)?;
    let bytecode = get(at + 8..body_end)?;
    let stored = get(body_end..body_end + 4)?;
    let stored = u32::from_le_bytes([stored[0], stored[1], stored[2], stored[3]]);
    let computed = crc32fast::hash(&b[..body_end]);
    if stored != computed {
        return Err(BadCrc { stored, computed });
    }
    let hook = HookPoint::from_code(hdr[0]).ok_or(BadField("hook"))?;
    let event = EventKind::from_code(hdr[1]).ok_or(BadField("event"))?;
    let state = match hdr[2] {
        STATE_ANY => None,
        c => Some(SessionState::from_code(c).ok_or(BadField("state filter"))?),
    };
    if hdr[3] != 0 {
        return Err(BadField("reserved byte"));
    }
    Ok((
        PolicyProgram {
            id: id.to_string(),
            attach: Attach { hook, event, state },
            bytecode: bytecode.to_vec(),
        },
        body_end + 4,
    ))
}

pub fn decode_container(b: &[u8]) -> Result<PolicyProgram, ContainerError> {
    let (p, used) = decode_container_prefix(b)?;
    if used != b.len() {
        return Err(ContainerError::Trailing(b.len() - used));
    }
    Ok(p)
}
