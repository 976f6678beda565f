//! Sandboxed policy programs: instruction set, verifier, interpreter, maps,
//! the on-disk container and the policy store.

pub mod container;
pub mod interp;
pub mod isa;
pub mod map;
pub mod store;
pub mod verifier;

use serde::{Deserialize, Serialize};

use crate::abi::HookPoint;
use crate::fsm::{EventKind, SessionState};
use isa::*;

pub use container::{decode_container, encode_container, ContainerError};
pub use interp::{execute, verdict_of, Exec, Helpers, NoHelpers, RuntimeFault};
pub use map::{MapDesc, MapError, VmMap};
pub use store::{PolicyStore, Snapshot, StoreError};
pub use verifier::{verify, VerifierError};

pub const MAX_INSNS: usize = 4096;
pub const STACK_SIZE: usize = 512;
pub const INSN_BUDGET: u64 = 65536;

/// Longest program id that fits a specifications-map key.
pub const MAX_ID_LEN: usize = 28;

/// Base addresses of the three memory regions as seen by programs.
pub const CTX_BASE: u64 = 0x1000_0000;
pub const PKT_BASE: u64 = 0x2000_0000;
pub const STACK_BASE: u64 = 0x3000_0000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Region {
    Ctx,
    Pkt,
    Stack,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Pass,
    Reject,
}

/// Where a program is dispatched: hook, event kind and an optional state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Attach {
    pub hook: HookPoint,
    pub event: EventKind,
    pub state: Option<SessionState>,
}

impl Attach {
    pub fn matches(&self, hook: HookPoint, event: EventKind, state: SessionState) -> bool {
        self.hook == hook && self.event == event && self.state.is_none_or(|s| s == state)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicyProgram {
    pub id: String,
    pub attach: Attach,
    pub bytecode: Vec<u8>,
}

/// A program that passed [`verify`]. Only the verifier constructs these.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifiedProgram {
    pub(crate) insns: Vec<Insn>,
    pub(crate) worst_case: u64,
    pub(crate) bytecode: Vec<u8>,
}

impl VerifiedProgram {
    /// Longest possible executed-instruction count.
    pub fn worst_case(&self) -> u64 {
        self.worst_case
    }

    pub fn bytecode(&self) -> &[u8] {
        &self.bytecode
    }

    pub fn len(&self) -> usize {
        self.insns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.insns.is_empty()
    }
}

/// Result of an ALU instruction `op` applied to `dst` and `src`. For 32-bit
/// classes operands are truncated and the result zero-extended.
pub(crate) fn alu(op: u8, dst: u64, src: u64) -> u64 {
    let code = op & 0xf0;
    if op & 0x07 == CLASS_ALU64 {
        match code {
            ALU_ADD => dst.wrapping_add(src),
            ALU_SUB => dst.wrapping_sub(src),
            ALU_MUL => dst.wrapping_mul(src),
            ALU_DIV => dst.checked_div(src).unwrap_or(0),
            ALU_OR => dst | src,
            ALU_AND => dst & src,
            ALU_LSH => dst.wrapping_shl(src as u32 & 63),
            ALU_RSH => dst.wrapping_shr(src as u32 & 63),
            ALU_NEG => dst.wrapping_neg(),
            ALU_MOD => dst.checked_rem(src).unwrap_or(dst),
            ALU_XOR => dst ^ src,
            ALU_MOV => src,
            _ => ((dst as i64).wrapping_shr(src as u32 & 63)) as u64,
        }
    } else {
        let (d, s) = (dst as u32, src as u32);
        let r = match code {
            ALU_ADD => d.wrapping_add(s),
            ALU_SUB => d.wrapping_sub(s),
            ALU_MUL => d.wrapping_mul(s),
            ALU_DIV => d.checked_div(s).unwrap_or(0),
            ALU_OR => d | s,
            ALU_AND => d & s,
            ALU_LSH => d.wrapping_shl(s & 31),
            ALU_RSH => d.wrapping_shr(s & 31),
            ALU_NEG => d.wrapping_neg(),
            ALU_MOD => d.checked_rem(s).unwrap_or(d),
            ALU_XOR => d ^ s,
            ALU_MOV => s,
            _ => ((d as i32).wrapping_shr(s & 31)) as u32,
        };
        u64::from(r)
    }
}

/// Whether conditional jump `op` is taken for operands `a` and `b`.
pub(crate) fn jump_taken(op: u8, a: u64, b: u64) -> bool {
    let (sa, sb) = (a as i64, b as i64);
    match op & 0xf0 {
        JMP_JEQ => a == b,
        JMP_JGT => a > b,
        JMP_JGE => a >= b,
        JMP_JSET => a & b != 0,
        JMP_JNE => a != b,
        JMP_JSGT => sa > sb,
        JMP_JSGE => sa >= sb,
        JMP_JLT => a < b,
        JMP_JLE => a <= b,
        JMP_JSLT => sa < sb,
        JMP_JSLE => sa <= sb,
        _ => true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alu_edge_cases() {
        let a64 = CLASS_ALU64;
        let a32 = CLASS_ALU;
        assert_eq!(alu(a64 | ALU_DIV, 7, 0), 0);
        assert_eq!(alu(a64 | ALU_MOD, 7, 0), 7);
        assert_eq!(alu(a32 | ALU_MOD, u64::MAX, 0), 0xffff_ffff);
        assert_eq!(alu(a32 | ALU_ADD, 0xffff_ffff, 1), 0);
        assert_eq!(alu(a64 | ALU_ARSH, (-8i64) as u64, 1), (-4i64) as u64);
        assert_eq!(alu(a32 | ALU_ARSH, 0x8000_0000, 31), 0xffff_ffff);
        assert_eq!(alu(a64 | ALU_LSH, 1, 64), 1);
    }

    #[test]
    fn signed_jumps() {
        assert!(jump_taken(JMP_JSLT, (-1i64) as u64, 0));
        assert!(!jump_taken(JMP_JLT, (-1i64) as u64, 0));
        assert!(jump_taken(JMP_JSET, 6, 2));
    }
}
