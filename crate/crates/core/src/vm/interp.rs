//! Interpreter. Every memory access is bounds-checked again at run time, so
//! a verifier bug degrades to a fault rather than an escape.
//!
//! Entry registers: `r1` = ctx, `r2` = pkt, `r3` = pkt length,
//! `r10` = top of the 512-byte stack.

use super::isa::*;
use super::map::MapDesc;
use super::{
    alu, jump_taken, Verdict, VerifiedProgram, CTX_BASE, INSN_BUDGET, PKT_BASE, STACK_BASE,
    STACK_SIZE,
};
use crate::abi::{VERDICT_PASS, VERDICT_REJECT};

/// Services a program may call. Handles index the maps visible to the
/// program; the shapes must match what the program was verified against.
pub trait Helpers {
    fn map_desc(&self, handle: u64) -> Option<MapDesc>;
    fn map_get(&mut self, handle: u64, key: &[u8]) -> Option<Vec<u8>>;
    /// Returns false if the map rejected the entry.
    fn map_put(&mut self, handle: u64, key: &[u8], value: &[u8]) -> bool;
    /// Returns whether the key was present.
    fn map_delete(&mut self, handle: u64, key: &[u8]) -> bool;
    fn session_tick(&mut self) -> u64;
}

/// Helper set with no maps and a zero tick.
pub struct NoHelpers;

impl Helpers for NoHelpers {
    fn map_desc(&self, _: u64) -> Option<MapDesc> {
        None
    }
    fn map_get(&mut self, _: u64, _: &[u8]) -> Option<Vec<u8>> {
        None
    }
    fn map_put(&mut self, _: u64, _: &[u8], _: &[u8]) -> bool {
        false
    }
    fn map_delete(&mut self, _: u64, _: &[u8]) -> bool {
        false
    }
    fn session_tick(&mut self) -> u64 {
        0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RuntimeFault {
    #[error("insn {pc}: out-of-bounds access of {len} bytes at {addr:#x}")]
    OutOfBounds { pc: usize, addr: u64, len: usize },
    #[error("instruction budget exceeded")]
    BudgetExceeded,
    #[error("insn {pc}: bad helper call {id}")]
    BadHelper { pc: usize, id: i32 },
    #[error("insn {pc}: invalid instruction")]
    BadInstruction { pc: usize },
    #[error("program returned {0}, which is not a verdict")]
    BadVerdict(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Exec {
    pub ret: u64,
    /// Instructions executed, including the final EXIT.
    pub insns: u64,
}

/// Maps an execution result to a verdict. Anything but a clean return of
/// PASS is a rejection.
pub fn verdict_of(r: &Result<Exec, RuntimeFault>) -> Verdict {
    match r {
        Ok(e) if e.ret == VERDICT_PASS => Verdict::Pass,
        _ => Verdict::Reject,
    }
}

struct Memory<'a> {
    ctx: &'a [u8],
    pkt: &'a [u8],
    stack: [u8; STACK_SIZE],
}

fn window(base: u64, size: usize, addr: u64, len: usize) -> Option<usize> {
    let off = addr.checked_sub(base)?;
    let end = off.checked_add(len as u64)?;
    (end <= size as u64).then_some(off as usize)
}

impl Memory<'_> {
    fn read(&self, pc: usize, addr: u64, len: usize) -> Result<&[u8], RuntimeFault> {
        if let Some(o) = window(CTX_BASE, self.ctx.len(), addr, len) {
            return Ok(&self.ctx[o..o + len]);
        }
        if let Some(o) = window(PKT_BASE, self.pkt.len(), addr, len) {
            return Ok(&self.pkt[o..o + len]);
        }
        if let Some(o) = window(STACK_BASE, STACK_SIZE, addr, len) {
            return Ok(&self.stack[o..o + len]);
        }
        Err(RuntimeFault::OutOfBounds { pc, addr, len })
    }

    fn write(&mut self, pc: usize, addr: u64, data: &[u8]) -> Result<(), RuntimeFault> {
        let len = data.len();
        match window(STACK_BASE, STACK_SIZE, addr, len) {
            Some(o) => {
                self.stack[o..o + len].copy_from_slice(data);
                Ok(())
            }
            None => Err(RuntimeFault::OutOfBounds { pc, addr, len }),
        }
    }
}

fn size_of(op: u8) -> usize {
    match op & 0x18 {
        SIZE_B => 1,
        SIZE_H => 2,
        SIZE_W => 4,
        _ => 8,
    }
}

fn load_le(b: &[u8]) -> u64 {
    let mut w = [0u8; 8];
    w[..b.len()].copy_from_slice(b);
    u64::from_le_bytes(w)
}

fn call(
    pc: usize,
    id: i32,
    regs: &mut [u64; 11],
    mem: &mut Memory<'_>,
    h: &mut dyn Helpers,
) -> Result<u64, RuntimeFault> {
    let bad = RuntimeFault::BadHelper { pc, id };
    if id == HELPER_SESSION_TICK {
        return Ok(h.session_tick());
    }
    let handle = regs[1];
    let desc = h.map_desc(handle).ok_or(bad.clone())?;
    let key = mem.read(pc, regs[2], desc.key_size)?.to_vec();
    match id {
        HELPER_MAP_GET => match h.map_get(handle, &key) {
            Some(v) if v.len() == desc.value_size => {
                mem.write(pc, regs[3], &v)?;
                Ok(1)
            }
            Some(_) => Err(bad),
            None => Ok(0),
        },
        HELPER_MAP_PUT => {
            let value = mem.read(pc, regs[3], desc.value_size)?.to_vec();
            Ok(u64::from(!h.map_put(handle, &key, &value)))
        }
        HELPER_MAP_DELETE => Ok(u64::from(h.map_delete(handle, &key))),
        _ => Err(bad),
    }
}

/// Runs a verified program over `ctx` and `pkt`. Returns `r0` at EXIT.
pub fn execute(
    prog: &VerifiedProgram,
    ctx: &[u8],
    pkt: &[u8],
    helpers: &mut dyn Helpers,
) -> Result<Exec, RuntimeFault> {
    let insns = &prog.insns;
    let mut mem = Memory {
        ctx,
        pkt,
        stack: [0; STACK_SIZE],
    };
    let mut r = [0u64; 11];
    r[1] = CTX_BASE;
    r[2] = PKT_BASE;
    r[3] = pkt.len() as u64;
    r[10] = STACK_BASE + STACK_SIZE as u64;
    let mut pc = 0usize;
    let mut count = 0u64;
    loop {
        count += 1;
        if count > INSN_BUDGET {
            return Err(RuntimeFault::BudgetExceeded);
        }
        let i = *insns.get(pc).ok_or(RuntimeFault::BadInstruction { pc })?;
        let (d, s) = (i.dst as usize, i.src as usize);
        if d > 10 || s > 10 {
            return Err(RuntimeFault::BadInstruction { pc });
        }
        let mut next = pc + 1;
        match i.class() {
            CLASS_ALU | CLASS_ALU64 => {
                let src = if i.op & SRC_X != 0 {
                    r[s]
                } else if i.class() == CLASS_ALU64 {
                    i.imm as i64 as u64
                } else {
                    i.imm as u32 as u64
                };
                if d == 10 {
                    return Err(RuntimeFault::BadInstruction { pc });
                }
                r[d] = alu(i.op, r[d], src);
            }
            CLASS_LD => {
                let hi = insns
                    .get(pc + 1)
                    .ok_or(RuntimeFault::BadInstruction { pc })?
                    .imm as u32 as u64;
                r[d] = (hi << 32) | i.imm as u32 as u64;
                next = pc + 2;
            }
            CLASS_LDX => {
                let addr = r[s].wrapping_add(i.off as i64 as u64);
                r[d] = load_le(mem.read(pc, addr, size_of(i.op))?);
            }
            CLASS_ST | CLASS_STX => {
                let addr = r[d].wrapping_add(i.off as i64 as u64);
                let v = if i.class() == CLASS_ST {
                    i.imm as i64 as u64
                } else {
                    r[s]
                };
                mem.write(pc, addr, &v.to_le_bytes()[..size_of(i.op)])?;
            }
            CLASS_JMP => match i.op & 0xf0 {
                JMP_EXIT => {
                    return match r[0] {
                        VERDICT_PASS | VERDICT_REJECT => Ok(Exec {
                            ret: r[0],
                            insns: count,
                        }),
                        v => Err(RuntimeFault::BadVerdict(v)),
                    };
                }
                JMP_CALL => {
                    r[0] = call(pc, i.imm, &mut r, &mut mem, helpers)?;
                }
                code => {
                    let b = if i.op & SRC_X != 0 {
                        r[s]
                    } else {
                        i.imm as i64 as u64
                    };
                    if code == JMP_JA || jump_taken(i.op, r[d], b) {
                        next = (pc as i64 + 1 + i64::from(i.off)) as usize;
                    }
                }
            },
            _ => return Err(RuntimeFault::BadInstruction { pc }),
        }
        pc = next;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vm::{verify, VmMap};

    fn run(src: &str, ctx: &[u8], pkt: &[u8]) -> Result<Exec, RuntimeFault> {
        let p = verify(&assemble(src).unwrap(), &[]).unwrap();
        execute(&p, ctx, pkt, &mut NoHelpers)
    }

    #[test]
    fn trivial_pass() {
        let e = run("mov r0, 0\nexit", &[0; 304], &[]).unwrap();
        assert_eq!(e, Exec { ret: 0, insns: 2 });
        assert_eq!(verdict_of(&Ok(e)), Verdict::Pass);
    }

    #[test]
    fn non_verdict_return_fails_closed() {
        let r = run("mov r0, 7\nexit", &[0; 304], &[]);
        assert_eq!(r, Err(RuntimeFault::BadVerdict(7)));
        assert_eq!(verdict_of(&r), Verdict::Reject);
    }

    #[test]
    fn packet_bounds_checked_at_run_time() {
        let src = "ldxb r0, [r2+3]\nand r0, 1\nexit";
        assert_eq!(run(src, &[0; 304], &[0, 0, 0, 1]).unwrap().ret, 1);
        let r = run(src, &[0; 304], &[0, 0, 0]);
        assert!(matches!(r, Err(RuntimeFault::OutOfBounds { pc: 0, .. })));
        assert_eq!(verdict_of(&r), Verdict::Reject);
    }

    #[test]
    fn reads_ctx_little_endian() {
        let mut ctx = [0u8; 304];
        ctx[48..56].copy_from_slice(&0x0102u64.to_le_bytes());
        let e = run(
            "ldxh r0, [r1+48]\njeq r0, 0x102, +1\nexit\nmov r0, 1\nexit",
            &ctx,
            &[],
        )
        .unwrap();
        assert_eq!(e.ret, 1);
    }

    struct OneMap(VmMap, u64);

    impl Helpers for OneMap {
        fn map_desc(&self, h: u64) -> Option<MapDesc> {
            (h == 0).then_some(self.0.desc)
        }
        fn map_get(&mut self, _: u64, k: &[u8]) -> Option<Vec<u8>> {
            self.0.get(k).ok().flatten()
        }
        fn map_put(&mut self, _: u64, k: &[u8], v: &[u8]) -> bool {
            self.0.put(k, v).is_ok()
        }
        fn map_delete(&mut self, _: u64, k: &[u8]) -> bool {
            self.0.delete(k).unwrap_or(false)
        }
        fn session_tick(&mut self) -> u64 {
            self.1 += 1;
            self.1
        }
    }

    #[test]
    fn map_helpers_round_trip() {
        let src = "stdw [r10-8], 5\nstdw [r10-16], 9\n\
                   mov r1, 0\nmov r2, r10\nadd r2, -8\nmov r3, r10\nadd r3, -16\ncall 2\n\
                   stdw [r10-16], 0\n\
                   mov r1, 0\nmov r2, r10\nadd r2, -8\nmov r3, r10\nadd r3, -16\ncall 1\n\
                   ldxdw r0, [r10-16]\njeq r0, 9, +2\nmov r0, 1\nexit\nmov r0, 0\nexit";
        let desc = MapDesc {
            key_size: 8,
            value_size: 8,
            max_entries: 4,
        };
        let p = verify(&assemble(src).unwrap(), &[desc]).unwrap();
        let mut h = OneMap(VmMap::new("m", 8, 8, 4), 0);
        assert_eq!(execute(&p, &[0; 304], &[], &mut h).unwrap().ret, 0);
        assert_eq!(
            h.0.get(&5u64.to_le_bytes()).unwrap(),
            Some(9u64.to_le_bytes().to_vec())
        );
    }

    #[test]
    fn missing_map_is_bad_helper() {
        let src = "stdw [r10-8], 0\nmov r1, 0\nmov r2, r10\nadd r2, -8\ncall 3\nmov r0, 0\nexit";
        let desc = MapDesc {
            key_size: 8,
            value_size: 8,
            max_entries: 1,
        };
        let p = verify(&assemble(src).unwrap(), &[desc]).unwrap();
        let r = execute(&p, &[0; 304], &[], &mut NoHelpers);
        assert!(matches!(r, Err(RuntimeFault::BadHelper { id: 3, .. })));
    }
}
