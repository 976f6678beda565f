//! Static verifier: structural checks followed by a path-sensitive abstract
//! interpretation that tracks register types (uninitialised, scalar, or
//! pointer into ctx/stack/packet) and proves termination within the
//! instruction budget.

use std::collections::{HashMap, HashSet};

use super::isa::*;
use super::map::MapDesc;
use super::{alu, jump_taken, Region, VerifiedProgram, INSN_BUDGET, MAX_INSNS, STACK_SIZE};
use crate::abi::CTX_SIZE;

/// Bound on distinct (pc, abstract state) pairs explored.
pub const MAX_STATES: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{}{reason}", pc.map(|p| format!("insn {p}: ")).unwrap_or_default())]
pub struct VerifierError {
    pub pc: Option<usize>,
    pub reason: String,
}

fn fail<T>(pc: usize, reason: impl Into<String>) -> Result<T, VerifierError> {
    Err(VerifierError {
        pc: Some(pc),
        reason: reason.into(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Val {
    Uninit,
    Scalar(Option<u64>),
    Ptr(Region, Option<i64>),
}

type Regs = [Val; 11];

fn initial_regs() -> Regs {
    let mut r = [Val::Uninit; 11];
    r[1] = Val::Ptr(Region::Ctx, Some(0));
    r[2] = Val::Ptr(Region::Pkt, Some(0));
    r[3] = Val::Scalar(None);
    r[10] = Val::Ptr(Region::Stack, Some(STACK_SIZE as i64));
    r
}

fn is_alu_op(code: u8) -> bool {
    code <= ALU_ARSH
}

fn is_cond_jump(code: u8) -> bool {
    matches!(
        code,
        JMP_JEQ
            | JMP_JGT
            | JMP_JGE
            | JMP_JSET
            | JMP_JNE
            | JMP_JSGT
            | JMP_JSGE
            | JMP_JLT
            | JMP_JLE
            | JMP_JSLT
            | JMP_JSLE
    )
}

fn access_size(op: u8) -> usize {
    match op & 0x18 {
        SIZE_B => 1,
        SIZE_H => 2,
        SIZE_W => 4,
        _ => 8,
    }
}

fn structural(insns: &[Insn], helpers: &[i32]) -> Result<(), VerifierError> {
    let n = insns.len();
    let mut wide_tail = vec![false; n];
    let mut pc = 0;
    while pc < n {
        let i = insns[pc];
        if i.dst > 10 || i.src > 10 {
            return fail(pc, "register index out of range");
        }
        match i.class() {
            CLASS_ALU | CLASS_ALU64 => {
                let code = i.op & 0xf0;
                if !is_alu_op(code) {
                    return fail(pc, format!("unknown opcode {:#04x}", i.op));
                }
                if i.dst == 10 {
                    return fail(pc, "write to read-only r10");
                }
                if i.off != 0 {
                    return fail(pc, "reserved offset field must be zero");
                }
                if i.op & SRC_X == 0 {
                    if i.src != 0 {
                        return fail(pc, "reserved source field must be zero");
                    }
                    if matches!(code, ALU_DIV | ALU_MOD) && i.imm == 0 {
                        return fail(pc, "division by constant zero");
                    }
                    let width = if i.class() == CLASS_ALU64 { 64 } else { 32 };
                    if matches!(code, ALU_LSH | ALU_RSH | ALU_ARSH) && !(0..width).contains(&i.imm)
                    {
                        return fail(pc, "shift amount out of range");
                    }
                } else if i.imm != 0 {
                    return fail(pc, "reserved immediate field must be zero");
                }
                if code == ALU_NEG && i.op & SRC_X != 0 {
                    return fail(pc, format!("unknown opcode {:#04x}", i.op));
                }
            }
            CLASS_JMP => {
                let code = i.op & 0xf0;
                match code {
                    JMP_EXIT => {
                        if i.op != OP_EXIT || i.dst != 0 || i.src != 0 || i.off != 0 || i.imm != 0 {
                            return fail(pc, "malformed exit");
                        }
                    }
                    JMP_CALL => {
                        if i.op != OP_CALL || i.dst != 0 || i.src != 0 || i.off != 0 {
                            return fail(pc, "malformed call");
                        }
                        if !helpers.contains(&i.imm) {
                            return fail(pc, format!("unknown helper {}", i.imm));
                        }
                    }
                    JMP_JA => {
                        if i.op != OP_JA || i.dst != 0 || i.src != 0 || i.imm != 0 {
                            return fail(pc, "malformed ja");
                        }
                    }
                    c if is_cond_jump(c) => {
                        if i.op & SRC_X == 0 && i.src != 0 {
                            return fail(pc, "reserved source field must be zero");
                        }
                        if i.op & SRC_X != 0 && i.imm != 0 {
                            return fail(pc, "reserved immediate field must be zero");
                        }
                    }
                    _ => return fail(pc, format!("unknown opcode {:#04x}", i.op)),
                }
                if !matches!(code, JMP_EXIT | JMP_CALL) {
                    let t = pc as i64 + 1 + i64::from(i.off);
                    if t < 0 || t >= n as i64 {
                        return fail(pc, "jump out of range");
                    }
                }
            }
            CLASS_LDX => {
                if i.op & 0xe0 != MODE_MEM || i.imm != 0 {
                    return fail(pc, format!("unknown opcode {:#04x}", i.op));
                }
                if i.dst == 10 {
                    return fail(pc, "write to read-only r10");
                }
            }
            CLASS_ST => {
                if i.op & 0xe0 != MODE_MEM || i.src != 0 {
                    return fail(pc, format!("unknown opcode {:#04x}", i.op));
                }
            }
            CLASS_STX => {
                if i.op & 0xe0 != MODE_MEM || i.imm != 0 {
                    return fail(pc, format!("unknown opcode {:#04x}", i.op));
                }
            }
            CLASS_LD => {
                if i.op != OP_LDDW || i.src != 0 || i.off != 0 {
                    return fail(pc, format!("unknown opcode {:#04x}", i.op));
                }
                if i.dst == 10 {
                    return fail(pc, "write to read-only r10");
                }
                match insns.get(pc + 1) {
                    Some(t) if t.op == 0 && t.dst == 0 && t.src == 0 && t.off == 0 => {}
                    _ => return fail(pc, "incomplete lddw"),
                }
                wide_tail[pc + 1] = true;
                pc += 2;
                continue;
            }
            _ => return fail(pc, format!("unknown opcode {:#04x}", i.op)),
        }
        pc += 1;
    }
    for (pc, i) in insns.iter().enumerate() {
        if wide_tail[pc] || i.class() != CLASS_JMP || matches!(i.op & 0xf0, JMP_EXIT | JMP_CALL) {
            continue;
        }
        let t = (pc as i64 + 1 + i64::from(i.off)) as usize;
        if wide_tail[t] {
            return fail(pc, "jump into the middle of lddw");
        }
    }
    let last = insns[n - 1];
    if wide_tail[n - 1] || !(last.op == OP_EXIT || last.op == OP_JA) {
        return fail(n - 1, "last instruction is not exit");
    }
    Ok(())
}

struct Analyzer<'a> {
    insns: &'a [Insn],
    maps: &'a [MapDesc],
}

impl Analyzer<'_> {
    fn read(&self, pc: usize, regs: &Regs, r: u8) -> Result<Val, VerifierError> {
        match regs[r as usize] {
            Val::Uninit => fail(pc, format!("read of uninitialised r{r}")),
            v => Ok(v),
        }
    }

    fn check_mem(
        &self,
        pc: usize,
        base: Val,
        off: i16,
        size: usize,
        write: bool,
    ) -> Result<(), VerifierError> {
        let Val::Ptr(region, boff) = base else {
            return fail(pc, "memory access through a non-pointer");
        };
        if write && region != Region::Stack {
            return fail(pc, "write outside the stack");
        }
        let eff = boff.and_then(|b| b.checked_add(i64::from(off)));
        let limit = match region {
            Region::Ctx => CTX_SIZE as i64,
            Region::Stack => STACK_SIZE as i64,
            // Packet length is only known at run time; bounds are enforced
            // by the interpreter.
            Region::Pkt => {
                return match eff {
                    Some(e) if e < 0 => fail(pc, "packet access before start"),
                    _ => Ok(()),
                };
            }
        };
        match eff {
            Some(e) if e >= 0 && e + size as i64 <= limit => Ok(()),
            Some(_) if region == Region::Stack => fail(pc, "stack overflow"),
            Some(_) => fail(pc, format!("{region:?} access out of bounds")),
            None => fail(pc, format!("{region:?} access with unknown offset")),
        }
    }

    fn stack_range(&self, pc: usize, v: Val, len: usize, what: &str) -> Result<(), VerifierError> {
        match v {
            Val::Ptr(Region::Stack, Some(o)) if o >= 0 && o + len as i64 <= STACK_SIZE as i64 => {
                Ok(())
            }
            _ => fail(pc, format!("{what} must point to {len} bytes of stack")),
        }
    }

    fn call(&self, pc: usize, regs: &mut Regs, id: i32) -> Result<(), VerifierError> {
        let map = |regs: &Regs| -> Result<MapDesc, VerifierError> {
            match self.read(pc, regs, 1)? {
                Val::Scalar(Some(h)) => {
                    self.maps
                        .get(h as usize)
                        .copied()
                        .ok_or_else(|| VerifierError {
                            pc: Some(pc),
                            reason: format!("unknown map handle {h}"),
                        })
                }
                _ => fail(pc, "map handle must be a known constant"),
            }
        };
        match id {
            HELPER_MAP_GET | HELPER_MAP_PUT => {
                let d = map(regs)?;
                self.stack_range(pc, self.read(pc, regs, 2)?, d.key_size, "key")?;
                self.stack_range(pc, self.read(pc, regs, 3)?, d.value_size, "value")?;
            }
            HELPER_MAP_DELETE => {
                let d = map(regs)?;
                self.stack_range(pc, self.read(pc, regs, 2)?, d.key_size, "key")?;
            }
            HELPER_SESSION_TICK => {}
            _ => return fail(pc, format!("unknown helper {id}")),
        }
        regs[0] = Val::Scalar(None);
        for r in regs.iter_mut().take(6).skip(1) {
            *r = Val::Uninit;
        }
        Ok(())
    }

    fn alu_abstract(&self, pc: usize, regs: &mut Regs, i: Insn) -> Result<(), VerifierError> {
        let is64 = i.class() == CLASS_ALU64;
        let code = i.op & 0xf0;
        let dst_r = i.dst as usize;
        let src = if i.op & SRC_X != 0 {
            self.read(pc, regs, i.src)?
        } else if is64 {
            Val::Scalar(Some(i.imm as i64 as u64))
        } else {
            Val::Scalar(Some(i.imm as u32 as u64))
        };
        if code == ALU_MOV {
            regs[dst_r] = match (is64, src) {
                (true, v) => v,
                (false, Val::Scalar(Some(v))) => Val::Scalar(Some(v & 0xffff_ffff)),
                (false, _) => Val::Scalar(None),
            };
            return Ok(());
        }
        let dst = self.read(pc, regs, i.dst)?;
        regs[dst_r] = match (dst, src) {
            (Val::Scalar(Some(a)), Val::Scalar(Some(b))) => Val::Scalar(Some(alu(i.op, a, b))),
            (Val::Ptr(reg, off), Val::Scalar(k)) if is64 && matches!(code, ALU_ADD | ALU_SUB) => {
                let delta = k.map(|k| k as i64);
                let off = match (off, delta) {
                    (Some(o), Some(d)) if code == ALU_ADD => o.checked_add(d),
                    (Some(o), Some(d)) => o.checked_sub(d),
                    _ => None,
                };
                Val::Ptr(reg, off)
            }
            (Val::Scalar(k), Val::Ptr(reg, off)) if is64 && code == ALU_ADD => {
                let off = match (off, k) {
                    (Some(o), Some(k)) => o.checked_add(k as i64),
                    _ => None,
                };
                Val::Ptr(reg, off)
            }
            _ => Val::Scalar(None),
        };
        Ok(())
    }

    /// Successor states of executing `pc` in `regs`. EXIT has none.
    fn step(&self, pc: usize, regs: &Regs) -> Result<Vec<(usize, Regs)>, VerifierError> {
        let i = self.insns[pc];
        let mut r = *regs;
        match i.class() {
            CLASS_ALU | CLASS_ALU64 => {
                self.alu_abstract(pc, &mut r, i)?;
                Ok(vec![(pc + 1, r)])
            }
            CLASS_LD => {
                let hi = self.insns[pc + 1].imm as u32 as u64;
                r[i.dst as usize] = Val::Scalar(Some((hi << 32) | i.imm as u32 as u64));
                Ok(vec![(pc + 2, r)])
            }
            CLASS_LDX => {
                let base = self.read(pc, &r, i.src)?;
                self.check_mem(pc, base, i.off, access_size(i.op), false)?;
                r[i.dst as usize] = Val::Scalar(None);
                Ok(vec![(pc + 1, r)])
            }
            CLASS_ST => {
                let base = self.read(pc, &r, i.dst)?;
                self.check_mem(pc, base, i.off, access_size(i.op), true)?;
                Ok(vec![(pc + 1, r)])
            }
            CLASS_STX => {
                let base = self.read(pc, &r, i.dst)?;
                self.read(pc, &r, i.src)?;
                self.check_mem(pc, base, i.off, access_size(i.op), true)?;
                Ok(vec![(pc + 1, r)])
            }
            CLASS_JMP => {
                let code = i.op & 0xf0;
                let target = (pc as i64 + 1 + i64::from(i.off)) as usize;
                match code {
                    JMP_EXIT => match r[0] {
                        Val::Scalar(_) => Ok(vec![]),
                        Val::Uninit => fail(pc, "r0 uninitialised at exit"),
                        Val::Ptr(..) => fail(pc, "exit would leak a pointer in r0"),
                    },
                    JMP_CALL => {
                        self.call(pc, &mut r, i.imm)?;
                        Ok(vec![(pc + 1, r)])
                    }
                    JMP_JA => Ok(vec![(target, r)]),
                    _ => {
                        let a = self.read(pc, &r, i.dst)?;
                        let b = if i.op & SRC_X != 0 {
                            self.read(pc, &r, i.src)?
                        } else {
                            Val::Scalar(Some(i.imm as i64 as u64))
                        };
                        if let (Val::Scalar(Some(x)), Val::Scalar(Some(y))) = (a, b) {
                            let t = jump_taken(i.op, x, y);
                            return Ok(vec![(if t { target } else { pc + 1 }, r)]);
                        }
                        let mut taken = r;
                        let mut fall = r;
                        if let (Val::Scalar(None), Val::Scalar(Some(k))) = (a, b) {
                            match code {
                                JMP_JEQ => taken[i.dst as usize] = Val::Scalar(Some(k)),
                                JMP_JNE => fall[i.dst as usize] = Val::Scalar(Some(k)),
                                _ => {}
                            }
                        }
                        if target == pc + 1 {
                            return Ok(vec![(target, r)]);
                        }
                        Ok(vec![(target, taken), (pc + 1, fall)])
                    }
                }
            }
            _ => fail(pc, format!("unknown opcode {:#04x}", i.op)),
        }
    }

    /// Depth-first exploration with memoisation on (pc, state). Returns the
    /// longest executed-instruction count over all paths.
    fn explore(&self) -> Result<u64, VerifierError> {
        type Key = (usize, Regs);
        enum Work {
            Enter(Key),
            Leave(Key, Vec<Key>),
        }
        let mut longest: HashMap<Key, u64> = HashMap::new();
        let mut on_path: HashSet<Key> = HashSet::new();
        let root: Key = (0, initial_regs());
        let mut work = vec![Work::Enter(root)];
        while let Some(w) = work.pop() {
            match w {
                Work::Enter(k) => {
                    if longest.contains_key(&k) {
                        continue;
                    }
                    if on_path.contains(&k) {
                        return fail(k.0, "unbounded loop");
                    }
                    if longest.len() + on_path.len() >= MAX_STATES {
                        return fail(k.0, "program too complex to verify");
                    }
                    let succs: Vec<Key> = self.step(k.0, &k.1)?;
                    if succs.is_empty() {
                        longest.insert(k, 1);
                        continue;
                    }
                    on_path.insert(k);
                    work.push(Work::Leave(k, succs.clone()));
                    for s in succs {
                        work.push(Work::Enter(s));
                    }
                }
                Work::Leave(k, succs) => {
                    on_path.remove(&k);
                    let best = succs
                        .iter()
                        .map(|s| longest.get(s).copied().unwrap_or(0))
                        .max()
                        .unwrap_or(0);
                    let total = best + 1;
                    if total > INSN_BUDGET {
                        return fail(k.0, "worst-case instruction count exceeds budget");
                    }
                    longest.insert(k, total);
                }
            }
        }
        Ok(longest[&(0, initial_regs())])
    }
}

/// Verifies bytecode against the helper allowlist and the map shapes
/// reachable by handle (index into `maps`).
pub fn verify(bytecode: &[u8], maps: &[MapDesc]) -> Result<VerifiedProgram, VerifierError> {
    let whole = |reason: &str| VerifierError {
        pc: None,
        reason: reason.to_string(),
    };
    if !bytecode.len().is_multiple_of(INSN_SIZE) {
        return Err(whole("bytecode length is not a multiple of 8"));
    }
    let insns = decode_all(bytecode);
    if insns.is_empty() {
        return Err(whole("empty program"));
    }
    if insns.len() > MAX_INSNS {
        return Err(whole("program too long"));
    }
    let helpers = [
        HELPER_MAP_GET,
        HELPER_MAP_PUT,
        HELPER_MAP_DELETE,
        HELPER_SESSION_TICK,
    ];
    structural(&insns, &helpers)?;
    let worst_case = Analyzer {
        insns: &insns,
        maps,
    }
    .explore()?;
    Ok(VerifiedProgram {
        insns,
        worst_case,
        bytecode: bytecode.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(src: &str) -> Result<VerifiedProgram, VerifierError> {
        verify(
            &assemble(src).unwrap(),
            &[MapDesc {
                key_size: 8,
                value_size: 8,
                max_entries: 4,
            }],
        )
    }

    fn reason(src: &str) -> String {
        v(src).unwrap_err().reason
    }

    #[test]
    fn trivial_accepted() {
        let p = v("mov r0, 0\nexit").unwrap();
        assert_eq!(p.worst_case, 2);
    }

    #[test]
    fn missing_exit_rejected() {
        assert_eq!(reason("mov r0, 0"), "last instruction is not exit");
    }

    #[test]
    fn infinite_loop_rejected() {
        assert_eq!(reason("top:\nmov r0, 0\nja top\nexit"), "unbounded loop");
        assert_eq!(
            reason("ldxdw r4, [r1+0]\ntop:\nsub r4, 1\njne r4, 0, top\nmov r0, 0\nexit"),
            "unbounded loop"
        );
    }

    #[test]
    fn bounded_loop_accepted() {
        let p = v("mov r4, 10\ntop:\nsub r4, 1\njne r4, 0, top\nmov r0, 0\nexit").unwrap();
        assert_eq!(p.worst_case, 1 + 20 + 2);
    }

    #[test]
    fn loop_over_budget_rejected() {
        let e = reason("lddw r4, 100000\ntop:\nsub r4, 1\njne r4, 0, top\nmov r0, 0\nexit");
        assert!(e.contains("budget") || e.contains("complex"), "{e}");
    }

    #[test]
    fn memory_rules() {
        assert!(v("ldxdw r0, [r1+296]\nexit").is_ok());
        assert!(reason("ldxdw r0, [r1+300]\nexit").contains("out of bounds"));
        assert!(reason("stdw [r1+0], 1\nmov r0, 0\nexit").contains("outside the stack"));
        assert_eq!(reason("stdw [r10+0], 1\nmov r0, 0\nexit"), "stack overflow");
        assert!(v("stdw [r10-512], 1\nldxdw r0, [r10-512]\nexit").is_ok());
        assert!(reason("mov r5, 7\nldxb r0, [r5+0]\nexit").contains("non-pointer"));
        assert!(v("ldxb r0, [r2+1000]\nexit").is_ok());
        assert!(reason("ldxb r0, [r2-1]\nexit").contains("before start"));
    }

    #[test]
    fn register_rules() {
        assert!(reason("mov r0, r6\nexit").contains("uninitialised"));
        assert!(reason("exit").contains("r0"));
        assert!(reason("mov r10, 0\nmov r0, 0\nexit").contains("r10"));
        assert!(reason("mov r0, r1\nexit").contains("pointer"));
    }

    #[test]
    fn helper_rules() {
        assert!(reason("call 9\nmov r0, 0\nexit").contains("unknown helper"));
        let ok = "mov r1, 0\nmov r2, r10\nadd r2, -8\nstdw [r10-8], 0\n\
                  mov r3, r10\nadd r3, -16\ncall 1\nmov r0, 0\nexit";
        assert!(v(ok).is_ok());
        let bad_map = ok.replace("mov r1, 0", "mov r1, 3");
        assert!(reason(&bad_map).contains("map handle"));
        let clobber = "mov r6, r1\ncall 4\nldxdw r0, [r1+0]\nexit";
        assert!(reason(clobber).contains("uninitialised"));
        assert!(v("mov r6, r1\ncall 4\nldxdw r0, [r6+0]\nexit").is_ok());
    }

    #[test]
    fn structural_rules() {
        assert!(verify(&[0u8; 7], &[]).is_err());
        assert!(verify(&[], &[]).is_err());
        assert_eq!(reason("div r1, 0\nexit"), "division by constant zero");
        assert!(reason("mov r0, 0\nja +5\nexit").contains("out of range"));
        let mut b = assemble("mov r0, 0\nexit").unwrap();
        b[8] = 0xe5;
        assert!(verify(&b, &[])
            .unwrap_err()
            .reason
            .contains("unknown opcode"));
        let long = "mov r0, 0\n".repeat(MAX_INSNS) + "exit";
        assert_eq!(reason(&long), "program too long");
    }
}
