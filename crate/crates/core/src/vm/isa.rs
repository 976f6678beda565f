//! Instruction encoding (64-bit eBPF-compatible subset) and a small text
//! assembler/disassembler used to author the built-in rules.

use std::collections::HashMap;
use std::fmt;

pub const INSN_SIZE: usize = 8;

pub const CLASS_LD: u8 = 0x00;
pub const CLASS_LDX: u8 = 0x01;
pub const CLASS_ST: u8 = 0x02;
pub const CLASS_STX: u8 = 0x03;
pub const CLASS_ALU: u8 = 0x04;
pub const CLASS_JMP: u8 = 0x05;
pub const CLASS_ALU64: u8 = 0x07;

pub const SIZE_W: u8 = 0x00;
pub const SIZE_H: u8 = 0x08;
pub const SIZE_B: u8 = 0x10;
pub const SIZE_DW: u8 = 0x18;

pub const MODE_IMM: u8 = 0x00;
pub const MODE_MEM: u8 = 0x60;

pub const SRC_K: u8 = 0x00;
pub const SRC_X: u8 = 0x08;

pub const ALU_ADD: u8 = 0x00;
pub const ALU_SUB: u8 = 0x10;
pub const ALU_MUL: u8 = 0x20;
pub const ALU_DIV: u8 = 0x30;
pub const ALU_OR: u8 = 0x40;
pub const ALU_AND: u8 = 0x50;
pub const ALU_LSH: u8 = 0x60;
pub const ALU_RSH: u8 = 0x70;
pub const ALU_NEG: u8 = 0x80;
pub const ALU_MOD: u8 = 0x90;
pub const ALU_XOR: u8 = 0xa0;
pub const ALU_MOV: u8 = 0xb0;
pub const ALU_ARSH: u8 = 0xc0;

pub const JMP_JA: u8 = 0x00;
pub const JMP_JEQ: u8 = 0x10;
pub const JMP_JGT: u8 = 0x20;
pub const JMP_JGE: u8 = 0x30;
pub const JMP_JSET: u8 = 0x40;
pub const JMP_JNE: u8 = 0x50;
pub const JMP_JSGT: u8 = 0x60;
pub const JMP_JSGE: u8 = 0x70;
pub const JMP_CALL: u8 = 0x80;
pub const JMP_EXIT: u8 = 0x90;
pub const JMP_JLT: u8 = 0xa0;
pub const JMP_JLE: u8 = 0xb0;
pub const JMP_JSLT: u8 = 0xc0;
pub const JMP_JSLE: u8 = 0xd0;

pub const OP_LDDW: u8 = CLASS_LD | MODE_IMM | SIZE_DW;
pub const OP_CALL: u8 = CLASS_JMP | JMP_CALL;
pub const OP_EXIT: u8 = CLASS_JMP | JMP_EXIT;
pub const OP_JA: u8 = CLASS_JMP | JMP_JA;

/// Helper ids callable with `call`.
pub const HELPER_MAP_GET: i32 = 1;
pub const HELPER_MAP_PUT: i32 = 2;
pub const HELPER_MAP_DELETE: i32 = 3;
pub const HELPER_SESSION_TICK: i32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Insn {
    pub op: u8,
    pub dst: u8,
    pub src: u8,
    pub off: i16,
    pub imm: i32,
}

impl Insn {
    pub fn new(op: u8, dst: u8, src: u8, off: i16, imm: i32) -> Insn {
        Insn {
            op,
            dst,
            src,
            off,
            imm,
        }
    }

    pub fn class(&self) -> u8 {
        self.op & 0x07
    }

    pub fn encode(&self) -> [u8; INSN_SIZE] {
        let mut b = [0u8; INSN_SIZE];
        b[0] = self.op;
        b[1] = (self.dst & 0x0f) | (self.src << 4);
        b[2..4].copy_from_slice(&self.off.to_le_bytes());
        b[4..8].copy_from_slice(&self.imm.to_le_bytes());
        b
    }

    pub fn decode(b: &[u8]) -> Insn {
        Insn {
            op: b[0],
            dst: b[1] & 0x0f,
            src: b[1] >> 4,
            off: i16::from_le_bytes([b[2], b[3]]),
            imm: i32::from_le_bytes([b[4], b[5], b[6], b[7]]),
        }
    }
}

/// Splits bytecode into instructions. The caller checks the length is a
/// multiple of [`INSN_SIZE`].
pub fn decode_all(bytecode: &[u8]) -> Vec<Insn> {
    bytecode.chunks_exact(INSN_SIZE).map(Insn::decode).collect()
}

pub fn encode_all(insns: &[Insn]) -> Vec<u8> {
    insns.iter().flat_map(|i| i.encode()).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("asm line {line}: {reason}")]
pub struct AsmError {
    pub line: usize,
    pub reason: String,
}

const ALU_NAMES: [(&str, u8); 13] = [
    ("add", ALU_ADD),
    ("sub", ALU_SUB),
    ("mul", ALU_MUL),
    ("div", ALU_DIV),
    ("or", ALU_OR),
    ("and", ALU_AND),
    ("lsh", ALU_LSH),
    ("rsh", ALU_RSH),
    ("neg", ALU_NEG),
    ("mod", ALU_MOD),
    ("xor", ALU_XOR),
    ("mov", ALU_MOV),
    ("arsh", ALU_ARSH),
];

const JMP_NAMES: [(&str, u8); 11] = [
    ("jeq", JMP_JEQ),
    ("jgt", JMP_JGT),
    ("jge", JMP_JGE),
    ("jset", JMP_JSET),
    ("jne", JMP_JNE),
    ("jsgt", JMP_JSGT),
    ("jsge", JMP_JSGE),
    ("jlt", JMP_JLT),
    ("jle", JMP_JLE),
    ("jslt", JMP_JSLT),
    ("jsle", JMP_JSLE),
];

const SIZE_NAMES: [(&str, u8); 4] = [("b", SIZE_B), ("h", SIZE_H), ("w", SIZE_W), ("dw", SIZE_DW)];

fn parse_reg(s: &str) -> Option<u8> {
    let n: u8 = s.trim().strip_prefix('r')?.parse().ok()?;
    (n <= 10).then_some(n)
}

fn parse_int(s: &str) -> Option<i64> {
    let s = s.trim();
    let (neg, body) = match s.strip_prefix('-') {
        Some(b) => (true, b),
        None => (false, s),
    };
    let v = if let Some(h) = body.strip_prefix("0x") {
        i64::from_str_radix(h, 16)
            .ok()
            .or_else(|| u64::from_str_radix(h, 16).ok().map(|u| u as i64))?
    } else {
        body.parse::<i64>().ok()?
    };
    Some(if neg { v.wrapping_neg() } else { v })
}

fn imm32(v: i64) -> Option<i32> {
    if (i32::MIN as i64..=u32::MAX as i64).contains(&v) {
        Some(v as u32 as i32)
    } else {
        None
    }
}

/// Parses `[rN+off]` / `[rN-off]` / `[rN]`.
fn parse_mem(s: &str) -> Option<(u8, i16)> {
    let inner = s.trim().strip_prefix('[')?.strip_suffix(']')?.trim();
    let split = inner.find(['+', '-']);
    match split {
        None => Some((parse_reg(inner)?, 0)),
        Some(i) => {
            let reg = parse_reg(&inner[..i])?;
            let off = parse_int(&inner[i..].replace('+', ""))?;
            Some((reg, i16::try_from(off).ok()?))
        }
    }
}

fn split_operands(rest: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0;
    let mut cur = String::new();
    for c in rest.chars() {
        match c {
            '[' => {
                depth += 1;
                cur.push(c)
            }
            ']' => {
                depth -= 1;
                cur.push(c)
            }
            ',' if depth == 0 => {
                out.push(cur.trim().to_string());
                cur.clear();
            }
            _ => cur.push(c),
        }
    }
    if !cur.trim().is_empty() {
        out.push(cur.trim().to_string());
    }
    out
}

enum Pending {
    Done(Insn),
    Jump(Insn, String),
    Wide(Insn, i64),
}

/// Assembles the text form into bytecode. Labels end with `:`; comments start
/// with `;` or `#`. Jump operands may be labels or `+N`/`-N` relative offsets.
pub fn assemble(src: &str) -> Result<Vec<u8>, AsmError> {
    let mut labels: HashMap<String, usize> = HashMap::new();
    let mut items: Vec<(usize, Pending)> = Vec::new();
    let mut slot = 0usize;
    for (n, raw_line) in src.lines().enumerate() {
        let lineno = n + 1;
        let err = |reason: String| AsmError {
            line: lineno,
            reason,
        };
        let mut line = raw_line;
        if let Some(i) = line.find([';', '#']) {
            line = &line[..i];
        }
        let mut line = line.trim();
        while let Some(i) = line.find(':') {
            let label = line[..i].trim();
            if label.is_empty() || label.contains(char::is_whitespace) {
                return Err(err(format!("bad label `{label}`")));
            }
            if labels.insert(label.to_string(), slot).is_some() {
                return Err(err(format!("duplicate label `{label}`")));
            }
            line = line[i + 1..].trim();
        }
        if line.is_empty() {
            continue;
        }
        let (mn, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
        let ops = split_operands(rest);
        let reg = |i: usize| -> Result<u8, AsmError> {
            ops.get(i)
                .and_then(|s| parse_reg(s))
                .ok_or_else(|| err(format!("operand {} of `{mn}` must be a register", i + 1)))
        };
        let want = |k: usize| -> Result<(), AsmError> {
            if ops.len() == k {
                Ok(())
            } else {
                Err(err(format!("`{mn}` takes {k} operands, got {}", ops.len())))
            }
        };
        let item = if mn == "exit" {
            want(0)?;
            Pending::Done(Insn::new(OP_EXIT, 0, 0, 0, 0))
        } else if mn == "call" {
            want(1)?;
            let v = parse_int(&ops[0])
                .and_then(imm32)
                .ok_or_else(|| err("bad helper id".into()))?;
            Pending::Done(Insn::new(OP_CALL, 0, 0, 0, v))
        } else if mn == "lddw" {
            want(2)?;
            let v = parse_int(&ops[1]).ok_or_else(|| err("bad immediate".into()))?;
            Pending::Wide(Insn::new(OP_LDDW, reg(0)?, 0, 0, 0), v)
        } else if mn == "ja" {
            want(1)?;
            Pending::Jump(Insn::new(OP_JA, 0, 0, 0, 0), ops[0].clone())
        } else if let Some((_, code)) = JMP_NAMES.iter().find(|(n, _)| *n == mn) {
            want(3)?;
            let dst = reg(0)?;
            let insn = match parse_reg(&ops[1]) {
                Some(s) => Insn::new(CLASS_JMP | code | SRC_X, dst, s, 0, 0),
                None => {
                    let v = parse_int(&ops[1])
                        .and_then(imm32)
                        .ok_or_else(|| err("bad immediate".into()))?;
                    Insn::new(CLASS_JMP | code | SRC_K, dst, 0, 0, v)
                }
            };
            Pending::Jump(insn, ops[2].clone())
        } else if let Some(sz) = mn.strip_prefix("ldx") {
            want(2)?;
            let (_, size) = SIZE_NAMES
                .iter()
                .find(|(n, _)| *n == sz)
                .ok_or_else(|| err(format!("unknown mnemonic `{mn}`")))?;
            let (src, off) = parse_mem(&ops[1]).ok_or_else(|| err("bad memory operand".into()))?;
            Pending::Done(Insn::new(CLASS_LDX | MODE_MEM | size, reg(0)?, src, off, 0))
        } else if let Some(sz) = mn.strip_prefix("stx") {
            want(2)?;
            let (_, size) = SIZE_NAMES
                .iter()
                .find(|(n, _)| *n == sz)
                .ok_or_else(|| err(format!("unknown mnemonic `{mn}`")))?;
            let (dst, off) = parse_mem(&ops[0]).ok_or_else(|| err("bad memory operand".into()))?;
            Pending::Done(Insn::new(CLASS_STX | MODE_MEM | size, dst, reg(1)?, off, 0))
        } else if let Some((_, size)) = mn
            .strip_prefix("st")
            .and_then(|sz| SIZE_NAMES.iter().find(|(n, _)| *n == sz))
        {
            want(2)?;
            let (dst, off) = parse_mem(&ops[0]).ok_or_else(|| err("bad memory operand".into()))?;
            let v = parse_int(&ops[1])
                .and_then(imm32)
                .ok_or_else(|| err("bad immediate".into()))?;
            Pending::Done(Insn::new(CLASS_ST | MODE_MEM | size, dst, 0, off, v))
        } else {
            let (base, class) = match mn.strip_suffix("32") {
                Some(b) => (b, CLASS_ALU),
                None => (mn, CLASS_ALU64),
            };
            let (_, code) = ALU_NAMES
                .iter()
                .find(|(n, _)| *n == base)
                .ok_or_else(|| err(format!("unknown mnemonic `{mn}`")))?;
            if *code == ALU_NEG {
                want(1)?;
                Pending::Done(Insn::new(class | ALU_NEG, reg(0)?, 0, 0, 0))
            } else {
                want(2)?;
                let dst = reg(0)?;
                match parse_reg(&ops[1]) {
                    Some(s) => Pending::Done(Insn::new(class | code | SRC_X, dst, s, 0, 0)),
                    None => {
                        let v = parse_int(&ops[1])
                            .and_then(imm32)
                            .ok_or_else(|| err("bad immediate".into()))?;
                        Pending::Done(Insn::new(class | code | SRC_K, dst, 0, 0, v))
                    }
                }
            }
        };
        slot += if matches!(item, Pending::Wide(..)) {
            2
        } else {
            1
        };
        items.push((lineno, item));
    }
    let mut out = Vec::with_capacity(slot);
    for (lineno, item) in items {
        match item {
            Pending::Done(i) => out.push(i),
            Pending::Wide(mut i, v) => {
                i.imm = v as u32 as i32;
                out.push(i);
                out.push(Insn::new(0, 0, 0, 0, ((v as u64) >> 32) as u32 as i32));
            }
            Pending::Jump(mut i, target) => {
                let here = out.len() as i64;
                let off = if let Some(rel) = target.strip_prefix('+') {
                    parse_int(rel)
                } else if target.starts_with('-') {
                    parse_int(&target)
                } else {
                    labels.get(&target).map(|t| *t as i64 - here - 1)
                }
                .ok_or_else(|| AsmError {
                    line: lineno,
                    reason: format!("unknown label `{target}`"),
                })?;
                i.off = i16::try_from(off).map_err(|_| AsmError {
                    line: lineno,
                    reason: "jump too far".into(),
                })?;
                out.push(i);
            }
        }
    }
    Ok(encode_all(&out))
}

struct Dis<'a>(&'a Insn, Option<i64>);

impl fmt::Display for Dis<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let i = self.0;
        let size_name = |op: u8| {
            SIZE_NAMES
                .iter()
                .find(|(_, s)| *s == op & 0x18)
                .map(|(n, _)| *n)
                .unwrap_or("?")
        };
        let mem = |r: u8, off: i16| {
            if off < 0 {
                format!("[r{r}{off}]")
            } else {
                format!("[r{r}+{off}]")
            }
        };
        match i.class() {
            CLASS_ALU | CLASS_ALU64 => {
                let suffix = if i.class() == CLASS_ALU { "32" } else { "" };
                let name = ALU_NAMES
                    .iter()
                    .find(|(_, c)| *c == i.op & 0xf0)
                    .map(|(n, _)| *n)
                    .unwrap_or("alu?");
                if i.op & 0xf0 == ALU_NEG {
                    write!(f, "neg{suffix} r{}", i.dst)
                } else if i.op & SRC_X != 0 {
                    write!(f, "{name}{suffix} r{}, r{}", i.dst, i.src)
                } else {
                    write!(f, "{name}{suffix} r{}, {}", i.dst, i.imm)
                }
            }
            CLASS_JMP => {
                let target = || match self.1 {
                    Some(t) => format!("L{t}"),
                    None => format!("{:+}", i.off),
                };
                match i.op & 0xf0 {
                    JMP_EXIT => write!(f, "exit"),
                    JMP_CALL => write!(f, "call {}", i.imm),
                    JMP_JA => write!(f, "ja {}", target()),
                    code => {
                        let name = JMP_NAMES
                            .iter()
                            .find(|(_, c)| *c == code)
                            .map(|(n, _)| *n)
                            .unwrap_or("j?");
                        if i.op & SRC_X != 0 {
                            write!(f, "{name} r{}, r{}, {}", i.dst, i.src, target())
                        } else {
                            write!(f, "{name} r{}, {}, {}", i.dst, i.imm, target())
                        }
                    }
                }
            }
            CLASS_LDX => write!(
                f,
                "ldx{} r{}, {}",
                size_name(i.op),
                i.dst,
                mem(i.src, i.off)
            ),
            CLASS_STX => write!(
                f,
                "stx{} {}, r{}",
                size_name(i.op),
                mem(i.dst, i.off),
                i.src
            ),
            CLASS_ST => write!(f, "st{} {}, {}", size_name(i.op), mem(i.dst, i.off), i.imm),
            _ => write!(f, ".raw {:#04x}", i.op),
        }
    }
}

/// Renders bytecode as assembler text that [`assemble`] maps back to the
/// same bytes. Jump targets become `L<index>` labels.
pub fn disassemble(bytecode: &[u8]) -> String {
    let insns = decode_all(bytecode);
    let mut targets = std::collections::BTreeSet::new();
    let mut pc = 0;
    while pc < insns.len() {
        let i = &insns[pc];
        if i.class() == CLASS_JMP && !matches!(i.op & 0xf0, JMP_CALL | JMP_EXIT) {
            targets.insert(pc as i64 + 1 + i64::from(i.off));
        }
        pc += if i.op == OP_LDDW { 2 } else { 1 };
    }
    let mut out = String::new();
    let mut pc = 0;
    while pc < insns.len() {
        if targets.contains(&(pc as i64)) {
            out.push_str(&format!("L{pc}:\n"));
        }
        let i = &insns[pc];
        if i.op == OP_LDDW {
            let hi = insns.get(pc + 1).map_or(0, |n| n.imm as u32 as u64);
            let v = (hi << 32) | i.imm as u32 as u64;
            out.push_str(&format!("    lddw r{}, {:#x}\n", i.dst, v));
            pc += 2;
            continue;
        }
        let target = (i.class() == CLASS_JMP && !matches!(i.op & 0xf0, JMP_CALL | JMP_EXIT))
            .then(|| pc as i64 + 1 + i64::from(i.off))
            .filter(|t| *t >= 0 && (*t as usize) <= insns.len());
        out.push_str(&format!("    {}\n", Dis(i, target)));
        pc += 1;
    }
    if targets.contains(&(insns.len() as i64)) {
        out.push_str(&format!("L{}:\n", insns.len()));
    }
    out
}
