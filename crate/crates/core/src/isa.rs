//! MiniRV: a small 32-bit instruction set with a 16-bit compressed subset.
//!
//! Every 4-byte instruction has `0b11` in bits `[1:0]` and its major opcode in
//! bits `[6:2]`. Anything else in the low two bits of the first byte selects a
//! 2-byte compressed encoding. The full field tables live in `docs/isa.md`.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IsaError {
    #[error("illegal encoding {word:#010x}")]
    IllegalEncoding { word: u32 },
    #[error("truncated instruction: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("immediate {value} out of range for {what}")]
    ImmediateOutOfRange { what: &'static str, value: i64 },
    #[error("address {0:#010x} is not 2-byte aligned")]
    Misaligned(u32),
    #[error("address {0:#010x} is outside every code section")]
    OutOfSection(u32),
}

/// One of the sixteen architectural registers.
///
/// Convention: r0 zero, r1 link, r2 sp, r3..r9 temporaries, r10 return
/// value / first argument, r11..r13 arguments, r14..r15 saved.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Reg(u8);

impl Reg {
    pub const ZERO: Reg = Reg(0);
    pub const LINK: Reg = Reg(1);
    pub const SP: Reg = Reg(2);
    pub const RET: Reg = Reg(10);
    pub const COUNT: usize = 16;

    pub const fn new(index: u8) -> Option<Reg> {
        if index < 16 {
            Some(Reg(index))
        } else {
            None
        }
    }

    /// Panics when `index >= 16`; for tables and code generators with
    /// constant register numbers.
    pub const fn r(index: u8) -> Reg {
        assert!(index < 16, "register index out of range");
        Reg(index)
    }

    pub const fn index(self) -> usize {
        self.0 as usize
    }

    pub fn all() -> impl Iterator<Item = Reg> {
        (0..16).map(Reg)
    }

    pub fn is_temporary(self) -> bool {
        (3..=9).contains(&self.0)
    }

    /// Registers a call may clobber.
    pub fn is_caller_saved(self) -> bool {
        (3..=13).contains(&self.0) || self.0 == 1
    }
}

impl fmt::Debug for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            0 => f.write_str("zero"),
            2 => f.write_str("sp"),
            n => write!(f, "r{n}"),
        }
    }
}

impl std::str::FromStr for Reg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        match s {
            "zero" => return Ok(Reg::ZERO),
            "sp" => return Ok(Reg::SP),
            "ra" | "lr" => return Ok(Reg::LINK),
            _ => {}
        }
        let digits = s
            .strip_prefix('r')
            .ok_or_else(|| format!("bad register `{s}`"))?;
        let n: u8 = digits.parse().map_err(|_| format!("bad register `{s}`"))?;
        Reg::new(n).ok_or_else(|| format!("register `{s}` out of range"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BranchCond {
    Eq,
    Ne,
    Lt,
    Ltu,
    Geu,
}

impl BranchCond {
    pub fn holds(self, a: u32, b: u32) -> bool {
        match self {
            BranchCond::Eq => a == b,
            BranchCond::Ne => a != b,
            BranchCond::Lt => (a as i32) < (b as i32),
            BranchCond::Ltu => a < b,
            BranchCond::Geu => a >= b,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Width {
    Word,
    Half,
    Byte,
}

impl Width {
    pub fn bytes(self) -> u32 {
        match self {
            Width::Word => 4,
            Width::Half => 2,
            Width::Byte => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ImmOp {
    Addi,
    Andi,
    Ori,
    Xori,
    Sltiu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RegOp {
    Add,
    Sub,
    And,
    Or,
    Xor,
    Sll,
    Srl,
    Slt,
}

impl RegOp {
    pub fn apply(self, a: u32, b: u32) -> u32 {
        match self {
            RegOp::Add => a.wrapping_add(b),
            RegOp::Sub => a.wrapping_sub(b),
            RegOp::And => a & b,
            RegOp::Or => a | b,
            RegOp::Xor => a ^ b,
            RegOp::Sll => a.wrapping_shl(b & 31),
            RegOp::Srl => a.wrapping_shr(b & 31),
            RegOp::Slt => ((a as i32) < (b as i32)) as u32,
        }
    }
}

impl ImmOp {
    pub fn apply(self, a: u32, imm: i32) -> u32 {
        let b = imm as u32;
        match self {
            ImmOp::Addi => a.wrapping_add(b),
            ImmOp::Andi => a & b,
            ImmOp::Ori => a | b,
            ImmOp::Xori => a ^ b,
            ImmOp::Sltiu => (a < b) as u32,
        }
    }
}

/// A decoded instruction.
///
/// `Nop` is the canonical form of `ADDI r0, r0, 0`; an `OpImm` value with
/// exactly those operands is not well-formed and never produced by `decode`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Instruction {
    Lui { rd: Reg, imm: u32 },
    Auipc { rd: Reg, imm: u32 },
    Jal { rd: Reg, offset: i32 },
    Jalr { rd: Reg, rs1: Reg, offset: i32 },
    Branch { cond: BranchCond, rs1: Reg, rs2: Reg, offset: i32 },
    Load { width: Width, rd: Reg, base: Reg, offset: i32 },
    Store { width: Width, src: Reg, base: Reg, offset: i32 },
    OpImm { op: ImmOp, rd: Reg, rs1: Reg, imm: i32 },
    Op { op: RegOp, rd: Reg, rs1: Reg, rs2: Reg },
    Ebreak,
    Eret,
    Idle,
    Nop,
    CNop,
    CAddi { rd: Reg, imm: i32 },
    CMv { rd: Reg, rs: Reg },
    CJr { rs: Reg },
    CEbreak,
}

/// Mnemonic-level view, used by diff reports and the assembler.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mnemonic {
    Lui,
    Auipc,
    Jal,
    Jalr,
    Beq,
    Bne,
    Blt,
    Bltu,
    Bgeu,
    Lw,
    Lh,
    Lb,
    Sw,
    Sh,
    Sb,
    Addi,
    Andi,
    Ori,
    Xori,
    Sltiu,
    Add,
    Sub,
    And,
    Or,
    Xor,
    Sll,
    Srl,
    Slt,
    Ebreak,
    Eret,
    Idle,
    Nop,
    CNop,
    CAddi,
    CMv,
    CJr,
    CEbreak,
}

pub const IMM17_MIN: i32 = -(1 << 16);
pub const IMM17_MAX: i32 = (1 << 16) - 1;
pub const UIMM20_MAX: u32 = (1 << 20) - 1;
pub const CADDI_MIN: i32 = -64;
pub const CADDI_MAX: i32 = 63;

mod op {
    pub const LUI: u32 = 1;
    pub const AUIPC: u32 = 2;
    pub const JAL: u32 = 3;
    pub const JALR: u32 = 4;
    pub const BEQ: u32 = 5;
    pub const BNE: u32 = 6;
    pub const BLT: u32 = 7;
    pub const BLTU: u32 = 8;
    pub const BGEU: u32 = 9;
    pub const LW: u32 = 10;
    pub const LH: u32 = 11;
    pub const LB: u32 = 12;
    pub const SW: u32 = 13;
    pub const SH: u32 = 14;
    pub const SB: u32 = 15;
    pub const ADDI: u32 = 16;
    pub const ANDI: u32 = 17;
    pub const ORI: u32 = 18;
    pub const XORI: u32 = 19;
    pub const SLTIU: u32 = 20;
    pub const ADD: u32 = 21;
    pub const SUB: u32 = 22;
    pub const AND: u32 = 23;
    pub const OR: u32 = 24;
    pub const XOR: u32 = 25;
    pub const SLL: u32 = 26;
    pub const SRL: u32 = 27;
    pub const SLT: u32 = 28;
    pub const EBREAK: u32 = 29;
    pub const ERET: u32 = 30;
    pub const IDLE: u32 = 31;
}

mod cfunct {
    pub const NOP: u16 = 0;
    pub const ADDI: u16 = 1;
    pub const MV: u16 = 2;
    pub const JR: u16 = 3;
    pub const EBREAK: u16 = 4;
}

impl Instruction {
    pub const TRAMPOLINE: Instruction = Instruction::Jalr {
        rd: Reg::ZERO,
        rs1: Reg::LINK,
        offset: 0,
    };

    pub fn len(&self) -> u32 {
        if self.is_compressed() {
            2
        } else {
            4
        }
    }

    pub fn is_compressed(&self) -> bool {
        matches!(
            self,
            Instruction::CNop
                | Instruction::CAddi { .. }
                | Instruction::CMv { .. }
                | Instruction::CJr { .. }
                | Instruction::CEbreak
        )
    }

    /// False only for the non-canonical spelling of NOP.
    pub fn is_canonical(&self) -> bool {
        !matches!(
            self,
            Instruction::OpImm {
                op: ImmOp::Addi,
                rd: Reg::ZERO,
                rs1: Reg::ZERO,
                imm: 0
            }
        )
    }

    pub fn mnemonic(&self) -> Mnemonic {
        use Instruction as I;
        match *self {
            I::Lui { .. } => Mnemonic::Lui,
            I::Auipc { .. } => Mnemonic::Auipc,
            I::Jal { .. } => Mnemonic::Jal,
            I::Jalr { .. } => Mnemonic::Jalr,
            I::Branch { cond, .. } => match cond {
                BranchCond::Eq => Mnemonic::Beq,
                BranchCond::Ne => Mnemonic::Bne,
                BranchCond::Lt => Mnemonic::Blt,
                BranchCond::Ltu => Mnemonic::Bltu,
                BranchCond::Geu => Mnemonic::Bgeu,
            },
            I::Load { width, .. } => match width {
                Width::Word => Mnemonic::Lw,
                Width::Half => Mnemonic::Lh,
                Width::Byte => Mnemonic::Lb,
            },
            I::Store { width, .. } => match width {
                Width::Word => Mnemonic::Sw,
                Width::Half => Mnemonic::Sh,
                Width::Byte => Mnemonic::Sb,
            },
            I::OpImm { op, .. } => match op {
                ImmOp::Addi => Mnemonic::Addi,
                ImmOp::Andi => Mnemonic::Andi,
                ImmOp::Ori => Mnemonic::Ori,
                ImmOp::Xori => Mnemonic::Xori,
                ImmOp::Sltiu => Mnemonic::Sltiu,
            },
            I::Op { op, .. } => match op {
                RegOp::Add => Mnemonic::Add,
                RegOp::Sub => Mnemonic::Sub,
                RegOp::And => Mnemonic::And,
                RegOp::Or => Mnemonic::Or,
                RegOp::Xor => Mnemonic::Xor,
                RegOp::Sll => Mnemonic::Sll,
                RegOp::Srl => Mnemonic::Srl,
                RegOp::Slt => Mnemonic::Slt,
            },
            I::Ebreak => Mnemonic::Ebreak,
            I::Eret => Mnemonic::Eret,
            I::Idle => Mnemonic::Idle,
            I::Nop => Mnemonic::Nop,
            I::CNop => Mnemonic::CNop,
            I::CAddi { .. } => Mnemonic::CAddi,
            I::CMv { .. } => Mnemonic::CMv,
            I::CJr { .. } => Mnemonic::CJr,
            I::CEbreak => Mnemonic::CEbreak,
        }
    }

    /// Register written by this instruction, if any (writes to r0 excluded).
    pub fn dest(&self) -> Option<Reg> {
        use Instruction as I;
        let rd = match *self {
            I::Lui { rd, .. }
            | I::Auipc { rd, .. }
            | I::Jal { rd, .. }
            | I::Jalr { rd, .. }
            | I::Load { rd, .. }
            | I::OpImm { rd, .. }
            | I::Op { rd, .. }
            | I::CAddi { rd, .. }
            | I::CMv { rd, .. } => rd,
            _ => return None,
        };
        (rd != Reg::ZERO).then_some(rd)
    }

    pub fn is_breakpoint(&self) -> bool {
        matches!(self, Instruction::Ebreak | Instruction::CEbreak)
    }

    pub fn is_jump(&self) -> bool {
        matches!(
            self,
            Instruction::Jal { .. } | Instruction::Jalr { .. } | Instruction::CJr { .. }
        )
    }

    /// True when the instruction changes the stack pointer.
    pub fn writes_sp(&self) -> bool {
        self.dest() == Some(Reg::SP)
    }
}

fn check_imm17(what: &'static str, v: i32) -> Result<u32, IsaError> {
    if (IMM17_MIN..=IMM17_MAX).contains(&v) {
        Ok((v as u32) & 0x1_FFFF)
    } else {
        Err(IsaError::ImmediateOutOfRange {
            what,
            value: v as i64,
        })
    }
}

fn check_even(what: &'static str, v: i32) -> Result<i32, IsaError> {
    if v % 2 != 0 {
        Err(IsaError::ImmediateOutOfRange {
            what,
            value: v as i64,
        })
    } else {
        Ok(v / 2)
    }
}

fn sext(v: u32, bits: u32) -> i32 {
    let shift = 32 - bits;
    ((v << shift) as i32) >> shift
}

fn word(opcode: u32, a: Reg, b: Reg, c: Reg) -> u32 {
    0b11 | (opcode << 2) | ((a.0 as u32) << 7) | ((b.0 as u32) << 11) | ((c.0 as u32) << 15)
}

fn word_imm(opcode: u32, a: Reg, b: Reg, imm17: u32) -> u32 {
    0b11 | (opcode << 2) | ((a.0 as u32) << 7) | ((b.0 as u32) << 11) | (imm17 << 15)
}

fn word_u20(opcode: u32, a: Reg, imm20: u32) -> u32 {
    0b11 | (opcode << 2) | ((a.0 as u32) << 7) | (imm20 << 11)
}

/// Encodes one instruction to little-endian bytes.
pub fn encode(instr: &Instruction) -> Result<Vec<u8>, IsaError> {
    use Instruction as I;
    if instr.is_compressed() {
        let half: u16 = match *instr {
            I::CNop => 0b01 | (cfunct::NOP << 2),
            I::CAddi { rd, imm } => {
                if !(CADDI_MIN..=CADDI_MAX).contains(&imm) {
                    return Err(IsaError::ImmediateOutOfRange {
                        what: "C.ADDI imm7",
                        value: imm as i64,
                    });
                }
                0b01 | (cfunct::ADDI << 2) | ((rd.0 as u16) << 5) | (((imm as u16) & 0x7F) << 9)
            }
            I::CMv { rd, rs } => {
                0b01 | (cfunct::MV << 2) | ((rd.0 as u16) << 5) | ((rs.0 as u16) << 9)
            }
            I::CJr { rs } => 0b01 | (cfunct::JR << 2) | ((rs.0 as u16) << 5),
            I::CEbreak => 0b01 | (cfunct::EBREAK << 2),
            _ => unreachable!(),
        };
        return Ok(half.to_le_bytes().to_vec());
    }
    let w = match *instr {
        I::Lui { rd, imm } | I::Auipc { rd, imm } => {
            if imm > UIMM20_MAX {
                return Err(IsaError::ImmediateOutOfRange {
                    what: "U-type imm20",
                    value: imm as i64,
                });
            }
            let opc = if matches!(instr, I::Lui { .. }) {
                op::LUI
            } else {
                op::AUIPC
            };
            word_u20(opc, rd, imm)
        }
        I::Jal { rd, offset } => {
            let half = check_even("JAL offset", offset)?;
            if !(-(1 << 19)..(1 << 19)).contains(&half) {
                return Err(IsaError::ImmediateOutOfRange {
                    what: "JAL offset",
                    value: offset as i64,
                });
            }
            word_u20(op::JAL, rd, (half as u32) & 0xF_FFFF)
        }
        I::Jalr { rd, rs1, offset } => {
            word_imm(op::JALR, rd, rs1, check_imm17("JALR offset", offset)?)
        }
        I::Branch {
            cond,
            rs1,
            rs2,
            offset,
        } => {
            let half = check_even("branch offset", offset)?;
            let opc = match cond {
                BranchCond::Eq => op::BEQ,
                BranchCond::Ne => op::BNE,
                BranchCond::Lt => op::BLT,
                BranchCond::Ltu => op::BLTU,
                BranchCond::Geu => op::BGEU,
            };
            word_imm(opc, rs1, rs2, check_imm17("branch offset", half)?)
        }
        I::Load {
            width,
            rd,
            base,
            offset,
        } => {
            let opc = match width {
                Width::Word => op::LW,
                Width::Half => op::LH,
                Width::Byte => op::LB,
            };
            word_imm(opc, rd, base, check_imm17("load offset", offset)?)
        }
        I::Store {
            width,
            src,
            base,
            offset,
        } => {
            let opc = match width {
                Width::Word => op::SW,
                Width::Half => op::SH,
                Width::Byte => op::SB,
            };
            word_imm(opc, src, base, check_imm17("store offset", offset)?)
        }
        I::OpImm { op: o, rd, rs1, imm } => {
            let opc = match o {
                ImmOp::Addi => op::ADDI,
                ImmOp::Andi => op::ANDI,
                ImmOp::Ori => op::ORI,
                ImmOp::Xori => op::XORI,
                ImmOp::Sltiu => op::SLTIU,
            };
            word_imm(opc, rd, rs1, check_imm17("I-type imm17", imm)?)
        }
        I::Op { op: o, rd, rs1, rs2 } => {
            let opc = match o {
                RegOp::Add => op::ADD,
                RegOp::Sub => op::SUB,
                RegOp::And => op::AND,
                RegOp::Or => op::OR,
                RegOp::Xor => op::XOR,
                RegOp::Sll => op::SLL,
                RegOp::Srl => op::SRL,
                RegOp::Slt => op::SLT,
            };
            word(opc, rd, rs1, rs2)
        }
        I::Ebreak => 0b11 | (op::EBREAK << 2),
        I::Eret => 0b11 | (op::ERET << 2),
        I::Idle => 0b11 | (op::IDLE << 2),
        I::Nop => word_imm(op::ADDI, Reg::ZERO, Reg::ZERO, 0),
        _ => unreachable!(),
    };
    Ok(w.to_le_bytes().to_vec())
}

/// Length implied by the first byte of an encoding.
pub fn length_from_first_byte(b: u8) -> u32 {
    if b & 0b11 == 0b11 {
        4
    } else {
        2
    }
}

/// Decodes the instruction at the start of `bytes`.
pub fn decode(bytes: &[u8]) -> Result<Instruction, IsaError> {
    let first = *bytes.first().ok_or(IsaError::Truncated { need: 2, have: 0 })?;
    let len = length_from_first_byte(first) as usize;
    if bytes.len() < len {
        return Err(IsaError::Truncated {
            need: len,
            have: bytes.len(),
        });
    }
    if len == 2 {
        decode16(u16::from_le_bytes([bytes[0], bytes[1]]))
    } else {
        decode32(u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]))
    }
}

fn decode16(h: u16) -> Result<Instruction, IsaError> {
    let illegal = || IsaError::IllegalEncoding { word: h as u32 };
    if h & 0b11 != 0b01 {
        return Err(illegal());
    }
    let funct = (h >> 2) & 0b111;
    let a = Reg(((h >> 5) & 0xF) as u8);
    let b = Reg(((h >> 9) & 0xF) as u8);
    let rest_after_a = h >> 9;
    match funct {
        cfunct::NOP if h >> 5 == 0 => Ok(Instruction::CNop),
        cfunct::ADDI => Ok(Instruction::CAddi {
            rd: a,
            imm: sext((h >> 9) as u32, 7),
        }),
        cfunct::MV if h >> 13 == 0 => Ok(Instruction::CMv { rd: a, rs: b }),
        cfunct::JR if rest_after_a == 0 => Ok(Instruction::CJr { rs: a }),
        cfunct::EBREAK if h >> 5 == 0 => Ok(Instruction::CEbreak),
        _ => Err(illegal()),
    }
}

fn decode32(w: u32) -> Result<Instruction, IsaError> {
    use Instruction as I;
    let illegal = || IsaError::IllegalEncoding { word: w };
    let opc = (w >> 2) & 0x1F;
    let a = Reg(((w >> 7) & 0xF) as u8);
    let b = Reg(((w >> 11) & 0xF) as u8);
    let c = Reg(((w >> 15) & 0xF) as u8);
    let imm17 = sext(w >> 15, 17);
    let u20 = (w >> 11) & 0xF_FFFF;
    let top_bit_clear = w >> 31 == 0;
    let r_reserved_clear = w >> 19 == 0;
    let sys_clear = w >> 7 == 0;
    let instr = match opc {
        op::LUI if top_bit_clear => I::Lui { rd: a, imm: u20 },
        op::AUIPC if top_bit_clear => I::Auipc { rd: a, imm: u20 },
        op::JAL if top_bit_clear => I::Jal {
            rd: a,
            offset: sext(u20, 20) * 2,
        },
        op::JALR => I::Jalr {
            rd: a,
            rs1: b,
            offset: imm17,
        },
        op::BEQ | op::BNE | op::BLT | op::BLTU | op::BGEU => I::Branch {
            cond: match opc {
                op::BEQ => BranchCond::Eq,
                op::BNE => BranchCond::Ne,
                op::BLT => BranchCond::Lt,
                op::BLTU => BranchCond::Ltu,
                _ => BranchCond::Geu,
            },
            rs1: a,
            rs2: b,
            offset: imm17 * 2,
        },
        op::LW | op::LH | op::LB => I::Load {
            width: match opc {
                op::LW => Width::Word,
                op::LH => Width::Half,
                _ => Width::Byte,
            },
            rd: a,
            base: b,
            offset: imm17,
        },
        op::SW | op::SH | op::SB => I::Store {
            width: match opc {
                op::SW => Width::Word,
                op::SH => Width::Half,
                _ => Width::Byte,
            },
            src: a,
            base: b,
            offset: imm17,
        },
        op::ADDI if a == Reg::ZERO && b == Reg::ZERO && imm17 == 0 => I::Nop,
        op::ADDI | op::ANDI | op::ORI | op::XORI | op::SLTIU => I::OpImm {
            op: match opc {
                op::ADDI => ImmOp::Addi,
                op::ANDI => ImmOp::Andi,
                op::ORI => ImmOp::Ori,
                op::XORI => ImmOp::Xori,
                _ => ImmOp::Sltiu,
            },
            rd: a,
            rs1: b,
            imm: imm17,
        },
        op::ADD..=op::SLT if r_reserved_clear => I::Op {
            op: match opc {
                op::ADD => RegOp::Add,
                op::SUB => RegOp::Sub,
                op::AND => RegOp::And,
                op::OR => RegOp::Or,
                op::XOR => RegOp::Xor,
                op::SLL => RegOp::Sll,
                op::SRL => RegOp::Srl,
                _ => RegOp::Slt,
            },
            rd: a,
            rs1: b,
            rs2: c,
        },
        op::EBREAK if sys_clear => I::Ebreak,
        op::ERET if sys_clear => I::Eret,
        op::IDLE if sys_clear => I::Idle,
        _ => return Err(illegal()),
    };
    Ok(instr)
}

/// Decodes a straight run of instructions starting at `base`.
pub fn decode_all(base: u32, bytes: &[u8]) -> Result<Vec<(u32, Instruction)>, IsaError> {
    let mut out = Vec::new();
    let mut off = 0usize;
    while off < bytes.len() {
        let i = decode(&bytes[off..])?;
        out.push((base + off as u32, i));
        off += i.len() as usize;
    }
    Ok(out)
}

/// Encodes a sequence, concatenating the bytes.
pub fn encode_all(instrs: &[Instruction]) -> Result<Vec<u8>, IsaError> {
    let mut out = Vec::with_capacity(instrs.len() * 4);
    for i in instrs {
        out.extend(encode(i)?);
    }
    Ok(out)
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Instruction as I;
        let m = format!("{:?}", self.mnemonic()).to_lowercase();
        let m = m.replacen('c', "c.", if self.is_compressed() { 1 } else { 0 });
        match *self {
            I::Lui { rd, imm } | I::Auipc { rd, imm } => write!(f, "{m} {rd}, {imm:#x}"),
            I::Jal { rd, offset } => write!(f, "{m} {rd}, {offset:+}"),
            I::Jalr { rd, rs1, offset } => write!(f, "{m} {rd}, {rs1}, {offset}"),
            I::Branch {
                rs1, rs2, offset, ..
            } => write!(f, "{m} {rs1}, {rs2}, {offset:+}"),
            I::Load {
                rd, base, offset, ..
            } => write!(f, "{m} {rd}, {offset}({base})"),
            I::Store {
                src, base, offset, ..
            } => write!(f, "{m} {src}, {offset}({base})"),
            I::OpImm { rd, rs1, imm, .. } => write!(f, "{m} {rd}, {rs1}, {imm}"),
            I::Op { rd, rs1, rs2, .. } => write!(f, "{m} {rd}, {rs1}, {rs2}"),
            I::CAddi { rd, imm } => write!(f, "{m} {rd}, {imm}"),
            I::CMv { rd, rs } => write!(f, "{m} {rd}, {rs}"),
            I::CJr { rs } => write!(f, "{m} {rs}"),
            _ => f.write_str(&m),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_word_is_illegal() {
        assert!(matches!(
            decode(&[0, 0, 0, 0]),
            Err(IsaError::IllegalEncoding { .. })
        ));
    }

    #[test]
    fn nop_is_addi_zero() {
        let bytes = encode(&Instruction::Nop).unwrap();
        let addi = encode(&Instruction::OpImm {
            op: ImmOp::Addi,
            rd: Reg::ZERO,
            rs1: Reg::ZERO,
            imm: 0,
        })
        .unwrap();
        assert_eq!(bytes, addi);
        assert_eq!(decode(&bytes).unwrap(), Instruction::Nop);
    }

    #[test]
    fn addi_sp_round_trip() {
        let i = Instruction::OpImm {
            op: ImmOp::Addi,
            rd: Reg::SP,
            rs1: Reg::SP,
            imm: -64,
        };
        let b = encode(&i).unwrap();
        assert_eq!(b.len(), 4);
        assert_eq!(decode(&b).unwrap(), i);
    }

    #[test]
    fn imm_range_enforced() {
        let i = Instruction::OpImm {
            op: ImmOp::Addi,
            rd: Reg::r(3),
            rs1: Reg::r(3),
            imm: 1 << 20,
        };
        assert!(matches!(
            encode(&i),
            Err(IsaError::ImmediateOutOfRange { .. })
        ));
        let odd = Instruction::Jal {
            rd: Reg::LINK,
            offset: 3,
        };
        assert!(encode(&odd).is_err());
    }

    #[test]
    fn compressed_lengths() {
        for i in [
            Instruction::CNop,
            Instruction::CAddi {
                rd: Reg::r(4),
                imm: -5,
            },
            Instruction::CMv {
                rd: Reg::r(3),
                rs: Reg::r(9),
            },
            Instruction::CJr { rs: Reg::LINK },
            Instruction::CEbreak,
        ] {
            let b = encode(&i).unwrap();
            assert_eq!(b.len(), 2);
            assert_eq!(decode(&b).unwrap(), i);
            assert_eq!(length_from_first_byte(b[0]), 2);
        }
    }

    #[test]
    fn reserved_bits_rejected() {
        // ADD with a nonzero reserved tail
        let w = word(op::ADD, Reg::r(1), Reg::r(2), Reg::r(3)) | (1 << 20);
        assert!(decode(&w.to_le_bytes()).is_err());
        // EBREAK with a register field set
        let w = 0b11 | (op::EBREAK << 2) | (1 << 7);
        assert!(decode(&w.to_le_bytes()).is_err());
        // opcode 0 is reserved
        assert!(decode(&0b11u32.to_le_bytes()).is_err());
    }

    #[test]
    fn reg_parse() {
        assert_eq!("r6".parse::<Reg>().unwrap(), Reg::r(6));
        assert_eq!("sp".parse::<Reg>().unwrap(), Reg::SP);
        assert!("r16".parse::<Reg>().is_err());
    }
}
