//! Compiled patch plus the loop annotations the verifier needs.
//!
//! File layout, little-endian: `"SPPB"`, version u16, strategy u8 and its
//! argument u32,
//! annotation count u16, `{head u32, backedge u32, bound u32}`*, wcet u64
//! (`u64::MAX` when unverified), code length u32, code.

use thiserror::Error;

use crate::dispatcher::Strategy;
use crate::isa::{self, Instruction, IsaError};

pub const MAGIC: &[u8; 4] = b"SPPB";
pub const VERSION: u16 = 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PatchFileError {
    #[error("not a patch binary")]
    BadMagic,
    #[error("unsupported patch binary version {0}")]
    BadVersion(u16),
    #[error("patch binary truncated")]
    Truncated,
    #[error("unknown strategy code {0}")]
    BadStrategy(u8),
}

/// A bounded loop produced by `repeat`: the backward branch at byte offset
/// `backedge` jumps to `head` and is taken `bound - 1` times.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LoopAnnotation {
    pub head: u32,
    pub backedge: u32,
    pub bound: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchBinary {
    pub code: Vec<u8>,
    pub annotations: Vec<LoopAnnotation>,
    /// Table flag; the patch itself computes the resume address.
    pub strategy: Strategy,
    pub worst_case_cycles: Option<u64>,
}

impl PatchBinary {
    pub fn size(&self) -> u32 {
        self.code.len() as u32
    }

    pub fn decode(&self) -> Result<Vec<(u32, Instruction)>, IsaError> {
        isa::decode_all(0, &self.code)
    }

    /// No branch or jump before the closing trampoline: every run takes
    /// the same number of cycles.
    pub fn is_straight_line(&self) -> bool {
        match self.decode() {
            Ok(code) => {
                let body = &code[..code.len().saturating_sub(1)];
                !body.iter().any(|(_, i)| {
                    matches!(
                        i,
                        Instruction::Branch { .. }
                            | Instruction::Jal { .. }
                            | Instruction::Jalr { .. }
                            | Instruction::CJr { .. }
                    )
                })
            }
            Err(_) => false,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.code.len());
        out.extend(MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.push(self.strategy.code() as u8);
        out.extend(self.strategy.arg().to_le_bytes());
        out.extend((self.annotations.len() as u16).to_le_bytes());
        for a in &self.annotations {
            out.extend(a.head.to_le_bytes());
            out.extend(a.backedge.to_le_bytes());
            out.extend(a.bound.to_le_bytes());
        }
        out.extend(self.worst_case_cycles.unwrap_or(u64::MAX).to_le_bytes());
        out.extend((self.code.len() as u32).to_le_bytes());
        out.extend(&self.code);
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, PatchFileError> {
        let mut r = Reader { b, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(PatchFileError::BadMagic);
        }
        let v = r.u16()?;
        if v != VERSION {
            return Err(PatchFileError::BadVersion(v));
        }
        let sc = r.take(1)?[0];
        let arg = r.u32()?;
        let strategy = Strategy::from_parts(sc as u32, arg).ok_or(PatchFileError::BadStrategy(sc))?;
        let n = r.u16()?;
        let mut annotations = Vec::with_capacity(n as usize);
        for _ in 0..n {
            annotations.push(LoopAnnotation {
                head: r.u32()?,
                backedge: r.u32()?,
                bound: r.u32()?,
            });
        }
        let w = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let len = r.u32()? as usize;
        let code = r.take(len)?.to_vec();
        Ok(PatchBinary {
            code,
            annotations,
            strategy,
            worst_case_cycles: (w != u64::MAX).then_some(w),
        })
    }
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], PatchFileError> {
        let s = self
            .b
            .get(self.pos..self.pos + n)
            .ok_or(PatchFileError::Truncated)?;
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, PatchFileError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, PatchFileError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
