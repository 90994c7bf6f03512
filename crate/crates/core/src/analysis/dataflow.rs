//! Reaching definitions over one decoded function.
//!
//! Instruction-granular forward dataflow. A definition is either the
//! function entry (the register's incoming value), an ordinary write, or a
//! direct call, which clobbers every caller-saved register. Indirect
//! `JALR rd≠0` (hook stubs) defines only `rd`: the hook entry resumes at the
//! next instruction with all other registers intact.

use std::collections::BTreeSet;

use crate::analysis::sidecar::FuncInfo;
use crate::image::FirmwareImage;
use crate::isa::{Instruction, IsaError, Reg};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DefSite {
    Entry,
    Instr(u32),
    Call(u32),
}

type DefSet = [BTreeSet<DefSite>; Reg::COUNT];

#[derive(Clone, Debug)]
pub struct ReachingDefs {
    addrs: Vec<u32>,
    instrs: Vec<Instruction>,
    ins: Vec<DefSet>,
}

fn successors(addrs: &[u32], i: usize, ins: &Instruction) -> Vec<usize> {
    let pc = addrs[i];
    let index_of = |a: u32| addrs.binary_search(&a).ok();
    let fall = (i + 1 < addrs.len()).then_some(i + 1);
    match *ins {
        Instruction::Branch { offset, .. } => {
            let mut v: Vec<usize> = fall.into_iter().collect();
            if let Some(t) = index_of(pc.wrapping_add(offset as u32)) {
                v.push(t);
            }
            v
        }
        Instruction::Jal { rd, offset } if rd == Reg::ZERO => {
            index_of(pc.wrapping_add(offset as u32)).into_iter().collect()
        }
        Instruction::Jal { .. } => fall.into_iter().collect(),
        Instruction::Jalr { rd, .. } if rd != Reg::ZERO => fall.into_iter().collect(),
        Instruction::Jalr { .. } | Instruction::CJr { .. } | Instruction::Eret => Vec::new(),
        _ => fall.into_iter().collect(),
    }
}

fn defined(ins: &Instruction) -> (Vec<Reg>, bool) {
    match *ins {
        Instruction::Jal { rd, .. } if rd != Reg::ZERO => {
            (Reg::all().filter(|r| r.is_caller_saved()).collect(), true)
        }
        _ => (ins.dest().into_iter().collect(), false),
    }
}

impl ReachingDefs {
    pub fn compute(image: &FirmwareImage, func: &FuncInfo) -> Result<Self, IsaError> {
        let decoded = image.decode_range(func.entry, func.end())?;
        let addrs: Vec<u32> = decoded.iter().map(|(a, _)| *a).collect();
        let instrs: Vec<Instruction> = decoded.iter().map(|(_, i)| *i).collect();
        let n = addrs.len();
        let mut preds = vec![Vec::new(); n];
        for i in 0..n {
            for s in successors(&addrs, i, &instrs[i]) {
                preds[s].push(i);
            }
        }
        let empty: DefSet = Default::default();
        let mut ins = vec![empty.clone(); n];
        let mut outs = vec![empty; n];
        if n > 0 {
            for r in Reg::all() {
                ins[0][r.index()].insert(DefSite::Entry);
            }
        }
        let transfer = |i: usize, inp: &DefSet| -> DefSet {
            let mut out = inp.clone();
            let (regs, call) = defined(&instrs[i]);
            for r in regs {
                let site = if call {
                    DefSite::Call(addrs[i])
                } else {
                    DefSite::Instr(addrs[i])
                };
                out[r.index()] = BTreeSet::from([site]);
            }
            out
        };
        let mut changed = true;
        while changed {
            changed = false;
            for i in 0..n {
                let mut inp = if i == 0 { ins[0].clone() } else { Default::default() };
                for &p in &preds[i] {
                    for r in 0..Reg::COUNT {
                        inp[r].extend(outs[p][r].iter().copied());
                    }
                }
                let out = transfer(i, &inp);
                if out != outs[i] || inp != ins[i] {
                    ins[i] = inp;
                    outs[i] = out;
                    changed = true;
                }
            }
        }
        Ok(ReachingDefs { addrs, instrs, ins })
    }

    /// Definitions of `reg` reaching the start of the instruction at `addr`.
    pub fn at(&self, addr: u32, reg: Reg) -> Option<&BTreeSet<DefSite>> {
        let i = self.addrs.binary_search(&addr).ok()?;
        Some(&self.ins[i][reg.index()])
    }

    pub fn instructions(&self) -> impl Iterator<Item = (u32, &Instruction)> {
        self.addrs.iter().copied().zip(self.instrs.iter())
    }
}

/// Argument registers carry a meaningful value on entry.
pub fn is_argument(r: Reg) -> bool {
    (10..=13).contains(&r.index()) || r == Reg::LINK
}

/// True when every definition of `reg` reaching `addr` is a real write the
/// variable could hold: entry values only for argument registers, call
/// results only in the return-value register.
pub fn defined_at(rd: &ReachingDefs, addr: u32, reg: Reg) -> bool {
    let Some(defs) = rd.at(addr, reg) else {
        return false;
    };
    !defs.is_empty()
        && defs.iter().all(|d| match d {
            DefSite::Entry => is_argument(reg),
            DefSite::Instr(_) => true,
            DefSite::Call(_) => reg == Reg::RET,
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm;

    fn build(src: &str) -> (FirmwareImage, FuncInfo) {
        let a = asm::assemble(src, &[]).unwrap();
        let f = a.sidecar.functions[0].clone();
        (a.to_image(), f)
    }

    const SRC: &str = "
        .section .text code 0x20000000
        .func f
            addi sp, sp, -4
        .endprologue
            addi r6, r0, 1
            beq r10, r0, skip
            addi r6, r0, 2
        skip:
            add r7, r6, r6
            jal r1, f
            add r8, r10, r0
        .epilogue
            addi sp, sp, 4
            jalr r0, r1, 0
        .endfunc
    ";

    #[test]
    fn merges_at_join() {
        let (img, f) = build(SRC);
        let rd = ReachingDefs::compute(&img, &f).unwrap();
        let join = f.entry + 16;
        let d = rd.at(join, Reg::r(6)).unwrap();
        assert_eq!(
            d,
            &BTreeSet::from([DefSite::Instr(f.entry + 4), DefSite::Instr(f.entry + 12)])
        );
        assert!(defined_at(&rd, join, Reg::r(6)));
        // r7 not yet written
        assert!(!defined_at(&rd, join, Reg::r(7)));
        // argument register from entry
        assert!(defined_at(&rd, join, Reg::r(10)));
    }

    #[test]
    fn call_clobbers_caller_saved() {
        let (img, f) = build(SRC);
        let rd = ReachingDefs::compute(&img, &f).unwrap();
        let after = f.entry + 24;
        assert_eq!(
            rd.at(after, Reg::r(6)).unwrap(),
            &BTreeSet::from([DefSite::Call(f.entry + 20)])
        );
        assert!(!defined_at(&rd, after, Reg::r(6)));
        assert!(defined_at(&rd, after, Reg::r(10)));
    }
}
