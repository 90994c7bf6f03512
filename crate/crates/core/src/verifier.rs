//! Static safety and timing gate for compiled patches.
//!
//! Structural rules: no calls, no loop without a `repeat` bound, nothing
//! that traps, idles, returns from an exception, moves sp, clobbers the
//! link register or writes an MMIO control register, and the patch must end
//! in `NOP; JALR r0, r1, 0`. Timing: exact longest-path cycle count under
//! the one-cycle-per-instruction model.

use std::collections::HashMap;
use std::fmt;

use crate::isa::{Instruction, Reg};
use crate::layout::{self, mmio};
use crate::patchgen::binary::{LoopAnnotation, PatchBinary};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Reason {
    Call { at: u32 },
    UnboundedLoop { at: u32 },
    Dangerous { at: u32, what: String },
    BadEpilogue,
    Undecodable,
    OverBudget { t_total: u64, budget: u64 },
}

impl fmt::Display for Reason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Reason::Call { at } => write!(f, "Call at +{at}"),
            Reason::UnboundedLoop { at } => write!(f, "UnboundedLoop at +{at}"),
            Reason::Dangerous { at, what } => write!(f, "Dangerous({what}) at +{at}"),
            Reason::BadEpilogue => f.write_str("BadEpilogue"),
            Reason::Undecodable => f.write_str("Undecodable"),
            Reason::OverBudget { t_total, budget } => {
                write!(f, "OverBudget({t_total} > {budget})")
            }
        }
    }
}

impl Reason {
    pub fn tag(&self) -> &'static str {
        match self {
            Reason::Call { .. } => "Call",
            Reason::UnboundedLoop { .. } => "UnboundedLoop",
            Reason::Dangerous { .. } => "Dangerous",
            Reason::BadEpilogue => "BadEpilogue",
            Reason::Undecodable => "Undecodable",
            Reason::OverBudget { .. } => "OverBudget",
        }
    }
}

impl std::error::Error for Reason {}

fn is_nop(i: &Instruction) -> bool {
    matches!(i, Instruction::Nop | Instruction::CNop)
}

fn annotated(anns: &[LoopAnnotation], at: u32, target: u32) -> bool {
    anns.iter().any(|a| a.backedge == at && a.head == target && a.bound > 0)
}

/// Applies the structural rules.
pub fn structural_check(p: &PatchBinary) -> Result<(), Reason> {
    let code = p.decode().map_err(|_| Reason::Undecodable)?;
    let n = code.len();
    let size = p.size();
    let last = n.checked_sub(1);
    // Constant propagation for store addresses; knowledge is dropped at
    // every branch target.
    let targets: Vec<u32> = code
        .iter()
        .filter_map(|(at, i)| match i {
            Instruction::Branch { offset, .. } => Some(at.wrapping_add(*offset as u32)),
            _ => None,
        })
        .collect();
    let mut known: HashMap<Reg, u32> = HashMap::new();
    for (idx, (at, ins)) in code.iter().enumerate() {
        let at = *at;
        if targets.contains(&at) {
            known.clear();
        }
        let dangerous = |what: &str| Reason::Dangerous {
            at,
            what: what.to_string(),
        };
        match *ins {
            Instruction::Jal { .. } | Instruction::Jalr { .. } | Instruction::CJr { .. } => {
                if Some(idx) != last {
                    return Err(Reason::Call { at });
                }
            }
            Instruction::Branch { offset, .. } => {
                let target = at.wrapping_add(offset as u32);
                if target >= size {
                    return Err(dangerous("branch leaves the patch"));
                }
                if offset <= 0 && !annotated(&p.annotations, at, target) {
                    return Err(Reason::UnboundedLoop { at });
                }
            }
            Instruction::Ebreak | Instruction::CEbreak => return Err(dangerous("breakpoint")),
            Instruction::Eret => return Err(dangerous("exception return")),
            Instruction::Idle => return Err(dangerous("idle")),
            Instruction::Store { base, offset, .. } => {
                if let Some(b) = known.get(&base).copied().or((base == Reg::ZERO).then_some(0)) {
                    let addr = b.wrapping_add(offset as u32);
                    if layout::in_mmio(addr) && mmio::is_control(addr - layout::MMIO_BASE) {
                        return Err(dangerous("control register store"));
                    }
                }
            }
            _ => {}
        }
        match ins.dest() {
            Some(Reg::SP) => return Err(dangerous("writes sp")),
            Some(Reg::LINK) if Some(idx) != last => return Err(dangerous("writes r1")),
            _ => {}
        }
        // propagate
        let val = |r: Reg| -> Option<u32> {
            if r == Reg::ZERO {
                Some(0)
            } else {
                known.get(&r).copied()
            }
        };
        let result = match *ins {
            Instruction::Lui { imm, .. } => Some(imm << 12),
            Instruction::OpImm { op, rs1, imm, .. } => val(rs1).map(|a| op.apply(a, imm)),
            Instruction::Op { op, rs1, rs2, .. } => val(rs1).zip(val(rs2)).map(|(a, b)| op.apply(a, b)),
            Instruction::CAddi { rd, imm } => val(rd).map(|a| a.wrapping_add(imm as u32)),
            Instruction::CMv { rs, .. } => val(rs),
            _ => None,
        };
        if let Some(rd) = ins.dest() {
            match result {
                Some(v) => known.insert(rd, v),
                None => known.remove(&rd),
            };
        }
    }
    let tail_ok = n >= 2 && is_nop(&code[n - 2].1) && code[n - 1].1 == Instruction::TRAMPOLINE;
    if !tail_ok {
        return Err(Reason::BadEpilogue);
    }
    Ok(())
}

/// Longest path in cycles, with each annotated loop counted `bound` times.
/// Assumes `structural_check` passed.
pub fn worst_case_cycles(p: &PatchBinary) -> Result<u64, Reason> {
    let code = p.decode().map_err(|_| Reason::Undecodable)?;
    let addrs: Vec<u32> = code.iter().map(|c| c.0).collect();
    let idx = |a: u32| addrs.binary_search(&a).ok();
    let heads: HashMap<usize, (usize, u32)> = p
        .annotations
        .iter()
        .filter_map(|a| Some((idx(a.head)?, (idx(a.backedge)?, a.bound))))
        .collect();
    longest(&code, &idx, &heads, 0, code.len(), None)
}

fn longest(
    code: &[(u32, Instruction)],
    idx: &dyn Fn(u32) -> Option<usize>,
    heads: &HashMap<usize, (usize, u32)>,
    from: usize,
    end: usize,
    skip_head: Option<usize>,
) -> Result<u64, Reason> {
    // cost[i - from]: cycles from i to leaving [from, end)
    let mut cost = vec![0u64; end - from + 1];
    for i in (from..end).rev() {
        if let Some(&(back, bound)) = heads.get(&i).filter(|_| Some(i) != skip_head) {
            if back < end {
                let body = longest(code, idx, heads, i, back + 1, Some(i))?;
                cost[i - from] = body * bound as u64 + cost[back + 1 - from];
                continue;
            }
        }
        let (at, ins) = code[i];
        let succ_cost = |s: usize| -> u64 {
            if s >= end {
                0
            } else {
                cost[s - from]
            }
        };
        let next = succ_cost(i + 1);
        let c = match ins {
            Instruction::Branch {
                cond,
                rs1,
                rs2,
                offset,
            } => {
                let t = idx(at.wrapping_add(offset as u32)).ok_or(Reason::Undecodable)?;
                // same register on both sides decides the branch statically
                let fixed = (rs1 == rs2).then(|| cond.holds(0, 0));
                if t <= i {
                    // back edge of the enclosing loop: leaves this body
                    next
                } else {
                    match fixed {
                        Some(true) => succ_cost(t),
                        Some(false) => next,
                        None => next.max(succ_cost(t)),
                    }
                }
            }
            Instruction::Jalr { .. } | Instruction::CJr { .. } | Instruction::Jal { .. } => 0,
            _ => next,
        };
        cost[i - from] = 1 + c;
    }
    Ok(cost[0])
}

/// Cycle model of the patch path, measured on the target profile.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TimingModel {
    /// Trigger event to handler body: exception entry plus any stub work.
    pub t_trigger: u64,
    /// Handler work outside the dispatcher and the patch.
    pub t_exception: u64,
    /// Dispatcher entry to patch entry, full table.
    pub t_dispatch_worst: u64,
    pub instr_cost: u64,
}

/// Watchdog budget: timeout `w`, critical-task time `c`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Budget {
    pub w: u64,
    pub c: u64,
}

impl Budget {
    pub fn new(w: u64, c: u64) -> Option<Self> {
        (w > c && c > 0).then_some(Budget { w, c })
    }

    pub fn threshold(&self) -> u64 {
        self.w - self.c
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Verdict {
    pub reason: Option<Reason>,
    pub t_trigger: u64,
    pub t_exception: u64,
    pub t_dispatch: u64,
    pub t_patch: u64,
    pub t_total: u64,
    pub budget: u64,
}

impl Verdict {
    pub fn admitted(&self) -> bool {
        self.reason.is_none()
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (word, reason) = match &self.reason {
            None => ("admit", "OK".to_string()),
            Some(r) => ("reject", r.tag().to_string()),
        };
        write!(
            f,
            "VERDICT {word} {reason} T_TRIG {} T_EXC {} T_DISP {} T_PATCH {} T_TOTAL {} BUDGET {}",
            self.t_trigger, self.t_exception, self.t_dispatch, self.t_patch, self.t_total, self.budget
        )
    }
}

/// Structural check, then the timing test `t_total <= W - C`.
pub fn admit(p: &PatchBinary, model: &TimingModel, budget: &Budget) -> Verdict {
    let base = Verdict {
        reason: None,
        t_trigger: model.t_trigger,
        t_exception: model.t_exception,
        t_dispatch: model.t_dispatch_worst,
        t_patch: 0,
        t_total: 0,
        budget: budget.threshold(),
    };
    if let Err(r) = structural_check(p) {
        return Verdict {
            reason: Some(r),
            ..base
        };
    }
    let t_patch = match worst_case_cycles(p) {
        Ok(c) => c * model.instr_cost,
        Err(r) => {
            return Verdict {
                reason: Some(r),
                ..base
            }
        }
    };
    let t_total = model.t_trigger + model.t_exception + model.t_dispatch_worst + t_patch;
    let reason = (t_total > budget.threshold()).then_some(Reason::OverBudget {
        t_total,
        budget: budget.threshold(),
    });
    Verdict {
        reason,
        t_patch,
        t_total,
        ..base
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dispatcher::Strategy;
    use crate::isa::{encode_all, BranchCond, ImmOp, Width};

    fn patch(code: &[Instruction], anns: Vec<LoopAnnotation>) -> PatchBinary {
        PatchBinary {
            code: encode_all(code).unwrap(),
            annotations: anns,
            strategy: Strategy::Pass,
            worst_case_cycles: None,
        }
    }

    fn addi(rd: u8, rs: u8, imm: i32) -> Instruction {
        Instruction::OpImm {
            op: ImmOp::Addi,
            rd: Reg::r(rd),
            rs1: Reg::r(rs),
            imm,
        }
    }

    fn tail() -> [Instruction; 2] {
        [Instruction::Nop, Instruction::TRAMPOLINE]
    }

    #[test]
    fn straight_line_counts_instructions() {
        let mut c: Vec<_> = (0..8).map(|_| addi(3, 3, 1)).collect();
        c.extend(tail());
        let p = patch(&c, vec![]);
        structural_check(&p).unwrap();
        assert_eq!(worst_case_cycles(&p).unwrap(), 10);
    }

    #[test]
    fn if_else_takes_longer_arm() {
        // beq; then-arm 5; jump; else-arm 9; shared 2
        let mut c = vec![Instruction::Branch {
            cond: BranchCond::Eq,
            rs1: Reg::r(3),
            rs2: Reg::ZERO,
            offset: 4 * 7,
        }];
        c.extend((0..5).map(|_| addi(4, 4, 1)));
        c.push(Instruction::Branch {
            cond: BranchCond::Eq,
            rs1: Reg::ZERO,
            rs2: Reg::ZERO,
            offset: 4 * 10,
        });
        c.extend((0..9).map(|_| addi(5, 5, 1)));
        c.extend(tail());
        let p = patch(&c, vec![]);
        structural_check(&p).unwrap();
        // branch + 9 + tail 2
        assert_eq!(worst_case_cycles(&p).unwrap(), 12);
    }

    #[test]
    fn repeat_multiplies_body() {
        // addi c,0,8 ; L: 3 body ; addi c,c,-1 ; bne c,0,L ; tail
        let mut c = vec![addi(9, 0, 8)];
        c.extend((0..3).map(|_| addi(4, 4, 1)));
        c.push(addi(9, 9, -1));
        c.push(Instruction::Branch {
            cond: BranchCond::Ne,
            rs1: Reg::r(9),
            rs2: Reg::ZERO,
            offset: -16,
        });
        c.extend(tail());
        let ann = LoopAnnotation {
            head: 4,
            backedge: 20,
            bound: 8,
        };
        let p = patch(&c, vec![ann]);
        structural_check(&p).unwrap();
        assert_eq!(worst_case_cycles(&p).unwrap(), 1 + 8 * 5 + 2);
        assert_eq!(
            structural_check(&patch(&c, vec![])),
            Err(Reason::UnboundedLoop { at: 20 })
        );
    }

    #[test]
    fn seeded_rejections() {
        let call = patch(
            &[Instruction::Jal { rd: Reg::LINK, offset: 8 }, Instruction::Nop, Instruction::TRAMPOLINE],
            vec![],
        );
        assert_eq!(structural_check(&call), Err(Reason::Call { at: 0 }));
        let sp = patch(&[addi(2, 2, -4), Instruction::Nop, Instruction::TRAMPOLINE], vec![]);
        assert_eq!(structural_check(&sp).unwrap_err().tag(), "Dangerous");
        let no_nop = patch(&[addi(3, 3, 1), Instruction::TRAMPOLINE], vec![]);
        assert_eq!(structural_check(&no_nop), Err(Reason::BadEpilogue));
        let wdt = patch(
            &[
                Instruction::Lui { rd: Reg::r(3), imm: layout::MMIO_BASE >> 12 },
                Instruction::Store {
                    width: Width::Word,
                    src: Reg::ZERO,
                    base: Reg::r(3),
                    offset: mmio::WDT_RELOAD as i32,
                },
                Instruction::Nop,
                Instruction::TRAMPOLINE,
            ],
            vec![],
        );
        assert_eq!(structural_check(&wdt).unwrap_err().tag(), "Dangerous");
        let out = patch(
            &[
                Instruction::Lui { rd: Reg::r(3), imm: layout::MMIO_BASE >> 12 },
                Instruction::Store {
                    width: Width::Word,
                    src: Reg::ZERO,
                    base: Reg::r(3),
                    offset: mmio::OUT as i32,
                },
                Instruction::Nop,
                Instruction::TRAMPOLINE,
            ],
            vec![],
        );
        assert!(structural_check(&out).is_ok());
    }

    #[test]
    fn admit_is_monotone_in_w() {
        let mut c: Vec<_> = (0..20).map(|_| addi(3, 3, 1)).collect();
        c.extend(tail());
        let p = patch(&c, vec![]);
        let m = TimingModel {
            t_trigger: 5,
            t_exception: 40,
            t_dispatch_worst: 70,
            instr_cost: 1,
        };
        let tight = admit(&p, &m, &Budget::new(200, 100).unwrap());
        assert_eq!(tight.t_total, 137);
        assert!(!tight.admitted());
        assert!(tight.to_string().starts_with("VERDICT reject OverBudget"));
        let loose = admit(&p, &m, &Budget::new(300, 100).unwrap());
        assert!(loose.admitted());
        assert_eq!(admit(&p, &m, &Budget::new(300, 100).unwrap()), loose);
        assert!(Budget::new(10, 10).is_none());
    }
}
