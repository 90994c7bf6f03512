//! Lowering of PatchScript to machine code.
//!
//! The dispatcher hands over the frame base in r10 and leaves it intact, so
//! every variable access is `LW/SW t, 4*slot(r10)`. Temporaries come from
//! r3..r9. Returns rewrite the saved ra relative to its current value (the
//! update point), which lets one body serve several sites, then branch to
//! the shared `NOP; JALR r0, r1, 0` tail.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::analysis::mapping::MappingTable;
use crate::dispatcher::Strategy;
use crate::isa::{self, BranchCond, ImmOp, Instruction, IsaError, Reg, RegOp, Width, IMM17_MAX, IMM17_MIN};
use crate::patchgen::binary::{LoopAnnotation, PatchBinary};
use crate::patchgen::ra::{RaError, RaTargets};
use crate::patchgen::script::{
    BinOp, CmpOp, Expr, LValue, ParseError, PatchSource, ReturnKind, SlotRef, Stmt,
};

const FRAME: Reg = Reg::RET;
const TEMPS: [u8; 7] = [3, 4, 5, 6, 7, 8, 9];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CompileError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
    #[error("unknown global `@{0}`")]
    UnknownGlobal(String),
    #[error("no member offset for `{0}.{1}`")]
    UnknownField(String, String),
    #[error("expression needs more than {} temporaries", TEMPS.len())]
    TooManyTemporaries,
    #[error("some control path ends without a return")]
    MissingReturnPath,
    #[error("statement after a return")]
    UnreachableCode,
    #[error("return inside repeat")]
    ReturnInRepeat,
    #[error("`{0}` is not a compile-time constant")]
    NotConstant(String),
    #[error("cannot assign to constant `{0}`")]
    AssignToConstant(String),
    #[error("slot {0} outside the frame")]
    BadSlot(u32),
    #[error("register R[{0}] is not writable from a patch")]
    ReadOnlyRegister(u8),
    #[error("register R[{0}] has no frame slot")]
    UnmappedRegister(u8),
    #[error("repeat bound {0} too large")]
    BoundTooLarge(u32),
    #[error(transparent)]
    Ra(#[from] RaError),
    #[error(transparent)]
    Encode(#[from] IsaError),
}

#[derive(Clone, Copy, Debug)]
enum Binding {
    Temp(Reg),
    Const(u32),
}

#[derive(Clone, Copy, Debug)]
enum Item {
    Ins(Instruction),
    Branch {
        cond: BranchCond,
        rs1: Reg,
        rs2: Reg,
        label: usize,
    },
    /// `repeat` back edge.
    Loop {
        counter: Reg,
        head: usize,
        bound: u32,
    },
    Label(usize),
}

/// Value held in a register; `owned` ones are freed after use.
#[derive(Clone, Copy, Debug)]
struct Val {
    reg: Reg,
    owned: bool,
}

struct Gen<'a> {
    map: &'a MappingTable,
    globals: &'a BTreeMap<String, u32>,
    ra: &'a RaTargets,
    items: Vec<Item>,
    free: Vec<Reg>,
    scopes: Vec<Vec<(String, Binding)>>,
    labels: usize,
    end: usize,
    loop_depth: usize,
    first_return: Option<ReturnKind>,
}

fn fits17(v: i64) -> bool {
    (IMM17_MIN as i64..=IMM17_MAX as i64).contains(&v)
}

impl<'a> Gen<'a> {
    fn new(map: &'a MappingTable, globals: &'a BTreeMap<String, u32>, ra: &'a RaTargets) -> Self {
        Gen {
            map,
            globals,
            ra,
            items: Vec::new(),
            free: TEMPS.iter().rev().map(|&i| Reg::r(i)).collect(),
            scopes: vec![Vec::new()],
            labels: 1,
            end: 0,
            loop_depth: 0,
            first_return: None,
        }
    }

    fn label(&mut self) -> usize {
        self.labels += 1;
        self.labels - 1
    }

    fn emit(&mut self, i: Instruction) {
        self.items.push(Item::Ins(i));
    }

    fn alloc(&mut self) -> Result<Reg, CompileError> {
        self.free.pop().ok_or(CompileError::TooManyTemporaries)
    }

    fn release(&mut self, v: Val) {
        if v.owned {
            self.free.push(v.reg);
            // lowest register is always handed out next
            self.free.sort_by(|a, b| b.cmp(a));
        }
    }

    fn lookup(&self, name: &str) -> Option<Binding> {
        self.scopes
            .iter()
            .rev()
            .flat_map(|s| s.iter().rev())
            .find(|(n, _)| n == name)
            .map(|(_, b)| *b)
    }

    fn const_eval(&self, e: &Expr) -> Option<u32> {
        Some(match e {
            Expr::Num(n) => *n,
            Expr::Name(n) => match self.lookup(n)? {
                Binding::Const(v) => v,
                Binding::Temp(_) => return None,
            },
            Expr::Global(g) => *self.globals.get(g)?,
            Expr::Neg(a) => self.const_eval(a)?.wrapping_neg(),
            Expr::BitNot(a) => !self.const_eval(a)?,
            Expr::Bin(op, a, b) => bin_apply(*op, self.const_eval(a)?, self.const_eval(b)?),
            Expr::Cmp(op, a, b) => op.eval(self.const_eval(a)?, self.const_eval(b)?) as u32,
            Expr::And(a, b) => (self.const_eval(a)? != 0 && self.const_eval(b)? != 0) as u32,
            Expr::Or(a, b) => (self.const_eval(a)? != 0 || self.const_eval(b)? != 0) as u32,
            Expr::Not(a) => (self.const_eval(a)? == 0) as u32,
            _ => return None,
        })
    }

    fn load_const(&mut self, v: u32) -> Result<Val, CompileError> {
        if v == 0 {
            return Ok(Val {
                reg: Reg::ZERO,
                owned: false,
            });
        }
        let t = self.alloc()?;
        self.li(t, v);
        Ok(Val { reg: t, owned: true })
    }

    fn li(&mut self, t: Reg, v: u32) {
        if fits17(v as i32 as i64) {
            self.emit(Instruction::OpImm {
                op: ImmOp::Addi,
                rd: t,
                rs1: Reg::ZERO,
                imm: v as i32,
            });
        } else {
            self.emit(Instruction::Lui { rd: t, imm: v >> 12 });
            if v & 0xFFF != 0 {
                self.emit(Instruction::OpImm {
                    op: ImmOp::Ori,
                    rd: t,
                    rs1: t,
                    imm: (v & 0xFFF) as i32,
                });
            }
        }
    }

    fn slot_offset(&self, slot: usize) -> Result<i32, CompileError> {
        if slot >= self.map.frame_words {
            return Err(CompileError::BadSlot(slot as u32));
        }
        Ok(4 * slot as i32)
    }

    fn var_slot(&self, name: &str) -> Result<usize, CompileError> {
        self.map
            .slot(name)
            .ok_or_else(|| CompileError::UnknownVariable(name.to_string()))
    }

    fn slot_of_ref(&self, r: &SlotRef) -> Result<usize, CompileError> {
        match r {
            SlotRef::Index(k) => {
                let k = *k as usize;
                self.slot_offset(k)?;
                Ok(k)
            }
            SlotRef::Var(v) => self.var_slot(v),
        }
    }

    fn reg_slot(&self, n: u8) -> Result<usize, CompileError> {
        self.map
            .reg_slot(Reg::r(n))
            .ok_or(CompileError::UnmappedRegister(n))
    }

    fn load_slot(&mut self, slot: usize) -> Result<Val, CompileError> {
        let off = self.slot_offset(slot)?;
        let t = self.alloc()?;
        self.emit(Instruction::Load {
            width: Width::Word,
            rd: t,
            base: FRAME,
            offset: off,
        });
        Ok(Val { reg: t, owned: true })
    }

    fn store_slot(&mut self, slot: usize, v: Val) -> Result<(), CompileError> {
        let off = self.slot_offset(slot)?;
        self.emit(Instruction::Store {
            width: Width::Word,
            src: v.reg,
            base: FRAME,
            offset: off,
        });
        Ok(())
    }

    /// Destination for a result computed from `a` (and `b`).
    fn dest(&mut self, a: Val, b: Option<Val>) -> Result<Reg, CompileError> {
        if a.owned {
            if let Some(b) = b {
                self.release(b);
            }
            return Ok(a.reg);
        }
        if let Some(b) = b.filter(|b| b.owned) {
            return Ok(b.reg);
        }
        self.alloc()
    }

    /// Splits `x + k` into a base expression and a constant byte offset.
    fn address<'e>(&self, e: &'e Expr) -> (&'e Expr, i32) {
        if let Expr::Bin(op @ (BinOp::Add | BinOp::Sub), a, b) = e {
            if let Some(k) = self.const_eval(b) {
                let k = if *op == BinOp::Sub { (k as i32).wrapping_neg() } else { k as i32 };
                if fits17(k as i64) {
                    return (a, k);
                }
            }
        }
        (e, 0)
    }

    fn eval(&mut self, e: &Expr) -> Result<Val, CompileError> {
        if let Some(v) = self.const_eval(e) {
            return self.load_const(v);
        }
        match e {
            Expr::Num(_) => unreachable!("constants fold"),
            Expr::Name(n) => match self.lookup(n) {
                Some(Binding::Temp(r)) => Ok(Val { reg: r, owned: false }),
                Some(Binding::Const(v)) => self.load_const(v),
                None => {
                    let s = self.var_slot(n)?;
                    self.load_slot(s)
                }
            },
            Expr::Global(g) => Err(CompileError::UnknownGlobal(g.clone())),
            Expr::Field(v, m) => {
                let off = self
                    .map
                    .field(v, m)
                    .ok_or_else(|| CompileError::UnknownField(v.clone(), m.clone()))?;
                let base = self.eval(&Expr::Name(v.clone()))?;
                let d = self.dest(base, None)?;
                self.emit(Instruction::Load {
                    width: Width::Word,
                    rd: d,
                    base: base.reg,
                    offset: off as i32,
                });
                Ok(Val { reg: d, owned: true })
            }
            Expr::Slot(r) => {
                let s = self.slot_of_ref(r)?;
                self.load_slot(s)
            }
            Expr::Reg(0) => self.load_const(0),
            Expr::Reg(n) => {
                let s = self.reg_slot(*n)?;
                self.load_slot(s)
            }
            Expr::Mem(w, a) => {
                let (base, off) = self.address(a);
                let b = self.eval(base)?;
                let d = self.dest(b, None)?;
                self.emit(Instruction::Load {
                    width: *w,
                    rd: d,
                    base: b.reg,
                    offset: off,
                });
                Ok(Val { reg: d, owned: true })
            }
            Expr::Neg(a) => {
                let v = self.eval(a)?;
                let d = self.dest(v, None)?;
                self.emit(Instruction::Op {
                    op: RegOp::Sub,
                    rd: d,
                    rs1: Reg::ZERO,
                    rs2: v.reg,
                });
                Ok(Val { reg: d, owned: true })
            }
            Expr::BitNot(a) => {
                let v = self.eval(a)?;
                let d = self.dest(v, None)?;
                self.emit(Instruction::OpImm {
                    op: ImmOp::Xori,
                    rd: d,
                    rs1: v.reg,
                    imm: -1,
                });
                Ok(Val { reg: d, owned: true })
            }
            Expr::Bin(op, a, b) => self.binary(*op, a, b),
            Expr::Cmp(..) | Expr::And(..) | Expr::Or(..) | Expr::Not(..) => {
                let t = self.alloc()?;
                let done = self.label();
                self.li(t, 1);
                self.branch(e, true, done)?;
                self.emit(Instruction::OpImm {
                    op: ImmOp::Addi,
                    rd: t,
                    rs1: Reg::ZERO,
                    imm: 0,
                });
                self.items.push(Item::Label(done));
                Ok(Val { reg: t, owned: true })
            }
        }
    }

    fn binary(&mut self, op: BinOp, a: &Expr, b: &Expr) -> Result<Val, CompileError> {
        let commutes = matches!(op, BinOp::Add | BinOp::And | BinOp::Or | BinOp::Xor);
        let (a, b) = if commutes && self.const_eval(a).is_some() { (b, a) } else { (a, b) };
        let imm_op = match op {
            BinOp::Add | BinOp::Sub => Some(ImmOp::Addi),
            BinOp::And => Some(ImmOp::Andi),
            BinOp::Or => Some(ImmOp::Ori),
            BinOp::Xor => Some(ImmOp::Xori),
            _ => None,
        };
        if let (Some(iop), Some(k)) = (imm_op, self.const_eval(b)) {
            let imm = if op == BinOp::Sub { (k as i32).wrapping_neg() } else { k as i32 };
            if fits17(imm as i64) {
                let va = self.eval(a)?;
                let d = self.dest(va, None)?;
                self.emit(Instruction::OpImm {
                    op: iop,
                    rd: d,
                    rs1: va.reg,
                    imm,
                });
                return Ok(Val { reg: d, owned: true });
            }
        }
        let va = self.eval(a)?;
        let vb = self.eval(b)?;
        let d = self.dest(va, Some(vb))?;
        let rop = match op {
            BinOp::Add => RegOp::Add,
            BinOp::Sub => RegOp::Sub,
            BinOp::And => RegOp::And,
            BinOp::Or => RegOp::Or,
            BinOp::Xor => RegOp::Xor,
            BinOp::Shl => RegOp::Sll,
            BinOp::Shr => RegOp::Srl,
        };
        self.emit(Instruction::Op {
            op: rop,
            rd: d,
            rs1: va.reg,
            rs2: vb.reg,
        });
        if !va.owned && vb.owned && d != vb.reg {
            self.release(vb);
        }
        Ok(Val { reg: d, owned: true })
    }

    fn jump(&mut self, label: usize) {
        self.items.push(Item::Branch {
            cond: BranchCond::Eq,
            rs1: Reg::ZERO,
            rs2: Reg::ZERO,
            label,
        });
    }

    /// Branches to `label` when `e` evaluates to `when`.
    fn branch(&mut self, e: &Expr, when: bool, label: usize) -> Result<(), CompileError> {
        if let Some(v) = self.const_eval(e) {
            if (v != 0) == when {
                self.jump(label);
            }
            return Ok(());
        }
        match e {
            Expr::Cmp(op, a, b) => {
                let op = if when { *op } else { op.negate() };
                let va = self.eval(a)?;
                let vb = self.eval(b)?;
                let (cond, x, y) = match op {
                    CmpOp::Lt => (BranchCond::Ltu, va, vb),
                    CmpOp::Ge => (BranchCond::Geu, va, vb),
                    CmpOp::Gt => (BranchCond::Ltu, vb, va),
                    CmpOp::Le => (BranchCond::Geu, vb, va),
                    CmpOp::Eq => (BranchCond::Eq, va, vb),
                    CmpOp::Ne => (BranchCond::Ne, va, vb),
                };
                self.items.push(Item::Branch {
                    cond,
                    rs1: x.reg,
                    rs2: y.reg,
                    label,
                });
                self.release(va);
                self.release(vb);
            }
            Expr::And(a, b) => {
                if when {
                    let skip = self.label();
                    self.branch(a, false, skip)?;
                    self.branch(b, true, label)?;
                    self.items.push(Item::Label(skip));
                } else {
                    self.branch(a, false, label)?;
                    self.branch(b, false, label)?;
                }
            }
            Expr::Or(a, b) => {
                if when {
                    self.branch(a, true, label)?;
                    self.branch(b, true, label)?;
                } else {
                    let skip = self.label();
                    self.branch(a, true, skip)?;
                    self.branch(b, false, label)?;
                    self.items.push(Item::Label(skip));
                }
            }
            Expr::Not(a) => self.branch(a, !when, label)?,
            _ => {
                let v = self.eval(e)?;
                self.items.push(Item::Branch {
                    cond: if when { BranchCond::Ne } else { BranchCond::Eq },
                    rs1: v.reg,
                    rs2: Reg::ZERO,
                    label,
                });
                self.release(v);
            }
        }
        Ok(())
    }

    fn store_to(&mut self, lv: &LValue, e: &Expr) -> Result<(), CompileError> {
        match lv {
            LValue::Name(n) => match self.lookup(n) {
                Some(Binding::Const(_)) => Err(CompileError::AssignToConstant(n.clone())),
                Some(Binding::Temp(r)) => {
                    let v = self.eval(e)?;
                    if v.reg != r {
                        self.emit(Instruction::OpImm {
                            op: ImmOp::Addi,
                            rd: r,
                            rs1: v.reg,
                            imm: 0,
                        });
                    }
                    self.release(v);
                    Ok(())
                }
                None => {
                    let s = self.var_slot(n)?;
                    let v = self.eval(e)?;
                    self.store_slot(s, v)?;
                    self.release(v);
                    Ok(())
                }
            },
            LValue::Slot(r) => {
                let s = self.slot_of_ref(r)?;
                let v = self.eval(e)?;
                self.store_slot(s, v)?;
                self.release(v);
                Ok(())
            }
            LValue::Reg(n) => {
                if *n == 0 || *n == 2 {
                    return Err(CompileError::ReadOnlyRegister(*n));
                }
                let s = self.reg_slot(*n)?;
                let v = self.eval(e)?;
                self.store_slot(s, v)?;
                self.release(v);
                Ok(())
            }
            LValue::Field(var, m) => {
                let off = self
                    .map
                    .field(var, m)
                    .ok_or_else(|| CompileError::UnknownField(var.clone(), m.clone()))?;
                let base = self.eval(&Expr::Name(var.clone()))?;
                let v = self.eval(e)?;
                self.emit(Instruction::Store {
                    width: Width::Word,
                    src: v.reg,
                    base: base.reg,
                    offset: off as i32,
                });
                self.release(v);
                self.release(base);
                Ok(())
            }
            LValue::Mem(w, a) => {
                let (base, off) = self.address(a);
                let b = self.eval(base)?;
                let v = self.eval(e)?;
                self.emit(Instruction::Store {
                    width: *w,
                    src: v.reg,
                    base: b.reg,
                    offset: off,
                });
                self.release(v);
                self.release(b);
                Ok(())
            }
        }
    }

    fn ret(&mut self, k: ReturnKind) -> Result<(), CompileError> {
        if self.loop_depth > 0 {
            return Err(CompileError::ReturnInRepeat);
        }
        let delta = self.ra.delta(k)?;
        self.first_return.get_or_insert(k);
        let off = 4 * self.map.ra_slot as i32;
        let t = self.alloc()?;
        self.emit(Instruction::Load {
            width: Width::Word,
            rd: t,
            base: FRAME,
            offset: off,
        });
        self.emit(Instruction::OpImm {
            op: ImmOp::Addi,
            rd: t,
            rs1: t,
            imm: delta,
        });
        self.emit(Instruction::Store {
            width: Width::Word,
            src: t,
            base: FRAME,
            offset: off,
        });
        self.release(Val { reg: t, owned: true });
        let end = self.end;
        self.jump(end);
        Ok(())
    }

    /// Lowers a block; true when every path through it returns.
    fn block(&mut self, body: &[Stmt]) -> Result<bool, CompileError> {
        self.scopes.push(Vec::new());
        let mut done = false;
        for s in body {
            if done {
                return Err(CompileError::UnreachableCode);
            }
            done = self.stmt(s)?;
        }
        let scope = self.scopes.pop().expect("pushed above");
        for (_, b) in scope {
            if let Binding::Temp(r) = b {
                self.release(Val { reg: r, owned: true });
            }
        }
        Ok(done)
    }

    fn stmt(&mut self, s: &Stmt) -> Result<bool, CompileError> {
        match s {
            Stmt::Const(n, e) => {
                let v = self
                    .const_eval(e)
                    .ok_or_else(|| CompileError::NotConstant(n.clone()))?;
                self.scopes
                    .last_mut()
                    .expect("scope")
                    .push((n.clone(), Binding::Const(v)));
            }
            Stmt::Let(n, e) => {
                let v = self.eval(e)?;
                let r = if v.owned {
                    v.reg
                } else {
                    let t = self.alloc()?;
                    self.emit(Instruction::OpImm {
                        op: ImmOp::Addi,
                        rd: t,
                        rs1: v.reg,
                        imm: 0,
                    });
                    t
                };
                self.scopes
                    .last_mut()
                    .expect("scope")
                    .push((n.clone(), Binding::Temp(r)));
            }
            Stmt::Assign(lv, e) => self.store_to(lv, e)?,
            Stmt::SetRetval(e) => {
                let v = self.eval(e)?;
                self.store_slot(self.map.retval_slot, v)?;
                self.release(v);
            }
            Stmt::Return(k) => {
                self.ret(*k)?;
                return Ok(true);
            }
            Stmt::If(c, a, b) => {
                let else_l = self.label();
                self.branch(c, false, else_l)?;
                let ta = self.block(a)?;
                if b.is_empty() {
                    self.items.push(Item::Label(else_l));
                    return Ok(false);
                }
                let end_l = self.label();
                if !ta {
                    self.jump(end_l);
                }
                self.items.push(Item::Label(else_l));
                let tb = self.block(b)?;
                self.items.push(Item::Label(end_l));
                return Ok(ta && tb);
            }
            Stmt::Repeat(n, body) => {
                if *n as i64 > IMM17_MAX as i64 {
                    return Err(CompileError::BoundTooLarge(*n));
                }
                if *n == 0 {
                    // still reject returns inside
                    let saved = self.items.len();
                    self.loop_depth += 1;
                    let r = self.block(body);
                    self.loop_depth -= 1;
                    r?;
                    self.items.truncate(saved);
                    return Ok(false);
                }
                let c = self.alloc()?;
                self.li(c, *n);
                let head = self.label();
                self.items.push(Item::Label(head));
                self.loop_depth += 1;
                let r = self.block(body);
                self.loop_depth -= 1;
                r?;
                self.emit(Instruction::OpImm {
                    op: ImmOp::Addi,
                    rd: c,
                    rs1: c,
                    imm: -1,
                });
                self.items.push(Item::Loop {
                    counter: c,
                    head,
                    bound: *n,
                });
                self.release(Val { reg: c, owned: true });
            }
        }
        Ok(false)
    }

    fn finish(mut self) -> Result<(Vec<u8>, Vec<LoopAnnotation>), CompileError> {
        // a jump straight to the tail that is already next is dropped
        while let Some(pos) = self.items.iter().rposition(|i| matches!(i, Item::Branch { label, cond: BranchCond::Eq, rs1: Reg::ZERO, rs2: Reg::ZERO } if *label == self.end)) {
            let only_labels_after = self.items[pos + 1..].iter().all(|i| matches!(i, Item::Label(_)));
            if !only_labels_after {
                break;
            }
            self.items.remove(pos);
        }
        self.items.push(Item::Label(self.end));
        self.emit(Instruction::Nop);
        self.emit(Instruction::TRAMPOLINE);

        let mut at = vec![0u32; self.labels];
        let mut pc = 0u32;
        for it in &self.items {
            match it {
                Item::Label(l) => at[*l] = pc,
                _ => pc += 4,
            }
        }
        let mut code = Vec::new();
        let mut anns = Vec::new();
        let mut pc = 0u32;
        for it in &self.items {
            let ins = match *it {
                Item::Label(_) => continue,
                Item::Ins(i) => i,
                Item::Branch {
                    cond,
                    rs1,
                    rs2,
                    label,
                } => Instruction::Branch {
                    cond,
                    rs1,
                    rs2,
                    offset: at[label] as i32 - pc as i32,
                },
                Item::Loop {
                    counter,
                    head,
                    bound,
                } => {
                    anns.push(LoopAnnotation {
                        head: at[head],
                        backedge: pc,
                        bound,
                    });
                    Instruction::Branch {
                        cond: BranchCond::Ne,
                        rs1: counter,
                        rs2: Reg::ZERO,
                        offset: at[head] as i32 - pc as i32,
                    }
                }
            };
            code.extend(isa::encode(&ins)?);
            pc += 4;
        }
        Ok((code, anns))
    }
}

fn bin_apply(op: BinOp, a: u32, b: u32) -> u32 {
    match op {
        BinOp::Add => a.wrapping_add(b),
        BinOp::Sub => a.wrapping_sub(b),
        BinOp::And => a & b,
        BinOp::Or => a | b,
        BinOp::Xor => a ^ b,
        BinOp::Shl => a.wrapping_shl(b & 31),
        BinOp::Shr => a.wrapping_shr(b & 31),
    }
}

/// Compiles `src` against `map`. `globals` resolves `@name`.
pub fn compile(
    src: &PatchSource,
    map: &MappingTable,
    ra: &RaTargets,
    globals: &BTreeMap<String, u32>,
) -> Result<PatchBinary, CompileError> {
    let mut g = Gen::new(map, globals, ra);
    if !g.block(&src.body)? {
        return Err(CompileError::MissingReturnPath);
    }
    let kind = g.first_return.unwrap_or(ReturnKind::Pass);
    let strategy: Strategy = ra.strategy(kind)?;
    let (code, annotations) = g.finish()?;
    Ok(PatchBinary {
        code,
        annotations,
        strategy,
        worst_case_cycles: None,
    })
}

pub fn compile_str(
    src: &str,
    map: &MappingTable,
    ra: &RaTargets,
    globals: &BTreeMap<String, u32>,
) -> Result<PatchBinary, CompileError> {
    compile(&PatchSource::parse(src)?, map, ra, globals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::mapping::{build_r2, MapRow};
    use crate::frames::FrameLayout;
    use crate::machine::ArchProfile;

    fn map() -> MappingTable {
        let r2 = build_r2(&FrameLayout::for_profile(&ArchProfile::soft16()).unwrap());
        MappingTable {
            profile: "soft16".into(),
            update_addr: 0x100,
            frame_words: r2.frame_words,
            ra_slot: r2.ra_slot,
            retval_slot: r2.retval_slot,
            rows: BTreeMap::from([
                ("hdr".to_string(), MapRow { slot: 6, reg: Reg::r(6) }),
                ("buf".to_string(), MapRow { slot: 5, reg: Reg::r(5) }),
            ]),
            fields: BTreeMap::new(),
            reg_slots: r2.regs,
        }
    }

    fn ra() -> RaTargets {
        RaTargets {
            update_addr: 0x100,
            pass: Some(0x104),
            skip: Some(0x110),
            caller: Some(0x1AE),
        }
    }

    fn decode(p: &PatchBinary) -> Vec<Instruction> {
        p.decode().unwrap().into_iter().map(|x| x.1).collect()
    }

    #[test]
    fn minimal_patch_shape() {
        let p = compile_str("return_pass", &map(), &ra(), &BTreeMap::new()).unwrap();
        let code = decode(&p);
        assert_eq!(code.len(), 5);
        assert_eq!(
            code[1],
            Instruction::OpImm {
                op: ImmOp::Addi,
                rd: Reg::r(3),
                rs1: Reg::r(3),
                imm: 4
            }
        );
        assert_eq!(code[3], Instruction::Nop);
        assert_eq!(code[4], Instruction::TRAMPOLINE);
        assert_eq!(p.strategy, Strategy::Pass);
    }

    #[test]
    fn both_paths_reach_trampoline() {
        let p = compile_str(
            "if hdr < 5 or hdr > 15 { set_retval(2); return_redirect_caller } else { return_pass }",
            &map(),
            &ra(),
            &BTreeMap::new(),
        )
        .unwrap();
        assert_eq!(p.strategy, Strategy::RedirectCaller(0x1AE));
        let code = decode(&p);
        assert_eq!(code.last(), Some(&Instruction::TRAMPOLINE));
        assert!(code.iter().any(|i| matches!(i, Instruction::OpImm { imm: 174, .. })));
    }

    #[test]
    fn errors() {
        let m = map();
        let g = BTreeMap::new();
        assert_eq!(
            compile_str("x = 1; return_pass", &m, &ra(), &g),
            Err(CompileError::UnknownVariable("x".into()))
        );
        assert_eq!(
            compile_str("hdr = 1", &m, &ra(), &g),
            Err(CompileError::MissingReturnPath)
        );
        assert_eq!(
            compile_str("repeat 2 { return_pass }", &m, &ra(), &g),
            Err(CompileError::ReturnInRepeat)
        );
        assert_eq!(
            compile_str("return_pass; hdr = 1", &m, &ra(), &g),
            Err(CompileError::UnreachableCode)
        );
        assert_eq!(
            compile_str("R[2] = 0; return_pass", &m, &ra(), &g),
            Err(CompileError::ReadOnlyRegister(2))
        );
        let deep = "hdr = 1+(2+(3+(4+(5+(6+(7+(8+hdr)))))))\nreturn_pass";
        assert!(compile_str(deep, &m, &ra(), &g).is_ok(), "constants fold");
        let deep = "hdr = buf+(buf+(buf+(buf+(buf+(buf+(buf+(buf+hdr)))))))\nreturn_pass";
        assert_eq!(
            compile_str(deep, &m, &ra(), &g),
            Err(CompileError::TooManyTemporaries)
        );
    }

    #[test]
    fn deterministic_and_annotated() {
        let src = "repeat 8 { hdr = hdr + 1 } return_pass";
        let a = compile_str(src, &map(), &ra(), &BTreeMap::new()).unwrap();
        let b = compile_str(src, &map(), &ra(), &BTreeMap::new()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.annotations.len(), 1);
        let ann = a.annotations[0];
        assert_eq!(ann.bound, 8);
        assert!(ann.head < ann.backedge);
        assert_eq!(compile_str("repeat 0 { hdr = 1 } return_pass", &map(), &ra(), &BTreeMap::new()).unwrap().code.len(), 20);
    }

    #[test]
    fn large_constants_use_lui_ori() {
        let p = compile_str("hdr = 0x12345678; return_pass", &map(), &ra(), &BTreeMap::new()).unwrap();
        let code = decode(&p);
        assert!(matches!(code[0], Instruction::Lui { imm: 0x12345, .. }));
        assert!(matches!(code[1], Instruction::OpImm { op: ImmOp::Ori, imm: 0x678, .. }));
    }
}
