//! Two-pass assembler for MiniRV with sidecar directives.
//!
//! Source is line oriented; `#` starts a comment. Labels end in `:`.
//!
//! Section and image directives:
//! `.section NAME code|data|reserved ADDR [SIZE]`, `.org OFF` (relative to
//! the section base), `.align N`, `.equ NAME, EXPR`, `.entry SYM`,
//! `.wdt N`, `.msp ADDR`, `.word`, `.half`, `.byte`, `.space N`.
//!
//! Metadata directives feed the [`DebugSidecar`]:
//! `.func NAME` / `.endprologue` / `.epilogue` / `.endfunc`,
//! `.var NAME REG` / `.endvar NAME`, `.site MACRO`, `.hook N`,
//! `.global NAME SIZE`, `.field VAR.MEMBER OFF`, `.range idle|service` /
//! `.endrange idle|service`.
//!
//! Pseudo-instructions: `li`, `la` (always LUI+ADDI), `j`, `call`, `ret`,
//! `mv`, `beqz`, `bnez`.

use std::collections::{BTreeMap, HashMap, HashSet};

use thiserror::Error;

use crate::analysis::sidecar::{
    DebugSidecar, FieldInfo, FuncInfo, GlobalInfo, GlobalRef, HookInfo, MacroInfo, VarInfo,
};
use crate::image::{FirmwareImage, Section, SectionKind};
use crate::isa::{self, BranchCond, ImmOp, Instruction, IsaError, Reg, RegOp, Width};
use crate::layout;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("line {line}: {kind}")]
pub struct AsmError {
    pub line: usize,
    pub kind: AsmErrorKind,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AsmErrorKind {
    #[error("unknown mnemonic or directive `{0}`")]
    Unknown(String),
    #[error("bad operands: {0}")]
    Operands(String),
    #[error("undefined symbol `{0}`")]
    Undefined(String),
    #[error("symbol `{0}` defined twice")]
    Duplicate(String),
    #[error("no active section")]
    NoSection,
    #[error(".org moves backwards")]
    OrgBackwards,
    #[error("data emitted into reserved section")]
    ReservedData,
    #[error("{0}")]
    Structure(String),
    #[error(transparent)]
    Isa(#[from] IsaError),
}

/// Output of [`assemble`].
#[derive(Clone, Debug)]
pub struct Assembly {
    pub sections: Vec<Section>,
    pub symbols: BTreeMap<String, u32>,
    pub sidecar: DebugSidecar,
    pub entry: Option<u32>,
    pub wdt: u32,
    pub msp: u32,
}

impl Assembly {
    pub fn symbol(&self, name: &str) -> Option<u32> {
        self.symbols.get(name).copied()
    }

    pub fn to_image(&self) -> FirmwareImage {
        FirmwareImage {
            entry: self.entry.unwrap_or(0),
            msp_init: self.msp,
            wdt: self.wdt,
            sections: self.sections.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct Stmt {
    op: String,
    args: Vec<String>,
}

#[derive(Clone, Debug)]
struct SecState {
    name: String,
    kind: SectionKind,
    base: u32,
    size: Option<u32>,
    bytes: Vec<u8>,
}

impl SecState {
    fn loc(&self) -> u32 {
        self.base + self.bytes.len() as u32
    }
}

/// Assembles `src`. `predefined` seeds constant symbols (e.g. `TEXT_BASE`).
pub fn assemble(src: &str, predefined: &[(&str, u32)]) -> Result<Assembly, AsmError> {
    let stmts = parse_lines(src)?;
    let mut asm = Assembler::new(predefined);
    asm.pass(&stmts, false)?;
    asm.reset_for_second_pass();
    asm.pass(&stmts, true)?;
    asm.finish()
}

fn parse_lines(src: &str) -> Result<Vec<(usize, Option<String>, Option<Stmt>)>, AsmError> {
    let mut out = Vec::new();
    for (i, raw) in src.lines().enumerate() {
        let line = i + 1;
        let text = raw.split('#').next().unwrap_or("").trim();
        if text.is_empty() {
            continue;
        }
        let (label, rest) = match text.find(':') {
            Some(p) if is_ident(text[..p].trim()) => {
                (Some(text[..p].trim().to_string()), text[p + 1..].trim())
            }
            _ => (None, text),
        };
        let stmt = if rest.is_empty() {
            None
        } else {
            let (op, tail) = match rest.find(char::is_whitespace) {
                Some(p) => (&rest[..p], rest[p..].trim()),
                None => (rest, ""),
            };
            Some(Stmt {
                op: op.to_ascii_lowercase(),
                args: split_args(tail),
            })
        };
        out.push((line, label, stmt));
    }
    Ok(out)
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_' || c == '.')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

fn split_args(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0;
    let mut cur = String::new();
    for c in s.chars() {
        match c {
            '(' => {
                depth += 1;
                cur.push(c)
            }
            ')' => {
                depth -= 1;
                cur.push(c)
            }
            ',' if depth == 0 => out.push(std::mem::take(&mut cur).trim().to_string()),
            _ => cur.push(c),
        }
    }
    if !cur.trim().is_empty() {
        out.push(cur.trim().to_string());
    }
    out
}

struct OpenFunc {
    name: String,
    entry: u32,
    pro_hi: Option<u32>,
    epi_lo: Option<u32>,
}

struct Assembler {
    predefined: Vec<(String, u32)>,
    labels: HashMap<String, u32>,
    consts: HashMap<String, u32>,
    /// Constants as of the end of the first pass, for forward references.
    all_consts: HashMap<String, u32>,
    globals: HashSet<String>,
    sections: Vec<SecState>,
    cur: Option<usize>,
    sidecar: DebugSidecar,
    open_func: Option<OpenFunc>,
    open_vars: HashMap<String, (Reg, u32)>,
    open_ranges: HashMap<String, u32>,
    entry_sym: Option<String>,
    wdt: u32,
    msp: u32,
    final_pass: bool,
}

impl Assembler {
    fn new(predefined: &[(&str, u32)]) -> Self {
        let predefined: Vec<(String, u32)> = predefined
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect();
        let mut a = Assembler {
            predefined,
            labels: HashMap::new(),
            consts: HashMap::new(),
            all_consts: HashMap::new(),
            globals: HashSet::new(),
            sections: Vec::new(),
            cur: None,
            sidecar: DebugSidecar::default(),
            open_func: None,
            open_vars: HashMap::new(),
            open_ranges: HashMap::new(),
            entry_sym: None,
            wdt: 0,
            msp: layout::MSP_TOP,
            final_pass: false,
        };
        a.seed_consts();
        a
    }

    fn seed_consts(&mut self) {
        self.consts.clear();
        for (k, v) in &self.predefined {
            self.consts.insert(k.clone(), *v);
        }
    }

    fn reset_for_second_pass(&mut self) {
        self.sections.clear();
        self.cur = None;
        self.sidecar = DebugSidecar::default();
        self.open_func = None;
        self.open_vars.clear();
        self.open_ranges.clear();
        self.all_consts = std::mem::take(&mut self.consts);
        self.seed_consts();
        self.final_pass = true;
    }

    fn pass(&mut self, stmts: &[(usize, Option<String>, Option<Stmt>)], second: bool) -> Result<(), AsmError> {
        for (line, label, stmt) in stmts {
            let line = *line;
            if let Some(l) = label {
                let loc = self.loc().map_err(|k| AsmError { line, kind: k })?;
                if !second {
                    if self.labels.contains_key(l) || self.consts.contains_key(l) {
                        return Err(AsmError {
                            line,
                            kind: AsmErrorKind::Duplicate(l.clone()),
                        });
                    }
                    self.labels.insert(l.clone(), loc);
                }
            }
            if let Some(s) = stmt {
                self.statement(s).map_err(|kind| AsmError { line, kind })?;
            }
        }
        if self.open_func.is_some() {
            return Err(AsmError {
                line: 0,
                kind: AsmErrorKind::Structure("unterminated .func".into()),
            });
        }
        if let Some(v) = self.open_vars.keys().next() {
            return Err(AsmError {
                line: 0,
                kind: AsmErrorKind::Structure(format!("unterminated .var {v}")),
            });
        }
        Ok(())
    }

    fn finish(self) -> Result<Assembly, AsmError> {
        let entry = match &self.entry_sym {
            Some(s) => Some(self.lookup(s).map_err(|kind| AsmError { line: 0, kind })?),
            None => None,
        };
        let mut symbols: BTreeMap<String, u32> =
            self.labels.iter().map(|(k, v)| (k.clone(), *v)).collect();
        for (k, v) in &self.consts {
            symbols.insert(k.clone(), *v);
        }
        let sections = self
            .sections
            .into_iter()
            .map(|s| match s.kind {
                SectionKind::Reserved => Section::reserved(&s.name, s.base, s.size.unwrap_or(0)),
                kind => Section::new(&s.name, kind, s.base, s.bytes),
            })
            .collect();
        Ok(Assembly {
            sections,
            symbols,
            sidecar: self.sidecar,
            entry,
            wdt: self.wdt,
            msp: self.msp,
        })
    }

    fn sec(&mut self) -> Result<&mut SecState, AsmErrorKind> {
        let i = self.cur.ok_or(AsmErrorKind::NoSection)?;
        Ok(&mut self.sections[i])
    }

    fn loc(&mut self) -> Result<u32, AsmErrorKind> {
        Ok(self.sec()?.loc())
    }

    fn emit_bytes(&mut self, b: &[u8]) -> Result<(), AsmErrorKind> {
        let s = self.sec()?;
        if s.kind == SectionKind::Reserved {
            return Err(AsmErrorKind::ReservedData);
        }
        s.bytes.extend_from_slice(b);
        Ok(())
    }

    fn emit(&mut self, i: Instruction) -> Result<(), AsmErrorKind> {
        let bytes = if self.final_pass {
            isa::encode(&i)?
        } else {
            vec![0; i.len() as usize]
        };
        self.emit_bytes(&bytes)
    }

    fn lookup(&self, name: &str) -> Result<u32, AsmErrorKind> {
        self.consts
            .get(name)
            .or_else(|| self.all_consts.get(name))
            .or_else(|| self.labels.get(name))
            .copied()
            .ok_or_else(|| AsmErrorKind::Undefined(name.to_string()))
    }

    /// Evaluates an expression. In the first pass unknown symbols read as 0.
    fn eval(&self, e: &str) -> Result<u32, AsmErrorKind> {
        let mut p = ExprParser {
            s: e.as_bytes(),
            pos: 0,
        };
        let v = p.expr(&|name| match self.lookup(name) {
            Ok(v) => Ok(v),
            Err(_) if !self.final_pass => Ok(0),
            Err(k) => Err(k),
        })?;
        p.skip_ws();
        if p.pos != p.s.len() {
            return Err(AsmErrorKind::Operands(format!("trailing input in `{e}`")));
        }
        Ok(v)
    }

    /// True when the expression names only constants (no labels).
    fn is_constant_expr(&self, e: &str) -> bool {
        idents(e)
            .iter()
            .all(|id| self.consts.contains_key(id) || id == "hi" || id == "lo")
    }

    fn arity(args: &[String], n: usize) -> Result<(), AsmErrorKind> {
        if args.len() == n {
            Ok(())
        } else {
            Err(AsmErrorKind::Operands(format!(
                "expected {n} operands, got {}",
                args.len()
            )))
        }
    }

    fn statement(&mut self, s: &Stmt) -> Result<(), AsmErrorKind> {
        if s.op.starts_with('.') {
            self.directive(s)
        } else {
            self.instruction(s)
        }
    }

    fn directive(&mut self, s: &Stmt) -> Result<(), AsmErrorKind> {
        let a = &s.args;
        // Directives take whitespace-separated words; re-split the first arg.
        let words: Vec<String> = a
            .iter()
            .flat_map(|x| x.split_whitespace().map(str::to_string).collect::<Vec<_>>())
            .collect();
        match s.op.as_str() {
            ".section" => {
                if words.len() < 3 {
                    return Err(AsmErrorKind::Operands(".section NAME KIND ADDR [SIZE]".into()));
                }
                let kind = match words[1].as_str() {
                    "code" => SectionKind::Code,
                    "data" => SectionKind::Data,
                    "reserved" => SectionKind::Reserved,
                    k => return Err(AsmErrorKind::Operands(format!("section kind `{k}`"))),
                };
                let base = self.eval(&words[2])?;
                let size = words.get(3).map(|w| self.eval(w)).transpose()?;
                if let Some(i) = self.sections.iter().position(|x| x.name == words[0]) {
                    self.cur = Some(i);
                } else {
                    self.sections.push(SecState {
                        name: words[0].clone(),
                        kind,
                        base,
                        size,
                        bytes: Vec::new(),
                    });
                    self.cur = Some(self.sections.len() - 1);
                }
            }
            ".org" => {
                Self::arity(&words, 1)?;
                let off = self.eval(&words[0])?;
                let sec = self.sec()?;
                if (off as usize) < sec.bytes.len() {
                    return Err(AsmErrorKind::OrgBackwards);
                }
                sec.bytes.resize(off as usize, 0);
            }
            ".align" => {
                Self::arity(&words, 1)?;
                let n = self.eval(&words[0])? as usize;
                let sec = self.sec()?;
                while n > 0 && sec.bytes.len() % n != 0 {
                    sec.bytes.push(0);
                }
            }
            ".equ" => {
                Self::arity(a, 2)?;
                let v = self.eval(&a[1])?;
                self.consts.insert(a[0].clone(), v);
            }
            ".entry" => {
                Self::arity(&words, 1)?;
                self.entry_sym = Some(words[0].clone());
            }
            ".wdt" => {
                Self::arity(&words, 1)?;
                self.wdt = self.eval(&words[0])?;
            }
            ".msp" => {
                Self::arity(&words, 1)?;
                self.msp = self.eval(&words[0])?;
            }
            ".word" | ".half" | ".byte" => {
                let w = match s.op.as_str() {
                    ".word" => 4,
                    ".half" => 2,
                    _ => 1,
                };
                for e in a {
                    let v = self.eval(e)?;
                    self.emit_bytes(&v.to_le_bytes()[..w])?;
                }
            }
            ".space" => {
                let n = self.eval(&words[0])? as usize;
                let fill = words.get(1).map(|f| self.eval(f)).transpose()?.unwrap_or(0) as u8;
                self.emit_bytes(&vec![fill; n])?;
            }
            ".func" => {
                Self::arity(&words, 1)?;
                if self.open_func.is_some() {
                    return Err(AsmErrorKind::Structure("nested .func".into()));
                }
                let entry = self.loc()?;
                if !self.labels.contains_key(&words[0]) {
                    self.labels.insert(words[0].clone(), entry);
                }
                self.open_func = Some(OpenFunc {
                    name: words[0].clone(),
                    entry,
                    pro_hi: None,
                    epi_lo: None,
                });
            }
            ".endprologue" => {
                let loc = self.loc()?;
                let f = self
                    .open_func
                    .as_mut()
                    .ok_or_else(|| AsmErrorKind::Structure(".endprologue outside .func".into()))?;
                f.pro_hi = Some(loc);
            }
            ".epilogue" => {
                let loc = self.loc()?;
                let f = self
                    .open_func
                    .as_mut()
                    .ok_or_else(|| AsmErrorKind::Structure(".epilogue outside .func".into()))?;
                f.epi_lo = Some(loc);
            }
            ".endfunc" => {
                let loc = self.loc()?;
                let f = self
                    .open_func
                    .take()
                    .ok_or_else(|| AsmErrorKind::Structure(".endfunc outside .func".into()))?;
                let pro_hi = f.pro_hi.unwrap_or(f.entry);
                let epi_lo = f.epi_lo.ok_or_else(|| {
                    AsmErrorKind::Structure(format!("function {} lacks .epilogue", f.name))
                })?;
                self.sidecar.functions.push(FuncInfo {
                    name: f.name,
                    entry: f.entry,
                    ret_addr: epi_lo,
                    prologue: (f.entry, pro_hi),
                    epilogue: (epi_lo, loc),
                });
            }
            ".var" => {
                Self::arity(&words, 2)?;
                let reg: Reg = words[1].parse().map_err(AsmErrorKind::Operands)?;
                let loc = self.loc()?;
                if self.open_vars.insert(words[0].clone(), (reg, loc)).is_some() {
                    return Err(AsmErrorKind::Structure(format!("var {} already open", words[0])));
                }
            }
            ".endvar" => {
                Self::arity(&words, 1)?;
                let loc = self.loc()?;
                let (reg, lo) = self
                    .open_vars
                    .remove(&words[0])
                    .ok_or_else(|| AsmErrorKind::Structure(format!("var {} not open", words[0])))?;
                self.sidecar.vars.push(VarInfo {
                    name: words[0].clone(),
                    reg,
                    lo,
                    hi: loc,
                });
            }
            ".site" => {
                Self::arity(&words, 1)?;
                let loc = self.loc()?;
                match self.sidecar.macros.iter_mut().find(|m| m.name == words[0]) {
                    Some(m) => m.sites.push(loc),
                    None => self.sidecar.macros.push(MacroInfo {
                        name: words[0].clone(),
                        sites: vec![loc],
                    }),
                }
            }
            ".hook" => {
                Self::arity(&words, 1)?;
                let n = self.eval(&words[0])?;
                if n >= layout::HOOK_SLOT_COUNT {
                    return Err(AsmErrorKind::Operands(format!("hook slot {n} out of range")));
                }
                let slot = layout::HOOK_SLOT_BASE + 4 * n;
                for i in hook_stub(slot) {
                    self.emit(i)?;
                }
                let site = self.loc()?;
                self.sidecar.hooks.push(HookInfo { site, slot });
            }
            ".global" => {
                Self::arity(&words, 2)?;
                let loc = self.loc()?;
                let size = self.eval(&words[1])?;
                if !self.labels.contains_key(&words[0]) {
                    self.labels.insert(words[0].clone(), loc);
                }
                self.globals.insert(words[0].clone());
                self.sidecar.globals.push(GlobalInfo {
                    name: words[0].clone(),
                    addr: loc,
                    size,
                });
            }
            ".field" => {
                Self::arity(&words, 2)?;
                let (var, member) = words[0]
                    .split_once('.')
                    .ok_or_else(|| AsmErrorKind::Operands(".field VAR.MEMBER OFF".into()))?;
                let offset = self.eval(&words[1])?;
                self.sidecar.fields.push(FieldInfo {
                    var: var.to_string(),
                    member: member.to_string(),
                    offset,
                });
            }
            ".range" => {
                Self::arity(&words, 1)?;
                let loc = self.loc()?;
                self.open_ranges.insert(words[0].clone(), loc);
            }
            ".endrange" => {
                Self::arity(&words, 1)?;
                let loc = self.loc()?;
                let lo = self
                    .open_ranges
                    .remove(&words[0])
                    .ok_or_else(|| AsmErrorKind::Structure(format!("range {} not open", words[0])))?;
                match words[0].as_str() {
                    "idle" => self.sidecar.idle_range = Some((lo, loc)),
                    "service" => self.sidecar.service_range = Some((lo, loc)),
                    r => return Err(AsmErrorKind::Operands(format!("unknown range `{r}`"))),
                }
            }
            other => return Err(AsmErrorKind::Unknown(other.to_string())),
        }
        Ok(())
    }

    fn reg(&self, s: &str) -> Result<Reg, AsmErrorKind> {
        s.parse().map_err(AsmErrorKind::Operands)
    }

    fn imm(&self, s: &str) -> Result<i32, AsmErrorKind> {
        Ok(self.eval(s)? as i32)
    }

    /// `off(base)` memory operand.
    fn mem(&self, s: &str) -> Result<(i32, Reg), AsmErrorKind> {
        let open = s
            .rfind('(')
            .ok_or_else(|| AsmErrorKind::Operands(format!("expected off(base), got `{s}`")))?;
        let close = s
            .rfind(')')
            .filter(|&c| c > open)
            .ok_or_else(|| AsmErrorKind::Operands(format!("unbalanced `{s}`")))?;
        let off = s[..open].trim();
        let off = if off.is_empty() { 0 } else { self.imm(off)? };
        Ok((off, self.reg(&s[open + 1..close])?))
    }

    fn rel(&mut self, target: &str) -> Result<i32, AsmErrorKind> {
        let t = self.eval(target)?;
        let pc = self.loc()?;
        Ok(t.wrapping_sub(pc) as i32)
    }

    fn instruction(&mut self, s: &Stmt) -> Result<(), AsmErrorKind> {
        use Instruction as I;
        let a = &s.args;
        let op = s.op.as_str();
        let branch = |c| Some(c);
        let cond = match op {
            "beq" => branch(BranchCond::Eq),
            "bne" => branch(BranchCond::Ne),
            "blt" => branch(BranchCond::Lt),
            "bltu" => branch(BranchCond::Ltu),
            "bgeu" => branch(BranchCond::Geu),
            _ => None,
        };
        if let Some(cond) = cond {
            Self::arity(a, 3)?;
            let (rs1, rs2) = (self.reg(&a[0])?, self.reg(&a[1])?);
            let offset = self.rel(&a[2])?;
            return self.emit(I::Branch {
                cond,
                rs1,
                rs2,
                offset,
            });
        }
        let width = match op {
            "lw" | "sw" => Some(Width::Word),
            "lh" | "sh" => Some(Width::Half),
            "lb" | "sb" => Some(Width::Byte),
            _ => None,
        };
        if let Some(width) = width {
            Self::arity(a, 2)?;
            let r = self.reg(&a[0])?;
            let (offset, base) = self.mem(&a[1])?;
            let i = if op.starts_with('l') {
                I::Load {
                    width,
                    rd: r,
                    base,
                    offset,
                }
            } else {
                I::Store {
                    width,
                    src: r,
                    base,
                    offset,
                }
            };
            return self.emit(i);
        }
        let immop = match op {
            "addi" => Some(ImmOp::Addi),
            "andi" => Some(ImmOp::Andi),
            "ori" => Some(ImmOp::Ori),
            "xori" => Some(ImmOp::Xori),
            "sltiu" => Some(ImmOp::Sltiu),
            _ => None,
        };
        if let Some(iop) = immop {
            Self::arity(a, 3)?;
            let (rd, rs1, imm) = (self.reg(&a[0])?, self.reg(&a[1])?, self.imm(&a[2])?);
            let i = if iop == ImmOp::Addi && rd == Reg::ZERO && rs1 == Reg::ZERO && imm == 0 {
                I::Nop
            } else {
                I::OpImm { op: iop, rd, rs1, imm }
            };
            return self.emit(i);
        }
        let regop = match op {
            "add" => Some(RegOp::Add),
            "sub" => Some(RegOp::Sub),
            "and" => Some(RegOp::And),
            "or" => Some(RegOp::Or),
            "xor" => Some(RegOp::Xor),
            "sll" => Some(RegOp::Sll),
            "srl" => Some(RegOp::Srl),
            "slt" => Some(RegOp::Slt),
            _ => None,
        };
        if let Some(rop) = regop {
            Self::arity(a, 3)?;
            return self.emit(I::Op {
                op: rop,
                rd: self.reg(&a[0])?,
                rs1: self.reg(&a[1])?,
                rs2: self.reg(&a[2])?,
            });
        }
        match op {
            "lui" | "auipc" => {
                Self::arity(a, 2)?;
                let rd = self.reg(&a[0])?;
                let imm = self.eval(&a[1])?;
                self.emit(if op == "lui" {
                    I::Lui { rd, imm }
                } else {
                    I::Auipc { rd, imm }
                })
            }
            "jal" => {
                let (rd, t) = match a.len() {
                    1 => (Reg::LINK, &a[0]),
                    2 => (self.reg(&a[0])?, &a[1]),
                    _ => return Err(AsmErrorKind::Operands("jal [rd,] target".into())),
                };
                let offset = self.rel(t)?;
                self.emit(I::Jal { rd, offset })
            }
            "jalr" => {
                let (rd, rs1, offset) = match a.len() {
                    1 => (Reg::LINK, self.reg(&a[0])?, 0),
                    2 => (self.reg(&a[0])?, self.reg(&a[1])?, 0),
                    3 => (self.reg(&a[0])?, self.reg(&a[1])?, self.imm(&a[2])?),
                    _ => return Err(AsmErrorKind::Operands("jalr [rd,] rs1[, off]".into())),
                };
                self.emit(I::Jalr { rd, rs1, offset })
            }
            "ebreak" => self.emit(I::Ebreak),
            "eret" => self.emit(I::Eret),
            "idle" => self.emit(I::Idle),
            "nop" => self.emit(I::Nop),
            "c.nop" => self.emit(I::CNop),
            "c.ebreak" => self.emit(I::CEbreak),
            "c.addi" => {
                Self::arity(a, 2)?;
                let (rd, imm) = (self.reg(&a[0])?, self.imm(&a[1])?);
                self.emit(I::CAddi { rd, imm })
            }
            "c.mv" => {
                Self::arity(a, 2)?;
                let (rd, rs) = (self.reg(&a[0])?, self.reg(&a[1])?);
                self.emit(I::CMv { rd, rs })
            }
            "c.jr" => {
                Self::arity(a, 1)?;
                let rs = self.reg(&a[0])?;
                self.emit(I::CJr { rs })
            }
            // pseudo-instructions
            "li" => {
                Self::arity(a, 2)?;
                let rd = self.reg(&a[0])?;
                let v = self.eval(&a[1])?;
                let short = self.is_constant_expr(&a[1])
                    && (isa::IMM17_MIN..=isa::IMM17_MAX).contains(&(v as i32));
                if short {
                    self.emit(I::OpImm {
                        op: ImmOp::Addi,
                        rd,
                        rs1: Reg::ZERO,
                        imm: v as i32,
                    })
                } else {
                    self.load_addr(rd, v)
                }
            }
            "la" => {
                Self::arity(a, 2)?;
                let rd = self.reg(&a[0])?;
                let v = self.eval(&a[1])?;
                let sym = a[1].trim();
                if self.final_pass && self.globals.contains(sym) {
                    let site = self.loc()?;
                    self.sidecar.grefs.push(GlobalRef {
                        name: sym.to_string(),
                        site,
                        reg: rd,
                    });
                }
                self.load_addr(rd, v)
            }
            "j" => {
                Self::arity(a, 1)?;
                let offset = self.rel(&a[0])?;
                self.emit(I::Jal {
                    rd: Reg::ZERO,
                    offset,
                })
            }
            "call" => {
                Self::arity(a, 1)?;
                let offset = self.rel(&a[0])?;
                self.emit(I::Jal {
                    rd: Reg::LINK,
                    offset,
                })
            }
            "ret" => self.emit(Instruction::TRAMPOLINE),
            "mv" => {
                Self::arity(a, 2)?;
                let (rd, rs1) = (self.reg(&a[0])?, self.reg(&a[1])?);
                self.emit(I::OpImm {
                    op: ImmOp::Addi,
                    rd,
                    rs1,
                    imm: 0,
                })
            }
            "beqz" | "bnez" => {
                Self::arity(a, 2)?;
                let rs1 = self.reg(&a[0])?;
                let offset = self.rel(&a[1])?;
                self.emit(I::Branch {
                    cond: if op == "beqz" {
                        BranchCond::Eq
                    } else {
                        BranchCond::Ne
                    },
                    rs1,
                    rs2: Reg::ZERO,
                    offset,
                })
            }
            other => Err(AsmErrorKind::Unknown(other.to_string())),
        }
    }

    fn load_addr(&mut self, rd: Reg, v: u32) -> Result<(), AsmErrorKind> {
        self.emit(Instruction::Lui { rd, imm: v >> 12 })?;
        self.emit(Instruction::OpImm {
            op: ImmOp::Addi,
            rd,
            rs1: rd,
            imm: (v & 0xFFF) as i32,
        })
    }
}

/// The compile-time hook stub guarding a hookable site. Clobbers r9 and r1.
pub fn hook_stub(slot: u32) -> [Instruction; 4] {
    let r9 = Reg::r(9);
    [
        Instruction::Lui {
            rd: r9,
            imm: slot >> 12,
        },
        Instruction::Load {
            width: Width::Word,
            rd: r9,
            base: r9,
            offset: (slot & 0xFFF) as i32,
        },
        Instruction::Branch {
            cond: BranchCond::Eq,
            rs1: r9,
            rs2: Reg::ZERO,
            offset: 8,
        },
        Instruction::Jalr {
            rd: Reg::LINK,
            rs1: r9,
            offset: 0,
        },
    ]
}

fn idents(e: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut in_num = false;
    for c in e.chars() {
        if c.is_ascii_alphanumeric() || c == '_' || c == '.' {
            if cur.is_empty() {
                in_num = c.is_ascii_digit();
            }
            cur.push(c);
        } else {
            if !cur.is_empty() && !in_num {
                out.push(std::mem::take(&mut cur));
            }
            cur.clear();
        }
    }
    if !cur.is_empty() && !in_num {
        out.push(cur);
    }
    out
}

/// Recursive-descent evaluator: `+ - * & |`, unary `-`, `%hi()`, `%lo()`.
struct ExprParser<'a> {
    s: &'a [u8],
    pos: usize,
}

type Lookup<'a> = dyn Fn(&str) -> Result<u32, AsmErrorKind> + 'a;

impl ExprParser<'_> {
    fn skip_ws(&mut self) {
        while self.pos < self.s.len() && self.s[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.s.get(self.pos).copied()
    }

    fn expr(&mut self, look: &Lookup) -> Result<u32, AsmErrorKind> {
        let mut v = self.term(look)?;
        loop {
            match self.peek() {
                Some(b'+') => {
                    self.pos += 1;
                    v = v.wrapping_add(self.term(look)?);
                }
                Some(b'-') => {
                    self.pos += 1;
                    v = v.wrapping_sub(self.term(look)?);
                }
                Some(b'|') => {
                    self.pos += 1;
                    v |= self.term(look)?;
                }
                Some(b'&') => {
                    self.pos += 1;
                    v &= self.term(look)?;
                }
                _ => return Ok(v),
            }
        }
    }

    fn term(&mut self, look: &Lookup) -> Result<u32, AsmErrorKind> {
        let mut v = self.atom(look)?;
        while self.peek() == Some(b'*') {
            self.pos += 1;
            v = v.wrapping_mul(self.atom(look)?);
        }
        Ok(v)
    }

    fn atom(&mut self, look: &Lookup) -> Result<u32, AsmErrorKind> {
        let bad = |m: &str| AsmErrorKind::Operands(m.to_string());
        match self.peek() {
            Some(b'-') => {
                self.pos += 1;
                Ok(self.atom(look)?.wrapping_neg())
            }
            Some(b'(') => {
                self.pos += 1;
                let v = self.expr(look)?;
                if self.peek() != Some(b')') {
                    return Err(bad("missing `)`"));
                }
                self.pos += 1;
                Ok(v)
            }
            Some(b'%') => {
                self.pos += 1;
                let start = self.pos;
                while self.pos < self.s.len() && self.s[self.pos].is_ascii_alphabetic() {
                    self.pos += 1;
                }
                let f = std::str::from_utf8(&self.s[start..self.pos]).unwrap_or("");
                let f = f.to_string();
                if self.peek() != Some(b'(') {
                    return Err(bad("expected `(` after %hi/%lo"));
                }
                let v = self.atom(look)?;
                match f.as_str() {
                    "hi" => Ok(v >> 12),
                    "lo" => Ok(v & 0xFFF),
                    _ => Err(bad(&format!("unknown operator %{f}"))),
                }
            }
            Some(c) if c.is_ascii_digit() => {
                let start = self.pos;
                while self.pos < self.s.len()
                    && (self.s[self.pos].is_ascii_alphanumeric() || self.s[self.pos] == b'_')
                {
                    self.pos += 1;
                }
                let t = std::str::from_utf8(&self.s[start..self.pos])
                    .unwrap_or("")
                    .replace('_', "");
                let parsed = if let Some(h) = t.strip_prefix("0x") {
                    u32::from_str_radix(h, 16)
                } else if let Some(b) = t.strip_prefix("0b") {
                    u32::from_str_radix(b, 2)
                } else {
                    t.parse::<u32>()
                };
                parsed.map_err(|_| bad(&format!("bad number `{t}`")))
            }
            Some(c) if c.is_ascii_alphabetic() || c == b'_' || c == b'.' => {
                let start = self.pos;
                while self.pos < self.s.len()
                    && (self.s[self.pos].is_ascii_alphanumeric()
                        || self.s[self.pos] == b'_'
                        || self.s[self.pos] == b'.')
                {
                    self.pos += 1;
                }
                let name = std::str::from_utf8(&self.s[start..self.pos]).unwrap_or("");
                look(name)
            }
            _ => Err(bad("expected expression")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_and_branches() {
        let src = "
            .section .text code 0x20000000
            .entry start
        start:
            li r3, 3
        loop:
            addi r3, r3, -1
            bnez r3, loop
            idle
        ";
        let a = assemble(src, &[]).unwrap();
        assert_eq!(a.entry, Some(0x2000_0000));
        assert_eq!(a.symbol("loop"), Some(0x2000_0004));
        let code = isa::decode_all(0x2000_0000, &a.sections[0].bytes).unwrap();
        assert_eq!(code.len(), 4);
        assert!(matches!(code[2].1, Instruction::Branch { offset: -4, .. }));
    }

    #[test]
    fn la_is_always_two_words_and_records_gref() {
        let src = "
            .section .text code 0x20000000
            la r5, cfg
            li r6, big
            li r7, 12
            .section .data data 0x20004000
            .global cfg 4
            .word 7
            .equ big, 0x123456
        ";
        let a = assemble(src, &[]).unwrap();
        let code = isa::decode_all(0x2000_0000, &a.sections[0].bytes).unwrap();
        // la: 2, li big (defined later, so long form): 2, li 12: 1
        assert_eq!(code.len(), 5);
        assert_eq!(a.sidecar.grefs.len(), 1);
        assert_eq!(a.sidecar.grefs[0].site, 0x2000_0000);
        assert_eq!(a.sidecar.globals[0].addr, 0x2000_4000);
    }

    #[test]
    fn func_metadata() {
        let src = "
            .section .text code 0x20000000
            .func f
            addi sp, sp, -8
            sw r1, 0(sp)
            .endprologue
            .var x r6
            li r6, 1
            .endvar x
            .site M
            nop
            .epilogue
            lw r1, 0(sp)
            addi sp, sp, 8
            ret
            .endfunc
        ";
        let a = assemble(src, &[]).unwrap();
        let f = &a.sidecar.functions[0];
        assert_eq!(f.prologue, (0x2000_0000, 0x2000_0008));
        assert_eq!(f.ret_addr, 0x2000_0010);
        assert_eq!(f.epilogue, (0x2000_0010, 0x2000_001C));
        assert_eq!(a.sidecar.vars[0].lo, 0x2000_0008);
        assert_eq!(a.sidecar.macros[0].sites, vec![0x2000_000C]);
    }

    #[test]
    fn errors_carry_lines() {
        let e = assemble(".section .t code 0\n bogus r1", &[]).unwrap_err();
        assert_eq!(e.line, 2);
        let e = assemble(".section .t code 0\n j nowhere", &[]).unwrap_err();
        assert!(matches!(e.kind, AsmErrorKind::Undefined(_)));
        let e = assemble(".section .t code 0\n addi r1, r1, 0x100000", &[]).unwrap_err();
        assert!(matches!(e.kind, AsmErrorKind::Isa(_)));
    }
}
