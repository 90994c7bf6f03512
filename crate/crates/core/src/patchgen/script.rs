//! PatchScript front end: tokens, syntax tree and a recursive-descent parser.
//! Concrete syntax is described in `docs/patchscript.md`.

use std::fmt;

use thiserror::Error;

use crate::isa::Width;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("line {line}: {msg}")]
pub struct ParseError {
    pub line: usize,
    pub msg: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Tok {
    Ident(String),
    Num(u32),
    Sym(&'static str),
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Ident(s) => write!(f, "`{s}`"),
            Tok::Num(n) => write!(f, "`{n}`"),
            Tok::Sym(s) => write!(f, "`{s}`"),
        }
    }
}

const SYMS: [&str; 27] = [
    "<<", ">>", "<=", ">=", "==", "!=", "&&", "||", "+", "-", "&", "|", "^", "~", "<", ">", "=",
    "(", ")", "{", "}", "[", "]", ",", ";", ".", "@",
];

fn lex(src: &str) -> Result<Vec<(usize, Tok)>, ParseError> {
    let mut out = Vec::new();
    for (n, raw) in src.lines().enumerate() {
        let line = n + 1;
        let text = raw
            .split("//")
            .next()
            .unwrap_or("")
            .split('#')
            .next()
            .unwrap_or("");
        let b = text.as_bytes();
        let mut i = 0;
        'outer: while i < b.len() {
            let c = b[i];
            if c.is_ascii_whitespace() {
                i += 1;
                continue;
            }
            if c.is_ascii_alphabetic() || c == b'_' {
                let s = i;
                while i < b.len() && (b[i].is_ascii_alphanumeric() || b[i] == b'_') {
                    i += 1;
                }
                out.push((line, Tok::Ident(text[s..i].to_string())));
                continue;
            }
            if c.is_ascii_digit() {
                let s = i;
                while i < b.len() && (b[i].is_ascii_alphanumeric() || b[i] == b'_') {
                    i += 1;
                }
                let lit = text[s..i].replace('_', "");
                let v = match lit.strip_prefix("0x").or_else(|| lit.strip_prefix("0X")) {
                    Some(h) => u32::from_str_radix(h, 16),
                    None => lit.parse(),
                };
                let v = v.map_err(|_| ParseError {
                    line,
                    msg: format!("bad number `{lit}`"),
                })?;
                out.push((line, Tok::Num(v)));
                continue;
            }
            for s in SYMS {
                if text[i..].starts_with(s) {
                    out.push((line, Tok::Sym(s)));
                    i += s.len();
                    continue 'outer;
                }
            }
            return Err(ParseError {
                line,
                msg: format!("unexpected character `{}`", c as char),
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    And,
    Or,
    Xor,
    Shl,
    Shr,
}

/// Unsigned comparisons.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CmpOp {
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
}

impl CmpOp {
    pub fn negate(self) -> CmpOp {
        match self {
            CmpOp::Lt => CmpOp::Ge,
            CmpOp::Ge => CmpOp::Lt,
            CmpOp::Gt => CmpOp::Le,
            CmpOp::Le => CmpOp::Gt,
            CmpOp::Eq => CmpOp::Ne,
            CmpOp::Ne => CmpOp::Eq,
        }
    }

    pub fn eval(self, a: u32, b: u32) -> bool {
        match self {
            CmpOp::Lt => a < b,
            CmpOp::Le => a <= b,
            CmpOp::Gt => a > b,
            CmpOp::Ge => a >= b,
            CmpOp::Eq => a == b,
            CmpOp::Ne => a != b,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Expr {
    Num(u32),
    /// Variable, `let` temporary or named constant.
    Name(String),
    /// `var.member`: word at the variable's value plus the member offset.
    Field(String, String),
    /// `S[k]` or `S[var]`: raw frame slot.
    Slot(SlotRef),
    /// `R[n]`: saved register n.
    Reg(u8),
    /// `@name`: address of a global.
    Global(String),
    Mem(Width, Box<Expr>),
    Neg(Box<Expr>),
    BitNot(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Cmp(CmpOp, Box<Expr>, Box<Expr>),
    And(Box<Expr>, Box<Expr>),
    Or(Box<Expr>, Box<Expr>),
    Not(Box<Expr>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SlotRef {
    Index(u32),
    Var(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LValue {
    Name(String),
    Field(String, String),
    Slot(SlotRef),
    Reg(u8),
    Mem(Width, Expr),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ReturnKind {
    Pass,
    RedirectSkip,
    RedirectCaller,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Stmt {
    Const(String, Expr),
    Let(String, Expr),
    Assign(LValue, Expr),
    If(Expr, Vec<Stmt>, Vec<Stmt>),
    Repeat(u32, Vec<Stmt>),
    SetRetval(Expr),
    Return(ReturnKind),
}

/// A parsed patch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchSource {
    pub body: Vec<Stmt>,
}

impl PatchSource {
    pub fn parse(src: &str) -> Result<Self, ParseError> {
        let toks = lex(src)?;
        let mut p = Parser { toks, pos: 0 };
        let body = p.block_until(None)?;
        Ok(PatchSource { body })
    }

    /// Frame variables the patch mentions, sorted and deduplicated.
    /// Names bound by `let` or `const` are excluded.
    pub fn referenced_vars(&self) -> Vec<String> {
        let mut bound = Vec::new();
        let mut out = Vec::new();
        collect_stmts(&self.body, &mut bound, &mut out);
        out.sort();
        out.dedup();
        out
    }

    pub fn referenced_globals(&self) -> Vec<String> {
        let mut out = Vec::new();
        walk_exprs(&self.body, &mut |e| {
            if let Expr::Global(g) = e {
                out.push(g.clone());
            }
        });
        out.sort();
        out.dedup();
        out
    }

    pub fn return_kinds(&self) -> Vec<ReturnKind> {
        fn go(s: &[Stmt], out: &mut Vec<ReturnKind>) {
            for st in s {
                match st {
                    Stmt::Return(k) => out.push(*k),
                    Stmt::If(_, a, b) => {
                        go(a, out);
                        go(b, out);
                    }
                    Stmt::Repeat(_, b) => go(b, out),
                    _ => {}
                }
            }
        }
        let mut v = Vec::new();
        go(&self.body, &mut v);
        v
    }
}

fn collect_expr(e: &Expr, bound: &[String], out: &mut Vec<String>) {
    match e {
        Expr::Name(n) | Expr::Field(n, _) | Expr::Slot(SlotRef::Var(n)) => {
            if !bound.contains(n) {
                out.push(n.clone())
            }
        }
        Expr::Mem(_, a) | Expr::Neg(a) | Expr::BitNot(a) | Expr::Not(a) => collect_expr(a, bound, out),
        Expr::Bin(_, a, b) | Expr::Cmp(_, a, b) | Expr::And(a, b) | Expr::Or(a, b) => {
            collect_expr(a, bound, out);
            collect_expr(b, bound, out);
        }
        _ => {}
    }
}

fn collect_stmts(body: &[Stmt], bound: &mut Vec<String>, out: &mut Vec<String>) {
    let mark = bound.len();
    for s in body {
        match s {
            Stmt::Const(n, e) | Stmt::Let(n, e) => {
                collect_expr(e, bound, out);
                bound.push(n.clone());
            }
            Stmt::Assign(lv, e) => {
                collect_expr(e, bound, out);
                match lv {
                    LValue::Name(n) | LValue::Field(n, _) | LValue::Slot(SlotRef::Var(n)) => {
                        if !bound.contains(n) {
                            out.push(n.clone())
                        }
                    }
                    LValue::Mem(_, a) => collect_expr(a, bound, out),
                    _ => {}
                }
            }
            Stmt::If(c, a, b) => {
                collect_expr(c, bound, out);
                collect_stmts(a, bound, out);
                collect_stmts(b, bound, out);
            }
            Stmt::Repeat(_, b) => collect_stmts(b, bound, out),
            Stmt::SetRetval(e) => collect_expr(e, bound, out),
            Stmt::Return(_) => {}
        }
    }
    bound.truncate(mark);
}

fn walk_expr(e: &Expr, f: &mut dyn FnMut(&Expr)) {
    f(e);
    match e {
        Expr::Mem(_, a) | Expr::Neg(a) | Expr::BitNot(a) | Expr::Not(a) => walk_expr(a, f),
        Expr::Bin(_, a, b) | Expr::Cmp(_, a, b) | Expr::And(a, b) | Expr::Or(a, b) => {
            walk_expr(a, f);
            walk_expr(b, f);
        }
        _ => {}
    }
}

fn walk_exprs(body: &[Stmt], f: &mut dyn FnMut(&Expr)) {
    for s in body {
        match s {
            Stmt::Const(_, e) | Stmt::Let(_, e) | Stmt::SetRetval(e) => walk_expr(e, f),
            Stmt::Assign(lv, e) => {
                walk_expr(e, f);
                if let LValue::Mem(_, a) = lv {
                    walk_expr(a, f);
                }
            }
            Stmt::If(c, a, b) => {
                walk_expr(c, f);
                walk_exprs(a, f);
                walk_exprs(b, f);
            }
            Stmt::Repeat(_, b) => walk_exprs(b, f),
            Stmt::Return(_) => {}
        }
    }
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    pos: usize,
}

impl Parser {
    fn line(&self) -> usize {
        self.toks
            .get(self.pos)
            .or_else(|| self.toks.last())
            .map(|t| t.0)
            .unwrap_or(0)
    }

    fn err<T>(&self, msg: impl Into<String>) -> Result<T, ParseError> {
        Err(ParseError {
            line: self.line(),
            msg: msg.into(),
        })
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|t| &t.1)
    }

    fn peek_at(&self, k: usize) -> Option<&Tok> {
        self.toks.get(self.pos + k).map(|t| &t.1)
    }

    fn is_sym(&self, s: &str) -> bool {
        matches!(self.peek(), Some(Tok::Sym(x)) if *x == s)
    }

    fn is_kw(&self, s: &str) -> bool {
        matches!(self.peek(), Some(Tok::Ident(x)) if x == s)
    }

    fn eat_sym(&mut self, s: &str) -> bool {
        if self.is_sym(s) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn eat_kw(&mut self, s: &str) -> bool {
        if self.is_kw(s) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect_sym(&mut self, s: &str) -> Result<(), ParseError> {
        if self.eat_sym(s) {
            Ok(())
        } else {
            match self.peek() {
                Some(t) => self.err(format!("expected `{s}`, found {t}")),
                None => self.err(format!("expected `{s}` at end of input")),
            }
        }
    }

    fn ident(&mut self) -> Result<String, ParseError> {
        match self.peek() {
            Some(Tok::Ident(s)) => {
                let s = s.clone();
                self.pos += 1;
                Ok(s)
            }
            Some(t) => self.err(format!("expected identifier, found {t}")),
            None => self.err("expected identifier at end of input"),
        }
    }

    fn number(&mut self) -> Result<u32, ParseError> {
        match self.peek() {
            Some(Tok::Num(n)) => {
                let n = *n;
                self.pos += 1;
                Ok(n)
            }
            Some(t) => self.err(format!("expected number, found {t}")),
            None => self.err("expected number at end of input"),
        }
    }

    fn block_until(&mut self, close: Option<&str>) -> Result<Vec<Stmt>, ParseError> {
        let mut out = Vec::new();
        loop {
            while self.eat_sym(";") {}
            match (self.peek(), close) {
                (None, None) => return Ok(out),
                (None, Some(c)) => return self.err(format!("missing `{c}`")),
                (Some(Tok::Sym(s)), Some(c)) if *s == c => {
                    self.pos += 1;
                    return Ok(out);
                }
                _ => out.push(self.stmt()?),
            }
        }
    }

    fn braced(&mut self) -> Result<Vec<Stmt>, ParseError> {
        self.expect_sym("{")?;
        self.block_until(Some("}"))
    }

    fn stmt(&mut self) -> Result<Stmt, ParseError> {
        if self.eat_kw("const") {
            let n = self.ident()?;
            self.expect_sym("=")?;
            return Ok(Stmt::Const(n, self.expr()?));
        }
        if self.eat_kw("let") {
            let n = self.ident()?;
            self.expect_sym("=")?;
            return Ok(Stmt::Let(n, self.expr()?));
        }
        if self.eat_kw("if") {
            let c = self.expr()?;
            let then = self.braced()?;
            let els = if self.eat_kw("else") {
                if self.is_kw("if") {
                    vec![self.stmt()?]
                } else {
                    self.braced()?
                }
            } else {
                Vec::new()
            };
            return Ok(Stmt::If(c, then, els));
        }
        if self.eat_kw("repeat") {
            let n = self.number()?;
            return Ok(Stmt::Repeat(n, self.braced()?));
        }
        if self.eat_kw("set_retval") {
            self.expect_sym("(")?;
            let e = self.expr()?;
            self.expect_sym(")")?;
            return Ok(Stmt::SetRetval(e));
        }
        for (kw, k) in [
            ("return_pass", ReturnKind::Pass),
            ("return_redirect_skip", ReturnKind::RedirectSkip),
            ("return_redirect_caller", ReturnKind::RedirectCaller),
        ] {
            if self.eat_kw(kw) {
                return Ok(Stmt::Return(k));
            }
        }
        let lv = self.lvalue()?;
        self.expect_sym("=")?;
        Ok(Stmt::Assign(lv, self.expr()?))
    }

    fn mem_width(name: &str) -> Option<Width> {
        match name {
            "mem32" => Some(Width::Word),
            "mem16" => Some(Width::Half),
            "mem8" => Some(Width::Byte),
            _ => None,
        }
    }

    fn slot_ref(&mut self) -> Result<SlotRef, ParseError> {
        self.expect_sym("[")?;
        let r = match self.peek() {
            Some(Tok::Num(_)) => SlotRef::Index(self.number()?),
            _ => SlotRef::Var(self.ident()?),
        };
        self.expect_sym("]")?;
        Ok(r)
    }

    fn reg_ref(&mut self) -> Result<u8, ParseError> {
        self.expect_sym("[")?;
        let n = self.number()?;
        self.expect_sym("]")?;
        if n >= 16 {
            return self.err(format!("register R[{n}] out of range"));
        }
        Ok(n as u8)
    }

    fn lvalue(&mut self) -> Result<LValue, ParseError> {
        let name = self.ident()?;
        if let Some(w) = Self::mem_width(&name) {
            self.expect_sym("[")?;
            let e = self.expr()?;
            self.expect_sym("]")?;
            return Ok(LValue::Mem(w, e));
        }
        if name == "S" && self.is_sym("[") {
            return Ok(LValue::Slot(self.slot_ref()?));
        }
        if name == "R" && self.is_sym("[") {
            return Ok(LValue::Reg(self.reg_ref()?));
        }
        if self.eat_sym(".") {
            return Ok(LValue::Field(name, self.ident()?));
        }
        Ok(LValue::Name(name))
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut e = self.and_expr()?;
        while self.eat_kw("or") || self.eat_sym("||") {
            e = Expr::Or(Box::new(e), Box::new(self.and_expr()?));
        }
        Ok(e)
    }

    fn and_expr(&mut self) -> Result<Expr, ParseError> {
        let mut e = self.not_expr()?;
        while self.eat_kw("and") || self.eat_sym("&&") {
            e = Expr::And(Box::new(e), Box::new(self.not_expr()?));
        }
        Ok(e)
    }

    fn not_expr(&mut self) -> Result<Expr, ParseError> {
        if self.eat_kw("not") {
            return Ok(Expr::Not(Box::new(self.not_expr()?)));
        }
        self.cmp_expr()
    }

    fn cmp_expr(&mut self) -> Result<Expr, ParseError> {
        let a = self.bitor()?;
        for (s, op) in [
            ("<=", CmpOp::Le),
            (">=", CmpOp::Ge),
            ("==", CmpOp::Eq),
            ("!=", CmpOp::Ne),
            ("<", CmpOp::Lt),
            (">", CmpOp::Gt),
        ] {
            if self.eat_sym(s) {
                let b = self.bitor()?;
                return Ok(Expr::Cmp(op, Box::new(a), Box::new(b)));
            }
        }
        Ok(a)
    }

    fn bitor(&mut self) -> Result<Expr, ParseError> {
        let mut e = self.bitxor()?;
        while self.is_sym("|") {
            self.pos += 1;
            e = Expr::Bin(BinOp::Or, Box::new(e), Box::new(self.bitxor()?));
        }
        Ok(e)
    }

    fn bitxor(&mut self) -> Result<Expr, ParseError> {
        let mut e = self.bitand()?;
        while self.eat_sym("^") {
            e = Expr::Bin(BinOp::Xor, Box::new(e), Box::new(self.bitand()?));
        }
        Ok(e)
    }

    fn bitand(&mut self) -> Result<Expr, ParseError> {
        let mut e = self.shift()?;
        while self.is_sym("&") {
            self.pos += 1;
            e = Expr::Bin(BinOp::And, Box::new(e), Box::new(self.shift()?));
        }
        Ok(e)
    }

    fn shift(&mut self) -> Result<Expr, ParseError> {
        let mut e = self.additive()?;
        loop {
            let op = if self.eat_sym("<<") {
                BinOp::Shl
            } else if self.eat_sym(">>") {
                BinOp::Shr
            } else {
                return Ok(e);
            };
            e = Expr::Bin(op, Box::new(e), Box::new(self.additive()?));
        }
    }

    fn additive(&mut self) -> Result<Expr, ParseError> {
        let mut e = self.unary()?;
        loop {
            let op = if self.eat_sym("+") {
                BinOp::Add
            } else if self.eat_sym("-") {
                BinOp::Sub
            } else {
                return Ok(e);
            };
            e = Expr::Bin(op, Box::new(e), Box::new(self.unary()?));
        }
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if self.eat_sym("-") {
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        if self.eat_sym("~") {
            return Ok(Expr::BitNot(Box::new(self.unary()?)));
        }
        self.primary()
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        if self.eat_sym("(") {
            let e = self.expr()?;
            self.expect_sym(")")?;
            return Ok(e);
        }
        if self.eat_sym("@") {
            return Ok(Expr::Global(self.ident()?));
        }
        if let Some(Tok::Num(_)) = self.peek() {
            return Ok(Expr::Num(self.number()?));
        }
        let name = self.ident()?;
        if matches!(
            name.as_str(),
            "and" | "or" | "not" | "if" | "else" | "let" | "const" | "repeat"
        ) {
            return self.err(format!("keyword `{name}` used as a value"));
        }
        if let Some(w) = Self::mem_width(&name) {
            self.expect_sym("[")?;
            let e = self.expr()?;
            self.expect_sym("]")?;
            return Ok(Expr::Mem(w, Box::new(e)));
        }
        if name == "S" && self.is_sym("[") {
            return Ok(Expr::Slot(self.slot_ref()?));
        }
        if name == "R" && self.is_sym("[") {
            return Ok(Expr::Reg(self.reg_ref()?));
        }
        if self.is_sym(".") && matches!(self.peek_at(1), Some(Tok::Ident(_))) {
            self.pos += 1;
            return Ok(Expr::Field(name, self.ident()?));
        }
        Ok(Expr::Name(name))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_bound_check() {
        let p = PatchSource::parse(
            "if hdr < 5 or hdr > 15 or hdr >= desc.len {\n  set_retval(2)\n  return_redirect_caller\n}\nR[7] = buf + hdr; return_pass",
        )
        .unwrap();
        assert_eq!(p.body.len(), 3);
        assert_eq!(p.referenced_vars(), vec!["buf", "desc", "hdr"]);
        assert_eq!(
            p.return_kinds(),
            vec![ReturnKind::RedirectCaller, ReturnKind::Pass]
        );
    }

    #[test]
    fn precedence() {
        let p = PatchSource::parse("x = 1 + 2 & 3 | 4 << 1").unwrap();
        let Stmt::Assign(_, e) = &p.body[0] else {
            panic!()
        };
        // | binds loosest, then &, then <<, then +
        assert!(matches!(e, Expr::Bin(BinOp::Or, _, _)));
    }

    #[test]
    fn let_and_const_are_not_vars() {
        let p = PatchSource::parse("const N = 4\nlet t = a + N\nb = t\nreturn_pass").unwrap();
        assert_eq!(p.referenced_vars(), vec!["a", "b"]);
    }

    #[test]
    fn globals_and_comments() {
        let p = PatchSource::parse("# comment\nR[5] = @cfg // trailing\nreturn_redirect_skip").unwrap();
        assert_eq!(p.referenced_globals(), vec!["cfg"]);
        assert!(p.referenced_vars().is_empty());
    }

    #[test]
    fn errors_have_lines() {
        let e = PatchSource::parse("return_pass\nif x {").unwrap_err();
        assert_eq!(e.line, 2);
        assert!(PatchSource::parse("R[16] = 1").is_err());
        assert!(PatchSource::parse("x = $").is_err());
    }
}
