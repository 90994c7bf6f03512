//! Debug sidecar: line-oriented metadata emitted by the assembler.
//!
//! ```text
//! FUNC name entry ret_addr pro_lo pro_hi epi_lo epi_hi
//! VAR name reg live_lo live_hi
//! MACRO name site...
//! RANGE idle|service lo hi
//! FRAME profile slot:holder...
//! HOOK site slot_addr
//! GLOBAL name addr size
//! GREF name site reg
//! FIELD var.member offset
//! ```
//!
//! Addresses are hexadecimal; ranges are half-open.

use std::fmt;

use thiserror::Error;

use crate::frames::FrameLayout;
use crate::isa::Reg;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SidecarError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FuncInfo {
    pub name: String,
    pub entry: u32,
    /// First instruction of the epilogue; the target of caller redirection.
    pub ret_addr: u32,
    pub prologue: (u32, u32),
    pub epilogue: (u32, u32),
}

impl FuncInfo {
    pub fn end(&self) -> u32 {
        self.epilogue.1
    }

    pub fn contains(&self, addr: u32) -> bool {
        (self.entry..self.end()).contains(&addr)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VarInfo {
    pub name: String,
    pub reg: Reg,
    pub lo: u32,
    pub hi: u32,
}

impl VarInfo {
    pub fn covers(&self, addr: u32) -> bool {
        (self.lo..self.hi).contains(&addr)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MacroInfo {
    pub name: String,
    pub sites: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HookInfo {
    /// Address right after the stub: where the hooked code resumes.
    pub site: u32,
    pub slot: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GlobalInfo {
    pub name: String,
    pub addr: u32,
    pub size: u32,
}

/// A `la reg, global` materialization (LUI+ADDI pair starting at `site`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GlobalRef {
    pub name: String,
    pub site: u32,
    pub reg: Reg,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FieldInfo {
    pub var: String,
    pub member: String,
    pub offset: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DebugSidecar {
    pub functions: Vec<FuncInfo>,
    pub vars: Vec<VarInfo>,
    pub macros: Vec<MacroInfo>,
    pub idle_range: Option<(u32, u32)>,
    pub service_range: Option<(u32, u32)>,
    pub frames: Vec<FrameLayout>,
    pub hooks: Vec<HookInfo>,
    pub globals: Vec<GlobalInfo>,
    pub grefs: Vec<GlobalRef>,
    pub fields: Vec<FieldInfo>,
}

impl DebugSidecar {
    pub fn function(&self, name: &str) -> Option<&FuncInfo> {
        self.functions.iter().find(|f| f.name == name)
    }

    pub fn function_at(&self, addr: u32) -> Option<&FuncInfo> {
        self.functions.iter().find(|f| f.contains(addr))
    }

    pub fn macro_sites(&self, name: &str) -> Option<&[u32]> {
        self.macros
            .iter()
            .find(|m| m.name == name)
            .map(|m| m.sites.as_slice())
    }

    pub fn hook_at(&self, site: u32) -> Option<&HookInfo> {
        self.hooks.iter().find(|h| h.site == site)
    }

    pub fn global(&self, name: &str) -> Option<&GlobalInfo> {
        self.globals.iter().find(|g| g.name == name)
    }

    pub fn grefs_of<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a GlobalRef> + 'a {
        self.grefs.iter().filter(move |r| r.name == name)
    }

    pub fn field(&self, var: &str, member: &str) -> Option<u32> {
        self.fields
            .iter()
            .find(|f| f.var == var && f.member == member)
            .map(|f| f.offset)
    }

    pub fn frame(&self, profile: &str) -> Option<&FrameLayout> {
        self.frames.iter().find(|f| f.profile == profile)
    }

    pub fn in_service(&self, addr: u32) -> bool {
        self.service_range
            .is_some_and(|(lo, hi)| (lo..hi).contains(&addr))
    }

    pub fn in_idle(&self, addr: u32) -> bool {
        self.idle_range.is_some_and(|(lo, hi)| (lo..hi).contains(&addr))
    }

    pub fn parse(text: &str) -> Result<Self, SidecarError> {
        let mut sc = DebugSidecar::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let err = |msg: &str| SidecarError::Parse {
                line,
                msg: msg.to_string(),
            };
            let toks: Vec<&str> = raw.split_whitespace().collect();
            let Some((&kw, rest)) = toks.split_first() else {
                continue;
            };
            let hex = |s: &str| {
                u32::from_str_radix(s.trim_start_matches("0x"), 16)
                    .map_err(|_| err(&format!("bad hex `{s}`")))
            };
            let reg = |s: &str| s.parse::<Reg>().map_err(|e| err(&e));
            let want = |n: usize| {
                if rest.len() == n {
                    Ok(())
                } else {
                    Err(err(&format!("{kw} expects {n} fields")))
                }
            };
            match kw {
                "FUNC" => {
                    want(7)?;
                    sc.functions.push(FuncInfo {
                        name: rest[0].to_string(),
                        entry: hex(rest[1])?,
                        ret_addr: hex(rest[2])?,
                        prologue: (hex(rest[3])?, hex(rest[4])?),
                        epilogue: (hex(rest[5])?, hex(rest[6])?),
                    });
                }
                "VAR" => {
                    want(4)?;
                    sc.vars.push(VarInfo {
                        name: rest[0].to_string(),
                        reg: reg(rest[1])?,
                        lo: hex(rest[2])?,
                        hi: hex(rest[3])?,
                    });
                }
                "MACRO" => {
                    let name = rest.first().ok_or_else(|| err("MACRO needs a name"))?;
                    let sites = rest[1..].iter().map(|s| hex(s)).collect::<Result<_, _>>()?;
                    sc.macros.push(MacroInfo {
                        name: name.to_string(),
                        sites,
                    });
                }
                "RANGE" => {
                    want(3)?;
                    let r = Some((hex(rest[1])?, hex(rest[2])?));
                    match rest[0] {
                        "idle" => sc.idle_range = r,
                        "service" => sc.service_range = r,
                        other => return Err(err(&format!("unknown range `{other}`"))),
                    }
                }
                "FRAME" => {
                    let layout = FrameLayout::parse_fields(rest).map_err(|e| err(&e))?;
                    sc.frames.push(layout);
                }
                "HOOK" => {
                    want(2)?;
                    sc.hooks.push(HookInfo {
                        site: hex(rest[0])?,
                        slot: hex(rest[1])?,
                    });
                }
                "GLOBAL" => {
                    want(3)?;
                    sc.globals.push(GlobalInfo {
                        name: rest[0].to_string(),
                        addr: hex(rest[1])?,
                        size: hex(rest[2])?,
                    });
                }
                "GREF" => {
                    want(3)?;
                    sc.grefs.push(GlobalRef {
                        name: rest[0].to_string(),
                        site: hex(rest[1])?,
                        reg: reg(rest[2])?,
                    });
                }
                "FIELD" => {
                    want(2)?;
                    let (var, member) = rest[0]
                        .split_once('.')
                        .ok_or_else(|| err("FIELD expects var.member"))?;
                    sc.fields.push(FieldInfo {
                        var: var.to_string(),
                        member: member.to_string(),
                        offset: hex(rest[1])?,
                    });
                }
                other => return Err(err(&format!("unknown record `{other}`"))),
            }
        }
        Ok(sc)
    }
}

impl fmt::Display for DebugSidecar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for func in &self.functions {
            writeln!(
                f,
                "FUNC {} {:x} {:x} {:x} {:x} {:x} {:x}",
                func.name,
                func.entry,
                func.ret_addr,
                func.prologue.0,
                func.prologue.1,
                func.epilogue.0,
                func.epilogue.1
            )?;
        }
        for v in &self.vars {
            writeln!(f, "VAR {} {} {:x} {:x}", v.name, v.reg, v.lo, v.hi)?;
        }
        for m in &self.macros {
            write!(f, "MACRO {}", m.name)?;
            for s in &m.sites {
                write!(f, " {s:x}")?;
            }
            writeln!(f)?;
        }
        if let Some((lo, hi)) = self.idle_range {
            writeln!(f, "RANGE idle {lo:x} {hi:x}")?;
        }
        if let Some((lo, hi)) = self.service_range {
            writeln!(f, "RANGE service {lo:x} {hi:x}")?;
        }
        for fr in &self.frames {
            writeln!(f, "{}", fr.to_line())?;
        }
        for h in &self.hooks {
            writeln!(f, "HOOK {:x} {:x}", h.site, h.slot)?;
        }
        for g in &self.globals {
            writeln!(f, "GLOBAL {} {:x} {:x}", g.name, g.addr, g.size)?;
        }
        for r in &self.grefs {
            writeln!(f, "GREF {} {:x} {}", r.name, r.site, r.reg)?;
        }
        for fi in &self.fields {
            writeln!(f, "FIELD {}.{} {:x}", fi.var, fi.member, fi.offset)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let text = "\
FUNC parse 20000100 20000140 20000100 2000010c 20000140 2000014c
VAR hdr r6 20000110 20000130
MACRO MAXLEN 20000200 20000300
RANGE idle 20000010 20000014
RANGE service 20000020 20000030
HOOK 20000110 2000c800
GLOBAL cfg 20004000 4
GREF cfg 20000220 r5
FIELD desc.len 1c
";
        let sc = DebugSidecar::parse(text).unwrap();
        assert_eq!(sc.to_string(), text);
        assert_eq!(sc.field("desc", "len"), Some(0x1C));
        assert!(sc.in_idle(0x2000_0010));
        assert!(!sc.in_idle(0x2000_0014));
        assert_eq!(sc.function_at(0x2000_0120).unwrap().name, "parse");
    }

    #[test]
    fn rejects_garbage() {
        assert!(DebugSidecar::parse("VAR x r6 10").is_err());
        assert!(DebugSidecar::parse("BOGUS").is_err());
        assert!(DebugSidecar::parse("VAR x r99 10 20").is_err());
    }
}
