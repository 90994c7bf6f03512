//! Variable → register (R1), register → frame slot (R2) and their
//! composition into the table patch code is compiled against.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::analysis::dataflow::{self, ReachingDefs};
use crate::analysis::sidecar::DebugSidecar;
use crate::frames::{FrameLayout, SlotHolder};
use crate::image::FirmwareImage;
use crate::isa::Reg;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MapError {
    #[error("variable `{0}` is not live in a register at the update point")]
    VarNotLive(String),
    #[error("variable `{0}` has two live intervals at the update point")]
    AmbiguousDefinition(String),
    #[error("register {0:?} has no frame slot")]
    UnmappedRegister(Reg),
    #[error("no function contains {0:#010x}")]
    NoFunction(u32),
    #[error("function containing {0:#010x} does not decode")]
    Decode(u32),
    #[error("mapping table line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

pub type R1 = BTreeMap<String, Reg>;

/// Inverted frame layout.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct R2 {
    pub profile: String,
    pub regs: BTreeMap<Reg, usize>,
    pub ra_slot: usize,
    pub retval_slot: usize,
    pub frame_words: usize,
}

/// R1 from the sidecar, each row confirmed by reaching definitions.
pub fn build_r1(
    sidecar: &DebugSidecar,
    image: &FirmwareImage,
    addr: u32,
    patch_vars: &[&str],
) -> Result<R1, MapError> {
    let mut out = R1::new();
    if patch_vars.is_empty() {
        return Ok(out);
    }
    let func = sidecar.function_at(addr).ok_or(MapError::NoFunction(addr))?;
    let rd = ReachingDefs::compute(image, func).map_err(|_| MapError::Decode(addr))?;
    let mut vars: Vec<&str> = patch_vars.to_vec();
    vars.sort_unstable();
    vars.dedup();
    for v in vars {
        let live: Vec<_> = sidecar
            .vars
            .iter()
            .filter(|x| x.name == v && x.covers(addr))
            .collect();
        let reg = match live.as_slice() {
            [] => return Err(MapError::VarNotLive(v.to_string())),
            [one] => one.reg,
            _ => return Err(MapError::AmbiguousDefinition(v.to_string())),
        };
        if !dataflow::defined_at(&rd, addr, reg) {
            return Err(MapError::VarNotLive(v.to_string()));
        }
        out.insert(v.to_string(), reg);
    }
    Ok(out)
}

pub fn build_r2(layout: &FrameLayout) -> R2 {
    let regs = layout
        .slots
        .iter()
        .enumerate()
        .filter_map(|(i, h)| match h {
            SlotHolder::Reg(r) => Some((*r, i)),
            SlotHolder::Ra => None,
        })
        .collect();
    R2 {
        profile: layout.profile.clone(),
        regs,
        ra_slot: layout.ra_slot,
        retval_slot: layout.retval_slot,
        frame_words: layout.frame_words(),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MapRow {
    pub slot: usize,
    pub reg: Reg,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MappingTable {
    pub profile: String,
    pub update_addr: u32,
    pub frame_words: usize,
    pub ra_slot: usize,
    pub retval_slot: usize,
    pub rows: BTreeMap<String, MapRow>,
    /// Member offsets, `(var, member) → bytes`.
    pub fields: BTreeMap<(String, String), u32>,
    /// Every saved register's slot, for raw register access.
    pub reg_slots: BTreeMap<Reg, usize>,
}

impl MappingTable {
    pub fn slot(&self, var: &str) -> Option<usize> {
        self.rows.get(var).map(|r| r.slot)
    }

    pub fn field(&self, var: &str, member: &str) -> Option<u32> {
        self.fields
            .get(&(var.to_string(), member.to_string()))
            .copied()
    }

    pub fn reg_slot(&self, r: Reg) -> Option<usize> {
        self.reg_slots.get(&r).copied()
    }

    pub fn parse(text: &str) -> Result<Self, MapError> {
        let mut t: Option<MappingTable> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let err = |msg: &str| MapError::Parse {
                line,
                msg: msg.to_string(),
            };
            let w: Vec<&str> = raw.split_whitespace().collect();
            if w.is_empty() || w[0].starts_with('#') {
                continue;
            }
            let num = |s: &str| -> Result<u32, MapError> {
                let r = match s.strip_prefix("0x") {
                    Some(h) => u32::from_str_radix(h, 16),
                    None => s.parse(),
                };
                r.map_err(|_| err(&format!("bad number `{s}`")))
            };
            let reg = |s: &str| s.parse::<Reg>().map_err(|e| err(&e));
            match (w[0], t.as_mut()) {
                ("MAP", None) if w.len() == 6 => {
                    t = Some(MappingTable {
                        profile: w[1].to_string(),
                        update_addr: num(w[2])?,
                        frame_words: num(w[3])? as usize,
                        ra_slot: num(w[4])? as usize,
                        retval_slot: num(w[5])? as usize,
                        rows: BTreeMap::new(),
                        fields: BTreeMap::new(),
                        reg_slots: BTreeMap::new(),
                    })
                }
                ("ROW", Some(t)) if w.len() == 4 => {
                    t.rows.insert(
                        w[1].to_string(),
                        MapRow {
                            slot: num(w[2])? as usize,
                            reg: reg(w[3])?,
                        },
                    );
                }
                ("FIELD", Some(t)) if w.len() == 3 => {
                    let (v, m) = w[1].split_once('.').ok_or_else(|| err("FIELD var.member"))?;
                    t.fields.insert((v.to_string(), m.to_string()), num(w[2])?);
                }
                ("REG", Some(t)) if w.len() == 3 => {
                    t.reg_slots.insert(reg(w[1])?, num(w[2])? as usize);
                }
                _ => return Err(err(&format!("unexpected record `{raw}`"))),
            }
        }
        t.ok_or(MapError::Parse {
            line: 0,
            msg: "missing MAP header".into(),
        })
    }
}

impl fmt::Display for MappingTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "MAP {} {:#x} {} {} {}",
            self.profile, self.update_addr, self.frame_words, self.ra_slot, self.retval_slot
        )?;
        for (v, r) in &self.rows {
            writeln!(f, "ROW {v} {} {:?}", r.slot, r.reg)?;
        }
        for ((v, m), off) in &self.fields {
            writeln!(f, "FIELD {v}.{m} {off:#x}")?;
        }
        for (r, s) in &self.reg_slots {
            writeln!(f, "REG {r:?} {s}")?;
        }
        Ok(())
    }
}

/// R = R1 × R2, with member offsets for the mapped variables.
pub fn compose(r1: &R1, r2: &R2, addr: u32, sidecar: &DebugSidecar) -> Result<MappingTable, MapError> {
    let mut rows = BTreeMap::new();
    for (v, &reg) in r1 {
        let slot = *r2.regs.get(&reg).ok_or(MapError::UnmappedRegister(reg))?;
        rows.insert(v.clone(), MapRow { slot, reg });
    }
    let fields = sidecar
        .fields
        .iter()
        .filter(|f| r1.contains_key(&f.var))
        .map(|f| ((f.var.clone(), f.member.clone()), f.offset))
        .collect();
    Ok(MappingTable {
        profile: r2.profile.clone(),
        update_addr: addr,
        frame_words: r2.frame_words,
        ra_slot: r2.ra_slot,
        retval_slot: r2.retval_slot,
        rows,
        fields,
        reg_slots: r2.regs.clone(),
    })
}

/// The full chain for one update point.
pub fn mapping_for(
    sidecar: &DebugSidecar,
    image: &FirmwareImage,
    layout: &FrameLayout,
    addr: u32,
    patch_vars: &[&str],
) -> Result<MappingTable, MapError> {
    let r1 = build_r1(sidecar, image, addr, patch_vars)?;
    compose(&r1, &build_r2(layout), addr, sidecar)
}
