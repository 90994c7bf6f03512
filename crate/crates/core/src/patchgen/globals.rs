//! Repairs that change global variables, and the `.patch` bump allocator.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::analysis::sidecar::DebugSidecar;
use crate::layout;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GlobalError {
    #[error("patch region exhausted: need {need} bytes, {free} free")]
    PatchRegionFull { need: u32, free: u32 },
    #[error("unknown global `{0}`")]
    UnknownVariable(String),
    #[error("global `{0}` already exists")]
    AlreadyExists(String),
    #[error("global `{name}`: {msg}")]
    SizeMismatch { name: String, msg: String },
    #[error("global `{0}` is not in writable RAM")]
    ReadOnly(String),
    #[error("removing `{0}` needs at least one referencing site to patch")]
    NoCompanionSites(String),
}

/// Bump allocator over `.patch`; nothing is ever freed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchAllocator {
    next: u32,
    end: u32,
}

impl PatchAllocator {
    pub fn new(base: u32, end: u32) -> Self {
        PatchAllocator { next: base, end }
    }

    /// The whole region.
    pub fn region() -> Self {
        Self::new(layout::PATCH_BASE, layout::PATCH_BASE + layout::PATCH_SIZE)
    }

    /// Whatever a device reports free at the top of the region.
    pub fn with_free(free: u32) -> Self {
        let end = layout::PATCH_BASE + layout::PATCH_SIZE;
        Self::new(end - free.min(layout::PATCH_SIZE), end)
    }

    pub fn free(&self) -> u32 {
        self.end - self.next
    }

    pub fn next(&self) -> u32 {
        self.next
    }

    /// Word-aligned allocation.
    pub fn alloc(&mut self, len: u32) -> Result<u32, GlobalError> {
        let start = (self.next + 3) & !3;
        let need = len.max(1);
        if start as u64 + need as u64 > self.end as u64 {
            return Err(GlobalError::PatchRegionFull {
                need,
                free: self.end.saturating_sub(start),
            });
        }
        self.next = start + need;
        Ok(start)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GlobalChangeKind {
    ValueChange,
    Removal,
    Addition,
    SizeIncrease,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MemRegion {
    Data,
    Patch,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MemWrite {
    pub region: MemRegion,
    pub addr: u32,
    pub bytes: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GlobalEditPlan {
    pub kind: GlobalChangeKind,
    pub name: String,
    pub writes: Vec<MemWrite>,
    /// Update points whose patches must absorb the reference change.
    pub companion_sites: Vec<u32>,
    /// Where the variable lives after the change, when it moved or is new.
    pub new_addr: Option<u32>,
}

fn check_data(name: &str, addr: u32, size: u32) -> Result<(), GlobalError> {
    let end = addr as u64 + size as u64;
    if layout::in_sram(addr) && !layout::in_patch_region(addr) && end <= (layout::SRAM_BASE + layout::SRAM_SIZE) as u64 {
        Ok(())
    } else {
        Err(GlobalError::ReadOnly(name.to_string()))
    }
}

/// Plans one global change. `new_value` is the variable's new contents.
pub fn plan_global_change(
    kind: GlobalChangeKind,
    name: &str,
    new_value: &[u8],
    sidecar: &DebugSidecar,
    alloc: &mut PatchAllocator,
) -> Result<GlobalEditPlan, GlobalError> {
    let existing = sidecar.global(name);
    let sites = || -> Vec<u32> {
        let mut s: Vec<u32> = sidecar.grefs_of(name).map(|g| g.site).collect();
        s.sort_unstable();
        s
    };
    let plan = |writes, companion_sites, new_addr| GlobalEditPlan {
        kind,
        name: name.to_string(),
        writes,
        companion_sites,
        new_addr,
    };
    match kind {
        GlobalChangeKind::Addition => {
            if existing.is_some() {
                return Err(GlobalError::AlreadyExists(name.to_string()));
            }
            let at = alloc.alloc(new_value.len() as u32)?;
            Ok(plan(
                vec![MemWrite {
                    region: MemRegion::Patch,
                    addr: at,
                    bytes: new_value.to_vec(),
                }],
                Vec::new(),
                Some(at),
            ))
        }
        _ => {
            let g = existing.ok_or_else(|| GlobalError::UnknownVariable(name.to_string()))?;
            check_data(name, g.addr, g.size)?;
            let zero = MemWrite {
                region: MemRegion::Data,
                addr: g.addr,
                bytes: vec![0; g.size as usize],
            };
            match kind {
                GlobalChangeKind::ValueChange => {
                    if new_value.len() as u32 != g.size {
                        return Err(GlobalError::SizeMismatch {
                            name: name.to_string(),
                            msg: format!("value has {} bytes, variable {}", new_value.len(), g.size),
                        });
                    }
                    Ok(plan(
                        vec![MemWrite {
                            region: MemRegion::Data,
                            addr: g.addr,
                            bytes: new_value.to_vec(),
                        }],
                        Vec::new(),
                        None,
                    ))
                }
                GlobalChangeKind::Removal => {
                    let s = sites();
                    if s.is_empty() {
                        return Err(GlobalError::NoCompanionSites(name.to_string()));
                    }
                    Ok(plan(vec![zero], s, None))
                }
                GlobalChangeKind::SizeIncrease => {
                    if new_value.len() as u32 <= g.size {
                        return Err(GlobalError::SizeMismatch {
                            name: name.to_string(),
                            msg: format!("new size {} does not exceed {}", new_value.len(), g.size),
                        });
                    }
                    let at = alloc.alloc(new_value.len() as u32)?;
                    Ok(plan(
                        vec![
                            MemWrite {
                                region: MemRegion::Patch,
                                addr: at,
                                bytes: new_value.to_vec(),
                            },
                            zero,
                        ],
                        sites(),
                        Some(at),
                    ))
                }
                GlobalChangeKind::Addition => unreachable!(),
            }
        }
    }
}

/// Global addresses as patches should see them once `plans` are applied.
pub fn resolved_globals(sidecar: &DebugSidecar, plans: &[GlobalEditPlan]) -> BTreeMap<String, u32> {
    let mut m: BTreeMap<String, u32> = sidecar
        .globals
        .iter()
        .map(|g| (g.name.clone(), g.addr))
        .collect();
    for p in plans {
        if let Some(a) = p.new_addr {
            m.insert(p.name.clone(), a);
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::sidecar::{GlobalInfo, GlobalRef};
    use crate::isa::Reg;

    fn sc() -> DebugSidecar {
        DebugSidecar {
            globals: vec![GlobalInfo {
                name: "cfg".into(),
                addr: layout::DATA_BASE,
                size: 4,
            }],
            grefs: vec![GlobalRef {
                name: "cfg".into(),
                site: 0x2000_0040,
                reg: Reg::r(5),
            }],
            ..Default::default()
        }
    }

    #[test]
    fn value_change_is_one_data_write() {
        let mut a = PatchAllocator::region();
        let p = plan_global_change(GlobalChangeKind::ValueChange, "cfg", &[1, 0, 0, 0], &sc(), &mut a).unwrap();
        assert_eq!(p.writes.len(), 1);
        assert_eq!(p.writes[0].region, MemRegion::Data);
        assert_eq!(a, PatchAllocator::region());
    }

    #[test]
    fn size_increase_moves_and_zeroes() {
        let mut a = PatchAllocator::region();
        let p = plan_global_change(GlobalChangeKind::SizeIncrease, "cfg", &[7; 12], &sc(), &mut a).unwrap();
        assert_eq!(p.new_addr, Some(layout::PATCH_BASE));
        assert_eq!(p.companion_sites, vec![0x2000_0040]);
        let data: Vec<_> = p.writes.iter().filter(|w| w.region == MemRegion::Data).collect();
        assert_eq!(data.len(), 1);
        assert_eq!(data[0].bytes.len(), 4);
        assert_eq!(resolved_globals(&sc(), &[p])["cfg"], layout::PATCH_BASE);
    }

    #[test]
    fn addition_exhausts_region() {
        let mut a = PatchAllocator::new(layout::PATCH_BASE, layout::PATCH_BASE + 8);
        plan_global_change(GlobalChangeKind::Addition, "n", &[0; 8], &sc(), &mut a).unwrap();
        assert!(matches!(
            plan_global_change(GlobalChangeKind::Addition, "m", &[0; 4], &sc(), &mut a),
            Err(GlobalError::PatchRegionFull { .. })
        ));
    }

    #[test]
    fn removal_needs_sites() {
        let mut a = PatchAllocator::region();
        let p = plan_global_change(GlobalChangeKind::Removal, "cfg", &[], &sc(), &mut a).unwrap();
        assert_eq!(p.companion_sites.len(), 1);
        let mut bare = sc();
        bare.grefs.clear();
        assert_eq!(
            plan_global_change(GlobalChangeKind::Removal, "cfg", &[], &bare, &mut a),
            Err(GlobalError::NoCompanionSites("cfg".into()))
        );
    }
}
