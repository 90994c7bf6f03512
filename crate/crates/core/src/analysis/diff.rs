//! Exact instruction-level diff of two builds, function by function.

use std::fmt;

use thiserror::Error;

use crate::analysis::sidecar::{DebugSidecar, FuncInfo};
use crate::image::FirmwareImage;
use crate::isa::{Instruction, IsaError};
use crate::parallel;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DiffError {
    #[error("decode failed in `{func}`: {source}")]
    DecodeFault { func: String, source: IsaError },
    #[error("function `{func}` starts at {old:#010x} in the old build but {new:#010x} in the new one")]
    EntryMismatch { func: String, old: u32, new: u32 },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FuncDiff {
    pub function: String,
    pub first_divergence_addr: u32,
    /// Byte length of the replaced region in the old build.
    pub old_len: u32,
    pub new_len: u32,
    pub old_region: (u32, u32),
    pub new_region: (u32, u32),
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DiffReport {
    pub functions: Vec<FuncDiff>,
}

impl DiffReport {
    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }

    pub fn function(&self, name: &str) -> Option<&FuncDiff> {
        self.functions.iter().find(|f| f.function == name)
    }

    /// The same report with old and new exchanged.
    pub fn swapped(&self) -> DiffReport {
        DiffReport {
            functions: self
                .functions
                .iter()
                .map(|f| FuncDiff {
                    function: f.function.clone(),
                    first_divergence_addr: f.first_divergence_addr,
                    old_len: f.new_len,
                    new_len: f.old_len,
                    old_region: f.new_region,
                    new_region: f.old_region,
                })
                .collect(),
        }
    }
}

impl fmt::Display for DiffReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for d in &self.functions {
            writeln!(
                f,
                "DIFF {} {:#x} old_len {} new_len {} old [{:#x},{:#x}) new [{:#x},{:#x})",
                d.function,
                d.first_divergence_addr,
                d.old_len,
                d.new_len,
                d.old_region.0,
                d.old_region.1,
                d.new_region.0,
                d.new_region.1
            )?;
        }
        Ok(())
    }
}

type Stream = Vec<(u32, Instruction)>;

fn decode(image: &FirmwareImage, f: &FuncInfo) -> Result<Stream, DiffError> {
    image
        .decode_range(f.entry, f.end())
        .map_err(|source| DiffError::DecodeFault {
            func: f.name.clone(),
            source,
        })
}

fn diff_streams(name: &str, old: &Stream, new: &Stream, old_end: u32, new_end: u32) -> Option<FuncDiff> {
    let prefix = old
        .iter()
        .zip(new.iter())
        .take_while(|(a, b)| a.1 == b.1)
        .count();
    if prefix == old.len() && prefix == new.len() {
        return None;
    }
    let room = old.len().min(new.len()) - prefix;
    let suffix = old
        .iter()
        .rev()
        .zip(new.iter().rev())
        .take(room)
        .take_while(|(a, b)| a.1 == b.1)
        .count();
    let at = |s: &Stream, i: usize, end: u32| s.get(i).map(|x| x.0).unwrap_or(end);
    let old_region = (at(old, prefix, old_end), at(old, old.len() - suffix, old_end));
    let new_region = (at(new, prefix, new_end), at(new, new.len() - suffix, new_end));
    Some(FuncDiff {
        function: name.to_string(),
        first_divergence_addr: old_region.0,
        old_len: old_region.1 - old_region.0,
        new_len: new_region.1 - new_region.0,
        old_region,
        new_region,
    })
}

/// Diffs every function present in both builds. Functions are matched by
/// name and must start at the same address.
pub fn bindiff(
    old: &FirmwareImage,
    new: &FirmwareImage,
    old_sc: &DebugSidecar,
    new_sc: &DebugSidecar,
) -> Result<DiffReport, DiffError> {
    let pairs: Vec<(&FuncInfo, &FuncInfo)> = old_sc
        .functions
        .iter()
        .filter_map(|f| new_sc.function(&f.name).map(|g| (f, g)))
        .collect();
    let results = parallel::par_map(&pairs, |(f, g)| -> Result<Option<FuncDiff>, DiffError> {
        if f.entry != g.entry {
            return Err(DiffError::EntryMismatch {
                func: f.name.clone(),
                old: f.entry,
                new: g.entry,
            });
        }
        let a = decode(old, f)?;
        let b = decode(new, g)?;
        Ok(diff_streams(&f.name, &a, &b, f.end(), g.end()))
    });
    let mut functions = Vec::new();
    for r in results {
        if let Some(d) = r? {
            functions.push(d);
        }
    }
    functions.sort_by_key(|d| d.first_divergence_addr);
    Ok(DiffReport { functions })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm;

    fn build(body: &str, data: &str) -> (FirmwareImage, DebugSidecar) {
        let src = format!(
            "
            .section .text code 0x20000000
            .func f
                addi sp, sp, -4
            .endprologue
            {body}
            .epilogue
                addi sp, sp, 4
                jalr r0, r1, 0
            .endfunc
            .section .data data 0x20004000
                .word {data}
            "
        );
        let a = asm::assemble(&src, &[]).unwrap();
        (a.to_image(), a.sidecar)
    }

    #[test]
    fn identical_is_empty() {
        let (a, s) = build("add r3, r4, r5", "1");
        assert!(bindiff(&a, &a, &s, &s).unwrap().is_empty());
    }

    #[test]
    fn data_only_change_is_empty() {
        let (a, s) = build("add r3, r4, r5", "1");
        let (b, t) = build("add r3, r4, r5", "2");
        assert!(bindiff(&a, &b, &s, &t).unwrap().is_empty());
    }

    #[test]
    fn inserted_check_and_symmetry() {
        let (a, s) = build("add r3, r4, r5\nsw r3, 0(r4)\nc.mv r6, r3", "0");
        let (b, t) = build(
            "add r3, r4, r5\nbltu r3, r4, out\nsw r3, 0(r4)\nout:\nc.mv r6, r3",
            "0",
        );
        let d = bindiff(&a, &b, &s, &t).unwrap();
        let f = d.function("f").unwrap();
        assert_eq!(f.first_divergence_addr, 0x2000_0008);
        assert_eq!(f.old_len, 0);
        assert_eq!(f.new_len, 4);
        let r = bindiff(&b, &a, &t, &s).unwrap();
        assert_eq!(r, d.swapped());
    }

    #[test]
    fn moved_entry_is_rejected() {
        let (a, s) = build("add r3, r4, r5", "0");
        let (b, mut t) = build("add r3, r4, r5", "0");
        t.functions[0].entry += 2;
        assert!(matches!(
            bindiff(&a, &b, &s, &t),
            Err(DiffError::EntryMismatch { .. })
        ));
    }
}
