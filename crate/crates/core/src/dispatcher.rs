//! Patch table: the host mirror of the device-resident lookup structure.
//!
//! Device format at `TABLE_BASE`: a count word, then up to 64 records of
//! `{update_addr, patch_addr, size, flags}` sorted by `update_addr`.
//! Flags bits 0-1 hold the trigger, bits 2-3 the return strategy.

use thiserror::Error;

use crate::layout::{self, TABLE_BASE, TABLE_CAPACITY, TABLE_RECORD_BYTES};
use crate::machine::Machine;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TriggerKind {
    HwBp = 1,
    SwBp = 2,
    Hook = 3,
}

impl TriggerKind {
    pub const ALL: [TriggerKind; 3] = [TriggerKind::HwBp, TriggerKind::SwBp, TriggerKind::Hook];

    pub fn from_bits(v: u32) -> Option<Self> {
        match v & 3 {
            1 => Some(TriggerKind::HwBp),
            2 => Some(TriggerKind::SwBp),
            3 => Some(TriggerKind::Hook),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TriggerKind::HwBp => "hw",
            TriggerKind::SwBp => "sw",
            TriggerKind::Hook => "hook",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "hw" | "hwbp" => Some(TriggerKind::HwBp),
            "sw" | "swbp" => Some(TriggerKind::SwBp),
            "hook" => Some(TriggerKind::Hook),
            _ => None,
        }
    }
}

/// How the patch leaves: where execution resumes relative to the update point.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Strategy {
    Pass,
    /// Skip the vulnerable region of the given byte length.
    RedirectSkip(u32),
    /// Jump to the function's return sequence at this address.
    RedirectCaller(u32),
}

impl Strategy {
    pub fn code(self) -> u32 {
        match self {
            Strategy::Pass => 0,
            Strategy::RedirectSkip(_) => 1,
            Strategy::RedirectCaller(_) => 2,
        }
    }

    pub fn arg(self) -> u32 {
        match self {
            Strategy::Pass => 0,
            Strategy::RedirectSkip(n) | Strategy::RedirectCaller(n) => n,
        }
    }

    pub fn from_parts(code: u32, arg: u32) -> Option<Self> {
        match code {
            0 => Some(Strategy::Pass),
            1 => Some(Strategy::RedirectSkip(arg)),
            2 => Some(Strategy::RedirectCaller(arg)),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PatchEntry {
    pub update_addr: u32,
    pub patch_addr: u32,
    pub size: u32,
    pub trigger: TriggerKind,
    pub strategy: Strategy,
}

impl PatchEntry {
    pub fn flags(&self) -> u32 {
        (self.trigger as u32) | (self.strategy.code() << 2)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TableError {
    #[error("patch table full ({0} entries)")]
    TableFull(usize),
    #[error("update address {0:#010x} already has a patch")]
    DuplicateUpdateAddr(u32),
    #[error("entry for {0:#010x} lies outside the patch region or is empty")]
    BadEntry(u32),
    #[error("device table corrupt")]
    Corrupt,
}

/// Result of a lookup together with the number of key comparisons spent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Lookup<'a> {
    pub entry: Option<&'a PatchEntry>,
    pub comparisons: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PatchTable {
    entries: Vec<PatchEntry>,
}

impl PatchTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[PatchEntry] {
        &self.entries
    }

    pub fn install(&mut self, e: PatchEntry) -> Result<(), TableError> {
        if self.entries.len() >= TABLE_CAPACITY {
            return Err(TableError::TableFull(TABLE_CAPACITY));
        }
        let end = e.patch_addr as u64 + e.size as u64;
        if e.size == 0
            || !layout::in_patch_region(e.patch_addr)
            || end > (layout::PATCH_BASE + layout::PATCH_SIZE) as u64
        {
            return Err(TableError::BadEntry(e.update_addr));
        }
        match self
            .entries
            .binary_search_by_key(&e.update_addr, |x| x.update_addr)
        {
            Ok(_) => Err(TableError::DuplicateUpdateAddr(e.update_addr)),
            Err(pos) => {
                self.entries.insert(pos, e);
                Ok(())
            }
        }
    }

    pub fn remove(&mut self, update_addr: u32) -> Option<PatchEntry> {
        let pos = self
            .entries
            .binary_search_by_key(&update_addr, |x| x.update_addr)
            .ok()?;
        Some(self.entries.remove(pos))
    }

    /// Exact-match binary search, same probe order as the device routine.
    pub fn lookup(&self, addr: u32) -> Lookup<'_> {
        let (mut lo, mut hi) = (0usize, self.entries.len());
        let mut comparisons = 0;
        while lo < hi {
            let mid = (lo + hi) / 2;
            comparisons += 1;
            let k = self.entries[mid].update_addr;
            if k == addr {
                return Lookup {
                    entry: Some(&self.entries[mid]),
                    comparisons,
                };
            } else if k < addr {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        Lookup {
            entry: None,
            comparisons,
        }
    }

    /// Device image: count word plus the populated records.
    pub fn to_device_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + self.entries.len() * TABLE_RECORD_BYTES as usize);
        out.extend((self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            for w in [e.update_addr, e.patch_addr, e.size, e.flags()] {
                out.extend(w.to_le_bytes());
            }
        }
        out
    }

    /// Reads the table back from device memory. Strategy arguments are not
    /// stored on the device and come back as zero.
    pub fn read_device(m: &Machine) -> Result<Self, TableError> {
        let count = m.peek_u32(TABLE_BASE).ok_or(TableError::Corrupt)? as usize;
        if count > TABLE_CAPACITY {
            return Err(TableError::Corrupt);
        }
        let mut entries = Vec::with_capacity(count);
        for i in 0..count {
            let rec = TABLE_BASE + 4 + i as u32 * TABLE_RECORD_BYTES;
            let w = |k: u32| m.peek_u32(rec + 4 * k).ok_or(TableError::Corrupt);
            let flags = w(3)?;
            entries.push(PatchEntry {
                update_addr: w(0)?,
                patch_addr: w(1)?,
                size: w(2)?,
                trigger: TriggerKind::from_bits(flags).ok_or(TableError::Corrupt)?,
                strategy: Strategy::from_parts((flags >> 2) & 3, 0).ok_or(TableError::Corrupt)?,
            });
        }
        Ok(PatchTable { entries })
    }

    pub fn write_device(&self, m: &mut Machine) -> Result<(), TableError> {
        m.write_bytes(TABLE_BASE, &self.to_device_bytes())
            .map_err(|_| TableError::Corrupt)
    }
}

/// Upper bound on comparisons for a table of `n` entries.
pub fn comparison_bound(n: usize) -> u32 {
    if n <= 1 {
        1
    } else {
        (usize::BITS - (n - 1).leading_zeros()) + 1
    }
}
