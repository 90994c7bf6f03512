use crate::layout::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RegionKind {
    Flash,
    Sram,
    Mmio,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Region {
    pub name: &'static str,
    pub base: u32,
    pub size: u32,
    pub kind: RegionKind,
}

impl Region {
    pub fn contains(&self, addr: u32, len: u32) -> bool {
        addr >= self.base && (addr as u64 + len as u64) <= (self.base as u64 + self.size as u64)
    }
}

/// Backing store for FLASH and SRAM. MMIO is handled by the machine.
#[derive(Clone, Debug)]
pub struct MemoryMap {
    pub regions: Vec<Region>,
    pub flash: Vec<u8>,
    pub sram: Vec<u8>,
}

impl Default for MemoryMap {
    fn default() -> Self {
        MemoryMap {
            regions: vec![
                Region {
                    name: "flash",
                    base: FLASH_BASE,
                    size: FLASH_SIZE,
                    kind: RegionKind::Flash,
                },
                Region {
                    name: "sram",
                    base: SRAM_BASE,
                    size: SRAM_SIZE,
                    kind: RegionKind::Sram,
                },
                Region {
                    name: "mmio",
                    base: MMIO_BASE,
                    size: MMIO_SIZE,
                    kind: RegionKind::Mmio,
                },
            ],
            flash: vec![0xFF; FLASH_SIZE as usize],
            sram: vec![0; SRAM_SIZE as usize],
        }
    }
}

impl MemoryMap {
    pub fn region_of(&self, addr: u32, len: u32) -> Option<&Region> {
        self.regions.iter().find(|r| r.contains(addr, len))
    }

    /// Backing slice for a FLASH or SRAM range.
    pub fn slice(&self, addr: u32, len: u32) -> Option<&[u8]> {
        let r = self.region_of(addr, len)?;
        let off = (addr - r.base) as usize;
        match r.kind {
            RegionKind::Flash => Some(&self.flash[off..off + len as usize]),
            RegionKind::Sram => Some(&self.sram[off..off + len as usize]),
            RegionKind::Mmio => None,
        }
    }

    pub fn slice_mut(&mut self, addr: u32, len: u32) -> Option<&mut [u8]> {
        let (base, kind) = {
            let r = self.region_of(addr, len)?;
            (r.base, r.kind)
        };
        let off = (addr - base) as usize;
        match kind {
            RegionKind::Flash => Some(&mut self.flash[off..off + len as usize]),
            RegionKind::Sram => Some(&mut self.sram[off..off + len as usize]),
            RegionKind::Mmio => None,
        }
    }

    /// Programs FLASH or SRAM directly (image loading only).
    pub fn program(&mut self, addr: u32, bytes: &[u8]) -> bool {
        match self.slice_mut(addr, bytes.len() as u32) {
            Some(s) => {
                s.copy_from_slice(bytes);
                true
            }
            None => false,
        }
    }
}
