//! Fixed address map shared by the simulator, the runtime linker and the
//! host tooling.

pub const FLASH_BASE: u32 = 0x0800_0000;
pub const FLASH_SIZE: u32 = 256 * 1024;
pub const SRAM_BASE: u32 = 0x2000_0000;
pub const SRAM_SIZE: u32 = 64 * 1024;
pub const MMIO_BASE: u32 = 0x4000_0000;
pub const MMIO_SIZE: u32 = 4 * 1024;

/// Vector table at the start of FLASH: `word[cause]` is the handler entry.
pub const VECTOR_TABLE: u32 = FLASH_BASE;
/// Handler, dispatcher and hook-entry code.
pub const RUNTIME_BASE: u32 = FLASH_BASE + 0x100;
pub const FLASH_TEXT_BASE: u32 = FLASH_BASE + 0x1000;

pub const SRAM_TEXT_BASE: u32 = SRAM_BASE;
pub const DATA_BASE: u32 = SRAM_BASE + 0x4000;
pub const PATCH_BASE: u32 = SRAM_BASE + 0x8000;
pub const PATCH_SIZE: u32 = 0x4000;
/// Device patch table: count word followed by `TABLE_CAPACITY` records.
pub const TABLE_BASE: u32 = SRAM_BASE + 0xC000;
pub const TABLE_CAPACITY: usize = 64;
pub const TABLE_RECORD_BYTES: u32 = 16;
pub const HOOK_SLOT_BASE: u32 = SRAM_BASE + 0xC800;
pub const HOOK_SLOT_COUNT: u32 = 64;
/// Process stack top used by dual-stack probes.
pub const PSP_TOP: u32 = SRAM_BASE + 0xE000;
pub const MSP_TOP: u32 = SRAM_BASE + SRAM_SIZE;

/// MMIO register offsets.
pub mod mmio {
    pub const OUT: u32 = 0x00;
    pub const IN: u32 = 0x04;
    pub const WDT_RELOAD: u32 = 0x08;
    pub const CYCLE_LO: u32 = 0x0C;
    pub const CYCLE_HI: u32 = 0x10;
    pub const BP0: u32 = 0x20;
    pub const BP_ENABLE: u32 = 0x30;
    // control block
    pub const MEPC: u32 = 0x40;
    pub const MCAUSE: u32 = 0x44;
    pub const PS: u32 = 0x48;
    pub const SAVED_PS: u32 = 0x4C;
    pub const MSP: u32 = 0x50;
    pub const PSP: u32 = 0x54;
    pub const TRAP_ENTER: u32 = 0x58;

    /// Offsets whose writes change control state; patches may not target them.
    pub fn is_control(off: u32) -> bool {
        off >= WDT_RELOAD && off != super::mmio::IN
    }
}

/// Processor status word bits.
pub mod ps {
    pub const MODE: u32 = 1 << 0;
    pub const SPSEL: u32 = 1 << 1;
    pub const DEPTH_SHIFT: u32 = 2;
    pub const DEPTH_MASK: u32 = 0b11 << DEPTH_SHIFT;
    pub const PRIO_SHIFT: u32 = 4;
    pub const PRIO_MASK: u32 = 0xF << PRIO_SHIFT;
}

pub fn in_flash(addr: u32) -> bool {
    (FLASH_BASE..FLASH_BASE + FLASH_SIZE).contains(&addr)
}

pub fn in_sram(addr: u32) -> bool {
    (SRAM_BASE..SRAM_BASE + SRAM_SIZE).contains(&addr)
}

pub fn in_patch_region(addr: u32) -> bool {
    (PATCH_BASE..PATCH_BASE + PATCH_SIZE).contains(&addr)
}

pub fn in_mmio(addr: u32) -> bool {
    (MMIO_BASE..MMIO_BASE + MMIO_SIZE).contains(&addr)
}
