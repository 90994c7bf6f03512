//! Exception-handler code generation and the frame layout it produces.
//!
//! The handler builds the frame `f(gr, ra)` on the stack, hands its base to
//! the dispatcher in r10, and on return restores everything and resumes at
//! the (possibly rewritten) return address. Hook entries jump into the same
//! body, so the layout does not depend on the trigger kind.

use std::fmt::Write as _;

use thiserror::Error;

use crate::isa::{Instruction, Reg};
use crate::layout::{mmio, ps, MMIO_BASE};
use crate::machine::{ArchProfile, Machine, Stacking};

pub const WORD: u32 = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FrameError {
    #[error("profile `{0}` is not supported by the handler generator")]
    UnsupportedProfile(String),
    #[error("slot {slot} out of range (frame has {words} words)")]
    SlotOutOfRange { slot: usize, words: usize },
    #[error("frame access at {0:#010x} failed")]
    Access(u32),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SlotHolder {
    Ra,
    Reg(Reg),
}

/// Word-granular stack frame layout: `slots[i]` lives at `base + 4*i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameLayout {
    pub profile: String,
    pub slots: Vec<SlotHolder>,
    pub ra_slot: usize,
    pub retval_slot: usize,
}

impl FrameLayout {
    pub fn for_profile(p: &ArchProfile) -> Result<Self, FrameError> {
        check_supported(p)?;
        let mut slots = Vec::new();
        match p.stacking {
            Stacking::Software => {
                slots.push(SlotHolder::Ra);
                slots.extend((1..16).map(|i| SlotHolder::Reg(Reg::r(i))));
            }
            Stacking::Hardware => {
                slots.extend(
                    (1..16)
                        .map(Reg::r)
                        .filter(|r| !p.hw_stacked_set.contains(r))
                        .map(SlotHolder::Reg),
                );
                slots.push(SlotHolder::Ra);
                slots.extend(p.hw_stacked_set.iter().map(|&r| SlotHolder::Reg(r)));
            }
        }
        Ok(Self::from_slots(p.name, slots))
    }

    fn from_slots(profile: &str, slots: Vec<SlotHolder>) -> Self {
        let ra_slot = slots.iter().position(|s| *s == SlotHolder::Ra).unwrap_or(0);
        let retval_slot = slots
            .iter()
            .position(|s| *s == SlotHolder::Reg(Reg::RET))
            .unwrap_or(0);
        FrameLayout {
            profile: profile.to_string(),
            slots,
            ra_slot,
            retval_slot,
        }
    }

    pub fn frame_words(&self) -> usize {
        self.slots.len()
    }

    pub fn frame_bytes(&self) -> u32 {
        self.slots.len() as u32 * WORD
    }

    pub fn slot_of(&self, r: Reg) -> Option<usize> {
        self.slots.iter().position(|s| *s == SlotHolder::Reg(r))
    }

    pub fn offset_of(&self, slot: usize) -> i32 {
        (slot as u32 * WORD) as i32
    }

    pub fn ra_offset(&self) -> i32 {
        self.offset_of(self.ra_slot)
    }

    fn check(&self, slot: usize) -> Result<(), FrameError> {
        if slot >= self.slots.len() {
            Err(FrameError::SlotOutOfRange {
                slot,
                words: self.slots.len(),
            })
        } else {
            Ok(())
        }
    }

    pub fn read(&self, m: &mut Machine, base: u32, slot: usize) -> Result<u32, FrameError> {
        self.check(slot)?;
        let addr = base + slot as u32 * WORD;
        m.read(addr, crate::isa::Width::Word)
            .map_err(|_| FrameError::Access(addr))
    }

    pub fn write(&self, m: &mut Machine, base: u32, slot: usize, v: u32) -> Result<(), FrameError> {
        self.check(slot)?;
        let addr = base + slot as u32 * WORD;
        m.write(addr, crate::isa::Width::Word, v)
            .map_err(|_| FrameError::Access(addr))
    }

    /// `FRAME <profile> <slot>:<holder> ...`
    pub fn to_line(&self) -> String {
        let mut s = format!("FRAME {}", self.profile);
        for (i, h) in self.slots.iter().enumerate() {
            match h {
                SlotHolder::Ra => write!(s, " {i}:ra"),
                SlotHolder::Reg(r) => write!(s, " {i}:r{}", r.index()),
            }
            .expect("writing to a String");
        }
        s
    }

    /// Parses the fields after the `FRAME` keyword.
    pub fn parse_fields(fields: &[&str]) -> Result<Self, String> {
        let (profile, rest) = fields.split_first().ok_or("FRAME needs a profile")?;
        let mut slots = Vec::new();
        for (i, f) in rest.iter().enumerate() {
            let (idx, holder) = f.split_once(':').ok_or(format!("bad slot `{f}`"))?;
            if idx.parse::<usize>().ok() != Some(i) {
                return Err(format!("slot `{f}` out of order"));
            }
            slots.push(match holder {
                "ra" => SlotHolder::Ra,
                r => SlotHolder::Reg(r.parse()?),
            });
        }
        let n_ra = slots.iter().filter(|s| **s == SlotHolder::Ra).count();
        if n_ra != 1 {
            return Err("FRAME needs exactly one ra slot".into());
        }
        Ok(Self::from_slots(profile, slots))
    }
}

fn check_supported(p: &ArchProfile) -> Result<(), FrameError> {
    let bad = || Err(FrameError::UnsupportedProfile(p.name.to_string()));
    if p.hw_bp_count > 8 || p.instr_cost == 0 {
        return bad();
    }
    match p.stacking {
        Stacking::Software if p.dual_stack || !p.hw_stacked_set.is_empty() => bad(),
        // The hardware-stacked registers double as scratch before saving.
        Stacking::Hardware
            if p.hw_stacked_set.len() < 2
                || p.hw_stacked_set.iter().any(|r| r.index() <= 2)
                || !p.hw_stacked_set.contains(&Reg::RET) =>
        {
            bad()
        }
        _ => Ok(()),
    }
}

/// Labels emitted by the handler source; all resolve to runtime addresses.
pub mod label {
    pub const HANDLER: &str = "__handler";
    /// Common body shared by trap vectors and hook entries.
    pub const BODY: &str = "__h_body";
    pub const CALL_SITE: &str = "__h_call";
    pub const RETURN_SITE: &str = "__h_ret";
    pub const ERET_SITE: &str = "__h_eret";
    pub const HOOK_ENTRY: &str = "__hook_entry";
    pub const DISPATCHER: &str = "__dispatch";
}

const PS_PATCH_LEVEL: u32 = (2 << ps::DEPTH_SHIFT) | ps::MODE;

/// Emits handler and hook-entry assembly for `p`. The dispatcher label is
/// referenced but defined elsewhere.
pub fn generate_handler(p: &ArchProfile) -> Result<(String, FrameLayout), FrameError> {
    let layout = FrameLayout::for_profile(p)?;
    let fb = layout.frame_bytes() as i32;
    let mut s = String::new();
    let mut e = |line: String| {
        s.push_str("    ");
        s.push_str(&line);
        s.push('\n');
    };
    let hi = MMIO_BASE >> 12;
    match p.stacking {
        Stacking::Software => {
            e(format!("{}:", label::HANDLER));
            e(format!("{}:", label::BODY));
            e(format!("addi sp, sp, {}", -fb));
            e("sw r3, -4(sp)".into());
            e(format!("lui r3, {hi:#x}"));
            e(format!("lw r3, {}(r3)", mmio::MEPC));
            e(format!("sw r3, {}(sp)", layout.ra_offset()));
            e("lw r3, -4(sp)".into());
            for (i, h) in layout.slots.iter().enumerate() {
                let SlotHolder::Reg(r) = h else { continue };
                let off = layout.offset_of(i);
                if *r == Reg::SP {
                    e(format!("addi r1, sp, {fb}"));
                    e(format!("sw r1, {off}(sp)"));
                } else {
                    e(format!("sw r{}, {off}(sp)", r.index()));
                }
            }
            update_ps(&mut e, false);
            e("addi r10, sp, 0".into());
            e(format!("{}:", label::CALL_SITE));
            e(format!("jal r1, {}", label::DISPATCHER));
            e(format!("{}:", label::RETURN_SITE));
            e(format!("lui r3, {hi:#x}"));
            e(format!("lw r4, {}(r3)", mmio::PS));
            e(format!("addi r4, r4, {}", -(1i32 << ps::DEPTH_SHIFT)));
            e(format!("sw r4, {}(r3)", mmio::PS));
            e(format!("lw r4, {}(sp)", layout.ra_offset()));
            e(format!("sw r4, {}(r3)", mmio::MEPC));
            for (i, h) in layout.slots.iter().enumerate() {
                let SlotHolder::Reg(r) = h else { continue };
                if *r != Reg::SP {
                    e(format!("lw r{}, {}(sp)", r.index(), layout.offset_of(i)));
                }
            }
            e(format!("addi sp, sp, {fb}"));
            e(format!("{}:", label::ERET_SITE));
            e("eret".into());

            e(format!("{}:", label::HOOK_ENTRY));
            e(format!("lui r9, {hi:#x}"));
            e(format!("sw r1, {}(r9)", mmio::TRAP_ENTER));
            e(format!("j {}", label::BODY));
        }
        Stacking::Hardware => {
            let hw_bytes = p.hw_frame_words() as i32 * 4;
            let sw_bytes = fb - hw_bytes;
            let (s0, s1) = (p.hw_stacked_set[0].index(), p.hw_stacked_set[1].index());
            e(format!("{}:", label::HANDLER));
            e(format!("{}:", label::BODY));
            if p.dual_stack {
                // build the frame on whichever stack the hardware pushed to
                e(format!("lui r{s0}, {hi:#x}"));
                e(format!("lw r{s1}, {}(r{s0})", mmio::SAVED_PS));
                e(format!("andi r{s1}, r{s1}, {}", ps::SPSEL));
                e("beqz r".to_string() + &format!("{s1}, __h_stack_ok"));
                e(format!("lw r{s1}, {}(r{s0})", mmio::PS));
                e(format!("ori r{s1}, r{s1}, {}", ps::SPSEL));
                e(format!("sw r{s1}, {}(r{s0})", mmio::PS));
                e("__h_stack_ok:".into());
            }
            e(format!("addi sp, sp, {}", -sw_bytes));
            for (i, h) in layout.slots.iter().enumerate() {
                let SlotHolder::Reg(r) = h else { continue };
                if p.hw_stacked_set.contains(r) {
                    continue;
                }
                let off = layout.offset_of(i);
                if *r == Reg::SP {
                    e(format!("addi r{s0}, sp, {fb}"));
                    e(format!("sw r{s0}, {off}(sp)"));
                } else {
                    e(format!("sw r{}, {off}(sp)", r.index()));
                }
            }
            update_ps(&mut e, p.dual_stack);
            e("addi r10, sp, 0".into());
            e(format!("{}:", label::CALL_SITE));
            e(format!("jal r1, {}", label::DISPATCHER));
            e(format!("{}:", label::RETURN_SITE));
            e(format!("lui r3, {hi:#x}"));
            e(format!("lw r4, {}(r3)", mmio::PS));
            e(format!("addi r4, r4, {}", -(1i32 << ps::DEPTH_SHIFT)));
            e(format!("sw r4, {}(r3)", mmio::PS));
            for (i, h) in layout.slots.iter().enumerate() {
                let SlotHolder::Reg(r) = h else { continue };
                if *r != Reg::SP && !p.hw_stacked_set.contains(r) {
                    e(format!("lw r{}, {}(sp)", r.index(), layout.offset_of(i)));
                }
            }
            e(format!("addi sp, sp, {sw_bytes}"));
            if p.dual_stack {
                // back onto the main stack; ERET reselects from the saved status
                e(format!("lui r{s0}, {hi:#x}"));
                e(format!("lw r{s1}, {}(r{s0})", mmio::PS));
                e(format!("andi r{s1}, r{s1}, {}", !(ps::SPSEL as i32)));
                e(format!("sw r{s1}, {}(r{s0})", mmio::PS));
            }
            e(format!("{}:", label::ERET_SITE));
            e("eret".into());

            // Hook entry: replicate the hardware push, then enter.
            e(format!("{}:", label::HOOK_ENTRY));
            e(format!("addi sp, sp, {}", -hw_bytes));
            e("sw r1, 0(sp)".into());
            for (i, r) in p.hw_stacked_set.iter().enumerate() {
                e(format!("sw r{}, {}(sp)", r.index(), 4 * (i + 1)));
            }
            e(format!("lui r{s0}, {hi:#x}"));
            e(format!("sw r1, {}(r{s0})", mmio::TRAP_ENTER));
            e(format!("j {}", label::BODY));
        }
    }
    Ok((s, layout))
}

/// UpdatePS: patch nesting level, inherited priority, active stack kept.
fn update_ps(e: &mut impl FnMut(String), keep_spsel: bool) {
    e(format!("lui r3, {:#x}", MMIO_BASE >> 12));
    e(format!("lw r4, {}(r3)", mmio::SAVED_PS));
    e(format!("andi r4, r4, {}", ps::PRIO_MASK));
    if keep_spsel {
        e(format!("lw r5, {}(r3)", mmio::PS));
        e(format!("andi r5, r5, {}", ps::SPSEL));
        e("or r4, r4, r5".into());
    }
    e(format!("ori r4, r4, {PS_PATCH_LEVEL}"));
    e(format!("sw r4, {}(r3)", mmio::PS));
}

/// The assembled handler, located in a linked image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HandlerBlob {
    pub entry: u32,
    pub body: u32,
    pub instructions: Vec<(u32, Instruction)>,
    /// Frame slots written before the dispatcher call.
    pub save_count: usize,
    /// Frame slots read back afterwards; the sp slot is recomputed, not loaded.
    pub restore_count: usize,
    pub dispatch_call_site: u32,
    pub return_site: u32,
    pub eret_site: u32,
}

impl HandlerBlob {
    /// Extracts the handler `[entry, eret]` from decoded runtime code.
    pub fn from_code(
        code: &[(u32, Instruction)],
        entry: u32,
        body: u32,
        call_site: u32,
        return_site: u32,
        eret_site: u32,
    ) -> Self {
        let instructions: Vec<(u32, Instruction)> = code
            .iter()
            .copied()
            .filter(|(a, _)| (entry..=eret_site).contains(a))
            .collect();
        // Frame slots sit at non-negative offsets; the scratch word below
        // the frame is excluded.
        let is_frame_store = |i: &Instruction| {
            matches!(i, Instruction::Store { base, offset, .. } if *base == Reg::SP && *offset >= 0)
        };
        let is_frame_load = |i: &Instruction| {
            matches!(i, Instruction::Load { base, offset, .. } if *base == Reg::SP && *offset >= 0)
        };
        let save_count = instructions
            .iter()
            .filter(|(a, i)| *a < call_site && is_frame_store(i))
            .count();
        let restore_count = instructions
            .iter()
            .filter(|(a, i)| *a > call_site && is_frame_load(i))
            .count();
        HandlerBlob {
            entry,
            body,
            instructions,
            save_count,
            restore_count,
            dispatch_call_site: call_site,
            return_site,
            eret_site,
        }
    }
}
