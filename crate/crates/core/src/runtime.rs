//! Links firmware source against the device runtime: vector table, reset
//! stub, exception handler, patch dispatcher and the reserved RAM blocks.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::analysis::sidecar::DebugSidecar;
use crate::asm::{self, AsmError, Assembly};
use crate::frames::{self, label, FrameError, FrameLayout, HandlerBlob};
use crate::image::FirmwareImage;
use crate::isa;
use crate::layout::{self, mmio, ps};
use crate::machine::{ArchProfile, Cause};

#[derive(Debug, Error)]
pub enum LinkError {
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error("assembly failed: {0}")]
    Asm(#[from] AsmError),
    #[error("runtime symbol `{0}` missing")]
    MissingSymbol(&'static str),
    #[error("no entry point (`main` undefined)")]
    NoMain,
}

/// Addresses of the runtime pieces inside a linked image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RuntimeSymbols {
    pub handler: u32,
    pub body: u32,
    pub call_site: u32,
    pub return_site: u32,
    pub eret_site: u32,
    pub dispatcher: u32,
    pub hook_entry: u32,
    pub dispatch_loop: u32,
}

/// A linked firmware build for one profile.
#[derive(Clone, Debug)]
pub struct Firmware {
    pub profile: ArchProfile,
    pub image: FirmwareImage,
    pub sidecar: DebugSidecar,
    pub symbols: BTreeMap<String, u32>,
    pub runtime: RuntimeSymbols,
    pub layout: FrameLayout,
}

impl Firmware {
    pub fn symbol(&self, name: &str) -> Option<u32> {
        self.symbols.get(name).copied()
    }

    pub fn handler_blob(&self) -> HandlerBlob {
        let sec = self
            .image
            .code_section_at(self.runtime.handler)
            .expect("runtime section present");
        let code = isa::decode_all(sec.load_addr, &sec.bytes).unwrap_or_default();
        HandlerBlob::from_code(
            &code,
            self.runtime.handler,
            self.runtime.body,
            self.runtime.call_site,
            self.runtime.return_site,
            self.runtime.eret_site,
        )
    }
}

/// Constants every firmware source may reference.
pub fn predefined(text_base: u32) -> Vec<(&'static str, u32)> {
    vec![
        ("TEXT_BASE", text_base),
        ("SRAM_TEXT", layout::SRAM_TEXT_BASE),
        ("FLASH_TEXT", layout::FLASH_TEXT_BASE),
        ("DATA_BASE", layout::DATA_BASE),
        ("MMIO", layout::MMIO_BASE),
        ("OUT", mmio::OUT),
        ("IN", mmio::IN),
        ("WDT_RELOAD", mmio::WDT_RELOAD),
        ("CYCLE_LO", mmio::CYCLE_LO),
        ("PSP_TOP", layout::PSP_TOP),
        ("MSP_TOP", layout::MSP_TOP),
    ]
}

fn dispatcher_source(layout: &FrameLayout) -> String {
    let ra = layout.ra_offset();
    let t = layout::TABLE_BASE;
    format!(
        "
{disp}:
    lw r3, {ra}(r10)
    lui r4, {thi:#x}
    addi r4, r4, {tlo:#x}
    lw r5, 0(r4)
    addi r4, r4, 4
    addi r6, r0, 0
    addi r8, r0, 1
    addi r11, r0, 4
__d_loop:
    bgeu r6, r5, __d_miss
    add r7, r6, r5
    srl r7, r7, r8
    sll r9, r7, r11
    add r9, r9, r4
    lw r12, 0(r9)
    beq r12, r3, __d_hit
    bltu r12, r3, __d_right
    addi r5, r7, 0
    j __d_loop
__d_right:
    addi r6, r7, 1
    j __d_loop
__d_hit:
    lw r9, 4(r9)
    jalr r0, r9, 0
__d_miss:
    lui r12, {mhi:#x}
    lw r12, {mcause}(r12)
    addi r13, r0, {hook}
    beq r12, r13, __d_done
    lb r9, 0(r3)
    andi r9, r9, 3
    addi r12, r0, 3
    addi r13, r0, 2
    bne r9, r12, __d_short
    addi r13, r0, 4
__d_short:
    add r3, r3, r13
    sw r3, {ra}(r10)
__d_done:
    jalr r0, r1, 0
",
        disp = label::DISPATCHER,
        thi = t >> 12,
        tlo = t & 0xFFF,
        mhi = layout::MMIO_BASE >> 12,
        mcause = mmio::MCAUSE,
        hook = Cause::Hook as u32,
    )
}

/// Assembly source of the complete runtime for `profile`.
pub fn runtime_source(profile: &ArchProfile) -> Result<(String, FrameLayout), FrameError> {
    let (handler, layout) = frames::generate_handler(profile)?;
    let mut s = String::new();
    s.push_str(&format!(
        ".section .vectors code {:#x}\n    .word {h}, {h}, {h}, 0, 0\n",
        layout::VECTOR_TABLE,
        h = label::HANDLER
    ));
    s.push_str(&format!(".section .runtime code {:#x}\n", layout::RUNTIME_BASE));
    s.push_str("__reset:\n");
    if profile.dual_stack {
        // thread code runs on the process stack
        s.push_str(&format!(
            "    li r3, PSP_TOP\n    lui r4, {:#x}\n    sw r3, {}(r4)\n    lw r5, {}(r4)\n    ori r5, r5, {}\n    sw r5, {}(r4)\n",
            layout::MMIO_BASE >> 12,
            mmio::PSP,
            mmio::PS,
            ps::SPSEL,
            mmio::PS
        ));
    }
    s.push_str("    la r3, main\n    jalr r0, r3, 0\n");
    s.push_str(&handler);
    s.push_str(&dispatcher_source(&layout));
    s.push_str(&format!(
        ".section .ptable reserved {:#x} {:#x}\n",
        layout::TABLE_BASE,
        4 + layout::TABLE_CAPACITY as u32 * layout::TABLE_RECORD_BYTES
    ));
    s.push_str(&format!(
        ".section .hooks reserved {:#x} {:#x}\n",
        layout::HOOK_SLOT_BASE,
        4 * layout::HOOK_SLOT_COUNT
    ));
    s.push_str(&format!(
        ".section .patch reserved {:#x} {:#x}\n",
        layout::PATCH_BASE,
        layout::PATCH_SIZE
    ));
    s.push_str(".entry __reset\n");
    Ok((s, layout))
}

/// Assembles `firmware_src` together with the runtime for `profile`.
pub fn link(firmware_src: &str, profile: &ArchProfile, text_base: u32) -> Result<Firmware, LinkError> {
    let (rt, layout) = runtime_source(profile)?;
    let src = format!("{rt}\n{firmware_src}");
    let asm: Assembly = asm::assemble(&src, &predefined(text_base))?;
    if asm.symbol("main").is_none() {
        return Err(LinkError::NoMain);
    }
    let sym = |name: &'static str| asm.symbol(name).ok_or(LinkError::MissingSymbol(name));
    let runtime = RuntimeSymbols {
        handler: sym(label::HANDLER)?,
        body: sym(label::BODY)?,
        call_site: sym(label::CALL_SITE)?,
        return_site: sym(label::RETURN_SITE)?,
        eret_site: sym(label::ERET_SITE)?,
        dispatcher: sym(label::DISPATCHER)?,
        hook_entry: sym(label::HOOK_ENTRY)?,
        dispatch_loop: sym("__d_loop")?,
    };
    let mut sidecar = asm.sidecar.clone();
    sidecar.frames.push(layout.clone());
    Ok(Firmware {
        profile: profile.clone(),
        image: asm.to_image(),
        sidecar,
        symbols: asm.symbols.clone(),
        runtime,
        layout,
    })
}

impl Firmware {
    /// Rebuilds a firmware record from a stored image and sidecar. The
    /// runtime sits at a fixed address and depends only on the profile, so
    /// its symbols come from linking an empty program.
    pub fn from_parts(image: FirmwareImage, sidecar: DebugSidecar, profile: &ArchProfile) -> Result<Self, LinkError> {
        let probe = link(".section .text code TEXT_BASE\nmain:\n    idle\n", profile, layout::SRAM_TEXT_BASE)?;
        let layout = match sidecar.frame(profile.name) {
            Some(l) => l.clone(),
            None => probe.layout.clone(),
        };
        let symbols = probe
            .symbols
            .into_iter()
            .filter(|(k, _)| k.starts_with("__"))
            .collect();
        Ok(Firmware {
            profile: profile.clone(),
            image,
            sidecar,
            symbols,
            runtime: probe.runtime,
            layout,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::machine::{Machine, Stop};

    #[test]
    fn stored_image_recovers_runtime_symbols() {
        let p = ArchProfile::hard16();
        let fw = link(MINI, &p, layout::SRAM_TEXT_BASE).unwrap();
        let img = FirmwareImage::from_bytes(&fw.image.to_bytes().unwrap()).unwrap();
        let sc = DebugSidecar::parse(&fw.sidecar.to_string()).unwrap();
        let back = Firmware::from_parts(img, sc, &p).unwrap();
        assert_eq!(back.runtime, fw.runtime);
        assert_eq!(back.layout, fw.layout);
    }

    const MINI: &str = "
        .section .text code TEXT_BASE
        main:
            li r3, 0x41
            lui r4, %hi(MMIO)
            sw r3, OUT(r4)
            idle
    ";

    #[test]
    fn links_and_runs_on_both_profiles() {
        for p in ArchProfile::all() {
            let fw = link(MINI, &p, layout::SRAM_TEXT_BASE).unwrap();
            assert_eq!(fw.image.entry, layout::RUNTIME_BASE);
            let mut m = Machine::load_image(&fw.image, p.clone()).unwrap();
            let t = m.run(Stop::idle(1000));
            assert_eq!(t.output_bytes(), b"A");
            assert!(fw.sidecar.frame(p.name).is_some());
            let blob = fw.handler_blob();
            assert_eq!(blob.save_count, blob.restore_count + 1, "{}", p.name);
        }
    }

    #[test]
    fn dual_stack_profile_starts_on_psp() {
        let p = ArchProfile::hard16();
        let fw = link(MINI, &p, layout::SRAM_TEXT_BASE).unwrap();
        let mut m = Machine::load_image(&fw.image, p).unwrap();
        m.run(Stop::idle(1000));
        assert!(m.on_psp());
        assert_eq!(m.psp(), layout::PSP_TOP);
        assert_eq!(m.msp(), layout::MSP_TOP);
    }
}
