//! Deterministic instruction-level simulator.
//!
//! Cost model: every retired instruction costs `instr_cost` cycles, every
//! trap entry costs `trap_entry_cost`. The watchdog is charged the same
//! amount and fires when more than `W` cycles elapse between reloads.

mod memory;
mod profile;
mod trace;

use std::collections::{BTreeSet, VecDeque};

use thiserror::Error;

pub use memory::{MemoryMap, Region, RegionKind};
pub use profile::{ArchProfile, Stacking};
pub use trace::{Cause, Event, FaultKind, Observable, Trace};

use crate::image::{FirmwareImage, SectionKind};
use crate::isa::{self, Instruction, Reg, Width};
use crate::layout::{self, mmio, ps};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MachineError {
    #[error("section `{name}` at {addr:#010x}+{size:#x} does not fit memory")]
    SectionOverflow { name: String, addr: u32, size: u32 },
    #[error("entry point {0:#010x} is not inside a code section")]
    BadEntry(u32),
    #[error("unmapped address {0:#010x}")]
    UnmappedAddress(u32),
    #[error("write to FLASH at {0:#010x}")]
    FlashWriteFault(u32),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Thread,
    Exception,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Retired,
    Trapped(Cause),
    Idle,
    WatchdogReset,
    Halted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum RunState {
    Running,
    Halted,
    Reset,
}

/// Stop conditions for [`Machine::run`]; the first one met ends the run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Stop {
    /// Cycles elapsed during this call.
    pub max_cycles: Option<u64>,
    pub at_idle: bool,
    /// Output bytes produced during this call.
    pub output_len: Option<usize>,
    /// Stop before executing this address (checked after the first step).
    pub at_pc: Option<u32>,
}

impl Stop {
    pub fn cycles(n: u64) -> Self {
        Stop {
            max_cycles: Some(n),
            ..Stop::default()
        }
    }

    pub fn idle(budget: u64) -> Self {
        Stop {
            max_cycles: Some(budget),
            at_idle: true,
            ..Stop::default()
        }
    }

    pub fn pc(addr: u32, budget: u64) -> Self {
        Stop {
            max_cycles: Some(budget),
            at_pc: Some(addr),
            ..Stop::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct Machine {
    pub profile: ArchProfile,
    pub regs: [u32; 16],
    pub pc: u32,
    /// Banked stack tops; the active one is mirrored live in r2.
    msp_bank: u32,
    psp_bank: u32,
    pub ps: u32,
    saved_ps: Vec<u32>,
    pub mepc: u32,
    pub mcause: Cause,
    pub cycles: u64,
    pub mem: MemoryMap,
    pub bp: [u32; 4],
    pub bp_enable: u32,
    wdt_reload: u32,
    wdt_remaining: u64,
    pending_kick: bool,
    input: VecDeque<u8>,
    state: RunState,
    parked_at: Option<u32>,
    watches: BTreeSet<u32>,
    events: Vec<(u64, Event)>,
    image: FirmwareImage,
}

impl Machine {
    pub fn load_image(image: &FirmwareImage, profile: ArchProfile) -> Result<Self, MachineError> {
        let mut mem = MemoryMap::default();
        for s in &image.sections {
            let fits = match s.kind {
                SectionKind::Reserved => layout::in_sram(s.load_addr)
                    && mem.region_of(s.load_addr, s.size).is_some(),
                SectionKind::Data => {
                    layout::in_sram(s.load_addr) && mem.program(s.load_addr, &s.bytes)
                }
                SectionKind::Code => mem.program(s.load_addr, &s.bytes),
            };
            if !fits {
                return Err(MachineError::SectionOverflow {
                    name: s.name.clone(),
                    addr: s.load_addr,
                    size: s.size,
                });
            }
        }
        if image.code_section_at(image.entry).is_none() {
            return Err(MachineError::BadEntry(image.entry));
        }
        let mut regs = [0u32; 16];
        regs[Reg::SP.index()] = image.msp_init;
        Ok(Machine {
            profile,
            regs,
            pc: image.entry,
            msp_bank: image.msp_init,
            psp_bank: 0,
            ps: 0,
            saved_ps: Vec::new(),
            mepc: 0,
            mcause: Cause::Fault,
            cycles: 0,
            mem,
            bp: [0; 4],
            bp_enable: 0,
            wdt_reload: image.wdt,
            wdt_remaining: image.wdt as u64,
            pending_kick: false,
            input: VecDeque::new(),
            state: RunState::Running,
            parked_at: None,
            watches: BTreeSet::new(),
            events: Vec::new(),
            image: image.clone(),
        })
    }

    /// Power cycle: reloads the image, losing every RAM-resident patch and
    /// trigger. Watches and queued input survive.
    pub fn reset(&mut self) {
        let watches = std::mem::take(&mut self.watches);
        let input = std::mem::take(&mut self.input);
        let fresh = Machine::load_image(&self.image, self.profile.clone())
            .expect("image was loadable before");
        *self = fresh;
        self.watches = watches;
        self.input = input;
    }

    pub fn image(&self) -> &FirmwareImage {
        &self.image
    }

    pub fn mode(&self) -> Mode {
        if self.depth() >= 1 {
            Mode::Exception
        } else {
            Mode::Thread
        }
    }

    pub fn depth(&self) -> u32 {
        (self.ps & ps::DEPTH_MASK) >> ps::DEPTH_SHIFT
    }

    pub fn reg(&self, r: Reg) -> u32 {
        self.regs[r.index()]
    }

    pub fn set_reg(&mut self, r: Reg, v: u32) {
        if r != Reg::ZERO {
            self.regs[r.index()] = v;
        }
    }

    pub fn on_psp(&self) -> bool {
        self.ps & ps::SPSEL != 0
    }

    pub fn msp(&self) -> u32 {
        if self.on_psp() {
            self.msp_bank
        } else {
            self.regs[2]
        }
    }

    pub fn psp(&self) -> u32 {
        if self.on_psp() {
            self.regs[2]
        } else {
            self.psp_bank
        }
    }

    pub fn set_psp(&mut self, v: u32) {
        if self.on_psp() {
            self.regs[2] = v;
        } else {
            self.psp_bank = v;
        }
    }

    pub fn set_msp(&mut self, v: u32) {
        if self.on_psp() {
            self.msp_bank = v;
        } else {
            self.regs[2] = v;
        }
    }

    /// Switches the active stack; a no-op on single-stack profiles.
    pub fn select_stack(&mut self, psp: bool) {
        if !self.profile.dual_stack || psp == self.on_psp() {
            return;
        }
        if psp {
            self.msp_bank = self.regs[2];
            self.regs[2] = self.psp_bank;
            self.ps |= ps::SPSEL;
        } else {
            self.psp_bank = self.regs[2];
            self.regs[2] = self.msp_bank;
            self.ps &= !ps::SPSEL;
        }
    }

    pub fn saved_ps(&self) -> u32 {
        self.saved_ps.last().copied().unwrap_or(0)
    }

    pub fn push_input(&mut self, bytes: &[u8]) {
        self.input.extend(bytes);
    }

    pub fn input_pending(&self) -> usize {
        self.input.len()
    }

    pub fn watch(&mut self, addr: u32) {
        self.watches.insert(addr);
    }

    pub fn unwatch_all(&mut self) {
        self.watches.clear();
    }

    pub fn wdt_timeout(&self) -> u32 {
        self.wdt_reload
    }

    /// Overrides W and restarts the countdown.
    pub fn set_wdt_timeout(&mut self, w: u32) {
        self.wdt_reload = w;
        self.wdt_remaining = w as u64;
    }

    pub fn wdt_remaining(&self) -> u64 {
        self.wdt_remaining
    }

    /// The IDLE instruction the machine is stopped after, if it is parked.
    pub fn parked_at(&self) -> Option<u32> {
        self.parked_at
    }

    pub fn is_halted(&self) -> bool {
        self.state != RunState::Running
    }

    pub fn watchdog_fired(&self) -> bool {
        self.state == RunState::Reset
    }

    // ---- memory ---------------------------------------------------------

    /// Side-effect-free read of FLASH/SRAM bytes.
    pub fn peek(&self, addr: u32, len: u32) -> Option<&[u8]> {
        self.mem.slice(addr, len)
    }

    pub fn peek_u32(&self, addr: u32) -> Option<u32> {
        self.peek(addr, 4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    /// Architectural read (MMIO side effects included).
    pub fn read(&mut self, addr: u32, width: Width) -> Result<u32, MachineError> {
        let n = width.bytes();
        let region = self
            .mem
            .region_of(addr, n)
            .ok_or(MachineError::UnmappedAddress(addr))?
            .kind;
        if region == RegionKind::Mmio {
            return Ok(self.mmio_read(addr - layout::MMIO_BASE));
        }
        let b = self.mem.slice(addr, n).expect("region checked");
        Ok(match width {
            Width::Word => u32::from_le_bytes([b[0], b[1], b[2], b[3]]),
            Width::Half => i16::from_le_bytes([b[0], b[1]]) as i32 as u32,
            Width::Byte => b[0] as i8 as i32 as u32,
        })
    }

    /// Architectural write. FLASH is read-only at runtime.
    pub fn write(&mut self, addr: u32, width: Width, value: u32) -> Result<(), MachineError> {
        let n = width.bytes();
        let region = self
            .mem
            .region_of(addr, n)
            .ok_or(MachineError::UnmappedAddress(addr))?
            .kind;
        match region {
            RegionKind::Flash => Err(MachineError::FlashWriteFault(addr)),
            RegionKind::Mmio => {
                self.mmio_write(addr - layout::MMIO_BASE, value);
                Ok(())
            }
            RegionKind::Sram => {
                let bytes = value.to_le_bytes();
                self.mem
                    .slice_mut(addr, n)
                    .expect("region checked")
                    .copy_from_slice(&bytes[..n as usize]);
                Ok(())
            }
        }
    }

    pub fn write_bytes(&mut self, addr: u32, bytes: &[u8]) -> Result<(), MachineError> {
        let n = bytes.len() as u32;
        match self.mem.region_of(addr, n).map(|r| r.kind) {
            None => Err(MachineError::UnmappedAddress(addr)),
            Some(RegionKind::Flash) => Err(MachineError::FlashWriteFault(addr)),
            Some(RegionKind::Mmio) => {
                for (i, b) in bytes.iter().enumerate() {
                    self.write(addr + i as u32, Width::Byte, *b as u32)?;
                }
                Ok(())
            }
            Some(RegionKind::Sram) => {
                self.mem
                    .slice_mut(addr, n)
                    .expect("region checked")
                    .copy_from_slice(bytes);
                Ok(())
            }
        }
    }

    fn mmio_read(&mut self, off: u32) -> u32 {
        let off = off & !3;
        match off {
            mmio::IN => self.input.pop_front().map(u32::from).unwrap_or(0),
            mmio::WDT_RELOAD => self.wdt_reload,
            mmio::CYCLE_LO => self.cycles as u32,
            mmio::CYCLE_HI => (self.cycles >> 32) as u32,
            o if (mmio::BP0..mmio::BP0 + 16).contains(&o) => self.bp[((o - mmio::BP0) / 4) as usize],
            mmio::BP_ENABLE => self.bp_enable,
            mmio::MEPC => self.mepc,
            mmio::MCAUSE => self.mcause as u32,
            mmio::PS => self.ps,
            mmio::SAVED_PS => self.saved_ps(),
            mmio::MSP => self.msp(),
            mmio::PSP => self.psp(),
            _ => 0,
        }
    }

    fn mmio_write(&mut self, off: u32, value: u32) {
        let off = off & !3;
        match off {
            mmio::OUT => self.events.push((self.cycles, Event::Output(value as u8))),
            mmio::WDT_RELOAD => self.pending_kick = true,
            o if (mmio::BP0..mmio::BP0 + 16).contains(&o) => {
                self.bp[((o - mmio::BP0) / 4) as usize] = value & !1
            }
            mmio::BP_ENABLE => {
                self.bp_enable = value & ((1u32 << self.profile.hw_bp_count) - 1)
            }
            mmio::MEPC => self.mepc = value & !1,
            mmio::PS => self.write_ps(value),
            mmio::SAVED_PS => {
                if let Some(top) = self.saved_ps.last_mut() {
                    *top = value;
                }
            }
            mmio::MSP => self.set_msp(value),
            mmio::PSP => self.set_psp(value),
            mmio::TRAP_ENTER => {
                self.enter_exception(value, Cause::Hook);
                self.events.push((self.cycles, Event::Trap {
                    cause: Cause::Hook,
                    pc: value & !1,
                }));
            }
            _ => {}
        }
    }

    fn write_ps(&mut self, value: u32) {
        let want_psp = value & ps::SPSEL != 0 && self.profile.dual_stack;
        self.select_stack(want_psp);
        let depth = (value & ps::DEPTH_MASK) >> ps::DEPTH_SHIFT;
        let mut v = value & (ps::DEPTH_MASK | ps::PRIO_MASK);
        if depth > 0 {
            v |= ps::MODE;
        }
        if self.on_psp() {
            v |= ps::SPSEL;
        }
        self.ps = v;
    }

    /// Exception bookkeeping shared by hardware traps and hook entries:
    /// record mepc/mcause, stack the status word, move to the main stack
    /// and bump the nesting depth.
    fn enter_exception(&mut self, mepc: u32, cause: Cause) {
        self.mepc = mepc & !1;
        self.mcause = cause;
        self.saved_ps.push(self.ps);
        self.select_stack(false);
        let depth = self.depth() + 1;
        self.ps = (self.ps & !(ps::DEPTH_MASK | ps::MODE)) | (depth << ps::DEPTH_SHIFT) | ps::MODE;
    }

    // ---- execution ------------------------------------------------------

    fn halt(&mut self, kind: FaultKind) -> StepOutcome {
        self.events.push((
            self.cycles,
            Event::Fault {
                pc: self.pc,
                kind,
            },
        ));
        self.state = RunState::Halted;
        StepOutcome::Halted
    }

    /// Charges cycles to the counter and the watchdog. Returns false when
    /// the watchdog expires.
    fn charge(&mut self, cost: u64) -> bool {
        self.cycles += cost;
        if self.wdt_reload != 0 {
            if cost > self.wdt_remaining {
                self.wdt_remaining = 0;
                self.events.push((self.cycles, Event::WatchdogReset));
                self.state = RunState::Reset;
                return false;
            }
            self.wdt_remaining -= cost;
        }
        if std::mem::take(&mut self.pending_kick) {
            self.wdt_remaining = self.wdt_reload as u64;
        }
        true
    }

    /// Takes an exception: saves state per the profile and vectors.
    pub fn raise(&mut self, cause: Cause) -> StepOutcome {
        if self.depth() >= 2 {
            return self.halt(FaultKind::NestingOverflow);
        }
        let pc = self.pc;
        if self.profile.stacking == Stacking::Hardware {
            let words = self.profile.hw_frame_words();
            let sp = self.regs[2].wrapping_sub(4 * words);
            let mut vals = vec![pc];
            vals.extend(self.profile.hw_stacked_set.iter().map(|r| self.regs[r.index()]));
            for (i, v) in vals.into_iter().enumerate() {
                if self.write(sp + 4 * i as u32, Width::Word, v).is_err() {
                    return self.halt(FaultKind::Unmapped);
                }
            }
            self.regs[2] = sp;
        }
        self.enter_exception(pc, cause);
        self.events.push((self.cycles, Event::Trap { cause, pc }));
        let vector = self
            .peek_u32(layout::VECTOR_TABLE + 4 * cause as u32)
            .unwrap_or(0);
        if !self.charge(self.profile.trap_entry_cost) {
            return StepOutcome::WatchdogReset;
        }
        if vector == 0 || vector == u32::MAX {
            return self.halt(FaultKind::NoVector);
        }
        self.pc = vector;
        StepOutcome::Trapped(cause)
    }

    fn eret(&mut self) -> Result<(), FaultKind> {
        if self.depth() == 0 {
            return Err(FaultKind::BadEret);
        }
        let prev = self.saved_ps.pop().unwrap_or(0);
        // Handler runs on MSP; land on whichever stack the interrupted code used.
        if self.profile.dual_stack {
            let want_psp = prev & ps::SPSEL != 0;
            self.select_stack(want_psp);
        }
        self.ps = prev;
        if self.profile.stacking == Stacking::Hardware {
            let sp = self.regs[2];
            let target = self.read(sp, Width::Word).map_err(|_| FaultKind::Unmapped)?;
            let set = self.profile.hw_stacked_set.clone();
            for (i, r) in set.iter().enumerate() {
                let v = self
                    .read(sp + 4 * (i as u32 + 1), Width::Word)
                    .map_err(|_| FaultKind::Unmapped)?;
                self.regs[r.index()] = v;
            }
            self.regs[2] = sp + 4 * self.profile.hw_frame_words();
            self.pc = target & !1;
        } else {
            self.pc = self.mepc;
        }
        Ok(())
    }

    fn fetch(&self) -> Result<Instruction, FaultKind> {
        let pc = self.pc;
        if pc % 2 != 0 {
            return Err(FaultKind::Misaligned);
        }
        let region = self.mem.region_of(pc, 2).ok_or(FaultKind::Unmapped)?;
        if region.kind == RegionKind::Mmio {
            return Err(FaultKind::NotExecutable);
        }
        let first = self.mem.slice(pc, 1).ok_or(FaultKind::Unmapped)?[0];
        let len = isa::length_from_first_byte(first);
        let bytes = self.mem.slice(pc, len).ok_or(FaultKind::Unmapped)?;
        isa::decode(bytes).map_err(|_| FaultKind::Decode)
    }

    pub fn step(&mut self) -> StepOutcome {
        match self.state {
            RunState::Halted => return StepOutcome::Halted,
            RunState::Reset => return StepOutcome::WatchdogReset,
            RunState::Running => {}
        }
        self.parked_at = None;
        let pc = self.pc;
        if self.watches.contains(&pc) {
            self.events.push((self.cycles, Event::Reached(pc)));
        }
        for i in 0..self.profile.hw_bp_count {
            if self.bp_enable & (1 << i) != 0 && self.bp[i] == pc {
                return self.raise(Cause::HwBreak);
            }
        }
        let instr = match self.fetch() {
            Ok(i) => i,
            Err(kind) => return self.halt(kind),
        };
        if instr.is_breakpoint() {
            return self.raise(Cause::SwBreak);
        }
        let mut next = pc.wrapping_add(instr.len());
        let mut outcome = StepOutcome::Retired;
        use Instruction as I;
        match instr {
            I::Lui { rd, imm } => self.set_reg(rd, imm << 12),
            I::Auipc { rd, imm } => self.set_reg(rd, pc.wrapping_add(imm << 12)),
            I::Jal { rd, offset } => {
                self.set_reg(rd, next);
                next = pc.wrapping_add(offset as u32);
            }
            I::Jalr { rd, rs1, offset } => {
                let target = self.reg(rs1).wrapping_add(offset as u32) & !1;
                self.set_reg(rd, next);
                next = target;
            }
            I::CJr { rs } => next = self.reg(rs) & !1,
            I::Branch {
                cond,
                rs1,
                rs2,
                offset,
            } => {
                if cond.holds(self.reg(rs1), self.reg(rs2)) {
                    next = pc.wrapping_add(offset as u32);
                }
            }
            I::Load {
                width,
                rd,
                base,
                offset,
            } => {
                let addr = self.reg(base).wrapping_add(offset as u32);
                match self.read(addr, width) {
                    Ok(v) => self.set_reg(rd, v),
                    Err(_) => return self.halt(FaultKind::Unmapped),
                }
            }
            I::Store {
                width,
                src,
                base,
                offset,
            } => {
                let addr = self.reg(base).wrapping_add(offset as u32);
                match self.write(addr, width, self.reg(src)) {
                    Ok(()) => {}
                    Err(MachineError::FlashWriteFault(_)) => {
                        return self.halt(FaultKind::FlashWrite)
                    }
                    Err(_) => return self.halt(FaultKind::Unmapped),
                }
            }
            I::OpImm { op, rd, rs1, imm } => self.set_reg(rd, op.apply(self.reg(rs1), imm)),
            I::Op { op, rd, rs1, rs2 } => {
                self.set_reg(rd, op.apply(self.reg(rs1), self.reg(rs2)))
            }
            I::CAddi { rd, imm } => self.set_reg(rd, self.reg(rd).wrapping_add(imm as u32)),
            I::CMv { rd, rs } => self.set_reg(rd, self.reg(rs)),
            I::Nop | I::CNop => {}
            I::Idle => {
                self.events.push((self.cycles, Event::Idle { pc }));
                outcome = StepOutcome::Idle;
            }
            I::Eret => {
                if let Err(kind) = self.eret() {
                    return self.halt(kind);
                }
                next = self.pc;
            }
            I::Ebreak | I::CEbreak => unreachable!("handled before execution"),
        }
        self.pc = next;
        if !self.charge(self.profile.instr_cost) {
            return StepOutcome::WatchdogReset;
        }
        if outcome == StepOutcome::Idle {
            self.parked_at = Some(pc);
        }
        outcome
    }

    /// Runs until a stop condition holds or the machine halts.
    pub fn run(&mut self, stop: Stop) -> Trace {
        let start_cycles = self.cycles;
        let mut outputs = 0usize;
        let mut first = true;
        loop {
            if !first && stop.at_pc == Some(self.pc) {
                break;
            }
            first = false;
            if let Some(max) = stop.max_cycles {
                if self.cycles - start_cycles >= max {
                    break;
                }
            }
            let before = self.events.len();
            let outcome = self.step();
            if let Some(n) = stop.output_len {
                outputs += self.events[before..]
                    .iter()
                    .filter(|(_, e)| matches!(e, Event::Output(_)))
                    .count();
                if outputs >= n {
                    break;
                }
            }
            match outcome {
                StepOutcome::Halted | StepOutcome::WatchdogReset => break,
                StepOutcome::Idle if stop.at_idle => break,
                _ => {}
            }
        }
        Trace {
            // includes events raised by host-side accesses since the last run
            events: std::mem::take(&mut self.events),
        }
    }

    /// Feeds nothing new; runs idle-to-idle until the input queue is empty
    /// at an IDLE, the machine halts, or `budget` cycles pass.
    pub fn run_until_drained(&mut self, budget: u64) -> Trace {
        let mut trace = Trace::default();
        let start = self.cycles;
        loop {
            let spent = self.cycles - start;
            if spent >= budget {
                break;
            }
            let t = self.run(Stop::idle(budget - spent));
            trace.extend(t);
            if self.is_halted() || (self.parked_at.is_some() && self.input.is_empty()) {
                break;
            }
        }
        trace
    }
}
