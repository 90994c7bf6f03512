//! Device-side update service. Lock-step with the simulator: the caller
//! hands it a request frame while the machine is stopped and gets the reply
//! frame back. Installs only happen while the machine is parked at an IDLE
//! inside the idle range, so no trap ever sees half an entry.

use crate::analysis::sidecar::HookInfo;
use crate::dispatcher::{PatchEntry, PatchTable, Strategy, TriggerKind};
use crate::isa::{self, Instruction};
use crate::layout;
use crate::machine::Machine;
use crate::runtime::Firmware;
use crate::updsvc::frame::{self, FrameError};
use crate::updsvc::msg::{DeviceInfo, Message, NackReason, PatchList, StatusEntry};

#[derive(Clone, Debug)]
pub struct DeviceService {
    profile: String,
    idle_range: Option<(u32, u32)>,
    hook_entry: u32,
    hooks: Vec<HookInfo>,
    /// Lowest free `.patch` byte; the region is bump-allocated and never freed.
    patch_next: u32,
}

const PATCH_END: u32 = layout::PATCH_BASE + layout::PATCH_SIZE;

fn in_data(addr: u32, len: u32) -> bool {
    let end = addr as u64 + len as u64;
    addr >= layout::DATA_BASE && end <= layout::PATCH_BASE as u64
}

fn in_patch(addr: u32, len: u32) -> bool {
    let end = addr as u64 + len as u64;
    addr >= layout::PATCH_BASE && end <= PATCH_END as u64
}

fn breakpoint_bytes(len: u8) -> Vec<u8> {
    let i = if len == 2 {
        Instruction::CEbreak
    } else {
        Instruction::Ebreak
    };
    isa::encode(&i).expect("breakpoints encode")
}

impl DeviceService {
    pub fn new(fw: &Firmware) -> Self {
        DeviceService {
            profile: fw.profile.name.to_string(),
            idle_range: fw.sidecar.idle_range,
            hook_entry: fw.runtime.hook_entry,
            hooks: fw.sidecar.hooks.clone(),
            patch_next: layout::PATCH_BASE,
        }
    }

    /// Forget every install; pair with `Machine::reset`.
    pub fn power_cycle(&mut self) {
        self.patch_next = layout::PATCH_BASE;
    }

    pub fn free_patch_bytes(&self) -> u32 {
        PATCH_END - self.patch_next
    }

    pub fn is_idle(&self, m: &Machine) -> bool {
        match (m.parked_at(), self.idle_range) {
            (Some(pc), Some((lo, hi))) => (lo..hi).contains(&pc),
            _ => false,
        }
    }

    fn table(m: &Machine) -> PatchTable {
        // A corrupt table reads as empty rather than taking the service down.
        PatchTable::read_device(m).unwrap_or_default()
    }

    pub fn info(&self, m: &Machine) -> DeviceInfo {
        let used = m.bp_enable.count_ones() as usize;
        DeviceInfo {
            profile: self.profile.clone(),
            table_capacity: layout::TABLE_CAPACITY as u16,
            installed: Self::table(m).len() as u16,
            free_patch_bytes: self.free_patch_bytes(),
            free_comparators: m.profile.hw_bp_count.saturating_sub(used) as u8,
        }
    }

    /// Handles one raw request frame and returns the encoded reply. Never
    /// panics on hostile input.
    pub fn handle_bytes(&mut self, m: &mut Machine, bytes: &[u8]) -> Vec<u8> {
        let reply = match frame::decode_frame(bytes) {
            Err(FrameError::BadCrc) => Message::Nack(NackReason::BadCrc),
            Err(_) => Message::Nack(NackReason::Malformed),
            Ok((f, _)) => match Message::from_frame(&f) {
                Ok(msg) => self.handle(m, msg),
                Err(_) => Message::Nack(NackReason::Malformed),
            },
        };
        reply.encode().expect("replies fit in a frame")
    }

    pub fn handle(&mut self, m: &mut Machine, msg: Message) -> Message {
        match msg {
            Message::Hello(None) => Message::Hello(Some(self.info(m))),
            Message::Status(None) => Message::Status(Some(
                Self::table(m)
                    .entries()
                    .iter()
                    .map(|e| StatusEntry {
                        update_addr: e.update_addr,
                        patch_addr: e.patch_addr,
                        size: e.size,
                        flags: e.flags() as u8,
                    })
                    .collect(),
            )),
            Message::PatchList(list) => match self.apply(m, &list) {
                Ok(()) => Message::Ack,
                Err(r) => Message::Nack(r),
            },
            Message::Remove {
                update_addr,
                original,
            } => match self.remove(m, update_addr, &original) {
                Ok(()) => Message::Ack,
                Err(r) => Message::Nack(r),
            },
            // replies are not requests
            _ => Message::Nack(NackReason::Malformed),
        }
    }

    /// Validates the whole list first, then applies: code, global writes in
    /// plan order, table entries, triggers.
    pub fn apply(&mut self, m: &mut Machine, list: &PatchList) -> Result<(), NackReason> {
        if !self.is_idle(m) {
            return Err(NackReason::NotIdle);
        }
        let mut table = Self::table(m);
        let mut free_bp: Vec<usize> = (0..m.profile.hw_bp_count.min(4))
            .filter(|i| m.bp_enable & (1 << i) == 0)
            .collect();
        free_bp.reverse();
        let mut bp_plan = Vec::new();
        let mut high = self.patch_next;
        let mut shipped: Vec<(u32, u32)> = Vec::new();

        for n in &list.nodes {
            let trigger = TriggerKind::from_bits(n.flags as u32).ok_or(NackReason::Malformed)?;
            if n.flags & !0x0F != 0 {
                return Err(NackReason::Malformed);
            }
            let strategy = Strategy::from_parts((n.flags as u32 >> 2) & 3, n.strategy_arg)
                .ok_or(NackReason::Malformed)?;
            if m.image().code_section_at(n.update_addr).is_none() || n.update_addr % 2 != 0 {
                return Err(NackReason::BadTarget);
            }
            if n.size == 0 {
                return Err(NackReason::Malformed);
            }
            match &n.code {
                Some(code) => {
                    if code.len() as u32 != n.size {
                        return Err(NackReason::Malformed);
                    }
                    if n.patch_addr < self.patch_next || n.patch_addr % 2 != 0 {
                        return Err(NackReason::BadTarget);
                    }
                    if !in_patch(n.patch_addr, n.size) {
                        return Err(NackReason::PatchRegionFull);
                    }
                    if shipped.iter().any(|&(a, s)| n.patch_addr < a + s && a < n.patch_addr + n.size) {
                        return Err(NackReason::BadTarget);
                    }
                    shipped.push((n.patch_addr, n.size));
                    high = high.max(n.patch_addr + n.size);
                }
                None => {
                    let known = shipped.contains(&(n.patch_addr, n.size))
                        || table
                            .entries()
                            .iter()
                            .any(|e| e.patch_addr == n.patch_addr && e.size == n.size);
                    if !known {
                        return Err(NackReason::Malformed);
                    }
                }
            }
            match trigger {
                TriggerKind::SwBp => {
                    if layout::in_flash(n.update_addr) {
                        return Err(NackReason::FlashSwBreak);
                    }
                    if n.orig_len != 2 && n.orig_len != 4 {
                        return Err(NackReason::Malformed);
                    }
                    let first = m.peek(n.update_addr, 1).ok_or(NackReason::BadTarget)?[0];
                    if isa::length_from_first_byte(first) != n.orig_len as u32 {
                        return Err(NackReason::Malformed);
                    }
                }
                TriggerKind::HwBp => {
                    let slot = free_bp.pop().ok_or(NackReason::NoComparator)?;
                    bp_plan.push((slot, n.update_addr));
                }
                TriggerKind::Hook => {
                    let ok = self
                        .hooks
                        .iter()
                        .any(|h| h.site == n.update_addr && h.slot == n.trigger_arg);
                    if !ok {
                        return Err(NackReason::BadTarget);
                    }
                }
            }
            let entry = PatchEntry {
                update_addr: n.update_addr,
                patch_addr: n.patch_addr,
                size: n.size,
                trigger,
                strategy,
            };
            if table.len() >= layout::TABLE_CAPACITY {
                return Err(NackReason::TableFull);
            }
            table.install(entry).map_err(|e| match e {
                crate::dispatcher::TableError::TableFull(_) => NackReason::TableFull,
                crate::dispatcher::TableError::DuplicateUpdateAddr(_) => NackReason::Duplicate,
                _ => NackReason::BadTarget,
            })?;
        }
        for w in &list.writes {
            let len = w.bytes.len() as u32;
            if in_patch(w.addr, len) {
                if w.addr < self.patch_next {
                    return Err(NackReason::BadTarget);
                }
                high = high.max(w.addr + len);
            } else if !in_data(w.addr, len) {
                if w.addr >= layout::PATCH_BASE && w.addr < PATCH_END {
                    return Err(NackReason::PatchRegionFull);
                }
                return Err(NackReason::BadTarget);
            }
        }

        // Everything checked; from here on writes cannot fail.
        let put = |m: &mut Machine, addr: u32, bytes: &[u8]| {
            m.write_bytes(addr, bytes).expect("validated target");
        };
        for n in &list.nodes {
            if let Some(code) = &n.code {
                put(m, n.patch_addr, code);
            }
        }
        for w in &list.writes {
            put(m, w.addr, &w.bytes);
        }
        table.write_device(m).expect("table region is RAM");
        for (slot, addr) in bp_plan {
            m.bp[slot] = addr & !1;
            m.bp_enable |= 1 << slot;
        }
        for n in &list.nodes {
            match TriggerKind::from_bits(n.flags as u32) {
                Some(TriggerKind::SwBp) => put(m, n.update_addr, &breakpoint_bytes(n.orig_len)),
                Some(TriggerKind::Hook) => put(m, n.trigger_arg, &self.hook_entry.to_le_bytes()),
                _ => {}
            }
        }
        self.patch_next = high;
        Ok(())
    }

    pub fn remove(&mut self, m: &mut Machine, update_addr: u32, original: &[u8]) -> Result<(), NackReason> {
        if !self.is_idle(m) {
            return Err(NackReason::NotIdle);
        }
        let mut table = Self::table(m);
        let entry = *table.lookup(update_addr).entry.ok_or(NackReason::NotFound)?;
        match entry.trigger {
            TriggerKind::SwBp => {
                let first = m.peek(update_addr, 1).ok_or(NackReason::BadTarget)?[0];
                let len = isa::length_from_first_byte(first) as usize;
                if original.len() != len || isa::decode(original).is_err() {
                    return Err(NackReason::Malformed);
                }
                m.write_bytes(update_addr, original)
                    .map_err(|_| NackReason::BadTarget)?;
            }
            TriggerKind::HwBp => {
                for i in 0..m.profile.hw_bp_count.min(4) {
                    if m.bp_enable & (1 << i) != 0 && m.bp[i] == update_addr {
                        m.bp_enable &= !(1 << i);
                        m.bp[i] = 0;
                    }
                }
            }
            TriggerKind::Hook => {
                if let Some(h) = self.hooks.iter().find(|h| h.site == update_addr) {
                    m.write_bytes(h.slot, &[0; 4]).map_err(|_| NackReason::BadTarget)?;
                }
            }
        }
        table.remove(update_addr);
        table.write_device(m).map_err(|_| NackReason::BadTarget)?;
        Ok(())
    }
}
