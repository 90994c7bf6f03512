//! Cycle accounting of the patch path on the simulator, and the timing
//! model calibrated from it.
//!
//! Each trap is split into four phases by the pc of every retired step:
//! trigger (from the breakpoint or the hook stub until the handler body),
//! dispatch (inside the dispatcher), patch (inside `.patch`) and exception
//! (everything else until ERET lands back in thread mode).

use std::collections::{BTreeMap, VecDeque};
use std::sync::{Mutex, OnceLock};

use thiserror::Error;

use crate::asm;
use crate::dispatcher::{Strategy, TriggerKind};
use crate::isa::{BranchCond, Instruction};
use crate::layout;
use crate::machine::{ArchProfile, Cause, Machine, Stop, StepOutcome, Trace};
use crate::patchgen::{compile_str, PatchAllocator, RaTargets};
use crate::runtime::{self, Firmware, LinkError};
use crate::updsvc::{BundleNode, HostClient, HostError, PatchBundle, SimDevice};
use crate::verifier::TimingModel;

/// Where each phase's code lives in one linked image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PhaseProbe {
    pub body: u32,
    pub dispatcher: (u32, u32),
    /// The key comparison inside the search loop; one visit per probe.
    pub compare_pc: u32,
    pub stub_len: u32,
}

impl PhaseProbe {
    pub fn new(fw: &Firmware) -> Self {
        let rt = fw.runtime;
        let end = fw
            .image
            .code_section_at(rt.dispatcher)
            .map(|s| s.end())
            .unwrap_or(rt.dispatcher);
        let compare_pc = fw
            .image
            .decode_range(rt.dispatch_loop, end)
            .unwrap_or_default()
            .into_iter()
            .find(|(_, i)| {
                matches!(
                    i,
                    Instruction::Branch {
                        cond: BranchCond::Eq,
                        ..
                    }
                )
            })
            .map(|(a, _)| a)
            .unwrap_or(rt.dispatch_loop);
        PhaseProbe {
            body: rt.body,
            dispatcher: (rt.dispatcher, end),
            compare_pc,
            stub_len: asm::hook_stub(0).iter().map(Instruction::len).sum(),
        }
    }
}

/// Cycle split of one trap, from trigger to resumption.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrapTiming {
    pub cause: Cause,
    /// The interrupted address (the update point).
    pub site: u32,
    pub t_trigger: u64,
    pub t_exception: u64,
    pub t_dispatch: u64,
    pub t_patch: u64,
    pub t_total: u64,
    pub comparisons: u32,
    /// Whether control entered `.patch`; false on a dispatcher miss.
    pub patched: bool,
}

#[derive(Debug)]
struct Open {
    cause: Cause,
    site: u32,
    start: u64,
    in_trigger: bool,
    t: TrapTiming,
}

/// Like `Machine::run_until_drained`, stepping one instruction at a time
/// and timing every trap taken from thread mode.
pub fn run_probed(m: &mut Machine, probe: &PhaseProbe, budget: u64) -> (Trace, Vec<TrapTiming>) {
    let start = m.cycles;
    let mut history: VecDeque<(u32, u64)> = VecDeque::with_capacity(32);
    let mut open: Option<Open> = None;
    let mut done = Vec::new();
    let patch = layout::PATCH_BASE..layout::PATCH_BASE + layout::PATCH_SIZE;
    while m.cycles - start < budget {
        let pc = m.pc;
        let c0 = m.cycles;
        let d0 = m.depth();
        if let Some(o) = open.as_mut() {
            if o.in_trigger && pc == probe.body {
                o.in_trigger = false;
                o.t.t_trigger = c0 - o.start;
            }
        }
        let out = m.step();
        let dc = m.cycles - c0;
        match open.as_mut() {
            Some(o) => {
                if !o.in_trigger {
                    if (probe.dispatcher.0..probe.dispatcher.1).contains(&pc) {
                        o.t.t_dispatch += dc;
                        o.t.comparisons += (pc == probe.compare_pc) as u32;
                    } else if patch.contains(&pc) {
                        o.t.t_patch += dc;
                        o.t.patched = true;
                    } else {
                        o.t.t_exception += dc;
                    }
                }
                if m.depth() == 0 && out == StepOutcome::Retired {
                    let mut t = o.t;
                    t.cause = o.cause;
                    t.site = o.site;
                    t.t_total = m.cycles - o.start;
                    done.push(t);
                    open = None;
                }
            }
            None if d0 == 0 && m.depth() > 0 => {
                let cause = m.mcause;
                let site = m.mepc;
                // a hook trap starts at its stub, several steps back
                let begin = if cause == Cause::Hook {
                    history
                        .iter()
                        .rev()
                        .find(|(p, _)| *p == site.wrapping_sub(probe.stub_len))
                        .map(|&(_, c)| c)
                        .unwrap_or(c0)
                } else {
                    c0
                };
                open = Some(Open {
                    cause,
                    site,
                    start: begin,
                    in_trigger: true,
                    t: TrapTiming {
                        cause,
                        site,
                        t_trigger: 0,
                        t_exception: 0,
                        t_dispatch: 0,
                        t_patch: 0,
                        t_total: 0,
                        comparisons: 0,
                        patched: false,
                    },
                });
            }
            None => {
                if history.len() == 32 {
                    history.pop_front();
                }
                history.push_back((pc, c0));
            }
        }
        match out {
            StepOutcome::Halted | StepOutcome::WatchdogReset => break,
            StepOutcome::Idle if m.input_pending() == 0 && open.is_none() => break,
            _ => {}
        }
    }
    // collect the events without executing anything
    let trace = m.run(Stop::cycles(0));
    (trace, done)
}

#[derive(Debug, Error)]
pub enum MeasureError {
    #[error(transparent)]
    Link(#[from] LinkError),
    #[error(transparent)]
    Host(#[from] HostError),
    #[error("patch build failed: {0}")]
    Patch(String),
    #[error("machine: {0}")]
    Machine(#[from] crate::machine::MachineError),
    #[error("measurement incomplete: {0}")]
    Incomplete(String),
}

/// Number of hookable sites in the measurement firmware; also the table size.
pub const BENCH_SITES: usize = layout::TABLE_CAPACITY;

/// Measurement firmware: a function of `n` hook-guarded NOPs, run once per
/// input packet. The watchdog is off so long runs do not reset.
pub fn bench_source(n: usize) -> String {
    let mut s = String::from(
        ".wdt 0
.section .text code TEXT_BASE
main:
    lui r14, %hi(MMIO)
loop:
.range idle
    idle
.endrange idle
    lw r10, IN(r14)
    beqz r10, loop
    lw r11, IN(r14)
    call bench
    sw r10, OUT(r14)
    j loop
.func bench
    addi sp, sp, -4
    sw r1, 0(sp)
.endprologue
",
    );
    for i in 0..n {
        s.push_str(&format!(".hook {i}\nbench_{i}:\n    nop\n"));
    }
    s.push_str(
        ".epilogue
    lw r1, 0(sp)
    addi sp, sp, 4
    ret
.endfunc
.section .data data DATA_BASE
    .space 4
",
    );
    s
}

/// A booted measurement device plus what was installed on it.
pub struct BenchRig {
    pub firmware: Firmware,
    pub device: SimDevice,
    pub probe: PhaseProbe,
    pub bundle: PatchBundle,
}

/// Site `i` of the measurement firmware (the NOP after its stub).
pub fn bench_site(fw: &Firmware, i: usize) -> u32 {
    fw.symbol(&format!("bench_{i}")).expect("bench site label")
}

/// Installs an empty pass-through patch at the first `k` sites. `kinds`
/// picks the trigger per site.
pub fn bench_rig(
    profile: &ArchProfile,
    k: usize,
    kinds: impl Fn(usize) -> TriggerKind,
) -> Result<BenchRig, MeasureError> {
    let fw = runtime::link(&bench_source(BENCH_SITES), profile, layout::SRAM_TEXT_BASE)?;
    let mut dev = SimDevice::new(&fw)?;
    dev.run_to_idle(100_000);
    let mut client = HostClient::new(dev);
    let info = client.hello()?;
    let mut alloc = PatchAllocator::with_free(info.free_patch_bytes);
    let map = crate::analysis::mapping::mapping_for(&fw.sidecar, &fw.image, &fw.layout, bench_site(&fw, 0), &[])
        .map_err(|e| MeasureError::Patch(e.to_string()))?;
    let mut bundle = PatchBundle::default();
    for i in 0..k {
        let site = bench_site(&fw, i);
        let ra = RaTargets::resolve(site, &fw.image, &fw.sidecar, None);
        let bin = compile_str("return_pass", &map, &ra, &BTreeMap::new())
            .map_err(|e| MeasureError::Patch(e.to_string()))?;
        let patch_addr = bundle
            .place(&mut alloc, &bin.code)
            .map_err(|e| MeasureError::Patch(e.to_string()))?;
        let len = fw.image.instr_length_at(site).expect("nop decodes");
        bundle.nodes.push(BundleNode {
            update_addr: site,
            trigger: kinds(i),
            strategy: Strategy::Pass,
            patch_addr,
            code: bin.code,
            original: fw.image.read(site, len).expect("site in image").to_vec(),
            hook_slot: fw.sidecar.hook_at(site).map(|h| h.slot).unwrap_or(0),
        });
    }
    client.send_bundle(&bundle)?;
    Ok(BenchRig {
        probe: PhaseProbe::new(&fw),
        firmware: fw,
        device: client.into_transport(),
        bundle,
    })
}

impl BenchRig {
    /// Runs `bench` once and returns the per-trap split.
    pub fn run_once(&mut self) -> (Trace, Vec<TrapTiming>) {
        self.device.machine.push_input(&[1, 0]);
        run_probed(&mut self.device.machine, &self.probe, 10_000_000)
    }
}

/// Profile constants for the verifier, measured on the simulator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Calibration {
    pub profile: &'static str,
    pub t_trigger: BTreeMap<TriggerKind, u64>,
    pub t_exception: u64,
    /// Dispatcher cost with a full table, over every installed entry.
    pub t_dispatch_worst: u64,
    pub max_comparisons: u32,
    /// Dispatcher cost is `dispatch_fixed + dispatch_per_compare * k` for a
    /// hit after `k` comparisons; calibration checks every sample fits.
    pub dispatch_fixed: u64,
    pub dispatch_per_compare: u64,
    pub instr_cost: u64,
}

impl Calibration {
    pub fn model(&self, trigger: TriggerKind) -> TimingModel {
        TimingModel {
            t_trigger: self.t_trigger[&trigger],
            t_exception: self.t_exception,
            t_dispatch_worst: self.t_dispatch_worst,
            instr_cost: self.instr_cost,
        }
    }

    /// Dispatcher cycles for a hit found after `comparisons` probes.
    pub fn dispatch_cycles(&self, comparisons: u32) -> u64 {
        self.dispatch_fixed + self.dispatch_per_compare * comparisons as u64
    }
}

/// Trigger mix used for calibration: every comparator, a few hooks, and
/// software breakpoints for the rest of the table.
pub fn calibration_kind(hw: usize) -> impl Fn(usize) -> TriggerKind {
    move |i| {
        if i < hw {
            TriggerKind::HwBp
        } else if i < hw + 4 {
            TriggerKind::Hook
        } else {
            TriggerKind::SwBp
        }
    }
}

/// Fills the table with empty patches, triggers each once and takes the
/// maximum of every phase.
pub fn calibrate(profile: &ArchProfile) -> Result<Calibration, MeasureError> {
    let hw = profile.hw_bp_count.min(4);
    let mut rig = bench_rig(profile, BENCH_SITES, calibration_kind(hw))?;
    let (trace, timings) = rig.run_once();
    if timings.len() != BENCH_SITES || trace.has_fault() || trace.has_watchdog_reset() {
        return Err(MeasureError::Incomplete(format!(
            "{} of {BENCH_SITES} traps timed",
            timings.len()
        )));
    }
    let mut t_trigger = BTreeMap::new();
    for t in &timings {
        let kind = match t.cause {
            Cause::HwBreak => TriggerKind::HwBp,
            Cause::SwBreak => TriggerKind::SwBp,
            Cause::Hook => TriggerKind::Hook,
            c => return Err(MeasureError::Incomplete(format!("unexpected trap {c:?}"))),
        };
        let e = t_trigger.entry(kind).or_insert(0);
        *e = (*e).max(t.t_trigger);
    }
    let (lo, hi) = (
        timings.iter().min_by_key(|t| t.comparisons).expect("64 samples"),
        timings.iter().max_by_key(|t| t.comparisons).expect("64 samples"),
    );
    if hi.comparisons == lo.comparisons {
        return Err(MeasureError::Incomplete("one probe depth only".into()));
    }
    let per = (hi.t_dispatch - lo.t_dispatch) / (hi.comparisons - lo.comparisons) as u64;
    let fixed = lo.t_dispatch - per * lo.comparisons as u64;
    if let Some(t) = timings
        .iter()
        .find(|t| t.t_dispatch != fixed + per * t.comparisons as u64)
    {
        return Err(MeasureError::Incomplete(format!(
            "dispatch cost {} at {} comparisons is off the linear fit",
            t.t_dispatch, t.comparisons
        )));
    }
    Ok(Calibration {
        profile: profile.name,
        dispatch_fixed: fixed,
        dispatch_per_compare: per,
        t_trigger,
        t_exception: timings.iter().map(|t| t.t_exception).max().unwrap_or(0),
        t_dispatch_worst: timings.iter().map(|t| t.t_dispatch).max().unwrap_or(0),
        max_comparisons: timings.iter().map(|t| t.comparisons).max().unwrap_or(0),
        instr_cost: profile.instr_cost,
    })
}

/// [`calibrate`], computed once per profile per process.
pub fn calibration(profile: &ArchProfile) -> Result<Calibration, MeasureError> {
    static CACHE: OnceLock<Mutex<BTreeMap<&'static str, Calibration>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(BTreeMap::new()));
    if let Some(c) = cache.lock().expect("calibration cache").get(profile.name) {
        return Ok(c.clone());
    }
    let c = calibrate(profile)?;
    cache
        .lock()
        .expect("calibration cache")
        .insert(profile.name, c.clone());
    Ok(c)
}
