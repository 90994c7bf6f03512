//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{self, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spatch::asm;
use spatch::corpus::{self, InputKind};
use spatch::dispatcher::{PatchEntry, PatchTable, Strategy, TriggerKind};
use spatch::isa::{encode_all, BranchCond, ImmOp, Instruction, Reg};
use spatch::layout;
use spatch::machine::{ArchProfile, Event, Machine, Stop};
use spatch::measure::{self, bench_rig, bench_site, calibration_kind, TrapTiming, BENCH_SITES};
use spatch::parallel::par_map;
use spatch::patchgen::script::ReturnKind;
use spatch::patchgen::{compile_str, compute_ra, MemRegion, PatchAllocator, PatchBinary};
use spatch::scenario::{self, MatrixCell, ScenarioReport};
use spatch::updsvc::msg::{DeviceInfo, MemPoke, StatusEntry};
use spatch::updsvc::{HostClient, HostError, Message, NackReason, PatchBundle, PatchList, PatchNode, Transport};
use spatch::verifier::{admit, structural_check, Reason};

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)*) => {
        if !$cond {
            return Err(format!($($fmt)*));
        }
    };
}

struct Matrix {
    cells: Vec<MatrixCell>,
    elapsed: Duration,
}

fn matrix() -> &'static Matrix {
    static M: OnceLock<Matrix> = OnceLock::new();
    M.get_or_init(|| {
        let t0 = Instant::now();
        let cells = scenario::run_matrix(&corpus::all());
        Matrix {
            cells,
            elapsed: t0.elapsed(),
        }
    })
}

fn reports() -> Result<Vec<&'static ScenarioReport>, String> {
    matrix()
        .cells
        .iter()
        .map(|c| {
            c.result
                .as_ref()
                .map_err(|e| format!("{} {:?} {}: {e}", c.scenario, c.trigger, c.profile))
        })
        .collect()
}

/// Which trigger each of the 64 sites uses in a sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Mix {
    AllSw,
    AllHook,
    /// Four hardware comparators, then hooks and software breakpoints.
    Mixed,
}

impl Mix {
    const ALL: [Mix; 3] = [Mix::AllSw, Mix::AllHook, Mix::Mixed];

    fn kind(self, i: usize) -> TriggerKind {
        match self {
            Mix::AllSw => TriggerKind::SwBp,
            Mix::AllHook => TriggerKind::Hook,
            Mix::Mixed => calibration_kind(4)(i),
        }
    }
}

struct Sweep {
    profile: &'static str,
    mix: Mix,
    k: usize,
    table: PatchTable,
    timings: Vec<TrapTiming>,
}

/// Every profile × mix × patch count 1..64, each run once over all sites.
fn sweeps() -> &'static Vec<Sweep> {
    static S: OnceLock<Vec<Sweep>> = OnceLock::new();
    S.get_or_init(|| {
        let mut jobs = Vec::new();
        for p in ArchProfile::all() {
            for mix in Mix::ALL {
                for k in 1..=BENCH_SITES {
                    jobs.push((p.clone(), mix, k));
                }
            }
        }
        par_map(&jobs, |(p, mix, k)| {
            let mut rig = bench_rig(p, *k, |i| mix.kind(i)).expect("bench rig deploys");
            let mut table = PatchTable::new();
            for n in &rig.bundle.nodes {
                table
                    .install(PatchEntry {
                        update_addr: n.update_addr,
                        patch_addr: n.patch_addr,
                        size: n.code.len() as u32,
                        trigger: n.trigger,
                        strategy: n.strategy,
                    })
                    .unwrap();
            }
            let (_, timings) = rig.run_once();
            Sweep {
                profile: p.name,
                mix: *mix,
                k: *k,
                table,
                timings,
            }
        })
    })
}

fn equivalence() -> Check {
    let m = matrix();
    let reports = reports()?;
    let mut triggers: BTreeMap<&str, BTreeSet<TriggerKind>> = BTreeMap::new();
    for r in &reports {
        for k in InputKind::ALL {
            let o = r.outcome(k);
            ensure!(
                o.patched == o.fixed,
                "{} {:?} {} {}: patched trace differs from the fixed build",
                r.scenario,
                r.trigger,
                r.profile,
                k.name()
            );
        }
        let e = r.outcome(InputKind::Exploit);
        ensure!(e.vuln != e.fixed, "{}: exploit does not change the unpatched trace", r.scenario);
        triggers.entry(r.scenario).or_default().insert(r.trigger);
    }
    let scenarios = triggers.len();
    ensure!(scenarios >= 6, "only {scenarios} scenarios");
    ensure!(triggers.values().all(|t| t.len() >= 2), "a scenario ran with fewer than two triggers");
    ensure!(m.elapsed < Duration::from_secs(10), "matrix took {:?}", m.elapsed);
    Ok(format!(
        "{} cells ({scenarios} scenarios x 2 profiles x 3 triggers) repaired; {:.2?}",
        reports.len(),
        m.elapsed
    ))
}

fn handler_cost() -> Check {
    let mut per_profile: BTreeMap<&str, BTreeSet<u64>> = BTreeMap::new();
    let mut seen: BTreeMap<&str, BTreeSet<TriggerKind>> = BTreeMap::new();
    let mut traps = 0usize;
    for s in sweeps() {
        let patched: Vec<_> = s.timings.iter().filter(|t| t.patched).collect();
        ensure!(patched.len() == s.k, "{} {:?} k={}: {} traps", s.profile, s.mix, s.k, patched.len());
        for t in patched {
            per_profile.entry(s.profile).or_default().insert(t.t_exception);
            seen.entry(s.profile).or_default().insert(s.mix.kind(bench_index(s, t.site)));
            traps += 1;
        }
    }
    for r in reports()? {
        for o in &r.outcomes {
            for t in o.timings.iter().filter(|t| t.patched) {
                per_profile.entry(r.profile).or_default().insert(t.t_exception);
                seen.entry(r.profile).or_default().insert(r.trigger);
                traps += 1;
            }
        }
    }
    let mut parts = Vec::new();
    for (p, vals) in &per_profile {
        ensure!(vals.len() == 1, "{p}: T_exception takes values {vals:?}");
        ensure!(seen[p].len() == 3, "{p}: not every trigger kind observed");
        parts.push(format!("{p}={}", vals.iter().next().unwrap()));
    }
    ensure!(per_profile.len() == 2, "profiles missing");
    Ok(format!("T_exception {} over {traps} traps", parts.join(" ")))
}

fn bench_index(s: &Sweep, site: u32) -> usize {
    s.table
        .entries()
        .iter()
        .position(|e| e.update_addr == site)
        .expect("trap at an installed site")
}

fn latency_bound() -> Check {
    let mut worst: BTreeMap<&str, u64> = BTreeMap::new();
    for s in sweeps().iter().filter(|s| s.k == BENCH_SITES) {
        ensure!(s.table.len() == 64, "table holds {}", s.table.len());
        for t in s.timings.iter().filter(|t| t.patched) {
            ensure!(
                t.t_total <= 260,
                "{} {:?}: T_total {} at {:#x}",
                s.profile,
                s.mix,
                t.t_total,
                t.site
            );
            let w = worst.entry(s.profile).or_default();
            *w = (*w).max(t.t_total);
        }
    }
    ensure!(worst.len() == 2, "profiles missing");
    Ok(format!("64 empty patches, worst T_total {worst:?} <= 260"))
}

/// ceil(log2 n) + 1, by repeated doubling.
fn log_bound(n: usize) -> u32 {
    let mut c = 0;
    let mut cap = 1usize;
    while cap < n {
        cap *= 2;
        c += 1;
    }
    c + 1
}

fn dispatch_scaling() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0004);
    let mut worst_ratio = 0u32;
    for _ in 0..10_000 {
        let n = rng.gen_range(1..=64usize);
        let mut keys = BTreeSet::new();
        while keys.len() < n {
            keys.insert(layout::SRAM_BASE + 2 * rng.gen_range(0..0x2000u32));
        }
        let entries: Vec<PatchEntry> = keys
            .iter()
            .map(|&k| PatchEntry {
                update_addr: k,
                patch_addr: layout::PATCH_BASE,
                size: 8,
                trigger: TriggerKind::SwBp,
                strategy: Strategy::Pass,
            })
            .collect();
        let mut table = PatchTable::new();
        // insertion order shuffled; the table sorts
        let mut order = entries.clone();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        for e in order {
            table.install(e).unwrap();
        }
        let probe = if rng.gen_bool(0.5) {
            entries[rng.gen_range(0..n)].update_addr
        } else {
            layout::SRAM_BASE + 2 * rng.gen_range(0..0x2000u32)
        };
        let linear = entries.iter().find(|e| e.update_addr == probe);
        let got = table.lookup(probe);
        ensure!(got.entry == linear, "lookup({probe:#x}) disagrees with a linear scan (n={n})");
        ensure!(got.comparisons <= log_bound(n), "{} comparisons for n={n}", got.comparisons);
        worst_ratio = worst_ratio.max(got.comparisons);
    }
    // The device routine, measured, for every n.
    let mut device_worst = BTreeMap::new();
    for s in sweeps().iter().filter(|s| s.mix == Mix::AllSw) {
        for t in s.timings.iter().filter(|t| t.patched) {
            let host = s.table.lookup(t.site).comparisons;
            ensure!(t.comparisons == host, "device {} vs host {host} comparisons", t.comparisons);
            ensure!(t.comparisons <= log_bound(s.k), "device: {} comparisons for n={}", t.comparisons, s.k);
        }
        let w = s.timings.iter().map(|t| t.comparisons).max().unwrap_or(0);
        device_worst.insert(s.k, w);
    }
    ensure!(device_worst.len() == 64, "sweep incomplete");
    Ok(format!(
        "10^4 probes agree; max comparisons host {worst_ratio}, device at n=64 {}",
        device_worst[&64]
    ))
}

const RA_FIXTURE: &str = "
.section .text code 0x08004C00
.func handle_packet
    addi sp, sp, -8
    sw r1, 0(sp)
.endprologue
.org 0xCA
wide:
    add r6, r6, r7
narrow:
    c.mv r10, r6
.org 0x178
.epilogue
    lw r1, 0(sp)
    addi sp, sp, 8
    ret
.endfunc
";

fn resume_targets() -> Check {
    let a = asm::assemble(RA_FIXTURE, &[]).map_err(|e| e.to_string())?;
    let image = a.to_image();
    let wide = a.symbol("wide").unwrap();
    let narrow = a.symbol("narrow").unwrap();
    ensure!(wide == 0x0800_4CCA, "fixture misplaced: {wide:#x}");
    let ra = |k, at| compute_ra(k, at, &image, &a.sidecar, None).map_err(|e| e.to_string());
    let caller = ra(ReturnKind::RedirectCaller, wide)?;
    ensure!(caller == 0x0800_4D78, "caller ra {caller:#x}");
    ensure!(caller - wide == 174, "delta {}", caller - wide);
    ensure!(ra(ReturnKind::Pass, wide)? - wide == 4, "pass offset for a 4-byte instruction");
    ensure!(ra(ReturnKind::Pass, narrow)? - narrow == 2, "pass offset for a 2-byte instruction");

    let mut by_kind: BTreeMap<&str, usize> = BTreeMap::new();
    for r in reports()? {
        for s in r.strategies() {
            let k = match s {
                Strategy::Pass => "pass",
                Strategy::RedirectSkip(_) => "skip",
                Strategy::RedirectCaller(_) => "caller",
            };
            ensure!(r.repaired(), "{} with {k} diverges from the fixed build", r.scenario);
            *by_kind.entry(k).or_default() += 1;
        }
    }
    ensure!(by_kind.len() == 3, "strategies exercised: {by_kind:?}");
    Ok(format!("delta 174, pass +4/+2; resumed runs match fixed for {by_kind:?}"))
}

fn mapping() -> Check {
    let mut jobs = Vec::new();
    for sc in corpus::all() {
        for p in ArchProfile::all() {
            jobs.push((sc, p));
        }
    }
    let results = par_map(&jobs, |(sc, p)| mapping_soundness(sc, p));
    let mut states = 0;
    let mut skipped = Vec::new();
    for (r, (sc, p)) in results.into_iter().zip(&jobs) {
        match r? {
            0 => skipped.push(format!("{}/{}", sc.name, p.name)),
            n => states += n,
        }
    }
    Ok(format!(
        "{states} randomized trap states, all slot reads equal live registers (no code patch: {})",
        skipped.join(", ")
    ))
}

/// Randomizes the registers at each update point, lets the real trigger
/// fire and compares the frame seen at dispatcher entry with the values
/// the registers held. Returns the number of states checked.
fn mapping_soundness(sc: &corpus::Scenario, p: &ArchProfile) -> Result<usize, String> {
    let b = scenario::build(sc, p, layout::SRAM_TEXT_BASE).map_err(|e| e.to_string())?;
    let cal = measure::calibration(p).map_err(|e| e.to_string())?;
    let fw = &b.vuln;
    let mut snaps = Vec::new();
    for trigger in TriggerKind::ALL {
        let d = scenario::plan(sc, &b, trigger, layout::PATCH_SIZE, &cal).map_err(|e| e.to_string())?;
        let mut c = HostClient::new(scenario::boot(fw).map_err(|e| e.to_string())?);
        c.send_bundle(&d.bundle).map_err(|e| e.to_string())?;
        snaps.push((trigger, d, c.into_transport().machine));
    }
    if snaps[0].1.patches.is_empty() {
        return Ok(0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0006 ^ sc.name.len() as u64);
    let dispatcher = fw.runtime.dispatcher;
    for i in 0..1000 {
        let (trigger, d, snap) = &snaps[i % 3];
        let patch = &d.patches[rng.gen_range(0..d.patches.len())];
        let site = patch.update_addr;
        let mut m: Machine = snap.clone();
        let mut live = [0u32; 16];
        for r in 1..16 {
            if r != Reg::SP.index() {
                m.regs[r] = rng.gen();
            }
            live[r] = m.regs[r];
        }
        // Hook stubs sit just before the site and clobber r1 and r9.
        let (start, clobbered): (u32, &[usize]) = match trigger {
            TriggerKind::Hook => (site - 16, &[1, 9]),
            _ => (site, &[]),
        };
        m.pc = start;
        let tr = m.run(Stop::pc(dispatcher, 5_000));
        let traps: Vec<u32> = tr
            .events
            .iter()
            .filter_map(|(_, e)| match e {
                Event::Trap { pc, .. } => Some(*pc),
                _ => None,
            })
            .collect();
        ensure!(
            m.pc == dispatcher && traps == [site],
            "{} {trigger:?} {}: state {i} did not trap once at {site:#x} into the dispatcher (pc {:#x}, traps {traps:x?})",
            sc.name,
            p.name,
            m.pc
        );
        let base = m.reg(Reg::RET);
        let map = &patch.mapping;
        for (var, row) in &map.rows {
            ensure!(
                !clobbered.contains(&row.reg.index()),
                "{}: {var} lives in {} which the hook stub clobbers",
                sc.name,
                row.reg
            );
            let v = fw.layout.read(&mut m, base, row.slot).map_err(|e| e.to_string())?;
            ensure!(v == live[row.reg.index()], "{} {trigger:?}: R({var}) read {v:#x}, live {:#x}", sc.name, live[row.reg.index()]);
        }
        for (&reg, &slot) in &map.reg_slots {
            if reg == Reg::SP || clobbered.contains(&reg.index()) {
                continue;
            }
            let v = fw.layout.read(&mut m, base, slot).map_err(|e| e.to_string())?;
            ensure!(v == live[reg.index()], "{} {trigger:?}: R2({reg}) read {v:#x}", sc.name);
        }
        let ra = fw.layout.read(&mut m, base, map.ra_slot).map_err(|e| e.to_string())?;
        ensure!(ra == site, "{} {trigger:?}: ra slot {ra:#x}, site {site:#x}", sc.name);
    }
    Ok(1000)
}

fn seeded_unsafe() -> Vec<(&'static str, Vec<Instruction>, fn(&Reason) -> bool)> {
    let r = Reg::r;
    let nop = Instruction::Nop;
    let tramp = Instruction::TRAMPOLINE;
    vec![
        (
            "call",
            vec![Instruction::Jal { rd: Reg::LINK, offset: 8 }, nop, nop, tramp],
            |x| matches!(x, Reason::Call { .. }),
        ),
        (
            "unbounded loop",
            vec![
                Instruction::OpImm { op: ImmOp::Addi, rd: r(5), rs1: r(5), imm: 1 },
                Instruction::Branch { cond: BranchCond::Ne, rs1: r(5), rs2: r(0), offset: -4 },
                nop,
                tramp,
            ],
            |x| matches!(x, Reason::UnboundedLoop { .. }),
        ),
        (
            "sp write",
            vec![Instruction::OpImm { op: ImmOp::Addi, rd: Reg::SP, rs1: Reg::SP, imm: -4 }, nop, tramp],
            |x| matches!(x, Reason::Dangerous { .. }),
        ),
        (
            "missing NOP epilogue",
            vec![Instruction::OpImm { op: ImmOp::Addi, rd: r(5), rs1: r(0), imm: 1 }, tramp],
            |x| matches!(x, Reason::BadEpilogue),
        ),
    ]
}

fn verifier_gate() -> Check {
    for (name, code, want) in seeded_unsafe() {
        let bin = PatchBinary {
            code: encode_all(&code).unwrap(),
            annotations: vec![],
            strategy: Strategy::Pass,
            worst_case_cycles: None,
        };
        match structural_check(&bin) {
            Err(ref x) if want(x) => {}
            other => return Err(format!("{name}: structural_check gave {other:?}")),
        }
    }

    // Over budget: a long bounded loop, forced onto a device anyway.
    let p = ArchProfile::soft16();
    let sc = corpus::by_name("integer_overflow").unwrap();
    let b = scenario::build(&sc, &p, layout::SRAM_TEXT_BASE).map_err(|e| e.to_string())?;
    let cal = measure::calibration(&p).map_err(|e| e.to_string())?;
    let d = scenario::plan(&sc, &b, TriggerKind::SwBp, layout::PATCH_SIZE, &cal).map_err(|e| e.to_string())?;
    let planned = &d.patches[0];
    let slow = compile_str(
        "repeat 5000 { a = a + 1 }\nreturn_pass",
        &planned.mapping,
        &planned.ra,
        &BTreeMap::new(),
    )
    .map_err(|e| e.to_string())?;
    ensure!(structural_check(&slow).is_ok(), "bounded loop should be structurally fine");
    let budget = scenario::budget_for(&b.vuln).map_err(|e| e.to_string())?;
    let v = admit(&slow, &cal.model(TriggerKind::SwBp), &budget);
    ensure!(matches!(v.reason, Some(Reason::OverBudget { .. })), "over-budget patch admitted: {v}");
    let mut bundle = PatchBundle::default();
    let mut alloc = PatchAllocator::with_free(layout::PATCH_SIZE);
    let node = scenario::node(&b.vuln, &mut alloc, &bundle, planned.update_addr, TriggerKind::SwBp, &slow)
        .map_err(|e| e.to_string())?;
    bundle.nodes.push(node);
    let (trace, _) = scenario::deploy_and_run(&b.vuln, &bundle, &sc.input(InputKind::Benign)).map_err(|e| e.to_string())?;
    ensure!(trace.has_watchdog_reset(), "forced over-budget patch did not reset the watchdog");

    // Every corpus patch: admitted, bound holds, exact when branch-free.
    let (mut checked, mut exact) = (0, 0);
    let mut patches = BTreeSet::new();
    for r in reports()? {
        let cal = measure::calibration(&ArchProfile::by_name(r.profile).unwrap()).map_err(|e| e.to_string())?;
        for pp in &r.deployment.patches {
            ensure!(pp.verdict.admitted(), "{}: {}", r.scenario, pp.verdict);
            patches.insert(r.scenario);
        }
        for o in &r.outcomes {
            for t in o.timings.iter().filter(|t| t.patched) {
                let pp = r.deployment.patches.iter().find(|p| p.update_addr == t.site).unwrap();
                ensure!(
                    pp.verdict.t_total >= t.t_total,
                    "{} {:?} {}: predicted {} < measured {}",
                    r.scenario,
                    r.trigger,
                    r.profile,
                    pp.verdict.t_total,
                    t.t_total
                );
                if pp.binary.is_straight_line() {
                    let pred = r.deployment.predicted_total(&cal, t.site).unwrap();
                    ensure!(pred == t.t_total, "{}: branch-free prediction {pred} vs measured {}", r.scenario, t.t_total);
                    exact += 1;
                }
                checked += 1;
            }
        }
    }
    Ok(format!(
        "4 unsafe rejected; over-budget {} -> WatchdogReset; {} scenarios' patches admitted, {checked} traps bounded, {exact} exact",
        v.t_total,
        patches.len()
    ))
}

fn global_plans() -> Check {
    let globals = ["global_size", "global_value", "global_removed", "global_added"];
    let mut cells = 0;
    for r in reports()? {
        if !globals.contains(&r.scenario) {
            continue;
        }
        ensure!(r.repaired(), "{} {:?} {}: not equivalent to the fixed build", r.scenario, r.trigger, r.profile);
        cells += 1;
        if r.scenario != "global_size" {
            continue;
        }
        let sc = corpus::by_name(r.scenario).unwrap();
        let p = ArchProfile::by_name(r.profile).unwrap();
        let b = scenario::build(&sc, &p, layout::SRAM_TEXT_BASE).map_err(|e| e.to_string())?;
        let old = b.vuln.sidecar.global("name").ok_or("old global missing")?;
        let (lo, hi) = (old.addr, old.addr + old.size);
        for w in &r.deployment.bundle.writes {
            if w.region == MemRegion::Data {
                ensure!(
                    w.addr >= lo && w.addr + w.bytes.len() as u32 <= hi,
                    "write {:#x}+{} leaves [{lo:#x},{hi:#x})",
                    w.addr,
                    w.bytes.len()
                );
            }
        }
        // And on the device: nothing in .data outside the old extent moved.
        let before = scenario::boot(&b.vuln).map_err(|e| e.to_string())?;
        let mut c = HostClient::new(scenario::boot(&b.vuln).map_err(|e| e.to_string())?);
        c.send_bundle(&r.deployment.bundle).map_err(|e| e.to_string())?;
        let after = c.into_transport();
        let span = layout::PATCH_BASE - layout::DATA_BASE;
        let x = before.machine.peek(layout::DATA_BASE, span).unwrap();
        let y = after.machine.peek(layout::DATA_BASE, span).unwrap();
        for (i, (a, b)) in x.iter().zip(y).enumerate() {
            let addr = layout::DATA_BASE + i as u32;
            ensure!(a == b || (lo..hi).contains(&addr), "deployment changed .data at {addr:#x}");
        }
    }
    ensure!(cells == globals.len() * 6, "{cells} global cells");
    Ok(format!("{cells} cells over 4 global cases equivalent; SizeIncrease stays in the old extent"))
}

fn random_message(rng: &mut ChaCha8Rng) -> Message {
    let bytes = |rng: &mut ChaCha8Rng, max: usize| -> Vec<u8> {
        let n = rng.gen_range(0..=max);
        (0..n).map(|_| rng.gen()).collect()
    };
    match rng.gen_range(0..7) {
        0 => Message::Hello(None),
        1 => Message::Hello(Some(DeviceInfo {
            profile: ["soft16", "hard16", ""][rng.gen_range(0..3)].to_string(),
            table_capacity: rng.gen(),
            installed: rng.gen(),
            free_patch_bytes: rng.gen(),
            free_comparators: rng.gen(),
        })),
        2 => Message::PatchList(PatchList {
            nodes: (0..rng.gen_range(0..5))
                .map(|_| {
                    let code = rng.gen_bool(0.7).then(|| bytes(rng, 96));
                    PatchNode {
                        update_addr: rng.gen(),
                        patch_addr: rng.gen(),
                        size: code.as_ref().map(|c| c.len() as u32).unwrap_or_else(|| rng.gen()),
                        flags: rng.gen_range(0..16),
                        strategy_arg: rng.gen(),
                        trigger_arg: rng.gen(),
                        orig_len: rng.gen(),
                        code,
                    }
                })
                .collect(),
            writes: (0..rng.gen_range(0..3))
                .map(|_| MemPoke {
                    addr: rng.gen(),
                    bytes: bytes(rng, 40),
                })
                .collect(),
        }),
        3 => Message::Ack,
        4 => Message::Nack(NackReason::from_u8(rng.gen_range(1..=10)).unwrap()),
        5 => Message::Status(rng.gen_bool(0.3).then_some(()).map_or_else(
            || {
                Some(
                    (0..rng.gen_range(0..10))
                        .map(|_| StatusEntry {
                            update_addr: rng.gen(),
                            patch_addr: rng.gen(),
                            size: rng.gen(),
                            flags: rng.gen(),
                        })
                        .collect(),
                )
            },
            |_| None,
        )),
        _ => Message::Remove {
            update_addr: rng.gen(),
            original: bytes(rng, 4),
        },
    }
}

fn protocol() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0009);
    for i in 0..10_000 {
        let msg = random_message(&mut rng);
        let wire = msg.encode().map_err(|e| e.to_string())?;
        let back = Message::decode(&wire).map_err(|e| format!("message {i}: {e}"))?;
        ensure!(back == msg, "message {i} did not round-trip");
    }

    // Flip every bit of a real install request; the device must answer
    // each with a NACK, change nothing, and keep serving.
    let mut rig = bench_rig(&ArchProfile::soft16(), 2, |_| TriggerKind::SwBp).map_err(|e| e.to_string())?;
    let fw = rig.firmware.clone();
    let mut extra = rig.bundle.clone();
    extra.nodes.truncate(1);
    extra.nodes[0].update_addr = bench_site(&fw, 7);
    extra.nodes[0].original = fw.image.read(bench_site(&fw, 7), 4).unwrap().to_vec();
    extra.nodes[0].patch_addr = layout::PATCH_BASE + 0x1000;
    let wire = Message::PatchList(extra.to_patch_list()).encode().unwrap();
    let (mut bad_crc, mut other_nack) = (0, 0);
    for bit in 0..wire.len() * 8 {
        let mut bad = wire.clone();
        bad[bit / 8] ^= 1 << (bit % 8);
        let reply = Message::decode(&rig.device.transact(&bad).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        match reply {
            Message::Nack(NackReason::BadCrc) => bad_crc += 1,
            Message::Nack(_) => other_nack += 1,
            r => return Err(format!("bit {bit}: corrupted install answered {r:?}")),
        }
        let info = HostClient::new(&mut rig.device).hello().map_err(|e| e.to_string())?;
        ensure!(info.installed == 2, "bit {bit}: table changed");
    }
    HostClient::new(&mut rig.device).send_bundle(&extra).map_err(|e| e.to_string())?;

    // Four comparators, then a fifth request.
    let mut rig = bench_rig(&ArchProfile::hard16(), 4, |_| TriggerKind::HwBp).map_err(|e| e.to_string())?;
    let mut fifth = rig.bundle.clone();
    fifth.nodes.truncate(1);
    fifth.nodes[0].update_addr = bench_site(&rig.firmware, 9);
    fifth.nodes[0].patch_addr = layout::PATCH_BASE + 0x1000;
    match HostClient::new(&mut rig.device).send_bundle(&fifth) {
        Err(HostError::Nack(NackReason::NoComparator)) => {}
        other => return Err(format!("fifth comparator: {other:?}")),
    }
    Ok(format!(
        "10^4 messages round-trip; {} bit flips -> {bad_crc} BadCrc + {other_nack} other NACK, service up; 5th HwBp NACKed",
        wire.len() * 8
    ))
}

fn payload_size() -> Check {
    let mut worst = 0.0f64;
    let mut overall = (0usize, 0usize);
    for r in reports()? {
        let sites = r.deployment.patches.len();
        if sites == 0 {
            continue;
        }
        let bytes = r.deployment.bundle.code_bytes();
        overall.0 += bytes;
        overall.1 += sites;
        worst = worst.max(bytes as f64 / sites as f64);
    }
    let mean = overall.0 as f64 / overall.1 as f64;
    ensure!(mean <= 128.0, "mean payload {mean:.1} bytes");
    Ok(format!("mean {mean:.1} bytes per patch site (worst cell {worst:.1})"))
}

fn main() {
    let checks: [(u32, &str, fn() -> Check); 10] = [
        (1, "oracle equivalence", equivalence),
        (2, "constant handler cost", handler_cost),
        (3, "latency budget", latency_bound),
        (4, "dispatch scaling", dispatch_scaling),
        (5, "resume arithmetic", resume_targets),
        (6, "mapping soundness", mapping),
        (7, "verifier gate", verifier_gate),
        (8, "global-variable plans", global_plans),
        (9, "protocol robustness", protocol),
        (10, "patch size", payload_size),
    ];
    // The first check runs the matrix cold, so its time includes calibration.
    let mut failed = 0;
    for (n, name, f) in checks {
        let t0 = Instant::now();
        let r = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let dt = t0.elapsed();
        match r {
            Ok(msg) => println!("PASS {n:>2} {name}: {msg} [{dt:.1?}]"),
            Err(msg) => {
                failed += 1;
                println!("FAIL {n:>2} {name}: {msg} [{dt:.1?}]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} of 10 criteria failed");
        std::process::exit(1);
    }
    println!("all 10 criteria passed");
}
