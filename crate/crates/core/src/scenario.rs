//! End-to-end repair of one corpus scenario: build both firmware versions,
//! diff them, generate and verify patches, ship them to a simulated board
//! and compare its behavior against the fixed build.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::analysis::diff::{bindiff, DiffReport};
use crate::analysis::mapping::{mapping_for, MappingTable};
use crate::analysis::update_point::{check_update_point, select_update_point, Rejection};
use crate::corpus::{CodePlan, InputKind, Scenario};
use crate::dispatcher::{PatchEntry, PatchTable, Strategy, TriggerKind};
use crate::machine::{ArchProfile, Machine, Observable, Stop, Trace};
use crate::measure::{self, Calibration, PhaseProbe, TrapTiming};
use crate::patchgen::{
    compile, expand_macro_sites, plan_global_change, resolved_globals, GlobalChangeKind, GlobalEditPlan,
    PatchAllocator, PatchBinary, PatchSource, RaTargets,
};
use crate::runtime::{self, Firmware};
use crate::updsvc::{BundleNode, HostClient, PatchBundle, SimDevice};
use crate::verifier::{admit, Budget, Verdict};

/// Longest kick-to-kick stretch of the corpus firmware's own work, in
/// cycles. The packet loop kicks once per packet and the longest packet
/// handler stays well below this.
pub const CRITICAL_PATH: u64 = 1000;

/// Cycles allowed for boot and for draining one input file.
pub const BOOT_BUDGET: u64 = 100_000;
pub const RUN_BUDGET: u64 = 2_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    Build,
    Diff,
    Calibrate,
    Plan,
    Select,
    Map,
    Compile,
    Verify,
    Deploy,
    Run,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Error)]
pub enum FailureKind {
    #[error("update point rejected: {0}")]
    Rejected(Rejection),
    #[error("patch rejected: {0}")]
    Unsafe(Verdict),
    #[error("{0}")]
    Other(String),
}

#[derive(Debug, Error)]
#[error("{stage} stage: {kind}")]
pub struct ScenarioError {
    pub stage: Stage,
    pub kind: FailureKind,
}

impl ScenarioError {
    fn other(stage: Stage, e: impl fmt::Display) -> Self {
        ScenarioError {
            stage,
            kind: FailureKind::Other(e.to_string()),
        }
    }

    fn rejected(stage: Stage, r: Rejection) -> Self {
        ScenarioError {
            stage,
            kind: FailureKind::Rejected(r),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PatchOrigin {
    /// First divergence of a changed function.
    Divergence,
    /// One expansion site of a changed macro.
    MacroSite,
    /// A reference site of a global that moved or went away.
    Relocation,
}

#[derive(Clone, Debug)]
pub struct PlannedPatch {
    pub update_addr: u32,
    pub origin: PatchOrigin,
    pub binary: PatchBinary,
    pub mapping: MappingTable,
    pub ra: RaTargets,
    pub verdict: Verdict,
}

/// Everything a scenario ships, before it is sent.
#[derive(Clone, Debug)]
pub struct Deployment {
    pub patches: Vec<PlannedPatch>,
    pub plans: Vec<GlobalEditPlan>,
    pub bundle: PatchBundle,
}

impl Deployment {
    /// The table the device holds once the bundle is applied.
    pub fn table(&self) -> PatchTable {
        let mut t = PatchTable::new();
        for n in &self.bundle.nodes {
            t.install(PatchEntry {
                update_addr: n.update_addr,
                patch_addr: n.patch_addr,
                size: n.code.len() as u32,
                trigger: n.trigger,
                strategy: n.strategy,
            })
            .expect("bundle entries are distinct and placed in .patch");
        }
        t
    }

    /// Trap-to-resume cycles predicted for a trap at `site` against the
    /// installed table rather than a full one. Exact when the patch is
    /// straight-line code.
    pub fn predicted_total(&self, cal: &Calibration, site: u32) -> Option<u64> {
        let p = self.patches.iter().find(|p| p.update_addr == site)?;
        let node = self.bundle.nodes.iter().find(|n| n.update_addr == site)?;
        let table = self.table();
        let lookup = table.lookup(site);
        Some(
            cal.t_trigger[&node.trigger]
                + cal.t_exception
                + cal.dispatch_cycles(lookup.comparisons)
                + p.verdict.t_patch,
        )
    }
}

/// Both builds of a scenario for one profile, and their diff.
#[derive(Clone, Debug)]
pub struct Builds {
    pub vuln: Firmware,
    pub fixed: Firmware,
    pub diff: DiffReport,
}

pub fn build(sc: &Scenario, profile: &ArchProfile, text_base: u32) -> Result<Builds, ScenarioError> {
    let link = |fixed| {
        runtime::link(&sc.source(fixed), profile, text_base)
            .map_err(|e| ScenarioError::other(Stage::Build, format!("{} build: {e}", if fixed { "fixed" } else { "vulnerable" })))
    };
    let vuln = link(false)?;
    let fixed = link(true)?;
    let diff = bindiff(&vuln.image, &fixed.image, &vuln.sidecar, &fixed.sidecar)
        .map_err(|e| ScenarioError::other(Stage::Diff, e))?;
    Ok(Builds { vuln, fixed, diff })
}

/// The contents a global should hold once the repair is applied, taken
/// from the fixed build's initial image.
fn global_value(kind: GlobalChangeKind, name: &str, b: &Builds) -> Result<Vec<u8>, ScenarioError> {
    let read = |fw: &Firmware| -> Option<Vec<u8>> {
        let g = fw.sidecar.global(name)?;
        fw.image.read(g.addr, g.size).map(<[u8]>::to_vec)
    };
    let missing = || ScenarioError::other(Stage::Plan, format!("global `{name}` missing from a build"));
    Ok(match kind {
        GlobalChangeKind::Removal => Vec::new(),
        GlobalChangeKind::ValueChange | GlobalChangeKind::Addition => read(&b.fixed).ok_or_else(missing)?,
        GlobalChangeKind::SizeIncrease => {
            let mut v = read(&b.vuln).ok_or_else(missing)?;
            let new = b.fixed.sidecar.global(name).ok_or_else(missing)?.size as usize;
            v.resize(new.max(v.len()), 0);
            v
        }
    })
}

/// Budget from the firmware's watchdog setting and [`CRITICAL_PATH`].
pub fn budget_for(fw: &Firmware) -> Result<Budget, ScenarioError> {
    Budget::new(fw.image.wdt as u64, CRITICAL_PATH)
        .ok_or_else(|| ScenarioError::other(Stage::Verify, "watchdog timeout must exceed the critical path"))
}

/// Generates, verifies and lays out every patch of a scenario. `free` is
/// what the device reports free in `.patch`.
pub fn plan(
    sc: &Scenario,
    b: &Builds,
    trigger: TriggerKind,
    free: u32,
    cal: &Calibration,
) -> Result<Deployment, ScenarioError> {
    let fw = &b.vuln;
    let mut alloc = PatchAllocator::with_free(free);
    let mut plans = Vec::new();
    if let Some(g) = sc.global {
        let value = global_value(g.kind, g.name, b)?;
        plans.push(
            plan_global_change(g.kind, g.name, &value, &fw.sidecar, &mut alloc)
                .map_err(|e| ScenarioError::other(Stage::Plan, e))?,
        );
    }
    let globals = resolved_globals(&fw.sidecar, &plans);
    let parse = || -> Result<PatchSource, ScenarioError> {
        let text = sc
            .patch
            .ok_or_else(|| ScenarioError::other(Stage::Compile, "scenario has no patch script"))?;
        PatchSource::parse(text).map_err(|e| ScenarioError::other(Stage::Compile, e))
    };
    let mapping = |addr, vars: &[&str]| {
        mapping_for(&fw.sidecar, &fw.image, &fw.layout, addr, vars).map_err(|e| ScenarioError::other(Stage::Map, e))
    };

    let mut pending: Vec<(u32, PatchOrigin, PatchBinary, MappingTable, RaTargets)> = Vec::new();
    match sc.code {
        CodePlan::Divergence { function, vars } => {
            let src = parse()?;
            let up = select_update_point(&b.diff, function, &fw.sidecar, vars, trigger, &fw.image)
                .map_err(|r| ScenarioError::rejected(Stage::Select, r))?;
            let map = mapping(up.addr, vars)?;
            let ra = RaTargets::resolve(up.addr, &fw.image, &fw.sidecar, b.diff.function(function));
            let bin = compile(&src, &map, &ra, &globals).map_err(|e| ScenarioError::other(Stage::Compile, e))?;
            pending.push((up.addr, PatchOrigin::Divergence, bin, map, ra));
        }
        CodePlan::MacroSites { name, vars } => {
            let src = parse()?;
            let sites = fw
                .sidecar
                .macro_sites(name)
                .ok_or_else(|| ScenarioError::other(Stage::Select, format!("macro `{name}` has no sites")))?;
            let mut per_site = BTreeMap::new();
            for &site in sites {
                check_update_point(site, &fw.sidecar, vars, trigger, &fw.image)
                    .map_err(|r| ScenarioError::rejected(Stage::Select, r))?;
                let map = mapping(site, vars)?;
                let ra = RaTargets::resolve(site, &fw.image, &fw.sidecar, None);
                per_site.insert(site, (map, ra));
            }
            let exp = expand_macro_sites(name, &fw.sidecar, &src, &per_site, &globals)
                .map_err(|e| ScenarioError::other(Stage::Compile, e))?;
            for (site, strategy) in exp.sites {
                let (map, ra) = per_site.remove(&site).expect("site mapped above");
                let mut bin = exp.body.clone();
                bin.strategy = strategy;
                pending.push((site, PatchOrigin::MacroSite, bin, map, ra));
            }
        }
        CodePlan::DataOnly => {}
    }

    for p in &plans {
        match p.kind {
            GlobalChangeKind::SizeIncrease => {
                for &site in &p.companion_sites {
                    let gref = fw
                        .sidecar
                        .grefs
                        .iter()
                        .find(|g| g.site == site)
                        .expect("companion sites come from grefs");
                    check_update_point(site, &fw.sidecar, &[], trigger, &fw.image)
                        .map_err(|r| ScenarioError::rejected(Stage::Select, r))?;
                    let map = mapping(site, &[])?;
                    // skip the LUI+ADDI pair that loads the old address
                    let ra = RaTargets::resolve(site, &fw.image, &fw.sidecar, None).with_skip_len(8);
                    let text = format!("R[{}] = @{}\nreturn_redirect_skip\n", gref.reg.index(), p.name);
                    let src = PatchSource::parse(&text).map_err(|e| ScenarioError::other(Stage::Compile, e))?;
                    let bin = compile(&src, &map, &ra, &globals).map_err(|e| ScenarioError::other(Stage::Compile, e))?;
                    pending.push((site, PatchOrigin::Relocation, bin, map, ra));
                }
            }
            GlobalChangeKind::Removal => {
                for &site in &p.companion_sites {
                    if !pending.iter().any(|(a, ..)| *a == site) {
                        return Err(ScenarioError::other(
                            Stage::Plan,
                            format!("reference to removed `{}` at {site:#010x} is not patched", p.name),
                        ));
                    }
                }
            }
            _ => {}
        }
    }

    let budget = budget_for(fw)?;
    let model = cal.model(trigger);
    let mut patches = Vec::new();
    let mut bundle = PatchBundle::default();
    for (addr, origin, binary, mapping, ra) in pending {
        let verdict = admit(&binary, &model, &budget);
        if !verdict.admitted() {
            return Err(ScenarioError {
                stage: Stage::Verify,
                kind: FailureKind::Unsafe(verdict),
            });
        }
        bundle.nodes.push(node(fw, &mut alloc, &bundle, addr, trigger, &binary)?);
        patches.push(PlannedPatch {
            update_addr: addr,
            origin,
            binary,
            mapping,
            ra,
            verdict,
        });
    }
    bundle.writes = plans.iter().flat_map(|p| p.writes.iter().cloned()).collect();
    Ok(Deployment {
        patches,
        plans,
        bundle,
    })
}

/// Places one patch and builds its bundle node.
pub fn node(
    fw: &Firmware,
    alloc: &mut PatchAllocator,
    bundle: &PatchBundle,
    addr: u32,
    trigger: TriggerKind,
    binary: &PatchBinary,
) -> Result<BundleNode, ScenarioError> {
    let patch_addr = bundle
        .place(alloc, &binary.code)
        .map_err(|e| ScenarioError::other(Stage::Plan, e))?;
    let len = fw
        .image
        .instr_length_at(addr)
        .map_err(|e| ScenarioError::other(Stage::Plan, e))?;
    Ok(BundleNode {
        update_addr: addr,
        trigger,
        strategy: binary.strategy,
        patch_addr,
        code: binary.code.clone(),
        original: fw.image.read(addr, len).expect("decoded above").to_vec(),
        hook_slot: fw.sidecar.hook_at(addr).map(|h| h.slot).unwrap_or(0),
    })
}

/// Boots `fw`, feeds `input` and runs until it is consumed.
pub fn run_image(fw: &Firmware, input: &[u8]) -> Result<Trace, ScenarioError> {
    let mut m = Machine::load_image(&fw.image, fw.profile.clone()).map_err(|e| ScenarioError::other(Stage::Run, e))?;
    let mut t = m.run(Stop::idle(BOOT_BUDGET));
    m.push_input(input);
    t.extend(m.run_until_drained(RUN_BUDGET));
    Ok(t)
}

/// A booted board with nothing installed yet.
pub fn boot(fw: &Firmware) -> Result<SimDevice, ScenarioError> {
    let mut dev = SimDevice::new(fw).map_err(|e| ScenarioError::other(Stage::Deploy, e))?;
    dev.run_to_idle(BOOT_BUDGET);
    Ok(dev)
}

/// Ships `bundle` to a fresh board, then feeds `input` with every trap timed.
pub fn deploy_and_run(
    fw: &Firmware,
    bundle: &PatchBundle,
    input: &[u8],
) -> Result<(Trace, Vec<TrapTiming>), ScenarioError> {
    let mut client = HostClient::new(boot(fw)?);
    client
        .send_bundle(bundle)
        .map_err(|e| ScenarioError::other(Stage::Deploy, e))?;
    let mut dev = client.into_transport();
    dev.machine.push_input(input);
    Ok(measure::run_probed(&mut dev.machine, &PhaseProbe::new(fw), RUN_BUDGET))
}

/// Observable behavior of one input on the three firmware states.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InputOutcome {
    pub input: InputKind,
    pub vuln: Vec<Observable>,
    pub fixed: Vec<Observable>,
    pub patched: Vec<Observable>,
    pub timings: Vec<TrapTiming>,
}

impl InputOutcome {
    pub fn patched_matches_fixed(&self) -> bool {
        self.patched == self.fixed
    }
}

#[derive(Clone, Debug)]
pub struct ScenarioReport {
    pub scenario: &'static str,
    pub profile: &'static str,
    pub trigger: TriggerKind,
    pub deployment: Deployment,
    pub outcomes: Vec<InputOutcome>,
}

impl ScenarioReport {
    pub fn outcome(&self, kind: InputKind) -> &InputOutcome {
        self.outcomes
            .iter()
            .find(|o| o.input == kind)
            .expect("every input is run")
    }

    /// Patched behavior equals the fixed build on every input.
    pub fn repaired(&self) -> bool {
        self.outcomes.iter().all(InputOutcome::patched_matches_fixed)
    }

    pub fn strategies(&self) -> Vec<Strategy> {
        self.deployment.patches.iter().map(|p| p.binary.strategy).collect()
    }
}

/// Runs the full pipeline for one scenario, trigger and profile.
pub fn run_scenario(
    sc: &Scenario,
    trigger: TriggerKind,
    profile: &ArchProfile,
    text_base: u32,
) -> Result<ScenarioReport, ScenarioError> {
    let b = build(sc, profile, text_base)?;
    let cal = measure::calibration(profile).map_err(|e| ScenarioError::other(Stage::Calibrate, e))?;
    let free = {
        let mut c = HostClient::new(boot(&b.vuln)?);
        c.hello().map_err(|e| ScenarioError::other(Stage::Deploy, e))?.free_patch_bytes
    };
    let deployment = plan(sc, &b, trigger, free, &cal)?;
    let mut outcomes = Vec::new();
    for kind in InputKind::ALL {
        let input = sc.input(kind);
        let (patched, timings) = deploy_and_run(&b.vuln, &deployment.bundle, &input)?;
        outcomes.push(InputOutcome {
            input: kind,
            vuln: run_image(&b.vuln, &input)?.observable(),
            fixed: run_image(&b.fixed, &input)?.observable(),
            patched: patched.observable(),
            timings,
        });
    }
    Ok(ScenarioReport {
        scenario: sc.name,
        profile: profile.name,
        trigger,
        deployment,
        outcomes,
    })
}

/// One cell of the scenario × trigger × profile matrix.
#[derive(Debug)]
pub struct MatrixCell {
    pub scenario: &'static str,
    pub trigger: TriggerKind,
    pub profile: &'static str,
    pub result: Result<ScenarioReport, ScenarioError>,
}

fn cells(scenarios: &[Scenario]) -> Vec<(Scenario, TriggerKind, ArchProfile)> {
    let mut v = Vec::new();
    for sc in scenarios {
        for t in TriggerKind::ALL {
            for p in ArchProfile::all() {
                v.push((*sc, t, p));
            }
        }
    }
    v
}

fn run_cell((sc, t, p): &(Scenario, TriggerKind, ArchProfile)) -> MatrixCell {
    MatrixCell {
        scenario: sc.name,
        trigger: *t,
        profile: p.name,
        result: run_scenario(sc, *t, p, crate::layout::SRAM_TEXT_BASE),
    }
}

/// Every scenario under every trigger on both profiles, spread over the
/// thread pool when the `parallel` feature is on.
pub fn run_matrix(scenarios: &[Scenario]) -> Vec<MatrixCell> {
    crate::parallel::par_map(&cells(scenarios), run_cell)
}

/// [`run_matrix`] on the calling thread.
pub fn run_matrix_seq(scenarios: &[Scenario]) -> Vec<MatrixCell> {
    crate::parallel::seq_map(&cells(scenarios), run_cell)
}

/// Committed golden trace for one input, as observables.
pub fn golden(sc: &Scenario, kind: InputKind) -> Result<Vec<Observable>, String> {
    let path = sc.golden_path(kind);
    let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    crate::corpus::parse_observables(&text)
}

/// Regenerates the golden traces of `sc` from its fixed build.
pub fn bless(sc: &Scenario) -> Result<(), ScenarioError> {
    let fixed = runtime::link(&sc.source(true), &ArchProfile::soft16(), crate::layout::SRAM_TEXT_BASE)
        .map_err(|e| ScenarioError::other(Stage::Build, e))?;
    for kind in InputKind::ALL {
        let obs = run_image(&fixed, &sc.input(kind))?.observable();
        let path = sc.golden_path(kind);
        let io = |e: std::io::Error| ScenarioError::other(Stage::Run, format!("{}: {e}", path.display()));
        std::fs::create_dir_all(path.parent().expect("golden dir")).map_err(io)?;
        std::fs::write(&path, crate::corpus::format_observables(&obs)).map_err(io)?;
    }
    Ok(())
}
