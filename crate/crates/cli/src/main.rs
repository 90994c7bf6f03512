//! `spatch`: drive the hot-patching pipeline from the command line.
//!
//! Firmware arguments accept either assembly source (`.s`, linked on the
//! fly) or a stored `.spfw` image with its `.sidecar` next to it.

use std::fs;
use std::io::{self, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use spatch::analysis::diff::bindiff;
use spatch::analysis::mapping::{mapping_for, MappingTable};
use spatch::analysis::sidecar::DebugSidecar;
use spatch::analysis::update_point::select_update_point;
use spatch::corpus::{self, InputKind};
use spatch::dispatcher::TriggerKind;
use spatch::image::FirmwareImage;
use spatch::layout;
use spatch::machine::{ArchProfile, Machine, Stop};
use spatch::measure;
use spatch::patchgen::{compile, resolved_globals, PatchAllocator, PatchBinary, PatchSource, RaTargets};
use spatch::runtime::{self, Firmware};
use spatch::scenario::{self, FailureKind, ScenarioError};
use spatch::updsvc::{self, HostClient, PatchBundle, SimDevice, StreamTransport, Transport};
use spatch::verifier::{admit, Budget};

/// A refusal the user asked for: reported on stderr with exit code 2.
#[derive(Debug)]
struct Rejected(String);

impl std::fmt::Display for Rejected {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Rejected {}

fn reject(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Rejected(msg.into()))
}

#[derive(Parser)]
#[command(name = "spatch", version, about = "Exception-driven hot patching for a simulated MCU")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Base {
    Sram,
    Flash,
}

impl Base {
    fn addr(self) -> u32 {
        match self {
            Base::Sram => layout::SRAM_TEXT_BASE,
            Base::Flash => layout::FLASH_TEXT_BASE,
        }
    }
}

#[derive(Args, Clone)]
struct Target {
    /// Architecture profile: soft16 or hard16.
    #[arg(long, default_value = "soft16")]
    profile: String,
    /// Where `.s` sources place their text.
    #[arg(long, value_enum, default_value = "sram")]
    text_base: Base,
}

impl Target {
    fn profile(&self) -> Result<ArchProfile> {
        ArchProfile::by_name(&self.profile).ok_or_else(|| anyhow!("unknown profile `{}`", self.profile))
    }
}

fn parse_trigger(s: &str) -> Result<TriggerKind, String> {
    TriggerKind::parse(s).ok_or_else(|| format!("unknown trigger `{s}` (hw, sw, hook)"))
}

#[derive(Subcommand)]
enum Cmd {
    /// Assemble and link firmware; writes IMAGE.spfw and IMAGE.sidecar.
    Asm {
        src: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        #[command(flatten)]
        target: Target,
    },
    /// Instruction-level diff of two firmware builds.
    Diff {
        old: PathBuf,
        new: PathBuf,
        #[command(flatten)]
        target: Target,
    },
    /// Pick the update point and print the variable mapping table.
    Analyze {
        old: PathBuf,
        new: PathBuf,
        /// Patch variables, comma separated.
        #[arg(long, value_delimiter = ',')]
        vars: Vec<String>,
        #[arg(long, value_parser = parse_trigger, default_value = "hw")]
        trigger: TriggerKind,
        /// Function to localize; defaults to the only changed one.
        #[arg(long)]
        function: Option<String>,
        /// Also write the mapping table here.
        #[arg(short, long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        target: Target,
    },
    /// Compile a patch script against a mapping table.
    Genpatch {
        src: PathBuf,
        #[arg(long)]
        map: PathBuf,
        /// Vulnerable firmware the patch targets.
        #[arg(long)]
        image: PathBuf,
        /// Fixed firmware; needed for `return_redirect_skip`.
        #[arg(long)]
        fixed: Option<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
        #[command(flatten)]
        target: Target,
    },
    /// Check a compiled patch against the watchdog budget.
    Verify {
        patch: PathBuf,
        #[arg(long)]
        wdt: u64,
        #[arg(long)]
        crit: u64,
        #[arg(long, value_parser = parse_trigger, default_value = "hw")]
        trigger: TriggerKind,
        #[arg(long, default_value = "soft16")]
        profile: String,
    },
    /// Send patches to a device: `sim:IMAGE` or `tcp:HOST:PORT`.
    Deploy {
        #[arg(long)]
        port: String,
        /// Bundle file written by `scenario --bundle-out`.
        #[arg(long, conflicts_with_all = ["patch", "at"])]
        bundle: Option<PathBuf>,
        /// Single compiled patch; needs --at and --image.
        #[arg(long, requires_all = ["at", "image"])]
        patch: Option<PathBuf>,
        /// Update-point address of --patch.
        #[arg(long, value_parser = parse_u32)]
        at: Option<u32>,
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long, value_parser = parse_trigger, default_value = "hw")]
        trigger: TriggerKind,
        /// With a `sim:` port, run this input afterwards and print the trace.
        #[arg(long)]
        input: Option<PathBuf>,
        #[command(flatten)]
        target: Target,
    },
    /// Boot firmware, feed an input file, print the trace.
    Run {
        image: PathBuf,
        #[arg(long)]
        input: Option<PathBuf>,
        /// Print only outputs, resets and faults.
        #[arg(long)]
        observable: bool,
        #[arg(long, default_value_t = scenario::RUN_BUDGET)]
        budget: u64,
        #[command(flatten)]
        target: Target,
    },
    /// Time the patch path with k empty patches installed.
    Measure {
        #[arg(long, default_value_t = 1)]
        patches: usize,
        #[arg(long, value_parser = parse_trigger, default_value = "sw")]
        trigger: TriggerKind,
        #[arg(long, default_value = "soft16")]
        profile: String,
    },
    /// Run the whole pipeline on corpus scenarios.
    Scenario {
        /// Scenario name, or `all`.
        name: String,
        /// hw, sw, hook or all.
        #[arg(long, default_value = "all")]
        trigger: String,
        /// soft16, hard16 or all.
        #[arg(long, default_value = "all")]
        profile: String,
        #[arg(long, value_enum, default_value = "sram")]
        text_base: Base,
        /// Write the bundle of a single run here.
        #[arg(long)]
        bundle_out: Option<PathBuf>,
    },
    /// List the corpus, check or regenerate its golden traces.
    Corpus {
        #[arg(long, conflicts_with = "check")]
        bless: bool,
        #[arg(long)]
        check: bool,
    },
    /// Serve a simulated device over TCP.
    Serve {
        image: PathBuf,
        #[arg(long, default_value = "127.0.0.1:7400")]
        listen: String,
        /// Exit after the first connection closes.
        #[arg(long)]
        once: bool,
        #[command(flatten)]
        target: Target,
    },
}

fn parse_u32(s: &str) -> Result<u32, String> {
    let t = s.trim();
    let r = match t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")) {
        Some(h) => u32::from_str_radix(h, 16),
        None => t.parse(),
    };
    r.map_err(|_| format!("bad address `{s}`"))
}

fn sidecar_path(image: &Path) -> PathBuf {
    image.with_extension("sidecar")
}

/// Links a source file, or loads a stored image plus sidecar.
fn load_firmware(path: &Path, target: &Target) -> Result<Firmware> {
    let profile = target.profile()?;
    if path.extension().is_some_and(|e| e == "s") {
        let src = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        return runtime::link(&src, &profile, target.text_base.addr())
            .with_context(|| format!("linking {}", path.display()));
    }
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let image = FirmwareImage::from_bytes(&bytes).with_context(|| format!("decoding {}", path.display()))?;
    let sc_path = sidecar_path(path);
    let sidecar = match fs::read_to_string(&sc_path) {
        Ok(text) => DebugSidecar::parse(&text).with_context(|| format!("parsing {}", sc_path.display()))?,
        Err(e) if e.kind() == io::ErrorKind::NotFound => DebugSidecar::default(),
        Err(e) => return Err(e).with_context(|| format!("reading {}", sc_path.display())),
    };
    Ok(Firmware::from_parts(image, sidecar, &profile)?)
}

fn read_input(path: &Path) -> Result<Vec<u8>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    corpus::parse_hex(&text).map_err(|e| anyhow!("{}: {e}", path.display()))
}

fn pick_function(diff: &spatch::analysis::diff::DiffReport, function: Option<&str>) -> Result<String> {
    match function {
        Some(f) => Ok(f.to_string()),
        None => match diff.functions.as_slice() {
            [one] => Ok(one.function.clone()),
            [] => Err(reject("NoDivergence: the builds do not differ in code")),
            many => bail!(
                "several functions changed ({}); choose one with --function",
                many.iter().map(|d| d.function.as_str()).collect::<Vec<_>>().join(", ")
            ),
        },
    }
}

fn cmd_analyze(
    old: &Path,
    new: &Path,
    vars: &[String],
    trigger: TriggerKind,
    function: Option<&str>,
    out: Option<&Path>,
    target: &Target,
) -> Result<()> {
    let a = load_firmware(old, target)?;
    let b = load_firmware(new, target)?;
    let diff = bindiff(&a.image, &b.image, &a.sidecar, &b.sidecar)?;
    let func = pick_function(&diff, function)?;
    let vars: Vec<&str> = vars.iter().map(String::as_str).filter(|v| !v.is_empty()).collect();
    let up = select_update_point(&diff, &func, &a.sidecar, &vars, trigger, &a.image)
        .map_err(|r| reject(format!("update point rejected: {r}")))?;
    let map = mapping_for(&a.sidecar, &a.image, &a.layout, up.addr, &vars).map_err(|e| reject(e.to_string()))?;
    println!("UPDATE {} {:#010x} len {} trigger {}", up.function, up.addr, up.instr_len, trigger.name());
    print!("{map}");
    if let Some(p) = out {
        fs::write(p, map.to_string()).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn cmd_genpatch(src: &Path, map: &Path, image: &Path, fixed: Option<&Path>, out: &Path, target: &Target) -> Result<()> {
    let fw = load_firmware(image, target)?;
    let map_text = fs::read_to_string(map).with_context(|| format!("reading {}", map.display()))?;
    let map = MappingTable::parse(&map_text)?;
    let script = fs::read_to_string(src).with_context(|| format!("reading {}", src.display()))?;
    let script = PatchSource::parse(&script)?;
    let diff = match fixed {
        Some(p) => {
            let g = load_firmware(p, target)?;
            Some(bindiff(&fw.image, &g.image, &fw.sidecar, &g.sidecar)?)
        }
        None => None,
    };
    let func_diff = diff.as_ref().and_then(|d| {
        fw.sidecar
            .function_at(map.update_addr)
            .and_then(|f| d.function(&f.name))
    });
    let ra = RaTargets::resolve(map.update_addr, &fw.image, &fw.sidecar, func_diff);
    let bin = compile(&script, &map, &ra, &resolved_globals(&fw.sidecar, &[]))?;
    fs::write(out, bin.to_bytes()).with_context(|| format!("writing {}", out.display()))?;
    println!(
        "PATCH {} bytes strategy {:?} at {:#010x}",
        bin.size(),
        bin.strategy,
        map.update_addr
    );
    Ok(())
}

fn cmd_verify(patch: &Path, wdt: u64, crit: u64, trigger: TriggerKind, profile: &str) -> Result<()> {
    let profile = ArchProfile::by_name(profile).ok_or_else(|| anyhow!("unknown profile `{profile}`"))?;
    let bytes = fs::read(patch).with_context(|| format!("reading {}", patch.display()))?;
    let bin = PatchBinary::from_bytes(&bytes)?;
    let budget = Budget::new(wdt, crit).ok_or_else(|| anyhow!("need wdt > crit > 0"))?;
    let cal = measure::calibration(&profile)?;
    let v = admit(&bin, &cal.model(trigger), &budget);
    println!("{v}");
    match &v.reason {
        None => Ok(()),
        Some(r) => Err(reject(format!("patch rejected: {r}"))),
    }
}

fn single_bundle(fw: &Firmware, patch: &Path, at: u32, trigger: TriggerKind, free: u32) -> Result<PatchBundle> {
    let bin = PatchBinary::from_bytes(&fs::read(patch).with_context(|| format!("reading {}", patch.display()))?)?;
    let mut alloc = PatchAllocator::with_free(free);
    let mut bundle = PatchBundle::default();
    let node = scenario::node(fw, &mut alloc, &bundle, at, trigger, &bin)?;
    bundle.nodes.push(node);
    Ok(bundle)
}

fn nack_to_reject(e: updsvc::HostError) -> anyhow::Error {
    match e {
        updsvc::HostError::Nack(r) => reject(format!("device refused: {r:?}")),
        other => other.into(),
    }
}

fn send<T: Transport>(client: &mut HostClient<T>, bundle: &PatchBundle) -> Result<()> {
    client.send_bundle(bundle).map_err(nack_to_reject)?;
    println!("ACK {} patches, {} code bytes", bundle.nodes.len(), bundle.code_bytes());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_deploy(
    port: &str,
    bundle: Option<&Path>,
    patch: Option<&Path>,
    at: Option<u32>,
    image: Option<&Path>,
    trigger: TriggerKind,
    input: Option<&Path>,
    target: &Target,
) -> Result<()> {
    let load_bundle = |fw: Option<&Firmware>, free: u32| -> Result<PatchBundle> {
        match (bundle, patch) {
            (Some(b), _) => Ok(PatchBundle::from_bytes(
                &fs::read(b).with_context(|| format!("reading {}", b.display()))?,
            )?),
            (None, Some(p)) => {
                let fw = fw.ok_or_else(|| anyhow!("--patch needs --image"))?;
                single_bundle(fw, p, at.expect("clap requires --at"), trigger, free)
            }
            (None, None) => bail!("give --bundle or --patch"),
        }
    };
    if let Some(path) = port.strip_prefix("sim:") {
        let fw = load_firmware(Path::new(path), target)?;
        let mut dev = SimDevice::new(&fw)?;
        dev.run_to_idle(scenario::BOOT_BUDGET);
        let mut client = HostClient::new(dev);
        let info = client.hello()?;
        let b = load_bundle(Some(&fw), info.free_patch_bytes)?;
        send(&mut client, &b)?;
        if let Some(inp) = input {
            let mut dev = client.into_transport();
            dev.machine.push_input(&read_input(inp)?);
            print!("{}", dev.machine.run_until_drained(scenario::RUN_BUDGET));
        }
        Ok(())
    } else if let Some(addr) = port.strip_prefix("tcp:") {
        if input.is_some() {
            bail!("--input only works with a sim: port");
        }
        let stream = TcpStream::connect(addr).with_context(|| format!("connecting to {addr}"))?;
        let mut client = HostClient::new(StreamTransport::new(stream));
        let info = client.hello()?;
        let fw = image.map(|p| load_firmware(p, target)).transpose()?;
        let b = load_bundle(fw.as_ref(), info.free_patch_bytes)?;
        send(&mut client, &b)
    } else {
        bail!("port must be sim:IMAGE or tcp:HOST:PORT")
    }
}

fn cmd_run(image: &Path, input: Option<&Path>, observable: bool, budget: u64, target: &Target) -> Result<()> {
    let fw = load_firmware(image, target)?;
    let mut m = Machine::load_image(&fw.image, fw.profile.clone())?;
    let mut t = m.run(Stop::idle(scenario::BOOT_BUDGET));
    if let Some(p) = input {
        m.push_input(&read_input(p)?);
        t.extend(m.run_until_drained(budget));
    }
    if observable {
        print!("{}", corpus::format_observables(&t.observable()));
    } else {
        print!("{t}");
    }
    Ok(())
}

fn cmd_measure(k: usize, trigger: TriggerKind, profile: &str) -> Result<()> {
    let profile = ArchProfile::by_name(profile).ok_or_else(|| anyhow!("unknown profile `{profile}`"))?;
    if !(1..=measure::BENCH_SITES).contains(&k) {
        bail!("--patches must be 1..={}", measure::BENCH_SITES);
    }
    if trigger == TriggerKind::HwBp && k > profile.hw_bp_count {
        return Err(reject(format!(
            "only {} hardware comparators for {k} patches",
            profile.hw_bp_count
        )));
    }
    let mut rig = measure::bench_rig(&profile, k, |_| trigger)?;
    let (_, timings) = rig.run_once();
    let hits: Vec<_> = timings.iter().filter(|t| t.patched).collect();
    if hits.len() != k {
        bail!("expected {k} patched traps, saw {}", hits.len());
    }
    let exc: Vec<u64> = hits.iter().map(|t| t.t_exception).collect();
    let worst = hits.iter().map(|t| t.t_dispatch).max().unwrap_or(0);
    let mean = hits.iter().map(|t| t.t_dispatch).sum::<u64>() as f64 / k as f64;
    let cmp = hits.iter().map(|t| t.comparisons).max().unwrap_or(0);
    let bound = (k as f64).log2().ceil() as u32 + 1;
    let total = hits.iter().map(|t| t.t_total).max().unwrap_or(0);
    println!("PROFILE {} TRIGGER {} PATCHES {k}", profile.name, trigger.name());
    println!(
        "T_EXCEPTION {} CONSTANT {}",
        exc[0],
        exc.iter().all(|&e| e == exc[0])
    );
    println!("T_DISPATCH worst {worst} mean {mean:.1}");
    println!("COMPARISONS max {cmp} bound {bound}");
    println!("T_TOTAL worst {total}");
    Ok(())
}

fn selection<T: Clone>(arg: &str, all: &[T], parse: impl Fn(&str) -> Option<T>) -> Result<Vec<T>> {
    if arg == "all" {
        Ok(all.to_vec())
    } else {
        Ok(vec![parse(arg).ok_or_else(|| anyhow!("unknown value `{arg}`"))?])
    }
}

fn cmd_scenario(name: &str, trigger: &str, profile: &str, base: Base, bundle_out: Option<&Path>) -> Result<()> {
    let scenarios = if name == "all" {
        corpus::all()
    } else {
        vec![corpus::by_name(name).ok_or_else(|| anyhow!("unknown scenario `{name}`"))?]
    };
    let triggers = selection(trigger, &TriggerKind::ALL, TriggerKind::parse)?;
    let profiles = selection(profile, &ArchProfile::all(), ArchProfile::by_name)?;
    if bundle_out.is_some() && scenarios.len() * triggers.len() * profiles.len() != 1 {
        bail!("--bundle-out needs a single scenario, trigger and profile");
    }
    let mut rejected: Vec<String> = Vec::new();
    let mut mismatched = 0;
    for sc in &scenarios {
        for &t in &triggers {
            for p in &profiles {
                let head = format!("{} {} {}", sc.name, t.name(), p.name);
                match scenario::run_scenario(sc, t, p, base.addr()) {
                    Ok(r) => {
                        let eq = |k| r.outcome(k).patched_matches_fixed();
                        let ok = r.repaired();
                        mismatched += (!ok) as usize;
                        println!(
                            "{head}: {} benign={} exploit={} patches={} bytes={}",
                            if ok { "REPAIRED" } else { "MISMATCH" },
                            eq(InputKind::Benign),
                            eq(InputKind::Exploit),
                            r.deployment.patches.len(),
                            r.deployment.bundle.code_bytes(),
                        );
                        for p in &r.deployment.patches {
                            println!("  {:#010x} {:?} {}", p.update_addr, p.binary.strategy, p.verdict);
                        }
                        for o in &r.outcomes {
                            for tt in &o.timings {
                                println!(
                                    "  {} trap {:?} {:#010x} T_TRIG {} T_EXC {} T_DISP {} T_PATCH {} T_TOTAL {}",
                                    o.input.name(),
                                    tt.cause,
                                    tt.site,
                                    tt.t_trigger,
                                    tt.t_exception,
                                    tt.t_dispatch,
                                    tt.t_patch,
                                    tt.t_total
                                );
                            }
                        }
                        if let Some(path) = bundle_out {
                            fs::write(path, r.deployment.bundle.to_bytes())
                                .with_context(|| format!("writing {}", path.display()))?;
                        }
                    }
                    Err(e @ ScenarioError {
                        kind: FailureKind::Rejected(_) | FailureKind::Unsafe(_),
                        ..
                    }) => {
                        println!("{head}: REJECTED {e}");
                        rejected.push(format!("{head}: {e}"));
                    }
                    Err(e) => return Err(anyhow!("{head}: {e}")),
                }
            }
        }
    }
    if mismatched > 0 {
        bail!("{mismatched} runs diverged from the fixed firmware");
    }
    if !rejected.is_empty() {
        return Err(reject(rejected.join("\n")));
    }
    Ok(())
}

fn cmd_corpus(bless: bool, check: bool) -> Result<()> {
    let mut stale = Vec::new();
    for sc in corpus::all() {
        if bless {
            scenario::bless(&sc)?;
            println!("blessed {}", sc.name);
            continue;
        }
        if check {
            let b = scenario::build(&sc, &ArchProfile::soft16(), layout::SRAM_TEXT_BASE)?;
            for k in InputKind::ALL {
                let want = scenario::golden(&sc, k).map_err(|e| anyhow!(e))?;
                let got = scenario::run_image(&b.fixed, &sc.input(k))?.observable();
                if want != got {
                    stale.push(format!("{}/{}", sc.name, k.name()));
                }
            }
        }
        println!("{:<18} {}", sc.name, sc.category);
    }
    if !stale.is_empty() {
        bail!("golden traces out of date: {}", stale.join(", "));
    }
    Ok(())
}

fn cmd_serve(image: &Path, listen: &str, once: bool, target: &Target) -> Result<()> {
    let fw = load_firmware(image, target)?;
    let listener = TcpListener::bind(listen).with_context(|| format!("binding {listen}"))?;
    println!("LISTEN {}", listener.local_addr()?);
    io::stdout().flush()?;
    let mut dev = SimDevice::new(&fw)?;
    dev.run_to_idle(scenario::BOOT_BUDGET);
    for conn in listener.incoming() {
        let mut stream = conn?;
        updsvc::host::serve(&mut stream, &mut dev)?;
        if once {
            break;
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Asm { src, out, target } => {
            let fw = load_firmware(&src, &target)?;
            fs::write(&out, fw.image.to_bytes()?).with_context(|| format!("writing {}", out.display()))?;
            fs::write(sidecar_path(&out), fw.sidecar.to_string())?;
            println!("IMAGE {} entry {:#010x} sections {}", out.display(), fw.image.entry, fw.image.sections.len());
            Ok(())
        }
        Cmd::Diff { old, new, target } => {
            let a = load_firmware(&old, &target)?;
            let b = load_firmware(&new, &target)?;
            let d = bindiff(&a.image, &b.image, &a.sidecar, &b.sidecar)?;
            if d.is_empty() {
                println!("NO CODE CHANGES");
            }
            print!("{d}");
            Ok(())
        }
        Cmd::Analyze {
            old,
            new,
            vars,
            trigger,
            function,
            out,
            target,
        } => cmd_analyze(&old, &new, &vars, trigger, function.as_deref(), out.as_deref(), &target),
        Cmd::Genpatch {
            src,
            map,
            image,
            fixed,
            out,
            target,
        } => cmd_genpatch(&src, &map, &image, fixed.as_deref(), &out, &target),
        Cmd::Verify {
            patch,
            wdt,
            crit,
            trigger,
            profile,
        } => cmd_verify(&patch, wdt, crit, trigger, &profile),
        Cmd::Deploy {
            port,
            bundle,
            patch,
            at,
            image,
            trigger,
            input,
            target,
        } => cmd_deploy(
            &port,
            bundle.as_deref(),
            patch.as_deref(),
            at,
            image.as_deref(),
            trigger,
            input.as_deref(),
            &target,
        ),
        Cmd::Run {
            image,
            input,
            observable,
            budget,
            target,
        } => cmd_run(&image, input.as_deref(), observable, budget, &target),
        Cmd::Measure {
            patches,
            trigger,
            profile,
        } => cmd_measure(patches, trigger, &profile),
        Cmd::Scenario {
            name,
            trigger,
            profile,
            text_base,
            bundle_out,
        } => cmd_scenario(&name, &trigger, &profile, text_base, bundle_out.as_deref()),
        Cmd::Corpus { bless, check } => cmd_corpus(bless, check),
        Cmd::Serve {
            image,
            listen,
            once,
            target,
        } => cmd_serve(&image, &listen, once, &target),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let Some(r) = e.downcast_ref::<Rejected>() {
                eprintln!("rejected: {r}");
                ExitCode::from(2)
            } else {
                eprintln!("error: {e:#}");
                ExitCode::FAILURE
            }
        }
    }
}
