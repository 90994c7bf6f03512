use spatch::corpus::{self, ExpectedStrategy, InputKind};
use spatch::dispatcher::TriggerKind;
use spatch::layout;
use spatch::machine::ArchProfile;
use spatch::measure::{self, bench_rig, bench_site};
use spatch::scenario::{self, run_scenario};

#[test]
fn parallel_and_sequential_matrix_agree() {
    let scs: Vec<_> = ["oob_read", "global_size", "macro_const"]
        .iter()
        .filter_map(|n| corpus::by_name(n))
        .collect();
    assert!(scs.len() >= 2);
    let par = scenario::run_matrix(&scs);
    let seq = scenario::run_matrix_seq(&scs);
    assert_eq!(par.len(), seq.len());
    for (a, b) in par.iter().zip(&seq) {
        assert_eq!((a.scenario, a.trigger, a.profile), (b.scenario, b.trigger, b.profile));
        let (a, b) = (a.result.as_ref().unwrap(), b.result.as_ref().unwrap());
        assert_eq!(a.outcomes, b.outcomes);
        assert_eq!(a.deployment.bundle, b.deployment.bundle);
    }
}

#[test]
fn shipped_patches_use_the_expected_return_strategy() {
    for sc in corpus::all() {
        let r = run_scenario(&sc, TriggerKind::SwBp, &ArchProfile::soft16(), layout::SRAM_TEXT_BASE).unwrap();
        let s = r.strategies();
        if sc.expected == ExpectedStrategy::None {
            assert!(s.is_empty(), "{}: {s:?}", sc.name);
        } else {
            assert!(!s.is_empty(), "{}", sc.name);
            assert!(s.iter().all(|&x| sc.expected.matches(x)), "{}: {s:?}", sc.name);
        }
    }
}

#[test]
fn builds_are_deterministic_and_match_goldens() {
    for sc in corpus::all() {
        for kind in InputKind::ALL {
            let g = scenario::golden(&sc, kind).unwrap();
            let b = scenario::build(&sc, &ArchProfile::soft16(), layout::SRAM_TEXT_BASE).unwrap();
            let fixed = scenario::run_image(&b.fixed, &sc.input(kind)).unwrap().observable();
            assert_eq!(fixed, g, "{} {}", sc.name, kind.name());
        }
    }
}

/// Empty patches on sites the input passes through change nothing visible.
#[test]
fn empty_patches_are_transparent() {
    for p in ArchProfile::all() {
        let mut base = bench_rig(&p, 0, |_| TriggerKind::SwBp).unwrap();
        let (want, none) = base.run_once();
        assert!(none.is_empty());
        for kind in [TriggerKind::SwBp, TriggerKind::Hook, TriggerKind::HwBp] {
            let k = if kind == TriggerKind::HwBp { 4 } else { 16 };
            let mut rig = bench_rig(&p, k, |_| kind).unwrap();
            let (got, timings) = rig.run_once();
            assert_eq!(got.observable(), want.observable(), "{} {kind:?}", p.name);
            assert_eq!(timings.iter().filter(|t| t.patched).count(), k);
            let sites: Vec<u32> = (0..k).map(|i| bench_site(&rig.firmware, i)).collect();
            assert!(timings.iter().all(|t| sites.contains(&t.site)));
        }
    }
}

#[test]
fn exploit_is_caught_under_every_trigger_on_both_profiles() {
    let sc = corpus::by_name("oob_read").unwrap();
    for p in ArchProfile::all() {
        let cal = measure::calibration(&p).unwrap();
        for t in TriggerKind::ALL {
            let r = run_scenario(&sc, t, &p, layout::SRAM_TEXT_BASE).unwrap();
            let e = r.outcome(InputKind::Exploit);
            assert_ne!(e.vuln, e.fixed);
            assert_eq!(e.patched, e.fixed);
            for timing in e.timings.iter().filter(|x| x.patched) {
                assert_eq!(timing.t_trigger, cal.t_trigger[&t]);
                assert_eq!(timing.t_exception, cal.t_exception);
            }
        }
    }
}
