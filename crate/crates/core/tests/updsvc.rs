use proptest::prelude::*;

use spatch::corpus::{self, InputKind};
use spatch::dispatcher::TriggerKind;
use spatch::layout;
use spatch::machine::{ArchProfile, Stop};
use spatch::measure::{self, bench_rig, bench_site};
use spatch::scenario::{self, Deployment};
use spatch::updsvc::frame::{decode_frame, encode_frame, FrameError};
use spatch::updsvc::msg::{DeviceInfo, MemPoke, StatusEntry};
use spatch::updsvc::{HostClient, HostError, Message, NackReason, PatchList, PatchNode, SimDevice, Transport};

fn planned(name: &str, trigger: TriggerKind, base: u32) -> (scenario::Builds, Deployment) {
    let sc = corpus::by_name(name).unwrap();
    let p = ArchProfile::soft16();
    let b = scenario::build(&sc, &p, base).unwrap();
    let cal = measure::calibration(&p).unwrap();
    let d = scenario::plan(&sc, &b, trigger, layout::PATCH_SIZE, &cal).unwrap();
    (b, d)
}

fn nack<T: std::fmt::Debug>(r: Result<T, HostError>) -> NackReason {
    match r {
        Err(HostError::Nack(n)) => n,
        other => panic!("expected a NACK, got {other:?}"),
    }
}

#[test]
fn install_refused_while_not_idle() {
    let (b, d) = planned("integer_overflow", TriggerKind::SwBp, layout::SRAM_TEXT_BASE);
    // Fresh from reset, before the firmware reaches its idle loop.
    let mut c = HostClient::new(SimDevice::new(&b.vuln).unwrap());
    assert_eq!(nack(c.send_bundle(&d.bundle)), NackReason::NotIdle);
    // Stopped in the middle of packet handling.
    let mut dev = c.into_transport();
    dev.run_to_idle(scenario::BOOT_BUDGET);
    dev.machine.push_input(&sc_input("integer_overflow"));
    dev.machine.run(Stop::cycles(20));
    assert!(dev.machine.parked_at().is_none());
    let mut c = HostClient::new(dev);
    assert_eq!(nack(c.send_bundle(&d.bundle)), NackReason::NotIdle);
    assert_eq!(c.status().unwrap(), vec![]);
}

fn sc_input(name: &str) -> Vec<u8> {
    corpus::by_name(name).unwrap().input(InputKind::Benign)
}

#[test]
fn software_breakpoint_in_flash_is_refused() {
    let (b, mut d) = planned("integer_overflow", TriggerKind::HwBp, layout::FLASH_TEXT_BASE);
    // The host refuses this at planning time; force it past the host.
    for n in &mut d.bundle.nodes {
        n.trigger = TriggerKind::SwBp;
    }
    let mut c = HostClient::new(scenario::boot(&b.vuln).unwrap());
    assert_eq!(nack(c.send_bundle(&d.bundle)), NackReason::FlashSwBreak);
}

#[test]
fn fifth_hardware_breakpoint_gets_no_comparator() {
    for p in ArchProfile::all() {
        assert_eq!(p.hw_bp_count, 4);
        let err = bench_rig(&p, 5, |_| TriggerKind::HwBp).err().expect("five comparators requested");
        assert!(err.to_string().contains("NoComparator"), "{err}");
        // Nothing half-installed.
        let mut rig = bench_rig(&p, 4, |_| TriggerKind::HwBp).unwrap();
        let info = HostClient::new(&mut rig.device).hello().unwrap();
        assert_eq!(info.free_comparators, 0);
        assert_eq!(info.installed, 4);
    }
}

#[test]
fn removing_a_hardware_breakpoint_frees_its_comparator() {
    let p = ArchProfile::hard16();
    let mut rig = bench_rig(&p, 4, |_| TriggerKind::HwBp).unwrap();
    let fw = rig.firmware.clone();
    let mut extra = rig.bundle.clone();
    extra.nodes.truncate(1);
    extra.nodes[0].update_addr = bench_site(&fw, 10);
    extra.nodes[0].patch_addr = layout::PATCH_BASE + 0x1000;
    let mut c = HostClient::new(&mut rig.device);
    assert_eq!(nack(c.send_bundle(&extra)), NackReason::NoComparator);
    c.remove(bench_site(&fw, 2)).unwrap();
    assert_eq!(c.hello().unwrap().free_comparators, 1);
    c.send_bundle(&extra).unwrap();
    assert_eq!(c.hello().unwrap().installed, 4);
    assert_eq!(c.hello().unwrap().free_comparators, 0);
}

#[test]
fn removing_twice_is_not_found() {
    let (b, d) = planned("missing_bounds", TriggerKind::SwBp, layout::SRAM_TEXT_BASE);
    let mut c = HostClient::new(scenario::boot(&b.vuln).unwrap());
    c.send_bundle(&d.bundle).unwrap();
    let at = d.bundle.nodes[0].update_addr;
    c.remove(at).unwrap();
    assert_eq!(nack(c.remove(at)), NackReason::NotFound);
}

#[test]
fn install_then_remove_restores_original_behavior() {
    for trigger in TriggerKind::ALL {
        let (b, d) = planned("oob_read", trigger, layout::SRAM_TEXT_BASE);
        let input = corpus::by_name("oob_read").unwrap().input(InputKind::Exploit);
        let baseline = scenario::run_image(&b.vuln, &input).unwrap().observable();

        let mut c = HostClient::new(scenario::boot(&b.vuln).unwrap());
        c.send_bundle(&d.bundle).unwrap();
        for n in &d.bundle.nodes {
            c.remove(n.update_addr).unwrap();
        }
        assert!(c.status().unwrap().is_empty());
        let mut dev = c.into_transport();
        // Text is byte-identical to the image again.
        for n in &d.bundle.nodes {
            assert_eq!(dev.machine.peek(n.update_addr, n.original.len() as u32).unwrap(), &n.original[..]);
        }
        assert_eq!(dev.machine.bp_enable, 0);
        dev.machine.push_input(&input);
        let after = dev.machine.run_until_drained(scenario::RUN_BUDGET);
        assert_eq!(after.observable(), baseline, "{trigger:?}");
        assert_eq!(after.traps().count(), 0);
    }
}

#[test]
fn duplicate_update_address_is_refused() {
    let (b, d) = planned("logic_bug", TriggerKind::SwBp, layout::SRAM_TEXT_BASE);
    let mut c = HostClient::new(scenario::boot(&b.vuln).unwrap());
    c.send_bundle(&d.bundle).unwrap();
    let mut again = d.bundle.clone();
    for n in &mut again.nodes {
        n.patch_addr += 0x100;
    }
    assert_eq!(nack(c.send_bundle(&again)), NackReason::Duplicate);
}

#[test]
fn corrupted_frames_get_bad_crc_and_service_stays_up() {
    let mut rig = bench_rig(&ArchProfile::soft16(), 1, |_| TriggerKind::SwBp).unwrap();
    let good = Message::Hello(None).encode().unwrap();
    for bit in 8..good.len() * 8 {
        // Skip the length field; flipping it changes framing, not content.
        if (16..32).contains(&bit) {
            continue;
        }
        let mut bad = good.clone();
        bad[bit / 8] ^= 1 << (bit % 8);
        let reply = Message::decode(&rig.device.transact(&bad).unwrap()).unwrap();
        assert_eq!(reply, Message::Nack(NackReason::BadCrc), "bit {bit}");
        let mut c = HostClient::new(&mut rig.device);
        assert_eq!(c.hello().unwrap().installed, 1);
    }
}

fn device_info() -> impl Strategy<Value = DeviceInfo> {
    ("[a-z0-9]{0,12}", any::<u16>(), any::<u16>(), any::<u32>(), any::<u8>()).prop_map(|(profile, c, i, f, k)| {
        DeviceInfo {
            profile,
            table_capacity: c,
            installed: i,
            free_patch_bytes: f,
            free_comparators: k,
        }
    })
}

fn patch_node() -> impl Strategy<Value = PatchNode> {
    (
        any::<u32>(),
        any::<u32>(),
        any::<u32>(),
        0u8..16,
        any::<u32>(),
        any::<u32>(),
        any::<u8>(),
        proptest::option::of(proptest::collection::vec(any::<u8>(), 0..64)),
    )
        .prop_map(|(u, p, s, flags, sa, ta, ol, code)| PatchNode {
            update_addr: u,
            patch_addr: p,
            size: code.as_ref().map(|c| c.len() as u32).unwrap_or(s),
            flags,
            strategy_arg: sa,
            trigger_arg: ta,
            orig_len: ol,
            code,
        })
}

fn nack_reason() -> impl Strategy<Value = NackReason> {
    (1u8..=10).prop_map(|v| NackReason::from_u8(v).unwrap())
}

fn message() -> impl Strategy<Value = Message> {
    let poke = (any::<u32>(), proptest::collection::vec(any::<u8>(), 0..32))
        .prop_map(|(addr, bytes)| MemPoke { addr, bytes });
    let status = (any::<u32>(), any::<u32>(), any::<u32>(), any::<u8>()).prop_map(|(u, p, s, f)| StatusEntry {
        update_addr: u,
        patch_addr: p,
        size: s,
        flags: f,
    });
    prop_oneof![
        proptest::option::of(device_info()).prop_map(Message::Hello),
        (
            proptest::collection::vec(patch_node(), 0..6),
            proptest::collection::vec(poke, 0..4)
        )
            .prop_map(|(nodes, writes)| Message::PatchList(PatchList { nodes, writes })),
        Just(Message::Ack),
        nack_reason().prop_map(Message::Nack),
        proptest::option::of(proptest::collection::vec(status, 0..8)).prop_map(Message::Status),
        (any::<u32>(), proptest::collection::vec(any::<u8>(), 0..4))
            .prop_map(|(update_addr, original)| Message::Remove { update_addr, original }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn messages_round_trip(msg in message()) {
        let bytes = msg.encode().unwrap();
        prop_assert_eq!(Message::decode(&bytes).unwrap(), msg);
    }

    #[test]
    fn frames_round_trip_and_detect_flips(
        kind in any::<u8>(),
        payload in proptest::collection::vec(any::<u8>(), 0..256),
        flip in any::<proptest::sample::Index>(),
    ) {
        let f = encode_frame(kind, &payload).unwrap();
        let (got, used) = decode_frame(&f).unwrap();
        prop_assert_eq!(used, f.len());
        prop_assert_eq!(got.kind, kind);
        prop_assert_eq!(&got.payload, &payload);
        // Any single-bit flip outside magic and length is caught by the CRC.
        let covered: Vec<usize> = (8..f.len() * 8).filter(|b| !(16..32).contains(b)).collect();
        let bit = covered[flip.index(covered.len())];
        let mut bad = f.clone();
        bad[bit / 8] ^= 1 << (bit % 8);
        prop_assert_eq!(decode_frame(&bad).unwrap_err(), FrameError::BadCrc);
    }
}
