use super::*;
use crate::hci::consts::*;

fn fw() -> Firmware {
    Firmware::boot(FirmwareProfile::default(), 1).unwrap()
}

fn target(profile: FirmwareProfile) -> Firmware {
    Firmware::fuzz_target(profile, 7).unwrap()
}

fn events(out: &[u8]) -> Vec<(u8, Vec<u8>)> {
    let mut v = Vec::new();
    let mut i = 0;
    while i < out.len() {
        match out[i] {
            H4_EVENT => {
                let plen = out[i + 2] as usize;
                v.push((out[i + 1], out[i + 3..i + 3 + plen].to_vec()));
                i += 3 + plen;
            }
            H4_ACL => {
                let len = u16::from_le_bytes([out[i + 3], out[i + 4]]) as usize;
                i += 5 + len;
            }
            _ => panic!("bad type at {i}"),
        }
    }
    v
}

#[test]
fn boot_state() {
    let fw = fw();
    assert_eq!(fw.bootcheck(), fresh_bootcheck());
    assert_eq!(fw.active_task(), Task::Inquiry);
    assert_eq!(fw.hooks().installed_count(), 4);
    assert_eq!(fw.hooks().profile().used_slots, 4);
    for p in fw.pools().all() {
        assert_eq!(p.free_count(&fw.space), p.capacity);
    }
    assert!(fw.sanitize().is_none());
}

#[test]
fn boot_is_deterministic_per_seed() {
    let a = Firmware::boot(FirmwareProfile::default(), 5).unwrap();
    let b = Firmware::boot(FirmwareProfile::default(), 5).unwrap();
    let c = Firmware::boot(FirmwareProfile::default(), 6).unwrap();
    assert!(a.space.contents_eq(&b.space));
    assert_ne!(a.bd_addr(), c.bd_addr());
}

#[test]
fn reset_and_read_buffer_size_over_uart() {
    let mut fw = Firmware::boot(FirmwareProfile::misconfig(), 1).unwrap();
    fw.hci_command(OP_READ_BUFFER_SIZE, &[]).unwrap();
    fw.hci_command(OP_RESET, &[]).unwrap();
    let ev = events(fw.hci_output());
    assert_eq!(ev.len(), 2);
    assert_eq!(ev[0].0, EV_COMMAND_COMPLETE);
    assert_eq!(u16::from_le_bytes([ev[0].1[4], ev[0].1[5]]), 1021);
    assert_eq!(ev[1].1[..4], [1, 0x03, 0x0c, 0]);
    for p in fw.pools().all() {
        assert_eq!(p.free_count(&fw.space), p.capacity);
    }
}

#[test]
fn unknown_command_gets_status() {
    let mut fw = fw();
    fw.hci_command(0xfc4d, &[1, 2]).unwrap();
    let ev = events(fw.hci_output());
    assert_eq!(ev, vec![(EV_COMMAND_STATUS, vec![STATUS_UNKNOWN_COMMAND, 1, 0x4d, 0xfc])]);
}

#[test]
fn eir_in_bounds_is_clean() {
    let mut fw = fw();
    fw.enable_sanitizer().unwrap();
    let body: Vec<u8> = (0..255u32).map(|i| i as u8).collect();
    fw.on_eir(PayloadHeader::new(2, 255), &body).unwrap();
    let ev = events(fw.hci_output());
    assert_eq!(ev.len(), 1);
    assert_eq!(ev[0].0, EV_EXT_INQUIRY_RESULT);
    assert_eq!(ev[0].1, body);
}

#[test]
fn eir_rfu_overflow_detected_on_copy() {
    let mut fw = fw();
    fw.enable_sanitizer().unwrap();
    // The receive hardware rewrites bytes 240.. with the header and a copy of
    // the payload tail, so byte 255 of the buffer comes from byte 11.
    let mut body = vec![0x41u8; 0x400];
    body[11..15].copy_from_slice(&0xdead_beefu32.to_le_bytes());
    let h = PayloadHeader { llid: 2, flow: true, length: 240, rfu: 1 };
    let err = fw.on_eir(h, &body).unwrap_err();
    let FwError::Halt(Halt::Sanitizer(r)) = err else { panic!("{err:?}") };
    assert_eq!(r.pool_addr, layout::EVENT_POOL);
    assert_eq!(r.free_chunk, 0xdead_beef);
    assert_eq!(r.trigger, Trigger::OnCopy);
    assert_eq!(fw.halt_handler(), Some("inq_handleEirRx"));
}

#[test]
fn eir_length_check() {
    let mut fw = fw();
    fw.enable_sanitizer().unwrap();
    fw.on_eir(PayloadHeader::new(2, 300), &[0; 400]).unwrap();
    assert!(fw.hci_output().is_empty());
    assert_eq!(fw.counters().eir_dropped, 1);
    assert_eq!(fw.on_eir(PayloadHeader::new(2, 1), &[0]).map_err(|_| ()), Ok(()));
}

#[test]
fn eir_requires_inquiry_task() {
    let mut fw = target(FirmwareProfile::default());
    assert!(matches!(fw.on_eir(PayloadHeader::new(2, 4), &[0; 4]), Err(FwError::TaskInactive(Task::Inquiry))));
}

fn ble_header_damage(len: usize) -> (usize, Option<SanitizerReport>) {
    let mut fw = target(FirmwareProfile::default());
    fw.disable_sanitizer().unwrap();
    fw.activate_task(Task::LeConn);
    let ble = fw.pools().ble_rx;
    let next = ble.chunk_header(1);
    let before = fw.space.read_bytes(next, 4).unwrap();
    fw.on_ble_pdu(&vec![0xee; len], [0xc1, 0xc2, 0xc3]).unwrap();
    let after = fw.space.read_bytes(next, 4).unwrap();
    let changed = before.iter().zip(&after).filter(|(a, b)| a != b).count();
    (changed, fw.sanitize())
}

#[test]
fn ble_boundary() {
    assert_eq!(ble_header_damage(252), (0, None));
    for (len, n) in [(253, 1), (254, 2), (255, 4)] {
        let (changed, report) = ble_header_damage(len);
        assert_eq!(changed, n, "len {len}");
        assert!(report.is_some());
    }
}

#[test]
fn acl_misconfig_overflow_detected_on_release() {
    let mut fw = target(FirmwareProfile::misconfig());
    let err = fw.on_acl(&[0x77; 400]).unwrap_err();
    let FwError::Halt(Halt::Sanitizer(r)) = err else { panic!("{err:?}") };
    assert_eq!(r.pool_addr, layout::ACL_POOL);
    assert_eq!(r.free_chunk, 0x7777_7777);

    let mut ok = target(FirmwareProfile::default());
    ok.on_acl(&[0x77; 400]).unwrap();
    assert_eq!(ok.counters().acl_sent, 1);
}

#[test]
fn lmp_over_air_and_reply() {
    let mut fw = target(FirmwareProfile::default());
    fw.inject(&air::lmp(0, &[lmp_byte0(37, 0), 9, 0x0f, 0, 1, 0]));
    let r = fw.run_injected(1000).unwrap();
    assert_eq!(r.end, RunEnd::Idle);
    assert!(fw.coverage().contains(b::LMP_VERSION_REPLY));
    fw.advance_time(10_000_000).unwrap();
    assert_eq!(fw.air_log()[0][0], lmp_byte0(LMP_VERSION_RES, 0));
}

#[test]
fn setup_gate_requires_order() {
    let mut fw = target(FirmwareProfile::default());
    for op in [LMP_HOST_CONNECTION_REQ, LMP_TIMING_ACCURACY_REQ, LMP_SETUP_COMPLETE] {
        fw.inject(&air::lmp(0, &[lmp_byte0(op, 0)]));
    }
    fw.run_injected(1000).unwrap();
    assert!(fw.coverage().contains(b::SETUP_FINALIZE));
    assert!(fw.connection(0).unwrap().setup_done);

    let mut fw = target(FirmwareProfile::default());
    for op in [LMP_TIMING_ACCURACY_REQ, LMP_HOST_CONNECTION_REQ, LMP_SETUP_COMPLETE] {
        fw.inject(&air::lmp(0, &[lmp_byte0(op, 0)]));
    }
    fw.run_injected(1000).unwrap();
    assert!(!fw.coverage().contains(b::SETUP_FINALIZE));
}

#[test]
fn bad_lmp_length_is_rejected() {
    let mut fw = target(FirmwareProfile::default());
    fw.inject(&air::lmp(0, &[lmp_byte0(LMP_HOST_CONNECTION_REQ, 0), 0]));
    fw.run_injected(1000).unwrap();
    assert!(fw.coverage().contains(b::LMP_BADLEN));
    assert!(!fw.coverage().contains(b::LMP_SETUP_GATE1));
}

#[test]
fn ble_crc_checked_in_hardware() {
    let mut fw = target(FirmwareProfile::default());
    let init = fw.le_connection().unwrap().crc_init;
    fw.inject(&air::ble(init, 2, &[1, 2, 3, 4]));
    fw.inject(&air::ble_with_crc(2, &[1, 2, 3, 4], [0, 0, 0]));
    fw.run_injected(1000).unwrap();
    assert_eq!(fw.counters().acl_sent, 1);
    assert_eq!(fw.counters().ble_dropped, 1);
}

#[test]
fn multi_frame_acl() {
    let mut fw = target(FirmwareProfile::default());
    let data: Vec<u8> = (0..700u32).map(|i| (i * 7) as u8).collect();
    fw.inject(&air::acl(0, 2, &data));
    fw.run_injected(1000).unwrap();
    let out = fw.hci_output();
    assert_eq!(out[0], H4_ACL);
    assert_eq!(&out[5..], &data[..]);
}

#[test]
fn name_flow_timeout_releases_buffer() {
    let mut fw = target(FirmwareProfile::default());
    let event = fw.pools().event;
    let frags = vec![b"abcdefghijklmn".to_vec(), b"opqrstuvwxyz01".to_vec()];
    let buf = fw.on_remote_name_flow(0, &frags, true).unwrap();
    assert!(event.contains(buf));
    let free = event.free_count(&fw.space);
    fw.advance_time(4_900_000_000).unwrap();
    assert_eq!(event.free_count(&fw.space), free);
    fw.advance_time(200_000_000).unwrap();
    assert_eq!(event.free_count(&fw.space), free + 1);
    assert!(fw.hci_output().iter().all(|_| true));
    assert!(!events(fw.hci_output()).iter().any(|(c, _)| *c == EV_REMOTE_NAME_COMPLETE));
}

#[test]
fn name_flow_completes() {
    let mut fw = target(FirmwareProfile::default());
    let frags = vec![b"abcdefghijklmn".to_vec(), b"opqrstuvwxyz01".to_vec()];
    fw.on_remote_name_flow(0, &frags, false).unwrap();
    let ev = events(fw.hci_output());
    let (_, p) = ev.iter().find(|(c, _)| *c == EV_REMOTE_NAME_COMPLETE).unwrap();
    assert_eq!(&p[7..35], b"abcdefghijklmnopqrstuvwxyz01");
}

#[test]
fn interleaved_name_flows_are_adjacent() {
    let mut fw = target(FirmwareProfile::default());
    fw.establish_connection([2; 6]).unwrap();
    fw.establish_connection([3; 6]).unwrap();
    let event = fw.pools().event;
    let frags = vec![vec![0x61; 14], vec![0x62; 14]];
    let idx: Vec<u32> =
        (0..3).map(|l| event.chunk_index(fw.on_remote_name_flow(l, &frags, true).unwrap()).unwrap()).collect();
    assert_eq!(idx[1], idx[0] + 1);
    assert_eq!(idx[2], idx[1] + 1);
}

#[test]
fn soft_reset_keeps_bootcheck_hard_reset_restores() {
    let mut fw = fw();
    let marker = [0x5au8; 16];
    fw.space.write_bytes(layout::BOOTCHECK, &marker).unwrap();
    for _ in 0..3 {
        fw.hci_reset(ResetKind::Soft).unwrap();
    }
    assert_eq!(fw.bootcheck(), marker);
    fw.hci_reset(ResetKind::Hard).unwrap();
    assert_eq!(fw.bootcheck(), fresh_bootcheck());
    assert_eq!(fw.hooks().installed_count(), 4);
}

#[test]
fn link_key_request_goes_to_host() {
    let mut fw = target(FirmwareProfile::default());
    let mut pdu = vec![lmp_byte0(LMP_AU_RAND, 0)];
    pdu.extend_from_slice(&[9; 16]);
    fw.inject(&air::lmp(0, &pdu));
    fw.run_injected(1000).unwrap();
    let peer = fw.connection(0).unwrap().addr;
    let ev = events(fw.hci_output());
    assert_eq!(ev[0], (EV_LINK_KEY_REQUEST, peer.to_vec()));
    let mut reply = peer.to_vec();
    reply.extend_from_slice(&[0x11; 16]);
    fw.hci_command(OP_LINK_KEY_REQUEST_REPLY, &reply).unwrap();
    assert_eq!(fw.connection(0).unwrap().link_key, Some([0x11; 16]));
    fw.advance_time(2_000_000).unwrap();
    let s = sres(&[0x11; 16], &[9; 16]);
    assert!(fw.air_log().iter().any(|p| p[0] >> 1 == LMP_SRES && p[1..5] == s));
}

#[test]
fn nvram_guard_and_brick() {
    let mut fw = fw();
    assert!(matches!(fw.nvram_write(0x100, &[1], true), Err(FwError::Guard { slot: 0x100 })));
    assert!(!fw.is_bricked());
    fw.nvram_write(0x210, &[1], true).unwrap();
    fw.nvram_write(0x100, &[1], false).unwrap();
    assert!(fw.is_bricked());
    fw.hci_reset(ResetKind::Hard).unwrap();
    assert!(fw.is_bricked());
    fw.uart_rx(&[1, 3, 0x0c, 0]);
    fw.run_until_idle().unwrap();
    assert!(fw.hci_output().is_empty());
}

#[test]
fn coex_writes_drive_wifi_state() {
    let mut fw = fw();
    fw.mmio_write(0x650440, 0).unwrap();
    assert_eq!(fw.wifi_state(), WifiState::Degraded);
    fw.mmio_write(0x650400, 1).unwrap();
    assert_eq!(fw.wifi_state(), WifiState::Panic);
    fw.hci_reset(ResetKind::Hard).unwrap();
    assert_eq!(fw.wifi_state(), WifiState::Panic);
    assert!(fw.mmio_write(0x200000, 0).is_err());
}

#[test]
fn instrumentation_modes_agree() {
    let run = |mode| {
        let mut fw = target(FirmwareProfile::misconfig());
        fw.set_instrumentation_mode(mode).unwrap();
        fw.inject(&air::lmp(0, &[lmp_byte0(37, 0), 9, 0x0f, 0, 1, 0]));
        fw.inject(&air::acl(0, 2, &[0x55; 500]));
        let r = fw.run_injected(1000);
        (r, *fw.coverage(), fw.space.clone())
    };
    let (ra, ca, sa) = run(InstrumentationMode::Inline);
    let (rb, cb, sb) = run(InstrumentationMode::PerEventCallback);
    assert!(matches!(ra, Err(Halt::Sanitizer(_))));
    assert_eq!(ra, rb);
    assert_eq!(ca, cb);
    assert!(sa.contents_eq(&sb));
}

#[test]
fn mode_switch_refused_during_campaign() {
    let mut fw = fw();
    fw.set_campaign_active(true);
    assert!(matches!(fw.set_instrumentation_mode(InstrumentationMode::PerEventCallback), Err(FwError::State(_))));
}

#[test]
fn restore_rolls_back() {
    let reference = target(FirmwareProfile::misconfig());
    let mut fw = reference.clone();
    let _ = fw.on_acl(&[0x77; 400]);
    assert!(!fw.space.contents_eq(&reference.space));
    fw.restore_from(&reference);
    assert!(fw.space.contents_eq(&reference.space));
    assert!(fw.coverage().is_empty());
    assert!(fw.halt_handler().is_none());
}

#[test]
fn traced_hook_records_calls_and_switches() {
    let mut fw = target(FirmwareProfile::default());
    fw.set_tracing(true);
    fw.disable_sanitizer().unwrap();
    fw.install_hook(HookPoint::new(f::ALLOC_OR_DIE).traced()).unwrap();
    fw.inject(&air::lmp(0, &[lmp_byte0(37, 0), 9, 0x0f, 0, 1, 0]));
    fw.run_injected(1000).unwrap();
    let t = fw.take_trace();
    assert!(t
        .iter()
        .any(|l| matches!(l, TraceLine::Call(e) if e.fn_name == "dynamic_memory_AllocateOrDie" && e.ret.is_some())));
    assert!(t.iter().any(|l| matches!(l, TraceLine::ContextSwitch { to, .. } if to == "lm")));
}

#[test]
fn snapshot_boot_round_trip() {
    let fw = fw();
    let (m, blobs) = fw.save_snapshot();
    let again = Firmware::boot_from_snapshot(&m, &blobs, FirmwareProfile::default(), 1).unwrap();
    assert!(again.space.contents_eq(&fw.space));
}
