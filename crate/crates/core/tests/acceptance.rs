//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use btfuzz::firmware::layout::{b, lmp_byte0, BOOTCHECK, BOOTCHECK_LEN};
use btfuzz::firmware::{fresh_bootcheck, Firmware, FirmwareProfile, ResetKind, Task};
use btfuzz::fuzzer::corpus::{read_meta, read_sequence};
use btfuzz::fuzzer::{
    run_campaign, CampaignConfig, ExecConfig, Executor, Packet, PacketKind, PacketSequence, ReplayContext, Strategy,
};
use btfuzz::hci::Countermeasure;
use btfuzz::heap::{AllocMode, BlocPool, Trigger};
use btfuzz::hooks::{HookError, HookPoint, InstrumentationMode};
use btfuzz::memory::{AddressSpace, Segment};
use btfuzz::modem::{
    crc24, phase_flags, solve_crc_adjust, AdjustSystem, ByteSource, Crc24State, Crc8, LinearCrc, Modem, PhyFlags,
    SolverError,
};
use btfuzz::scenario::{self, probe_link_key, Demo, Transcript, PLANTED};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// 1 -----------------------------------------------------------------------

/// Brute-force free list: chunk indices, head last.
struct FreeList {
    free: Vec<u32>,
}

impl FreeList {
    fn new(cap: u32) -> Self {
        FreeList { free: (0..cap).rev().collect() }
    }
}

fn walk(pool: &BlocPool, space: &AddressSpace) -> Vec<u32> {
    let mut out = Vec::new();
    let mut e = pool.free_head(space).unwrap();
    while e != 0 && out.len() <= pool.capacity as usize {
        out.push(e);
        e = space.read_u32(e).unwrap();
    }
    out
}

fn heap_oracle() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x4ea9);
    let mut steps = 0u64;
    for seq in 0..10_000 {
        let mut space = AddressSpace::with_segments([Segment::ram("ram", 0x200000, 0x28000)]).unwrap();
        let cap = rng.gen_range(1..=16u32);
        let size = rng.gen_range(1..=0x40u32) * 4;
        let pool = BlocPool::create(&mut space, 0x200100, 0x201000, size, cap).unwrap();
        let mut model = FreeList::new(cap);
        let mut live: Vec<u32> = Vec::new();
        for _ in 0..rng.gen_range(1..64) {
            if live.is_empty() || rng.gen_bool(0.55) {
                let got = pool.allocate(&mut space, AllocMode::OrNull).map_err(|e| e.to_string())?;
                let want = model.free.pop().map(|i| pool.chunk_header(i) + 4);
                ensure(got == want, || format!("sequence {seq}: allocate gave {got:x?}, model {want:x?}"))?;
                live.extend(got);
            } else {
                let a = live.swap_remove(rng.gen_range(0..live.len()));
                pool.release(&mut space, a).map_err(|e| e.to_string())?;
                model.free.push(pool.chunk_index(a).unwrap());
            }
            let want: Vec<u32> = model.free.iter().rev().map(|&i| pool.chunk_header(i)).collect();
            ensure(walk(&pool, &space) == want, || format!("sequence {seq}: free list diverged from model"))?;
            ensure(pool.free_count(&space) == model.free.len() as u32, || format!("sequence {seq}: free count"))?;
            steps += 1;
        }
    }
    let t = start.elapsed();
    ensure(t < Duration::from_secs(10), || format!("took {t:?}"))?;
    Ok(format!("10000 sequences, {steps} steps state-for-state in {t:.2?}"))
}

// 2 -----------------------------------------------------------------------

fn dump_ok(dump: &str) -> Result<(), String> {
    let lines: Vec<&str> = dump.lines().collect();
    ensure(lines.first() == Some(&"Heap Corruption Detected"), || "missing header line".into())?;
    let keys = ["pool", "pool->block_start", "pool->capacity", "pool->size", "free_chunk"];
    ensure(lines.len() == 1 + keys.len(), || format!("expected {} lines, got {}", 1 + keys.len(), lines.len()))?;
    for (line, key) in lines[1..].iter().zip(keys) {
        let v =
            line.strip_prefix(key).and_then(|r| r.strip_prefix(" = 0x")).ok_or_else(|| format!("bad line `{line}`"))?;
        u32::from_str_radix(v, 16).map_err(|_| format!("bad hex in `{line}`"))?;
    }
    Ok(())
}

fn sanitizer_detection() -> Check {
    let mut parts = Vec::new();
    for d in [Demo::Eir, Demo::BlePdu, Demo::Acl] {
        let start = Instant::now();
        let mut t = Transcript::default();
        scenario::run(d, &mut t).map_err(|e| format!("{d}: {e}"))?;
        let took = start.elapsed();
        let r = t.report.ok_or_else(|| format!("{d}: no report"))?;
        dump_ok(&r.to_string()).map_err(|e| format!("{d}: {e}"))?;
        ensure(r.free_chunk == PLANTED, || format!("{d}: free_chunk 0x{:x}", r.free_chunk))?;
        ensure(matches!(r.trigger, Trigger::OnCopy | Trigger::OnRelease | Trigger::OnAlloc), || {
            format!("{d}: trigger {}", r.trigger)
        })?;
        ensure(took < Duration::from_secs(1), || format!("{d}: took {took:?}"))?;
        parts.push(format!("{d} {} {took:.1?}", r.trigger));
    }
    Ok(parts.join(", "))
}

// 3 -----------------------------------------------------------------------

fn write_what_where() -> Check {
    let base = Firmware::boot(FirmwareProfile::default(), 3).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x3333);
    let mut ok = 0;
    for _ in 0..100 {
        let mut fw = base.clone();
        let target = rng.gen_range(0x300010..0x31fff0u32);
        let payload: [u8; 4] = rng.gen();
        let pool = fw.pools().ble_rx;
        let rec = pool.www_scenario(&mut fw.space, target, &payload).map_err(|e| format!("0x{target:x}: {e}"))?;
        let landed = fw.space.read_bytes(target, 4).map_err(|e| e.to_string())?;
        if rec.second_alloc == target && landed == payload {
            ok += 1;
        }
    }
    ensure(ok == 100, || format!("{ok}/100"))?;
    Ok("100/100 targets".into())
}

// 4 -----------------------------------------------------------------------

fn crc_solver() -> Check {
    let mut systems = 0u64;
    let mut prefixes: Vec<Vec<u8>> = vec![Vec::new()];
    prefixes.extend((0..=255u8).map(|a| vec![a]));
    prefixes.extend((0..=0xffffu32).map(|v| vec![v as u8, (v >> 8) as u8]));
    for p in &prefixes {
        let sys = AdjustSystem::new(&Crc8, 0, p, 1, &[], None).map_err(|e| e.to_string())?;
        let mut reach = [false; 256];
        let mut msg = p.clone();
        msg.push(0);
        for a in 0..=255u8 {
            *msg.last_mut().unwrap() = a;
            reach[Crc8.compute(0, &msg) as usize] = true;
        }
        for t in 0..256u32 {
            match sys.solve(t) {
                Ok(adj) => {
                    *msg.last_mut().unwrap() = adj[0];
                    ensure(Crc8.compute(0, &msg) == t, || format!("prefix {p:02x?} target {t:02x}: wrong answer"))?;
                }
                Err(_) => {
                    ensure(!reach[t as usize], || format!("prefix {p:02x?} target {t:02x}: reachable but refused"))?
                }
            }
        }
        systems += 1;
    }
    // A nibble-wide adjust cannot reach most targets; every refusal must say
    // so, with the rank.
    let mut deficient = 0;
    for p in 0..=255u8 {
        let sys = AdjustSystem::new(&Crc8, 0, &[p], 1, &[], Some(&[0x0f])).map_err(|e| e.to_string())?;
        let reach: Vec<u32> = (0..16u8).map(|a| Crc8.compute(0, &[p, a])).collect();
        for t in 0..256u32 {
            match sys.solve(t) {
                Ok(adj) => {
                    ensure(adj[0] & 0xf0 == 0 && Crc8.compute(0, &[p, adj[0]]) == t, || "masked solve wrong".into())?
                }
                Err(SolverError::Inconsistent { rank, width: 8 }) if rank < 8 => {
                    ensure(!reach.contains(&t), || "masked solve refused reachable target".into())?;
                    deficient += 1;
                }
                Err(e) => return Err(format!("masked solve: {e}")),
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x24);
    let mut ok = 0;
    for _ in 0..1000 {
        let st = Crc24State::new(rng.gen());
        let p: Vec<u8> = (0..rng.gen_range(0..64)).map(|_| rng.gen()).collect();
        let s: Vec<u8> = (0..rng.gen_range(0..16)).map(|_| rng.gen()).collect();
        let t: [u8; 3] = rng.gen();
        if let Ok(adj) = solve_crc_adjust(st, &p, &s, t) {
            let mut m = p.clone();
            m.extend_from_slice(&adj);
            m.extend_from_slice(&s);
            if crc24(st, &m) == t {
                ok += 1;
            }
        }
    }
    ensure(ok == 1000, || format!("CRC-24 {ok}/1000"))?;
    Ok(format!("CRC-8 {systems} systems x 256 targets exact, {deficient} rank-deficient refusals, CRC-24 1000/1000"))
}

// 5 -----------------------------------------------------------------------

fn ble_boundary() -> Check {
    let base = Firmware::fuzz_target(FirmwareProfile::default(), 5).map_err(|e| e.to_string())?;
    let crc = [0xc1, 0xc2, 0xc3];
    let mut out = Vec::new();
    for len in 252..=255usize {
        let mut fw = base.clone();
        fw.disable_sanitizer().map_err(|e| e.to_string())?;
        fw.activate_task(Task::LeConn);
        let next = fw.pools().ble_rx.chunk_header(1);
        let before = fw.space.read_bytes(next, 4).unwrap();
        let pdu: Vec<u8> = (0..len).map(|i| 0x80 | (i as u8 & 0x3f)).collect();
        fw.on_ble_pdu(&pdu, crc).map_err(|e| e.to_string())?;
        let after = fw.space.read_bytes(next, 4).unwrap();
        let mut expect: Vec<u8> = pdu[252..].to_vec();
        if len == 255 {
            expect.push(crc[0]);
        }
        expect.extend_from_slice(&before[expect.len()..]);
        ensure(after == expect, || format!("len {len}: header {after:02x?}, expected {expect:02x?}"))?;
        let changed = before.iter().zip(&after).filter(|(a, b)| a != b).count();
        ensure(changed == [0, 1, 2, 4][len - 252], || format!("len {len}: {changed} bytes changed"))?;
        ensure((fw.sanitize().is_some()) == (len > 252), || format!("len {len}: sanitizer disagrees"))?;
        out.push(format!("{len}:{changed}"));
    }
    Ok(format!("header bytes changed {}", out.join(" ")))
}

// 6 -----------------------------------------------------------------------

fn strategy_separation() -> Check {
    let start = Instant::now();
    let (mut seq_reach, mut blob_reach, mut wins) = (0, 0, 0);
    for seed in 0..20u64 {
        let cfg = |strategy| CampaignConfig {
            seed,
            budget: 100_000,
            strategy,
            kinds: vec![PacketKind::Lmp],
            ..Default::default()
        };
        let s = run_campaign(&cfg(Strategy::Sequence)).map_err(|e| e.to_string())?;
        let bl = run_campaign(&cfg(Strategy::Blob)).map_err(|e| e.to_string())?;
        seq_reach += s.reached(b::SETUP_FINALIZE).is_some() as u32;
        blob_reach += bl.reached(b::SETUP_FINALIZE).is_some() as u32;
        wins += (s.final_blocks() >= bl.final_blocks()) as u32;
    }
    let t = start.elapsed();
    let detail =
        format!("sequence reached {seq_reach}/20, blob {blob_reach}/20, sequence >= blob blocks {wins}/20, {t:.0?}");
    ensure(seq_reach >= 18 && blob_reach <= 5 && wins >= 18 && t < Duration::from_secs(600), || detail.clone())?;
    Ok(detail)
}

// 7 -----------------------------------------------------------------------

fn workload(n: usize) -> Vec<PacketSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x77);
    (0..n)
        .map(|_| {
            let k = rng.gen_range(1..=4);
            let packets = (0..k)
                .map(|_| {
                    let kind = [PacketKind::Acl, PacketKind::BlePdu, PacketKind::Lmp][rng.gen_range(0..3)];
                    let len = match kind {
                        PacketKind::Lmp => rng.gen_range(1..=17),
                        PacketKind::BlePdu => rng.gen_range(1..=255),
                        _ => rng.gen_range(1..=600),
                    };
                    let mut payload: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
                    if kind == PacketKind::Lmp {
                        payload[0] = lmp_byte0(rng.gen_range(1..64), 0);
                    }
                    Packet::new(kind, payload)
                })
                .collect();
            PacketSequence::new(packets)
        })
        .collect()
}

fn instrumentation_overhead() -> Check {
    let cases = workload(2000);
    let exec = |mode| {
        Executor::new(FirmwareProfile::misconfig(), 7, ExecConfig { instrumentation: mode, ..Default::default() })
    };
    let mut inline = exec(InstrumentationMode::Inline).map_err(|e| e.to_string())?;
    let mut callback = exec(InstrumentationMode::PerEventCallback).map_err(|e| e.to_string())?;
    for (i, c) in cases.iter().take(100).enumerate() {
        let a = inline.run(c);
        let b = callback.run(c);
        ensure(a == b, || format!("case {i}: verdicts differ"))?;
        ensure(inline.firmware().space.contents_eq(&callback.firmware().space), || {
            format!("case {i}: memory differs")
        })?;
    }
    let time = |e: &mut Executor| {
        let start = Instant::now();
        for c in &cases {
            std::hint::black_box(e.run(c));
        }
        start.elapsed()
    };
    // Best of five interleaved rounds per mode.
    let (mut ti, mut tc) = (Duration::MAX, Duration::MAX);
    for _ in 0..5 {
        ti = ti.min(time(&mut inline));
        tc = tc.min(time(&mut callback));
    }
    let ratio = tc.as_secs_f64() / ti.as_secs_f64();
    let detail = format!("inline {ti:.2?}, per_event_callback {tc:.2?}, ratio {ratio:.1}x; 100 cases identical");
    ensure(ratio >= 3.0, || detail.clone())?;
    Ok(detail)
}

// 8 -----------------------------------------------------------------------

fn soft_reset_persistence() -> Check {
    let mut fw = Firmware::boot(FirmwareProfile::default(), 8).map_err(|e| e.to_string())?;
    let marker: Vec<u8> = (0..BOOTCHECK_LEN as u8).map(|i| 0xc0 ^ i).collect();
    fw.space.write_bytes(BOOTCHECK, &marker).map_err(|e| e.to_string())?;
    for i in 0..100 {
        fw.hci_reset(ResetKind::Soft).map_err(|e| e.to_string())?;
        ensure(fw.bootcheck()[..] == marker[..], || format!("marker lost after soft reset {}", i + 1))?;
    }
    fw.hci_reset(ResetKind::Hard).map_err(|e| e.to_string())?;
    ensure(fw.bootcheck() == fresh_bootcheck(), || "hard reset did not restore bootcheck".into())?;
    Ok("marker kept over 100 soft resets, cleared by hard reset".into())
}

// 9 -----------------------------------------------------------------------

fn link_key_flow() -> Check {
    let e = |x: scenario::ScenarioError| x.to_string();
    let off = probe_link_key(Countermeasure::Off).map_err(e)?;
    let active = probe_link_key(Countermeasure::ActiveOnly).map_err(e)?;
    let delay_ns = 25_000_000;
    let delayed = probe_link_key(Countermeasure::Delay { ns: delay_ns }).map_err(e)?;
    ensure(off.disclosed, || "off: key not disclosed".into())?;
    ensure(!active.disclosed, || "active_only: key disclosed".into())?;
    ensure(delayed.disclosed, || "delay: key not disclosed".into())?;
    let base = off.latency_ns.ok_or("off: no reply timing")?;
    let lat = delayed.latency_ns.ok_or("delay: no reply timing")?;
    let added = lat - base;
    let tick = btfuzz::modem::TICK_NS;
    ensure(added + tick >= delay_ns && added <= delay_ns + tick, || format!("added latency {added} ns"))?;
    Ok(format!("off discloses, active_only denies, delay adds {:.3} ms", added as f64 / 1e6))
}

// 10 ----------------------------------------------------------------------

fn fill_patchram(profile: FirmwareProfile) -> Result<(usize, u32), String> {
    let mut fw = Firmware::boot(profile, 1).map_err(|e| e.to_string())?;
    let ids: Vec<_> = fw.hooks().table().ids().collect();
    for id in ids {
        match fw.install_hook(HookPoint::new(id)) {
            Ok(_) => {}
            Err(HookError::AlreadyHooked(_)) => {}
            Err(HookError::SlotBudget { .. }) => {
                let p = fw.hooks().profile();
                return Ok((fw.hooks().installed_count() + 1, p.used_slots));
            }
            Err(e) => return Err(e.to_string()),
        }
    }
    Err("table exhausted before the budget".into())
}

fn patchram_budget() -> Check {
    let (n128, used128) = fill_patchram(FirmwareProfile::patchram128())?;
    let (n256, used256) = fill_patchram(FirmwareProfile::default())?;
    ensure(n128 == 129 && used128 == 128, || format!("128-slot profile: install {n128} failed at {used128} used"))?;
    ensure(n256 == 257 && used256 == 256, || format!("256-slot profile: install {n256} failed at {used256} used"))?;
    Ok("install 129 fails on 128 slots, install 257 fails on 256 (system hooks counted)".into())
}

// 11 ----------------------------------------------------------------------

fn determinism_and_replay() -> Check {
    let cfg = CampaignConfig { profile: "misconfig".into(), seed: 0x5eed, budget: 30_000, ..Default::default() };
    let a = run_campaign(&cfg).map_err(|e| e.to_string())?;
    let b = run_campaign(&cfg).map_err(|e| e.to_string())?;
    ensure(a.csv() == b.csv(), || "coverage CSV differs between runs".into())?;
    ensure(!a.crashes.is_empty(), || "no crashes to replay".into())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ctx = ReplayContext { profile: cfg.profile.clone(), seed: cfg.seed, tick_budget: cfg.tick_budget };
    let files = a.crashes.write(dir.path(), &ctx).map_err(|e| e.to_string())?;
    for f in &files {
        let seq = read_sequence(f).map_err(|e| e.to_string())?;
        let meta = read_meta(f).map_err(|e| e.to_string())?.ok_or("missing sidecar")?;
        let profile = FirmwareProfile::by_name(&meta.context.profile).ok_or("profile")?;
        let mut ex = Executor::new(
            profile,
            meta.context.seed,
            ExecConfig { tick_budget: meta.context.tick_budget, ..Default::default() },
        )
        .map_err(|e| e.to_string())?;
        let v = ex.run(&seq);
        ensure(v.signature == meta.signature, || format!("{}: replayed {}", meta.signature, v.signature))?;
    }
    Ok(format!("CSV identical ({} rows), {} archived crashes replay to their signatures", a.curve.len(), files.len()))
}

// 12 ----------------------------------------------------------------------

/// Source of random bytes that counts reads.
struct Counting {
    rng: ChaCha8Rng,
    last: usize,
}

impl ByteSource for Counting {
    fn read(&mut self, buf: &mut [u8]) -> usize {
        self.rng.fill(buf);
        self.last = buf.len();
        buf.len()
    }
}

fn phase_machine() -> Check {
    let table = [
        (PhyFlags::RX_HDR_DONE, 4),
        (PhyFlags::RX_DONE | PhyFlags::SLOT_01_INT, 240),
        (PhyFlags::TX_DONE, 0),
        (PhyFlags::SLOT_11_INT, 0),
    ];
    let start = Instant::now();
    let mut m = Modem::new();
    let mut src = Counting { rng: ChaCha8Rng::seed_from_u64(12), last: 0 };
    for _ in 0..1_000_000 {
        src.last = 0;
        let ev = m.tick(&mut src).map_err(|e| e.to_string())?;
        let (flags, bytes) = table[(ev.ticks % 4) as usize];
        ensure(ev.flags == flags && phase_flags(ev.ticks) == flags, || {
            format!("tick {}: flags {:?}", ev.ticks, ev.flags)
        })?;
        ensure(src.last == bytes, || format!("tick {}: read {} bytes", ev.ticks, src.last))?;
    }
    let t = start.elapsed();
    ensure(t < Duration::from_secs(1), || format!("took {t:?}"))?;
    Ok(format!("1000000 ticks match the table in {t:.2?}"))
}

fn main() -> ExitCode {
    let checks: [Criterion; 12] = [
        ("heap oracle equivalence", heap_oracle),
        ("sanitizer detection", sanitizer_detection),
        ("write-what-where", write_what_where),
        ("CRC solver", crc_solver),
        ("BLE PDU boundary", ble_boundary),
        ("strategy separation", strategy_separation),
        ("instrumentation overhead", instrumentation_overhead),
        ("soft-reset persistence", soft_reset_persistence),
        ("link-key flow", link_key_flow),
        ("patchram budget", patchram_budget),
        ("determinism and replay", determinism_and_replay),
        ("phase machine", phase_machine),
    ];
    let mut failed = 0;
    for (i, (name, f)) in checks.iter().enumerate() {
        match f() {
            Ok(d) => println!("PASS {:>2} {name}: {d}", i + 1),
            Err(d) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {d}", i + 1);
            }
        }
    }
    println!("{} of {} criteria pass", checks.len() - failed, checks.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
