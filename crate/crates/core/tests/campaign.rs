use btfuzz::firmware::FirmwareProfile;
use btfuzz::fuzzer::corpus::{read_corpus, write_corpus};
use btfuzz::fuzzer::{run_campaign, CampaignConfig, ExecConfig, Executor, PacketKind, Strategy};

fn small(seed: u64) -> CampaignConfig {
    CampaignConfig { seed, budget: 3000, ..Default::default() }
}

#[test]
fn corpus_survives_disk_and_replays_identically() {
    let r = run_campaign(&small(4)).unwrap();
    assert!(!r.corpus.is_empty());
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), &r.corpus).unwrap();
    let back = read_corpus(dir.path()).unwrap();
    assert_eq!(back, r.corpus);

    let mut a = Executor::new(FirmwareProfile::default(), 4, ExecConfig::default()).unwrap();
    let mut b = Executor::new(FirmwareProfile::default(), 4, ExecConfig::default()).unwrap();
    for s in &back {
        assert_eq!(a.run(s), b.run(s));
    }
}

#[test]
fn restore_isolates_cases() {
    let r = run_campaign(&small(9)).unwrap();
    let seqs = &r.corpus;
    let mut warm = Executor::new(FirmwareProfile::default(), 9, ExecConfig::default()).unwrap();
    for s in seqs {
        warm.run(s);
    }
    let last = seqs.last().unwrap();
    let after_many = warm.run(last);
    let mut cold = Executor::new(FirmwareProfile::default(), 9, ExecConfig::default()).unwrap();
    assert_eq!(after_many, cold.run(last));
    assert!(warm.firmware().space.contents_eq(&cold.firmware().space));
}

#[test]
fn multi_worker_campaign_is_reproducible() {
    let cfg = CampaignConfig { workers: 2, ..small(5) };
    let a = run_campaign(&cfg).unwrap();
    let b = run_campaign(&cfg).unwrap();
    assert_eq!(a.csv(), b.csv());
    assert_eq!(a.summary().cases, 3000);
}

#[test]
fn blob_and_sequence_both_run_every_kind() {
    for strategy in [Strategy::Sequence, Strategy::Blob] {
        for kind in [PacketKind::Lmp, PacketKind::Acl, PacketKind::BlePdu, PacketKind::Eir] {
            let cfg = CampaignConfig { strategy, kinds: vec![kind], budget: 500, ..Default::default() };
            let r = run_campaign(&cfg).unwrap();
            assert!(r.final_blocks() > 0, "{strategy:?} {kind:?}");
        }
    }
}
