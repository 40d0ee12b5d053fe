use btfuzz::hci::{history_digest, Countermeasure, HostOracle, ResponseCache};
use btfuzz::scenario::{self, probe_link_key, Demo, Transcript};

#[test]
fn disclosure_depends_only_on_countermeasure() {
    assert!(probe_link_key(Countermeasure::Off).unwrap().disclosed);
    assert!(!probe_link_key(Countermeasure::ActiveOnly).unwrap().disclosed);
    let d = probe_link_key(Countermeasure::Delay { ns: 5_000_000 }).unwrap();
    assert!(d.disclosed);
    assert!(d.latency_ns.unwrap() >= 5_000_000);
}

#[test]
fn cache_starts_empty() {
    let host = HostOracle::new(Countermeasure::Off);
    assert!(host.cache.is_empty());
    let c = ResponseCache::default();
    assert_eq!((c.hits, c.misses), (0, 0));
    assert_ne!(history_digest(&[]), [0u8; 32]);
}

#[test]
fn every_demo_runs_from_outside_the_crate() {
    for d in Demo::ALL {
        let mut t = Transcript::default();
        scenario::run(d, &mut t).unwrap_or_else(|e| panic!("{d}: {e}"));
        assert!(!t.lines.is_empty());
    }
}
