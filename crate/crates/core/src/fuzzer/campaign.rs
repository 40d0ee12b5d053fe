//! Campaign loop: workers, coverage curve, crash store and corpus.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::corpus::CrashStore;
use super::exec::{ExecConfig, Executor, Outcome, RestoreMode, Verdict, DEFAULT_TICK_BUDGET};
use super::mutate::{blob_packets, mutate, mutate_blob, Population};
use super::packet::{PacketKind, PacketSequence, MAX_PACKETS};
use crate::firmware::{Coverage, FirmwareProfile, FwError};
use crate::hooks::InstrumentationMode;

/// Chunk size the BLOB strategy cuts its byte stream into: the longest
/// LMP PDU.
pub const BLOB_CHUNK: usize = 17;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Sequence,
    Blob,
}

impl FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sequence" => Ok(Strategy::Sequence),
            "blob" => Ok(Strategy::Blob),
            _ => Err(format!("unknown strategy `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CampaignConfig {
    pub profile: String,
    pub seed: u64,
    pub budget: u64,
    pub workers: usize,
    pub strategy: Strategy,
    pub instrumentation: InstrumentationMode,
    /// Packet kinds the mutators may produce; the first is the seed kind.
    pub kinds: Vec<PacketKind>,
    pub tick_budget: u64,
    pub restore: RestoreMode,
    /// A curve row is emitted every this many cases per worker.
    pub sample_every: u64,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        CampaignConfig {
            profile: "default".into(),
            seed: 1,
            budget: 10_000,
            workers: 1,
            strategy: Strategy::Sequence,
            instrumentation: InstrumentationMode::Inline,
            kinds: vec![PacketKind::Lmp, PacketKind::Acl, PacketKind::BlePdu, PacketKind::Eir],
            tick_budget: DEFAULT_TICK_BUDGET,
            restore: RestoreMode::Snapshot,
            sample_every: 100,
        }
    }
}

#[derive(Debug, Error)]
pub enum CampaignError {
    #[error("invalid campaign config: {0}")]
    Config(String),
    #[error(transparent)]
    Firmware(#[from] FwError),
}

impl CampaignConfig {
    pub fn validate(&self) -> Result<FirmwareProfile, CampaignError> {
        if self.budget == 0 {
            return Err(CampaignError::Config("budget must be at least 1".into()));
        }
        if self.workers == 0 {
            return Err(CampaignError::Config("workers must be at least 1".into()));
        }
        if self.kinds.is_empty() {
            return Err(CampaignError::Config("no packet kinds selected".into()));
        }
        if self.sample_every == 0 {
            return Err(CampaignError::Config("sample_every must be at least 1".into()));
        }
        FirmwareProfile::by_name(&self.profile)
            .ok_or_else(|| CampaignError::Config(format!("unknown profile `{}`", self.profile)))
    }

    fn exec_config(&self) -> ExecConfig {
        ExecConfig { tick_budget: self.tick_budget, restore: self.restore, instrumentation: self.instrumentation }
    }
}

#[derive(Debug, Clone, Default)]
struct WorkerResult {
    samples: Vec<(u64, Coverage)>,
    first_seen: BTreeMap<u16, u64>,
    crashes: CrashStore,
    corpus: Vec<PacketSequence>,
    timeouts: u64,
    cases: u64,
}

impl WorkerResult {
    fn observe(&mut self, case: u64, seq: &PacketSequence, v: &Verdict, union: &Coverage) {
        if v.outcome.is_crash() {
            self.crashes.record(seq, v, case);
        }
        if v.outcome == Outcome::Timeout {
            self.timeouts += 1;
        }
        if v.coverage.has_new(union) {
            for b in v.coverage.iter() {
                self.first_seen.entry(b).or_insert(case);
            }
        }
    }
}

fn run_worker(
    profile: FirmwareProfile,
    cfg: &CampaignConfig,
    worker: usize,
    budget: u64,
) -> Result<WorkerResult, FwError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(worker as u64);
    let mut exec = Executor::new(profile, cfg.seed, cfg.exec_config())?;
    let mut out = WorkerResult::default();
    let seed = Population::seed(cfg.kinds[0]);
    let v0 = exec.run(&seed.seqs[0]);
    out.observe(0, &seed.seqs[0], &v0, &Coverage::new());
    match cfg.strategy {
        Strategy::Sequence => {
            let mut pop = seed;
            pop.union = v0.coverage;
            out.samples.push((0, pop.union));
            for case in 1..=budget {
                let cand = mutate(&pop, &cfg.kinds, &mut rng);
                let v = exec.run(&cand);
                out.observe(case, &cand, &v, &pop.union);
                pop.evolve(cand, &v.coverage);
                if case % cfg.sample_every == 0 || case == budget {
                    out.samples.push((case, pop.union));
                }
            }
            out.corpus = pop.seqs;
        }
        Strategy::Blob => {
            let kind = cfg.kinds[0];
            let mut blobs = vec![seed.seqs[0].packets[0].payload.clone()];
            let mut union = v0.coverage;
            out.samples.push((0, union));
            for case in 1..=budget {
                let (_, _, blob) = mutate_blob(&blobs, BLOB_CHUNK, BLOB_CHUNK * MAX_PACKETS, &mut rng);
                let seq = blob_packets(&blob, BLOB_CHUNK, kind);
                let v = exec.run(&seq);
                out.observe(case, &seq, &v, &union);
                if v.coverage.has_new(&union) {
                    union.union_with(&v.coverage);
                    blobs.push(blob);
                }
                if case % cfg.sample_every == 0 || case == budget {
                    out.samples.push((case, union));
                }
            }
            out.corpus = blobs.iter().map(|b| blob_packets(b, BLOB_CHUNK, kind)).collect();
        }
    }
    out.cases = budget;
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct CampaignResult {
    /// `(testcases, cumulative blocks)` rows, starting with the baseline.
    pub curve: Vec<(u64, usize)>,
    pub coverage: Coverage,
    /// First case that covered each block. With several workers, cases are
    /// numbered as if the workers ran round-robin.
    pub first_seen: BTreeMap<u16, u64>,
    pub crashes: CrashStore,
    pub corpus: Vec<PacketSequence>,
    pub cases: u64,
    pub timeouts: u64,
    pub elapsed: Duration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignSummary {
    pub cases: u64,
    pub cases_per_sec: f64,
    pub unique_crashes: usize,
    pub total_crashes: u64,
    pub timeouts: u64,
    pub final_blocks: usize,
    pub corpus_size: usize,
}

impl CampaignResult {
    pub fn reached(&self, block: u16) -> Option<u64> {
        self.first_seen.get(&block).copied()
    }

    pub fn final_blocks(&self) -> usize {
        self.coverage.len()
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("testcases,blocks\n");
        for (t, b) in &self.curve {
            let _ = writeln!(s, "{t},{b}");
        }
        s
    }

    pub fn summary(&self) -> CampaignSummary {
        let secs = self.elapsed.as_secs_f64();
        CampaignSummary {
            cases: self.cases,
            cases_per_sec: if secs > 0.0 { self.cases as f64 / secs } else { 0.0 },
            unique_crashes: self.crashes.len(),
            total_crashes: self.crashes.total(),
            timeouts: self.timeouts,
            final_blocks: self.final_blocks(),
            corpus_size: self.corpus.len(),
        }
    }
}

/// Runs a campaign. Each worker owns its firmware and an RNG stream derived
/// from the seed; results merge independently of completion order.
pub fn run_campaign(cfg: &CampaignConfig) -> Result<CampaignResult, CampaignError> {
    let profile = cfg.validate()?;
    let start = Instant::now();
    let n = cfg.workers as u64;
    let budgets: Vec<u64> = (0..n).map(|w| cfg.budget / n + u64::from(w < cfg.budget % n)).collect();
    let results: Vec<WorkerResult> = if cfg.workers == 1 {
        vec![run_worker(profile, cfg, 0, cfg.budget)?]
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = budgets
                .iter()
                .enumerate()
                .map(|(w, &b)| {
                    let p = profile.clone();
                    s.spawn(move || run_worker(p, cfg, w, b))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect::<Result<Vec<_>, _>>()
        })?
    };
    Ok(merge_results(results, start.elapsed()))
}

fn merge_results(results: Vec<WorkerResult>, elapsed: Duration) -> CampaignResult {
    let n = results.len() as u64;
    let rows = results.iter().map(|r| r.samples.len()).max().unwrap_or(0);
    let mut curve = Vec::with_capacity(rows);
    let mut coverage = Coverage::new();
    for i in 0..rows {
        let mut cases = 0;
        let mut cov = Coverage::new();
        for r in &results {
            let (c, s) = &r.samples[i.min(r.samples.len() - 1)];
            cases += c;
            cov.union_with(s);
        }
        curve.push((cases, cov.len()));
        coverage = cov;
    }
    let mut first_seen = BTreeMap::new();
    let mut crashes = CrashStore::new();
    let mut corpus = Vec::new();
    let (mut cases, mut timeouts) = (0, 0);
    for (w, r) in results.into_iter().enumerate() {
        for (b, c) in r.first_seen {
            let global = c * n + w as u64;
            first_seen.entry(b).and_modify(|x: &mut u64| *x = (*x).min(global)).or_insert(global);
        }
        crashes.merge(&r.crashes);
        corpus.extend(r.corpus);
        cases += r.cases;
        timeouts += r.timeouts;
    }
    CampaignResult { curve, coverage, first_seen, crashes, corpus, cases, timeouts, elapsed }
}
