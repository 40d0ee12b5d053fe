use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use btfuzz::firmware::layout::b;
use btfuzz::firmware::{Firmware, FirmwareProfile};
use btfuzz::fuzzer::corpus::{self, read_meta, read_sequence};
use btfuzz::fuzzer::{
    run_campaign, CampaignConfig, CampaignSummary, ExecConfig, Executor, PacketKind, ReplayContext, RestoreMode,
    Strategy, DEFAULT_TICK_BUDGET,
};
use btfuzz::hooks::InstrumentationMode;
use btfuzz::memory::{read_snapshot_dir, write_snapshot_dir};
use btfuzz::scenario::{self, Demo, Transcript};

/// Env var that overrides the output directory of `fuzz`.
const OUT_ENV: &str = "BTFUZZ_OUT";

#[derive(Parser)]
#[command(name = "btfuzz", version, about = "Emulated Bluetooth controller fuzzer")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a fuzzing campaign.
    Fuzz(FuzzArgs),
    /// Re-run an archived sequence and print its verdict.
    Replay(ReplayArgs),
    /// Summarize the coverage of one or more campaign output directories.
    CovReport(CovArgs),
    /// Snapshot manifests.
    #[command(subcommand)]
    Snapshot(SnapshotCmd),
    /// Run a scripted scenario.
    Demo {
        /// eir, ble_pdu, acl, www, linkkey, coex, brick, softreset or all
        name: String,
    },
}

#[derive(Args)]
struct FuzzArgs {
    /// TOML file with campaign settings; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    profile: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    budget: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long)]
    instrumentation: Option<InstrumentationMode>,
    /// Comma-separated packet kinds; the first is the seed kind.
    #[arg(long, value_delimiter = ',')]
    kinds: Option<Vec<PacketKind>>,
    #[arg(long)]
    tick_budget: Option<u64>,
    /// Boot a fresh instance for every case instead of restoring a snapshot.
    #[arg(long)]
    fresh_boot: bool,
    #[arg(long)]
    sample_every: Option<u64>,
    #[arg(long, env = OUT_ENV)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReplayArgs {
    /// A `.btsq` file, optionally with a `.json` sidecar from the crash store.
    file: PathBuf,
    /// Used when there is no sidecar.
    #[arg(long, default_value = "default")]
    profile: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_TICK_BUDGET)]
    tick_budget: u64,
}

#[derive(Args)]
struct CovArgs {
    /// Campaign output directories.
    #[arg(required = true)]
    dirs: Vec<PathBuf>,
    /// List every covered block.
    #[arg(long)]
    blocks: bool,
}

#[derive(Subcommand)]
enum SnapshotCmd {
    /// Print the segment table of a snapshot directory.
    Inspect { dir: PathBuf },
    /// Boot a profile and write its snapshot.
    Save {
        dir: PathBuf,
        #[arg(long, default_value = "default")]
        profile: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct FileConfig {
    #[serde(flatten)]
    campaign: CampaignConfig,
    out: Option<PathBuf>,
}

/// Failures are split into usage problems (exit 2) and failed checks
/// (exit 1).
enum Failure {
    Usage(anyhow::Error),
    Check(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Usage(e.into())
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let r = match cli.cmd {
        Cmd::Fuzz(a) => fuzz(a),
        Cmd::Replay(a) => replay(a),
        Cmd::CovReport(a) => cov_report(a),
        Cmd::Snapshot(c) => snapshot(c),
        Cmd::Demo { name } => demo(&name),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn campaign_config(a: &FuzzArgs) -> Result<(CampaignConfig, PathBuf)> {
    let file = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<FileConfig>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => FileConfig::default(),
    };
    let mut c = file.campaign;
    if let Some(v) = &a.profile {
        c.profile = v.clone();
    }
    if let Some(v) = a.seed {
        c.seed = v;
    }
    if let Some(v) = a.budget {
        c.budget = v;
    }
    if let Some(v) = a.workers {
        c.workers = v;
    }
    if let Some(v) = a.strategy {
        c.strategy = v;
    }
    if let Some(v) = a.instrumentation {
        c.instrumentation = v;
    }
    if let Some(v) = &a.kinds {
        c.kinds = v.clone();
    }
    if let Some(v) = a.tick_budget {
        c.tick_budget = v;
    }
    if a.fresh_boot {
        c.restore = RestoreMode::FreshBoot;
    }
    if let Some(v) = a.sample_every {
        c.sample_every = v;
    }
    let out = a.out.clone().or(file.out).unwrap_or_else(|| PathBuf::from("btfuzz-out"));
    Ok((c, out))
}

/// Per-block record written next to the curve.
#[derive(Debug, Serialize, Deserialize)]
struct BlockInfo {
    id: u16,
    name: String,
    first_case: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Summary {
    config: CampaignConfig,
    #[serde(flatten)]
    summary: CampaignSummary,
    elapsed_secs: f64,
    order_gated_handler_case: Option<u64>,
}

fn fuzz(a: FuzzArgs) -> CmdResult {
    let (cfg, out) = campaign_config(&a)?;
    cfg.validate()?;
    let r = run_campaign(&cfg).map_err(|e| Failure::Check(e.into()))?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    corpus::write_corpus(&out.join("corpus"), &r.corpus)?;
    let ctx = ReplayContext { profile: cfg.profile.clone(), seed: cfg.seed, tick_budget: cfg.tick_budget };
    r.crashes.write(&out.join("crashes"), &ctx)?;
    fs::write(out.join("coverage.csv"), r.csv())?;
    let blocks: Vec<BlockInfo> = r
        .coverage
        .iter()
        .map(|id| BlockInfo { id, name: b::name(id), first_case: r.first_seen.get(&id).copied().unwrap_or(0) })
        .collect();
    fs::write(out.join("blocks.json"), serde_json::to_string_pretty(&blocks)? + "\n")?;
    let s = Summary {
        config: cfg.clone(),
        summary: r.summary(),
        elapsed_secs: r.elapsed.as_secs_f64(),
        order_gated_handler_case: r.reached(b::SETUP_FINALIZE),
    };
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&s)? + "\n")?;
    let m = &s.summary;
    println!("cases: {} ({:.0}/s)", m.cases, m.cases_per_sec);
    println!("final blocks: {}", m.final_blocks);
    println!("corpus: {}", m.corpus_size);
    println!("unique crashes: {} ({} total), timeouts: {}", m.unique_crashes, m.total_crashes, m.timeouts);
    for sig in r.crashes.entries.keys() {
        println!("  {sig}");
    }
    println!("output: {}", out.display());
    Ok(())
}

fn replay(a: ReplayArgs) -> CmdResult {
    let seq = read_sequence(&a.file)?;
    let meta = read_meta(&a.file)?;
    let ctx = match &meta {
        Some(m) => m.context.clone(),
        None => ReplayContext { profile: a.profile.clone(), seed: a.seed, tick_budget: a.tick_budget },
    };
    let profile = FirmwareProfile::by_name(&ctx.profile).ok_or_else(|| anyhow!("unknown profile `{}`", ctx.profile))?;
    let mut exec = Executor::new(profile, ctx.seed, ExecConfig { tick_budget: ctx.tick_budget, ..Default::default() })?;
    let v = exec.run(&seq);
    print!("{}", v.render());
    if let Some(m) = meta {
        if m.signature != v.signature {
            return Err(Failure::Check(anyhow!(
                "signature mismatch: archived {}, replayed {}",
                m.signature,
                v.signature
            )));
        }
        println!("signature matches archive");
    }
    Ok(())
}

fn read_curve(path: &Path) -> Result<Vec<(u64, usize)>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    if lines.next() != Some("testcases,blocks") {
        bail!("{}: missing `testcases,blocks` header", path.display());
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            let (t, n) =
                l.split_once(',').ok_or_else(|| anyhow!("{}:{}: expected two columns", path.display(), i + 2))?;
            Ok((t.parse()?, n.parse()?))
        })
        .collect()
}

fn cov_report(a: CovArgs) -> CmdResult {
    let mut sets: Vec<(PathBuf, BTreeMap<String, u64>)> = Vec::new();
    for dir in &a.dirs {
        let curve = read_curve(&dir.join("coverage.csv"))?;
        let &(cases, fin) = curve.last().ok_or_else(|| anyhow!("{}: empty curve", dir.display()))?;
        let half = curve.iter().find(|(_, n)| *n * 2 >= fin).map_or(0, |(t, _)| *t);
        println!("{}: {fin} blocks after {cases} cases, half reached at case {half}", dir.display());
        let blocks = fs::read_to_string(dir.join("blocks.json")).ok();
        if let Some(text) = blocks {
            let list: Vec<BlockInfo> =
                serde_json::from_str(&text).with_context(|| format!("{}/blocks.json", dir.display()))?;
            if a.blocks {
                for bi in &list {
                    println!("  {:>8}  {}", bi.first_case, bi.name);
                }
            }
            sets.push((dir.clone(), list.into_iter().map(|bi| (bi.name, bi.first_case)).collect()));
        }
    }
    if let [(da, a), (db, b)] = &sets[..] {
        let only = |x: &BTreeMap<String, u64>, y: &BTreeMap<String, u64>| {
            x.keys().filter(|k| !y.contains_key(*k)).cloned().collect::<Vec<_>>()
        };
        println!("only in {}: {}", da.display(), only(a, b).join(" "));
        println!("only in {}: {}", db.display(), only(b, a).join(" "));
    }
    Ok(())
}

fn snapshot(c: SnapshotCmd) -> CmdResult {
    match c {
        SnapshotCmd::Inspect { dir } => {
            let (m, blobs) = read_snapshot_dir(&dir)?;
            println!("{:<10} {:>10} {:>10}  {:<9} {:<5} blob", "segment", "base", "length", "perm", "kind");
            for s in &m.segments {
                let blob = s
                    .blob
                    .as_deref()
                    .map_or("-".to_string(), |n| format!("{n} ({} bytes)", blobs.get(n).map_or(0, Vec::len)));
                println!(
                    "{:<10} {:>10} {:>10}  {:<9} {:<5} {blob}",
                    s.name,
                    s.base,
                    s.length,
                    format!("{:?}", s.perm).to_lowercase(),
                    format!("{:?}", s.kind).to_lowercase()
                );
            }
            if let Some(e) = &m.entry {
                println!("entry: {e}");
            }
            println!("symbols: {}", m.symbols.len());
        }
        SnapshotCmd::Save { dir, profile, seed } => {
            let p = FirmwareProfile::by_name(&profile).ok_or_else(|| anyhow!("unknown profile `{profile}`"))?;
            let fw = Firmware::boot(p, seed)?;
            let (m, blobs) = fw.save_snapshot();
            write_snapshot_dir(&dir, &m, &blobs)?;
            println!("wrote {} segments to {}", m.segments.len(), dir.display());
        }
    }
    Ok(())
}

fn demo(name: &str) -> CmdResult {
    let demos: Vec<Demo> =
        if name == "all" { Demo::ALL.to_vec() } else { vec![name.parse().map_err(|e: String| anyhow!(e))?] };
    for d in demos {
        println!("== {d}");
        let mut t = Transcript::default();
        let r = scenario::run(d, &mut t);
        for l in &t.lines {
            println!("{l}");
        }
        r.map_err(|e| Failure::Check(anyhow!("demo {d}: {e}")))?;
    }
    Ok(())
}
