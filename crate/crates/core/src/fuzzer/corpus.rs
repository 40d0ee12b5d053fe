//! On-disk sequence format and the crash store.
//!
//! A sequence file is `BTSQ`, a version byte, the lineage (mutation id,
//! parent count, parents as u32), a u16 packet count, then per packet: kind
//! byte, header length byte, header, u16 payload length, payload. Integers
//! are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::exec::{Signature, Verdict};
use super::packet::{Lineage, MutationKind, Packet, PacketKind, PacketSequence, MAX_PAYLOAD};

pub const MAGIC: &[u8; 4] = b"BTSQ";
pub const VERSION: u8 = 1;

const MUTATIONS: [MutationKind; 9] = [
    MutationKind::Seed,
    MutationKind::Flip,
    MutationKind::Insert,
    MutationKind::Delete,
    MutationKind::Duplicate,
    MutationKind::Retype,
    MutationKind::Reorder,
    MutationKind::InsertKnown,
    MutationKind::Merge,
];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("not a sequence file (bad magic)")]
    BadMagic,
    #[error("unsupported sequence file version {0}")]
    Version(u8),
    #[error("sequence file truncated at offset {0}")]
    Truncated(usize),
    #[error("bad value at offset {offset}: {what}")]
    Bad { offset: usize, what: &'static str },
    #[error("{} trailing bytes after the last packet", .0)]
    Trailing(usize),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Meta { path: PathBuf, source: serde_json::Error },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io { path: path.to_path_buf(), source }
}

pub fn encode(seq: &PacketSequence) -> Vec<u8> {
    let mut v = Vec::with_capacity(16 + seq.bytes() + 4 * seq.len());
    v.extend_from_slice(MAGIC);
    v.push(VERSION);
    v.push(MUTATIONS.iter().position(|m| *m == seq.lineage.mutation).unwrap_or(0) as u8);
    let parents = &seq.lineage.parents[..seq.lineage.parents.len().min(255)];
    v.push(parents.len() as u8);
    for p in parents {
        v.extend_from_slice(&p.to_le_bytes());
    }
    v.extend_from_slice(&(seq.len() as u16).to_le_bytes());
    for p in &seq.packets {
        let header = &p.header[..p.header.len().min(255)];
        v.push(p.kind.id());
        v.push(header.len() as u8);
        v.extend_from_slice(header);
        let payload = &p.payload[..p.payload.len().min(MAX_PAYLOAD)];
        v.extend_from_slice(&(payload.len() as u16).to_le_bytes());
        v.extend_from_slice(payload);
    }
    v
}

struct Reader<'a> {
    buf: &'a [u8],
    off: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CorpusError> {
        let s = self.buf.get(self.off..self.off + n).ok_or(CorpusError::Truncated(self.off))?;
        self.off += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CorpusError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CorpusError> {
        let s = self.take(2)?;
        Ok(u16::from_le_bytes([s[0], s[1]]))
    }
}

pub fn decode(buf: &[u8]) -> Result<PacketSequence, CorpusError> {
    let mut r = Reader { buf, off: 0 };
    if r.take(4).map_err(|_| CorpusError::BadMagic)? != MAGIC {
        return Err(CorpusError::BadMagic);
    }
    let ver = r.u8()?;
    if ver != VERSION {
        return Err(CorpusError::Version(ver));
    }
    let off = r.off;
    let mutation = *MUTATIONS.get(r.u8()? as usize).ok_or(CorpusError::Bad { offset: off, what: "mutation id" })?;
    let np = r.u8()? as usize;
    let mut parents = Vec::with_capacity(np);
    for _ in 0..np {
        let s = r.take(4)?;
        parents.push(u32::from_le_bytes([s[0], s[1], s[2], s[3]]));
    }
    let off = r.off;
    let count = r.u16()? as usize;
    if count == 0 {
        return Err(CorpusError::Bad { offset: off, what: "empty sequence" });
    }
    let mut packets = Vec::with_capacity(count);
    for _ in 0..count {
        let off = r.off;
        let kind = PacketKind::from_id(r.u8()?).ok_or(CorpusError::Bad { offset: off, what: "packet kind" })?;
        let hl = r.u8()? as usize;
        let header = r.take(hl)?.to_vec();
        let off = r.off;
        let pl = r.u16()? as usize;
        if pl > MAX_PAYLOAD {
            return Err(CorpusError::Bad { offset: off, what: "payload length" });
        }
        let payload = r.take(pl)?.to_vec();
        packets.push(Packet { kind, header, payload });
    }
    if r.off != buf.len() {
        return Err(CorpusError::Trailing(buf.len() - r.off));
    }
    Ok(PacketSequence { packets, lineage: Lineage { parents, mutation } })
}

pub fn write_sequence(path: &Path, seq: &PacketSequence) -> Result<(), CorpusError> {
    fs::write(path, encode(seq)).map_err(io_err(path))
}

pub fn read_sequence(path: &Path) -> Result<PacketSequence, CorpusError> {
    let buf = fs::read(path).map_err(io_err(path))?;
    decode(&buf)
}

/// Writes one file per sequence as `NNNNNN.btsq`.
pub fn write_corpus(dir: &Path, seqs: &[PacketSequence]) -> Result<(), CorpusError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (i, s) in seqs.iter().enumerate() {
        write_sequence(&dir.join(format!("{i:06}.btsq")), s)?;
    }
    Ok(())
}

/// Reads every `.btsq` file in `dir`, ordered by file name.
pub fn read_corpus(dir: &Path) -> Result<Vec<PacketSequence>, CorpusError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "btsq"))
        .collect();
    paths.sort();
    paths.iter().map(|p| read_sequence(p)).collect()
}

/// What the replayer needs besides the sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayContext {
    pub profile: String,
    pub seed: u64,
    pub tick_budget: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrashMeta {
    pub signature: Signature,
    pub count: u64,
    pub context: ReplayContext,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrashEntry {
    pub sequence: PacketSequence,
    pub verdict: Verdict,
    pub count: u64,
    /// Case index of the first hit within its worker.
    pub first_case: u64,
}

/// Crashes deduplicated by signature.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CrashStore {
    pub entries: BTreeMap<Signature, CrashEntry>,
}

impl CrashStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns true for a signature not seen before.
    pub fn record(&mut self, seq: &PacketSequence, verdict: &Verdict, case: u64) -> bool {
        match self.entries.get_mut(&verdict.signature) {
            Some(e) => {
                e.count += 1;
                false
            }
            None => {
                let entry = CrashEntry { sequence: seq.clone(), verdict: verdict.clone(), count: 1, first_case: case };
                self.entries.insert(verdict.signature.clone(), entry);
                true
            }
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.entries.values().map(|e| e.count).sum()
    }

    /// Counts add up; the representative is the earliest hit, ties broken
    /// by the encoded sequence, so merging is order-independent.
    pub fn merge(&mut self, other: &CrashStore) {
        for (sig, o) in &other.entries {
            match self.entries.get_mut(sig) {
                Some(e) => {
                    let keep_other = (o.first_case, encode(&o.sequence)) < (e.first_case, encode(&e.sequence));
                    e.count += o.count;
                    if keep_other {
                        e.sequence = o.sequence.clone();
                        e.verdict = o.verdict.clone();
                        e.first_case = o.first_case;
                    }
                }
                None => {
                    self.entries.insert(sig.clone(), o.clone());
                }
            }
        }
    }

    /// Writes `<signature>.btsq` and `<signature>.json` per entry.
    pub fn write(&self, dir: &Path, ctx: &ReplayContext) -> Result<Vec<PathBuf>, CorpusError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut out = Vec::new();
        for (sig, e) in &self.entries {
            let stem: String = sig
                .id()
                .chars()
                .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
                .collect();
            let seq_path = dir.join(format!("{stem}.btsq"));
            write_sequence(&seq_path, &e.sequence)?;
            let meta =
                CrashMeta { signature: sig.clone(), count: e.count, context: ctx.clone(), verdict: e.verdict.clone() };
            let meta_path = dir.join(format!("{stem}.json"));
            let json = serde_json::to_string_pretty(&meta)
                .map_err(|source| CorpusError::Meta { path: meta_path.clone(), source })?;
            fs::write(&meta_path, json + "\n").map_err(io_err(&meta_path))?;
            out.push(seq_path);
        }
        Ok(out)
    }
}

/// Sidecar metadata for a crash sequence file, if present.
pub fn read_meta(seq_path: &Path) -> Result<Option<CrashMeta>, CorpusError> {
    let meta_path = seq_path.with_extension("json");
    match fs::read_to_string(&meta_path) {
        Ok(s) => serde_json::from_str(&s).map(Some).map_err(|source| CorpusError::Meta { path: meta_path, source }),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(CorpusError::Io { path: meta_path, source: e }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::firmware::Coverage;
    use crate::fuzzer::exec::Outcome;
    use proptest::prelude::*;

    fn packet() -> impl Strategy<Value = Packet> {
        (0u8..5, prop::collection::vec(any::<u8>(), 0..6), prop::collection::vec(any::<u8>(), 0..300))
            .prop_map(|(k, header, payload)| Packet { kind: PacketKind::from_id(k).unwrap(), header, payload })
    }

    proptest! {
        #[test]
        fn round_trip(ps in prop::collection::vec(packet(), 1..10), m in 0usize..9, parents in prop::collection::vec(any::<u32>(), 0..3)) {
            let seq = PacketSequence { packets: ps, lineage: Lineage { parents, mutation: MUTATIONS[m] } };
            prop_assert_eq!(decode(&encode(&seq)).unwrap(), seq);
        }

        #[test]
        fn truncation_is_an_error(ps in prop::collection::vec(packet(), 1..4), cut in 0usize..64) {
            let bytes = encode(&PacketSequence::new(ps));
            let cut = cut.min(bytes.len() - 1);
            prop_assert!(decode(&bytes[..cut]).is_err());
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(decode(b"nope"), Err(CorpusError::BadMagic)));
        let mut b = encode(&PacketSequence::new(vec![Packet::null(PacketKind::Lmp)]));
        b.push(0);
        assert!(matches!(decode(&b), Err(CorpusError::Trailing(1))));
    }

    fn verdict(handler: &str) -> Verdict {
        Verdict {
            coverage: Coverage::new(),
            outcome: Outcome::Timeout,
            signature: Signature { outcome: "timeout".into(), pool_addr: 0, trigger: None, handler: handler.into() },
            ticks: 0,
        }
    }

    #[test]
    fn dedupe_and_merge() {
        let s = |b: u8| PacketSequence::new(vec![Packet::new(PacketKind::Lmp, vec![b])]);
        let mut a = CrashStore::new();
        assert!(a.record(&s(1), &verdict("x"), 10));
        assert!(!a.record(&s(2), &verdict("x"), 11));
        assert_eq!(a.entries.values().next().unwrap().count, 2);
        let mut b = CrashStore::new();
        b.record(&s(3), &verdict("x"), 4);
        b.record(&s(4), &verdict("y"), 5);
        let mut ab = a.clone();
        ab.merge(&b);
        let mut ba = b.clone();
        ba.merge(&a);
        assert_eq!(ab, ba);
        assert_eq!(ab.total(), 4);
        assert_eq!(ab.entries[&verdict("x").signature].first_case, 4);
    }

    #[test]
    fn store_writes_replayable_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut st = CrashStore::new();
        let seq = PacketSequence::new(vec![Packet::new(PacketKind::BlePdu, vec![9; 12])]);
        st.record(&seq, &verdict("ble_rx"), 0);
        let ctx = ReplayContext { profile: "default".into(), seed: 3, tick_budget: 4096 };
        let paths = st.write(dir.path(), &ctx).unwrap();
        assert_eq!(read_sequence(&paths[0]).unwrap(), seq);
        let meta = read_meta(&paths[0]).unwrap().unwrap();
        assert_eq!(meta.context, ctx);
        assert_eq!(meta.signature.handler, "ble_rx");
    }
}
