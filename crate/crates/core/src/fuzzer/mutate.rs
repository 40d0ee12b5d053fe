//! Packet-level and sequence-level mutation operators.

use rand::Rng;

#[cfg(test)]
use super::packet::SEED_LEN;
use super::packet::{Lineage, MutationKind, Packet, PacketKind, PacketSequence, MAX_PACKETS, MAX_PAYLOAD};
use crate::firmware::Coverage;

/// Corpus of sequences plus the union of their coverage.
#[derive(Debug, Clone, Default)]
pub struct Population {
    pub seqs: Vec<PacketSequence>,
    pub union: Coverage,
}

impl Population {
    /// One sequence holding a single all-zero packet of `kind`.
    pub fn seed(kind: PacketKind) -> Self {
        Population { seqs: vec![PacketSequence::new(vec![Packet::null(kind)])], union: Coverage::new() }
    }

    pub fn len(&self) -> usize {
        self.seqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seqs.is_empty()
    }

    /// Adds `candidate` if it covers a block the population has not.
    pub fn evolve(&mut self, candidate: PacketSequence, coverage: &Coverage) -> bool {
        if !coverage.has_new(&self.union) {
            return false;
        }
        self.union.union_with(coverage);
        self.seqs.push(candidate);
        true
    }
}

/// Swaps packets `i` and `j`.
pub fn reorder(seq: &PacketSequence, i: usize, j: usize) -> PacketSequence {
    let mut out = seq.clone();
    out.packets.swap(i, j);
    out
}

/// `a` followed by `b`, truncated to the sequence cap.
pub fn merge(a: &PacketSequence, b: &PacketSequence) -> PacketSequence {
    let mut packets = a.packets.clone();
    packets.extend(b.packets.iter().cloned());
    packets.truncate(MAX_PACKETS);
    PacketSequence::new(packets)
}

/// Applies one byte mutation to `p` and returns which one.
pub fn mutate_packet(p: &mut Packet, kinds: &[PacketKind], rng: &mut impl Rng) -> MutationKind {
    let choices: &[MutationKind] = if kinds.len() > 1 {
        &[
            MutationKind::Flip,
            MutationKind::Flip,
            MutationKind::Insert,
            MutationKind::Delete,
            MutationKind::Duplicate,
            MutationKind::Retype,
        ]
    } else {
        &[MutationKind::Flip, MutationKind::Flip, MutationKind::Insert, MutationKind::Delete, MutationKind::Duplicate]
    };
    let mut op = choices[rng.gen_range(0..choices.len())];
    let len = p.payload.len();
    if len == 0 && matches!(op, MutationKind::Delete | MutationKind::Duplicate) {
        op = MutationKind::Insert;
    }
    if len >= MAX_PAYLOAD && matches!(op, MutationKind::Insert | MutationKind::Duplicate) {
        op = MutationKind::Delete;
    }
    match op {
        MutationKind::Flip => {
            let total = p.header.len() + len;
            if total == 0 {
                p.payload.push(rng.gen());
                return MutationKind::Insert;
            }
            let i = rng.gen_range(0..total);
            let byte = if i < p.header.len() { &mut p.header[i] } else { &mut p.payload[i - p.header.len()] };
            if rng.gen() {
                *byte ^= 1 << rng.gen_range(0..8);
            } else {
                *byte = rng.gen();
            }
        }
        MutationKind::Insert => {
            let n = match rng.gen_range(0..20) {
                0..=9 => rng.gen_range(1..=4),
                10..=18 => rng.gen_range(1..=32),
                _ => rng.gen_range(1..=MAX_PAYLOAD),
            };
            let n = n.min(MAX_PAYLOAD - len);
            let at = rng.gen_range(0..=len);
            let bytes: Vec<u8> = (0..n).map(|_| rng.gen()).collect();
            p.payload.splice(at..at, bytes);
        }
        MutationKind::Delete => {
            let n = if rng.gen() { rng.gen_range(1..=len.min(4)) } else { rng.gen_range(1..=len) };
            let at = rng.gen_range(0..=len - n);
            p.payload.drain(at..at + n);
        }
        MutationKind::Duplicate => {
            let n = rng.gen_range(1..=len).min(MAX_PAYLOAD - len);
            let at = rng.gen_range(0..=len - n);
            let slice = p.payload[at..at + n].to_vec();
            p.payload.splice(at + n..at + n, slice);
        }
        MutationKind::Retype => {
            let others: Vec<PacketKind> = kinds.iter().copied().filter(|k| *k != p.kind).collect();
            if let Some(&k) = others.get(rng.gen_range(0..others.len().max(1))) {
                p.kind = k;
                p.header.clear();
            }
        }
        _ => unreachable!("not a packet mutation"),
    }
    op
}

/// Chooses a sequence uniformly and applies either one packet mutation or
/// one sequence mutation.
pub fn mutate(pop: &Population, kinds: &[PacketKind], rng: &mut impl Rng) -> PacketSequence {
    assert!(!pop.is_empty(), "population must not be empty");
    let pi = rng.gen_range(0..pop.len());
    let parent = &pop.seqs[pi];
    if rng.gen_bool(0.5) {
        let mut out = parent.clone();
        let k = rng.gen_range(0..out.packets.len());
        let op = mutate_packet(&mut out.packets[k], kinds, rng);
        out.lineage = Lineage { parents: vec![pi as u32], mutation: op };
        return out;
    }
    let mut op = match rng.gen_range(0..3) {
        0 => MutationKind::Reorder,
        1 => MutationKind::InsertKnown,
        _ => MutationKind::Merge,
    };
    if op == MutationKind::Reorder && parent.len() < 2 {
        op = MutationKind::InsertKnown;
    }
    if parent.len() >= MAX_PACKETS && op != MutationKind::Reorder {
        op = MutationKind::Reorder;
    }
    let qi = rng.gen_range(0..pop.len());
    let mut out = match op {
        MutationKind::Reorder => {
            let i = rng.gen_range(0..parent.len());
            let mut j = rng.gen_range(0..parent.len() - 1);
            if j >= i {
                j += 1;
            }
            let mut o = reorder(parent, i, j);
            o.lineage.parents = vec![pi as u32];
            o
        }
        MutationKind::InsertKnown => {
            let donor = &pop.seqs[qi];
            let p = donor.packets[rng.gen_range(0..donor.len())].clone();
            let mut o = parent.clone();
            o.packets.insert(rng.gen_range(0..=o.len()), p);
            o.lineage.parents = vec![pi as u32, qi as u32];
            o
        }
        _ => {
            let mut o = merge(parent, &pop.seqs[qi]);
            o.lineage.parents = vec![pi as u32, qi as u32];
            o
        }
    };
    out.lineage.mutation = op;
    out
}

/// Byte-level mutation of a flat blob. The sequence operators act on the
/// blob's fixed-size chunks rather than on packet boundaries.
pub fn mutate_blob(
    pop: &[Vec<u8>],
    chunk: usize,
    max_len: usize,
    rng: &mut impl Rng,
) -> (usize, MutationKind, Vec<u8>) {
    let pi = rng.gen_range(0..pop.len());
    let mut out = pop[pi].clone();
    let len = out.len();
    if rng.gen_bool(0.5) {
        let mut p = Packet::new(PacketKind::Raw, std::mem::take(&mut out));
        let op = mutate_packet(&mut p, &[PacketKind::Raw], rng);
        p.payload.truncate(max_len);
        return (pi, op, p.payload);
    }
    let chunks = len.div_ceil(chunk).max(1);
    let op = match rng.gen_range(0..3) {
        0 if chunks >= 2 => MutationKind::Reorder,
        0 | 1 => MutationKind::InsertKnown,
        _ => MutationKind::Merge,
    };
    let donor = &pop[rng.gen_range(0..pop.len())];
    match op {
        MutationKind::Reorder => {
            let i = rng.gen_range(0..chunks);
            let mut j = rng.gen_range(0..chunks - 1);
            if j >= i {
                j += 1;
            }
            let mut cs: Vec<Vec<u8>> = out.chunks(chunk).map(<[u8]>::to_vec).collect();
            cs.swap(i, j);
            out = cs.concat();
        }
        MutationKind::InsertKnown => {
            let dc = donor.len().div_ceil(chunk).max(1);
            let k = rng.gen_range(0..dc);
            let piece = donor[(k * chunk).min(donor.len())..((k + 1) * chunk).min(donor.len())].to_vec();
            let at = (rng.gen_range(0..=chunks) * chunk).min(len);
            out.splice(at..at, piece);
        }
        _ => out.extend_from_slice(donor),
    }
    out.truncate(max_len);
    (pi, op, out)
}

/// Splits a blob into `chunk`-byte packets of `kind`.
pub fn blob_packets(blob: &[u8], chunk: usize, kind: PacketKind) -> PacketSequence {
    let packets = if blob.is_empty() {
        vec![Packet::new(kind, Vec::new())]
    } else {
        blob.chunks(chunk).map(|c| Packet::new(kind, c.to_vec())).collect()
    };
    PacketSequence::new(packets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(bytes: &[u8]) -> PacketSequence {
        PacketSequence::new(bytes.iter().map(|&b| Packet::new(PacketKind::Lmp, vec![b])).collect())
    }

    #[test]
    fn reorder_and_merge() {
        assert_eq!(reorder(&seq(&[1, 2]), 0, 1).packets, seq(&[2, 1]).packets);
        assert_eq!(merge(&seq(&[1]), &seq(&[2])).packets, seq(&[1, 2]).packets);
        let long = seq(&[0; 30]);
        assert_eq!(merge(&long, &long).len(), MAX_PACKETS);
    }

    #[test]
    fn seed_population_is_one_null_packet() {
        let p = Population::seed(PacketKind::Lmp);
        assert_eq!(p.len(), 1);
        assert_eq!(p.seqs[0].packets, vec![Packet::new(PacketKind::Lmp, vec![0; SEED_LEN])]);
    }

    #[test]
    fn evolve_requires_new_coverage() {
        let mut p = Population::seed(PacketKind::Lmp);
        let mut c = Coverage::new();
        c.insert(3);
        assert!(p.evolve(seq(&[1]), &c));
        assert!(!p.evolve(seq(&[2]), &c));
        c.insert(4);
        assert!(p.evolve(seq(&[3]), &c));
        assert_eq!(p.len(), 3);
    }

    #[test]
    fn blob_chunking() {
        let s = blob_packets(&[7u8; 40], 17, PacketKind::Lmp);
        assert_eq!(s.packets.iter().map(|p| p.payload.len()).collect::<Vec<_>>(), vec![17, 17, 6]);
    }

    proptest! {
        #[test]
        fn mutation_respects_bounds(seed in any::<u64>(), rounds in 1usize..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pop = Population::seed(PacketKind::Acl);
            let kinds = [PacketKind::Acl, PacketKind::Lmp, PacketKind::BlePdu];
            for i in 0..rounds {
                let c = mutate(&pop, &kinds, &mut rng);
                prop_assert!(!c.is_empty() && c.len() <= MAX_PACKETS);
                prop_assert!(c.packets.iter().all(|p| p.payload.len() <= MAX_PAYLOAD));
                prop_assert!(c.lineage.parents.iter().all(|&x| (x as usize) < pop.len()));
                let mut cov = Coverage::new();
                cov.insert(i as u16 % 512);
                pop.evolve(c, &cov);
            }
        }

        #[test]
        fn mutation_is_deterministic(seed in any::<u64>()) {
            let pop = Population { seqs: vec![seq(&[1, 2, 3]), seq(&[9])], union: Coverage::new() };
            let a = mutate(&pop, &[PacketKind::Lmp], &mut ChaCha8Rng::seed_from_u64(seed));
            let b = mutate(&pop, &[PacketKind::Lmp], &mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(a, b);
        }

        #[test]
        fn blob_mutation_bounded(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pop = vec![vec![0u8]];
            for _ in 0..100 {
                let (_, _, b) = mutate_blob(&pop, 17, 544, &mut rng);
                prop_assert!(b.len() <= 544);
                pop.push(b);
            }
        }
    }
}
