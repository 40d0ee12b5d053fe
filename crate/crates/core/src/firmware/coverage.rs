//! Fixed-size bit set over the firmware's static block universe.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::layout::{b, BLOCK_COUNT};

pub const COV_WORDS: usize = 16;

const _: () = assert!(BLOCK_COUNT as usize <= COV_WORDS * 64);

#[derive(Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Coverage {
    words: [u64; COV_WORDS],
}

impl Coverage {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn insert(&mut self, block: u16) {
        self.words[(block >> 6) as usize] |= 1 << (block & 63);
    }

    #[inline]
    pub fn contains(&self, block: u16) -> bool {
        self.words.get((block >> 6) as usize).is_some_and(|w| w & (1 << (block & 63)) != 0)
    }

    pub fn len(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    pub fn clear(&mut self) {
        self.words = [0; COV_WORDS];
    }

    pub fn union_with(&mut self, other: &Coverage) {
        for (a, b) in self.words.iter_mut().zip(other.words) {
            *a |= b;
        }
    }

    /// True if `self` has a block that `base` lacks.
    pub fn has_new(&self, base: &Coverage) -> bool {
        self.words.iter().zip(base.words).any(|(a, b)| a & !b != 0)
    }

    pub fn is_subset(&self, other: &Coverage) -> bool {
        !self.has_new(other)
    }

    pub fn iter(&self) -> impl Iterator<Item = u16> + '_ {
        self.words.iter().enumerate().flat_map(|(i, &w)| {
            let mut bits = w;
            std::iter::from_fn(move || {
                if bits == 0 {
                    return None;
                }
                let t = bits.trailing_zeros();
                bits &= bits - 1;
                Some(i as u16 * 64 + t as u16)
            })
        })
    }

    pub fn names(&self) -> Vec<String> {
        self.iter().map(b::name).collect()
    }
}

impl fmt::Debug for Coverage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Coverage({} blocks)", self.len())
    }
}

impl FromIterator<u16> for Coverage {
    fn from_iter<I: IntoIterator<Item = u16>>(iter: I) -> Self {
        let mut c = Coverage::new();
        for b in iter {
            c.insert(b);
        }
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    proptest! {
        #[test]
        fn matches_btreeset(xs in proptest::collection::vec(0u16..BLOCK_COUNT, 0..200),
                            ys in proptest::collection::vec(0u16..BLOCK_COUNT, 0..200)) {
            let a: Coverage = xs.iter().copied().collect();
            let bset: Coverage = ys.iter().copied().collect();
            let sa: BTreeSet<u16> = xs.into_iter().collect();
            let sb: BTreeSet<u16> = ys.into_iter().collect();
            prop_assert_eq!(a.len(), sa.len());
            prop_assert_eq!(a.iter().collect::<Vec<_>>(), sa.iter().copied().collect::<Vec<_>>());
            prop_assert_eq!(a.has_new(&bset), !sa.is_subset(&sb));
            let mut u = a;
            u.union_with(&bset);
            prop_assert_eq!(u.len(), sa.union(&sb).count());
        }
    }
}
