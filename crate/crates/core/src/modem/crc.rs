//! CRC-24 as used on LE links, and forging over GF(2).
//!
//! For a fixed init value a CRC is affine in the message bits, so the effect
//! of a block of "adjust" bytes inside a message is a linear map. Choosing
//! the adjust bytes for a desired CRC is then a linear system, solved here by
//! Gaussian elimination.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Generator x^24 + x^10 + x^9 + x^6 + x^4 + x^3 + x + 1.
pub const CRC24_POLY: u32 = 0x00_065b;
/// The same generator bit-reversed over 24 bits, for the LSB-first register.
pub const CRC24_POLY_REFLECTED: u32 = 0xda_6000;

const MASK24: u32 = 0x00ff_ffff;

/// A CRC whose value is affine in the message for a fixed init.
pub trait LinearCrc {
    /// Register width in bits (at most 32).
    fn width(&self) -> u32;
    fn compute(&self, init: u32, msg: &[u8]) -> u32;
}

/// LE link-layer CRC-24: reflected register, LSB-first input bits.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Crc24;

impl LinearCrc for Crc24 {
    fn width(&self) -> u32 {
        24
    }

    fn compute(&self, init: u32, msg: &[u8]) -> u32 {
        let mut r = init & MASK24;
        for &byte in msg {
            let mut b = byte;
            for _ in 0..8 {
                let fb = (b ^ r as u8) & 1;
                r >>= 1;
                if fb != 0 {
                    r ^= CRC24_POLY_REFLECTED;
                }
                b >>= 1;
            }
        }
        r
    }
}

/// Per-connection CRC parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Crc24State {
    pub init: u32,
}

impl Crc24State {
    pub fn new(init: u32) -> Self {
        Crc24State { init: init & MASK24 }
    }
}

/// CRC bytes in transmission order (low byte first).
pub fn crc24(state: Crc24State, message: &[u8]) -> [u8; 3] {
    let v = Crc24.compute(state.init, message).to_le_bytes();
    [v[0], v[1], v[2]]
}

pub fn crc24_value(bytes: [u8; 3]) -> u32 {
    u32::from_le_bytes([bytes[0], bytes[1], bytes[2], 0])
}

/// Small MSB-first CRC-8 (generator 0x07), used to test the solver exhaustively.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Crc8;

impl LinearCrc for Crc8 {
    fn width(&self) -> u32 {
        8
    }

    fn compute(&self, init: u32, msg: &[u8]) -> u32 {
        let mut r = init as u8;
        for &b in msg {
            r ^= b;
            for _ in 0..8 {
                r = if r & 0x80 != 0 { (r << 1) ^ 0x07 } else { r << 1 };
            }
        }
        r as u32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum SolverError {
    #[error("target not reachable: system rank {rank} of {width} equations")]
    Inconsistent { rank: u32, width: u32 },
    #[error("solution failed recomputation")]
    SelfCheck,
    #[error("adjust block of {0} bits exceeds 64 unknowns")]
    TooManyUnknowns(u32),
}

/// Linear system for a fixed (init, prefix, adjust length, suffix).
///
/// Built once, it answers any number of targets; each answer is verified by
/// recomputing the CRC before it is returned.
#[derive(Debug, Clone)]
pub struct AdjustSystem<'a, C: LinearCrc> {
    crc: &'a C,
    init: u32,
    prefix: Vec<u8>,
    suffix: Vec<u8>,
    adjust_len: usize,
    /// Unknown bit positions inside the adjust block (bit k of byte k/8).
    unknowns: Vec<u32>,
    base: u32,
    /// Reduced rows: coefficients over unknowns, and the combination of
    /// original equations that produced them.
    rows: Vec<(u64, u32)>,
    pivots: Vec<Option<u32>>,
    rank: u32,
}

impl<'a, C: LinearCrc> AdjustSystem<'a, C> {
    /// `free_mask` selects which adjust bits may change (all when `None`).
    pub fn new(
        crc: &'a C,
        init: u32,
        prefix: &[u8],
        adjust_len: usize,
        suffix: &[u8],
        free_mask: Option<&[u8]>,
    ) -> Result<Self, SolverError> {
        let width = crc.width();
        let unknowns: Vec<u32> = (0..adjust_len as u32 * 8)
            .filter(|&k| free_mask.map(|m| m[(k / 8) as usize] >> (k % 8) & 1 == 1).unwrap_or(true))
            .collect();
        if unknowns.len() > 64 {
            return Err(SolverError::TooManyUnknowns(unknowns.len() as u32));
        }
        let mut msg = Vec::with_capacity(prefix.len() + adjust_len + suffix.len());
        msg.extend_from_slice(prefix);
        msg.resize(prefix.len() + adjust_len, 0);
        msg.extend_from_slice(suffix);
        let base = crc.compute(init, &msg);
        let mut cols = Vec::with_capacity(unknowns.len());
        for &k in &unknowns {
            let idx = prefix.len() + (k / 8) as usize;
            msg[idx] ^= 1 << (k % 8);
            cols.push(crc.compute(init, &msg) ^ base);
            msg[idx] ^= 1 << (k % 8);
        }
        // Equation i: sum_j x_j * bit_i(col_j) = bit_i(target ^ base).
        let mut rows: Vec<(u64, u32)> = (0..width)
            .map(|i| {
                let coeffs = cols.iter().enumerate().fold(0u64, |acc, (j, c)| acc | (((c >> i) & 1) as u64) << j);
                (coeffs, 1u32 << i)
            })
            .collect();
        let mut pivots = vec![None; width as usize];
        let mut rank = 0usize;
        for col in 0..unknowns.len() {
            let Some(p) = (rank..rows.len()).find(|&r| rows[r].0 >> col & 1 == 1) else { continue };
            rows.swap(rank, p);
            let (pc, pt) = rows[rank];
            for (r, row) in rows.iter_mut().enumerate() {
                if r != rank && row.0 >> col & 1 == 1 {
                    row.0 ^= pc;
                    row.1 ^= pt;
                }
            }
            pivots[rank] = Some(col as u32);
            rank += 1;
        }
        Ok(AdjustSystem {
            crc,
            init,
            prefix: prefix.to_vec(),
            suffix: suffix.to_vec(),
            adjust_len,
            unknowns,
            base,
            rows,
            pivots,
            rank: rank as u32,
        })
    }

    pub fn rank(&self) -> u32 {
        self.rank
    }

    pub fn solve(&self, target: u32) -> Result<Vec<u8>, SolverError> {
        let rhs = target ^ self.base;
        let bit = |mask: u32| (mask & rhs).count_ones() & 1;
        let mut adjust = vec![0u8; self.adjust_len];
        for (r, &(coeffs, comb)) in self.rows.iter().enumerate() {
            let b = bit(comb);
            match self.pivots[r] {
                Some(col) => {
                    if b == 1 {
                        let k = self.unknowns[col as usize];
                        adjust[(k / 8) as usize] |= 1 << (k % 8);
                    }
                }
                None => {
                    debug_assert_eq!(coeffs, 0);
                    if b == 1 {
                        return Err(SolverError::Inconsistent { rank: self.rank, width: self.crc.width() });
                    }
                }
            }
        }
        let mut msg = self.prefix.clone();
        msg.extend_from_slice(&adjust);
        msg.extend_from_slice(&self.suffix);
        if self.crc.compute(self.init, &msg) != target {
            return Err(SolverError::SelfCheck);
        }
        Ok(adjust)
    }
}

/// Four adjust bytes such that `crc24(state, prefix || adjust || suffix) == target`.
pub fn solve_crc_adjust(
    state: Crc24State,
    prefix: &[u8],
    suffix: &[u8],
    target: [u8; 3],
) -> Result<[u8; 4], SolverError> {
    let sys = AdjustSystem::new(&Crc24, state.init, prefix, 4, suffix, None)?;
    let v = sys.solve(crc24_value(target))?;
    Ok([v[0], v[1], v[2], v[3]])
}
