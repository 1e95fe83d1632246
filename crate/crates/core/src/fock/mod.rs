//! Truncated symmetric Fock space over a finite mode set.
//!
//! States are occupation vectors with total occupancy at most `n_max`,
//! enumerated sector by sector; inside a sector the order is lexicographic
//! in the nondecreasing mode tuple. Occupations are stored run-length
//! compressed as (mode, count) pairs, and a packed-key hash map gives O(1)
//! state lookup during operator assembly.

pub mod ops;
pub mod split;

pub use ops::{
    annihilation, creation, field_operator, gamma_diag, number_diag, second_quantize,
    second_quantize_offdiag,
};
pub use split::{breve_gamma, identification_apply, identification_matrix, ModeSplit};

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Hard cap on basis dimension; larger requests are refused, not attempted.
pub const DIMENSION_CAP: usize = 1_000_000;

/// Packing limits: 12 bits of mode id and 4 bits of count per occupied mode,
/// at most 8 occupied modes in a 128-bit key.
const MAX_MODES: usize = 4096;
const MAX_NMAX: usize = 8;

type Pair = (u32, u8);

/// Occupation basis of the truncated Fock space.
#[derive(Debug, Clone)]
pub struct FockBasis {
    mode_count: usize,
    n_max: usize,
    occ_ptr: Vec<u32>,
    occ: Vec<Pair>,
    sector_offsets: Vec<usize>,
    index: HashMap<u128, u32>,
}

/// Stars-and-bars dimension of the capped space.
pub fn dimension(mode_count: usize, n_max: usize) -> u128 {
    let m = mode_count as u128;
    let mut total = 0u128;
    for n in 0..=n_max as u128 {
        // C(m + n - 1, n), computed incrementally.
        let mut c = 1u128;
        for j in 1..=n {
            c = c * (m + j - 1) / j;
        }
        total += c;
    }
    total
}

fn pack_pairs(pairs: &[Pair]) -> u128 {
    let mut key = 0u128;
    for &(mode, cnt) in pairs {
        key = (key << 16) | (((mode as u128) << 4) | cnt as u128);
    }
    key
}

impl FockBasis {
    pub fn build(mode_count: usize, n_max: usize) -> Result<Self> {
        if mode_count == 0 {
            return Err(Error::config("fock.mode_count", "need at least one mode"));
        }
        if mode_count > MAX_MODES {
            return Err(Error::config(
                "fock.mode_count",
                "mode count above 4096 is not supported by the state packing",
            ));
        }
        if n_max > MAX_NMAX {
            return Err(Error::config(
                "fock.n_max",
                "occupancy cap above 8 is not supported by the state packing",
            ));
        }
        let dim128 = dimension(mode_count, n_max);
        if dim128 > DIMENSION_CAP as u128 {
            return Err(Error::DimensionOverflow {
                requested: dim128.min(u64::MAX as u128) as u64,
                cap: DIMENSION_CAP as u64,
            });
        }
        let dim = dim128 as usize;

        let mut basis = FockBasis {
            mode_count,
            n_max,
            occ_ptr: Vec::with_capacity(dim + 1),
            occ: Vec::new(),
            sector_offsets: Vec::with_capacity(n_max + 2),
            index: HashMap::with_capacity(dim),
        };
        basis.occ_ptr.push(0);

        let mut pairs_buf: Vec<Pair> = Vec::with_capacity(n_max.max(1));
        for n in 0..=n_max {
            basis.sector_offsets.push(basis.occ_ptr.len() - 1);
            if n == 0 {
                basis.push_state(&[]);
                continue;
            }
            // Nondecreasing tuples over mode ids, lexicographic order.
            let mut tuple = vec![0u32; n];
            loop {
                pairs_buf.clear();
                for &mode in &tuple {
                    match pairs_buf.last_mut() {
                        Some((m, c)) if *m == mode => *c += 1,
                        _ => pairs_buf.push((mode, 1)),
                    }
                }
                basis.push_state(&pairs_buf);

                let mut i = n;
                while i > 0 && tuple[i - 1] == (mode_count - 1) as u32 {
                    i -= 1;
                }
                if i == 0 {
                    break;
                }
                let v = tuple[i - 1] + 1;
                for t in tuple.iter_mut().skip(i - 1) {
                    *t = v;
                }
            }
        }
        basis.sector_offsets.push(basis.occ_ptr.len() - 1);
        debug_assert_eq!(basis.dim(), dim);
        Ok(basis)
    }

    fn push_state(&mut self, pairs: &[Pair]) {
        let idx = (self.occ_ptr.len() - 1) as u32;
        self.occ.extend_from_slice(pairs);
        self.occ_ptr.push(self.occ.len() as u32);
        self.index.insert(pack_pairs(pairs), idx);
    }

    pub fn dim(&self) -> usize {
        self.occ_ptr.len() - 1
    }

    pub fn mode_count(&self) -> usize {
        self.mode_count
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    /// Run-length occupations of state `idx`, ascending in mode id.
    pub fn occs(&self, idx: usize) -> &[Pair] {
        &self.occ[self.occ_ptr[idx] as usize..self.occ_ptr[idx + 1] as usize]
    }

    pub fn total_occupation(&self, idx: usize) -> usize {
        self.occs(idx).iter().map(|&(_, c)| c as usize).sum()
    }

    pub fn occupation_of(&self, idx: usize, mode: usize) -> u8 {
        self.occs(idx)
            .iter()
            .find(|&&(m, _)| m as usize == mode)
            .map_or(0, |&(_, c)| c)
    }

    /// Index range of the n-photon sector.
    pub fn sector_range(&self, n: usize) -> std::ops::Range<usize> {
        self.sector_offsets[n]..self.sector_offsets[n + 1]
    }

    pub fn lookup_pairs(&self, pairs: &[Pair]) -> Option<usize> {
        self.index.get(&pack_pairs(pairs)).map(|&i| i as usize)
    }

    /// Dense occupation vector, for tests and dumps.
    pub fn occupation_vector(&self, idx: usize) -> Vec<u32> {
        let mut v = vec![0u32; self.mode_count];
        for &(m, c) in self.occs(idx) {
            v[m as usize] = c as u32;
        }
        v
    }

    pub fn index_of_occupations(&self, occ: &[u32]) -> Option<usize> {
        let pairs: Vec<Pair> = occ
            .iter()
            .enumerate()
            .filter(|&(_, &c)| c > 0)
            .map(|(m, &c)| (m as u32, c as u8))
            .collect();
        self.lookup_pairs(&pairs)
    }

    /// Target of a_mode^dagger on state `idx`: (index, occupation after the
    /// raise). None when the total cap truncates the image to zero.
    pub fn with_added(&self, idx: usize, mode: usize) -> Option<(usize, u32)> {
        if self.total_occupation(idx) >= self.n_max {
            return None;
        }
        let mut buf = PairsBuf::from(self.occs(idx));
        let new_cnt = buf.bump(mode as u32, 1);
        let t = self
            .lookup_pairs(buf.as_slice())
            .expect("raised state within cap must exist");
        Some((t, new_cnt))
    }

    /// Target of a_mode on state `idx`: (index, occupation before the
    /// lowering). None when the mode is empty.
    pub fn with_removed(&self, idx: usize, mode: usize) -> Option<(usize, u32)> {
        let old = self.occupation_of(idx, mode);
        if old == 0 {
            return None;
        }
        let mut buf = PairsBuf::from(self.occs(idx));
        buf.bump(mode as u32, -1);
        let t = self
            .lookup_pairs(buf.as_slice())
            .expect("lowered state must exist");
        Some((t, old as u32))
    }

    /// Target of a_to^dagger a_from: (index, n_from, n_to + 1).
    pub fn with_moved(&self, idx: usize, from: usize, to: usize) -> Option<(usize, u32, u32)> {
        debug_assert_ne!(from, to);
        let n_from = self.occupation_of(idx, from);
        if n_from == 0 {
            return None;
        }
        let mut buf = PairsBuf::from(self.occs(idx));
        buf.bump(from as u32, -1);
        let n_to_after = buf.bump(to as u32, 1);
        let t = self
            .lookup_pairs(buf.as_slice())
            .expect("moved state must exist");
        Some((t, n_from as u32, n_to_after))
    }
}

/// Stack buffer for edited occupation pair lists; capacity covers the
/// packing limit of 8 occupied modes plus one insertion slot.
struct PairsBuf {
    data: [Pair; MAX_NMAX + 1],
    len: usize,
}

impl PairsBuf {
    fn from(pairs: &[Pair]) -> Self {
        let mut data = [(0u32, 0u8); MAX_NMAX + 1];
        data[..pairs.len()].copy_from_slice(pairs);
        PairsBuf {
            data,
            len: pairs.len(),
        }
    }

    fn as_slice(&self) -> &[Pair] {
        &self.data[..self.len]
    }

    /// Adds `delta` (+1/-1) to `mode`'s count, keeping ascending order and
    /// dropping the pair when the count reaches zero. Returns the new count.
    fn bump(&mut self, mode: u32, delta: i8) -> u32 {
        let pos = self.data[..self.len].partition_point(|&(m, _)| m < mode);
        if pos < self.len && self.data[pos].0 == mode {
            let cnt = (self.data[pos].1 as i8 + delta) as u8;
            if cnt == 0 {
                self.data.copy_within(pos + 1..self.len, pos);
                self.len -= 1;
                0
            } else {
                self.data[pos].1 = cnt;
                cnt as u32
            }
        } else {
            debug_assert!(delta > 0);
            self.data.copy_within(pos..self.len, pos + 1);
            self.data[pos] = (mode, 1);
            self.len += 1;
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dimensions_match_counting() {
        assert_eq!(dimension(2, 2), 6);
        assert_eq!(dimension(1, 0), 1);
        assert_eq!(dimension(4, 3), 35);
        let b = FockBasis::build(2, 2).unwrap();
        assert_eq!(b.dim(), 6);
        let b = FockBasis::build(1, 0).unwrap();
        assert_eq!(b.dim(), 1);
    }

    #[test]
    fn brute_force_enumeration_agrees() {
        // All occupation vectors over 4 modes with total <= 3, counted
        // directly and matched state by state through the index.
        let b = FockBasis::build(4, 3).unwrap();
        let mut count = 0usize;
        for n0 in 0..=3u32 {
            for n1 in 0..=3u32 {
                for n2 in 0..=3u32 {
                    for n3 in 0..=3u32 {
                        if n0 + n1 + n2 + n3 <= 3 {
                            count += 1;
                            let idx = b.index_of_occupations(&[n0, n1, n2, n3]).unwrap();
                            assert_eq!(b.occupation_vector(idx), vec![n0, n1, n2, n3]);
                        }
                    }
                }
            }
        }
        assert_eq!(count, 35);
        assert_eq!(b.dim(), 35);
    }

    #[test]
    fn graded_lex_order() {
        let b = FockBasis::build(3, 2).unwrap();
        assert_eq!(b.sector_range(0), 0..1);
        assert_eq!(b.sector_range(1), 1..4);
        assert_eq!(b.sector_range(2), 4..10);
        // One-photon sector ascends in mode id.
        for (i, idx) in b.sector_range(1).enumerate() {
            assert_eq!(b.occupation_of(idx, i), 1);
        }
        // First two-photon state is mode 0 doubly occupied.
        assert_eq!(b.occupation_vector(4), vec![2, 0, 0]);
        assert_eq!(b.occupation_vector(5), vec![1, 1, 0]);
    }

    #[test]
    fn index_bijection() {
        let b = FockBasis::build(5, 3).unwrap();
        for idx in 0..b.dim() {
            assert_eq!(b.lookup_pairs(b.occs(idx)), Some(idx));
        }
    }

    #[test]
    fn edits_land_on_existing_states() {
        let b = FockBasis::build(3, 2).unwrap();
        let vac = 0usize;
        let (one, cnt) = b.with_added(vac, 1).unwrap();
        assert_eq!(cnt, 1);
        assert_eq!(b.occupation_vector(one), vec![0, 1, 0]);
        let (two, cnt) = b.with_added(one, 1).unwrap();
        assert_eq!(cnt, 2);
        assert_eq!(b.occupation_vector(two), vec![0, 2, 0]);
        // Cap reached: raising any mode truncates.
        assert!(b.with_added(two, 0).is_none());
        let (back, old) = b.with_removed(two, 1).unwrap();
        assert_eq!((back, old), (one, 2));
        assert!(b.with_removed(vac, 0).is_none());
        let (moved, n_from, n_to) = b.with_moved(two, 1, 2).unwrap();
        assert_eq!(b.occupation_vector(moved), vec![0, 1, 1]);
        assert_eq!((n_from, n_to), (2, 1));
    }

    #[test]
    fn refuses_oversized_requests() {
        assert!(matches!(
            FockBasis::build(4096, 8),
            Err(Error::DimensionOverflow { .. })
        ));
        assert!(FockBasis::build(10, 9).is_err());
        assert!(FockBasis::build(0, 2).is_err());
    }
}
