//! Assignment of code bits to hash tables.
//!
//! A multi-branch code is stored as the concatenation `[d; g; h]` of its
//! `B` branch codes, each `r` bits long. A [`KeyLayout`] maps that full code
//! onto `m` table keys:
//!
//! * **block-wise**: every branch is cut into `m` consecutive blocks and key
//!   `j` concatenates block `j` of every branch, so each table sees all
//!   granularities;
//! * **contiguous**: the full code is cut into `m` consecutive pieces.
//!
//! When the split is uneven the leading pieces get one extra bit each.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::codes::{copy_bits, words_for, BinaryCode, SubCode};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Blockwise,
    Contiguous,
}

impl Strategy {
    pub(crate) fn tag(self) -> u8 {
        match self {
            Strategy::Blockwise => 0,
            Strategy::Contiguous => 1,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Strategy::Blockwise),
            1 => Some(Strategy::Contiguous),
            _ => None,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Blockwise => "blockwise",
            Strategy::Contiguous => "contiguous",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blockwise" => Ok(Strategy::Blockwise),
            "contiguous" => Ok(Strategy::Contiguous),
            other => Err(Error::param(format!(
                "unknown strategy {other:?} (expected blockwise or contiguous)"
            ))),
        }
    }
}

/// Splits `total` into `parts` lengths differing by at most one, long ones first.
pub(crate) fn split_lengths(total: usize, parts: usize) -> Vec<usize> {
    let base = total / parts;
    let rem = total % parts;
    (0..parts).map(|p| base + usize::from(p < rem)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Segment {
    start: usize,
    len: usize,
}

/// Fixed bit-to-table assignment for a given `(strategy, B, r, m)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeyLayout {
    strategy: Strategy,
    branches: usize,
    branch_bits: usize,
    keys: Vec<Vec<Segment>>,
    key_bits: Vec<usize>,
}

impl KeyLayout {
    pub fn new(strategy: Strategy, branches: usize, branch_bits: usize, tables: usize) -> Result<Self> {
        if branches == 0 || branch_bits == 0 {
            return Err(Error::param("branch count and branch length must be positive"));
        }
        if tables == 0 {
            return Err(Error::param("table count m must be at least 1"));
        }
        let keys: Vec<Vec<Segment>> = match strategy {
            Strategy::Blockwise => {
                if tables > branch_bits {
                    return Err(Error::param(format!(
                        "block-wise layout needs m <= r (m = {tables}, r = {branch_bits})"
                    )));
                }
                let mut offset = 0;
                split_lengths(branch_bits, tables)
                    .into_iter()
                    .map(|len| {
                        let segs = (0..branches)
                            .map(|b| Segment {
                                start: b * branch_bits + offset,
                                len,
                            })
                            .collect();
                        offset += len;
                        segs
                    })
                    .collect()
            }
            Strategy::Contiguous => {
                let total = branches * branch_bits;
                if tables > total {
                    return Err(Error::param(format!(
                        "contiguous layout needs m <= R (m = {tables}, R = {total})"
                    )));
                }
                let mut start = 0;
                split_lengths(total, tables)
                    .into_iter()
                    .map(|len| {
                        let seg = Segment { start, len };
                        start += len;
                        vec![seg]
                    })
                    .collect()
            }
        };
        let key_bits = keys.iter().map(|segs| segs.iter().map(|s| s.len).sum()).collect();
        Ok(KeyLayout {
            strategy,
            branches,
            branch_bits,
            keys,
            key_bits,
        })
    }

    /// Layout for full codes of `total_bits`, which must split evenly into `branches`.
    pub fn for_code(strategy: Strategy, branches: usize, total_bits: usize, tables: usize) -> Result<Self> {
        if branches == 0 || !total_bits.is_multiple_of(branches) {
            return Err(Error::param(format!(
                "code length {total_bits} is not divisible by branch count {branches}"
            )));
        }
        Self::new(strategy, branches, total_bits / branches, tables)
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn branches(&self) -> usize {
        self.branches
    }

    pub fn branch_bits(&self) -> usize {
        self.branch_bits
    }

    pub fn tables(&self) -> usize {
        self.keys.len()
    }

    pub fn total_bits(&self) -> usize {
        self.branches * self.branch_bits
    }

    pub fn key_bits(&self, table: usize) -> usize {
        self.key_bits[table]
    }

    /// Full-code bit positions feeding key `table`, in key order.
    pub fn positions(&self, table: usize) -> impl Iterator<Item = usize> + '_ {
        self.keys[table].iter().flat_map(|s| s.start..s.start + s.len)
    }

    /// Writes key `table` of the code held in `code` into `out` (which is cleared first).
    pub(crate) fn extract_into(&self, code: &[u64], table: usize, out: &mut [u64]) {
        debug_assert_eq!(out.len(), words_for(self.key_bits[table]));
        out.iter_mut().for_each(|w| *w = 0);
        let mut pos = 0;
        for s in &self.keys[table] {
            copy_bits(code, s.start, s.len, out, pos);
            pos += s.len;
        }
    }

    pub fn key(&self, code: &BinaryCode, table: usize) -> Result<SubCode> {
        self.check_len(code)?;
        let mut words = vec![0; words_for(self.key_bits[table])];
        self.extract_into(code.words(), table, &mut words);
        SubCode::from_words(words, self.key_bits[table])
    }

    pub fn keys(&self, code: &BinaryCode) -> Result<TableKeySet> {
        let keys = (0..self.tables())
            .map(|t| self.key(code, t))
            .collect::<Result<Vec<_>>>()?;
        Ok(TableKeySet { keys })
    }

    /// Gathers key `table` from a relaxed (real-valued) full code.
    pub fn relaxed_key(&self, values: &[f64], table: usize) -> Vec<f64> {
        self.positions(table).map(|p| values[p]).collect()
    }

    fn check_len(&self, code: &BinaryCode) -> Result<()> {
        if code.len() != self.total_bits() {
            return Err(Error::LengthMismatch(code.len(), self.total_bits()));
        }
        Ok(())
    }
}

/// The `B` branch codes of one sample, all of length `r`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BranchCodes {
    branches: Vec<BinaryCode>,
}

impl BranchCodes {
    pub fn new(branches: Vec<BinaryCode>) -> Result<Self> {
        let first = branches
            .first()
            .ok_or_else(|| Error::param("at least one branch code is required"))?;
        if let Some(bad) = branches.iter().find(|b| b.len() != first.len()) {
            return Err(Error::LengthMismatch(first.len(), bad.len()));
        }
        Ok(BranchCodes { branches })
    }

    pub fn branches(&self) -> &[BinaryCode] {
        &self.branches
    }

    pub fn branch_bits(&self) -> usize {
        self.branches[0].len()
    }

    /// `[d; g; h]`.
    pub fn full_code(&self) -> BinaryCode {
        BinaryCode::concat(&self.branches).expect("branch codes are non-empty")
    }

    fn layout(&self, strategy: Strategy, tables: usize) -> Result<KeyLayout> {
        KeyLayout::new(strategy, self.branches.len(), self.branch_bits(), tables)
    }
}

/// One key per table, in table order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TableKeySet {
    pub keys: Vec<SubCode>,
}

impl TableKeySet {
    pub fn tables(&self) -> usize {
        self.keys.len()
    }

    pub fn concat(&self) -> BinaryCode {
        BinaryCode::concat(&self.keys).expect("key set is non-empty")
    }
}

pub fn blockwise_keys(bc: &BranchCodes, tables: usize) -> Result<TableKeySet> {
    bc.layout(Strategy::Blockwise, tables)?.keys(&bc.full_code())
}

pub fn contiguous_keys(bc: &BranchCodes, tables: usize) -> Result<TableKeySet> {
    bc.layout(Strategy::Contiguous, tables)?.keys(&bc.full_code())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codes::hamming_distance;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};
    use proptest::strategy::Strategy as _;

    /// Branch codes whose bit `i` of branch `b` is set iff bit `i` of `tag[b]` is.
    fn branches(bits: &[&str]) -> BranchCodes {
        BranchCodes::new(bits.iter().map(|s| s.parse().unwrap()).collect()).unwrap()
    }

    fn origins(layout: &KeyLayout) -> Vec<Vec<usize>> {
        (0..layout.tables()).map(|t| layout.positions(t).collect()).collect()
    }

    #[test]
    fn blockwise_first_key_mixes_all_branches() {
        // r = 6, m = 3: key 1 = (d1, d2, g1, g2, h1, h2) in full-code positions.
        let layout = KeyLayout::new(Strategy::Blockwise, 3, 6, 3).unwrap();
        assert_eq!(origins(&layout)[0], vec![0, 1, 6, 7, 12, 13]);
        assert_eq!(origins(&layout)[2], vec![4, 5, 10, 11, 16, 17]);

        let bc = branches(&["110000", "001100", "000011"]);
        let keys = blockwise_keys(&bc, 3).unwrap();
        assert_eq!(keys.keys[0].to_string(), "110000");
        assert_eq!(keys.keys[1].to_string(), "001100");
        assert_eq!(keys.keys[2].to_string(), "000011");
    }

    #[test]
    fn single_table_is_full_code() {
        let bc = branches(&["1010", "0110", "1111"]);
        let full = bc.full_code();
        assert_eq!(blockwise_keys(&bc, 1).unwrap().keys, vec![full.clone()]);
        assert_eq!(contiguous_keys(&bc, 1).unwrap().keys, vec![full]);
    }

    #[test]
    fn uneven_blockwise_split() {
        let layout = KeyLayout::new(Strategy::Blockwise, 3, 5, 2).unwrap();
        assert_eq!((layout.key_bits(0), layout.key_bits(1)), (9, 6));
        assert_eq!(origins(&layout)[0], vec![0, 1, 2, 5, 6, 7, 10, 11, 12]);
    }

    #[test]
    fn contiguous_examples() {
        let bc = branches(&["1000", "0100", "0010"]);
        let keys = contiguous_keys(&bc, 3).unwrap();
        assert_eq!(keys.keys, bc.branches().to_vec());

        // B = 3, r = 2, m = 2: key1 = (d1, d2, g1), key2 = (g2, h1, h2)
        let layout = KeyLayout::new(Strategy::Contiguous, 3, 2, 2).unwrap();
        assert_eq!(origins(&layout), vec![vec![0, 1, 2], vec![3, 4, 5]]);
    }

    #[test]
    fn invalid_table_counts() {
        assert!(KeyLayout::new(Strategy::Blockwise, 3, 4, 5).is_err());
        assert!(KeyLayout::new(Strategy::Contiguous, 3, 4, 13).is_err());
        assert!(KeyLayout::new(Strategy::Contiguous, 3, 4, 12).is_ok());
        assert!(KeyLayout::new(Strategy::Blockwise, 3, 4, 0).is_err());
        assert!(KeyLayout::for_code(Strategy::Blockwise, 3, 64, 2).is_err());
        let bc = branches(&["10", "01"]);
        assert!(blockwise_keys(&bc, 3).is_err());
    }

    #[test]
    fn strategy_parses() {
        assert_eq!("blockwise".parse::<Strategy>().unwrap(), Strategy::Blockwise);
        assert_eq!("contiguous".parse::<Strategy>().unwrap(), Strategy::Contiguous);
        assert!("striped".parse::<Strategy>().is_err());
    }

    fn arb_branches() -> impl proptest::strategy::Strategy<Value = (BranchCodes, BranchCodes, usize)> {
        (1usize..5, 1usize..40).prop_flat_map(|(b, r)| {
            let one = proptest::collection::vec(proptest::collection::vec(any::<bool>(), r), b);
            (one.clone(), one, 1..=r).prop_map(|(x, y, m)| {
                let mk = |v: Vec<Vec<bool>>| {
                    BranchCodes::new(v.iter().map(|bits| BinaryCode::from_bits(bits).unwrap()).collect()).unwrap()
                };
                (mk(x), mk(y), m)
            })
        })
    }

    proptest! {
        #[test]
        fn keys_cover_every_bit_once((x, q, m) in arb_branches()) {
            let b = x.branches().len();
            let r = x.branch_bits();
            let full_x = x.full_code();
            let full_q = q.full_code();
            let d = hamming_distance(&full_x, &full_q).unwrap();
            for strategy in [Strategy::Blockwise, Strategy::Contiguous] {
                let layout = KeyLayout::new(strategy, b, r, m).unwrap();
                let mut seen: Vec<usize> = (0..m).flat_map(|t| layout.positions(t).collect::<Vec<_>>()).collect();
                seen.sort_unstable();
                prop_assert_eq!(seen, (0..b * r).collect::<Vec<_>>());

                let kx = layout.keys(&full_x).unwrap();
                let kq = layout.keys(&full_q).unwrap();
                let sum: u32 = kx.keys.iter().zip(&kq.keys).map(|(a, c)| hamming_distance(a, c).unwrap()).sum();
                prop_assert_eq!(sum, d);

                let lens: Vec<usize> = (0..m).map(|t| layout.key_bits(t)).collect();
                prop_assert!(lens.iter().max().unwrap() - lens.iter().min().unwrap() <= b);
                for (t, key) in kx.keys.iter().enumerate() {
                    for (i, p) in layout.positions(t).enumerate() {
                        prop_assert_eq!(key.bit(i), full_x.bit(p));
                    }
                }
            }
            if b == 1 {
                prop_assert_eq!(blockwise_keys(&x, m).unwrap(), contiguous_keys(&x, m).unwrap());
            }
        }
    }
}
