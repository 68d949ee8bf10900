//! Exact Hamming-space retrieval with multi-index hashing, plus the
//! training and evaluation machinery for learning multi-branch binary codes
//! that are cheap to search.
//!
//! The crate is organised bottom-up:
//!
//! * [`codes`] packs `{-1,+1}` vectors into bit words and measures Hamming
//!   distance.
//! * [`table_construction`] decides which bits of a multi-branch code feed
//!   each hash table (block-wise or contiguous).
//! * [`mih_index`] builds the substring tables and answers exact radius and
//!   k-NN queries.
//! * [`losses`], [`linear`] and [`trainer`] learn the codes from labelled
//!   features.
//! * [`eval`] measures retrieval quality and lookup cost.
//! * [`cli`] wires everything into the `dmih` command line tool.

pub mod cli;
pub mod codes;
pub mod error;
pub mod eval;
pub mod linear;
pub mod losses;
pub mod mih_index;
pub mod oracle;
pub mod selftest;
pub mod table_construction;
pub mod trainer;

pub use codes::{hamming_distance, pack, unpack, BinaryCode, CodeBank, SubCode};
pub use error::{Error, Result};
pub use mih_index::{radius_schedule, MihIndex, RadiusSchedule, SearchStats};
pub use table_construction::{blockwise_keys, contiguous_keys, BranchCodes, KeyLayout, Strategy};
