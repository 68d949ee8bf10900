//! Bit-packed binary codes.
//!
//! Bit `j` of a code lives in word `j / 64` at position `j % 64`
//! (little-endian words). A set bit stands for `+1`, a clear bit for `-1`.
//! Padding bits beyond the code length are always zero so that popcounts
//! over whole words never see stray ones.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};

pub const WORD_BITS: usize = 64;

const BANK_MAGIC: &[u8; 4] = b"DMIH";
const BANK_VERSION: u8 = 1;

#[inline]
pub(crate) fn words_for(bits: usize) -> usize {
    bits.div_ceil(WORD_BITS)
}

#[inline]
fn tail_mask(bits: usize) -> u64 {
    match bits % WORD_BITS {
        0 => u64::MAX,
        rem => (1u64 << rem) - 1,
    }
}

/// Popcount of the XOR of two equally long word slices.
#[inline]
pub(crate) fn hamming_words(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

/// Reads `n` (1..=64) bits starting at bit `pos`, returned in the low bits.
#[inline]
pub(crate) fn read_bits(words: &[u64], pos: usize, n: usize) -> u64 {
    debug_assert!((1..=WORD_BITS).contains(&n));
    let w = pos / WORD_BITS;
    let off = pos % WORD_BITS;
    let mut v = words[w] >> off;
    if off != 0 && off + n > WORD_BITS {
        v |= words[w + 1] << (WORD_BITS - off);
    }
    if n < WORD_BITS {
        v & ((1u64 << n) - 1)
    } else {
        v
    }
}

/// ORs the low `n` bits of `value` into `words` starting at bit `pos`.
#[inline]
fn or_bits(words: &mut [u64], pos: usize, n: usize, value: u64) {
    let w = pos / WORD_BITS;
    let off = pos % WORD_BITS;
    words[w] |= value << off;
    if off != 0 && off + n > WORD_BITS {
        words[w + 1] |= value >> (WORD_BITS - off);
    }
}

/// Copies `len` bits from `src[src_pos..]` into `dst[dst_pos..]`.
/// The destination range must be zero.
pub(crate) fn copy_bits(src: &[u64], src_pos: usize, len: usize, dst: &mut [u64], dst_pos: usize) {
    let mut done = 0;
    while done < len {
        let n = (len - done).min(WORD_BITS);
        let v = read_bits(src, src_pos + done, n);
        or_bits(dst, dst_pos + done, n, v);
        done += n;
    }
}

/// A packed code of `len` bits.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BinaryCode {
    words: Vec<u64>,
    len: usize,
}

/// A table key: a value-normalised substring of a code, shifted to bit 0.
pub type SubCode = BinaryCode;

impl BinaryCode {
    pub fn zeros(len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::param("code length must be positive"));
        }
        Ok(BinaryCode {
            words: vec![0; words_for(len)],
            len,
        })
    }

    pub fn ones(len: usize) -> Result<Self> {
        let mut c = Self::zeros(len)?;
        c.words.iter_mut().for_each(|w| *w = u64::MAX);
        c.clear_padding();
        Ok(c)
    }

    /// Wraps raw words; any padding bits beyond `len` are cleared.
    pub fn from_words(mut words: Vec<u64>, len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::param("code length must be positive"));
        }
        if words.len() != words_for(len) {
            return Err(Error::param(format!(
                "{} words cannot hold exactly {len} bits",
                words.len()
            )));
        }
        let last = words.len() - 1;
        words[last] &= tail_mask(len);
        Ok(BinaryCode { words, len })
    }

    pub fn from_bits(bits: &[bool]) -> Result<Self> {
        let mut c = Self::zeros(bits.len())?;
        for (j, &b) in bits.iter().enumerate() {
            if b {
                c.words[j / WORD_BITS] |= 1 << (j % WORD_BITS);
            }
        }
        Ok(c)
    }

    /// Binarizes real values with `sign(x) = +1` for `x >= 0`.
    pub fn from_signs(values: &[f64]) -> Result<Self> {
        let mut c = Self::zeros(values.len())?;
        for (j, &v) in values.iter().enumerate() {
            if v >= 0.0 {
                c.words[j / WORD_BITS] |= 1 << (j % WORD_BITS);
            }
        }
        Ok(c)
    }

    pub fn random<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Result<Self> {
        let words = (0..words_for(len)).map(|_| rng.random::<u64>()).collect();
        Self::from_words(words, len)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.len
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn words(&self) -> &[u64] {
        &self.words
    }

    #[inline]
    pub fn bit(&self, j: usize) -> bool {
        assert!(j < self.len, "bit {j} out of range for {}-bit code", self.len);
        (self.words[j / WORD_BITS] >> (j % WORD_BITS)) & 1 == 1
    }

    pub fn set_bit(&mut self, j: usize, value: bool) {
        assert!(j < self.len, "bit {j} out of range for {}-bit code", self.len);
        let mask = 1u64 << (j % WORD_BITS);
        if value {
            self.words[j / WORD_BITS] |= mask;
        } else {
            self.words[j / WORD_BITS] &= !mask;
        }
    }

    pub fn flip(&mut self, j: usize) {
        assert!(j < self.len, "bit {j} out of range for {}-bit code", self.len);
        self.words[j / WORD_BITS] ^= 1 << (j % WORD_BITS);
    }

    pub fn count_ones(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }

    pub fn to_bits(&self) -> Vec<bool> {
        (0..self.len).map(|j| self.bit(j)).collect()
    }

    /// Concatenates codes in order.
    pub fn concat<'a, I>(parts: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a BinaryCode>,
    {
        let parts: Vec<&BinaryCode> = parts.into_iter().collect();
        let total = parts.iter().map(|p| p.len).sum();
        let mut out = Self::zeros(total)?;
        let mut pos = 0;
        for p in parts {
            copy_bits(&p.words, 0, p.len, &mut out.words, pos);
            pos += p.len;
        }
        Ok(out)
    }

    fn clear_padding(&mut self) {
        let last = self.words.len() - 1;
        self.words[last] &= tail_mask(self.len);
    }
}

impl std::fmt::Display for BinaryCode {
    /// Bits in index order, bit 0 first.
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for j in 0..self.len {
            f.write_str(if self.bit(j) { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl std::str::FromStr for BinaryCode {
    type Err = Error;

    /// Parses a string of `0`/`1` characters, bit 0 first.
    fn from_str(s: &str) -> Result<Self> {
        let bits = s
            .chars()
            .map(|ch| match ch {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::param(format!("unexpected character {other:?} in bit string"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_bits(&bits)
    }
}

/// Number of differing bits between two codes of equal length.
pub fn hamming_distance(a: &BinaryCode, b: &BinaryCode) -> Result<u32> {
    if a.len != b.len {
        return Err(Error::LengthMismatch(a.len, b.len));
    }
    Ok(hamming_words(&a.words, &b.words))
}

/// Packs a `{-1,+1}` vector; element `j` becomes bit `j`.
pub fn pack(code_pm1: &[i8]) -> Result<BinaryCode> {
    let mut c = BinaryCode::zeros(code_pm1.len())?;
    for (j, &v) in code_pm1.iter().enumerate() {
        match v {
            1 => c.words[j / WORD_BITS] |= 1 << (j % WORD_BITS),
            -1 => {}
            _ => {
                return Err(Error::InvalidSign {
                    index: j,
                    value: f64::from(v),
                })
            }
        }
    }
    Ok(c)
}

pub fn unpack(c: &BinaryCode) -> Vec<i8> {
    (0..c.len).map(|j| if c.bit(j) { 1 } else { -1 }).collect()
}

/// Bits `start..start + len` of `c`, shifted down to bit 0.
pub fn extract_substring(c: &BinaryCode, start: usize, len: usize) -> Result<SubCode> {
    let end = start.checked_add(len).ok_or(Error::OutOfRange {
        start,
        end: usize::MAX,
        len: c.len,
    })?;
    if len == 0 || end > c.len {
        return Err(Error::OutOfRange { start, end, len: c.len });
    }
    let mut out = BinaryCode::zeros(len)?;
    copy_bits(&c.words, start, len, &mut out.words, 0);
    Ok(out)
}

/// A dense array of equally long codes, addressed by id `0..n`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodeBank {
    bits: usize,
    stride: usize,
    words: Vec<u64>,
}

impl CodeBank {
    pub fn new(bits: usize) -> Result<Self> {
        if bits == 0 {
            return Err(Error::param("code length must be positive"));
        }
        Ok(CodeBank {
            bits,
            stride: words_for(bits),
            words: Vec::new(),
        })
    }

    pub fn from_codes(codes: &[BinaryCode]) -> Result<Self> {
        let first = codes.first().ok_or(Error::EmptyBank)?;
        let mut bank = Self::new(first.len())?;
        for c in codes {
            bank.push(c)?;
        }
        Ok(bank)
    }

    pub fn random<R: Rng + ?Sized>(n: usize, bits: usize, rng: &mut R) -> Result<Self> {
        let mut bank = Self::new(bits)?;
        for _ in 0..n {
            bank.push(&BinaryCode::random(bits, rng)?)?;
        }
        Ok(bank)
    }

    pub fn push(&mut self, code: &BinaryCode) -> Result<u32> {
        if code.len() != self.bits {
            return Err(Error::LengthMismatch(self.bits, code.len()));
        }
        let id = self.len();
        if id >= u32::MAX as usize {
            return Err(Error::param("code bank is limited to 2^32 - 1 codes"));
        }
        self.words.extend_from_slice(code.words());
        Ok(id as u32)
    }

    #[inline]
    pub fn bits(&self) -> usize {
        self.bits
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.words.len() / self.stride
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Raw words of code `id`.
    #[inline]
    pub fn words(&self, id: usize) -> &[u64] {
        &self.words[id * self.stride..(id + 1) * self.stride]
    }

    pub fn get(&self, id: usize) -> BinaryCode {
        BinaryCode {
            words: self.words(id).to_vec(),
            len: self.bits,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = BinaryCode> + '_ {
        (0..self.len()).map(|i| self.get(i))
    }

    /// Hamming distance between stored code `id` and `q` (lengths already checked).
    #[inline]
    pub(crate) fn distance_to(&self, id: usize, q: &[u64]) -> u32 {
        hamming_words(self.words(id), q)
    }

    /// Keeps only the listed ids, in the given order.
    pub fn subset(&self, ids: &[usize]) -> Result<Self> {
        let mut out = Self::new(self.bits)?;
        for &i in ids {
            if i >= self.len() {
                return Err(Error::param(format!("id {i} out of range for bank of {}", self.len())));
            }
            out.words.extend_from_slice(self.words(i));
        }
        Ok(out)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(BANK_MAGIC)?;
        w.write_all(&[BANK_VERSION])?;
        w.write_all(&(self.bits as u32).to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        for word in &self.words {
            w.write_all(&word.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != BANK_MAGIC {
            return Err(Error::format("code bank", "bad magic"));
        }
        let mut version = [0u8; 1];
        r.read_exact(&mut version)?;
        if version[0] != BANK_VERSION {
            return Err(Error::format(
                "code bank",
                format!("unsupported version {}", version[0]),
            ));
        }
        let bits = read_u32(&mut r)? as usize;
        let n = read_u64(&mut r)? as usize;
        let mut bank = Self::new(bits).map_err(|_| Error::format("code bank", "zero code length"))?;
        let total = n
            .checked_mul(bank.stride)
            .ok_or_else(|| Error::format("code bank", "record count overflows"))?;
        bank.words.reserve(total);
        let mask = tail_mask(bits);
        for i in 0..total {
            let word = read_u64(&mut r)?;
            if (i + 1) % bank.stride == 0 && word & !mask != 0 {
                return Err(Error::format(
                    "code bank",
                    format!("nonzero padding in record {}", i / bank.stride),
                ));
            }
            bank.words.push(word);
        }
        let mut probe = [0u8; 1];
        if r.read(&mut probe)? != 0 {
            return Err(Error::format("code bank", "trailing bytes after last record"));
        }
        Ok(bank)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::from(e).at(path))?;
        self.write_to(BufWriter::new(f)).map_err(|e| e.at(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::from(e).at(path))?;
        Self::read_from(BufReader::new(f)).map_err(|e| e.at(path))
    }
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    Ok(f64::from_bits(read_u64(r)?))
}
