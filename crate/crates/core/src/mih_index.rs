//! Exact Hamming search over `m` substring hash tables.
//!
//! Each code is split into `m` disjoint keys by a [`KeyLayout`]. If a stored
//! code `b` is within distance `k = m*k' + a` of the query `q`, then by the
//! pigeonhole principle one of the first `a + 1` keys is within `k'` of the
//! query key, or one of the remaining keys is within `k' - 1`. Probing those
//! balls yields a candidate set containing every `k`-neighbour; candidates
//! are then verified against the full code.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rustc_hash::FxHashMap;

use crate::codes::{hamming_words, read_u32, read_u64, words_for, BinaryCode, CodeBank, SubCode};
use crate::error::{Error, Result};
use crate::table_construction::{KeyLayout, Strategy};

const INDEX_MAGIC: &[u8; 4] = b"DMIX";
const INDEX_VERSION: u8 = 1;

/// Keys up to this many bits are looked up in a dense array.
const DIRECT_MAX_BITS: usize = 16;

/// Per-table probe radii for a full-code radius `k`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RadiusSchedule {
    /// `-1` marks a table that is not searched.
    pub per_table_radius: Vec<i64>,
    pub k: usize,
    pub k_prime: usize,
    pub a: usize,
}

/// `k' = k / m`, `a = k - m*k'`; tables `0..=a` get `k'`, the rest `k' - 1`.
pub fn radius_schedule(k: usize, m: usize) -> RadiusSchedule {
    assert!(m >= 1, "table count must be at least 1");
    let k_prime = k / m;
    let a = k - m * k_prime;
    let per_table_radius = (0..m)
        .map(|j| if j <= a { k_prime as i64 } else { k_prime as i64 - 1 })
        .collect();
    RadiusSchedule {
        per_table_radius,
        k,
        k_prime,
        a,
    }
}

/// Work done by a single query.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SearchStats {
    pub buckets_probed: u64,
    /// Ids raised by table probes, counting duplicates across tables.
    pub candidates_raised: u64,
    pub candidates_unique: u64,
    pub candidates_verified: u64,
    pub survivors: u64,
    pub wall_time: Duration,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Neighbor {
    pub id: u32,
    pub distance: u32,
}

/// `C(n, k)`, saturating at `u128::MAX`.
pub(crate) fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut c: u128 = 1;
    for i in 0..k {
        let den = i as u128 + 1;
        let g = gcd(c, den);
        match (c / g).checked_mul((n - i) as u128 / (den / g)) {
            Some(v) => c = v,
            None => return u128::MAX,
        }
    }
    c
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

fn ball_size(len: usize, radius: usize) -> u128 {
    (0..=radius.min(len)).fold(0u128, |acc, t| acc.saturating_add(binomial(len, t)))
}

#[inline]
fn flip(words: &mut [u64], bit: usize) {
    words[bit / 64] ^= 1 << (bit % 64);
}

/// Visits every `len`-bit pattern at exactly distance `r` from `key`.
fn for_each_in_shell(key: &[u64], len: usize, r: usize, buf: &mut Vec<u64>, mut visit: impl FnMut(&[u64])) {
    if r > len {
        return;
    }
    buf.clear();
    buf.extend_from_slice(key);
    let mut idx: Vec<usize> = (0..r).collect();
    for &i in &idx {
        flip(buf, i);
    }
    loop {
        visit(buf);
        let mut i = r;
        let pivot = loop {
            if i == 0 {
                break None;
            }
            i -= 1;
            if idx[i] != i + len - r {
                break Some(i);
            }
        };
        let Some(i) = pivot else { return };
        flip(buf, idx[i]);
        idx[i] += 1;
        flip(buf, idx[i]);
        for t in i + 1..r {
            flip(buf, idx[t]);
            idx[t] = idx[t - 1] + 1;
            flip(buf, idx[t]);
        }
    }
}

/// Every pattern within Hamming distance `radius` of `key`, each once, by
/// increasing distance. A negative radius yields nothing; radii beyond the
/// key length are clamped.
pub fn enumerate_ball(key: &SubCode, radius: i64) -> Vec<SubCode> {
    if radius < 0 {
        return Vec::new();
    }
    let radius = (radius as usize).min(key.len());
    let mut out = Vec::new();
    let mut buf = Vec::new();
    for r in 0..=radius {
        for_each_in_shell(key.words(), key.len(), r, &mut buf, |w| {
            out.push(SubCode::from_words(w.to_vec(), key.len()).expect("same length as key"));
        });
    }
    out
}

#[derive(Clone, Debug)]
enum Lookup {
    Direct(Vec<u32>),
    Narrow(FxHashMap<u64, u32>),
    Wide(FxHashMap<Vec<u64>, u32>),
}

const NO_BUCKET: u32 = u32::MAX;

#[derive(Clone, Debug)]
struct SubstringTable {
    key_bits: usize,
    stride: usize,
    /// Distinct keys, `stride` words each, sorted.
    keys: Vec<u64>,
    offsets: Vec<u32>,
    ids: Vec<u32>,
    lookup: Lookup,
}

impl SubstringTable {
    /// Groups `(key, id)` entries; `keys` holds one key per id in id order.
    fn from_keys(key_bits: usize, flat: &[u64]) -> Self {
        let stride = words_for(key_bits);
        let n = flat.len() / stride;
        let key_of = |i: u32| &flat[i as usize * stride..(i as usize + 1) * stride];
        let mut order: Vec<u32> = (0..n as u32).collect();
        order.sort_unstable_by(|&a, &b| key_of(a).cmp(key_of(b)).then(a.cmp(&b)));

        let mut keys = Vec::new();
        let mut offsets = vec![0u32];
        for (pos, &id) in order.iter().enumerate() {
            if pos > 0 && key_of(order[pos - 1]) != key_of(id) {
                offsets.push(pos as u32);
            }
            if pos == 0 || key_of(order[pos - 1]) != key_of(id) {
                keys.extend_from_slice(key_of(id));
            }
        }
        offsets.push(order.len() as u32);
        Self::assemble(key_bits, keys, offsets, order)
    }

    fn assemble(key_bits: usize, keys: Vec<u64>, offsets: Vec<u32>, ids: Vec<u32>) -> Self {
        let stride = words_for(key_bits);
        let buckets = keys.len() / stride;
        let lookup = if key_bits <= DIRECT_MAX_BITS {
            let mut direct = vec![NO_BUCKET; 1 << key_bits];
            for b in 0..buckets {
                direct[keys[b] as usize] = b as u32;
            }
            Lookup::Direct(direct)
        } else if stride == 1 {
            Lookup::Narrow((0..buckets).map(|b| (keys[b], b as u32)).collect())
        } else {
            Lookup::Wide(
                (0..buckets)
                    .map(|b| (keys[b * stride..(b + 1) * stride].to_vec(), b as u32))
                    .collect(),
            )
        };
        SubstringTable {
            key_bits,
            stride,
            keys,
            offsets,
            ids,
            lookup,
        }
    }

    #[inline]
    fn buckets(&self) -> usize {
        self.offsets.len() - 1
    }

    #[inline]
    fn bucket_key(&self, b: usize) -> &[u64] {
        &self.keys[b * self.stride..(b + 1) * self.stride]
    }

    #[inline]
    fn bucket_ids(&self, b: usize) -> &[u32] {
        &self.ids[self.offsets[b] as usize..self.offsets[b + 1] as usize]
    }

    #[inline]
    fn find(&self, key: &[u64]) -> Option<usize> {
        let b = match &self.lookup {
            Lookup::Direct(d) => d[key[0] as usize],
            Lookup::Narrow(map) => *map.get(&key[0])?,
            Lookup::Wide(map) => *map.get(key)?,
        };
        (b != NO_BUCKET).then_some(b as usize)
    }
}

/// Per-query candidate bookkeeping.
struct Collector<'a> {
    bank: &'a CodeBank,
    query: &'a [u64],
    visited: Vec<u64>,
    stats: SearchStats,
}

impl<'a> Collector<'a> {
    fn new(bank: &'a CodeBank, query: &'a [u64]) -> Self {
        Collector {
            bank,
            query,
            visited: vec![0; bank.len().div_ceil(64)],
            stats: SearchStats::default(),
        }
    }

    #[inline]
    fn offer(&mut self, ids: &[u32], mut on_new: impl FnMut(u32, u32)) {
        self.stats.candidates_raised += ids.len() as u64;
        for &id in ids {
            let (w, bit) = (id as usize / 64, 1u64 << (id % 64));
            if self.visited[w] & bit != 0 {
                continue;
            }
            self.visited[w] |= bit;
            self.stats.candidates_unique += 1;
            self.stats.candidates_verified += 1;
            on_new(id, self.bank.distance_to(id as usize, self.query));
        }
    }
}

/// Substring hash tables over a shared code bank.
#[derive(Clone, Debug)]
pub struct MihIndex {
    layout: KeyLayout,
    tables: Vec<SubstringTable>,
    bank: Arc<CodeBank>,
}

impl MihIndex {
    pub fn build(bank: Arc<CodeBank>, layout: KeyLayout) -> Result<Self> {
        if bank.is_empty() {
            return Err(Error::EmptyBank);
        }
        if layout.total_bits() != bank.bits() {
            return Err(Error::LengthMismatch(layout.total_bits(), bank.bits()));
        }
        let tables = (0..layout.tables())
            .map(|t| {
                let bits = layout.key_bits(t);
                let stride = words_for(bits);
                let mut flat = vec![0u64; bank.len() * stride];
                for id in 0..bank.len() {
                    layout.extract_into(bank.words(id), t, &mut flat[id * stride..(id + 1) * stride]);
                }
                SubstringTable::from_keys(bits, &flat)
            })
            .collect();
        Ok(MihIndex { layout, tables, bank })
    }

    /// Builds `m` tables for a bank of `branches`-branch codes.
    pub fn with_params(bank: Arc<CodeBank>, m: usize, strategy: Strategy, branches: usize) -> Result<Self> {
        let layout = KeyLayout::for_code(strategy, branches, bank.bits(), m)?;
        Self::build(bank, layout)
    }

    pub fn layout(&self) -> &KeyLayout {
        &self.layout
    }

    pub fn bank(&self) -> &Arc<CodeBank> {
        &self.bank
    }

    pub fn tables(&self) -> usize {
        self.tables.len()
    }

    pub fn len(&self) -> usize {
        self.bank.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bank.is_empty()
    }

    /// Buckets of table `t` as `(key, sorted ids)`.
    pub fn buckets(&self, t: usize) -> impl Iterator<Item = (SubCode, &[u32])> + '_ {
        let table = &self.tables[t];
        (0..table.buckets()).map(move |b| {
            let key = SubCode::from_words(table.bucket_key(b).to_vec(), table.key_bits).expect("stored key");
            (key, table.bucket_ids(b))
        })
    }

    fn query_keys(&self, q: &BinaryCode) -> Result<Vec<Vec<u64>>> {
        if q.len() != self.bank.bits() {
            return Err(Error::LengthMismatch(q.len(), self.bank.bits()));
        }
        Ok((0..self.tables())
            .map(|t| {
                let mut key = vec![0; words_for(self.layout.key_bits(t))];
                self.layout.extract_into(q.words(), t, &mut key);
                key
            })
            .collect())
    }

    /// All ids within full Hamming distance `k` of `q`, ascending.
    pub fn r_neighbor_search(&self, q: &BinaryCode, k: usize) -> Result<(Vec<u32>, SearchStats)> {
        let start = Instant::now();
        let keys = self.query_keys(q)?;
        let schedule = radius_schedule(k, self.tables());
        let mut col = Collector::new(&self.bank, q.words());
        let mut survivors = Vec::new();
        let mut buf = Vec::new();

        for (t, table) in self.tables.iter().enumerate() {
            let radius = schedule.per_table_radius[t];
            if radius < 0 {
                continue;
            }
            let radius = (radius as usize).min(table.key_bits);
            let qkey = &keys[t];
            let mut accept = |id: u32, d: u32| {
                if d as usize <= k {
                    survivors.push(id);
                }
            };
            if ball_size(table.key_bits, radius) > table.buckets() as u128 {
                // Scanning the distinct keys is cheaper than enumerating the ball.
                col.stats.buckets_probed += table.buckets() as u64;
                for b in 0..table.buckets() {
                    if hamming_words(table.bucket_key(b), qkey) as usize <= radius {
                        col.offer(table.bucket_ids(b), &mut accept);
                    }
                }
            } else {
                for r in 0..=radius {
                    for_each_in_shell(qkey, table.key_bits, r, &mut buf, |probe| {
                        col.stats.buckets_probed += 1;
                        if let Some(b) = table.find(probe) {
                            col.offer(table.bucket_ids(b), &mut accept);
                        }
                    });
                }
            }
        }
        survivors.sort_unstable();
        col.stats.survivors = survivors.len() as u64;
        col.stats.wall_time = start.elapsed();
        Ok((survivors, col.stats))
    }

    /// The `k_nn` nearest codes ordered by `(distance, id)`.
    ///
    /// The full radius grows one step at a time; going from `k - 1` to `k`
    /// widens only table `k mod m`, whose shell at distance `k / m` is probed.
    /// After level `k` every code within distance `k` has been seen, so the
    /// search stops once that many-verified set holds `k_nn` codes.
    pub fn knn_search(&self, q: &BinaryCode, k_nn: usize) -> Result<(Vec<Neighbor>, SearchStats)> {
        let start = Instant::now();
        if k_nn == 0 || k_nn > self.len() {
            return Err(Error::param(format!("k_nn must be in 1..={} (got {k_nn})", self.len())));
        }
        let keys = self.query_keys(q)?;
        let bits = self.bank.bits();
        let m = self.tables();
        let mut col = Collector::new(&self.bank, q.words());
        let mut by_distance: Vec<Vec<u32>> = vec![Vec::new(); bits + 1];
        let mut shells: Vec<Option<Vec<Vec<u32>>>> = vec![None; m];
        let mut buf = Vec::new();
        let mut within = 0usize;
        let mut level = 0usize;

        loop {
            let t = level % m;
            let radius = level / m;
            let table = &self.tables[t];
            let mut accept = |id: u32, d: u32| by_distance[d as usize].push(id);
            if radius <= table.key_bits {
                if binomial(table.key_bits, radius) > table.buckets() as u128 {
                    let grouped = shells[t].get_or_insert_with(|| {
                        col.stats.buckets_probed += table.buckets() as u64;
                        let mut g = vec![Vec::new(); table.key_bits + 1];
                        for b in 0..table.buckets() {
                            g[hamming_words(table.bucket_key(b), &keys[t]) as usize].push(b as u32);
                        }
                        g
                    });
                    for &b in &grouped[radius] {
                        col.offer(table.bucket_ids(b as usize), &mut accept);
                    }
                } else {
                    for_each_in_shell(&keys[t], table.key_bits, radius, &mut buf, |probe| {
                        col.stats.buckets_probed += 1;
                        if let Some(b) = table.find(probe) {
                            col.offer(table.bucket_ids(b), &mut accept);
                        }
                    });
                }
            }
            if level <= bits {
                within += by_distance[level].len();
            }
            if within >= k_nn || level >= bits {
                break;
            }
            level += 1;
        }

        let mut out = Vec::with_capacity(k_nn);
        'fill: for (d, ids) in by_distance.iter_mut().enumerate().take(level + 1) {
            ids.sort_unstable();
            for &id in ids.iter() {
                if out.len() == k_nn {
                    break 'fill;
                }
                out.push(Neighbor { id, distance: d as u32 });
            }
        }
        col.stats.survivors = out.len() as u64;
        col.stats.wall_time = start.elapsed();
        Ok((out, col.stats))
    }

    /// Snapshot: header, then per table the entry count, bucket count and
    /// `(key words, id count, ids)` records in key order. The bank is stored
    /// separately.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(INDEX_MAGIC)?;
        w.write_all(&[INDEX_VERSION])?;
        w.write_all(&(self.tables() as u32).to_le_bytes())?;
        w.write_all(&(self.bank.bits() as u32).to_le_bytes())?;
        w.write_all(&[self.layout.strategy().tag()])?;
        w.write_all(&(self.layout.branches() as u32).to_le_bytes())?;
        w.write_all(&(self.layout.branch_bits() as u32).to_le_bytes())?;
        for table in &self.tables {
            w.write_all(&(table.ids.len() as u64).to_le_bytes())?;
            w.write_all(&(table.buckets() as u64).to_le_bytes())?;
            for b in 0..table.buckets() {
                for word in table.bucket_key(b) {
                    w.write_all(&word.to_le_bytes())?;
                }
                let ids = table.bucket_ids(b);
                w.write_all(&(ids.len() as u32).to_le_bytes())?;
                for id in ids {
                    w.write_all(&id.to_le_bytes())?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a snapshot and checks it against `bank` key by key.
    pub fn read_from<R: Read>(mut r: R, bank: Arc<CodeBank>) -> Result<Self> {
        let bad = |reason: String| Error::format("index snapshot", reason);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != INDEX_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let mut byte = [0u8; 1];
        r.read_exact(&mut byte)?;
        if byte[0] != INDEX_VERSION {
            return Err(bad(format!("unsupported version {}", byte[0])));
        }
        let m = read_u32(&mut r)? as usize;
        let bits = read_u32(&mut r)? as usize;
        r.read_exact(&mut byte)?;
        let strategy = Strategy::from_tag(byte[0]).ok_or_else(|| bad(format!("unknown strategy tag {}", byte[0])))?;
        let branches = read_u32(&mut r)? as usize;
        let branch_bits = read_u32(&mut r)? as usize;
        if bits != bank.bits() || branches * branch_bits != bits {
            return Err(bad(format!(
                "header describes {branches} x {branch_bits} = {bits}-bit codes but the bank holds {}-bit codes",
                bank.bits()
            )));
        }
        let layout = KeyLayout::new(strategy, branches, branch_bits, m).map_err(|e| bad(e.to_string()))?;
        let n = bank.len();

        let mut tables = Vec::with_capacity(m);
        let mut expected = Vec::new();
        for t in 0..m {
            let key_bits = layout.key_bits(t);
            let stride = words_for(key_bits);
            let entries = read_u64(&mut r)? as usize;
            if entries != n {
                return Err(bad(format!("table {t} holds {entries} entries, bank has {n}")));
            }
            let buckets = read_u64(&mut r)? as usize;
            if buckets > n {
                return Err(bad(format!("table {t} has more buckets than codes")));
            }
            let mut keys = Vec::with_capacity(buckets * stride);
            let mut offsets = vec![0u32];
            let mut ids = Vec::with_capacity(n);
            for _ in 0..buckets {
                for _ in 0..stride {
                    keys.push(read_u64(&mut r)?);
                }
                let count = read_u32(&mut r)? as usize;
                if count == 0 || ids.len() + count > n {
                    return Err(bad(format!("table {t} has an invalid bucket size {count}")));
                }
                for _ in 0..count {
                    ids.push(read_u32(&mut r)?);
                }
                offsets.push(ids.len() as u32);
            }
            if ids.len() != n {
                return Err(bad(format!("table {t} lists {} ids, bank has {n}", ids.len())));
            }
            let table = SubstringTable::assemble(key_bits, keys, offsets, ids);

            let mut seen = vec![false; n];
            expected.resize(stride, 0);
            for b in 0..table.buckets() {
                for &id in table.bucket_ids(b) {
                    let id = id as usize;
                    if id >= n || std::mem::replace(&mut seen[id], true) {
                        return Err(bad(format!("table {t} lists id {id} twice or out of range")));
                    }
                    layout.extract_into(bank.words(id), t, &mut expected);
                    if expected != table.bucket_key(b) {
                        return Err(bad(format!("table {t} files id {id} under the wrong key")));
                    }
                }
            }
            tables.push(table);
        }
        let mut probe = [0u8; 1];
        if r.read(&mut probe)? != 0 {
            return Err(bad("trailing bytes".into()));
        }
        Ok(MihIndex { layout, tables, bank })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::from(e).at(path))?;
        self.write_to(BufWriter::new(f)).map_err(|e| e.at(path))
    }

    pub fn load(path: impl AsRef<Path>, bank: Arc<CodeBank>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::from(e).at(path))?;
        Self::read_from(BufReader::new(f), bank).map_err(|e| e.at(path))
    }
}
