//! Retrieval metrics, re-ranked precision/recall/time curves and lookup-cost
//! comparisons between indexes.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::codes::{hamming_words, BinaryCode};
use crate::error::{Error, Result};
use crate::mih_index::{MihIndex, SearchStats};
use crate::oracle::{linear_scan_knn, linear_scan_radius};
use crate::trainer::LabeledBank;

/// AP of a ranked relevance list: mean of precision@i over relevant ranks `i`.
/// `None` when nothing is relevant.
pub fn average_precision(relevance: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &rel) in relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Mean AP over the lists that contain at least one relevant item.
pub fn mean_average_precision(lists: &[Vec<bool>]) -> Option<f64> {
    let aps: Vec<f64> = lists.iter().filter_map(|l| average_precision(l)).collect();
    (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Fraction of lists whose first relevant item is at rank `<= k` (1-based).
/// Lists without any relevant item are not counted.
pub fn cmc_at(lists: &[Vec<bool>], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::param("CMC rank cutoff must be at least 1"));
    }
    let firsts: Vec<usize> = lists.iter().filter_map(|l| l.iter().position(|&r| r)).collect();
    if firsts.is_empty() {
        return Ok(0.0);
    }
    Ok(firsts.iter().filter(|&&p| p < k).count() as f64 / firsts.len() as f64)
}

/// Query and gallery split over one labelled set.
///
/// For each query, gallery items sharing both its identity and its camera are
/// ignored; the remaining same-identity items are relevant.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RetrievalProtocol {
    pub queries: Vec<usize>,
    pub gallery: Vec<usize>,
    pub top_n: usize,
}

impl RetrievalProtocol {
    pub fn new(queries: Vec<usize>, gallery: Vec<usize>, top_n: usize) -> Result<Self> {
        if top_n == 0 {
            return Err(Error::param("top_n must be positive"));
        }
        let g: BTreeSet<_> = gallery.iter().collect();
        if g.len() != gallery.len() {
            return Err(Error::param("gallery ids must be distinct"));
        }
        if queries.iter().any(|q| g.contains(q)) {
            return Err(Error::param("a query may not appear in the gallery"));
        }
        Ok(RetrievalProtocol {
            queries,
            gallery,
            top_n,
        })
    }

    /// One query per `(identity, camera)` pair (its first sample); every other
    /// sample goes to the gallery.
    pub fn reid(labels: &[u32], cameras: &[u32], top_n: usize) -> Result<Self> {
        if labels.len() != cameras.len() {
            return Err(Error::LengthMismatch(labels.len(), cameras.len()));
        }
        let mut seen = BTreeSet::new();
        let (mut queries, mut gallery) = (Vec::new(), Vec::new());
        for (i, key) in labels.iter().zip(cameras).enumerate() {
            if seen.insert(key) {
                queries.push(i);
            } else {
                gallery.push(i);
            }
        }
        Self::new(queries, gallery, top_n)
    }

    fn check(&self, data: &LabeledBank) -> Result<()> {
        let n = data.len();
        if self.queries.iter().chain(&self.gallery).any(|&i| i >= n) {
            return Err(Error::param(format!("protocol refers to ids beyond the {n}-item set")));
        }
        if data.labels.len() != n || data.cameras.len() != n || data.features.len() != n {
            return Err(Error::Dimension(
                "labels, cameras and features must cover every code".into(),
            ));
        }
        Ok(())
    }

    fn excluded(&self, data: &LabeledBank, q: usize, g: usize) -> bool {
        data.labels[q] == data.labels[g] && data.cameras[q] == data.cameras[g]
    }

    fn relevant(&self, data: &LabeledBank, q: usize, g: usize) -> bool {
        data.labels[q] == data.labels[g] && data.cameras[q] != data.cameras[g]
    }

    /// Number of relevant gallery items for query `q`.
    pub fn relevant_count(&self, data: &LabeledBank, q: usize) -> usize {
        self.gallery.iter().filter(|&&g| self.relevant(data, q, g)).count()
    }

    /// Relevance of a ranked list of gallery positions, excluded items dropped.
    pub fn relevance(&self, data: &LabeledBank, q: usize, ranked_positions: &[usize]) -> Vec<bool> {
        ranked_positions
            .iter()
            .map(|&p| self.gallery[p])
            .filter(|&g| !self.excluded(data, q, g))
            .map(|g| self.relevant(data, q, g))
            .collect()
    }

    /// The gallery codes as their own bank, position `i` holding `gallery[i]`.
    pub fn gallery_bank(&self, data: &LabeledBank) -> Result<crate::codes::CodeBank> {
        self.check(data)?;
        data.bank.subset(&self.gallery)
    }
}

/// Gallery positions for every query ranked by `(Hamming distance, position)`.
pub fn hamming_ranking(data: &LabeledBank, protocol: &RetrievalProtocol) -> Result<Vec<Vec<bool>>> {
    protocol.check(data)?;
    Ok(protocol
        .queries
        .iter()
        .map(|&q| {
            let qw = data.bank.words(q);
            let mut order: Vec<(u32, usize)> = protocol
                .gallery
                .iter()
                .enumerate()
                .map(|(p, &g)| (hamming_words(qw, data.bank.words(g)), p))
                .collect();
            order.sort_unstable();
            let positions: Vec<usize> = order.into_iter().map(|(_, p)| p).collect();
            protocol.relevance(data, q, &positions)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankingMetrics {
    pub map: f64,
    /// `(k, CMC@k)` pairs.
    pub cmc: Vec<(usize, f64)>,
    /// Queries with at least one relevant gallery item.
    pub evaluated_queries: usize,
}

/// mAP and CMC of the Hamming ranking.
pub fn evaluate_ranking(
    data: &LabeledBank,
    protocol: &RetrievalProtocol,
    cmc_ranks: &[usize],
) -> Result<RankingMetrics> {
    let lists = hamming_ranking(data, protocol)?;
    let evaluated_queries = lists.iter().filter(|l| l.contains(&true)).count();
    let map = mean_average_precision(&lists).ok_or_else(|| Error::param("no query has a relevant gallery item"))?;
    let cmc = cmc_ranks
        .iter()
        .map(|&k| Ok((k, cmc_at(&lists, k)?)))
        .collect::<Result<_>>()?;
    Ok(RankingMetrics {
        map,
        cmc,
        evaluated_queries,
    })
}

fn euclidean_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// The `top_n` candidates closest to `query` in feature space, ordered by
/// `(distance, candidate order)`.
pub fn rerank(candidates: &[usize], query: &[f64], features: &[Vec<f64>], top_n: usize) -> Vec<usize> {
    let mut scored: Vec<(f64, usize, usize)> = candidates
        .iter()
        .enumerate()
        .map(|(rank, &c)| (euclidean_sq(query, &features[c]), rank, c))
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored.into_iter().take(top_n).map(|(_, _, c)| c).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TimingConfig {
    pub warmup: usize,
    pub repetitions: usize,
}

impl Default for TimingConfig {
    fn default() -> Self {
        TimingConfig {
            warmup: 3,
            repetitions: 5,
        }
    }
}

fn median(mut xs: Vec<Duration>) -> Duration {
    xs.sort_unstable();
    xs[xs.len() / 2]
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub k_nn: usize,
    pub precision: f64,
    pub recall: f64,
    /// Mean per-query lookup plus re-rank seconds.
    pub time_s: f64,
}

fn check_gallery_index(index: &MihIndex, data: &LabeledBank, protocol: &RetrievalProtocol) -> Result<()> {
    protocol.check(data)?;
    if index.len() != protocol.gallery.len() || index.bank().bits() != data.bank.bits() {
        return Err(Error::Dimension(format!(
            "index holds {} codes of {} bits, gallery has {} codes of {} bits",
            index.len(),
            index.bank().bits(),
            protocol.gallery.len(),
            data.bank.bits()
        )));
    }
    Ok(())
}

/// k-NN lookup over the gallery index, then feature re-ranking of the
/// non-excluded neighbors. Precision is taken over `min(top_n, k_nn)` slots.
/// Each point's time is the median over timed passes of the mean per-query time.
pub fn precision_recall_time_curve(
    index: &MihIndex,
    data: &LabeledBank,
    protocol: &RetrievalProtocol,
    k_nn_list: &[usize],
    timing: TimingConfig,
) -> Result<Vec<CurvePoint>> {
    check_gallery_index(index, data, protocol)?;
    let queries: Vec<(usize, usize)> = protocol
        .queries
        .iter()
        .map(|&q| (q, protocol.relevant_count(data, q)))
        .filter(|&(_, rel)| rel > 0)
        .collect();
    if queries.is_empty() {
        return Err(Error::param("no query has a relevant gallery item"));
    }
    let codes: Vec<BinaryCode> = queries.iter().map(|&(q, _)| data.bank.get(q)).collect();
    let mut out = Vec::with_capacity(k_nn_list.len());
    for &k_nn in k_nn_list {
        let slots = protocol.top_n.min(k_nn);
        let pass = || -> Result<(f64, f64)> {
            let (mut precision, mut recall) = (0.0, 0.0);
            for (&(q, relevant), code) in queries.iter().zip(&codes) {
                let (neighbors, _) = index.knn_search(code, k_nn)?;
                let candidates: Vec<usize> = neighbors
                    .iter()
                    .map(|n| protocol.gallery[n.id as usize])
                    .filter(|&g| !protocol.excluded(data, q, g))
                    .collect();
                let top = rerank(&candidates, &data.features[q], &data.features, slots);
                let correct = top.iter().filter(|&&g| protocol.relevant(data, q, g)).count() as f64;
                precision += correct / slots as f64;
                recall += correct / relevant as f64;
            }
            let nq = queries.len() as f64;
            Ok((precision / nq, recall / nq))
        };
        for _ in 0..timing.warmup {
            pass()?;
        }
        let mut times = Vec::with_capacity(timing.repetitions.max(1));
        let mut result = (0.0, 0.0);
        for _ in 0..timing.repetitions.max(1) {
            let start = Instant::now();
            result = pass()?;
            times.push(start.elapsed());
        }
        out.push(CurvePoint {
            k_nn,
            precision: result.0,
            recall: result.1,
            time_s: median(times).as_secs_f64() / queries.len() as f64,
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Setting {
    Radius(usize),
    Knn(usize),
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Setting::Radius(k) => write!(f, "radius={k}"),
            Setting::Knn(k) => write!(f, "knn={k}"),
        }
    }
}

/// Mean per-query cost of one index at one setting.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostRow {
    pub buckets: f64,
    pub candidates: f64,
    pub survivors: f64,
    pub time_s: f64,
}

/// Costs of two indexes at one setting; each ratio is `a / b`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostComparison {
    pub setting: Setting,
    pub a: CostRow,
    pub b: CostRow,
    pub bucket_ratio: f64,
    pub candidate_ratio: f64,
    pub time_ratio: f64,
    /// Per-query stats of the last timed pass, `(a, b)` per query.
    #[serde(skip)]
    pub per_query: Vec<(SearchStats, SearchStats)>,
}

pub(crate) fn ratio(a: f64, b: f64) -> f64 {
    if a == b {
        1.0
    } else {
        a / b
    }
}

fn search_one(index: &MihIndex, q: &BinaryCode, setting: Setting) -> Result<(Vec<(u32, u32)>, SearchStats)> {
    match setting {
        Setting::Radius(k) => {
            let (ids, stats) = index.r_neighbor_search(q, k)?;
            Ok((ids.into_iter().map(|id| (0, id)).collect(), stats))
        }
        Setting::Knn(k) => {
            let (ns, stats) = index.knn_search(q, k)?;
            Ok((ns.into_iter().map(|n| (n.distance, n.id)).collect(), stats))
        }
    }
}

fn scan_one(index: &MihIndex, q: &BinaryCode, setting: Setting) -> Vec<(u32, u32)> {
    match setting {
        Setting::Radius(k) => linear_scan_radius(index.bank(), q, k)
            .into_iter()
            .map(|id| (0, id))
            .collect(),
        Setting::Knn(k) => linear_scan_knn(index.bank(), q, k)
            .into_iter()
            .map(|n| (n.distance, n.id))
            .collect(),
    }
}

/// Compares the lookup cost of two indexes over the same banks size and
/// code length.
///
/// Every result is first certified against a linear scan of its own bank;
/// when both indexes share a bank and query set the two result sets are also
/// required to agree. Any disagreement is an [`Error::Exactness`].
pub fn lookup_cost_report(
    a: &MihIndex,
    b: &MihIndex,
    queries_a: &[BinaryCode],
    queries_b: &[BinaryCode],
    settings: &[Setting],
    timing: TimingConfig,
) -> Result<Vec<CostComparison>> {
    if a.len() != b.len() || a.bank().bits() != b.bank().bits() {
        return Err(Error::Dimension(
            "compared indexes must hold banks of equal size and code length".into(),
        ));
    }
    if queries_a.len() != queries_b.len() || queries_a.is_empty() {
        return Err(Error::param("both indexes need the same, non-zero number of queries"));
    }
    let shared = a.bank() == b.bank() && queries_a == queries_b;
    let mut out = Vec::with_capacity(settings.len());
    for &setting in settings {
        for (i, (qa, qb)) in queries_a.iter().zip(queries_b).enumerate() {
            let (ra, _) = search_one(a, qa, setting)?;
            let (rb, _) = search_one(b, qb, setting)?;
            if ra != scan_one(a, qa, setting) || rb != scan_one(b, qb, setting) {
                return Err(Error::Exactness(format!(
                    "{setting}, query {i}: index result differs from linear scan"
                )));
            }
            if shared && ra != rb {
                return Err(Error::Exactness(format!("{setting}, query {i}: indexes disagree")));
            }
        }
        let timed = |index: &MihIndex, queries: &[BinaryCode]| -> Result<(Vec<SearchStats>, Duration)> {
            for _ in 0..timing.warmup {
                for q in queries {
                    search_one(index, q, setting)?;
                }
            }
            let mut times = Vec::new();
            let mut stats = Vec::new();
            for _ in 0..timing.repetitions.max(1) {
                stats = queries
                    .iter()
                    .map(|q| search_one(index, q, setting).map(|(_, s)| s))
                    .collect::<Result<Vec<_>>>()?;
                times.push(stats.iter().map(|s| s.wall_time).sum());
            }
            Ok((stats, median(times)))
        };
        let (sa, ta) = timed(a, queries_a)?;
        let (sb, tb) = timed(b, queries_b)?;
        let row = |stats: &[SearchStats], t: Duration| {
            let n = stats.len() as f64;
            let mean = |f: fn(&SearchStats) -> u64| stats.iter().map(f).sum::<u64>() as f64 / n;
            CostRow {
                buckets: mean(|s| s.buckets_probed),
                candidates: mean(|s| s.candidates_verified),
                survivors: mean(|s| s.survivors),
                time_s: t.as_secs_f64() / n,
            }
        };
        let (ra, rb) = (row(&sa, ta), row(&sb, tb));
        out.push(CostComparison {
            setting,
            bucket_ratio: ratio(ra.buckets, rb.buckets),
            candidate_ratio: ratio(ra.candidates, rb.candidates),
            time_ratio: ratio(ra.time_s, rb.time_s),
            a: ra,
            b: rb,
            per_query: sa.into_iter().zip(sb).collect(),
        });
    }
    Ok(out)
}

/// Mean radius-search cost at a target retrieval recall.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MatchedRecall {
    pub target_recall: f64,
    /// Smallest radius whose mean recall reaches the target.
    pub radius: usize,
    pub recall_at_radius: f64,
    /// Mean verified candidates, linearly interpolated in recall between
    /// `radius - 1` and `radius`.
    pub candidates: f64,
    /// `(radius, mean recall, mean verified candidates)` for every radius tried.
    pub sweep: Vec<(usize, f64, f64)>,
}

/// Sweeps the radius upwards from 0 until the mean fraction of relevant
/// gallery items within the radius reaches `target_recall`. Results are
/// certified against a linear scan.
pub fn candidates_at_recall(
    index: &MihIndex,
    data: &LabeledBank,
    protocol: &RetrievalProtocol,
    target_recall: f64,
) -> Result<MatchedRecall> {
    check_gallery_index(index, data, protocol)?;
    if !(0.0..=1.0).contains(&target_recall) {
        return Err(Error::param("target recall must lie in [0, 1]"));
    }
    let queries: Vec<(usize, usize)> = protocol
        .queries
        .iter()
        .map(|&q| (q, protocol.relevant_count(data, q)))
        .filter(|&(_, rel)| rel > 0)
        .collect();
    if queries.is_empty() {
        return Err(Error::param("no query has a relevant gallery item"));
    }
    let nq = queries.len() as f64;
    let mut sweep: Vec<(usize, f64, f64)> = Vec::new();
    for radius in 0..=data.bank.bits() {
        let (mut recall, mut candidates) = (0.0, 0.0);
        for &(q, relevant) in &queries {
            let code = data.bank.get(q);
            let (ids, stats) = index.r_neighbor_search(&code, radius)?;
            if ids != linear_scan_radius(index.bank(), &code, radius) {
                return Err(Error::Exactness(format!(
                    "radius {radius}, query {q}: index result differs from linear scan"
                )));
            }
            let hits = ids
                .iter()
                .filter(|&&p| protocol.relevant(data, q, protocol.gallery[p as usize]))
                .count();
            recall += hits as f64 / relevant as f64;
            candidates += stats.candidates_verified as f64;
        }
        let (recall, candidates) = (recall / nq, candidates / nq);
        sweep.push((radius, recall, candidates));
        if recall >= target_recall {
            let interpolated = match sweep.len() {
                1 => candidates,
                len => {
                    let (_, r0, c0) = sweep[len - 2];
                    if recall > r0 {
                        c0 + (candidates - c0) * (target_recall - r0) / (recall - r0)
                    } else {
                        candidates
                    }
                }
            };
            return Ok(MatchedRecall {
                target_recall,
                radius,
                recall_at_radius: recall,
                candidates: interpolated,
                sweep,
            });
        }
    }
    Err(Error::param("target recall is never reached"))
}

pub fn write_curve_csv<W: Write>(w: W, points: &[CurvePoint]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    for p in points {
        csv.serialize(p)?;
    }
    csv.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct CostCsvRow {
    setting: String,
    buckets: f64,
    candidates: f64,
    survivors: f64,
    time_s: f64,
}

/// One row per index and setting, labelled `name@setting`.
pub fn write_cost_csv<W: Write>(w: W, name_a: &str, name_b: &str, report: &[CostComparison]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    for c in report {
        for (name, row) in [(name_a, &c.a), (name_b, &c.b)] {
            csv.serialize(CostCsvRow {
                setting: format!("{name}@{}", c.setting),
                buckets: row.buckets,
                candidates: row.candidates,
                survivors: row.survivors,
                time_s: row.time_s,
            })?;
        }
    }
    csv.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::codes::CodeBank;
    use crate::table_construction::Strategy;

    /// AP straight from its definition: sum over relevant ranks of hits/rank,
    /// divided by the number of relevant items.
    fn ap_oracle(rel: &[bool]) -> f64 {
        let total = rel.iter().filter(|&&r| r).count() as f64;
        let mut s = 0.0;
        for k in 0..rel.len() {
            if rel[k] {
                s += rel[..=k].iter().filter(|&&r| r).count() as f64 / (k + 1) as f64;
            }
        }
        s / total
    }

    #[test]
    fn average_precision_examples() {
        assert_eq!(average_precision(&[true, true, false, false]), Some(1.0));
        assert_eq!(average_precision(&[false, true]), Some(0.5));
        assert!((average_precision(&[true, false, true]).unwrap() - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(average_precision(&[false, false]), None);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let rel: Vec<bool> = (0..rand::Rng::random_range(&mut rng, 1..30))
                .map(|_| rand::Rng::random_bool(&mut rng, 0.3))
                .collect();
            if rel.contains(&true) {
                assert!((average_precision(&rel).unwrap() - ap_oracle(&rel)).abs() < 1e-12);
            }
        }
        assert_eq!(
            mean_average_precision(&[vec![true], vec![false], vec![false, true]]),
            Some(0.75)
        );
    }

    #[test]
    fn cmc_examples() {
        let lists = vec![
            vec![true, false, false],
            vec![false, false, true],
            vec![false, true, true],
            vec![false, false, false],
        ];
        // first matches at ranks 1, 3, 2; the last query has none and is skipped
        assert_eq!(cmc_at(&lists, 1).unwrap(), 1.0 / 3.0);
        assert_eq!(cmc_at(&lists, 2).unwrap(), 2.0 / 3.0);
        assert_eq!(cmc_at(&lists, 3).unwrap(), 1.0);
        assert!(cmc_at(&lists, 0).is_err());
        let mut prev = 0.0;
        for k in 1..5 {
            let c = cmc_at(&lists, k).unwrap();
            assert!(c >= prev);
            prev = c;
        }
        assert_eq!(cmc_at(&[vec![true], vec![true, false]], 1).unwrap(), 1.0);
    }

    fn toy_set(bank: CodeBank, labels: Vec<u32>, cameras: Vec<u32>, features: Vec<Vec<f64>>) -> LabeledBank {
        LabeledBank {
            bank,
            labels,
            cameras,
            features,
        }
    }

    #[test]
    fn reid_protocol_split() {
        let labels = vec![0, 0, 0, 1, 1, 1, 0];
        let cameras = vec![0, 0, 1, 1, 0, 1, 1];
        let p = RetrievalProtocol::reid(&labels, &cameras, 20).unwrap();
        assert_eq!(p.queries, vec![0, 2, 3, 4]);
        assert_eq!(p.gallery, vec![1, 5, 6]);
        assert!(RetrievalProtocol::new(vec![1], vec![1, 2], 20).is_err());

        let codes: Vec<BinaryCode> = ["0000", "0001", "0011", "1111", "1110", "1100", "0111"]
            .iter()
            .map(|s| s.parse().unwrap())
            .collect();
        let data = toy_set(
            CodeBank::from_codes(&codes).unwrap(),
            labels,
            cameras,
            vec![vec![0.0]; 7],
        );
        // query 0 (id 0, cam 0): gallery 1 is same id same cam -> excluded; 6 relevant
        assert_eq!(p.relevance(&data, 0, &[0, 1, 2]), vec![false, true]);
        assert_eq!(p.relevant_count(&data, 0), 1);
        let lists = hamming_ranking(&data, &p).unwrap();
        // query 0 = 0000: gallery distances 1:1, 5:2, 6:3 -> [excluded, 5, 6]
        assert_eq!(lists[0], vec![false, true]);
        let m = evaluate_ranking(&data, &p, &[1, 2]).unwrap();
        assert!(m.map > 0.0 && m.map <= 1.0);
        // query 3 (id 1, cam 1) only has gallery 5, which shares its camera
        assert_eq!(m.evaluated_queries, 3);
    }

    #[test]
    fn rerank_matches_bruteforce() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let features: Vec<Vec<f64>> = (0..30)
            .map(|_| (0..4).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect())
            .collect();
        let query = vec![0.1, -0.2, 0.3, 0.0];
        let candidates: Vec<usize> = (0..30).collect();
        let top = rerank(&candidates, &query, &features, 20);
        let mut brute: Vec<(f64, usize)> = (0..30)
            .map(|i| {
                let d: f64 = features[i]
                    .iter()
                    .zip(&query)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                (d, i)
            })
            .collect();
        brute.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(top, brute.iter().take(20).map(|x| x.1).collect::<Vec<_>>());
        assert_eq!(rerank(&candidates, &query, &features, 5).len(), 5);
    }

    /// Clustered random codes with features that mirror the code bits.
    fn clustered(n: usize, identities: u32, bits: usize, seed: u64) -> LabeledBank {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers: Vec<BinaryCode> = (0..identities)
            .map(|_| BinaryCode::random(bits, &mut rng).unwrap())
            .collect();
        let mut codes = Vec::new();
        let (mut labels, mut cameras, mut features) = (Vec::new(), Vec::new(), Vec::new());
        for i in 0..n {
            let l = (i as u32) % identities;
            let mut c = centers[l as usize].clone();
            for _ in 0..4 {
                c.flip(rand::Rng::random_range(&mut rng, 0..bits));
            }
            features.push(c.to_bits().iter().map(|&b| if b { 1.0 } else { -1.0 }).collect());
            codes.push(c);
            labels.push(l);
            cameras.push((i as u32 / identities) % 3);
        }
        toy_set(CodeBank::from_codes(&codes).unwrap(), labels, cameras, features)
    }

    #[test]
    fn exhaustive_knn_equals_feature_ranking() {
        let data = clustered(300, 10, 32, 5);
        let p = RetrievalProtocol::reid(&data.labels, &data.cameras, 20).unwrap();
        let index = MihIndex::with_params(Arc::new(p.gallery_bank(&data).unwrap()), 4, Strategy::Blockwise, 1).unwrap();
        let g = p.gallery.len();
        let fast = TimingConfig {
            warmup: 0,
            repetitions: 1,
        };
        let curve = precision_recall_time_curve(&index, &data, &p, &[5, 40, g], fast).unwrap();
        for pt in &curve {
            assert!((0.0..=1.0).contains(&pt.precision) && (0.0..=1.0).contains(&pt.recall));
        }
        // pure feature ranking over the whole (non-excluded) gallery
        let (mut prec, mut nq) = (0.0, 0.0);
        for &q in &p.queries {
            if p.relevant_count(&data, q) == 0 {
                continue;
            }
            let cands: Vec<usize> = p
                .gallery
                .iter()
                .copied()
                .filter(|&x| !p.excluded(&data, q, x))
                .collect();
            let top = rerank(&cands, &data.features[q], &data.features, 20);
            prec += top.iter().filter(|&&x| p.relevant(&data, q, x)).count() as f64 / 20.0;
            nq += 1.0;
        }
        assert!((curve[2].precision - prec / nq).abs() < 1e-12);
        assert!(curve[1].recall + 0.01 >= curve[0].recall);
    }

    #[test]
    fn self_comparison_has_unit_ratios() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bank = Arc::new(CodeBank::random(2000, 64, &mut rng).unwrap());
        let index = MihIndex::with_params(bank.clone(), 4, Strategy::Blockwise, 1).unwrap();
        let queries: Vec<BinaryCode> = (0..20).map(|_| BinaryCode::random(64, &mut rng).unwrap()).collect();
        let timing = TimingConfig {
            warmup: 0,
            repetitions: 1,
        };
        let report = lookup_cost_report(
            &index,
            &index,
            &queries,
            &queries,
            &[Setting::Radius(6), Setting::Knn(10)],
            timing,
        )
        .unwrap();
        for c in &report {
            assert_eq!(c.bucket_ratio, 1.0);
            assert_eq!(c.candidate_ratio, 1.0);
            // recount from the per-query logs
            let n = c.per_query.len() as f64;
            let a: u64 = c.per_query.iter().map(|(s, _)| s.candidates_verified).sum();
            let b: u64 = c.per_query.iter().map(|(_, s)| s.candidates_verified).sum();
            assert_eq!(c.a.candidates, a as f64 / n);
            assert_eq!(c.candidate_ratio, ratio(a as f64 / n, b as f64 / n));
        }
        let mut out = Vec::new();
        write_cost_csv(&mut out, "x", "y", &report).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("setting,buckets,candidates,survivors,time_s\nx@radius=6,"));
        assert_eq!(text.lines().count(), 5);

        let mut out = Vec::new();
        write_curve_csv(
            &mut out,
            &[CurvePoint {
                k_nn: 10,
                precision: 0.5,
                recall: 0.25,
                time_s: 0.001,
            }],
        )
        .unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "k_nn,precision,recall,time_s\n10,0.5,0.25,0.001\n"
        );
    }

    #[test]
    fn blockwise_and_contiguous_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bank = Arc::new(CodeBank::random(1500, 96, &mut rng).unwrap());
        let a = MihIndex::with_params(bank.clone(), 4, Strategy::Blockwise, 3).unwrap();
        let b = MihIndex::with_params(bank, 4, Strategy::Contiguous, 3).unwrap();
        let queries: Vec<BinaryCode> = (0..10).map(|_| BinaryCode::random(96, &mut rng).unwrap()).collect();
        let timing = TimingConfig {
            warmup: 0,
            repetitions: 1,
        };
        let report = lookup_cost_report(
            &a,
            &b,
            &queries,
            &queries,
            &[Setting::Knn(5), Setting::Radius(20)],
            timing,
        )
        .unwrap();
        assert!(report.iter().all(|c| c.a.survivors == c.b.survivors));
    }

    #[test]
    fn matched_recall_sweep() {
        let data = clustered(400, 20, 32, 8);
        let p = RetrievalProtocol::reid(&data.labels, &data.cameras, 20).unwrap();
        let index = MihIndex::with_params(Arc::new(p.gallery_bank(&data).unwrap()), 2, Strategy::Blockwise, 1).unwrap();
        let m = candidates_at_recall(&index, &data, &p, 0.9).unwrap();
        assert!(m.recall_at_radius >= 0.9);
        assert!(m.sweep.windows(2).all(|w| w[1].1 >= w[0].1 && w[1].2 >= w[0].2));
        let last = m.sweep.last().unwrap();
        assert!(m.candidates <= last.2 + 1e-9);
        assert!(candidates_at_recall(&index, &data, &p, 1.0).unwrap().recall_at_radius == 1.0);
    }
}
