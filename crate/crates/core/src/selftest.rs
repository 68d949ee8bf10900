//! Quick oracle-equivalence checks on small random instances.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::codes::{hamming_distance, BinaryCode, CodeBank};
use crate::error::Result;
use crate::losses::{sami_loss, RelaxedCode};
use crate::mih_index::{radius_schedule, MihIndex};
use crate::oracle::{linear_scan_knn, linear_scan_radius};
use crate::table_construction::{KeyLayout, Strategy};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub cases: usize,
    pub failures: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

fn radius_and_knn(rng: &mut ChaCha8Rng, trials: usize) -> Result<Vec<CheckResult>> {
    let mut radius = CheckResult {
        name: "r-neighbor search = linear scan".into(),
        cases: 0,
        failures: 0,
    };
    let mut knn = CheckResult {
        name: "k-NN search = linear scan".into(),
        cases: 0,
        failures: 0,
    };
    let mut snapshot = CheckResult {
        name: "index snapshot round trip".into(),
        cases: 0,
        failures: 0,
    };
    for trial in 0..trials {
        let branches = [1, 3][trial % 2];
        let bits = branches * rng.random_range(8..=24);
        let n = rng.random_range(50..400);
        let m = rng.random_range(1..=4);
        let strategy = [Strategy::Blockwise, Strategy::Contiguous][trial / 2 % 2];
        // low-entropy codes so that duplicates and near-duplicates occur
        let seeds: Vec<BinaryCode> = (0..5).map(|_| BinaryCode::random(bits, rng)).collect::<Result<_>>()?;
        let mut bank = CodeBank::new(bits)?;
        for _ in 0..n {
            let mut c = seeds[rng.random_range(0..seeds.len())].clone();
            for _ in 0..rng.random_range(0..bits / 2) {
                c.flip(rng.random_range(0..bits));
            }
            bank.push(&c)?;
        }
        let bank = Arc::new(bank);
        let index = MihIndex::build(bank.clone(), KeyLayout::for_code(strategy, branches, bits, m)?)?;
        for _ in 0..10 {
            let q = BinaryCode::random(bits, rng)?;
            let k = rng.random_range(0..=bits / 2);
            radius.cases += 1;
            if index.r_neighbor_search(&q, k)?.0 != linear_scan_radius(&bank, &q, k) {
                radius.failures += 1;
            }
            let k_nn = rng.random_range(1..=n.min(30));
            knn.cases += 1;
            if index.knn_search(&q, k_nn)?.0 != linear_scan_knn(&bank, &q, k_nn) {
                knn.failures += 1;
            }
        }
        let mut buf = Vec::new();
        index.write_to(&mut buf)?;
        let mut again = Vec::new();
        MihIndex::read_from(&buf[..], bank.clone())?.write_to(&mut again)?;
        snapshot.cases += 1;
        if buf != again {
            snapshot.failures += 1;
        }
    }
    Ok(vec![radius, knn, snapshot])
}

fn schedule_cover(rng: &mut ChaCha8Rng, trials: usize) -> Result<CheckResult> {
    let mut out = CheckResult {
        name: "some table within the radius schedule".into(),
        cases: 0,
        failures: 0,
    };
    for _ in 0..trials * 20 {
        let m = rng.random_range(2..=4);
        let bits = 8 * m;
        let layout = KeyLayout::for_code(Strategy::Blockwise, 1, bits, m)?;
        let b = BinaryCode::random(bits, rng)?;
        let mut q = b.clone();
        let k = rng.random_range(1..=12);
        let flips = rng.random_range(0..=k);
        for j in rand::seq::index::sample(rng, bits, flips) {
            q.flip(j);
        }
        let schedule = radius_schedule(k, m);
        out.cases += 1;
        let mut covered = false;
        for t in 0..m {
            let d = hamming_distance(&layout.key(&b, t)?, &layout.key(&q, t)?)? as i64;
            covered |= d <= schedule.per_table_radius[t];
        }
        if !covered {
            out.failures += 1;
        }
    }
    Ok(out)
}

fn sami_example() -> Result<CheckResult> {
    let key = |v: &[f64]| RelaxedCode::new(v.to_vec());
    let keys = vec![
        vec![key(&[1.0, 1.0, 1.0])?, key(&[1.0, 1.0, 1.0])?],
        vec![key(&[-1.0, 1.0, 1.0])?, key(&[-1.0, -1.0, -1.0])?],
    ];
    let value = sami_loss(&keys)?.value;
    Ok(CheckResult {
        name: "SAMI worked example".into(),
        cases: 1,
        failures: usize::from((value - 1.0).abs() > 1e-12),
    })
}

/// Runs every check with `trials` random instances each.
pub fn run(rng: &mut ChaCha8Rng, trials: usize) -> Result<Vec<CheckResult>> {
    let mut out = radius_and_knn(rng, trials)?;
    out.push(schedule_cover(rng, trials)?);
    out.push(sami_example()?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::{stream_rng, Stream};

    #[test]
    fn selftest_passes() {
        let mut rng = stream_rng(1, Stream::TestData);
        let results = run(&mut rng, 8).unwrap();
        assert_eq!(results.len(), 5);
        for r in results {
            assert!(r.cases > 0 && r.passed(), "{r:?}");
        }
    }
}
