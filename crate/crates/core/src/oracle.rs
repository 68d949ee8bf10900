//! Brute-force reference searches used to certify the multi-index results.

use std::collections::BinaryHeap;

use crate::codes::{hamming_words, BinaryCode, CodeBank};
use crate::mih_index::Neighbor;

/// Every id within Hamming distance `k` of `q`, ascending.
pub fn linear_scan_radius(bank: &CodeBank, q: &BinaryCode, k: usize) -> Vec<u32> {
    assert_eq!(bank.bits(), q.len(), "query length must match the bank");
    (0..bank.len())
        .filter(|&i| hamming_words(bank.words(i), q.words()) as usize <= k)
        .map(|i| i as u32)
        .collect()
}

/// The `k_nn` nearest ids ordered by `(distance, id)`, keeping a bounded max-heap.
pub fn linear_scan_knn(bank: &CodeBank, q: &BinaryCode, k_nn: usize) -> Vec<Neighbor> {
    assert_eq!(bank.bits(), q.len(), "query length must match the bank");
    if k_nn == 0 {
        return Vec::new();
    }
    let mut heap: BinaryHeap<(u32, u32)> = BinaryHeap::with_capacity(k_nn + 1);
    for i in 0..bank.len() {
        let d = hamming_words(bank.words(i), q.words());
        if heap.len() < k_nn {
            heap.push((d, i as u32));
        } else if let Some(&(worst, _)) = heap.peek() {
            // ids arrive ascending, so an equal distance never displaces a kept id
            if d < worst {
                heap.pop();
                heap.push((d, i as u32));
            }
        }
    }
    heap.into_sorted_vec()
        .into_iter()
        .map(|(distance, id)| Neighbor { id, distance })
        .collect()
}
