mod common;

use common::{check_quasi_trace, is_permutation};
use fastds::traversal::{contiguous_page_map, uniformity_probe, OrderKind, TraversalOrder};
use proptest::prelude::*;

#[test]
fn sequential_five_by_two() {
    let o = TraversalOrder::new(OrderKind::Sequential, 0).next_epoch(0, 5, &[], 2);
    let batches: Vec<&[usize]> = o.batches().collect();
    assert_eq!(batches, vec![&[0, 1][..], &[2, 3], &[4]]);
}

#[test]
fn quasi_random_six_samples_three_pages() {
    let page_map = contiguous_page_map(6, 2);
    for seed in 0..50 {
        let (o, trace) = TraversalOrder::new(OrderKind::QuasiRandom, seed).next_epoch_traced(0, 6, &page_map, 2);
        assert!(is_permutation(&o.indices, 6));
        assert_eq!(trace.page_loads.len(), 3);
        check_quasi_trace(&trace, 3, 2).unwrap();
    }
}

#[test]
fn random_epochs_differ_and_replay() {
    let order = TraversalOrder::new(OrderKind::Random, 42);
    let e0 = order.next_epoch(0, 100, &[], 8).indices;
    let e1 = order.next_epoch(1, 100, &[], 8).indices;
    assert_ne!(e0, e1);
    assert_eq!(e0, TraversalOrder::new(OrderKind::Random, 42).next_epoch(0, 100, &[], 8).indices);
}

#[test]
fn sequential_mean_positions_are_exact() {
    let means = uniformity_probe(&TraversalOrder::new(OrderKind::Sequential, 0), 50, &[], 5, 3);
    assert!(means.iter().enumerate().all(|(i, &m)| m == i as f64));
}

/// Statistical: each sample's mean position lies within five standard errors
/// of (N-1)/2.
fn assert_uniform(kind: OrderKind, page_map: &[u64], batch: usize) {
    let (n, epochs) = (1000usize, 500u64);
    let means = uniformity_probe(&TraversalOrder::new(kind, 2024), n, page_map, batch, epochs);
    let center = (n as f64 - 1.0) / 2.0;
    let sigma = (((n * n) as f64 - 1.0) / 12.0).sqrt();
    let bound = 5.0 * sigma / (epochs as f64).sqrt();
    for (i, m) in means.iter().enumerate() {
        assert!((m - center).abs() <= bound, "{kind:?} sample {i}: mean {m} outside {center} ± {bound}");
    }
}

#[test]
fn random_positions_are_uniform() {
    assert_uniform(OrderKind::Random, &[], 10);
}

#[test]
fn quasi_random_on_one_page_is_a_full_shuffle() {
    assert_uniform(OrderKind::QuasiRandom, &vec![0; 1000], 10);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn every_order_is_a_permutation(n in 0usize..600, batch in 1usize..40, per_page in 1usize..50, seed: u64, epoch in 0u64..4) {
        let page_map = contiguous_page_map(n, per_page);
        for kind in OrderKind::ALL {
            let o = TraversalOrder::new(kind, seed).next_epoch(epoch, n, &page_map, batch);
            prop_assert!(is_permutation(&o.indices, n), "{:?}", kind);
        }
    }

    #[test]
    fn quasi_random_loads_each_page_once_within_budget(
        pages in prop::collection::vec(0u64..40, 1..500),
        batch in 1usize..12,
        seed: u64,
    ) {
        let (o, trace) = TraversalOrder::new(OrderKind::QuasiRandom, seed).next_epoch_traced(0, pages.len(), &pages, batch);
        prop_assert!(is_permutation(&o.indices, pages.len()));
        let mut distinct = pages.clone();
        distinct.sort_unstable();
        distinct.dedup();
        prop_assert!(check_quasi_trace(&trace, distinct.len(), batch).is_ok());
        let emitted: Vec<usize> = trace.emits.iter().map(|e| e.sample).collect();
        prop_assert_eq!(emitted, o.indices);
    }
}
