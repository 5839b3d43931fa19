mod common;

use common::{path_graph, random_graph, random_tensor, rng};
use proptest::prelude::*;
use stunet_core::partition::{
    brute_force_matching, coarsen, max_weight_matching_path, multilevel_partition, path_grow_select, Matching,
};
use stunet_core::sampling::{g_pooling, unpool, UnpoolLayout, UnpoolStrategy};
use stunet_core::{Reduce, Tape, Tensor};

fn check_matching(seed: u64, n: usize, density: f64) -> Result<(), TestCaseError> {
    let g = random_graph(&mut rng(seed), n, density);
    let m = path_grow_select(&g);
    prop_assert!(m.validate(&g).is_ok());
    prop_assert!(m.is_maximal(&g));
    let best = brute_force_matching(&g).unwrap();
    prop_assert!(m.total_weight >= 0.5 * best.total_weight - 1e-12);
    let c = coarsen(&g, &m).unwrap();
    prop_assert_eq!(c.coarse_count(), n - m.len());
    // Coarse edge weights add up the fine edges between groups.
    let cut: f64 = g
        .edges()
        .iter()
        .filter(|(i, j, _)| c.assignment[*i] != c.assignment[*j])
        .map(|e| e.2)
        .sum();
    prop_assert!((c.coarse.total_weight() - cut).abs() < 1e-9);
    Ok(())
}

#[test]
fn hundred_graphs_meet_the_half_optimum_bound() {
    for seed in 0..100u64 {
        let n = 1 + (seed as usize % 12);
        check_matching(seed, n, 0.2 + 0.6 * (seed % 5) as f64 / 4.0).unwrap();
    }
}

#[test]
fn path_dynamic_program_is_optimal() {
    let w = [1.0, 3.0, 1.0];
    let path: Vec<_> = w.iter().enumerate().map(|(i, &w)| (i, i + 1, w)).collect();
    let m = max_weight_matching_path(&path).unwrap();
    assert_eq!(m.total_weight, 3.0);
    let g = path_graph(&[1.0, 3.0, 1.0]);
    let c = coarsen(&g, &path_grow_select(&g)).unwrap();
    assert_eq!(c.coarse_count(), 3);
    assert!(coarsen(&g, &Matching::empty()).unwrap().coarse_count() == 4);
}

#[test]
fn partition_is_deterministic() {
    let g = random_graph(&mut rng(3), 10, 0.4);
    let a = multilevel_partition(&g, 2).unwrap();
    let b = multilevel_partition(&g, 2).unwrap();
    assert_eq!(a.composed_up_to(2), b.composed_up_to(2));
    assert_eq!(a.node_counts(), b.node_counts());
}

/// Mean pooling followed by direct-copy unpooling restores any signal that
/// is constant within each super node.
fn round_trip(seed: u64, n: usize, levels: usize) -> Result<(), TestCaseError> {
    let mut r = rng(seed);
    let g = random_graph(&mut r, n, 0.5);
    let pm = multilevel_partition(&g, levels).unwrap();
    let composed = pm.composed_up_to(levels);
    let n_top = pm.node_counts()[levels];
    let coarse = random_tensor(&mut r, &[n_top, 3]);
    let mut x = Tensor::zeros(&[n, 3]);
    for (i, &s) in composed.iter().enumerate() {
        for c in 0..3 {
            x.set(i, c, coarse.at(s, c));
        }
    }
    let tape = Tape::new();
    let mut y = tape.constant(x.clone());
    for level in &pm.levels {
        y = g_pooling(&y, level, Reduce::Mean).unwrap();
    }
    for (l, level) in pm.levels.iter().enumerate().rev() {
        let layout = UnpoolLayout::new(level, pm.graph(l)).unwrap();
        y = unpool(&y, &layout, &UnpoolStrategy::DirectCopy).unwrap();
    }
    prop_assert_eq!(y.to_tensor(), x);
    Ok(())
}

#[test]
fn pool_unpool_identity_on_piecewise_constant_signals() {
    for seed in 0..40u64 {
        for levels in [1, 2] {
            round_trip(seed, 2 + seed as usize % 10, levels).unwrap();
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn matching_invariants(seed in any::<u64>(), n in 1usize..=12, density in 0.1f64..1.0) {
        check_matching(seed, n, density)?;
    }

    #[test]
    fn round_trip_holds(seed in any::<u64>(), n in 2usize..=12, levels in 1usize..=2) {
        round_trip(seed, n, levels)?;
    }

    #[test]
    fn composed_map_is_onto(seed in any::<u64>(), n in 1usize..=12, levels in 1usize..=3) {
        let g = random_graph(&mut rng(seed), n, 0.5);
        let pm = multilevel_partition(&g, levels).unwrap();
        let counts = pm.node_counts();
        let map = pm.composed_up_to(levels);
        let mut hit = vec![false; counts[levels]];
        for &s in &map {
            hit[s] = true;
        }
        prop_assert!(hit.iter().all(|&h| h));
        prop_assert!(counts.windows(2).all(|w| w[1] <= w[0] && 2 * w[1] >= w[0]));
    }
}
