#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stunet_core::{Graph, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random weighted graph; each pair is joined with probability `density`.
pub fn random_graph(rng: &mut impl Rng, n: usize, density: f64) -> Graph {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random::<f64>() < density {
                edges.push((i, j, rng.random_range(0.1..2.0)));
            }
        }
    }
    Graph::from_edges(n, &edges).unwrap()
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn path_graph(weights: &[f64]) -> Graph {
    let edges: Vec<_> = weights.iter().enumerate().map(|(i, &w)| (i, i + 1, w)).collect();
    Graph::from_edges(weights.len() + 1, &edges).unwrap()
}
