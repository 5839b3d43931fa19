mod common;

use common::{random_graph, random_tensor, rng};
use proptest::prelude::*;
use stunet_core::cheb::{cheb_conv, spectral_conv_oracle};
use stunet_core::graph::{estimate_lambda_max, normalized_laplacian, SpectralDecomposition};
use stunet_core::{GraphLaplacian, LambdaMax, Tape, Tensor};

fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    a.max_abs_diff(b).unwrap() / b.max_abs().max(1e-12)
}

fn conv_vs_oracle(seed: u64, n: usize, order: usize, c_in: usize, c_out: usize) -> f64 {
    let mut r = rng(seed);
    let g = random_graph(&mut r, n, 0.5);
    let theta = random_tensor(&mut r, &[order, c_out, c_in]);
    let x = random_tensor(&mut r, &[n, c_in]);
    let lap = GraphLaplacian::new(&g, LambdaMax::Estimate).unwrap();
    let tape = Tape::new();
    let y = cheb_conv(&tape.constant(theta.clone()), &lap, &tape.constant(x.clone()))
        .unwrap()
        .to_tensor();
    let decomp = SpectralDecomposition::of(lap.laplacian()).unwrap();
    let oracle = spectral_conv_oracle(&theta, &decomp, lap.lambda_max(), &x).unwrap();
    relative_error(&y, &oracle)
}

#[test]
fn fifty_graphs_match_the_eigenbasis_filter() {
    for seed in 0..50u64 {
        let n = 1 + (seed as usize % 8);
        let order = 1 + (seed as usize % 4);
        let err = conv_vs_oracle(seed, n, order, 3, 2);
        assert!(err <= 1e-8, "seed {seed}: n={n} K={order} error {err}");
    }
}

#[test]
fn power_iteration_matches_the_largest_eigenvalue() {
    let mut r = rng(7);
    for _ in 0..20 {
        let g = random_graph(&mut r, 6, 0.6);
        let l = normalized_laplacian(&g);
        let exact = SpectralDecomposition::of(&l).unwrap().eigenvalues[5];
        let est = estimate_lambda_max(&l).unwrap();
        assert!(est <= 2.0 + 1e-12);
        assert!((est - exact).abs() < 1e-6 || est == 2.0, "{est} vs {exact}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_matches_oracle(seed in any::<u64>(), n in 1usize..=8, order in 1usize..=4,
                           c_in in 1usize..=3, c_out in 1usize..=3) {
        prop_assert!(conv_vs_oracle(seed, n, order, c_in, c_out) <= 1e-8);
    }

    #[test]
    fn laplacian_spectrum_lies_in_zero_two(seed in any::<u64>(), n in 1usize..=8) {
        let g = random_graph(&mut rng(seed), n, 0.5);
        let d = SpectralDecomposition::of(&normalized_laplacian(&g)).unwrap();
        for &l in &d.eigenvalues {
            prop_assert!((-1e-9..=2.0 + 1e-9).contains(&l));
        }
    }
}
