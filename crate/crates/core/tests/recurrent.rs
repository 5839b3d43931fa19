mod common;

use common::{random_graph, random_tensor, rng};
use proptest::prelude::*;
use stunet_core::params::ParamStore;
use stunet_core::recurrent::{dilated_layer_forward, teacher_forcing_prob, GcgruCell};
use stunet_core::{Graph, GraphLaplacian, LambdaMax, Tape, Tensor};

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn cell(order: usize, d_in: usize, hidden: usize, seed: u64) -> (GcgruCell, ParamStore) {
    let mut store = ParamStore::new();
    let c = GcgruCell::register(&mut store, "c", order, d_in, hidden, false, &mut rng(seed)).unwrap();
    (c, store)
}

#[test]
fn scalar_cell_matches_hand_written_gru() {
    let (c, mut store) = cell(1, 1, 1, 0);
    let values = [0.3, -0.4, 0.8, 0.5, 1.1, -0.7, 0.05, -0.1, 0.2];
    let ids = [c.w_z, c.w_r, c.w_h, c.u_z, c.u_r, c.u_h, c.b_z, c.b_r, c.b_h];
    for (id, v) in ids.into_iter().zip(values) {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::new(&shape, vec![v]).unwrap();
    }
    let [wz, wr, wh, uz, ur, uh, bz, br, bh] = values;
    let lap = GraphLaplacian::new(&Graph::edgeless(1).unwrap(), LambdaMax::Fixed(2.0)).unwrap();
    let xs = [0.9, -0.2, 0.4, 1.5];
    let tape = Tape::new();
    let p = store.bind_frozen(&tape);
    let mut h = c.zero_state(&tape, 1);
    let mut expected = 0.0;
    for &x in &xs {
        h = c.step(&p, &lap, &tape.constant(Tensor::new(&[1, 1], vec![x]).unwrap()), &h).unwrap();
        let z = sigmoid(wz * x + uz * expected + bz);
        let r = sigmoid(wr * x + ur * expected + br);
        let cand = (wh * x + uh * (r * expected) + bh).tanh();
        expected = z * expected + (1.0 - z) * cand;
        let got = h.value().data()[0];
        assert!((got - expected).abs() < 1e-14, "{got} vs {expected}");
    }
}

fn sequence(seed: u64, n: usize, len: usize, d: usize) -> Vec<Tensor> {
    let mut r = rng(seed);
    (0..len).map(|_| random_tensor(&mut r, &[n, d])).collect()
}

#[test]
fn unit_dilation_is_the_plain_scan() {
    let g = random_graph(&mut rng(1), 6, 0.5);
    let lap = GraphLaplacian::new(&g, LambdaMax::Estimate).unwrap();
    let (c, store) = cell(3, 2, 4, 2);
    let xs = sequence(3, 6, 7, 2);
    let tape = Tape::new();
    let p = store.bind_frozen(&tape);
    let vars: Vec<_> = xs.iter().map(|x| tape.constant(x.clone())).collect();
    let dilated = dilated_layer_forward(&c, &p, &lap, &vars, 1).unwrap();
    let mut h = c.zero_state(&tape, 6);
    for (x, d) in vars.iter().zip(&dilated) {
        h = c.step(&p, &lap, x, &h).unwrap();
        assert_eq!(h.to_tensor(), d.to_tensor());
    }
}

/// Output indices of a dilated layer that change when input `t` changes.
fn influenced(dilation: usize, len: usize, t: usize) -> Vec<usize> {
    let g = random_graph(&mut rng(4), 4, 0.7);
    let lap = GraphLaplacian::new(&g, LambdaMax::Estimate).unwrap();
    let (c, store) = cell(2, 1, 3, 5);
    let xs = sequence(6, 4, len, 1);
    let run = |xs: &[Tensor]| {
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let vars: Vec<_> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        dilated_layer_forward(&c, &p, &lap, &vars, dilation)
            .unwrap()
            .iter()
            .map(|v| v.to_tensor())
            .collect::<Vec<_>>()
    };
    let base = run(&xs);
    let mut bumped = xs.clone();
    bumped[t] = bumped[t].map(|v| v + 0.5);
    let other = run(&bumped);
    (0..len).filter(|&i| base[i] != other[i]).collect()
}

#[test]
fn second_step_ignores_first_input_under_dilation_two() {
    // 0-based: step 1 reads the zero state, so x₀ reaches only even steps.
    assert_eq!(influenced(2, 6, 0), vec![0, 2, 4]);
    assert_eq!(influenced(1, 6, 0), vec![0, 1, 2, 3, 4, 5]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn dilation_reaches_only_its_residue_class(s in 1usize..=4, t in 0usize..4) {
        let len = 9;
        let expected: Vec<usize> = (t..len).filter(|i| (i - t) % s == 0).collect();
        prop_assert_eq!(influenced(s, len, t), expected);
    }

    #[test]
    fn forcing_probability_decays(i in 0u64..100_000, tau in 1.0f64..5000.0) {
        let p = teacher_forcing_prob(i, tau);
        prop_assert!(p > 0.0 && p <= 1.0);
        prop_assert!(teacher_forcing_prob(i + 1, tau) <= p);
    }
}
