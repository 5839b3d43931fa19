//! Central finite-difference checks of every differentiable operation and of
//! the full model.

mod common;

use std::sync::Arc;

use common::{random_graph, random_tensor, rng};
use stunet_core::cheb::cheb_conv;
use stunet_core::data::knn_grid_graph;
use stunet_core::gradcheck::{check_gradients, DEFAULT_STEP};
use stunet_core::model::{loss, stack_batch};
use stunet_core::params::Bound;
use stunet_core::partition::multilevel_partition;
use stunet_core::sampling::{g_pooling, unpool, UnpoolLayout, UnpoolMode, UnpoolStrategy};
use stunet_core::tape::Activation;
use stunet_core::{GraphLaplacian, LambdaMax, Reduce, Result, Stunet, StunetConfig, Tape, Tensor, Var};

const OP_TOL: f64 = 1e-4;
const MODEL_TOL: f64 = 1e-3;

/// Contracts `y` against fixed random weights so every output entry
/// contributes a distinct amount to the scalar.
fn project<'t>(tape: &'t Tape, y: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let w = random_tensor(&mut rng(seed), &y.shape());
    y.mul(&tape.constant(w))?.sum()
}

fn check<F>(name: &str, params: &[Tensor], f: F)
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let report = check_gradients(params, DEFAULT_STEP, f).unwrap();
    let worst = report.worst_relative_error();
    assert!(worst <= OP_TOL, "{name}: relative error {worst:.3e}");
}

fn t(seed: u64, shape: &[usize]) -> Tensor {
    random_tensor(&mut rng(seed), shape)
}

#[test]
fn elementwise_and_dense_ops() {
    let a = t(1, &[3, 4]);
    let b = t(2, &[3, 4]);
    let m = t(3, &[4, 2]);
    check("matmul", &[a.clone(), m.clone()], |tp, v| project(tp, v[0].matmul(&v[1])?, 9));
    check("add", &[a.clone(), b.clone()], |tp, v| project(tp, v[0].add(&v[1])?, 9));
    check("sub", &[a.clone(), b.clone()], |tp, v| project(tp, v[0].sub(&v[1])?, 9));
    check("mul", &[a.clone(), b.clone()], |tp, v| project(tp, v[0].mul(&v[1])?, 9));
    check("scale", std::slice::from_ref(&a), |tp, v| project(tp, v[0].scale(-1.7)?, 9));
    check("affine", std::slice::from_ref(&a), |tp, v| project(tp, v[0].affine(0.3, 2.0)?, 9));
    check("one_minus", std::slice::from_ref(&a), |tp, v| project(tp, v[0].one_minus()?, 9));
    check("sigmoid", std::slice::from_ref(&a), |tp, v| project(tp, v[0].sigmoid()?, 9));
    check("tanh", std::slice::from_ref(&a), |tp, v| project(tp, v[0].tanh()?, 9));
    check("abs", std::slice::from_ref(&a), |tp, v| project(tp, v[0].abs()?, 9));
    check("square", std::slice::from_ref(&a), |tp, v| project(tp, v[0].square()?, 9));
    check("sum", std::slice::from_ref(&a), |_, v| v[0].square()?.sum());
    check("mean", std::slice::from_ref(&a), |_, v| v[0].square()?.mean());
}

#[test]
fn shape_ops() {
    let a = t(4, &[4, 3]);
    let b = t(5, &[4, 2]);
    let bias = t(6, &[3]);
    check("add_row_bias", &[a.clone(), bias], |tp, v| project(tp, v[0].add_row_bias(&v[1])?, 9));
    check("concat_channels", &[a.clone(), b.clone()], |tp, v| {
        project(tp, v[0].concat_channels(&v[1])?, 9)
    });
    check("stack_rows", &[a.clone(), t(7, &[2, 3])], |tp, v| {
        project(tp, Var::stack_rows(&[v[0], v[1]])?, 9)
    });
    check("gather_rows", std::slice::from_ref(&a), |tp, v| project(tp, v[0].gather_rows(&[3, 0, 0, 2, 1])?, 9));
    check("channels", std::slice::from_ref(&a), |tp, v| project(tp, v[0].channels(1, 2)?, 9));
    for mode in [Reduce::Mean, Reduce::Max] {
        check("segment_reduce", std::slice::from_ref(&a), move |tp, v| {
            project(tp, v[0].segment_reduce(&[1, 0, 1, 1], 2, mode)?, 9)
        });
    }
    check("layer_norm", &[a, t(8, &[3]), t(9, &[3])], |tp, v| {
        project(tp, v[0].layer_norm(&v[1], &v[2])?, 9)
    });
}

#[test]
fn fused_gate_ops() {
    let a = t(10, &[3, 6]);
    let b = t(11, &[3, 4]);
    let bias = t(12, &[2]);
    for act in [Activation::Sigmoid, Activation::Tanh] {
        check("gate", &[a.clone(), b.clone(), bias.clone()], move |tp, v| {
            project(tp, Var::gate(&[(v[0], 3), (v[1], 1)], &v[2], act)?, 9)
        });
    }
    let z = t(13, &[3, 2]).map(|x| 0.5 + 0.4 * x);
    check("blend", &[z, t(14, &[3, 2]), t(15, &[3, 2])], |tp, v| {
        project(tp, v[0].blend(&v[1], &v[2])?, 9)
    });
}

#[test]
fn chebyshev_ops() {
    let mut r = rng(20);
    let g = random_graph(&mut r, 5, 0.6);
    let lap = GraphLaplacian::new(&g, LambdaMax::Estimate).unwrap();
    let op: Arc<Tensor> = lap.rescaled().clone();
    // Two interleaved batch elements.
    let x = t(21, &[10, 3]);
    for order in 1..=4 {
        let op = op.clone();
        check("cheb_basis+combine", &[x.clone(), t(22, &[order, 2, 3])], move |tp, v| {
            project(tp, v[0].cheb_basis(&op, order)?.cheb_combine(&v[1])?, 9)
        });
    }
    let op2 = op.clone();
    check("cheb_combine_many", &[x.clone(), t(23, &[3, 2, 3]), t(24, &[3, 1, 3])], move |tp, v| {
        project(tp, v[0].cheb_basis(&op2, 3)?.cheb_combine_many(&[v[1], v[2]])?, 9)
    });
    let lap2 = lap.clone();
    check("cheb_conv", &[t(25, &[5, 3]), t(26, &[3, 4, 3])], move |tp, v| {
        project(tp, cheb_conv(&v[1], &lap2, &v[0])?, 9)
    });
}

#[test]
fn pooling_and_unpooling() {
    let g = knn_grid_graph(2, 3).unwrap();
    let pm = multilevel_partition(&g, 1).unwrap();
    let level = pm.levels[0].clone();
    let layout = UnpoolLayout::new(&level, &g).unwrap();
    let nc = level.coarse_count();
    for mode in [Reduce::Mean, Reduce::Max] {
        let level = level.clone();
        check("g_pooling", &[t(30, &[12, 2])], move |tp, v| project(tp, g_pooling(&v[0], &level, mode)?, 9));
    }
    let slots = layout.max_slots;
    let mut params = vec![t(31, &[nc * 2, 3])];
    params.extend((0..slots).map(|s| t(40 + s as u64, &[3, 3])));
    params.push(t(50, &[6, 3]));
    for m in UnpoolMode::ALL {
        let layout = layout.clone();
        check(m.name(), &params, move |tp, v| {
            let strategy = match m {
                UnpoolMode::DirectCopy => UnpoolStrategy::DirectCopy,
                UnpoolMode::OrderedDeconv => UnpoolStrategy::OrderedDeconv { slots: v[1..=slots].to_vec() },
                UnpoolMode::WeightedDeconv => UnpoolStrategy::WeightedDeconv {
                    slots: v[1..=slots].to_vec(),
                    embed: v[slots + 1],
                },
            };
            project(tp, unpool(&v[0], &layout, &strategy)?, 9)
        });
    }
}

fn model_check(config: StunetConfig) -> f64 {
    let g = knn_grid_graph(2, 2).unwrap();
    let model = Stunet::build(config.clone(), &g).unwrap();
    let mut r = rng(60);
    let windows: Vec<Vec<Tensor>> = (0..2)
        .map(|_| (0..config.input_len).map(|_| random_tensor(&mut r, &[4, 1])).collect())
        .collect();
    let targets: Vec<Vec<Tensor>> = (0..2)
        .map(|_| (0..config.horizon).map(|_| random_tensor(&mut r, &[4, 1])).collect())
        .collect();
    let stack = |s: &[Vec<Tensor>]| stack_batch(&s.iter().map(Vec::as_slice).collect::<Vec<_>>()).unwrap();
    let (inputs, targets) = (stack(&windows), stack(&targets));
    let report = check_gradients(model.params().values(), DEFAULT_STEP, |tp, v| {
        let p = Bound::from_vars(v.to_vec());
        let preds = model.forward(tp, &p, &inputs, None)?;
        loss(&preds, &targets)
    })
    .unwrap();
    report.worst_relative_error()
}

#[test]
fn tiny_network_end_to_end() {
    for unpool in UnpoolMode::ALL {
        for layer_norm in [false, true] {
            let config = StunetConfig {
                order: 2,
                pool_level: 1,
                dilation: 2,
                hidden: vec![3],
                unpool,
                layer_norm,
                input_len: 3,
                horizon: 2,
                seed: 5,
                ..StunetConfig::default()
            };
            let err = model_check(config);
            assert!(err <= MODEL_TOL, "{} ln={layer_norm}: {err:.3e}", unpool.name());
        }
    }
}
