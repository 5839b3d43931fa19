//! Graph-convolutional GRU cells, dilated recurrent layers, and the
//! encoder/decoder loops built on them.
//!
//! A cell step computes
//!
//! ```text
//! z  = σ(W_z ⋆ x + U_z ⋆ h + b_z)
//! r  = σ(W_r ⋆ x + U_r ⋆ h + b_r)
//! h′ = tanh(W_h ⋆ x + U_h ⋆ (r ⊙ h) + b_h)
//! h  = z ⊙ h + (1 − z) ⊙ h′
//! ```
//!
//! where `⋆` is a K-order Chebyshev graph convolution.

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, RngCore};

use crate::cheb::GraphConvLayer;
use crate::error::{dim_err, Error, Result};
use crate::graph::GraphLaplacian;
use crate::init::glorot_init_with;
use crate::params::{Bound, ParamId, ParamStore};
use crate::partition::Coarsening;
use crate::sampling::{batch_size, st_pool_spatial};
use crate::tape::{Activation, Reduce, Var};
use crate::tensor::Tensor;

/// Parameter handles of one GCGRU cell.
#[derive(Clone, Debug, PartialEq)]
pub struct GcgruCell {
    pub order: usize,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w_z: ParamId,
    pub w_r: ParamId,
    pub w_h: ParamId,
    pub u_z: ParamId,
    pub u_r: ParamId,
    pub u_h: ParamId,
    pub b_z: ParamId,
    pub b_r: ParamId,
    pub b_h: ParamId,
    /// Layer-norm gain and bias applied to the new state.
    pub norm: Option<(ParamId, ParamId)>,
}

/// New state together with the gate activations that produced it.
pub struct CellOutput<'t> {
    pub h: Var<'t>,
    pub z: Var<'t>,
    pub r: Var<'t>,
}

impl GcgruCell {
    /// Registers the cell's parameters under `prefix`, Glorot-initialized
    /// kernels, zero biases, unit layer-norm gains.
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        order: usize,
        input_dim: usize,
        hidden_dim: usize,
        layer_norm: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if order == 0 || input_dim == 0 || hidden_dim == 0 {
            return Err(Error::Model(format!(
                "{prefix}: order, input and hidden sizes must be positive"
            )));
        }
        let mut kernel = |name: &str, c_in: usize, store: &mut ParamStore| {
            store.add(
                &format!("{prefix}.{name}"),
                glorot_init_with(&[order, hidden_dim, c_in], rng),
            )
        };
        let w_z = kernel("w_z", input_dim, store)?;
        let w_r = kernel("w_r", input_dim, store)?;
        let w_h = kernel("w_h", input_dim, store)?;
        let u_z = kernel("u_z", hidden_dim, store)?;
        let u_r = kernel("u_r", hidden_dim, store)?;
        let u_h = kernel("u_h", hidden_dim, store)?;
        let b_z = store.add(&format!("{prefix}.b_z"), Tensor::zeros(&[hidden_dim]))?;
        let b_r = store.add(&format!("{prefix}.b_r"), Tensor::zeros(&[hidden_dim]))?;
        let b_h = store.add(&format!("{prefix}.b_h"), Tensor::zeros(&[hidden_dim]))?;
        let norm = if layer_norm {
            Some((
                store.add(&format!("{prefix}.ln_gain"), Tensor::full(&[hidden_dim], 1.0))?,
                store.add(&format!("{prefix}.ln_bias"), Tensor::zeros(&[hidden_dim]))?,
            ))
        } else {
            None
        };
        Ok(Self {
            order,
            input_dim,
            hidden_dim,
            w_z,
            w_r,
            w_h,
            u_z,
            u_r,
            u_h,
            b_z,
            b_r,
            b_h,
            norm,
        })
    }

    /// Zero state for `rows` graph rows (nodes times batch elements).
    pub fn zero_state<'t>(&self, tape: &'t crate::tape::Tape, rows: usize) -> Var<'t> {
        tape.constant(Tensor::zeros(&[rows, self.hidden_dim]))
    }

    pub fn step<'t>(&self, p: &Bound<'t>, lap: &GraphLaplacian, x: &Var<'t>, h: &Var<'t>) -> Result<Var<'t>> {
        Ok(self.step_with_gates(p, lap, x, h)?.h)
    }

    pub fn step_with_gates<'t>(
        &self,
        p: &Bound<'t>,
        lap: &GraphLaplacian,
        x: &Var<'t>,
        h: &Var<'t>,
    ) -> Result<CellOutput<'t>> {
        let n = lap.node_count();
        let xs = x.shape();
        let hs = h.shape();
        let rows_ok = batch_size(xs[0], n).is_some() && xs[0] == hs[0];
        if !rows_ok || xs[1..] != [self.input_dim] || hs[1..] != [self.hidden_dim] {
            return Err(dim_err!(
                "gcgru: input {xs:?} / state {hs:?} vs {n} nodes, {} -> {}",
                self.input_dim,
                self.hidden_dim
            ));
        }
        let op = lap.rescaled();
        // One basis per signal, and one product per basis for every gate
        // that reads it.
        let hd = self.hidden_dim;
        let gx = x
            .cheb_basis(op, self.order)?
            .cheb_combine_many(&[p[self.w_z], p[self.w_r], p[self.w_h]])?;
        let gh = h.cheb_basis(op, self.order)?.cheb_combine_many(&[p[self.u_z], p[self.u_r]])?;
        let z = Var::gate(&[(gx, 0), (gh, 0)], &p[self.b_z], Activation::Sigmoid)?;
        let r = Var::gate(&[(gx, hd), (gh, hd)], &p[self.b_r], Activation::Sigmoid)?;
        let uc = r.mul(h)?.cheb_basis(op, self.order)?.cheb_combine(&p[self.u_h])?;
        let candidate = Var::gate(&[(gx, 2 * hd), (uc, 0)], &p[self.b_h], Activation::Tanh)?;
        let mut new_h = z.blend(h, &candidate)?;
        if let Some((gain, bias)) = self.norm {
            new_h = new_h.layer_norm(&p[gain], &p[bias])?;
        }
        Ok(CellOutput { h: new_h, z, r })
    }
}

/// Runs a cell over a sequence where step `t` reads the state of step
/// `t − dilation`; states before the start are zero.
pub fn dilated_layer_forward<'t>(
    cell: &GcgruCell,
    p: &Bound<'t>,
    lap: &GraphLaplacian,
    inputs: &[Var<'t>],
    dilation: usize,
) -> Result<Vec<Var<'t>>> {
    if dilation == 0 {
        return Err(Error::Usage("dilation must be at least 1".into()));
    }
    let Some(first) = inputs.first() else {
        return Err(Error::Usage("recurrent layer needs at least one step".into()));
    };
    let zero = cell.zero_state(first.tape(), first.shape()[0]);
    let mut out: Vec<Var<'t>> = Vec::with_capacity(inputs.len());
    for (t, x) in inputs.iter().enumerate() {
        let prev = if t >= dilation { out[t - dilation] } else { zero };
        out.push(cell.step(p, lap, x, &prev)?);
    }
    Ok(out)
}

/// One level of the downsampling side: optional spatial pooling of the
/// incoming sequence, then a dilated recurrent layer.
pub struct EncoderLevel<'a> {
    pub cell: &'a GcgruCell,
    pub laplacian: &'a GraphLaplacian,
    pub dilation: usize,
    pub pool: Option<(&'a Coarsening, Reduce)>,
}

pub struct Encoding<'t> {
    /// Full output sequence of every level, input-facing level first.
    pub outputs: Vec<Vec<Var<'t>>>,
    /// Last state of every level.
    pub finals: Vec<Var<'t>>,
}

pub fn encode<'t>(levels: &[EncoderLevel<'_>], p: &Bound<'t>, inputs: &[Var<'t>]) -> Result<Encoding<'t>> {
    if inputs.is_empty() {
        return Err(Error::Usage("encoder needs at least one input step".into()));
    }
    let mut outputs: Vec<Vec<Var<'t>>> = Vec::with_capacity(levels.len());
    let mut finals = Vec::with_capacity(levels.len());
    let mut seq: Vec<Var<'t>> = inputs.to_vec();
    for (l, level) in levels.iter().enumerate() {
        if let Some((coarsening, mode)) = level.pool {
            seq = st_pool_spatial(&seq, coarsening, mode)
                .map_err(|e| Error::Model(format!("encoder level {l}: {e}")))?;
        }
        seq = dilated_layer_forward(level.cell, p, level.laplacian, &seq, level.dilation)?;
        finals.push(*seq.last().expect("non-empty"));
        outputs.push(seq.clone());
    }
    Ok(Encoding { outputs, finals })
}

/// Inverse-sigmoid decay `τ / (τ + exp(i/τ))` of the teacher-forcing
/// probability over global training iterations.
pub fn teacher_forcing_prob(iteration: u64, tau: f64) -> f64 {
    tau / (tau + libm::exp(iteration as f64 / tau))
}

/// Ground-truth feedback for the decoder during training.
pub struct TeacherForcing<'a> {
    /// Probability of feeding the true previous target instead of the
    /// previous prediction, drawn per batch element and step.
    pub prob: f64,
    pub targets: Option<&'a [Tensor]>,
    pub rng: &'a mut dyn RngCore,
}

/// Sequence-to-sequence decoding from `state`, starting from a zero go
/// symbol. Each step's input is the previous prediction, or the previous
/// target when teacher forcing picks it.
pub fn decode<'t>(
    cell: &GcgruCell,
    p: &Bound<'t>,
    lap: &GraphLaplacian,
    state: Var<'t>,
    horizon: usize,
    readout: &GraphConvLayer<'t>,
    mut forcing: Option<TeacherForcing<'_>>,
) -> Result<Vec<Var<'t>>> {
    if horizon == 0 {
        return Err(Error::Usage("horizon must be at least 1".into()));
    }
    let tape = state.tape();
    let rows = state.shape()[0];
    let batch = batch_size(rows, lap.node_count())
        .ok_or_else(|| dim_err!("decode: state has {rows} rows for {} nodes", lap.node_count()))?;
    if let Some(f) = &forcing {
        if !(0.0..=1.0).contains(&f.prob) {
            return Err(Error::Usage(format!("teacher forcing probability {} outside [0,1]", f.prob)));
        }
        match f.targets {
            None if f.prob > 0.0 => {
                return Err(Error::Usage("teacher forcing needs targets".into()));
            }
            Some(t) if t.len() < horizon => {
                return Err(Error::Usage(format!(
                    "teacher forcing needs {horizon} targets, got {}",
                    t.len()
                )));
            }
            Some(t) if t.iter().any(|x| x.shape() != [rows, cell.input_dim]) => {
                return Err(dim_err!("teacher forcing targets must be [{rows}, {}]", cell.input_dim));
            }
            _ => {}
        }
    }
    let mut input = tape.constant(Tensor::zeros(&[rows, cell.input_dim]));
    let mut h = state;
    let mut preds: Vec<Var<'t>> = Vec::with_capacity(horizon);
    for step in 0..horizon {
        if step > 0 {
            input = preds[step - 1];
            if let Some(f) = forcing.as_mut() {
                let coins: Vec<bool> = (0..batch).map(|_| f.rng.random::<f64>() < f.prob).collect();
                if coins.iter().any(|&c| c) {
                    let target = &f.targets.expect("checked above")[step - 1];
                    input = mix_rows(input, target, &coins, cell.input_dim)?;
                }
            }
        }
        h = cell.step(p, lap, &input, &h)?;
        preds.push(readout.forward(lap, &h)?);
    }
    Ok(preds)
}

/// Replaces the rows of batch elements whose coin came up with the target.
fn mix_rows<'t>(pred: Var<'t>, target: &Tensor, coins: &[bool], width: usize) -> Result<Var<'t>> {
    let tape = pred.tape();
    if coins.iter().all(|&c| c) {
        return Ok(tape.constant(target.clone()));
    }
    let batch = coins.len();
    let mut keep = Tensor::zeros(target.shape());
    let mut forced = target.clone();
    for (r, (k, f)) in keep
        .data_mut()
        .chunks_mut(width)
        .zip(forced.data_mut().chunks_mut(width))
        .enumerate()
    {
        if !coins[r % batch] {
            k.iter_mut().for_each(|v| *v = 1.0);
            f.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    pred.mul(&tape.constant(keep))?.add(&tape.constant(forced))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Graph, LambdaMax};
    use crate::tape::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use alloc::vec;

    fn setup(layer_norm: bool) -> (ParamStore, GcgruCell, GraphLaplacian) {
        let g = Graph::from_edges(3, &[(0, 1, 1.0), (1, 2, 2.0)]).unwrap();
        let lap = GraphLaplacian::new(&g, LambdaMax::Estimate).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cell = GcgruCell::register(&mut store, "c", 2, 2, 3, layer_norm, &mut rng).unwrap();
        (store, cell, lap)
    }

    #[test]
    fn zero_parameters_halve_the_state() {
        let (mut store, cell, lap) = setup(false);
        for v in store.values_mut() {
            *v = Tensor::zeros(v.shape());
        }
        let tape = Tape::new();
        let p = store.bind(&tape);
        let x = tape.constant(Tensor::full(&[3, 2], 0.7));
        let v = Tensor::new(&[3, 3], (0..9).map(|i| i as f64 - 4.0).collect()).unwrap();
        let h = cell.step(&p, &lap, &x, &tape.constant(v.clone())).unwrap();
        assert_eq!(h.to_tensor(), v.map(|a| 0.5 * a));
    }

    #[test]
    fn gates_stay_in_open_unit_interval() {
        let (store, cell, lap) = setup(true);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let x = tape.constant(Tensor::new(&[3, 2], vec![5.0, -3.0, 0.2, 9.0, -7.0, 1.0]).unwrap());
        let h = tape.constant(Tensor::full(&[3, 3], 0.4));
        let out = cell.step_with_gates(&p, &lap, &x, &h).unwrap();
        for g in [out.z, out.r] {
            assert!(g.to_tensor().data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn dilation_beyond_length_uses_zero_state() {
        let (store, cell, lap) = setup(false);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let xs: Vec<Var> = (0..3)
            .map(|t| tape.constant(Tensor::full(&[3, 2], t as f64 * 0.3 - 0.2)))
            .collect();
        let out = dilated_layer_forward(&cell, &p, &lap, &xs, 5).unwrap();
        let zero = cell.zero_state(&tape, 3);
        for (t, x) in xs.iter().enumerate() {
            let direct = cell.step(&p, &lap, x, &zero).unwrap();
            assert_eq!(out[t].to_tensor(), direct.to_tensor());
        }
        assert!(dilated_layer_forward(&cell, &p, &lap, &xs, 0).is_err());
    }

    #[test]
    fn forcing_schedule_decays() {
        assert!((teacher_forcing_prob(0, 1000.0) - 1000.0 / 1001.0).abs() < 1e-15);
        assert!(teacher_forcing_prob(10_000, 1000.0) < teacher_forcing_prob(100, 1000.0));
    }
}
