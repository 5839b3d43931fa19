//! The U-shaped spatio-temporal network: GCGRU encoder levels joined by
//! spatial pooling and temporal dilation, an upsampling path with skip
//! concatenation, and a seq2seq decoder with a graph-convolution readout.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cheb::GraphConvLayer;
use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, GraphLaplacian, LambdaMax};
use crate::init::glorot_init_with;
use crate::params::{Bound, ParamId, ParamStore};
use crate::partition::{multilevel_partition, PartitionMap};
use crate::recurrent::{decode, dilated_layer_forward, encode, EncoderLevel, GcgruCell, TeacherForcing};
use crate::sampling::{skip_concat, unpool, UnpoolLayout, UnpoolMode, UnpoolStrategy, STRUCTURE_FEATURES};
use crate::tape::{Reduce, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct StunetConfig {
    /// Chebyshev order K.
    pub order: usize,
    /// Number of spatial coarsening levels.
    pub pool_level: usize,
    /// Temporal dilation factor per pooled level.
    pub dilation: usize,
    /// Hidden width per level, input-facing level first. A single entry is
    /// used for every level.
    pub hidden: Vec<usize>,
    pub pool_mode: Reduce,
    pub unpool: UnpoolMode,
    pub layer_norm: bool,
    pub input_len: usize,
    pub horizon: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    pub seed: u64,
    pub lambda_max: LambdaMax,
}

impl Default for StunetConfig {
    fn default() -> Self {
        Self {
            order: 3,
            pool_level: 1,
            dilation: 2,
            hidden: vec![64],
            pool_mode: Reduce::Max,
            unpool: UnpoolMode::DirectCopy,
            layer_norm: true,
            input_len: 12,
            horizon: 12,
            input_dim: 1,
            output_dim: 1,
            seed: 0,
            lambda_max: LambdaMax::Estimate,
        }
    }
}

impl StunetConfig {
    /// Number of pool/unpool pairs. A temporal-only network (no spatial
    /// levels but dilation above one) keeps one pair with identity pooling.
    pub fn pairs(&self) -> usize {
        if self.pool_level == 0 && self.dilation == 1 {
            0
        } else {
            self.pool_level.max(1)
        }
    }

    /// Number of encoder levels carrying their own hidden width.
    pub fn level_count(&self) -> usize {
        self.pairs().max(1) + 1
    }

    pub fn hidden_at(&self, level: usize) -> usize {
        if self.hidden.len() == 1 {
            self.hidden[0]
        } else {
            self.hidden[level]
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("order", self.order),
            ("dilation", self.dilation),
            ("input_len", self.input_len),
            ("horizon", self.horizon),
            ("input_dim", self.input_dim),
            ("output_dim", self.output_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Model(format!("{name} must be at least 1")));
            }
        }
        let levels = self.level_count();
        if self.hidden.is_empty() || (self.hidden.len() != 1 && self.hidden.len() != levels) {
            return Err(Error::Model(format!(
                "hidden needs 1 or {levels} widths, got {}",
                self.hidden.len()
            )));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Model("hidden widths must be positive".into()));
        }
        if let LambdaMax::Fixed(v) = self.lambda_max {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Model(format!("invalid fixed lambda_max {v}")));
            }
        }
        Ok(())
    }
}

/// Ablation variants toggling spatial pooling and temporal dilation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Neither pooling nor dilation.
    Gcgru,
    /// Temporal dilation only.
    TUnet,
    /// Spatial pooling only.
    SUnet,
    /// Both.
    StUnet,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Self::Gcgru, Self::TUnet, Self::SUnet, Self::StUnet];

    pub fn name(self) -> &'static str {
        match self {
            Self::Gcgru => "GCGRU",
            Self::TUnet => "T-UNet",
            Self::SUnet => "S-UNet",
            Self::StUnet => "ST-UNet",
        }
    }

    pub fn apply(self, base: &StunetConfig) -> StunetConfig {
        let mut c = base.clone();
        match self {
            Self::Gcgru => {
                c.pool_level = 0;
                c.dilation = 1;
            }
            Self::TUnet => c.pool_level = 0,
            Self::SUnet => c.dilation = 1,
            Self::StUnet => {}
        }
        c
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| *c != '-' && *c != '_').collect();
        match key.to_ascii_lowercase().as_str() {
            "gcgru" => Ok(Self::Gcgru),
            "tunet" => Ok(Self::TUnet),
            "sunet" => Ok(Self::SUnet),
            "stunet" => Ok(Self::StUnet),
            _ => Err(Error::Usage(format!("unknown variant '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum UnpoolParams {
    None,
    Ordered { slots: Vec<ParamId> },
    Weighted { slots: Vec<ParamId>, embed: ParamId },
}

/// One step of the upsampling path, from level `target + 1` to `target`.
#[derive(Clone, Debug, PartialEq)]
struct UpLevel {
    target: usize,
    unpool: UnpoolParams,
    reconcile: ParamId,
    cell: GcgruCell,
}

#[derive(Clone, Debug)]
enum Body {
    /// Three stacked layers on the original graph.
    Plain { layers: [GcgruCell; 3] },
    UShape {
        encoder: Vec<GcgruCell>,
        up: Vec<UpLevel>,
    },
}

#[derive(Clone, Debug)]
pub struct Stunet {
    config: StunetConfig,
    partition: Option<PartitionMap>,
    /// Laplacian of the original graph followed by every coarse level.
    laplacians: Vec<GraphLaplacian>,
    /// Unpool layout of level `l + 1` back onto level `l`.
    layouts: Vec<UnpoolLayout>,
    params: ParamStore,
    body: Body,
    decoder: GcgruCell,
    readout_theta: ParamId,
    readout_bias: ParamId,
}

impl Stunet {
    /// Partitions the graph, caches Laplacians and registers all parameters
    /// from a generator seeded with `config.seed`.
    pub fn build(config: StunetConfig, graph: &Graph) -> Result<Self> {
        config.validate()?;
        let partition = if config.pool_level > 0 {
            Some(multilevel_partition(graph, config.pool_level)?)
        } else {
            None
        };
        let mut laplacians = vec![GraphLaplacian::new(graph, config.lambda_max)?];
        let mut layouts = Vec::new();
        if let Some(pm) = &partition {
            for (l, level) in pm.levels.iter().enumerate() {
                laplacians.push(GraphLaplacian::new(&level.coarse, config.lambda_max)?);
                layouts.push(UnpoolLayout::new(level, pm.graph(l))?);
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let k = config.order;
        let ln = config.layer_norm;
        let h0 = config.hidden_at(0);
        let body = if config.pairs() == 0 {
            let h1 = config.hidden_at(1);
            let layers = [
                GcgruCell::register(&mut store, "enc0", k, config.input_dim, h0, ln, &mut rng)?,
                GcgruCell::register(&mut store, "enc1", k, h0, h1, ln, &mut rng)?,
                GcgruCell::register(&mut store, "up0", k, h1, h0, ln, &mut rng)?,
            ];
            Body::Plain { layers }
        } else {
            let pairs = config.pairs();
            let mut encoder = Vec::with_capacity(pairs + 1);
            for l in 0..=pairs {
                let d_in = if l == 0 { config.input_dim } else { config.hidden_at(l - 1) };
                encoder.push(GcgruCell::register(
                    &mut store,
                    &format!("enc{l}"),
                    k,
                    d_in,
                    config.hidden_at(l),
                    ln,
                    &mut rng,
                )?);
            }
            let mut up = Vec::with_capacity(pairs);
            for l in (1..=pairs).rev() {
                let c_up = config.hidden_at(l);
                let c_skip = config.hidden_at(l - 1);
                let spatial = layouts.get(l - 1);
                let unpool = match (config.unpool, spatial) {
                    (UnpoolMode::DirectCopy, _) | (_, None) => UnpoolParams::None,
                    (mode, Some(layout)) => {
                        let mut slots = Vec::with_capacity(layout.max_slots);
                        for r in 0..layout.max_slots {
                            slots.push(store.add(
                                &format!("unpool{l}.slot{r}"),
                                glorot_init_with(&[c_up, c_up], &mut rng),
                            )?);
                        }
                        if mode == UnpoolMode::WeightedDeconv {
                            let embed = store.add(
                                &format!("unpool{l}.embed"),
                                glorot_init_with(&[c_up + STRUCTURE_FEATURES, c_up], &mut rng),
                            )?;
                            UnpoolParams::Weighted { slots, embed }
                        } else {
                            UnpoolParams::Ordered { slots }
                        }
                    }
                };
                let reconcile = store.add(
                    &format!("skip{}.reconcile", l - 1),
                    glorot_init_with(&[c_up + c_skip, c_skip], &mut rng),
                )?;
                let cell =
                    GcgruCell::register(&mut store, &format!("up{}", l - 1), k, c_skip, c_skip, ln, &mut rng)?;
                up.push(UpLevel {
                    target: l - 1,
                    unpool,
                    reconcile,
                    cell,
                });
            }
            Body::UShape { encoder, up }
        };
        let decoder = GcgruCell::register(&mut store, "dec", k, config.output_dim, h0, ln, &mut rng)?;
        let readout_theta = store.add(
            "readout.theta",
            glorot_init_with(&[k, config.output_dim, h0], &mut rng),
        )?;
        let readout_bias = store.add("readout.bias", Tensor::zeros(&[config.output_dim]))?;
        Ok(Self {
            config,
            partition,
            laplacians,
            layouts,
            params: store,
            body,
            decoder,
            readout_theta,
            readout_bias,
        })
    }

    pub fn config(&self) -> &StunetConfig {
        &self.config
    }

    pub fn partition(&self) -> Option<&PartitionMap> {
        self.partition.as_ref()
    }

    pub fn laplacians(&self) -> &[GraphLaplacian] {
        &self.laplacians
    }

    pub fn node_count(&self) -> usize {
        self.laplacians[0].node_count()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn readout_ids(&self) -> (ParamId, ParamId) {
        (self.readout_theta, self.readout_bias)
    }

    /// Batch size of stacked inputs, checking every step's shape.
    fn check_inputs(&self, inputs: &[Tensor]) -> Result<usize> {
        let c = &self.config;
        if inputs.len() != c.input_len {
            return Err(dim_err!("expected {} input steps, got {}", c.input_len, inputs.len()));
        }
        let n = self.node_count();
        let rows = inputs[0].shape()[0];
        let batch = crate::sampling::batch_size(rows, n);
        for (t, x) in inputs.iter().enumerate() {
            if batch.is_none() || x.shape() != [rows, c.input_dim] {
                return Err(dim_err!(
                    "input step {t} has shape {:?}, expected [{n}·B, {}]",
                    x.shape(),
                    c.input_dim
                ));
            }
        }
        Ok(batch.expect("checked"))
    }

    /// Runs the network on stacked windows (see [`stack_batch`]) and returns
    /// `H` predictions of shape `N·B×D_out`.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        p: &Bound<'t>,
        inputs: &[Tensor],
        forcing: Option<TeacherForcing<'_>>,
    ) -> Result<Vec<Var<'t>>> {
        self.check_inputs(inputs)?;
        let xs: Vec<Var<'t>> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        let lap0 = &self.laplacians[0];
        let state = match &self.body {
            Body::Plain { layers } => {
                let mut seq = xs;
                for cell in layers {
                    seq = dilated_layer_forward(cell, p, lap0, &seq, 1)?;
                }
                *seq.last().expect("non-empty")
            }
            Body::UShape { encoder, up } => self.u_path(p, encoder, up, &xs)?,
        };
        let readout = GraphConvLayer {
            theta: p[self.readout_theta],
            bias: Some(p[self.readout_bias]),
        };
        decode(&self.decoder, p, lap0, state, self.config.horizon, &readout, forcing)
    }

    fn u_path<'t>(
        &self,
        p: &Bound<'t>,
        encoder: &[GcgruCell],
        up: &[UpLevel],
        xs: &[Var<'t>],
    ) -> Result<Var<'t>> {
        let spatial = self.partition.as_ref();
        let s = self.config.dilation;
        let levels: Vec<EncoderLevel<'_>> = encoder
            .iter()
            .enumerate()
            .map(|(l, cell)| EncoderLevel {
                cell,
                laplacian: &self.laplacians[if spatial.is_some() { l } else { 0 }],
                dilation: s.pow(l as u32),
                pool: match spatial {
                    Some(pm) if l > 0 => Some((&pm.levels[l - 1], self.config.pool_mode)),
                    _ => None,
                },
            })
            .collect();
        let enc = encode(&levels, p, xs)?;
        let mut seq = enc.outputs.last().expect("levels").clone();
        for level in up {
            let l = level.target;
            if spatial.is_some() {
                let layout = &self.layouts[l];
                let strategy = match &level.unpool {
                    UnpoolParams::None => UnpoolStrategy::DirectCopy,
                    UnpoolParams::Ordered { slots } => UnpoolStrategy::OrderedDeconv {
                        slots: slots.iter().map(|&id| p[id]).collect(),
                    },
                    UnpoolParams::Weighted { slots, embed } => UnpoolStrategy::WeightedDeconv {
                        slots: slots.iter().map(|&id| p[id]).collect(),
                        embed: p[*embed],
                    },
                };
                seq = seq
                    .iter()
                    .map(|x| unpool(x, layout, &strategy))
                    .collect::<Result<Vec<_>>>()?;
            }
            let joined = skip_concat(&seq, Some(&enc.outputs[l]))?;
            let reconciled = joined
                .iter()
                .map(|x| x.matmul(&p[level.reconcile]))
                .collect::<Result<Vec<_>>>()?;
            let lap = &self.laplacians[if spatial.is_some() { l } else { 0 }];
            seq = dilated_layer_forward(&level.cell, p, lap, &reconciled, s.pow(l as u32))?;
        }
        Ok(*seq.last().expect("non-empty"))
    }

    /// Inference on one window with frozen parameters and no teacher forcing.
    pub fn predict(&self, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let out = self.forward(&tape, &p, inputs, None)?;
        Ok(out.iter().map(Var::to_tensor).collect())
    }

    /// Inference on several windows at once; one forecast per window.
    pub fn predict_batch(&self, windows: &[&[Tensor]]) -> Result<Vec<Vec<Tensor>>> {
        let stacked = stack_batch(windows)?;
        let out = self.predict(&stacked)?;
        let per_step: Vec<Vec<Tensor>> = out.iter().map(|t| split_batch(t, windows.len())).collect();
        Ok((0..windows.len())
            .map(|b| per_step.iter().map(|step| step[b].clone()).collect())
            .collect())
    }

    /// Loss and parameter gradients for stacked windows. The loss averages
    /// over every element, so the gradient is the batch mean.
    pub fn loss_and_gradients(
        &self,
        inputs: &[Tensor],
        targets: &[Tensor],
        forcing: Option<TeacherForcing<'_>>,
    ) -> Result<(f64, Vec<Tensor>)> {
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let preds = self.forward(&tape, &p, inputs, forcing)?;
        let l = loss(&preds, targets)?;
        let value = l.value().data()[0];
        let grads = tape.backward(l)?;
        Ok((value, p.gradients(&grads)))
    }
}

/// Interleaves equally long sequences of `N×D` steps into `N·B×D` steps;
/// row `i·B + b` is node `i` of sequence `b`.
pub fn stack_batch(seqs: &[&[Tensor]]) -> Result<Vec<Tensor>> {
    let Some(first) = seqs.first() else {
        return Err(Error::Usage("empty batch".into()));
    };
    let batch = seqs.len();
    let len = first.len();
    if len == 0 || seqs.iter().any(|s| s.len() != len) {
        return Err(dim_err!("batch sequences must share a positive length"));
    }
    let shape = first[0].shape().to_vec();
    if shape.len() != 2 {
        return Err(dim_err!("batch steps must be matrices, got {shape:?}"));
    }
    let (n, d) = (shape[0], shape[1]);
    (0..len)
        .map(|t| {
            let mut data = vec![0.0; n * batch * d];
            for (b, seq) in seqs.iter().enumerate() {
                let x = &seq[t];
                if x.shape() != shape.as_slice() {
                    return Err(dim_err!("batch step shape {:?} vs {shape:?}", x.shape()));
                }
                for i in 0..n {
                    let dst = (i * batch + b) * d;
                    data[dst..dst + d].copy_from_slice(x.row(i));
                }
            }
            Tensor::new(&[n * batch, d], data)
        })
        .collect()
}

/// Inverse of [`stack_batch`] for one step.
pub fn split_batch(x: &Tensor, batch: usize) -> Vec<Tensor> {
    let (rows, d) = (x.rows(), x.cols());
    let n = rows / batch;
    (0..batch)
        .map(|b| {
            let mut data = Vec::with_capacity(n * d);
            for i in 0..n {
                data.extend_from_slice(x.row(i * batch + b));
            }
            Tensor::new(&[n, d], data).expect("non-empty split")
        })
        .collect()
}

/// `0.5 · (mean |pred − target| + mean (pred − target)²)` over all elements
/// of all steps.
pub fn loss<'t>(preds: &[Var<'t>], targets: &[Tensor]) -> Result<Var<'t>> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(dim_err!("loss: {} predictions vs {} targets", preds.len(), targets.len()));
    }
    let tape = preds[0].tape();
    let mut total: Option<Var<'t>> = None;
    let mut count = 0usize;
    for (pred, target) in preds.iter().zip(targets) {
        if pred.shape() != target.shape() {
            return Err(dim_err!("loss: prediction {:?} vs target {:?}", pred.shape(), target.shape()));
        }
        count += target.len();
        let e = pred.sub(&tape.constant(target.clone()))?;
        let term = e.abs()?.sum()?.add(&e.square()?.sum()?)?;
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    total.expect("non-empty").scale(0.5 / count as f64)
}

/// [`loss`] on plain tensors.
pub fn loss_value(preds: &[Tensor], targets: &[Tensor]) -> Result<f64> {
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = preds.iter().map(|p| tape.constant(p.clone())).collect();
    let l = loss(&vars, targets)?;
    let v = l.value().data()[0];
    Ok(v)
}
