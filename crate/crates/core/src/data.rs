//! Time-series datasets on a graph: splits, sliding windows, z-score
//! normalization and a synthetic diffusion generator.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tensor::Tensor;

/// Fractions of the time axis given to train, validation and test, in order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Graph signal sequence `X_1 … X_T`, each step an `N×D` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesDataset {
    pub steps: Vec<Tensor>,
    pub graph: Graph,
    pub split: SplitFractions,
    /// Minutes per time step, used to label horizons.
    pub interval_minutes: Option<f64>,
    /// Period of the historical-average baseline.
    pub period: Option<usize>,
}

impl TimeSeriesDataset {
    pub fn new(steps: Vec<Tensor>, graph: Graph) -> Result<Self> {
        let Some(first) = steps.first() else {
            return Err(Error::Data("series has no time steps".into()));
        };
        let shape = first.shape().to_vec();
        if shape.len() != 2 || shape[0] != graph.node_count() {
            return Err(Error::Data(format!(
                "series step shape {shape:?} does not match {} graph nodes",
                graph.node_count()
            )));
        }
        for (t, x) in steps.iter().enumerate() {
            if x.shape() != shape.as_slice() {
                return Err(Error::Data(format!("step {t} has shape {:?}, expected {shape:?}", x.shape())));
            }
            if !x.is_finite() {
                return Err(Error::Data(format!("step {t} contains a non-finite value")));
            }
        }
        Ok(Self {
            steps,
            graph,
            split: SplitFractions::default(),
            interval_minutes: None,
            period: None,
        })
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn node_count(&self) -> usize {
        self.graph.node_count()
    }

    pub fn feature_dim(&self) -> usize {
        self.steps[0].cols()
    }

    /// Contiguous index range of a split. Boundaries round to the nearest
    /// step; the test split takes the remainder.
    pub fn split_range(&self, split: Split) -> Result<Range<usize>> {
        let f = self.split;
        let parts = [f.train, f.val, f.test];
        if parts.iter().any(|v| !(0.0..=1.0).contains(v)) || (f.train + f.val + f.test - 1.0).abs() > 1e-9 {
            return Err(Error::Data(format!(
                "split fractions {}/{}/{} must be in [0,1] and sum to 1",
                f.train, f.val, f.test
            )));
        }
        let t = self.len();
        let train_end = libm::round(f.train * t as f64) as usize;
        let val_end = (libm::round((f.train + f.val) * t as f64) as usize).clamp(train_end, t);
        Ok(match split {
            Split::Train => 0..train_end,
            Split::Val => train_end..val_end,
            Split::Test => val_end..t,
        })
    }

    pub fn split_steps(&self, split: Split) -> Result<&[Tensor]> {
        Ok(&self.steps[self.split_range(split)?])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowConfig {
    pub input_len: usize,
    pub horizon: usize,
}

impl WindowConfig {
    pub fn span(&self) -> usize {
        self.input_len + self.horizon
    }
}

/// One training example: `J` inputs followed by `H` targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    /// Absolute index of the first input step in the dataset.
    pub start: usize,
    pub inputs: Vec<Tensor>,
    pub targets: Vec<Tensor>,
}

impl Window {
    /// Absolute index of the first target step.
    pub fn target_start(&self) -> usize {
        self.start + self.inputs.len()
    }
}

/// Stride-1 windows inside a split; `T_split − J − H + 1` of them.
pub fn make_windows(ds: &TimeSeriesDataset, wc: WindowConfig, split: Split) -> Result<Vec<Window>> {
    if wc.input_len == 0 || wc.horizon == 0 {
        return Err(Error::Usage("window input length and horizon must be positive".into()));
    }
    let range = ds.split_range(split)?;
    windows_in(&ds.steps, range, wc)
}

/// Windows over `steps[range]`, with `start` indices relative to `steps`.
pub fn windows_in(steps: &[Tensor], range: Range<usize>, wc: WindowConfig) -> Result<Vec<Window>> {
    let len = range.len();
    if len < wc.span() {
        return Err(Error::Data(format!(
            "split of {len} steps is shorter than input {} + horizon {}",
            wc.input_len, wc.horizon
        )));
    }
    Ok((range.start..=range.end - wc.span())
        .map(|s| Window {
            start: s,
            inputs: steps[s..s + wc.input_len].to_vec(),
            targets: steps[s + wc.input_len..s + wc.span()].to_vec(),
        })
        .collect())
}

/// Per-feature z-score with population statistics.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Normalizer {
    stats: Option<(Vec<f64>, Vec<f64>)>,
}

impl Normalizer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_stats(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() || mean.is_empty() {
            return Err(Error::Usage("normalizer needs one mean and std per feature".into()));
        }
        if std.iter().any(|s| !(*s > 0.0 && s.is_finite())) || mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Usage("normalizer statistics must be finite with positive std".into()));
        }
        Ok(Self {
            stats: Some((mean, std)),
        })
    }

    /// Fits mean and standard deviation of every feature over all nodes and
    /// steps. A zero deviation is replaced by 1.
    pub fn fit(&mut self, steps: &[Tensor]) -> Result<()> {
        let Some(first) = steps.first() else {
            return Err(Error::Data("cannot fit a normalizer on an empty split".into()));
        };
        let d = first.cols();
        let mut sum = vec![0.0; d];
        let mut count = 0usize;
        for x in steps {
            for row in x.data().chunks(d) {
                for (s, v) in sum.iter_mut().zip(row) {
                    *s += v;
                }
                count += 1;
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0.0; d];
        for x in steps {
            for row in x.data().chunks(d) {
                for f in 0..d {
                    let e = row[f] - mean[f];
                    sq[f] += e * e;
                }
            }
        }
        let std = sq
            .iter()
            .enumerate()
            .map(|(f, s)| {
                let v = libm::sqrt(s / count as f64);
                if v > 0.0 {
                    v
                } else {
                    log::warn!("feature {f} is constant on the training split; using std 1");
                    1.0
                }
            })
            .collect();
        self.stats = Some((mean, std));
        Ok(())
    }

    pub fn is_fitted(&self) -> bool {
        self.stats.is_some()
    }

    pub fn mean(&self) -> Option<&[f64]> {
        self.stats.as_ref().map(|(m, _)| m.as_slice())
    }

    pub fn std(&self) -> Option<&[f64]> {
        self.stats.as_ref().map(|(_, s)| s.as_slice())
    }

    fn transform(&self, x: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor> {
        let Some((mean, std)) = &self.stats else {
            return Err(Error::Usage("normalizer used before fit".into()));
        };
        let d = mean.len();
        if x.rank() != 2 || x.cols() != d {
            return Err(Error::Usage(format!(
                "normalizer fitted on {d} features, got shape {:?}",
                x.shape()
            )));
        }
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(d) {
            for (k, v) in row.iter_mut().enumerate() {
                *v = f(*v, mean[k], std[k]);
            }
        }
        Ok(out)
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.transform(x, |v, m, s| (v - m) / s)
    }

    pub fn invert(&self, x: &Tensor) -> Result<Tensor> {
        self.transform(x, |v, m, s| v * s + m)
    }
}

/// Averaging operator driving the synthetic diffusion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DiffusionOperator {
    /// `D⁻¹W`; isolated nodes keep their value.
    #[default]
    RandomWalk,
    /// `W/d_max + diag(1 − d_i/d_max)`, symmetric and doubly stochastic,
    /// so the global mean is conserved.
    Symmetric,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub steps: usize,
    /// Mixing weight of the averaging operator, in `[0, 1]`.
    pub alpha: f64,
    /// Standard deviation of the additive Gaussian noise.
    pub noise: f64,
    pub features: usize,
    pub seed: u64,
    pub operator: DiffusionOperator,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            alpha: 0.6,
            noise: 0.05,
            features: 1,
            seed: 0,
            operator: DiffusionOperator::RandomWalk,
        }
    }
}

/// Dense averaging matrix of `op` on `g`.
pub fn diffusion_matrix(g: &Graph, op: DiffusionOperator) -> Tensor {
    let n = g.node_count();
    let mut p = Tensor::zeros(&[n, n]);
    match op {
        DiffusionOperator::RandomWalk => {
            for i in 0..n {
                let d = g.strength(i);
                if d > 0.0 {
                    for (j, w) in g.neighbors(i) {
                        p.set(i, j, w / d);
                    }
                } else {
                    p.set(i, i, 1.0);
                }
            }
        }
        DiffusionOperator::Symmetric => {
            let d_max = (0..n).map(|i| g.strength(i)).fold(0.0, f64::max);
            for i in 0..n {
                if d_max > 0.0 {
                    for (j, w) in g.neighbors(i) {
                        p.set(i, j, w / d_max);
                    }
                    p.set(i, i, 1.0 - g.strength(i) / d_max);
                } else {
                    p.set(i, i, 1.0);
                }
            }
        }
    }
    p
}

/// `X_{t+1} = α·P·X_t + (1 − α)·X_t + ε_t` with `X_0` and `ε_t` Gaussian.
/// `initial` replaces the random `X_0` when given.
pub fn synth_diffusion(graph: &Graph, cfg: &SynthConfig, initial: Option<Tensor>) -> Result<TimeSeriesDataset> {
    if !(0.0..=1.0).contains(&cfg.alpha) {
        return Err(Error::Usage(format!("alpha {} outside [0, 1]", cfg.alpha)));
    }
    if !(cfg.noise >= 0.0 && cfg.noise.is_finite()) {
        return Err(Error::Usage(format!("noise {} must be finite and non-negative", cfg.noise)));
    }
    if cfg.steps == 0 || cfg.features == 0 {
        return Err(Error::Usage("synthetic series needs positive length and features".into()));
    }
    let n = graph.node_count();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let x0 = match initial {
        Some(x) => {
            if x.shape() != [n, cfg.features] {
                return Err(Error::Usage(format!(
                    "initial state {:?} does not match [{n}, {}]",
                    x.shape(),
                    cfg.features
                )));
            }
            x
        }
        None => {
            let data = (0..n * cfg.features)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            Tensor::new(&[n, cfg.features], data)?
        }
    };
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::Usage(format!("noise: {e}")))?;
    let p = diffusion_matrix(graph, cfg.operator);
    let mut steps = Vec::with_capacity(cfg.steps);
    steps.push(x0);
    for _ in 1..cfg.steps {
        let x = steps.last().expect("non-empty");
        let mixed = p.matmul(x)?;
        let data = mixed
            .data()
            .iter()
            .zip(x.data())
            .map(|(m, v)| {
                let e = if cfg.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                cfg.alpha * m + (1.0 - cfg.alpha) * v + e
            })
            .collect();
        steps.push(Tensor::new(x.shape(), data)?);
    }
    TimeSeriesDataset::new(steps, graph.clone())
}

/// Grid graph with unit edges between 4-neighbors; node `r·cols + c`.
pub fn knn_grid_graph(rows: usize, cols: usize) -> Result<Graph> {
    if rows == 0 || cols == 0 {
        return Err(Error::Usage("grid needs at least one row and column".into()));
    }
    let mut edges = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let v = r * cols + c;
            if c + 1 < cols {
                edges.push((v, v + 1, 1.0));
            }
            if r + 1 < rows {
                edges.push((v, v + cols, 1.0));
            }
        }
    }
    Graph::from_edges(rows * cols, &edges)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(values: &[f64]) -> TimeSeriesDataset {
        let steps = values.iter().map(|&v| Tensor::full(&[1, 1], v)).collect();
        TimeSeriesDataset::new(steps, Graph::edgeless(1).unwrap()).unwrap()
    }

    #[test]
    fn window_counts_and_indexing() {
        let mut ds = series(&[0.0, 1.0, 2.0, 3.0, 4.0]);
        ds.split = SplitFractions { train: 1.0, val: 0.0, test: 0.0 };
        let wc = WindowConfig { input_len: 3, horizon: 1 };
        let w = make_windows(&ds, wc, Split::Train).unwrap();
        assert_eq!(w.len(), 2);
        assert_eq!(w[0].targets[0].data(), &[3.0]);
        let exact = WindowConfig { input_len: 4, horizon: 1 };
        assert_eq!(make_windows(&ds, exact, Split::Train).unwrap().len(), 1);
        let long = WindowConfig { input_len: 5, horizon: 1 };
        assert!(matches!(make_windows(&ds, long, Split::Train), Err(Error::Data(_))));
    }

    #[test]
    fn default_split_is_contiguous() {
        let ds = series(&[0.0; 10]);
        assert_eq!(ds.split_range(Split::Train).unwrap(), 0..7);
        assert_eq!(ds.split_range(Split::Val).unwrap(), 7..8);
        assert_eq!(ds.split_range(Split::Test).unwrap(), 8..10);
    }

    #[test]
    fn zscore_examples() {
        let mut z = Normalizer::new();
        let x = Tensor::full(&[1, 1], 1.0);
        assert!(matches!(z.apply(&x), Err(Error::Usage(_))));
        let train: Vec<Tensor> = [1.0, 2.0, 3.0].iter().map(|&v| Tensor::full(&[1, 1], v)).collect();
        z.fit(&train).unwrap();
        assert_eq!(z.mean().unwrap(), &[2.0]);
        assert!((z.std().unwrap()[0] - libm::sqrt(2.0 / 3.0)).abs() < 1e-15);
        let y = Tensor::from_rows(&[[0.3], [-7.25]]).unwrap();
        let back = z.invert(&z.apply(&y).unwrap()).unwrap();
        assert!(back.max_abs_diff(&y).unwrap() < 1e-12);

        let mut c = Normalizer::new();
        c.fit(&[Tensor::full(&[2, 1], 4.0)]).unwrap();
        assert_eq!(c.std().unwrap(), &[1.0]);
        assert_eq!(c.apply(&Tensor::full(&[2, 1], 4.0)).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn synth_examples() {
        let g = knn_grid_graph(2, 2).unwrap();
        let v = Tensor::from_rows(&[[1.0], [2.0], [-1.0], [0.5]]).unwrap();
        let cfg = SynthConfig { steps: 5, alpha: 0.0, noise: 0.0, ..SynthConfig::default() };
        let ds = synth_diffusion(&g, &cfg, Some(v.clone())).unwrap();
        assert!(ds.steps.iter().all(|x| *x == v));

        let cfg = SynthConfig { steps: 30, seed: 9, ..SynthConfig::default() };
        assert_eq!(synth_diffusion(&g, &cfg, None).unwrap(), synth_diffusion(&g, &cfg, None).unwrap());
        let other = SynthConfig { seed: 10, ..cfg.clone() };
        assert_ne!(synth_diffusion(&g, &cfg, None).unwrap(), synth_diffusion(&g, &other, None).unwrap());
        let bad = SynthConfig { alpha: 1.5, ..cfg };
        assert!(synth_diffusion(&g, &bad, None).is_err());
    }

    #[test]
    fn grid_examples() {
        assert_eq!(knn_grid_graph(1, 2).unwrap().edge_count(), 1);
        assert_eq!(knn_grid_graph(2, 2).unwrap().edge_count(), 4);
        assert_eq!(knn_grid_graph(3, 3).unwrap().degree(4), 4);
    }
}
