//! End-to-end protocol: normalize, window, train, evaluate on the original
//! scale, and the multi-seed variant and upsampling comparisons.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::data::{windows_in, Normalizer, Split, TimeSeriesDataset, Window, WindowConfig};
use crate::error::{Error, Result};
use crate::metrics::{HistoricalAverage, MetricReport};
use crate::model::{Stunet, StunetConfig, Variant};
use crate::sampling::UnpoolMode;
use crate::tensor::Tensor;
use crate::train::{train, TrainConfig, TrainLog};

/// Windows forecast together during evaluation.
const FORECAST_BATCH: usize = 64;

/// Dataset split into normalized windows, with the raw targets kept for
/// scoring.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub normalizer: Normalizer,
    pub window: WindowConfig,
    pub train: Vec<Window>,
    pub val: Vec<Window>,
    pub test: Vec<Window>,
    /// Test windows on the original scale.
    pub raw_test: Vec<Window>,
    pub ha: HistoricalAverage,
    pub interval_minutes: Option<f64>,
}

impl Prepared {
    pub fn new(ds: &TimeSeriesDataset, wc: WindowConfig) -> Result<Self> {
        let mut normalizer = Normalizer::new();
        normalizer.fit(ds.split_steps(Split::Train)?)?;
        Self::with_normalizer(ds, wc, normalizer)
    }

    /// Like [`Prepared::new`] but scales with previously fitted statistics.
    pub fn with_normalizer(ds: &TimeSeriesDataset, wc: WindowConfig, normalizer: Normalizer) -> Result<Self> {
        let train_range = ds.split_range(Split::Train)?;
        let scaled: Vec<Tensor> = ds
            .steps
            .iter()
            .map(|x| normalizer.apply(x))
            .collect::<Result<_>>()?;
        let val_range = ds.split_range(Split::Val)?;
        let val = if val_range.len() >= wc.span() {
            windows_in(&scaled, val_range, wc)?
        } else {
            Vec::new()
        };
        let test_range = ds.split_range(Split::Test)?;
        Ok(Self {
            train: windows_in(&scaled, train_range.clone(), wc)?,
            val,
            test: windows_in(&scaled, test_range.clone(), wc)?,
            raw_test: windows_in(&ds.steps, test_range, wc)?,
            ha: HistoricalAverage::fit(&ds.steps[train_range], ds.period)?,
            normalizer,
            window: wc,
            interval_minutes: ds.interval_minutes,
        })
    }

    fn raw_targets(&self) -> Vec<Vec<Tensor>> {
        self.raw_test.iter().map(|w| w.targets.clone()).collect()
    }

    /// Historical-average baseline scored on the test split.
    pub fn baseline_report(&self, horizons: &[usize], threshold: f64) -> Result<MetricReport> {
        let preds: Vec<Vec<Tensor>> = self
            .raw_test
            .iter()
            .map(|w| self.ha.predict(w, self.window.horizon))
            .collect();
        MetricReport::compute(&preds, &self.raw_targets(), horizons, self.interval_minutes, threshold)
    }

    /// Test-split forecasts on the original scale.
    pub fn forecast_test(&self, model: &Stunet) -> Result<Vec<Vec<Tensor>>> {
        let mut out = Vec::with_capacity(self.test.len());
        for chunk in self.test.chunks(FORECAST_BATCH) {
            let inputs: Vec<&[Tensor]> = chunk.iter().map(|w| w.inputs.as_slice()).collect();
            for forecast in model.predict_batch(&inputs)? {
                out.push(
                    forecast
                        .iter()
                        .map(|p| self.normalizer.invert(p))
                        .collect::<Result<Vec<_>>>()?,
                );
            }
        }
        Ok(out)
    }

    pub fn evaluate(&self, model: &Stunet, horizons: &[usize], threshold: f64) -> Result<MetricReport> {
        let preds = self.forecast_test(model)?;
        MetricReport::compute(&preds, &self.raw_targets(), horizons, self.interval_minutes, threshold)
    }
}

/// Builds, trains and scores one model.
pub fn fit_and_evaluate(
    config: StunetConfig,
    prepared: &Prepared,
    graph: &crate::graph::Graph,
    train_cfg: &TrainConfig,
    horizons: &[usize],
    threshold: f64,
) -> Result<(Stunet, TrainLog, MetricReport)> {
    let mut model = Stunet::build(config, graph)?;
    let log = train(&mut model, &prepared.train, &prepared.val, train_cfg)?;
    let report = prepared.evaluate(&model, horizons, threshold)?;
    Ok((model, log, report))
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and sample standard deviation; one value gives std 0.
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            libm::sqrt(values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0))
        } else {
            0.0
        };
        Self { mean, std }
    }
}

/// Result of one (configuration, seed) run.
#[derive(Clone, Debug)]
pub struct Cell {
    pub seed: u64,
    pub outcome: core::result::Result<(MetricReport, bool), String>,
}

impl Cell {
    pub fn report(&self) -> Option<&MetricReport> {
        self.outcome.as_ref().ok().map(|(r, _)| r)
    }

    pub fn converged(&self) -> bool {
        matches!(self.outcome, Ok((_, true)))
    }
}

/// Per-horizon summary across seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct HorizonSummary {
    pub step: usize,
    pub minutes: Option<f64>,
    pub mae: MeanStd,
    pub mape: MeanStd,
    pub rmse: MeanStd,
    pub mse: MeanStd,
}

#[derive(Clone, Debug)]
pub struct ComparisonRow {
    pub label: String,
    pub config: StunetConfig,
    pub cells: Vec<Cell>,
}

impl ComparisonRow {
    pub fn successful(&self) -> Vec<&MetricReport> {
        self.cells.iter().filter_map(Cell::report).collect()
    }

    pub fn summary(&self) -> Vec<HorizonSummary> {
        let reports = self.successful();
        let Some(first) = reports.first() else {
            return Vec::new();
        };
        (0..first.rows.len())
            .map(|i| {
                let col = |f: fn(&crate::metrics::HorizonMetrics) -> f64| -> MeanStd {
                    MeanStd::of(&reports.iter().map(|r| f(&r.rows[i])).collect::<Vec<_>>())
                };
                HorizonSummary {
                    step: first.rows[i].step,
                    minutes: first.rows[i].minutes,
                    mae: col(|r| r.mae),
                    mape: col(|r| r.mape.unwrap_or(f64::NAN)),
                    rmse: col(|r| r.rmse),
                    mse: col(|r| r.mse),
                }
            })
            .collect()
    }

    /// Seed-averaged MAE over all horizons of successful runs.
    pub fn mean_mae(&self) -> Option<f64> {
        let reports = self.successful();
        if reports.is_empty() {
            return None;
        }
        Some(reports.iter().map(|r| r.mean_mae()).sum::<f64>() / reports.len() as f64)
    }
}

#[derive(Clone, Debug)]
pub struct Comparison {
    pub seeds: Vec<u64>,
    pub horizons: Vec<usize>,
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn row(&self, label: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.label == label)
    }
}

/// Shared settings of the multi-seed comparisons.
pub struct Protocol<'a> {
    pub prepared: &'a Prepared,
    pub graph: &'a crate::graph::Graph,
    pub train: &'a TrainConfig,
    pub horizons: &'a [usize],
    pub threshold: f64,
}

/// Trains and scores one (configuration, seed) cell. Failures are recorded
/// in the cell rather than returned.
pub fn run_cell(protocol: &Protocol<'_>, label: &str, config: &StunetConfig, seed: u64) -> Cell {
    let cfg = StunetConfig { seed, ..config.clone() };
    let tc = TrainConfig { seed, ..protocol.train.clone() };
    let outcome = fit_and_evaluate(cfg, protocol.prepared, protocol.graph, &tc, protocol.horizons, protocol.threshold)
        .map(|(_, log, report)| (report, log.converged()))
        .map_err(|e| format!("{e}"));
    if let Err(e) = &outcome {
        log::warn!("{label} seed {seed} failed: {e}");
    }
    Cell { seed, outcome }
}

/// Collects cells produced in row-major (row, seed) order into a table.
pub fn assemble(protocol: &Protocol<'_>, seeds: &[u64], configs: Vec<(String, StunetConfig)>, cells: Vec<Cell>) -> Result<Comparison> {
    if cells.len() != configs.len() * seeds.len() {
        return Err(Error::Usage(format!(
            "{} cells for {} rows x {} seeds",
            cells.len(),
            configs.len(),
            seeds.len()
        )));
    }
    let mut cells = cells.into_iter();
    let rows = configs
        .into_iter()
        .map(|(label, config)| ComparisonRow {
            label,
            config,
            cells: cells.by_ref().take(seeds.len()).collect(),
        })
        .collect();
    Ok(Comparison {
        seeds: seeds.to_vec(),
        horizons: protocol.horizons.to_vec(),
        rows,
    })
}

fn run_rows(protocol: &Protocol<'_>, seeds: &[u64], configs: Vec<(String, StunetConfig)>) -> Result<Comparison> {
    if seeds.is_empty() {
        return Err(Error::Usage("at least one seed is required".into()));
    }
    let cells = configs
        .iter()
        .flat_map(|(label, config)| seeds.iter().map(move |&s| run_cell(protocol, label, config, s)))
        .collect();
    assemble(protocol, seeds, configs, cells)
}

/// Rows of the ablation: the four pooling/dilation variants.
pub fn ablation_rows(base: &StunetConfig) -> Vec<(String, StunetConfig)> {
    Variant::ALL
        .iter()
        .map(|v| (String::from(v.name()), v.apply(base)))
        .collect()
}

/// Rows of the upsampling comparison: one per unpooling strategy.
pub fn upsampling_rows(base: &StunetConfig) -> Vec<(String, StunetConfig)> {
    UnpoolMode::ALL
        .iter()
        .map(|&m| (String::from(m.name()), StunetConfig { unpool: m, ..base.clone() }))
        .collect()
}

/// Trains the four pooling/dilation variants under every seed.
pub fn run_ablation(base: &StunetConfig, protocol: &Protocol<'_>, seeds: &[u64]) -> Result<Comparison> {
    run_rows(protocol, seeds, ablation_rows(base))
}

/// Trains the network once per unpooling strategy under every seed.
pub fn run_upsampling_comparison(base: &StunetConfig, protocol: &Protocol<'_>, seeds: &[u64]) -> Result<Comparison> {
    run_rows(protocol, seeds, upsampling_rows(base))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std() {
        assert_eq!(MeanStd::of(&[2.0]), MeanStd { mean: 2.0, std: 0.0 });
        let m = MeanStd::of(&[1.0, 3.0]);
        assert_eq!(m.mean, 2.0);
        assert!((m.std - libm::sqrt(2.0)).abs() < 1e-15);
    }
}
