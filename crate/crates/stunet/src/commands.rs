//! The subcommands as library functions. Each takes a resolved
//! [`RunConfig`] and writes its outputs under the configured paths.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use stunet_core::data::{knn_grid_graph, synth_diffusion, SynthConfig, TimeSeriesDataset, WindowConfig};
use stunet_core::experiment::{ablation_rows, assemble, run_cell, upsampling_rows, Cell, Comparison, Prepared, Protocol};
use stunet_core::metrics::MetricReport;
use stunet_core::partition::multilevel_partition;
use stunet_core::train::{train, TrainLog};
use stunet_core::{Graph, Stunet, StunetConfig, Tensor};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io;
use crate::report::{self, Provenance};

/// Worker threads for the multi-seed comparisons.
pub const THREADS_ENV: &str = "STUNET_THREADS";

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    cfg.require(&cfg.out, "out")
}

pub fn load_graph(cfg: &RunConfig) -> Result<Graph> {
    io::load_adjacency(cfg.require(&cfg.adj, "adj")?, cfg.adj_format, cfg.nodes)
}

pub fn load_dataset(cfg: &RunConfig) -> Result<TimeSeriesDataset> {
    let graph = load_graph(cfg)?;
    let path = cfg.require(&cfg.series, "series")?;
    let steps = io::load_series(path, graph.node_count())?;
    let mut ds = TimeSeriesDataset::new(steps, graph).map_err(|e| Error::format(path, e.to_string()))?;
    ds.split = cfg.split;
    ds.interval_minutes = cfg.interval_minutes;
    ds.period = cfg.period;
    let d = ds.feature_dim();
    if cfg.model.input_dim != d {
        return Err(Error::Config {
            key: "input_dim".into(),
            message: format!("is {} but {} has {d} features per node", cfg.model.input_dim, path.display()),
        });
    }
    Ok(ds)
}

fn window(cfg: &StunetConfig) -> WindowConfig {
    WindowConfig {
        input_len: cfg.input_len,
        horizon: cfg.horizon,
    }
}

pub struct TrainOutput {
    pub checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub log: TrainLog,
}

/// Trains on the train split, selects on validation and writes the
/// checkpoint plus a per-epoch log next to it (or under `out`).
pub fn train_cmd(cfg: &RunConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    let ckpt = cfg.require(&cfg.ckpt, "ckpt")?;
    let ds = load_dataset(cfg)?;
    let model_cfg = cfg.effective_model();
    let prepared = Prepared::new(&ds, window(&model_cfg))?;
    let mut model = Stunet::build(model_cfg, &ds.graph)?;
    log::info!(
        "training {} parameters on {} windows ({} validation)",
        model.params().parameter_count(),
        prepared.train.len(),
        prepared.val.len()
    );
    let log = train(&mut model, &prepared.train, &prepared.val, &cfg.effective_train())?;
    Checkpoint::capture(cfg, &prepared.normalizer, &model).save(ckpt)?;
    let log_path = match &cfg.out {
        Some(dir) => dir.join("train_log.csv"),
        None => ckpt.with_extension("log.csv"),
    };
    let prov = Provenance::new(cfg.hash(), vec![cfg.seed]);
    io::write_text(&log_path, &report::train_log_csv(&prov, &log))?;
    Ok(TrainOutput {
        checkpoint: ckpt.to_path_buf(),
        log_path,
        log,
    })
}

/// Model and baseline scores on the test split, written as
/// `eval.txt` and `eval.csv`.
pub struct EvalOutput {
    pub model: MetricReport,
    pub baseline: MetricReport,
    pub text: PathBuf,
    pub csv: PathBuf,
}

/// Loads the checkpoint and rebuilds the model on the configured graph. The
/// data settings (split, period, horizons) come from `cfg`; the model and
/// normalizer come from the checkpoint.
fn restore(cfg: &RunConfig) -> Result<(Checkpoint, Graph, Stunet)> {
    let path = cfg.require(&cfg.ckpt, "ckpt")?;
    let ck = Checkpoint::load(path)?;
    let graph = load_graph(cfg)?;
    let model = ck.restore(path, &graph)?;
    Ok((ck, graph, model))
}

pub fn eval_cmd(cfg: &RunConfig) -> Result<EvalOutput> {
    let out = out_dir(cfg)?;
    let (ck, _, model) = restore(cfg)?;
    let data_cfg = RunConfig {
        model: ck.config.model.clone(),
        ..cfg.clone()
    };
    data_cfg.validate()?;
    let ds = load_dataset(&data_cfg)?;
    let prepared = Prepared::with_normalizer(&ds, window(model.config()), ck.normalizer.clone())?;
    let scores = prepared.evaluate(&model, &cfg.horizons, cfg.mape_threshold)?;
    let baseline = prepared.baseline_report(&cfg.horizons, cfg.mape_threshold)?;
    let prov = Provenance::new(ck.config.hash(), vec![ck.config.seed]);
    let reports = [("model", &scores), ("HA", &baseline)];
    let text = out.join("eval.txt");
    let csv = out.join("eval.csv");
    io::write_text(&text, &report::metrics_text(&prov, &reports))?;
    io::write_text(&csv, &report::metrics_csv(&prov, &reports))?;
    Ok(EvalOutput {
        model: scores,
        baseline,
        text,
        csv,
    })
}

/// Forecasts `H` steps from the `J` most recent rows in `window_path` and
/// writes them on the original scale to `out/forecast.csv`.
pub fn predict_cmd(cfg: &RunConfig, window_path: &Path) -> Result<(PathBuf, Vec<Tensor>)> {
    let out = out_dir(cfg)?;
    let (ck, graph, model) = restore(cfg)?;
    let steps = io::load_series(window_path, graph.node_count())?;
    let j = model.config().input_len;
    if steps.len() != j {
        return Err(Error::Config {
            key: "window".into(),
            message: format!("{} has {} rows, the model needs exactly {j}", window_path.display(), steps.len()),
        });
    }
    let forecast = forecast_one(&model, &ck, &steps)?;
    let path = out.join("forecast.csv");
    io::write_series(&path, &forecast)?;
    Ok((path, forecast))
}

/// Normalizes one raw window, forecasts and inverts. Evaluation goes through
/// the same batched forward pass, so results agree bit for bit.
fn forecast_one(model: &Stunet, ck: &Checkpoint, raw: &[Tensor]) -> Result<Vec<Tensor>> {
    let scaled = raw.iter().map(|x| ck.normalizer.apply(x)).collect::<stunet_core::Result<Vec<_>>>()?;
    let mut out = model.predict_batch(&[scaled.as_slice()])?;
    let forecast = out.pop().expect("one window in, one forecast out");
    Ok(forecast
        .iter()
        .map(|p| ck.normalizer.invert(p))
        .collect::<stunet_core::Result<Vec<_>>>()?)
}

/// Writes `out/partition.txt` and returns the node count per level.
pub fn partition_cmd(cfg: &RunConfig) -> Result<(PathBuf, Vec<usize>)> {
    let out = out_dir(cfg)?;
    let graph = load_graph(cfg)?;
    let map = multilevel_partition(&graph, cfg.level)?;
    let path = out.join("partition.txt");
    io::write_text(&path, &io::partition_text(&map))?;
    Ok((path, map.node_counts()))
}

pub struct SynthOutput {
    pub adjacency: PathBuf,
    pub series: PathBuf,
    pub manifest: PathBuf,
}

/// Grid graph and diffusion series. The manifest is itself a config file:
/// passing it back through `--config` regenerates identical files and
/// points `train` at the generated data.
pub fn synth_cmd(cfg: &RunConfig) -> Result<SynthOutput> {
    let out = out_dir(cfg)?;
    let s = &cfg.synth;
    let graph = knn_grid_graph(s.rows, s.cols)?;
    let ds = synth_diffusion(
        &graph,
        &SynthConfig {
            steps: s.steps,
            alpha: s.alpha,
            noise: s.noise,
            features: s.features,
            seed: cfg.seed,
            operator: s.operator,
        },
        None,
    )?;
    let adjacency = out.join("adjacency.csv");
    let series = out.join("series.csv");
    let manifest = out.join("manifest.txt");
    io::write_adjacency(&adjacency, &graph)?;
    io::write_series(&series, &ds.steps)?;
    let mut m = RunConfig {
        seed: cfg.seed,
        synth: cfg.synth.clone(),
        adj: Some(adjacency.clone()),
        series: Some(series.clone()),
        ..RunConfig::default()
    };
    m.model.input_dim = s.features;
    m.model.output_dim = s.features;
    let keep = |l: &&str| {
        ["seed=", "synth.", "adj=", "adj_format=", "series=", "input_dim=", "output_dim="]
            .iter()
            .any(|k| l.starts_with(k))
    };
    let text: String = m.to_text().lines().filter(keep).map(|l| format!("{l}\n")).collect();
    io::write_text(&manifest, &text)?;
    Ok(SynthOutput {
        adjacency,
        series,
        manifest,
    })
}

fn threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or(1)
}

/// Runs every (row, seed) cell, on up to `$STUNET_THREADS` threads. Cells are
/// independent and keep their input order, so the table does not depend on
/// the thread count.
fn run_comparison(cfg: &RunConfig, configs: Vec<(String, StunetConfig)>) -> Result<Comparison> {
    cfg.validate()?;
    if cfg.seeds.is_empty() {
        return Err(Error::Config {
            key: "seeds".into(),
            message: "at least one seed is required".into(),
        });
    }
    let ds = load_dataset(cfg)?;
    let prepared = Prepared::new(&ds, window(&cfg.model))?;
    let tc = cfg.effective_train();
    let protocol = Protocol {
        prepared: &prepared,
        graph: &ds.graph,
        train: &tc,
        horizons: &cfg.horizons,
        threshold: cfg.mape_threshold,
    };
    let jobs: Vec<(&str, &StunetConfig, u64)> = configs
        .iter()
        .flat_map(|(label, c)| cfg.seeds.iter().map(move |&s| (label.as_str(), c, s)))
        .collect();
    let results: Mutex<Vec<Option<Cell>>> = Mutex::new(vec![None; jobs.len()]);
    let next = AtomicUsize::new(0);
    let workers = threads().min(jobs.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(label, c, seed)) = jobs.get(i) else {
                    break;
                };
                log::info!("{label} seed {seed}");
                let cell = run_cell(&protocol, label, c, seed);
                results.lock().expect("no worker panicked")[i] = Some(cell);
            });
        }
    });
    let cells = results
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|c| c.expect("every job ran"))
        .collect();
    Ok(assemble(&protocol, &cfg.seeds, configs, cells)?)
}

pub struct ComparisonOutput {
    pub comparison: Comparison,
    pub text: PathBuf,
    pub csv: PathBuf,
}

fn write_comparison(cfg: &RunConfig, cmp: Comparison, name: &str, with_mse: bool) -> Result<ComparisonOutput> {
    let out = out_dir(cfg)?;
    let prov = Provenance::new(cfg.hash(), cfg.seeds.clone());
    let text = out.join(format!("{name}.txt"));
    let csv = out.join(format!("{name}.csv"));
    io::write_text(&text, &report::comparison_text(&prov, &cmp, with_mse))?;
    io::write_text(&csv, &report::comparison_csv(&prov, &cmp))?;
    Ok(ComparisonOutput {
        comparison: cmp,
        text,
        csv,
    })
}

/// The four pooling/dilation variants across `seeds`.
pub fn ablation_cmd(cfg: &RunConfig) -> Result<ComparisonOutput> {
    out_dir(cfg)?;
    let cmp = run_comparison(cfg, ablation_rows(&cfg.model))?;
    write_comparison(cfg, cmp, "ablation", false)
}

/// The three unpooling strategies across `seeds`.
pub fn upsample_cmd(cfg: &RunConfig) -> Result<ComparisonOutput> {
    out_dir(cfg)?;
    let base = match cfg.variant {
        Some(v) => v.apply(&cfg.model),
        None => cfg.model.clone(),
    };
    let cmp = run_comparison(cfg, upsampling_rows(&base))?;
    write_comparison(cfg, cmp, "upsample", true)
}
