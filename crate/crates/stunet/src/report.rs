//! Aligned-text and CSV report rendering. Every file starts with `#`
//! provenance lines; nothing time-dependent is written, so identical runs
//! produce identical bytes.

use std::fmt::Write as _;

use stunet_core::experiment::{Comparison, MeanStd};
use stunet_core::metrics::MetricReport;

/// Commit of the source tree the binary was built from.
pub const COMMIT: &str = env!("STUNET_COMMIT");

#[derive(Clone, Debug, PartialEq)]
pub struct Provenance {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub commit: String,
}

impl Provenance {
    pub fn new(config_hash: String, seeds: Vec<u64>) -> Self {
        Self {
            config_hash,
            seeds,
            commit: COMMIT.to_string(),
        }
    }

    fn header(&self) -> String {
        let seeds: Vec<String> = self.seeds.iter().map(ToString::to_string).collect();
        format!(
            "# config_hash: {}\n# seeds: {}\n# commit: {}\n",
            self.config_hash,
            seeds.join(","),
            self.commit
        )
    }
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.digits$}"))
}

fn csv_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

/// Left-aligned first column, right-aligned others.
fn table(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut s = String::new();
    for r in rows {
        let mut line = String::new();
        for (c, cell) in r.iter().enumerate() {
            if c == 0 {
                let _ = write!(line, "{cell:<w$}", w = widths[c]);
            } else {
                let _ = write!(line, "  {cell:>w$}", w = widths[c]);
            }
        }
        s.push_str(line.trim_end());
        s.push('\n');
    }
    s
}

/// Named metric reports (e.g. the model and the baseline) on the same
/// horizons.
pub fn metrics_text(prov: &Provenance, reports: &[(&str, &MetricReport)]) -> String {
    let mut rows = vec![["source", "horizon", "minutes", "MAE", "MAPE(%)", "RMSE", "samples", "masked"]
        .map(String::from)
        .to_vec()];
    for (name, rep) in reports {
        for r in &rep.rows {
            rows.push(vec![
                name.to_string(),
                r.step.to_string(),
                opt(r.minutes, 0),
                format!("{:.4}", r.mae),
                opt(r.mape, 2),
                format!("{:.4}", r.rmse),
                r.samples.to_string(),
                r.masked.to_string(),
            ]);
        }
    }
    prov.header() + &table(&rows)
}

pub fn metrics_csv(prov: &Provenance, reports: &[(&str, &MetricReport)]) -> String {
    let mut s = prov.header();
    s.push_str("source,horizon,minutes,mae,mape,rmse,mse,samples,masked\n");
    for (name, rep) in reports {
        for r in &rep.rows {
            let _ = writeln!(
                s,
                "{name},{},{},{},{},{},{},{},{}",
                r.step,
                csv_opt(r.minutes),
                r.mae,
                csv_opt(r.mape),
                r.rmse,
                r.mse,
                r.samples,
                r.masked
            );
        }
    }
    s
}

fn pm(m: MeanStd, digits: usize) -> String {
    if m.mean.is_nan() {
        "-".into()
    } else {
        format!("{:.digits$}±{:.digits$}", m.mean, m.std)
    }
}

fn row_settings(cmp: &Comparison) -> String {
    let mut s = String::new();
    for r in &cmp.rows {
        let c = &r.config;
        let _ = writeln!(
            s,
            "# row {}: pool_level={} dilation={} unpool={} order={}",
            r.label,
            c.pool_level,
            c.dilation,
            c.unpool.name(),
            c.order
        );
    }
    s
}

/// Mean ± std across seeds per row and horizon. `with_mse` adds the MSE
/// column used by the upsampling comparison.
pub fn comparison_text(prov: &Provenance, cmp: &Comparison, with_mse: bool) -> String {
    let mut header = vec!["model".to_string()];
    let Some(first) = cmp.rows.iter().map(|r| r.summary()).find(|s| !s.is_empty()) else {
        return prov.header() + &row_settings(cmp) + "no successful runs\n" + &cells_text(cmp);
    };
    for h in &first {
        let tag = h.minutes.map_or_else(|| format!("h{}", h.step), |m| format!("{m:.0}min"));
        for metric in ["MAE", "MAPE(%)", "RMSE"] {
            header.push(format!("{tag} {metric}"));
        }
        if with_mse {
            header.push(format!("{tag} MSE"));
        }
    }
    let mut rows = vec![header];
    for r in &cmp.rows {
        let mut line = vec![r.label.clone()];
        let summary = r.summary();
        for i in 0..first.len() {
            match summary.get(i) {
                Some(h) => {
                    line.push(pm(h.mae, 3));
                    line.push(pm(h.mape, 2));
                    line.push(pm(h.rmse, 3));
                    if with_mse {
                        line.push(pm(h.mse, 4));
                    }
                }
                None => line.extend(std::iter::repeat_n("-".to_string(), if with_mse { 4 } else { 3 })),
            }
        }
        rows.push(line);
    }
    prov.header() + &row_settings(cmp) + &table(&rows) + "\n" + &cells_text(cmp)
}

fn cells_text(cmp: &Comparison) -> String {
    let mut rows = vec![["model", "seed", "converged", "mean MAE", "status"].map(String::from).to_vec()];
    for r in &cmp.rows {
        for c in &r.cells {
            let (mae, status) = match &c.outcome {
                Ok((rep, _)) => (format!("{:.4}", rep.mean_mae()), "ok".to_string()),
                Err(e) => ("-".into(), format!("failed: {e}")),
            };
            rows.push(vec![r.label.clone(), c.seed.to_string(), c.converged().to_string(), mae, status]);
        }
    }
    table(&rows)
}

pub fn comparison_csv(prov: &Provenance, cmp: &Comparison) -> String {
    let mut s = prov.header() + &row_settings(cmp);
    s.push_str("model,horizon,minutes,metric,mean,std\n");
    for r in &cmp.rows {
        for h in r.summary() {
            for (metric, m) in [("mae", h.mae), ("mape", h.mape), ("rmse", h.rmse), ("mse", h.mse)] {
                let _ = writeln!(s, "{},{},{},{metric},{},{}", r.label, h.step, csv_opt(h.minutes), m.mean, m.std);
            }
        }
    }
    s.push_str("model,seed,converged,mean_mae,error\n");
    for r in &cmp.rows {
        for c in &r.cells {
            let (mae, err) = match &c.outcome {
                Ok((rep, _)) => (rep.mean_mae().to_string(), String::new()),
                Err(e) => (String::new(), e.replace([',', '\n'], ";")),
            };
            let _ = writeln!(s, "{},{},{},{mae},{err}", r.label, c.seed, c.converged());
        }
    }
    s
}

/// Per-epoch training log as CSV.
pub fn train_log_csv(prov: &Provenance, log: &stunet_core::train::TrainLog) -> String {
    let mut s = prov.header();
    let _ = writeln!(s, "# initial_val_loss: {}", log.initial_val_loss);
    let _ = writeln!(s, "# best_epoch: {}", log.best_epoch.map_or_else(|| "none".into(), |e| e.to_string()));
    s.push_str("epoch,learning_rate,train_loss,val_loss\n");
    for e in &log.epochs {
        let _ = writeln!(s, "{},{},{},{}", e.epoch, e.learning_rate, e.train_loss, e.val_loss);
    }
    s
}
