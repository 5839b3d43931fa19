//! Forecast error metrics, per-horizon reports and the historical-average
//! baseline.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::Window;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Targets with a smaller magnitude are left out of MAPE.
pub const DEFAULT_MAPE_THRESHOLD: f64 = 1e-3;

fn check(pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::Metric(format!("{} predictions vs {} targets", pred.len(), target.len())));
    }
    if pred.is_empty() {
        return Err(Error::Metric("no values to score".into()));
    }
    Ok(())
}

pub fn mae(pred: &[f64], target: &[f64]) -> Result<f64> {
    check(pred, target)?;
    Ok(pred.iter().zip(target).map(|(p, t)| libm::fabs(p - t)).sum::<f64>() / pred.len() as f64)
}

pub fn mse(pred: &[f64], target: &[f64]) -> Result<f64> {
    check(pred, target)?;
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64)
}

pub fn rmse(pred: &[f64], target: &[f64]) -> Result<f64> {
    Ok(libm::sqrt(mse(pred, target)?))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mape {
    /// Percent.
    pub value: f64,
    /// Entries excluded because `|target| < threshold`.
    pub masked: usize,
}

pub fn mape(pred: &[f64], target: &[f64], threshold: f64) -> Result<Mape> {
    check(pred, target)?;
    let mut sum = 0.0;
    let mut used = 0usize;
    for (p, t) in pred.iter().zip(target) {
        if libm::fabs(*t) >= threshold {
            sum += libm::fabs((p - t) / t);
            used += 1;
        }
    }
    if used == 0 {
        return Err(Error::Metric(format!("every target is below the MAPE threshold {threshold}")));
    }
    Ok(Mape {
        value: 100.0 * sum / used as f64,
        masked: pred.len() - used,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct HorizonMetrics {
    /// 1-based forecast step.
    pub step: usize,
    pub minutes: Option<f64>,
    pub mae: f64,
    pub rmse: f64,
    pub mse: f64,
    /// `None` when every target was masked.
    pub mape: Option<f64>,
    pub samples: usize,
    pub masked: usize,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct MetricReport {
    pub rows: Vec<HorizonMetrics>,
}

impl MetricReport {
    /// Scores `preds[w][h]` against `targets[w][h]` at each 1-based step in
    /// `horizons`.
    pub fn compute(
        preds: &[Vec<Tensor>],
        targets: &[Vec<Tensor>],
        horizons: &[usize],
        interval_minutes: Option<f64>,
        threshold: f64,
    ) -> Result<Self> {
        if preds.len() != targets.len() || preds.is_empty() {
            return Err(Error::Metric(format!(
                "{} prediction windows vs {} target windows",
                preds.len(),
                targets.len()
            )));
        }
        let mut rows = Vec::with_capacity(horizons.len());
        for &step in horizons {
            let mut p = Vec::new();
            let mut t = Vec::new();
            for (pw, tw) in preds.iter().zip(targets) {
                let (Some(a), Some(b)) = (pw.get(step.wrapping_sub(1)), tw.get(step.wrapping_sub(1))) else {
                    return Err(Error::Metric(format!("horizon {step} is outside the forecast")));
                };
                if a.shape() != b.shape() {
                    return Err(Error::Metric(format!("shape {:?} vs {:?}", a.shape(), b.shape())));
                }
                p.extend_from_slice(a.data());
                t.extend_from_slice(b.data());
            }
            let (mape_value, masked) = match mape(&p, &t, threshold) {
                Ok(m) => (Some(m.value), m.masked),
                Err(_) => (None, p.len()),
            };
            rows.push(HorizonMetrics {
                step,
                minutes: interval_minutes.map(|m| m * step as f64),
                mae: mae(&p, &t)?,
                rmse: rmse(&p, &t)?,
                mse: mse(&p, &t)?,
                mape: mape_value,
                samples: p.len(),
                masked,
            });
        }
        Ok(Self { rows })
    }

    /// MAE averaged over the reported horizons.
    pub fn mean_mae(&self) -> f64 {
        self.rows.iter().map(|r| r.mae).sum::<f64>() / self.rows.len().max(1) as f64
    }

    /// RMSE ≥ MAE on every row.
    pub fn is_consistent(&self) -> bool {
        self.rows.iter().all(|r| r.rmse >= r.mae && r.mae >= 0.0)
    }
}

/// Historical-average baseline.
#[derive(Clone, Debug, PartialEq)]
pub enum HistoricalAverage {
    /// Mean of the training values at the same phase of the period.
    Periodic { period: usize, phase_means: Vec<Tensor> },
    /// Mean of the input window, repeated for every horizon step.
    WindowMean,
}

impl HistoricalAverage {
    /// `train` must start at absolute index 0 for phases to line up.
    pub fn fit(train: &[Tensor], period: Option<usize>) -> Result<Self> {
        let Some(period) = period else {
            return Ok(Self::WindowMean);
        };
        if period == 0 {
            return Err(Error::Usage("historical-average period must be positive".into()));
        }
        if train.len() < period {
            return Err(Error::Data(format!(
                "training split of {} steps is shorter than the period {period}",
                train.len()
            )));
        }
        let shape = train[0].shape().to_vec();
        let mut sums = vec![Tensor::zeros(&shape); period];
        let mut counts = vec![0usize; period];
        for (t, x) in train.iter().enumerate() {
            let s = &mut sums[t % period];
            for (a, b) in s.data_mut().iter_mut().zip(x.data()) {
                *a += b;
            }
            counts[t % period] += 1;
        }
        let phase_means = sums
            .into_iter()
            .zip(counts)
            .map(|(s, c)| s.map(|v| v / c as f64))
            .collect();
        Ok(Self::Periodic { period, phase_means })
    }

    pub fn predict(&self, window: &Window, horizon: usize) -> Vec<Tensor> {
        match self {
            Self::Periodic { period, phase_means } => (0..horizon)
                .map(|h| phase_means[(window.target_start() + h) % period].clone())
                .collect(),
            Self::WindowMean => {
                let mut mean = Tensor::zeros(window.inputs[0].shape());
                for x in &window.inputs {
                    for (a, b) in mean.data_mut().iter_mut().zip(x.data()) {
                        *a += b;
                    }
                }
                let mean = mean.map(|v| v / window.inputs.len() as f64);
                vec![mean; horizon]
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_values() {
        assert_eq!(mae(&[1.0, 2.0], &[2.0, 4.0]).unwrap(), 1.5);
        assert_eq!(rmse(&[1.0, 2.0], &[2.0, 4.0]).unwrap(), libm::sqrt(2.5));
        assert_eq!(mae(&[3.0], &[3.0]).unwrap(), 0.0);
        let m = mape(&[1.0, 1.0], &[0.0, 2.0], DEFAULT_MAPE_THRESHOLD).unwrap();
        assert_eq!((m.value, m.masked), (50.0, 1));
        assert!(matches!(mape(&[1.0], &[0.0], 1e-3), Err(Error::Metric(_))));
    }

    fn win(start: usize, inputs: &[f64]) -> Window {
        Window {
            start,
            inputs: inputs.iter().map(|&v| Tensor::full(&[1, 1], v)).collect(),
            targets: Vec::new(),
        }
    }

    #[test]
    fn historical_average_modes() {
        let fallback = HistoricalAverage::fit(&[], None).unwrap();
        let out = fallback.predict(&win(0, &[1.0, 2.0, 3.0]), 2);
        assert!(out.iter().all(|t| t.data() == [2.0]));

        let train: Vec<Tensor> = [1.0, 3.0, 1.0, 3.0].iter().map(|&v| Tensor::full(&[1, 1], v)).collect();
        let ha = HistoricalAverage::fit(&train, Some(2)).unwrap();
        // Targets start at index 6 (phase 0) and 7 (phase 1).
        let out = ha.predict(&win(4, &[1.0, 3.0]), 2);
        assert_eq!((out[0].data()[0], out[1].data()[0]), (1.0, 3.0));
    }

    #[test]
    fn report_labels_minutes() {
        let p = vec![(0..12).map(|h| Tensor::full(&[2, 1], h as f64)).collect::<Vec<_>>()];
        let t = vec![(0..12).map(|h| Tensor::full(&[2, 1], h as f64 + 1.0)).collect::<Vec<_>>()];
        let r = MetricReport::compute(&p, &t, &[3, 6, 12], Some(5.0), DEFAULT_MAPE_THRESHOLD).unwrap();
        let minutes: Vec<f64> = r.rows.iter().map(|row| row.minutes.unwrap()).collect();
        assert_eq!(minutes, [15.0, 30.0, 60.0]);
        assert!(r.rows.iter().all(|row| row.mae == 1.0));
        assert!(r.is_consistent());
        assert!(MetricReport::compute(&p, &t, &[13], None, 1e-3).is_err());
    }
}
