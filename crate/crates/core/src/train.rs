//! Mini-batch training with Adam, step learning-rate decay, gradient
//! clipping, scheduled sampling and best-on-validation selection.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Window;
use crate::error::{Error, Result};
use crate::model::{loss_value, stack_batch, Stunet};
use crate::optim::{clip_global_norm, AdamConfig, AdamState};
use crate::recurrent::{teacher_forcing_prob, TeacherForcing};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplier applied every `decay_every` epochs.
    pub lr_decay: f64,
    pub decay_every: usize,
    /// Global gradient-norm bound; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Decay constant of the teacher-forcing schedule; `None` disables it.
    pub forcing_tau: Option<f64>,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 80,
            batch_size: 50,
            learning_rate: 1e-2,
            lr_decay: 0.7,
            decay_every: 8,
            clip_norm: Some(5.0),
            forcing_tau: Some(1000.0),
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.decay_every == 0 {
            return Err(Error::Usage("batch size and decay interval must be positive".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Usage("learning-rate decay must be in (0, 1]".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Usage("learning rate must be positive".into()));
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return Err(Error::Usage("clip norm must be positive".into()));
        }
        if matches!(self.forcing_tau, Some(t) if !(t > 0.0)) {
            return Err(Error::Usage("teacher-forcing tau must be positive".into()));
        }
        Ok(())
    }

    /// `lr₀ · decay^⌊epoch / every⌋` for a 0-based epoch.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * libm::pow(self.lr_decay, (epoch / self.decay_every) as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were kept; `None` keeps the initial ones.
    pub best_epoch: Option<usize>,
    pub initial_val_loss: f64,
}

impl TrainLog {
    /// Training finished with finite losses and improved on the initial
    /// validation loss.
    pub fn converged(&self) -> bool {
        self.epochs
            .iter()
            .all(|e| e.train_loss.is_finite() && e.val_loss.is_finite())
            && self.best_epoch.is_some()
    }
}

/// Windows evaluated together by [`mean_loss`].
const EVAL_BATCH: usize = 64;

/// Mean loss of the model over `windows` without teacher forcing.
pub fn mean_loss(model: &Stunet, windows: &[Window]) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::Data("no windows to evaluate".into()));
    }
    let mut total = 0.0;
    for chunk in windows.chunks(EVAL_BATCH) {
        let inputs: Vec<&[Tensor]> = chunk.iter().map(|w| w.inputs.as_slice()).collect();
        let targets: Vec<&[Tensor]> = chunk.iter().map(|w| w.targets.as_slice()).collect();
        let preds = model.predict(&stack_batch(&inputs)?)?;
        total += loss_value(&preds, &stack_batch(&targets)?)? * chunk.len() as f64;
    }
    Ok(total / windows.len() as f64)
}

/// Trains in place and leaves the best-on-validation parameters in `model`.
/// With no validation windows the training loss selects instead.
pub fn train(model: &mut Stunet, train_windows: &[Window], val_windows: &[Window], cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    if train_windows.is_empty() {
        return Err(Error::Data("no training windows".into()));
    }
    let select = if val_windows.is_empty() { train_windows } else { val_windows };
    let initial = mean_loss(model, select)?;
    let mut log = TrainLog {
        initial_val_loss: initial,
        ..TrainLog::default()
    };
    let mut best = (initial, model.params().values().to_vec());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let adam_cfg = AdamConfig {
        learning_rate: cfg.learning_rate,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::new(adam_cfg, model.params().values());
    let mut order: Vec<usize> = (0..train_windows.len()).collect();
    let mut iteration: u64 = 0;

    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate_at(epoch);
        adam.set_learning_rate(lr);
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let prob = cfg.forcing_tau.map_or(0.0, |tau| teacher_forcing_prob(iteration, tau));
            let inputs: Vec<&[Tensor]> = batch.iter().map(|&i| train_windows[i].inputs.as_slice()).collect();
            let targets: Vec<&[Tensor]> = batch.iter().map(|&i| train_windows[i].targets.as_slice()).collect();
            let inputs = stack_batch(&inputs)?;
            let targets = stack_batch(&targets)?;
            let forcing = (prob > 0.0).then(|| TeacherForcing {
                prob,
                targets: Some(&targets),
                rng: &mut rng,
            });
            let (l, mut grads) = model.loss_and_gradients(&inputs, &targets, forcing)?;
            epoch_loss += l * batch.len() as f64;
            if let Some(c) = cfg.clip_norm {
                clip_global_norm(&mut grads, c);
            }
            adam.step(model.params_mut().values_mut(), &grads)?;
            iteration += 1;
        }
        let train_loss = epoch_loss / train_windows.len() as f64;
        let val_loss = mean_loss(model, select)?;
        log::info!("epoch {epoch}: lr {lr:.3e} train {train_loss:.6} val {val_loss:.6}");
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        if val_loss < best.0 {
            best = (val_loss, model.params().values().to_vec());
            log.best_epoch = Some(epoch);
        }
        log.epochs.push(EpochLog {
            epoch,
            learning_rate: lr,
            train_loss,
            val_loss,
        });
    }
    model.params_mut().assign(best.1)?;
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{knn_grid_graph, make_windows, synth_diffusion, Split, SynthConfig, WindowConfig};
    use crate::model::StunetConfig;
    use alloc::vec;

    #[test]
    fn learning_rate_schedule() {
        let c = TrainConfig::default();
        assert!((c.learning_rate_at(16) - 4.9e-3).abs() < 1e-15);
        assert_eq!(c.learning_rate_at(7), 1e-2);
    }

    #[test]
    fn zero_epochs_keeps_parameters_and_training_reduces_loss() {
        let g = knn_grid_graph(2, 2).unwrap();
        let ds = synth_diffusion(&g, &SynthConfig { steps: 60, ..SynthConfig::default() }, None).unwrap();
        let wc = WindowConfig { input_len: 3, horizon: 2 };
        let tr = make_windows(&ds, wc, Split::Train).unwrap();
        let va = make_windows(&ds, wc, Split::Test).unwrap();
        let cfg = StunetConfig { order: 2, hidden: vec![4], input_len: 3, horizon: 2, ..StunetConfig::default() };
        let mut m = Stunet::build(cfg, &g).unwrap();
        let before = m.params().clone();
        let t0 = TrainConfig { epochs: 0, ..TrainConfig::default() };
        train(&mut m, &tr, &va, &t0).unwrap();
        assert_eq!(*m.params(), before);

        let t = TrainConfig { epochs: 3, batch_size: 8, ..TrainConfig::default() };
        let log = train(&mut m, &tr, &va, &t).unwrap();
        assert!(log.converged());
        assert!(mean_loss(&m, &va).unwrap() < log.initial_val_loss);
    }
}
