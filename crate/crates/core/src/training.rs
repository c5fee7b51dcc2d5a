//! AdamW, the warmup/linear-decay schedule, early stopping and the epoch
//! loop.

use std::fs;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Label;
use crate::embedding::mix_seed;
use crate::error::{Error, Result};
use crate::metrics::{confusion_matrix, prf1};
use crate::model::{argmax, ModelInput, VeracityModel};
use crate::nn::{Gradients, Mode, ParamSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_peak: f64,
    pub adam_eps: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub warmup_steps: usize,
    /// When set, overrides `warmup_steps` with this fraction of an epoch.
    pub warmup_epochs: Option<f64>,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_peak: 1e-4,
            adam_eps: 1e-8,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            batch_size: 16,
            warmup_steps: 438,
            warmup_epochs: None,
            max_epochs: 80,
            patience: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.lr_peak, self.adam_eps, self.beta1, self.beta2];
        if positive.iter().any(|v| !(*v > 0.0) || !v.is_finite()) || self.weight_decay < 0.0 {
            return Err(Error::Config(
                "lr_peak, adam_eps, beta1, beta2 must be positive; weight_decay non-negative".into(),
            ));
        }
        if self.beta1 >= 1.0 || self.beta2 >= 1.0 {
            return Err(Error::Config("AdamW betas must be below 1".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config(
                "batch_size, max_epochs and patience must be at least 1".into(),
            ));
        }
        if let Some(f) = self.warmup_epochs {
            if !(f >= 0.0) {
                return Err(Error::Config("warmup_epochs must be non-negative".into()));
            }
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> usize {
        n_train.div_ceil(self.batch_size)
    }

    pub fn resolved_warmup(&self, steps_per_epoch: usize) -> usize {
        match self.warmup_epochs {
            Some(f) => (f * steps_per_epoch as f64).round() as usize,
            None => self.warmup_steps,
        }
    }
}

/// Linear ramp from 0 to `lr_peak` over `warmup` steps, then linear decay
/// to 0 at `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, warmup: usize, lr_peak: f64) -> f64 {
    let step = step.min(total_steps);
    if warmup > 0 && step <= warmup {
        lr_peak * (step as f64 / warmup as f64)
    } else if total_steps == warmup {
        0.0
    } else {
        lr_peak * ((total_steps - step) as f64 / (total_steps - warmup) as f64)
    }
}

/// First and second moment estimates for AdamW.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(ps: &ParamSet) -> Self {
        let zeros = || ps.iter().map(|(_, t)| vec![0.0; t.len()]).collect::<Vec<_>>();
        AdamW {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update with decoupled weight decay:
    /// `p -= lr * wd * p + lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(&mut self, ps: &mut ParamSet, grads: &Gradients, lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (((p, g), m), v) in ps
            .tensors_mut()
            .zip(grads.tensors())
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *pi -= lr * cfg.weight_decay * *pi + lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Tracks the best validation loss; stops after `patience` consecutive
/// epochs without strict improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best_loss: f64,
    best_epoch: usize,
    bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best_loss: f64::INFINITY,
            best_epoch: 0,
            bad_epochs: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> StopDecision {
        if val_loss < self.best_loss {
            self.best_loss = val_loss;
            self.best_epoch = epoch;
            self.bad_epochs = 0;
            StopDecision::Improved
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best_loss
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub input: ModelInput,
    pub target: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_weighted_f1: f64,
    pub val_accuracy: f64,
    /// Eval-mode accuracy on the training set, when requested.
    pub train_accuracy: Option<f64>,
    pub improved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub config: TrainConfig,
    pub steps_per_epoch: usize,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub epochs: Vec<EpochRecord>,
    /// Learning rate applied at each optimizer step.
    pub lr_trace: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_epoch: usize,
    pub early_stopped: bool,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Worker threads for per-batch gradient computation; 1 is the
    /// bit-reproducible reference mode.
    pub threads: usize,
    pub eval_train_accuracy: bool,
    /// Writes `epoch_NNN.ckpt` on each improvement plus `best.ckpt`.
    pub checkpoint_dir: Option<PathBuf>,
    /// Called after each epoch is recorded.
    pub progress: Option<fn(&EpochRecord)>,
    /// Halt after this many epochs while keeping the schedule computed
    /// from `max_epochs`.
    pub epoch_limit: Option<usize>,
}

pub struct TrainOutcome {
    pub params: ParamSet,
    pub history: TrainHistory,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSummary {
    pub loss: f64,
    pub accuracy: f64,
    pub weighted_f1: f64,
}

/// Eval-mode loss, accuracy and weighted F1 over `examples`.
pub fn evaluate(model: &VeracityModel, ps: &ParamSet, examples: &[Example]) -> Result<EvalSummary> {
    if examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut loss = 0.0;
    let mut preds = Vec::with_capacity(examples.len());
    let mut golds = Vec::with_capacity(examples.len());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for ex in examples {
        let (logits, _) = model.forward_logits(ps, &ex.input, Mode::Eval, &mut rng)?;
        let probs = crate::nn::ops::softmax(logits.view());
        loss -= probs[ex.target].max(f64::MIN_POSITIVE).ln();
        preds.push(label(argmax(logits.view())));
        golds.push(label(ex.target));
    }
    let correct = preds.iter().zip(&golds).filter(|(p, g)| p == g).count();
    let metrics = prf1(&confusion_matrix(&preds, &golds)?);
    Ok(EvalSummary {
        loss: loss / examples.len() as f64,
        accuracy: correct as f64 / examples.len() as f64,
        weighted_f1: metrics.weighted_f1,
    })
}

fn label(i: usize) -> Label {
    Label::from_index(i).expect("class index in range")
}

fn dropout_rng(seed: u64, step: usize, position: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(&[seed, step as u64, position as u64]))
}

/// Mean loss and gradients for one minibatch. With one thread, items are
/// processed and summed in order; with more, contiguous chunks are summed
/// per worker and the chunk sums are added in chunk order.
fn batch_gradients(
    model: &VeracityModel,
    ps: &ParamSet,
    batch: &[(&ModelInput, usize)],
    seed: u64,
    step: usize,
    threads: usize,
) -> Result<(f64, Gradients)> {
    let n = batch.len();
    if threads <= 1 || n < 2 {
        let mut grads = ps.zero_grads();
        let out = model.batch_loss(ps, batch, Mode::Train, Some(&mut grads), n, |i| {
            dropout_rng(seed, step, i)
        })?;
        return Ok((out.loss_sum / n as f64, grads));
    }
    let chunk = n.div_ceil(threads);
    let parts: Vec<Result<(f64, Gradients)>> = batch
        .par_chunks(chunk)
        .enumerate()
        .map(|(c, items)| {
            let mut grads = ps.zero_grads();
            let out = model.batch_loss(ps, items, Mode::Train, Some(&mut grads), n, |i| {
                dropout_rng(seed, step, c * chunk + i)
            })?;
            Ok((out.loss_sum, grads))
        })
        .collect();
    let mut total = ps.zero_grads();
    let mut loss = 0.0;
    for part in parts {
        let (l, g) = part?;
        loss += l;
        total.accumulate(&g);
    }
    Ok((loss / n as f64, total))
}

/// Run the epoch loop and return the parameters of the epoch with the
/// lowest validation loss.
pub fn train(
    model: &VeracityModel,
    init: ParamSet,
    train_set: &[Example],
    val_set: &[Example],
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let steps_per_epoch = cfg.steps_per_epoch(train_set.len());
    let total_steps = cfg.max_epochs * steps_per_epoch;
    let warmup = cfg.resolved_warmup(steps_per_epoch);
    if warmup >= total_steps {
        return Err(Error::Config(format!(
            "warmup of {warmup} steps must be shorter than the {total_steps} total steps"
        )));
    }
    if let Some(dir) = &opts.checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut ps = init;
    let mut best = ps.clone();
    let mut opt = AdamW::new(&ps);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut history = TrainHistory {
        config: cfg.clone(),
        steps_per_epoch,
        total_steps,
        warmup_steps: warmup,
        epochs: Vec::new(),
        lr_trace: Vec::with_capacity(total_steps),
        best_epoch: 0,
        best_val_loss: f64::INFINITY,
        stopped_epoch: 0,
        early_stopped: false,
    };
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0usize;

    for epoch in 1..=cfg.max_epochs {
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 0x5eed, epoch as u64]));
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let batch: Vec<(&ModelInput, usize)> = chunk
                .iter()
                .map(|&i| (&train_set[i].input, train_set[i].target))
                .collect();
            let (loss, grads) = batch_gradients(model, &ps, &batch, cfg.seed, step, opts.threads)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            loss_sum += loss * chunk.len() as f64;
            let lr = lr_schedule(step, total_steps, warmup, cfg.lr_peak);
            history.lr_trace.push(lr);
            opt.step(&mut ps, &grads, lr, cfg);
        }
        if !ps.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, step });
        }

        let val = evaluate(model, &ps, val_set)?;
        if !val.loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, step });
        }
        let train_accuracy = if opts.eval_train_accuracy {
            Some(evaluate(model, &ps, train_set)?.accuracy)
        } else {
            None
        };
        let decision = stopper.observe(epoch, val.loss);
        let improved = decision == StopDecision::Improved;
        if improved {
            best = ps.clone();
            if let Some(dir) = &opts.checkpoint_dir {
                write_checkpoint(&ps, dir.join(format!("epoch_{epoch:03}.ckpt")))?;
                write_checkpoint(&ps, dir.join("best.ckpt"))?;
            }
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_loss: val.loss,
            val_weighted_f1: val.weighted_f1,
            val_accuracy: val.accuracy,
            train_accuracy,
            improved,
        });
        if let Some(report) = opts.progress {
            report(history.epochs.last().expect("just pushed"));
        }
        history.stopped_epoch = epoch;
        if decision == StopDecision::Stop {
            history.early_stopped = true;
            break;
        }
        if opts.epoch_limit == Some(epoch) {
            break;
        }
    }
    history.best_epoch = stopper.best_epoch();
    history.best_val_loss = stopper.best_loss();
    Ok(TrainOutcome {
        params: best,
        history,
    })
}

pub fn write_checkpoint(ps: &ParamSet, path: PathBuf) -> Result<()> {
    let mut buf = Vec::new();
    ps.write_checkpoint(&mut buf)?;
    fs::write(&path, buf).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn cfg() -> TrainConfig {
        TrainConfig::default()
    }

    #[test]
    fn schedule_anchor_points() {
        let c = cfg();
        let total = 5000;
        assert_eq!(lr_schedule(0, total, 438, c.lr_peak), 0.0);
        assert_eq!(lr_schedule(438, total, 438, c.lr_peak), 1e-4);
        assert_eq!(lr_schedule(219, total, 438, c.lr_peak), 5e-5);
        assert_eq!(lr_schedule(total, total, 438, c.lr_peak), 0.0);
        let mid = lr_schedule(438 + (total - 438) / 2, total, 438, c.lr_peak);
        assert!((mid - 5e-5).abs() < 1e-12);
    }

    fn scalar_params(p: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.add("p", Tensor::new(vec![1], vec![p]).unwrap());
        ps
    }

    fn grads_of(ps: &ParamSet, g: f64) -> Gradients {
        let mut grads = ps.zero_grads();
        grads.get_mut(ps.id("p").unwrap()).data_mut()[0] = g;
        grads
    }

    /// Straight-line reference for one AdamW step on a scalar.
    fn reference_step(p: f64, g: f64, lr: f64, wd: f64, c: &TrainConfig) -> f64 {
        let m = (1.0 - c.beta1) * g;
        let v = (1.0 - c.beta2) * g * g;
        let m_hat = m / (1.0 - c.beta1);
        let v_hat = v / (1.0 - c.beta2);
        p - lr * wd * p - lr * m_hat / (v_hat.sqrt() + c.adam_eps)
    }

    #[test]
    fn adamw_first_step_unit_gradient() {
        let c = TrainConfig {
            weight_decay: 0.0,
            ..cfg()
        };
        let mut ps = scalar_params(1.0);
        let grads = grads_of(&ps, 1.0);
        let mut opt = AdamW::new(&ps);
        opt.step(&mut ps, &grads, 1e-4, &c);
        let p = ps.by_name("p").unwrap().data()[0];
        assert!((p - reference_step(1.0, 1.0, 1e-4, 0.0, &c)).abs() < 1e-15);
        assert!(((1.0 - p) - 1e-4).abs() < 1e-10);
    }

    #[test]
    fn adamw_zero_gradient_cases() {
        let c = TrainConfig {
            weight_decay: 0.0,
            ..cfg()
        };
        let mut ps = scalar_params(1.0);
        let grads = grads_of(&ps, 0.0);
        AdamW::new(&ps).step(&mut ps, &grads, 1e-4, &c);
        assert_eq!(ps.by_name("p").unwrap().data()[0], 1.0);

        let c = TrainConfig {
            weight_decay: 0.01,
            ..cfg()
        };
        let mut ps = scalar_params(1.0);
        AdamW::new(&ps).step(&mut ps, &grads, 1e-4, &c);
        assert!((ps.by_name("p").unwrap().data()[0] - (1.0 - 1e-6)).abs() < 1e-15);
    }

    #[test]
    fn adamw_zero_lr_is_noop() {
        let mut ps = scalar_params(0.7);
        let grads = grads_of(&ps, 3.0);
        AdamW::new(&ps).step(&mut ps, &grads, 0.0, &cfg());
        assert_eq!(ps.by_name("p").unwrap().data()[0], 0.7);
    }

    #[test]
    fn early_stopping_rule() {
        let losses = [1.0, 0.9, 0.95, 0.96, 0.97, 0.98, 0.99];
        let mut es = EarlyStopping::new(5);
        let mut stopped = None;
        for (i, &l) in losses.iter().enumerate() {
            if es.observe(i + 1, l) == StopDecision::Stop {
                stopped = Some(i + 1);
                break;
            }
        }
        assert_eq!(stopped, Some(7));
        assert_eq!(es.best_epoch(), 2);
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        assert!(TrainConfig { patience: 0, ..cfg() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..cfg() }.validate().is_err());
        assert!(TrainConfig { lr_peak: -1.0, ..cfg() }.validate().is_err());
    }

    #[test]
    fn warmup_fraction() {
        let c = TrainConfig {
            warmup_epochs: Some(0.2),
            ..cfg()
        };
        assert_eq!(c.steps_per_epoch(200), 13);
        assert_eq!(c.resolved_warmup(13), 3);
        assert_eq!(cfg().resolved_warmup(13), 438);
    }

    fn tiny_examples(cfg: &crate::model::ModelConfig, n: usize, seed: u64) -> Vec<Example> {
        (0..n)
            .map(|i| Example {
                id: format!("e{i}"),
                input: crate::model::tests::random_input(cfg, 1 + i % cfg.pad_len, seed + i as u64),
                target: i % 5,
            })
            .collect()
    }

    #[test]
    fn parallel_batch_matches_reference() {
        let mc = crate::model::tests::tiny_config();
        let (model, ps) = VeracityModel::new(mc.clone(), 4).unwrap();
        let data = tiny_examples(&mc, 13, 100);
        let batch: Vec<(&ModelInput, usize)> = data.iter().map(|e| (&e.input, e.target)).collect();
        let (l1, g1) = batch_gradients(&model, &ps, &batch, 9, 3, 1).unwrap();
        for threads in [2, 3, 8] {
            let (lp, gp) = batch_gradients(&model, &ps, &batch, 9, 3, threads).unwrap();
            assert!(((lp - l1) / l1).abs() <= 1e-5, "{lp} vs {l1}");
            for (a, b) in gp.flatten().iter().zip(g1.flatten()) {
                assert!((a - b).abs() <= 1e-9 + 1e-5 * b.abs());
            }
        }
    }

    #[test]
    fn parallel_training_tracks_reference() {
        let mc = crate::model::tests::tiny_config();
        let (model, ps) = VeracityModel::new(mc.clone(), 4).unwrap();
        let train_set = tiny_examples(&mc, 20, 200);
        let val_set = tiny_examples(&mc, 6, 300);
        let tc = TrainConfig { batch_size: 8, warmup_steps: 2, max_epochs: 3, ..cfg() };
        let run = |threads| {
            let opts = TrainOptions { threads, ..TrainOptions::default() };
            train(&model, ps.clone(), &train_set, &val_set, &tc, &opts).unwrap().history
        };
        let (a, b) = (run(1), run(4));
        for (x, y) in a.epochs.iter().zip(&b.epochs) {
            assert!(((x.train_loss - y.train_loss) / x.train_loss).abs() <= 1e-5);
            assert!(((x.val_loss - y.val_loss) / x.val_loss).abs() <= 1e-5);
        }
    }

    #[test]
    fn empty_sets_are_rejected() {
        let mc = crate::model::tests::tiny_config();
        let (model, ps) = VeracityModel::new(mc.clone(), 4).unwrap();
        let some = tiny_examples(&mc, 3, 1);
        let opts = TrainOptions::default();
        assert!(matches!(train(&model, ps.clone(), &[], &some, &cfg(), &opts), Err(Error::EmptyDataset)));
        assert!(matches!(train(&model, ps, &some, &[], &cfg(), &opts), Err(Error::EmptyDataset)));
    }
}
