//! Optimization loop, learning-rate schedule and evaluation.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::error::{Error, Result};
use crate::model::{argmax, batch_input, forward, loss, ActionCapsNet};
use crate::params::ParamSet;
use crate::skeleton::SkeletonTensor;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    /// 0-based epochs from which the rate is multiplied by `decay_factor`.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Seeds parameter initialization and batch shuffling.
    pub seed: u64,
    /// Record elapsed milliseconds in the metrics log; when off `wall_ms`
    /// is 0 and logs of identical runs are byte-identical.
    pub log_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.001,
            decay_epochs: vec![30, 50],
            decay_factor: 0.1,
            warmup_epochs: 10,
            total_epochs: 60,
            batch_size: 32,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            log_wall_time: true,
        }
    }
}

impl TrainConfig {
    /// The default schedule compressed to 30 epochs: warmup 5, decays at 15 and 25.
    pub fn scaled_30() -> Self {
        TrainConfig {
            decay_epochs: vec![15, 25],
            warmup_epochs: 5,
            total_epochs: 30,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs >= self.total_epochs {
            return Err(Error::contract(format!(
                "warmup_epochs {} must be below total_epochs {}",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::contract("batch_size must be at least 1"));
        }
        if !(self.lr0 > 0.0 && self.decay_factor > 0.0 && self.adam_eps > 0.0) {
            return Err(Error::contract("lr0, decay_factor and adam_eps must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::contract("Adam betas must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Learning rate of a 0-based epoch: linear warmup `lr0 (e + 1) / W` for
/// `e < W`, then `lr0 * decay_factor^n` with `n` the decay epochs `<= e`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.total_epochs {
        return Err(Error::contract(format!(
            "epoch {epoch} out of range 0..{}",
            cfg.total_epochs
        )));
    }
    // Written as lr0 / divisor so decimal schedules come out correctly rounded.
    if epoch < cfg.warmup_epochs {
        return Ok(cfg.lr0 / (cfg.warmup_epochs as f64 / (epoch + 1) as f64));
    }
    let n = cfg.decay_epochs.iter().filter(|&&d| d <= epoch).count();
    Ok(cfg.lr0 / (1.0 / cfg.decay_factor).powi(n as i32))
}

/// First and second moments of every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update of every parameter.
pub fn adam_step(params: &mut ParamSet, grads: &[Tensor], state: &mut AdamState, lr: f64, cfg: &TrainConfig) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::dim("adam_step", "params", params.len(), grads.len()));
    }
    state.step += 1;
    let c1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let c2 = 1.0 - cfg.beta2.powi(state.step as i32);
    for (k, p) in params.tensors_mut().iter_mut().enumerate() {
        let g = &grads[k];
        if g.shape() != p.shape() {
            return Err(Error::dim("adam_step", "shape", format!("{:?}", p.shape()), format!("{:?}", g.shape())));
        }
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        for (i, x) in p.data_mut().iter_mut().enumerate() {
            let gi = g.data()[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *x -= lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub wall_ms: u64,
}

/// Where [`train`] writes its artifacts.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub dir: PathBuf,
}

impl TrainOutput {
    pub const METRICS_FILE: &'static str = "metrics.jsonl";

    pub fn metrics_path(&self) -> PathBuf {
        self.dir.join(Self::METRICS_FILE)
    }

    pub fn checkpoint_path(&self, epoch: usize) -> PathBuf {
        self.dir.join(format!("epoch-{epoch:03}.ckpt"))
    }

    /// Copy of the most recent epoch checkpoint.
    pub fn last_checkpoint_path(&self) -> PathBuf {
        self.dir.join("last.ckpt")
    }
}

/// Loss and per-parameter gradients of one batch (in [`ParamSet`] order),
/// plus the number of correct predictions.
pub fn batch_gradients(net: &ActionCapsNet, batch: &[&SkeletonTensor]) -> Result<(f64, usize, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let input = batch_input(batch, &net.config)?;
    let vars = net.params.bind(&mut tape);
    let x = tape.leaf(input);
    let out = forward(&mut tape, &vars, x, &net.config)?;
    let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
    let l = loss(&mut tape, &out, &labels, &net.config)?;
    let value = tape.value(l).item();
    if !value.is_finite() {
        return Err(Error::contract(format!("training loss diverged ({value})")));
    }
    let scores = tape.value(out.scores);
    let correct = scores
        .data()
        .chunks(net.config.classes)
        .zip(&labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    let grads = tape.backward(l)?;
    let grads = vars.vars().iter().map(|&v| grads.wrt(v)).collect();
    Ok((value, correct, grads))
}

/// Trains `net` in place. Batches are drawn from a seeded shuffle each
/// epoch; after every epoch a checkpoint and a metrics line are written
/// when `output` is given.
pub fn train(
    net: &mut ActionCapsNet,
    cfg: &TrainConfig,
    data: &[SkeletonTensor],
    output: Option<&TrainOutput>,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    net.config.validate()?;
    if data.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    let mut log = match output {
        Some(out) => {
            std::fs::create_dir_all(&out.dir).map_err(|e| Error::io(&out.dir, e))?;
            let path = out.metrics_path();
            Some((BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?), path))
        }
        None => None,
    };
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdamState::new(&net.params);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.total_epochs);
    for epoch in 0..cfg.total_epochs {
        let lr = lr_schedule(epoch, cfg)?;
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&SkeletonTensor> = chunk.iter().map(|&i| &data[i]).collect();
            let (value, hits, grads) = batch_gradients(net, &batch)?;
            loss_sum += value * batch.len() as f64;
            correct += hits;
            adam_step(&mut net.params, &grads, &mut state, lr, cfg)?;
        }
        let metrics = EpochMetrics {
            epoch,
            lr,
            train_loss: loss_sum / data.len() as f64,
            train_acc: correct as f64 / data.len() as f64,
            wall_ms: if cfg.log_wall_time {
                started.elapsed().as_millis() as u64
            } else {
                0
            },
        };
        if let (Some(out), Some((writer, path))) = (output, log.as_mut()) {
            let line = serde_json::to_string(&metrics).map_err(|e| Error::Json {
                context: "metrics line".into(),
                source: e,
            })?;
            writeln!(writer, "{line}").and_then(|_| writer.flush()).map_err(|e| Error::io(path.as_path(), e))?;
            save_checkpoint(&out.checkpoint_path(epoch), net, cfg, epoch)?;
            save_checkpoint(&out.last_checkpoint_path(), net, cfg, epoch)?;
        }
        history.push(metrics);
    }
    Ok(history)
}

/// Accuracy summary; `confusion[true][predicted]` counts samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub top1: f64,
    /// `None` for classes without samples.
    pub per_class: Vec<Option<f64>>,
    pub confusion: Vec<Vec<usize>>,
}

/// Scores `[B, N]` against labels; ties go to the lower class index.
pub fn evaluate_scores(scores: &Tensor, labels: &[usize]) -> Result<Evaluation> {
    if scores.rank() != 2 || scores.shape()[0] != labels.len() {
        return Err(Error::dim("evaluate", "B", labels.len(), format!("{:?}", scores.shape())));
    }
    let classes = scores.shape()[1];
    let predictions: Vec<usize> = scores.data().chunks(classes.max(1)).map(argmax).collect();
    evaluate_predictions(&predictions, labels, classes)
}

pub fn evaluate_predictions(predictions: &[usize], labels: &[usize], classes: usize) -> Result<Evaluation> {
    if predictions.len() != labels.len() {
        return Err(Error::dim("evaluate", "B", labels.len(), predictions.len()));
    }
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        if p >= classes || y >= classes {
            return Err(Error::contract(format!("class index out of range 0..{classes}")));
        }
        confusion[y][p] += 1;
    }
    let hits: usize = (0..classes).map(|k| confusion[k][k]).sum();
    let per_class = confusion
        .iter()
        .enumerate()
        .map(|(k, row)| {
            let n: usize = row.iter().sum();
            (n > 0).then(|| row[k] as f64 / n as f64)
        })
        .collect();
    let top1 = if labels.is_empty() { 0.0 } else { hits as f64 / labels.len() as f64 };
    Ok(Evaluation {
        top1,
        per_class,
        confusion,
    })
}

/// Evaluates `net` on `data` in batches of `batch_size`.
pub fn evaluate(net: &ActionCapsNet, data: &[SkeletonTensor], batch_size: usize) -> Result<Evaluation> {
    let mut predictions = Vec::with_capacity(data.len());
    for chunk in data.chunks(batch_size.max(1)) {
        let batch: Vec<&SkeletonTensor> = chunk.iter().collect();
        predictions.extend(net.predict(&batch)?);
    }
    let labels: Vec<usize> = data.iter().map(|s| s.label).collect();
    evaluate_predictions(&predictions, &labels, net.config.classes)
}

