//! MAP training: AdamW with decoupled weight decay over the trainable
//! parameters, warmup + linear-decay learning rate, deterministic shuffling,
//! per-epoch theta snapshots.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, SeededRng};

use super::{flatten, loss_nll, Gradients, Layer, LayerGrads, Network, ThetaVector};

/// Which parameters the MAP phase optimizes. The Bayesian posterior always
/// covers only the cores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    /// Cores and the classification head.
    #[default]
    CoresOnly,
    /// Cores, head, and the projection factors `A`, `B`.
    All,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Fraction of total steps spent ramping the learning rate up.
    pub warmup_frac: f64,
    pub seed: u64,
    /// LoRA scaling numerator; each adapted layer uses `alpha / rank`.
    pub alpha: f64,
    /// Deterministic subsample of the training split, in (0, 1].
    pub train_fraction: f64,
    pub regime: Regime,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 32,
            learning_rate: 1e-2,
            weight_decay: 1e-4,
            warmup_frac: 0.1,
            seed: 0,
            alpha: 16.0,
            train_fraction: 1.0,
            regime: Regime::CoresOnly,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        if self.learning_rate < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::config("learning_rate and weight_decay must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::config("warmup_frac must be in [0, 1]"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::config("train_fraction must be in (0, 1]"));
        }
        if self.alpha <= 0.0 {
            return Err(Error::config("alpha must be positive"));
        }
        Ok(())
    }
}

/// Learning-rate schedule over global steps.
#[derive(Debug, Clone, Copy)]
pub enum LrSchedule {
    /// Linear 0 -> lr over the warmup fraction of steps, then linear -> 0.
    WarmupLinear { lr: f64, warmup_frac: f64 },
    Constant(f64),
}

impl LrSchedule {
    fn at(&self, step: usize, total: usize) -> f64 {
        match *self {
            LrSchedule::Constant(lr) => lr,
            LrSchedule::WarmupLinear { lr, warmup_frac } => {
                let warmup = ((total as f64 * warmup_frac).ceil() as usize).min(total);
                if step < warmup {
                    lr * (step + 1) as f64 / warmup as f64
                } else if total == warmup {
                    lr
                } else {
                    lr * (1.0 - (step - warmup) as f64 / (total - warmup) as f64)
                }
            }
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

pub struct TrainReport {
    /// Theta snapshot at the end of each epoch.
    pub trajectory: Vec<ThetaVector>,
    pub epochs: Vec<EpochMetrics>,
    /// Row indices of the (possibly subsampled) training set actually used.
    pub train_rows: Vec<usize>,
    /// Full network clones captured after the requested epochs (1-based).
    pub checkpoints: Vec<(usize, Network)>,
}

const SUBSAMPLE_SALT: u64 = 0x5AB5_AB5A_B5AB_5AB5;

/// Deterministic subsample: seeded shuffle, keep ceil(fraction * n), restore
/// original order.
pub fn subsample_indices(n: usize, fraction: f64, seed: u64) -> Vec<usize> {
    let keep = ((fraction * n as f64).ceil() as usize).clamp(1, n);
    if keep == n {
        return (0..n).collect();
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = SeededRng::new(seed ^ SUBSAMPLE_SALT);
    rng.shuffle(&mut idx);
    idx.truncate(keep);
    idx.sort_unstable();
    idx
}

/// MAP training loop. Mutates `net` in place and reports the trajectory.
pub fn train_map(net: &mut Network, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    train_with_schedule(
        net,
        data,
        cfg,
        LrSchedule::WarmupLinear {
            lr: cfg.learning_rate,
            warmup_frac: cfg.warmup_frac,
        },
        cfg.epochs,
        &[],
    )
}

/// Shared loop used by MAP training and the constant-rate SWAG phase.
/// `snapshot_epochs` asks for full network clones after those epochs
/// (1-based), e.g. the early-stopping checkpoint consumed by Laplace.
pub fn train_with_schedule(
    net: &mut Network,
    data: &Dataset,
    cfg: &TrainConfig,
    schedule: LrSchedule,
    epochs: usize,
    snapshot_epochs: &[usize],
) -> Result<TrainReport> {
    net.validate()?;
    let train_rows = subsample_indices(data.train.x.rows(), cfg.train_fraction, cfg.seed);
    let x_train = data.train.x.select_rows(&train_rows);
    let y_train: Vec<usize> = train_rows.iter().map(|&i| data.train.y[i]).collect();
    let n = x_train.rows();

    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = (batches_per_epoch * epochs).max(1);
    let mut opt = AdamW::new(param_count(net), cfg.weight_decay);
    let mut shuffle_rng = SeededRng::new(cfg.seed);

    let mut trajectory = Vec::with_capacity(epochs);
    let mut epoch_metrics = Vec::with_capacity(epochs);
    let mut checkpoints = Vec::new();
    let mut step = 0usize;

    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..n).collect();
        shuffle_rng.shuffle(&mut order);

        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let xb = x_train.select_rows(chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| y_train[i]).collect();
            let cache = net.forward_cached(&xb)?;
            let loss = loss_nll(cache.logits(), &yb)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, step });
            }
            loss_sum += loss * yb.len() as f64;
            let grads = net.backward(&cache, &yb)?;
            let lr = schedule.at(step, total_steps);
            opt.step(net, &grads, lr);
            step += 1;
        }

        let (val_loss, val_accuracy) = match &data.val {
            Some(split) => {
                let logits = net.forward(&split.x)?;
                let loss = loss_nll(&logits, &split.y)?;
                let acc = argmax_accuracy(&logits, &split.y);
                (Some(loss), Some(acc))
            }
            None => (None, None),
        };
        trajectory.push(flatten(net));
        epoch_metrics.push(EpochMetrics {
            epoch,
            train_loss: loss_sum / n as f64,
            val_loss,
            val_accuracy,
        });
        if snapshot_epochs.contains(&(epoch + 1)) {
            checkpoints.push((epoch + 1, net.clone()));
        }
    }

    Ok(TrainReport {
        trajectory,
        epochs: epoch_metrics,
        train_rows,
        checkpoints,
    })
}

fn argmax_accuracy(logits: &Matrix, labels: &[usize]) -> f64 {
    let mut correct = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row(i);
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    correct as f64 / labels.len().max(1) as f64
}

/// Flat count of trainable parameters: adapted cores (+ A/B when those
/// train), plain trainable weight + bias, in layer order.
pub fn param_count(net: &Network) -> usize {
    let mut count = 0;
    for layer in &net.layers {
        match layer {
            Layer::Adapted(l) => {
                count += l.rank() * l.rank();
                if l.trainable_ab {
                    count += l.pair.a.rows() * l.rank() + l.rank() * l.pair.b.cols();
                }
            }
            Layer::Plain(l) if l.trainable => {
                count += l.weight.rows() * l.weight.cols() + l.bias.len();
            }
            _ => {}
        }
    }
    count
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// AdamW over the flat trainable-parameter vector. Decoupled weight decay is
/// applied to weight matrices but not biases.
struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    weight_decay: f64,
}

impl AdamW {
    fn new(dim: usize, weight_decay: f64) -> Self {
        Self {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
            weight_decay,
        }
    }

    fn step(&mut self, net: &mut Network, grads: &Gradients, lr: f64) {
        self.t += 1;
        let bias1 = 1.0 - BETA1.powi(self.t as i32);
        let bias2 = 1.0 - BETA2.powi(self.t as i32);
        let wd = self.weight_decay;
        let mut cursor = 0usize;

        let mut slot = |m: &mut Vec<f64>, v: &mut Vec<f64>, param: &mut f64, grad: f64, decay: bool| {
            let mi = &mut m[cursor];
            let vi = &mut v[cursor];
            *mi = BETA1 * *mi + (1.0 - BETA1) * grad;
            *vi = BETA2 * *vi + (1.0 - BETA2) * grad * grad;
            if decay {
                *param -= lr * wd * *param;
            }
            *param -= lr * (*mi / bias1) / ((*vi / bias2).sqrt() + EPS);
            cursor += 1;
        };

        for (layer, grad) in net.layers.iter_mut().zip(&grads.layers) {
            match (layer, grad) {
                (Layer::Adapted(l), LayerGrads::Adapted { core, a, b }) => {
                    for (p, g) in l.core.as_mut_slice().iter_mut().zip(core.as_slice()) {
                        slot(&mut self.m, &mut self.v, p, *g, true);
                    }
                    if let Some(a_grad) = a {
                        for (p, g) in l.pair.a.as_mut_slice().iter_mut().zip(a_grad.as_slice()) {
                            slot(&mut self.m, &mut self.v, p, *g, true);
                        }
                    }
                    if let Some(b_grad) = b {
                        for (p, g) in l.pair.b.as_mut_slice().iter_mut().zip(b_grad.as_slice()) {
                            slot(&mut self.m, &mut self.v, p, *g, true);
                        }
                    }
                }
                (Layer::Plain(l), LayerGrads::Plain { weight, bias }) if l.trainable => {
                    for (p, g) in l.weight.as_mut_slice().iter_mut().zip(weight.as_slice()) {
                        slot(&mut self.m, &mut self.v, p, *g, true);
                    }
                    for (p, g) in l.bias.iter_mut().zip(bias) {
                        slot(&mut self.m, &mut self.v, p, *g, false);
                    }
                }
                _ => {}
            }
        }
        debug_assert_eq!(cursor, self.m.len(), "optimizer slot count drifted");
    }
}
