//! Optimization: Adam with a cosine learning-rate schedule, mean-teacher
//! averaging, pseudo-labeling and evaluation.

mod loops;

pub use loops::{train_dantr, train_supervised, DanTrOutcome, DanTrTrainConfig, StepTrace, SupervisedOutcome};

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Provenance, Role, TimeSeriesSample};
use crate::error::{Error, Result};
use crate::net::Network;
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub n_steps: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    /// Cosine decay floor reached at the last step.
    pub lr_min: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Keep an exponential-moving-average teacher.
    pub mean_teacher: bool,
    pub ema_alpha: f64,
    /// Use `min(alpha, 1 - 1/(t + 1))` at optimizer step `t` so the teacher
    /// is not dominated by the random initialization in short runs.
    pub ema_warmup: bool,
    pub consistency_weight_max: f64,
    pub consistency_ramp_fraction: f64,
    /// Gaussian input noise for the student, normalized units.
    pub input_noise_std: f64,
    /// Per-sample weight of real-labeled samples relative to pseudo-labeled ones.
    pub labeled_weight: f64,
    pub eval_interval: usize,
    /// Pseudo-label with the teacher when one is kept, else the student.
    pub teacher_labels: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_steps: 1000,
            batch_size: 32,
            base_lr: 1e-3,
            lr_min: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            mean_teacher: true,
            ema_alpha: 0.999,
            ema_warmup: true,
            consistency_weight_max: 1.0,
            consistency_ramp_fraction: 0.3,
            input_noise_std: 0.01,
            labeled_weight: 1.0,
            eval_interval: 100,
            teacher_labels: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_steps == 0 || self.batch_size == 0 {
            return bad(format!(
                "n_steps and batch_size must be >= 1 (got {}, {})",
                self.n_steps, self.batch_size
            ));
        }
        if !(self.base_lr > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.base_lr) {
            return bad(format!(
                "learning rates must satisfy 0 <= lr_min <= base_lr, base_lr > 0 (got {}, {})",
                self.lr_min, self.base_lr
            ));
        }
        if !(0.0..1.0).contains(&self.ema_alpha) {
            return bad(format!("ema_alpha {} must lie in [0, 1)", self.ema_alpha));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || self.adam_eps <= 0.0 {
            return bad("Adam needs betas in [0, 1) and eps > 0".into());
        }
        if self.consistency_weight_max < 0.0 || self.input_noise_std < 0.0 || self.labeled_weight <= 0.0 {
            return bad("consistency weight and noise must be >= 0, labeled_weight > 0".into());
        }
        if !(self.consistency_ramp_fraction > 0.0 && self.consistency_ramp_fraction <= 1.0) {
            return bad(format!(
                "consistency_ramp_fraction {} must lie in (0, 1]",
                self.consistency_ramp_fraction
            ));
        }
        if self.eval_interval == 0 {
            return bad("eval_interval must be >= 1".into());
        }
        Ok(())
    }

    /// Learning rate used at 0-based step `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        cosine_lr(step, self.n_steps, self.base_lr, self.lr_min)
    }

    /// Consistency weight, linear from 0 to the maximum over the ramp.
    pub fn consistency_at(&self, step: usize) -> f64 {
        let ramp = self.consistency_ramp_fraction * self.n_steps as f64;
        self.consistency_weight_max * (step as f64 / ramp).min(1.0)
    }

    /// Teacher decay applied after optimizer step `t` (1-based).
    pub fn ema_alpha_at(&self, t: usize) -> f64 {
        if self.ema_warmup {
            self.ema_alpha.min(1.0 - 1.0 / (t as f64 + 1.0))
        } else {
            self.ema_alpha
        }
    }
}

/// `lr_min + (base - lr_min) (1 + cos(pi step / n)) / 2`.
pub fn cosine_lr(step: usize, n: usize, base: f64, lr_min: f64) -> f64 {
    let frac = step.min(n) as f64 / n.max(1) as f64;
    lr_min + 0.5 * (base - lr_min) * (1.0 + (PI * frac).cos())
}

/// Adam moments for one flat parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(n: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn from_config(n: usize, cfg: &TrainConfig) -> Self {
        Self::new(n, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::LengthMismatch {
                what: "Adam state".into(),
                expected: self.m.len(),
                got: params.len().min(grads.len()),
            });
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// `teacher <- alpha * teacher + (1 - alpha) * student`, entrywise.
pub fn ema_update(teacher: &mut [f64], student: &[f64], alpha: f64) -> Result<()> {
    if teacher.len() != student.len() {
        return Err(Error::LengthMismatch {
            what: "teacher vs student parameters".into(),
            expected: student.len(),
            got: teacher.len(),
        });
    }
    for (t, s) in teacher.iter_mut().zip(student) {
        *t = alpha * *t + (1.0 - alpha) * s;
    }
    Ok(())
}

/// Mean over samples of the per-sample mean squared error.
pub fn evaluate_mse(net: &Network, dataset: &Dataset) -> Result<f64> {
    let per = per_sample_mse(net, dataset)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

pub const PREDICT_BATCH: usize = 128;

/// Mean squared error of each sample, in dataset order.
pub fn per_sample_mse(net: &Network, dataset: &Dataset) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset(format!("cannot evaluate on empty {:?} set", dataset.role)));
    }
    let inputs: Vec<&[f64]> = dataset.samples().iter().map(|s| s.input.as_slice()).collect();
    let preds = net.predict_series(&inputs, PREDICT_BATCH)?;
    dataset
        .samples()
        .iter()
        .zip(preds)
        .map(|(s, p)| {
            let y = s.output.as_ref().ok_or_else(|| Error::InvalidSample {
                id: s.id.clone(),
                reason: "evaluation needs labels".into(),
            })?;
            Ok(y.iter().zip(&p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64)
        })
        .collect()
}

/// Labels `count` pool samples drawn uniformly without replacement.
pub fn pseudo_label(net: &Network, pool: &Dataset, count: usize, seed: u64) -> Result<Dataset> {
    if count > pool.len() {
        return Err(Error::Config(format!(
            "cannot draw {count} pseudo-labels from a pool of {}",
            pool.len()
        )));
    }
    let mut rng = seed::rng(seed);
    let picks = rand::seq::index::sample(&mut rng, pool.len(), count).into_vec();
    let chosen: Vec<&TimeSeriesSample> = picks.iter().map(|&i| &pool.samples()[i]).collect();
    let inputs: Vec<&[f64]> = chosen.iter().map(|s| s.input.as_slice()).collect();
    let preds = net.predict_series(&inputs, PREDICT_BATCH)?;
    let samples = chosen
        .into_iter()
        .zip(preds)
        .map(|(s, y)| TimeSeriesSample::pseudo_labeled(s.id.clone(), s.input.clone(), y))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset::new(Role::PseudoSource, pool.dt, samples)?.with_scale(pool.scale, pool.norm))
}

/// Endless shuffled index stream over `n` items, reshuffled every pass.
pub(crate) struct Batcher {
    order: Vec<usize>,
    pos: usize,
}

impl Batcher {
    pub(crate) fn new(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Self { order, pos: 0 }
    }

    /// Next `size` indices (capped at `n`), distinct within the batch.
    pub(crate) fn next(&mut self, size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let size = size.min(self.order.len());
        if self.pos + size > self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + size].to_vec();
        self.pos += size;
        out
    }
}

/// One evaluation-interval record of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    /// Mean training loss since the previous record.
    pub train_loss: f64,
    pub val_mse: f64,
    #[serde(default)]
    pub teacher_val_mse: Option<f64>,
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub mmd: Option<f64>,
    pub lr: f64,
    pub wall_time_s: f64,
}

/// Per-sample weights for a batch: real labels weigh `labeled_weight`.
pub(crate) fn sample_weight(s: &TimeSeriesSample, cfg: &TrainConfig) -> f64 {
    if s.provenance == Provenance::RealLabel {
        cfg.labeled_weight
    } else {
        1.0
    }
}
