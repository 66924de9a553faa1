use std::time::Instant;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ema_update, evaluate_mse, sample_weight, Adam, Batcher, MetricRecord, TrainConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mmd::{mmd_weight, MkMmdConfig};
use crate::net::{batch_matrix, forward_surrogate, from_sequence, to_sequence, Block, DanTr, DanTrParams, GradOptions, Network};
use crate::seed;

/// Trained student, optional teacher, and the metrics stream.
#[derive(Clone, Debug)]
pub struct SupervisedOutcome {
    pub student: Network,
    pub teacher: Option<Network>,
    pub student_val_mse: f64,
    pub teacher_val_mse: Option<f64>,
    pub history: Vec<MetricRecord>,
}

impl SupervisedOutcome {
    /// The model that labels data and represents this run: the teacher when
    /// one is kept and `teacher_labels` is set, else the student.
    pub fn labeler(&self, cfg: &TrainConfig) -> (&Network, f64) {
        match (&self.teacher, self.teacher_val_mse) {
            (Some(t), Some(v)) if cfg.teacher_labels => (t, v),
            _ => (&self.student, self.student_val_mse),
        }
    }
}

fn check_training_set(train: &Dataset, val: &Dataset) -> Result<usize> {
    if train.is_empty() {
        return Err(Error::EmptyDataset("training set is empty".into()));
    }
    if val.is_empty() {
        return Err(Error::EmptyDataset("validation set is empty".into()));
    }
    if let Some(s) = train.samples().iter().chain(val.samples()).find(|s| !s.is_labeled()) {
        return Err(Error::InvalidSample {
            id: s.id.clone(),
            reason: "training and validation samples need labels".into(),
        });
    }
    if train.scale != val.scale || train.norm != val.norm {
        return Err(Error::InvalidDataset(
            "training and validation sets are on different scales".into(),
        ));
    }
    train
        .uniform_length()
        .ok_or_else(|| Error::InvalidDataset("training sequences must share one length".into()))
}

fn gather(ds: &Dataset, idx: &[usize]) -> Result<(Array2<f64>, Array2<f64>)> {
    let s = ds.samples();
    let x: Vec<&[f64]> = idx.iter().map(|&i| s[i].input.as_slice()).collect();
    let y: Vec<&[f64]> = idx
        .iter()
        .map(|&i| s[i].output.as_deref().unwrap_or(&[]))
        .collect();
    Ok((batch_matrix(&x)?, batch_matrix(&y)?))
}

fn add_noise(x: &Array2<f64>, noise: &Option<Normal<f64>>, rng: &mut ChaCha8Rng) -> Array2<f64> {
    match noise {
        Some(n) => x.mapv(|v| v + n.sample(rng)),
        None => x.clone(),
    }
}

fn noise_dist(std: f64) -> Option<Normal<f64>> {
    (std > 0.0).then(|| Normal::new(0.0, std).expect("std validated positive"))
}

fn diverged(step: usize, what: &str, value: f64) -> Error {
    Error::Diverged {
        step,
        detail: format!("{what} became {value}"),
    }
}

/// Adds `cw * mean((pred - reference)^2)` to a loss and its gradient to `grad`.
fn consistency_term(pred: &Array2<f64>, reference: &Array2<f64>, cw: f64, grad: &mut Array2<f64>) -> f64 {
    let n = pred.len() as f64;
    let diff = pred - reference;
    grad.scaled_add(2.0 * cw / n, &diff);
    cw * diff.iter().map(|d| d * d).sum::<f64>() / n
}

/// Minibatch MSE training with an optional mean teacher.
///
/// Each step feeds the student a noised batch; the student output is
/// regressed on the labels and, with a teacher, pulled toward the teacher's
/// output on the clean batch with a linearly ramped weight. The teacher
/// tracks the student by exponential moving average after every step.
pub fn train_supervised(
    block: &Block,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    init: Option<Vec<f64>>,
) -> Result<SupervisedOutcome> {
    cfg.validate()?;
    check_training_set(train, val)?;
    let mut params = match init {
        Some(p) => Network::new(block.clone(), p)?.params,
        None => block.init_seeded(seed::derive_seed(&[cfg.seed, 0])),
    };
    let mut rng = seed::rng(seed::derive_seed(&[cfg.seed, 1]));
    let mut teacher = cfg.mean_teacher.then(|| params.clone());
    let mut adam = Adam::from_config(params.len(), cfg);
    let noise = noise_dist(cfg.input_noise_std);
    let mut batcher = Batcher::new(train.len(), &mut rng);
    let weights: Vec<f64> = train.samples().iter().map(|s| sample_weight(s, cfg)).collect();
    let n_layers = block.layers().len();

    let start = Instant::now();
    let mut history = Vec::new();
    let (mut loss_acc, mut loss_n) = (0.0, 0usize);
    let mut grads = vec![0.0; params.len()];
    for step in 0..cfg.n_steps {
        let idx = batcher.next(cfg.batch_size, &mut rng);
        let (x, y) = gather(train, &idx)?;
        let xn = add_noise(&x, &noise, &mut rng);
        let tape = block.forward_tape(&params, to_sequence(xn.view()))?;
        let pred = from_sequence(tape.output());

        let t_len = y.ncols() as f64;
        let w_sum: f64 = idx.iter().map(|&i| weights[i]).sum();
        let mut grad = Array2::<f64>::zeros(pred.raw_dim());
        let mut loss = 0.0;
        for (r, &i) in idx.iter().enumerate() {
            let w = weights[i] / w_sum;
            for t in 0..y.ncols() {
                let d = pred[[r, t]] - y[[r, t]];
                loss += w * d * d / t_len;
                grad[[r, t]] = 2.0 * w * d / t_len;
            }
        }
        let cw = if teacher.is_some() { cfg.consistency_at(step) } else { 0.0 };
        if let (Some(tp), true) = (&teacher, cw > 0.0) {
            let reference = forward_surrogate(block, tp, x.view())?;
            loss += consistency_term(&pred, &reference, cw, &mut grad);
        }
        if !loss.is_finite() {
            return Err(diverged(step, "training loss", loss));
        }

        grads.iter_mut().for_each(|g| *g = 0.0);
        let mut seeds = vec![None; n_layers];
        seeds[n_layers - 1] = Some(to_sequence(grad.view()));
        block.backward(&params, &tape, seeds, &mut grads, false)?;
        adam.step(&mut params, &grads, cfg.lr_at(step))?;
        if let Some(tp) = teacher.as_mut() {
            ema_update(tp, &params, cfg.ema_alpha_at(step + 1))?;
        }

        loss_acc += loss;
        loss_n += 1;
        if (step + 1) % cfg.eval_interval == 0 || step + 1 == cfg.n_steps {
            let student = Network::new(block.clone(), params.clone())?;
            let val_mse = evaluate_mse(&student, val)?;
            let teacher_val_mse = match &teacher {
                Some(tp) => Some(evaluate_mse(&Network::new(block.clone(), tp.clone())?, val)?),
                None => None,
            };
            history.push(MetricRecord {
                step: step + 1,
                train_loss: loss_acc / loss_n as f64,
                val_mse,
                teacher_val_mse,
                lambda: None,
                mmd: None,
                lr: cfg.lr_at(step),
                wall_time_s: start.elapsed().as_secs_f64(),
            });
            log::debug!("step {} train {:.3e} val {:.3e}", step + 1, loss_acc / loss_n as f64, val_mse);
            (loss_acc, loss_n) = (0.0, 0);
        }
    }
    let last = history.last().expect("at least one record");
    Ok(SupervisedOutcome {
        student_val_mse: last.val_mse,
        teacher_val_mse: last.teacher_val_mse,
        student: Network::new(block.clone(), params)?,
        teacher: match teacher {
            Some(tp) => Some(Network::new(block.clone(), tp)?),
            None => None,
        },
        history,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DanTrTrainConfig {
    pub mmd: MkMmdConfig,
    /// With `false` the adaptation branch is skipped and lambda is 0.
    pub mmd_enabled: bool,
    pub detach_adaptation_mmd: bool,
    /// Target minibatch size; capped at `|D_t|`.
    pub target_batch_size: usize,
    /// Apply mean-teacher consistency during transfer training as well.
    pub consistency: bool,
    /// Start every branch from the latest chosen surrogate when the layer
    /// stacks match (framework runs only); otherwise a fresh initialization.
    pub warm_start: bool,
}

impl Default for DanTrTrainConfig {
    fn default() -> Self {
        Self {
            mmd: MkMmdConfig::default(),
            mmd_enabled: true,
            detach_adaptation_mmd: false,
            target_batch_size: 16,
            consistency: false,
            warm_start: true,
        }
    }
}

/// Loss terms at one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: usize,
    pub reg: f64,
    pub mmd: f64,
    pub lambda: f64,
}

#[derive(Clone, Debug)]
pub struct DanTrOutcome {
    pub params: DanTrParams,
    pub teacher: Option<DanTrParams>,
    /// Validation MSE of the target branch.
    pub target_val_mse: f64,
    pub teacher_val_mse: Option<f64>,
    pub history: Vec<MetricRecord>,
    pub trace: Vec<StepTrace>,
}

impl DanTrOutcome {
    /// Target-branch network that represents this run (teacher when kept and
    /// `teacher_labels` is set).
    pub fn labeler(&self, net: &DanTr, cfg: &TrainConfig) -> Result<(Network, f64)> {
        match (&self.teacher, self.teacher_val_mse) {
            (Some(t), Some(v)) if cfg.teacher_labels => Ok((net.target_network(t)?, v)),
            _ => Ok((net.target_network(&self.params)?, self.target_val_mse)),
        }
    }
}

fn ema_dantr(teacher: &mut DanTrParams, student: &DanTrParams, alpha: f64) -> Result<()> {
    for (t, s) in teacher.parts_mut().into_iter().zip(student.parts()) {
        ema_update(t, s, alpha)?;
    }
    Ok(())
}

/// Transfer training between a pseudo-labeled source set and the real target set.
///
/// Every step draws a source minibatch and a target minibatch (the target set
/// is recycled with reshuffling), evaluates all three branches and minimizes
/// `reg + lambda * mmd` with `lambda = mmd_weight(step, N)`.
pub fn train_dantr(
    net: &DanTr,
    source: &Dataset,
    target: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    dcfg: &DanTrTrainConfig,
    init: Option<DanTrParams>,
) -> Result<DanTrOutcome> {
    cfg.validate()?;
    dcfg.mmd.validate()?;
    if dcfg.mmd.layer_range.1 >= net.head_block().layers().len() {
        return Err(Error::Config(format!(
            "MMD layer range {:?} exceeds the {} head layers",
            dcfg.mmd.layer_range,
            net.head_block().layers().len()
        )));
    }
    check_training_set(source, val)?;
    check_training_set(target, val)?;
    if source.uniform_length() != target.uniform_length() {
        return Err(Error::InvalidDataset("source and target sequences differ in length".into()));
    }
    let mut params = match init {
        Some(p) => {
            net.check(&p)?;
            p
        }
        None => net.init(seed::derive_seed(&[cfg.seed, 0])),
    };
    let mut rng = seed::rng(seed::derive_seed(&[cfg.seed, 1]));
    let use_teacher = dcfg.consistency && cfg.mean_teacher;
    let mut teacher = use_teacher.then(|| params.clone());
    let mut adams: Vec<Adam> = params.parts().iter().map(|p| Adam::from_config(p.len(), cfg)).collect();
    let noise = noise_dist(if use_teacher { cfg.input_noise_std } else { 0.0 });
    let mut src_batches = Batcher::new(source.len(), &mut rng);
    let mut tgt_batches = Batcher::new(target.len(), &mut rng);
    let target_batch = dcfg.target_batch_size.max(1).min(target.len());

    let start = Instant::now();
    let (mut history, mut trace) = (Vec::new(), Vec::with_capacity(cfg.n_steps));
    let (mut loss_acc, mut mmd_acc, mut acc_n) = (0.0, 0.0, 0usize);
    let opts = GradOptions {
        detach_adaptation_mmd: dcfg.detach_adaptation_mmd,
        ..GradOptions::default()
    };
    for step in 0..cfg.n_steps {
        let (xs, ys) = gather(source, &src_batches.next(cfg.batch_size, &mut rng))?;
        let (xt, yt) = gather(target, &tgt_batches.next(target_batch, &mut rng))?;
        let (xs_in, xt_in) = (add_noise(&xs, &noise, &mut rng), add_noise(&xt, &noise, &mut rng));
        let lambda = if dcfg.mmd_enabled { mmd_weight(step, cfg.n_steps) } else { 0.0 };
        let bundle = net.forward(&params, xs_in.view(), xt_in.view(), &dcfg.mmd, dcfg.mmd_enabled)?;

        let cw = if teacher.is_some() { cfg.consistency_at(step) } else { 0.0 };
        let (mut step_opts, mut extra) = (opts.clone(), 0.0);
        if let (Some(tp), true) = (&teacher, cw > 0.0) {
            let ref_s = net.source_network(tp)?.predict(xs.view())?;
            let ref_t = net.target_network(tp)?.predict(xt.view())?;
            let mut gs = Array2::zeros(ref_s.raw_dim());
            let mut gt = Array2::zeros(ref_t.raw_dim());
            extra += consistency_term(&bundle.y_hat_s, &ref_s, cw, &mut gs);
            extra += consistency_term(&bundle.y_hat_t, &ref_t, cw, &mut gt);
            step_opts.extra_output_grads = Some((gs, gt));
        }
        let (parts, grads) = net.gradients(&params, &bundle, ys.view(), yt.view(), lambda, &dcfg.mmd, &step_opts)?;
        let total = parts.total + extra;
        if !total.is_finite() {
            return Err(diverged(step, "transfer loss", total));
        }
        let lr = cfg.lr_at(step);
        for ((adam, p), g) in adams.iter_mut().zip(params.parts_mut()).zip(grads.parts()) {
            adam.step(p, g, lr)?;
        }
        if let Some(tp) = teacher.as_mut() {
            ema_dantr(tp, &params, cfg.ema_alpha_at(step + 1))?;
        }
        trace.push(StepTrace {
            step,
            reg: parts.reg,
            mmd: parts.mmd,
            lambda,
        });
        loss_acc += total;
        mmd_acc += parts.mmd;
        acc_n += 1;
        if (step + 1) % cfg.eval_interval == 0 || step + 1 == cfg.n_steps {
            let val_mse = evaluate_mse(&net.target_network(&params)?, val)?;
            let teacher_val_mse = match &teacher {
                Some(tp) => Some(evaluate_mse(&net.target_network(tp)?, val)?),
                None => None,
            };
            history.push(MetricRecord {
                step: step + 1,
                train_loss: loss_acc / acc_n as f64,
                val_mse,
                teacher_val_mse,
                lambda: Some(lambda),
                mmd: Some(mmd_acc / acc_n as f64),
                lr,
                wall_time_s: start.elapsed().as_secs_f64(),
            });
            log::debug!("dantr step {} loss {:.3e} val {:.3e} lambda {lambda:.3}", step + 1, loss_acc / acc_n as f64, val_mse);
            (loss_acc, mmd_acc, acc_n) = (0.0, 0.0, 0);
        }
    }
    let last = history.last().expect("at least one record");
    Ok(DanTrOutcome {
        target_val_mse: last.val_mse,
        teacher_val_mse: last.teacher_val_mse,
        params,
        teacher,
        history,
        trace,
    })
}
