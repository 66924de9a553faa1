//! Sequence-to-sequence networks on flat parameter vectors.
//!
//! A [`Block`] is a stack of LSTM and per-step dense layers whose parameters
//! occupy one contiguous `Vec<f64>`; gradients, optimizer moments and teacher
//! averages share that layout. Batches enter as `B x T` matrices of scalar
//! inputs and leave as `B x T` matrices of scalar outputs.

mod checkpoint;
mod dantr;
mod layers;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointKind};
pub use dantr::{
    dantr_loss, DanTr, DanTrArch, DanTrGrads, DanTrParams, ForwardBundle, GradOptions, LossParts,
};

use std::ops::Range;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mmd::Representation;
use crate::seed;
use layers::LayerCache;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerSpec {
    Lstm { input: usize, hidden: usize },
    Dense { input: usize, output: usize, relu: bool },
}

impl LayerSpec {
    pub fn n_params(&self) -> usize {
        match *self {
            LayerSpec::Lstm { input, hidden } => 4 * hidden * (input + hidden + 1),
            LayerSpec::Dense { input, output, .. } => input * output + output,
        }
    }

    pub fn input_dim(&self) -> usize {
        match *self {
            LayerSpec::Lstm { input, .. } | LayerSpec::Dense { input, .. } => input,
        }
    }

    pub fn output_dim(&self) -> usize {
        match *self {
            LayerSpec::Lstm { hidden, .. } => hidden,
            LayerSpec::Dense { output, .. } => output,
        }
    }

    pub fn is_recurrent(&self) -> bool {
        matches!(self, LayerSpec::Lstm { .. })
    }

    fn tag(&self) -> String {
        match *self {
            LayerSpec::Lstm { input, hidden } => format!("lstm{input}x{hidden}"),
            LayerSpec::Dense { input, output, relu } => {
                format!("dense{input}x{output}{}", if relu { "relu" } else { "" })
            }
        }
    }
}

/// Layer stack with parameter offsets into a flat vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    layers: Vec<LayerSpec>,
    offsets: Vec<usize>,
    n_params: usize,
}

/// Activations kept for the backward pass.
pub struct BlockTape {
    input: Array3<f64>,
    caches: Vec<LayerCache>,
}

impl BlockTape {
    /// Output of the last layer, `(T, B, D)`.
    pub fn output(&self) -> &Array3<f64> {
        self.caches.last().map_or(&self.input, |c| c.output())
    }

    /// Output of layer `l`, `(T, B, D)`.
    pub fn layer_output(&self, l: usize) -> &Array3<f64> {
        self.caches[l].output()
    }
}

impl Block {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("a block needs at least one layer".into()));
        }
        for (l, spec) in layers.iter().enumerate() {
            if spec.input_dim() == 0 || spec.output_dim() == 0 {
                return Err(Error::Config(format!("layer {l} has a zero dimension")));
            }
            if l > 0 && layers[l - 1].output_dim() != spec.input_dim() {
                return Err(Error::DimensionMismatch(layers[l - 1].output_dim(), spec.input_dim()));
            }
        }
        let mut offsets = Vec::with_capacity(layers.len());
        let mut n = 0;
        for spec in &layers {
            offsets.push(n);
            n += spec.n_params();
        }
        Ok(Self {
            layers,
            offsets,
            n_params: n,
        })
    }

    /// Concatenation of two blocks; the parameter vector of the result is the
    /// concatenation of theirs.
    pub fn stack(&self, top: &Block) -> Result<Block> {
        Block::new(self.layers.iter().chain(&top.layers).copied().collect())
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    /// Slice of the flat vector holding layer `l`.
    pub fn param_range(&self, l: usize) -> Range<usize> {
        self.offsets[l]..self.offsets[l] + self.layers[l].n_params()
    }

    pub fn fingerprint(&self) -> String {
        self.layers.iter().map(LayerSpec::tag).collect::<Vec<_>>().join("|")
    }

    /// Inverse of [`Block::fingerprint`].
    pub fn from_fingerprint(fp: &str) -> Result<Block> {
        let bad = || Error::Config(format!("unrecognized layer fingerprint `{fp}`"));
        let dims = |s: &str| -> Result<(usize, usize)> {
            let (a, b) = s.split_once('x').ok_or_else(bad)?;
            Ok((a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?))
        };
        let layers = fp
            .split('|')
            .map(|tag| {
                if let Some(rest) = tag.strip_prefix("lstm") {
                    let (input, hidden) = dims(rest)?;
                    Ok(LayerSpec::Lstm { input, hidden })
                } else if let Some(rest) = tag.strip_prefix("dense") {
                    let (rest, relu) = match rest.strip_suffix("relu") {
                        Some(r) => (r, true),
                        None => (rest, false),
                    };
                    let (input, output) = dims(rest)?;
                    Ok(LayerSpec::Dense { input, output, relu })
                } else {
                    Err(bad())
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Block::new(layers)
    }

    /// Uniform fan-in weights (`1/sqrt(H)` for LSTM, `1/sqrt(D_in)` for dense),
    /// zero biases, forget-gate bias 1.
    pub fn init<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let mut p = vec![0.0; self.n_params];
        for (l, spec) in self.layers.iter().enumerate() {
            let r = self.param_range(l);
            let chunk = &mut p[r];
            match *spec {
                LayerSpec::Lstm { input, hidden } => {
                    let bound = 1.0 / (hidden as f64).sqrt();
                    let n_w = 4 * hidden * (input + hidden);
                    for w in &mut chunk[..n_w] {
                        *w = rng.random_range(-bound..bound);
                    }
                    for b in &mut chunk[n_w + hidden..n_w + 2 * hidden] {
                        *b = 1.0;
                    }
                }
                LayerSpec::Dense { input, output, .. } => {
                    let bound = 1.0 / (input as f64).sqrt();
                    for w in &mut chunk[..input * output] {
                        *w = rng.random_range(-bound..bound);
                    }
                }
            }
        }
        p
    }

    pub fn init_seeded(&self, seed: u64) -> Vec<f64> {
        self.init(&mut seed::rng(seed))
    }

    fn check_params(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.n_params {
            return Err(Error::LengthMismatch {
                what: format!("parameters of {}", self.fingerprint()),
                expected: self.n_params,
                got: params.len(),
            });
        }
        Ok(())
    }

    /// Runs the stack on `x` `(T, B, D_in)`, keeping activations.
    pub fn forward_tape(&self, params: &[f64], x: Array3<f64>) -> Result<BlockTape> {
        self.check_params(params)?;
        if x.dim().2 != self.input_dim() {
            return Err(Error::DimensionMismatch(self.input_dim(), x.dim().2));
        }
        let x = if x.is_standard_layout() {
            x
        } else {
            x.as_standard_layout().to_owned()
        };
        let mut caches: Vec<LayerCache> = Vec::with_capacity(self.layers.len());
        for (l, spec) in self.layers.iter().enumerate() {
            let input = caches.last().map_or(&x, |c| c.output());
            let p = &params[self.param_range(l)];
            let cache = match *spec {
                LayerSpec::Lstm { input: din, hidden } => layers::lstm_forward(p, din, hidden, input),
                LayerSpec::Dense { input: din, output, relu } => {
                    layers::dense_forward(p, din, output, relu, input)
                }
            };
            check_finite(cache.output(), l)?;
            caches.push(cache);
        }
        Ok(BlockTape { input: x, caches })
    }

    /// Backward pass. `seeds[l]` is the loss gradient w.r.t. the output of
    /// layer `l` (`None` for none). Parameter gradients are added to `grads`.
    pub fn backward(
        &self,
        params: &[f64],
        tape: &BlockTape,
        mut seeds: Vec<Option<Array3<f64>>>,
        grads: &mut [f64],
        need_input_grad: bool,
    ) -> Result<Option<Array3<f64>>> {
        self.check_params(params)?;
        self.check_params(grads)?;
        if seeds.len() != self.layers.len() {
            return Err(Error::LengthMismatch {
                what: "layer gradient seeds".into(),
                expected: self.layers.len(),
                got: seeds.len(),
            });
        }
        let mut carry: Option<Array3<f64>> = None;
        for l in (0..self.layers.len()).rev() {
            let dy = match (carry.take(), seeds[l].take()) {
                (Some(mut a), Some(b)) => {
                    a += &b;
                    a
                }
                (Some(a), None) | (None, Some(a)) => a,
                (None, None) => {
                    if l == 0 || !self.any_seed_below(&seeds, l) {
                        if need_input_grad {
                            let (t, b, _) = tape.input.dim();
                            return Ok(Some(Array3::zeros((t, b, self.input_dim()))));
                        }
                        return Ok(None);
                    }
                    continue;
                }
            };
            let input = if l == 0 { &tape.input } else { tape.caches[l - 1].output() };
            let want_dx = l > 0 || need_input_grad;
            let r = self.param_range(l);
            let (p, g) = (&params[r.clone()], &mut grads[r]);
            carry = match self.layers[l] {
                LayerSpec::Lstm { input: din, hidden } => {
                    layers::lstm_backward(p, g, din, hidden, input, &tape.caches[l], &dy, want_dx)
                }
                LayerSpec::Dense { input: din, output, relu } => {
                    layers::dense_backward(p, g, din, output, relu, input, &tape.caches[l], &dy, want_dx)
                }
            };
        }
        Ok(if need_input_grad { carry } else { None })
    }

    fn any_seed_below(&self, seeds: &[Option<Array3<f64>>], l: usize) -> bool {
        seeds[..l].iter().any(Option::is_some)
    }

    /// Per-sample summary of layer `l`'s output under `rep`, `(B, D)`.
    pub fn representation(&self, tape: &BlockTape, l: usize, rep: Representation) -> Array2<f64> {
        let out = tape.layer_output(l);
        if self.final_step_rule(l, rep) {
            out.index_axis(Axis(0), out.dim().0 - 1).to_owned()
        } else {
            out.mean_axis(Axis(0)).expect("sequences have at least one step")
        }
    }

    /// Spreads a gradient w.r.t. [`Block::representation`] back onto the
    /// layer's `(T, B, D)` output.
    pub fn representation_grad(&self, tape: &BlockTape, l: usize, rep: Representation, g: &Array2<f64>) -> Array3<f64> {
        let (t_len, b, d) = tape.layer_output(l).dim();
        let mut out = Array3::zeros((t_len, b, d));
        if self.final_step_rule(l, rep) {
            out.index_axis_mut(Axis(0), t_len - 1).assign(g);
        } else {
            let scaled = g / t_len as f64;
            for mut step in out.axis_iter_mut(Axis(0)) {
                step.assign(&scaled);
            }
        }
        out
    }

    fn final_step_rule(&self, l: usize, rep: Representation) -> bool {
        match rep {
            Representation::FinalStep => true,
            Representation::MeanOverTime => false,
            Representation::ByLayerKind => self.layers[l].is_recurrent(),
        }
    }
}

fn check_finite(out: &Array3<f64>, layer: usize) -> Result<()> {
    if out.iter().all(|v| v.is_finite()) {
        return Ok(());
    }
    let step = out
        .axis_iter(Axis(0))
        .position(|s| s.iter().any(|v| !v.is_finite()))
        .unwrap_or(0);
    Err(Error::NonFinite {
        what: format!("activation of layer {layer}"),
        index: step,
    })
}

/// `B x T` scalar batch to `(T, B, 1)`.
pub fn to_sequence(x: ArrayView2<f64>) -> Array3<f64> {
    x.t().insert_axis(Axis(2)).as_standard_layout().to_owned()
}

/// `(T, B, 1)` to `B x T`.
pub fn from_sequence(y: &Array3<f64>) -> Array2<f64> {
    y.index_axis(Axis(2), 0).t().as_standard_layout().to_owned()
}

/// Stacks equal-length series into a `B x T` batch.
pub fn batch_matrix(rows: &[&[f64]]) -> Result<Array2<f64>> {
    let t = rows.first().map_or(0, |r| r.len());
    let mut m = Array2::zeros((rows.len(), t));
    for (i, r) in rows.iter().enumerate() {
        if r.len() != t {
            return Err(Error::LengthMismatch {
                what: "batch rows".into(),
                expected: t,
                got: r.len(),
            });
        }
        m.row_mut(i).assign(&ndarray::ArrayView1::from(*r));
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurrogateArch {
    pub n_recurrent_layers: usize,
    /// Dense layers including the linear output layer.
    pub n_dense_layers: usize,
    pub hidden_dim: usize,
}

impl Default for SurrogateArch {
    fn default() -> Self {
        Self {
            n_recurrent_layers: 3,
            n_dense_layers: 2,
            hidden_dim: 200,
        }
    }
}

impl SurrogateArch {
    pub fn block(&self) -> Result<Block> {
        if self.n_recurrent_layers == 0 || self.n_dense_layers == 0 || self.hidden_dim == 0 {
            return Err(Error::Config(format!(
                "surrogate needs >= 1 recurrent layer, >= 1 dense layer and hidden_dim >= 1 (got {self:?})"
            )));
        }
        Block::new(recurrent_head(1, self.n_recurrent_layers, self.n_dense_layers, self.hidden_dim))
    }
}

/// `n_lstm` LSTM layers, `n_dense - 1` ReLU layers, one linear output.
pub(crate) fn recurrent_head(input: usize, n_lstm: usize, n_dense: usize, h: usize) -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    let mut d = input;
    for _ in 0..n_lstm {
        layers.push(LayerSpec::Lstm { input: d, hidden: h });
        d = h;
    }
    for _ in 0..n_dense.saturating_sub(1) {
        layers.push(LayerSpec::Dense { input: d, output: h, relu: true });
    }
    if n_dense > 0 {
        layers.push(LayerSpec::Dense { input: d, output: 1, relu: false });
    }
    layers
}

/// A block together with its parameters; the unit that is evaluated,
/// pseudo-labels data and gets checkpointed.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub block: Block,
    pub params: Vec<f64>,
}

impl Network {
    pub fn new(block: Block, params: Vec<f64>) -> Result<Self> {
        block.check_params(&params)?;
        Ok(Self { block, params })
    }

    /// One output per step for each row of `x` (`B x T`).
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        forward_surrogate(&self.block, &self.params, x)
    }

    /// Predictions for many series, batched by `batch` rows; series may differ
    /// in length across batches only if grouped, so each series runs alone
    /// when lengths are mixed.
    pub fn predict_series(&self, inputs: &[&[f64]], batch: usize) -> Result<Vec<Vec<f64>>> {
        let batch = batch.max(1);
        let uniform = inputs.windows(2).all(|w| w[0].len() == w[1].len());
        let chunk = if uniform { batch } else { 1 };
        let parts: Vec<Result<Vec<Vec<f64>>>> = inputs
            .par_chunks(chunk)
            .map(|rows| {
                let y = self.predict(batch_matrix(rows)?.view())?;
                Ok(y.rows().into_iter().map(|r| r.to_vec()).collect())
            })
            .collect();
        let mut out = Vec::with_capacity(inputs.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }
}

/// Surrogate forward pass on a `B x T` batch; causal in time.
pub fn forward_surrogate(block: &Block, params: &[f64], x: ArrayView2<f64>) -> Result<Array2<f64>> {
    if block.output_dim() != 1 {
        return Err(Error::DimensionMismatch(1, block.output_dim()));
    }
    let tape = block.forward_tape(params, to_sequence(x))?;
    Ok(from_sequence(tape.output()))
}
