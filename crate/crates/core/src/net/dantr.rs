//! Three-branch transfer network.
//!
//! ```text
//! source branch      y_s  = head_S(shared(X_s))
//! target branch      y_t  = head_T(shared(X_t))
//! adaptation branch  y_st = head_S(shared(X_t))
//! ```
//!
//! The adaptation branch owns no parameters; it reads the shared and source
//! head vectors directly. Its output never enters the regression loss; its
//! head activations are pulled toward the target head's by MK-MMD.

use ndarray::{Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use super::{from_sequence, recurrent_head, to_sequence, Block, BlockTape, LayerSpec, Network};
use crate::error::{Error, Result};
use crate::mmd::{layer_mmd_grad, mmd_weight, LayerMmd, MkMmdConfig};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DanTrArch {
    pub shared_recurrent_layers: usize,
    pub tailored_recurrent_layers: usize,
    /// Dense layers per head, including the linear output layer.
    pub tailored_dense_layers: usize,
    pub hidden_dim: usize,
}

impl Default for DanTrArch {
    fn default() -> Self {
        Self {
            shared_recurrent_layers: 2,
            tailored_recurrent_layers: 2,
            tailored_dense_layers: 2,
            hidden_dim: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DanTrParams {
    pub shared: Vec<f64>,
    pub source: Vec<f64>,
    pub target: Vec<f64>,
}

/// Gradients share the parameter layout.
pub type DanTrGrads = DanTrParams;

impl DanTrParams {
    pub fn zeros_like(other: &DanTrParams) -> Self {
        Self {
            shared: vec![0.0; other.shared.len()],
            source: vec![0.0; other.source.len()],
            target: vec![0.0; other.target.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.shared.len() + self.source.len() + self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(shared, source, target)` in that order.
    pub fn parts(&self) -> [&Vec<f64>; 3] {
        [&self.shared, &self.source, &self.target]
    }

    pub fn parts_mut(&mut self) -> [&mut Vec<f64>; 3] {
        [&mut self.shared, &mut self.source, &mut self.target]
    }

    /// Entry `i` of the concatenation `shared ++ source ++ target`.
    pub fn get(&self, i: usize) -> f64 {
        let (a, b) = (self.shared.len(), self.source.len());
        if i < a {
            self.shared[i]
        } else if i < a + b {
            self.source[i - a]
        } else {
            self.target[i - a - b]
        }
    }

    pub fn get_mut(&mut self, i: usize) -> &mut f64 {
        let (a, b) = (self.shared.len(), self.source.len());
        if i < a {
            &mut self.shared[i]
        } else if i < a + b {
            &mut self.source[i - a]
        } else {
            &mut self.target[i - a - b]
        }
    }
}

/// Network outputs and per-layer head summaries for one source/target batch pair.
pub struct ForwardBundle {
    pub y_hat_s: Array2<f64>,
    pub y_hat_t: Array2<f64>,
    /// Present when the adaptation branch was evaluated.
    pub y_hat_st: Option<Array2<f64>>,
    /// One `(B_t, D_l)` set per head layer, adaptation branch.
    pub hidden_adapt: Vec<Array2<f64>>,
    /// One `(B_t, D_l)` set per head layer, target branch.
    pub hidden_target: Vec<Array2<f64>>,
    tapes: Tapes,
}

struct Tapes {
    shared_s: BlockTape,
    shared_t: BlockTape,
    head_s: BlockTape,
    head_t: BlockTape,
    head_st: Option<BlockTape>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub reg: f64,
    pub mmd: f64,
    pub lambda: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradOptions {
    /// Cut MMD gradients on the adaptation side, so the penalty only moves the
    /// target head and the shared layers through the target path.
    pub detach_adaptation_mmd: bool,
    /// Per-layer bandwidths, indexed from `l1`; recomputed from the batch when absent.
    pub sigmas: Option<Vec<Vec<f64>>>,
    /// Additional loss gradients w.r.t. `(y_hat_s, y_hat_t)`, e.g. from a
    /// consistency term computed by the caller.
    pub extra_output_grads: Option<(Array2<f64>, Array2<f64>)>,
}

/// Architecture and layouts of the transfer network.
#[derive(Clone, Debug, PartialEq)]
pub struct DanTr {
    pub arch: DanTrArch,
    shared: Block,
    head: Block,
}

impl DanTr {
    pub fn new(arch: DanTrArch) -> Result<Self> {
        let h = arch.hidden_dim;
        if arch.shared_recurrent_layers == 0 || arch.tailored_dense_layers == 0 || h == 0 {
            return Err(Error::Config(format!(
                "transfer network needs shared layers, a dense head output and hidden_dim >= 1 (got {arch:?})"
            )));
        }
        let shared = Block::new(
            (0..arch.shared_recurrent_layers)
                .map(|l| LayerSpec::Lstm {
                    input: if l == 0 { 1 } else { h },
                    hidden: h,
                })
                .collect(),
        )?;
        let head = Block::new(recurrent_head(h, arch.tailored_recurrent_layers, arch.tailored_dense_layers, h))?;
        Ok(Self { arch, shared, head })
    }

    pub fn shared_block(&self) -> &Block {
        &self.shared
    }

    /// Layout of each tailored head (source and target are identical).
    pub fn head_block(&self) -> &Block {
        &self.head
    }

    pub fn fingerprint(&self) -> String {
        format!("dantr[{}][{}]", self.shared.fingerprint(), self.head.fingerprint())
    }

    /// Independent draws for the shared block and both heads.
    pub fn init(&self, seed: u64) -> DanTrParams {
        DanTrParams {
            shared: self.shared.init_seeded(seed::derive_seed(&[seed, 0])),
            source: self.head.init_seeded(seed::derive_seed(&[seed, 1])),
            target: self.head.init_seeded(seed::derive_seed(&[seed, 2])),
        }
    }

    /// Copies a surrogate with the same layer stack into all branches: the
    /// shared block takes its leading LSTM layers, both heads the rest.
    /// `None` when the layouts differ.
    pub fn params_from_surrogate(&self, net: &Network) -> Option<DanTrParams> {
        let stacked = self.shared.stack(&self.head).ok()?;
        if stacked.fingerprint() != net.block.fingerprint() {
            return None;
        }
        let (shared, head) = net.params.split_at(self.shared.n_params());
        Some(DanTrParams {
            shared: shared.to_vec(),
            source: head.to_vec(),
            target: head.to_vec(),
        })
    }

    pub fn check(&self, params: &DanTrParams) -> Result<()> {
        for (what, got, want) in [
            ("shared", params.shared.len(), self.shared.n_params()),
            ("source head", params.source.len(), self.head.n_params()),
            ("target head", params.target.len(), self.head.n_params()),
        ] {
            if got != want {
                return Err(Error::LengthMismatch {
                    what: format!("{what} parameters"),
                    expected: want,
                    got,
                });
            }
        }
        Ok(())
    }

    fn branch(&self, shared: &[f64], head: &[f64]) -> Result<Network> {
        let block = self.shared.stack(&self.head)?;
        let params = shared.iter().chain(head).copied().collect();
        Network::new(block, params)
    }

    /// Shared block plus target head as a plain surrogate.
    pub fn target_network(&self, params: &DanTrParams) -> Result<Network> {
        self.check(params)?;
        self.branch(&params.shared, &params.target)
    }

    /// Shared block plus source head (the adaptation branch uses the same network).
    pub fn source_network(&self, params: &DanTrParams) -> Result<Network> {
        self.check(params)?;
        self.branch(&params.shared, &params.source)
    }

    /// Runs all branches. With `with_adaptation == false` the adaptation
    /// branch is skipped and the hidden lists stay empty.
    pub fn forward(
        &self,
        params: &DanTrParams,
        xs: ArrayView2<f64>,
        xt: ArrayView2<f64>,
        mmd: &MkMmdConfig,
        with_adaptation: bool,
    ) -> Result<ForwardBundle> {
        self.check(params)?;
        if xs.nrows() == 0 || xt.nrows() == 0 {
            return Err(Error::EmptyDataset("transfer step needs non-empty source and target batches".into()));
        }
        let shared_s = self.shared.forward_tape(&params.shared, to_sequence(xs))?;
        let shared_t = self.shared.forward_tape(&params.shared, to_sequence(xt))?;
        let head_s = self.head.forward_tape(&params.source, shared_s.output().clone())?;
        let head_t = self.head.forward_tape(&params.target, shared_t.output().clone())?;
        let head_st = if with_adaptation {
            Some(self.head.forward_tape(&params.source, shared_t.output().clone())?)
        } else {
            None
        };
        let rep = mmd.representation;
        let n = self.head.layers().len();
        let summarize = |tape: &BlockTape| (0..n).map(|l| self.head.representation(tape, l, rep)).collect();
        let (hidden_adapt, hidden_target) = match &head_st {
            Some(st) => (summarize(st), summarize(&head_t)),
            None => (Vec::new(), Vec::new()),
        };
        Ok(ForwardBundle {
            y_hat_s: from_sequence(head_s.output()),
            y_hat_t: from_sequence(head_t.output()),
            y_hat_st: head_st.as_ref().map(|t| from_sequence(t.output())),
            hidden_adapt,
            hidden_target,
            tapes: Tapes {
                shared_s,
                shared_t,
                head_s,
                head_t,
                head_st,
            },
        })
    }

    /// Loss and gradients for every parameter. `lambda` weights the MMD term.
    pub fn gradients(
        &self,
        params: &DanTrParams,
        bundle: &ForwardBundle,
        ys: ArrayView2<f64>,
        yt: ArrayView2<f64>,
        lambda: f64,
        mmd: &MkMmdConfig,
        opts: &GradOptions,
    ) -> Result<(LossParts, DanTrGrads)> {
        self.check(params)?;
        let (parts, layer) = loss_parts(bundle, ys, yt, lambda, mmd, opts.sigmas.as_deref())?;
        let mut g = DanTrParams::zeros_like(params);
        let n_head = self.head.layers().len();
        let last = |a: Array3<f64>, n: usize| {
            let mut v: Vec<Option<Array3<f64>>> = vec![None; n];
            v[n - 1] = Some(a);
            v
        };

        // Source path: regression only.
        let (mut gys, mut gyt) = (mse_grad(&bundle.y_hat_s, ys), mse_grad(&bundle.y_hat_t, yt));
        if let Some((es, et)) = &opts.extra_output_grads {
            if es.dim() != gys.dim() || et.dim() != gyt.dim() {
                return Err(Error::Config("extra output gradients do not match the predictions".into()));
            }
            gys += es;
            gyt += et;
        }
        let dys = to_sequence(gys.view());
        let d_shared_s = self
            .head
            .backward(&params.source, &bundle.tapes.head_s, last(dys, n_head), &mut g.source, true)?
            .expect("input gradient requested");
        let n_shared = self.shared.layers().len();
        self.shared
            .backward(&params.shared, &bundle.tapes.shared_s, last(d_shared_s, n_shared), &mut g.shared, false)?;

        // Target path: regression plus the target side of the MMD.
        let dyt = to_sequence(gyt.view());
        let mut seeds_t = last(dyt, n_head);
        let mut seeds_st: Vec<Option<Array3<f64>>> = vec![None; n_head];
        let mmd_active = lambda != 0.0 && layer.is_some();
        if let (true, Some(layer)) = (mmd_active, &layer) {
            let st_tape = bundle.tapes.head_st.as_ref().expect("adaptation branch evaluated");
            for (l, _, term) in &layer.terms {
                let gt = self.head.representation_grad(&bundle.tapes.head_t, *l, mmd.representation, &(&term.grad_t * lambda));
                add_seed(&mut seeds_t[*l], gt);
                if !opts.detach_adaptation_mmd {
                    let gs = self.head.representation_grad(st_tape, *l, mmd.representation, &(&term.grad_s * lambda));
                    add_seed(&mut seeds_st[*l], gs);
                }
            }
        }
        let mut d_shared_t = self
            .head
            .backward(&params.target, &bundle.tapes.head_t, seeds_t, &mut g.target, true)?
            .expect("input gradient requested");
        if mmd_active && !opts.detach_adaptation_mmd {
            let st_tape = bundle.tapes.head_st.as_ref().expect("adaptation branch evaluated");
            if let Some(d) = self.head.backward(&params.source, st_tape, seeds_st, &mut g.source, true)? {
                d_shared_t += &d;
            }
        }
        self.shared
            .backward(&params.shared, &bundle.tapes.shared_t, last(d_shared_t, n_shared), &mut g.shared, false)?;
        Ok((parts, g))
    }
}

fn add_seed(slot: &mut Option<Array3<f64>>, g: Array3<f64>) {
    match slot {
        Some(a) => *a += &g,
        None => *slot = Some(g),
    }
}

fn check_shape(pred: &Array2<f64>, y: ArrayView2<f64>, what: &str) -> Result<()> {
    if pred.dim() != y.dim() {
        return Err(Error::Config(format!(
            "{what} targets have shape {:?}, predictions {:?}",
            y.dim(),
            pred.dim()
        )));
    }
    Ok(())
}

fn mse(pred: &Array2<f64>, y: ArrayView2<f64>) -> f64 {
    let n = pred.len() as f64;
    pred.iter().zip(y.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n
}

fn mse_grad(pred: &Array2<f64>, y: ArrayView2<f64>) -> Array2<f64> {
    let scale = 2.0 / pred.len() as f64;
    (pred - &y) * scale
}

fn loss_parts(
    bundle: &ForwardBundle,
    ys: ArrayView2<f64>,
    yt: ArrayView2<f64>,
    lambda: f64,
    mmd: &MkMmdConfig,
    sigmas: Option<&[Vec<f64>]>,
) -> Result<(LossParts, Option<LayerMmd>)> {
    check_shape(&bundle.y_hat_s, ys, "source")?;
    check_shape(&bundle.y_hat_t, yt, "target")?;
    let reg = mse(&bundle.y_hat_s, ys) + mse(&bundle.y_hat_t, yt);
    let layer = if bundle.hidden_adapt.is_empty() {
        None
    } else {
        Some(layer_mmd_grad(&bundle.hidden_adapt, &bundle.hidden_target, mmd, sigmas)?)
    };
    let mmd_value = layer.as_ref().map_or(0.0, |l| l.total);
    Ok((
        LossParts {
            total: reg + lambda * mmd_value,
            reg,
            mmd: mmd_value,
            lambda,
        },
        layer,
    ))
}

/// `reg + lambda * mmd` with `lambda = mmd_weight(n_b, n_total)`. Regression
/// is the per-branch mean squared error; the adaptation output is excluded.
pub fn dantr_loss(
    bundle: &ForwardBundle,
    ys: ArrayView2<f64>,
    yt: ArrayView2<f64>,
    n_b: usize,
    n_total: usize,
    mmd: &MkMmdConfig,
) -> Result<LossParts> {
    Ok(loss_parts(bundle, ys, yt, mmd_weight(n_b, n_total), mmd, None)?.0)
}
