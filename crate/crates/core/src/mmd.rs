//! Multi-kernel maximum mean discrepancy.
//!
//! The discrepancy between two sample sets is the squared RKHS distance of
//! their empirical mean embeddings under an equal-weight average of Gaussian
//! kernels. Bandwidths sit on a geometric ladder around the median pairwise
//! distance of the pooled samples and are treated as constants when
//! differentiating.
//!
//! Sample sets are `n x d` matrices, one row per sample.

use log::warn;
use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BandwidthMode {
    MedianLadder,
    Fixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    /// V-statistic; within-set means include the diagonal.
    Biased,
    /// U-statistic; within-set means over distinct pairs only.
    Unbiased,
}

/// How a sequence of layer activations becomes one vector per sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Representation {
    /// Final step for recurrent layers, mean over time for dense layers.
    ByLayerKind,
    FinalStep,
    MeanOverTime,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MkMmdConfig {
    pub n_kernels: usize,
    pub bandwidth_mode: BandwidthMode,
    pub ladder_factor: f64,
    pub fixed_sigmas: Option<Vec<f64>>,
    pub estimator: Estimator,
    /// Inclusive range of tailored-net layer indices.
    pub layer_range: (usize, usize),
    pub representation: Representation,
}

impl Default for MkMmdConfig {
    fn default() -> Self {
        Self {
            n_kernels: 5,
            bandwidth_mode: BandwidthMode::MedianLadder,
            ladder_factor: 2.0,
            fixed_sigmas: None,
            estimator: Estimator::Biased,
            layer_range: (0, 2),
            representation: Representation::ByLayerKind,
        }
    }
}

impl MkMmdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layer_range.0 > self.layer_range.1 {
            return Err(Error::Config(format!(
                "layer range {:?} must satisfy l1 <= l2",
                self.layer_range
            )));
        }
        match self.bandwidth_mode {
            BandwidthMode::MedianLadder => {
                if self.n_kernels == 0 {
                    return Err(Error::Config("at least one kernel is required".into()));
                }
                if !(self.ladder_factor > 1.0) {
                    return Err(Error::Config(format!(
                        "ladder factor {} must exceed 1",
                        self.ladder_factor
                    )));
                }
            }
            BandwidthMode::Fixed => match &self.fixed_sigmas {
                Some(s) if !s.is_empty() && s.iter().all(|&v| v > 0.0 && v.is_finite()) => {}
                _ => {
                    return Err(Error::Config(
                        "fixed bandwidth mode needs a non-empty list of positive sigmas".into(),
                    ))
                }
            },
        }
        Ok(())
    }

    pub fn layers(&self) -> std::ops::RangeInclusive<usize> {
        self.layer_range.0..=self.layer_range.1
    }

    /// Kernel bandwidths for one pair of sample sets.
    pub fn sigmas(&self, hs: ArrayView2<f64>, ht: ArrayView2<f64>) -> Result<Vec<f64>> {
        match self.bandwidth_mode {
            BandwidthMode::Fixed => self
                .fixed_sigmas
                .clone()
                .ok_or_else(|| Error::Config("fixed bandwidth mode without sigmas".into())),
            BandwidthMode::MedianLadder => {
                let base = median_bandwidth(hs, ht)?.sigma;
                let center = self.n_kernels.div_ceil(2) as i32;
                Ok((1..=self.n_kernels as i32)
                    .map(|m| base * self.ladder_factor.powi(m - center))
                    .collect())
            }
        }
    }
}

/// `exp(-|x - y|^2 / (2 sigma^2))`.
pub fn gaussian_kernel(x: &[f64], y: &[f64], sigma: f64) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch(x.len(), y.len()));
    }
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("bandwidth {sigma} must be positive")));
    }
    let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((-d2 / (2.0 * sigma * sigma)).exp())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bandwidth {
    pub sigma: f64,
    /// Set when every pooled point coincides and the fallback of 1 was used.
    pub degenerate: bool,
}

/// Median of the non-zero pairwise Euclidean distances over the pooled set.
pub fn median_bandwidth(xs: ArrayView2<f64>, ys: ArrayView2<f64>) -> Result<Bandwidth> {
    if xs.nrows() + ys.nrows() == 0 {
        return Err(Error::EmptyDataset("median bandwidth of an empty pool".into()));
    }
    if xs.nrows() > 0 && ys.nrows() > 0 && xs.ncols() != ys.ncols() {
        return Err(Error::DimensionMismatch(xs.ncols(), ys.ncols()));
    }
    let pooled: Vec<_> = xs.rows().into_iter().chain(ys.rows()).collect();
    let mut dists = Vec::with_capacity(pooled.len() * pooled.len().saturating_sub(1) / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            let d2: f64 = pooled[i]
                .iter()
                .zip(pooled[j].iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d2 > 0.0 {
                dists.push(d2.sqrt());
            }
        }
    }
    if dists.is_empty() {
        warn!("all pooled points coincide; falling back to bandwidth 1");
        return Ok(Bandwidth {
            sigma: 1.0,
            degenerate: true,
        });
    }
    dists.sort_by(|a, b| a.total_cmp(b));
    let n = dists.len();
    let sigma = if n % 2 == 1 {
        dists[n / 2]
    } else {
        0.5 * (dists[n / 2 - 1] + dists[n / 2])
    };
    Ok(Bandwidth {
        sigma,
        degenerate: false,
    })
}

fn check_sets(hs: ArrayView2<f64>, ht: ArrayView2<f64>, estimator: Estimator) -> Result<()> {
    if hs.nrows() == 0 || ht.nrows() == 0 {
        return Err(Error::EmptyDataset("MMD needs two non-empty sample sets".into()));
    }
    if hs.ncols() != ht.ncols() {
        return Err(Error::DimensionMismatch(hs.ncols(), ht.ncols()));
    }
    if estimator == Estimator::Unbiased && (hs.nrows() < 2 || ht.nrows() < 2) {
        return Err(Error::Config(format!(
            "unbiased estimator needs at least 2 samples per set (got {} and {})",
            hs.nrows(),
            ht.nrows()
        )));
    }
    Ok(())
}

/// Average kernel value and the coefficient `c` with
/// `d k / d x = -c (x - y)`.
fn kernel_and_coeff(x: ndarray::ArrayView1<f64>, y: ndarray::ArrayView1<f64>, sigmas: &[f64]) -> (f64, f64) {
    let d2: f64 = x.iter().zip(y.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    let m = sigmas.len() as f64;
    let (mut k, mut c) = (0.0, 0.0);
    for &s in sigmas {
        let s2 = s * s;
        let km = (-d2 / (2.0 * s2)).exp();
        k += km;
        c += km / s2;
    }
    (k / m, c / m)
}

/// Value and gradients of the MK-MMD estimate with fixed bandwidths.
#[derive(Clone, Debug)]
pub struct MmdGrad {
    pub value: f64,
    pub grad_s: Array2<f64>,
    pub grad_t: Array2<f64>,
}

/// Estimate under fixed `sigmas`, with gradients w.r.t. every coordinate.
pub fn mk_mmd_grad(
    hs: ArrayView2<f64>,
    ht: ArrayView2<f64>,
    sigmas: &[f64],
    estimator: Estimator,
) -> Result<MmdGrad> {
    check_sets(hs, ht, estimator)?;
    if sigmas.is_empty() || sigmas.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Config(format!("invalid bandwidths {sigmas:?}")));
    }
    let (ns, nt) = (hs.nrows(), ht.nrows());
    let (w_ss, w_tt) = match estimator {
        Estimator::Biased => (1.0 / (ns * ns) as f64, 1.0 / (nt * nt) as f64),
        Estimator::Unbiased => (1.0 / (ns * (ns - 1)) as f64, 1.0 / (nt * (nt - 1)) as f64),
    };
    let w_st = 1.0 / (ns * nt) as f64;
    let mut grad_s = Array2::<f64>::zeros(hs.raw_dim());
    let mut grad_t = Array2::<f64>::zeros(ht.raw_dim());
    let mut value = 0.0;

    // Ordered pairs in row-major order, matching the cross loop below, so that
    // identical sets cancel exactly.
    let within = |h: ArrayView2<f64>, w: f64, grad: &mut Array2<f64>| {
        let n = h.nrows();
        let mut sum = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i == j && estimator == Estimator::Unbiased {
                    continue;
                }
                let (k, c) = kernel_and_coeff(h.row(i), h.row(j), sigmas);
                sum += k;
                if i == j {
                    continue;
                }
                for d in 0..h.ncols() {
                    let diff = h[[i, d]] - h[[j, d]];
                    grad[[i, d]] -= w * c * diff;
                    grad[[j, d]] += w * c * diff;
                }
            }
        }
        w * sum
    };
    value += within(hs, w_ss, &mut grad_s);
    value += within(ht, w_tt, &mut grad_t);

    let mut cross = 0.0;
    for i in 0..ns {
        for j in 0..nt {
            let (k, c) = kernel_and_coeff(hs.row(i), ht.row(j), sigmas);
            cross += k;
            for d in 0..hs.ncols() {
                let diff = hs[[i, d]] - ht[[j, d]];
                grad_s[[i, d]] += 2.0 * w_st * c * diff;
                grad_t[[j, d]] -= 2.0 * w_st * c * diff;
            }
        }
    }
    value -= 2.0 * w_st * cross;
    Ok(MmdGrad {
        value,
        grad_s,
        grad_t,
    })
}

/// MK-MMD estimate between `hs` and `ht` under `config`.
pub fn mk_mmd(hs: ArrayView2<f64>, ht: ArrayView2<f64>, config: &MkMmdConfig) -> Result<f64> {
    config.validate()?;
    check_sets(hs, ht, config.estimator)?;
    let sigmas = config.sigmas(hs, ht)?;
    Ok(mk_mmd_grad(hs, ht, &sigmas, config.estimator)?.value)
}

/// Per-layer terms of [`layer_mmd_sum`], with gradients.
#[derive(Clone, Debug)]
pub struct LayerMmd {
    pub total: f64,
    /// `(layer index, sigmas, value and gradients)` in layer order.
    pub terms: Vec<(usize, Vec<f64>, MmdGrad)>,
}

fn layer_pair<'a>(
    hidden_s: &'a [Array2<f64>],
    hidden_t: &'a [Array2<f64>],
    l: usize,
) -> Result<(&'a Array2<f64>, &'a Array2<f64>)> {
    match (hidden_s.get(l), hidden_t.get(l)) {
        (Some(s), Some(t)) => Ok((s, t)),
        _ => Err(Error::Config(format!(
            "hidden states missing layer {l} (have {} and {})",
            hidden_s.len(),
            hidden_t.len()
        ))),
    }
}

/// Gradient-carrying form of [`layer_mmd_sum`]; `sigmas_override` fixes the
/// bandwidths per layer (indexed from `l1`).
pub fn layer_mmd_grad(
    hidden_s: &[Array2<f64>],
    hidden_t: &[Array2<f64>],
    config: &MkMmdConfig,
    sigmas_override: Option<&[Vec<f64>]>,
) -> Result<LayerMmd> {
    config.validate()?;
    let mut terms = Vec::new();
    let mut total = 0.0;
    for (k, l) in config.layers().enumerate() {
        let (s, t) = layer_pair(hidden_s, hidden_t, l)?;
        check_sets(s.view(), t.view(), config.estimator)?;
        let sigmas = match sigmas_override {
            Some(all) => all
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Config(format!("no bandwidth override for layer {l}")))?,
            None => config.sigmas(s.view(), t.view())?,
        };
        let g = mk_mmd_grad(s.view(), t.view(), &sigmas, config.estimator)?;
        total += g.value;
        terms.push((l, sigmas, g));
    }
    Ok(LayerMmd { total, terms })
}

/// Sum of per-layer MK-MMD over the configured layer range; each layer gets
/// its own bandwidths.
pub fn layer_mmd_sum(hidden_s: &[Array2<f64>], hidden_t: &[Array2<f64>], config: &MkMmdConfig) -> Result<f64> {
    Ok(layer_mmd_grad(hidden_s, hidden_t, config, None)?.total)
}

/// Adaptation weight `2 / (1 + exp(-10 n_b / N)) - 1`.
pub fn mmd_weight(n_b: usize, total: usize) -> f64 {
    let total = total.max(1) as f64;
    2.0 / (1.0 + (-10.0 * n_b as f64 / total).exp()) - 1.0
}

/// Stacks per-sample vectors into an `n x d` matrix.
pub fn rows_to_matrix(rows: &[Vec<f64>]) -> Result<Array2<f64>> {
    let d = rows.first().map_or(0, Vec::len);
    let mut m = Array2::zeros((rows.len(), d));
    for (mut dst, r) in m.axis_iter_mut(Axis(0)).zip(rows) {
        if r.len() != d {
            return Err(Error::DimensionMismatch(d, r.len()));
        }
        dst.assign(&ndarray::ArrayView1::from(r.as_slice()));
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn kernel_values() {
        assert_eq!(gaussian_kernel(&[1.0, 2.0], &[1.0, 2.0], 0.3).unwrap(), 1.0);
        let k = gaussian_kernel(&[0.0, 0.0], &[3.0, 4.0], 5.0).unwrap();
        assert!((k - (-0.5f64).exp()).abs() < 1e-15);
        assert!((k - 0.6065307).abs() < 1e-7);
        let flat = gaussian_kernel(&[-3.0, 10.0], &[40.0, 2.0], 1e8).unwrap();
        assert!((flat - 1.0).abs() < 1e-8);
        assert!(gaussian_kernel(&[0.0], &[0.0, 1.0], 1.0).is_err());
        assert!(gaussian_kernel(&[0.0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn median_bandwidth_cases() {
        let b = median_bandwidth(array![[0.0]].view(), array![[2.0]].view()).unwrap();
        assert_eq!(b.sigma, 2.0);
        let b = median_bandwidth(array![[0.0], [1.0]].view(), array![[3.0]].view()).unwrap();
        assert_eq!(b.sigma, 2.0);
        let b = median_bandwidth(array![[1.5, 1.0], [1.5, 1.0]].view(), array![[1.5, 1.0]].view()).unwrap();
        assert_eq!(b, Bandwidth { sigma: 1.0, degenerate: true });
        let empty = Array2::<f64>::zeros((0, 2));
        assert!(median_bandwidth(empty.view(), empty.view()).is_err());
    }

    #[test]
    fn ladder_is_centered_on_median() {
        let cfg = MkMmdConfig::default();
        let s = cfg.sigmas(array![[0.0]].view(), array![[2.0]].view()).unwrap();
        assert_eq!(s, vec![0.5, 1.0, 2.0, 4.0, 8.0]);
        let one = MkMmdConfig { n_kernels: 1, ..cfg.clone() };
        assert_eq!(one.sigmas(array![[0.0]].view(), array![[2.0]].view()).unwrap(), vec![2.0]);
        let three = MkMmdConfig { n_kernels: 3, ..cfg };
        assert_eq!(three.sigmas(array![[0.0]].view(), array![[2.0]].view()).unwrap(), vec![1.0, 2.0, 4.0]);
    }

    #[test]
    fn single_point_sets_by_hand() {
        let cfg = MkMmdConfig {
            bandwidth_mode: BandwidthMode::Fixed,
            fixed_sigmas: Some(vec![1.0]),
            ..MkMmdConfig::default()
        };
        let v = mk_mmd(array![[0.0]].view(), array![[2.0]].view(), &cfg).unwrap();
        assert!((v - (2.0 - 2.0 * (-2.0f64).exp())).abs() < 1e-15);
        assert!((v - 1.7293294).abs() < 1e-7);
    }

    #[test]
    fn identical_sets_are_zero() {
        let h = array![[0.1, 0.2], [0.5, -1.0], [2.0, 0.0]];
        let v = mk_mmd(h.view(), h.view(), &MkMmdConfig::default()).unwrap();
        assert!(v.abs() < 1e-15);
    }

    #[test]
    fn size_and_dimension_errors() {
        let cfg = MkMmdConfig::default();
        let a = array![[0.0, 1.0]];
        let b = array![[0.0]];
        assert!(mk_mmd(a.view(), b.view(), &cfg).is_err());
        let unb = MkMmdConfig { estimator: Estimator::Unbiased, ..cfg };
        assert!(mk_mmd(a.view(), a.view(), &unb).is_err());
        let bad = MkMmdConfig { layer_range: (2, 1), ..MkMmdConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn weight_schedule() {
        assert_eq!(mmd_weight(0, 1000), 0.0);
        assert!((mmd_weight(500, 1000) - 0.9866143).abs() < 1e-6);
        assert!((mmd_weight(1000, 1000) - 0.9999092).abs() < 1e-6);
        for n in 0..1000 {
            assert!(mmd_weight(n + 1, 1000) > mmd_weight(n, 1000));
        }
    }

    #[test]
    fn layer_sum_requires_layers() {
        let h = vec![array![[0.0], [1.0]]];
        let cfg = MkMmdConfig { layer_range: (0, 1), ..MkMmdConfig::default() };
        assert!(layer_mmd_sum(&h, &h, &cfg).is_err());
    }
}
