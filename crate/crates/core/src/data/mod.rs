//! Sample and dataset types, min-max normalization and deterministic splits.
//!
//! Datasets carry their own role tag, time step, scale (physical units or
//! normalized) and, once fitted, the normalization bounds that map them into
//! the network's working range of `[-1, 1]`.

mod io;

pub use io::{import_columns, import_directory, read_dataset, write_dataset, MANIFEST_FILE};

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where a sample's output sequence came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    RealLabel,
    PseudoLabel,
    Unlabeled,
}

/// One displacement history with an optional reaction-force history.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesSample {
    pub id: String,
    pub input: Vec<f64>,
    pub output: Option<Vec<f64>>,
    pub provenance: Provenance,
}

impl TimeSeriesSample {
    pub fn labeled(id: impl Into<String>, input: Vec<f64>, output: Vec<f64>) -> Result<Self> {
        let s = Self {
            id: id.into(),
            input,
            output: Some(output),
            provenance: Provenance::RealLabel,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn pseudo_labeled(
        id: impl Into<String>,
        input: Vec<f64>,
        output: Vec<f64>,
    ) -> Result<Self> {
        let s = Self {
            id: id.into(),
            input,
            output: Some(output),
            provenance: Provenance::PseudoLabel,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn unlabeled(id: impl Into<String>, input: Vec<f64>) -> Result<Self> {
        let s = Self {
            id: id.into(),
            input,
            output: None,
            provenance: Provenance::Unlabeled,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.input.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        self.output.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |reason: String| Error::InvalidSample {
            id: self.id.clone(),
            reason,
        };
        if self.input.len() < 2 {
            return Err(invalid(format!(
                "input length {} is below the minimum of 2",
                self.input.len()
            )));
        }
        if let Some(i) = self.input.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("non-finite input at index {i}")));
        }
        match (&self.output, self.provenance) {
            (None, Provenance::Unlabeled) => {}
            (Some(out), Provenance::RealLabel | Provenance::PseudoLabel) => {
                if out.len() != self.input.len() {
                    return Err(invalid(format!(
                        "output length {} differs from input length {}",
                        out.len(),
                        self.input.len()
                    )));
                }
                if let Some(i) = out.iter().position(|v| !v.is_finite()) {
                    return Err(invalid(format!("non-finite output at index {i}")));
                }
            }
            (None, p) => return Err(invalid(format!("provenance {p:?} requires an output"))),
            (Some(_), Provenance::Unlabeled) => {
                return Err(invalid("unlabeled sample carries an output".into()))
            }
        }
        Ok(())
    }
}

/// Role a dataset plays in the training framework.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    /// D_t: the small set with real labels.
    TargetLabeled,
    /// D_u: input-only sequences.
    UnlabeledPool,
    /// D_s / D_f: inputs labeled by a trained model.
    PseudoSource,
    Validation,
    Test,
    /// Union of real- and pseudo-labeled samples used as one training set.
    Combined,
}

impl Role {
    pub fn admits(self, p: Provenance) -> bool {
        match self {
            Role::TargetLabeled | Role::Validation | Role::Test => p == Provenance::RealLabel,
            Role::UnlabeledPool => p == Provenance::Unlabeled,
            Role::PseudoSource => p == Provenance::PseudoLabel,
            Role::Combined => p != Provenance::Unlabeled,
        }
    }
}

/// Whether values are in physical units or mapped through [`normalize`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scale {
    Physical,
    Normalized,
}

/// Min-max bounds, in physical units, for the input and output channels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationParams {
    pub input_min: f64,
    pub input_max: f64,
    pub output_min: f64,
    pub output_max: f64,
}

impl NormalizationParams {
    pub fn validate(&self) -> Result<()> {
        let ok = |lo: f64, hi: f64| lo.is_finite() && hi.is_finite() && lo < hi;
        if !ok(self.input_min, self.input_max) || !ok(self.output_min, self.output_max) {
            return Err(Error::Config(format!("invalid normalization bounds {self:?}")));
        }
        Ok(())
    }

    pub fn normalize_input(&self, v: f64) -> f64 {
        to_unit(v, self.input_min, self.input_max)
    }

    pub fn normalize_output(&self, v: f64) -> f64 {
        to_unit(v, self.output_min, self.output_max)
    }

    pub fn denormalize_input(&self, v: f64) -> f64 {
        from_unit(v, self.input_min, self.input_max)
    }

    pub fn denormalize_output(&self, v: f64) -> f64 {
        from_unit(v, self.output_min, self.output_max)
    }
}

fn to_unit(v: f64, lo: f64, hi: f64) -> f64 {
    2.0 * (v - lo) / (hi - lo) - 1.0
}

fn from_unit(v: f64, lo: f64, hi: f64) -> f64 {
    (v + 1.0) * 0.5 * (hi - lo) + lo
}

/// An ordered collection of samples sharing one role.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub role: Role,
    /// Uniform time step in seconds.
    pub dt: f64,
    pub scale: Scale,
    pub norm: Option<NormalizationParams>,
    samples: Vec<TimeSeriesSample>,
}

impl Dataset {
    pub fn new(role: Role, dt: f64, samples: Vec<TimeSeriesSample>) -> Result<Self> {
        let ds = Self {
            role,
            dt,
            scale: Scale::Physical,
            norm: None,
            samples,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn empty(role: Role, dt: f64) -> Self {
        Self {
            role,
            dt,
            scale: Scale::Physical,
            norm: None,
            samples: Vec::new(),
        }
    }

    pub fn with_scale(mut self, scale: Scale, norm: Option<NormalizationParams>) -> Self {
        self.scale = scale;
        self.norm = norm;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::InvalidDataset(format!("time step {} must be positive", self.dt)));
        }
        let mut seen = HashSet::with_capacity(self.samples.len());
        for s in &self.samples {
            s.validate()?;
            if !self.role.admits(s.provenance) {
                return Err(Error::InvalidDataset(format!(
                    "sample {} has provenance {:?}, not admitted by role {:?}",
                    s.id, s.provenance, self.role
                )));
            }
            if !seen.insert(s.id.as_str()) {
                return Err(Error::InvalidDataset(format!("duplicate sample id {}", s.id)));
            }
        }
        if let Some(n) = &self.norm {
            n.validate()?;
        }
        Ok(())
    }

    pub fn samples(&self) -> &[TimeSeriesSample] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<TimeSeriesSample> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&TimeSeriesSample> {
        self.samples.iter().find(|s| s.id == id)
    }

    /// Common sequence length, or `None` when lengths differ or the set is empty.
    pub fn uniform_length(&self) -> Option<usize> {
        let first = self.samples.first()?.len();
        self.samples
            .iter()
            .all(|s| s.len() == first)
            .then_some(first)
    }

    /// Concatenates two labeled datasets into one `Combined` training set.
    pub fn union(a: &Dataset, b: &Dataset) -> Result<Dataset> {
        if a.scale != b.scale || a.norm != b.norm {
            return Err(Error::InvalidDataset(
                "union of datasets with different scale or normalization".into(),
            ));
        }
        if (a.dt - b.dt).abs() > 1e-12 * a.dt.abs().max(b.dt.abs()) {
            return Err(Error::InvalidDataset(format!(
                "union of datasets with time steps {} and {}",
                a.dt, b.dt
            )));
        }
        let samples = a.samples.iter().chain(&b.samples).cloned().collect();
        let ds = Dataset {
            role: Role::Combined,
            dt: a.dt,
            scale: a.scale,
            norm: a.norm,
            samples,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Returns a copy holding only the samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            role: self.role,
            dt: self.dt,
            scale: self.scale,
            norm: self.norm,
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    /// Random subset of `k` samples, e.g. drawing D_10 from a larger training split.
    pub fn subsample(&self, k: usize, seed: u64) -> Result<Dataset> {
        if k > self.len() {
            return Err(Error::InvalidDataset(format!(
                "cannot draw {k} samples from a dataset of {}",
                self.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let idx = rand::seq::index::sample(&mut rng, self.len(), k).into_vec();
        Ok(self.select(&idx))
    }
}

/// Global min/max over every input value and every output value.
pub fn fit_normalization(dataset: &Dataset) -> Result<NormalizationParams> {
    fit_normalization_joint(&[dataset])
}

/// Like [`fit_normalization`], pooling several datasets (joint fitting).
pub fn fit_normalization_joint(datasets: &[&Dataset]) -> Result<NormalizationParams> {
    if datasets.iter().all(|d| d.is_empty()) {
        return Err(Error::EmptyDataset("cannot fit normalization".into()));
    }
    let (mut imin, mut imax) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut omin, mut omax) = (f64::INFINITY, f64::NEG_INFINITY);
    for d in datasets {
        if d.scale != Scale::Physical {
            return Err(Error::InvalidDataset(
                "normalization must be fitted on physical-unit data".into(),
            ));
        }
        for s in d.samples() {
            let out = s.output.as_ref().ok_or_else(|| {
                Error::InvalidDataset(format!(
                    "sample {} has no output; fitting needs a labeled dataset",
                    s.id
                ))
            })?;
            for &v in &s.input {
                imin = imin.min(v);
                imax = imax.max(v);
            }
            for &v in out {
                omin = omin.min(v);
                omax = omax.max(v);
            }
        }
    }
    if imin == imax {
        return Err(Error::DegenerateChannel {
            channel: "input",
            value: imin,
        });
    }
    if omin == omax {
        return Err(Error::DegenerateChannel {
            channel: "output",
            value: omin,
        });
    }
    Ok(NormalizationParams {
        input_min: imin,
        input_max: imax,
        output_min: omin,
        output_max: omax,
    })
}

/// Maps each value to `2 (v - min) / (max - min) - 1` per channel.
///
/// Values outside the fitted bounds are passed through and land outside
/// `[-1, 1]`; nothing is clipped.
pub fn normalize(sample: &TimeSeriesSample, params: &NormalizationParams) -> TimeSeriesSample {
    TimeSeriesSample {
        id: sample.id.clone(),
        input: sample.input.iter().map(|&v| params.normalize_input(v)).collect(),
        output: sample
            .output
            .as_ref()
            .map(|o| o.iter().map(|&v| params.normalize_output(v)).collect()),
        provenance: sample.provenance,
    }
}

/// Inverse of [`normalize`].
pub fn denormalize(sample: &TimeSeriesSample, params: &NormalizationParams) -> TimeSeriesSample {
    TimeSeriesSample {
        id: sample.id.clone(),
        input: sample.input.iter().map(|&v| params.denormalize_input(v)).collect(),
        output: sample
            .output
            .as_ref()
            .map(|o| o.iter().map(|&v| params.denormalize_output(v)).collect()),
        provenance: sample.provenance,
    }
}

/// Normalizes every sample and tags the dataset with `params`.
pub fn normalize_dataset(dataset: &Dataset, params: &NormalizationParams) -> Result<Dataset> {
    params.validate()?;
    if dataset.scale == Scale::Normalized {
        return Err(Error::InvalidDataset("dataset is already normalized".into()));
    }
    Ok(Dataset {
        role: dataset.role,
        dt: dataset.dt,
        scale: Scale::Normalized,
        norm: Some(*params),
        samples: dataset.samples.iter().map(|s| normalize(s, params)).collect(),
    })
}

/// Working-scale view of a dataset: physical datasets are normalized with
/// their stored bounds, normalized ones pass through.
pub fn ensure_normalized(dataset: Dataset) -> Result<Dataset> {
    match (dataset.scale, dataset.norm) {
        (Scale::Normalized, _) => Ok(dataset),
        (Scale::Physical, Some(p)) => normalize_dataset(&dataset, &p),
        (Scale::Physical, None) => Err(Error::InvalidDataset(
            "physical dataset has no normalization bounds".into(),
        )),
    }
}

/// Maps a normalized dataset back to physical units.
pub fn denormalize_dataset(dataset: &Dataset) -> Result<Dataset> {
    let params = match (dataset.scale, dataset.norm) {
        (Scale::Normalized, Some(p)) => p,
        _ => {
            return Err(Error::InvalidDataset(
                "dataset is not normalized or lacks normalization bounds".into(),
            ))
        }
    };
    Ok(Dataset {
        role: dataset.role,
        dt: dataset.dt,
        scale: Scale::Physical,
        norm: Some(params),
        samples: dataset.samples.iter().map(|s| denormalize(s, &params)).collect(),
    })
}

/// Split sizes for `n` samples: validation and test get `round(f * n)`, train
/// takes the remainder.
pub fn split_sizes(n: usize, fractions: (f64, f64, f64)) -> Result<(usize, usize, usize)> {
    let (tr, va, te) = fractions;
    if !(tr > 0.0 && va > 0.0 && te > 0.0) {
        return Err(Error::Config(format!("split fractions {fractions:?} must be positive")));
    }
    if (tr + va + te - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must sum to 1")));
    }
    if n < 3 {
        return Err(Error::InvalidDataset(format!("cannot split {n} samples three ways")));
    }
    let n_val = (va * n as f64).round() as usize;
    let n_test = (te * n as f64).round() as usize;
    let n_train = n.saturating_sub(n_val + n_test);
    if n_train == 0 || n_val == 0 || n_test == 0 || n_train + n_val + n_test != n {
        return Err(Error::InvalidDataset(format!(
            "split of {n} samples by {fractions:?} leaves an empty part ({n_train}/{n_val}/{n_test})"
        )));
    }
    Ok((n_train, n_val, n_test))
}

/// Seeded random partition into train / validation / test.
pub fn split_dataset(
    dataset: &Dataset,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    let (n_train, n_val, _) = split_sizes(dataset.len(), fractions)?;
    let mut idx: Vec<usize> = (0..dataset.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut train = dataset.select(&idx[..n_train]);
    let mut val = dataset.select(&idx[n_train..n_train + n_val]);
    let mut test = dataset.select(&idx[n_train + n_val..]);
    if dataset.role == Role::TargetLabeled {
        val.role = Role::Validation;
        test.role = Role::Test;
    }
    train.role = dataset.role;
    Ok((train, val, test))
}
