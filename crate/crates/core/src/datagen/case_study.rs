use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    augment_unlabeled, boucwen_response, gen_sine_mix, peak_abs, uniform, AugmentConfig, AugmentOp,
    BoucWenParams, SineMixConfig,
};
use crate::data::{
    fit_normalization, fit_normalization_joint, split_dataset, write_dataset, Dataset,
    NormalizationParams, Role, TimeSeriesSample,
};
use crate::error::{Error, IoContext, Result};
use crate::seed::{self, derive_seed};

const STREAM_LABELED: u64 = 1;
const STREAM_BASE: u64 = 2;
const STREAM_AUGMENT: u64 = 3;
const STREAM_SPLIT: u64 = 4;
const STREAM_TARGET: u64 = 5;

/// Everything needed to regenerate the synthetic case study from one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CaseStudyConfig {
    pub master_seed: u64,
    pub length: usize,
    pub dt: f64,
    /// Labeled pairs before splitting.
    pub n_labeled: usize,
    pub splits: (f64, f64, f64),
    /// Size of the small target set drawn from the training split; `0` keeps
    /// the whole split.
    pub n_target: usize,
    pub n_components: usize,
    pub period_range: (f64, f64),
    pub amplitude_range: (f64, f64),
    /// Peak displacement of labeled inputs, drawn uniformly.
    pub peak_range: (f64, f64),
    pub boucwen: Option<BoucWenParams>,
    /// Raw sequences the unlabeled pool is augmented from.
    pub n_unlabeled_base: usize,
    pub unlabeled_peak_range: (f64, f64),
    pub n_unlabeled: usize,
    pub augment_ops: Vec<AugmentOp>,
    pub min_slice_fraction: f64,
    /// Fit bounds on all labeled data instead of the training split only.
    pub joint_normalization: bool,
}

impl Default for CaseStudyConfig {
    fn default() -> Self {
        Self {
            master_seed: 0,
            length: 256,
            dt: 0.02,
            n_labeled: 400,
            splits: (0.8, 0.1, 0.1),
            n_target: 10,
            n_components: 3,
            period_range: (0.5, 4.0),
            amplitude_range: (0.5, 1.5),
            peak_range: (3.0, 3.5),
            boucwen: None,
            n_unlabeled_base: 200,
            unlabeled_peak_range: (2.0, 4.0),
            n_unlabeled: 2000,
            augment_ops: vec![AugmentOp::Slice, AugmentOp::Splice, AugmentOp::WeightedAverage],
            min_slice_fraction: 0.5,
            joint_normalization: false,
        }
    }
}

impl CaseStudyConfig {
    pub fn boucwen_params(&self) -> BoucWenParams {
        self.boucwen.unwrap_or_else(|| BoucWenParams::default_for(self.dt))
    }

    fn sine(&self, peak: f64) -> SineMixConfig {
        SineMixConfig {
            n_components: self.n_components,
            period_range: self.period_range,
            amplitude_range: self.amplitude_range,
            length: self.length,
            dt: self.dt,
            target_peak: Some(peak),
            start_at_rest: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sine(1.0).validate()?;
        self.boucwen_params().validate(self.dt)?;
        let ordered = |(lo, hi): (f64, f64)| 0.0 < lo && lo <= hi && hi.is_finite();
        if !ordered(self.peak_range) || !ordered(self.unlabeled_peak_range) {
            return Err(Error::Config("peak ranges must be positive and ordered".into()));
        }
        if self.n_unlabeled > 0 && self.n_unlabeled_base < 2 {
            return Err(Error::Config("unlabeled pool needs at least 2 base sequences".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn of(values: &[f64], bins: usize) -> Self {
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut counts = vec![0; bins.max(1)];
        if values.is_empty() {
            return Self { lo: 0.0, hi: 0.0, counts };
        }
        let width = (hi - lo) / counts.len() as f64;
        for &v in values {
            let b = if width > 0.0 {
                (((v - lo) / width) as usize).min(counts.len() - 1)
            } else {
                0
            };
            counts[b] += 1;
        }
        Self { lo, hi, counts }
    }
}

/// Counts, seeds and peak-value histograms written next to the datasets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub config: CaseStudyConfig,
    pub counts: Counts,
    pub seeds: Seeds,
    pub normalization: NormalizationParams,
    pub input_peaks: Histogram,
    pub output_peaks: Histogram,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    pub target: usize,
    pub unlabeled: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub master: u64,
    pub split: u64,
    pub target: u64,
    pub augment: u64,
}

/// The generated datasets, in physical units, each tagged with the fitted bounds.
#[derive(Clone, Debug)]
pub struct CaseStudy {
    /// Full labeled training split.
    pub train: Dataset,
    /// Small target set D_t drawn from `train`.
    pub target: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
    pub unlabeled: Dataset,
    pub norm: NormalizationParams,
    pub report: GenerationReport,
}

pub const REPORT_FILE: &str = "generation-report.toml";

impl CaseStudy {
    /// Writes each dataset to its own subdirectory plus the generation report.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).at(dir)?;
        write_dataset(&self.train, &dir.join("train"))?;
        write_dataset(&self.target, &dir.join("target"))?;
        write_dataset(&self.validation, &dir.join("validation"))?;
        write_dataset(&self.test, &dir.join("test"))?;
        write_dataset(&self.unlabeled, &dir.join("unlabeled"))?;
        let text = toml::to_string(&self.report).map_err(|e| Error::Malformed {
            path: dir.join(REPORT_FILE),
            reason: e.to_string(),
        })?;
        fs::write(dir.join(REPORT_FILE), text).at(dir.join(REPORT_FILE))
    }
}

fn labeled_sample(cfg: &CaseStudyConfig, bw: &BoucWenParams, i: usize) -> Result<TimeSeriesSample> {
    let s = derive_seed(&[cfg.master_seed, STREAM_LABELED, i as u64]);
    let peak = uniform(&mut seed::rng(s), cfg.peak_range);
    let u = gen_sine_mix(&cfg.sine(peak), derive_seed(&[s, 1]))?;
    let r = boucwen_response(&u, cfg.dt, bw)?;
    TimeSeriesSample::labeled(format!("lab-{i:04}"), u, r)
}

fn base_sample(cfg: &CaseStudyConfig, i: usize) -> Result<TimeSeriesSample> {
    let s = derive_seed(&[cfg.master_seed, STREAM_BASE, i as u64]);
    let mut rng = seed::rng(s);
    let peak = uniform(&mut rng, cfg.unlabeled_peak_range);
    // base records vary their component count for extra spread
    let n = rng.random_range(1..=cfg.n_components.max(1) + 1);
    let sine = SineMixConfig {
        n_components: n,
        ..cfg.sine(peak)
    };
    TimeSeriesSample::unlabeled(format!("base-{i:04}"), gen_sine_mix(&sine, derive_seed(&[s, 1]))?)
}

/// Generates labeled pairs through the Bouc-Wen oracle, splits them, draws the
/// target set, and augments an unlabeled pool.
pub fn build_case_study(cfg: &CaseStudyConfig) -> Result<CaseStudy> {
    cfg.validate()?;
    let bw = cfg.boucwen_params();

    let labeled = (0..cfg.n_labeled)
        .into_par_iter()
        .map(|i| labeled_sample(cfg, &bw, i))
        .collect::<Result<Vec<_>>>()?;
    let input_peaks: Vec<f64> = labeled.iter().map(|s| peak_abs(&s.input)).collect();
    let output_peaks: Vec<f64> = labeled
        .iter()
        .map(|s| peak_abs(s.output.as_deref().unwrap_or(&[])))
        .collect();
    let all = Dataset::new(Role::TargetLabeled, cfg.dt, labeled)?;

    let split_seed = derive_seed(&[cfg.master_seed, STREAM_SPLIT]);
    let (train, val, test) = split_dataset(&all, cfg.splits, split_seed)?;
    let norm = if cfg.joint_normalization {
        fit_normalization_joint(&[&train, &val, &test])?
    } else {
        fit_normalization(&train)?
    };

    let target_seed = derive_seed(&[cfg.master_seed, STREAM_TARGET]);
    let target = if cfg.n_target == 0 {
        train.clone()
    } else {
        train.subsample(cfg.n_target, target_seed)?
    };

    let augment_seed = derive_seed(&[cfg.master_seed, STREAM_AUGMENT]);
    let unlabeled = if cfg.n_unlabeled == 0 {
        Dataset::empty(Role::UnlabeledPool, cfg.dt)
    } else {
        let base = (0..cfg.n_unlabeled_base)
            .into_par_iter()
            .map(|i| base_sample(cfg, i))
            .collect::<Result<Vec<_>>>()?;
        let base = Dataset::new(Role::UnlabeledPool, cfg.dt, base)?;
        augment_unlabeled(
            &base,
            &AugmentConfig {
                ops_enabled: cfg.augment_ops.clone(),
                count: cfg.n_unlabeled,
                seed: augment_seed,
                min_slice_fraction: cfg.min_slice_fraction,
            },
        )?
    };

    let tag = |d: Dataset| d.with_scale(crate::data::Scale::Physical, Some(norm));
    let report = GenerationReport {
        config: cfg.clone(),
        counts: Counts {
            train: train.len(),
            validation: val.len(),
            test: test.len(),
            target: target.len(),
            unlabeled: unlabeled.len(),
        },
        seeds: Seeds {
            master: cfg.master_seed,
            split: split_seed,
            target: target_seed,
            augment: augment_seed,
        },
        normalization: norm,
        input_peaks: Histogram::of(&input_peaks, 10),
        output_peaks: Histogram::of(&output_peaks, 10),
    };
    Ok(CaseStudy {
        train: tag(train),
        target: tag(target),
        validation: tag(val),
        test: tag(test),
        unlabeled: tag(unlabeled),
        norm,
        report,
    })
}
