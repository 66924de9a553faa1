//! Synthetic data factory: sine-superposition displacement histories,
//! unlabeled-pool augmentation and a Bouc-Wen hysteretic labeling oracle.

mod augment;
mod boucwen;
mod case_study;

pub use augment::{augment_unlabeled, slice_padded, splice, weighted_average, AugmentConfig, AugmentOp};
pub use boucwen::{boucwen_response, boucwen_trace, BoucWenParams, BoucWenTrace};
pub use case_study::{build_case_study, CaseStudy, CaseStudyConfig, GenerationReport, Histogram};

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Parameters of a superposition of randomly drawn sine waves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SineMixConfig {
    pub n_components: usize,
    /// Period bounds in seconds.
    pub period_range: (f64, f64),
    /// Amplitude bounds in length units.
    pub amplitude_range: (f64, f64),
    pub length: usize,
    pub dt: f64,
    /// Rescale so that `max |u| == target_peak`.
    #[serde(default)]
    pub target_peak: Option<f64>,
    /// Shift the series so it starts from rest (`u[0] == 0`), before rescaling.
    #[serde(default)]
    pub start_at_rest: bool,
}

impl Default for SineMixConfig {
    fn default() -> Self {
        Self {
            n_components: 3,
            period_range: (0.5, 4.0),
            amplitude_range: (0.5, 1.5),
            length: 256,
            dt: 0.02,
            target_peak: None,
            start_at_rest: true,
        }
    }
}

impl SineMixConfig {
    pub fn validate(&self) -> Result<()> {
        let ordered = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && 0.0 < lo && lo <= hi;
        if self.n_components == 0 {
            return Err(Error::Config("sine mix needs at least one component".into()));
        }
        if !ordered(self.period_range) || !ordered(self.amplitude_range) {
            return Err(Error::Config(format!(
                "period range {:?} and amplitude range {:?} must be positive and ordered",
                self.period_range, self.amplitude_range
            )));
        }
        if self.length < 2 || !(self.dt > 0.0) {
            return Err(Error::Config(format!(
                "sine mix needs length >= 2 and dt > 0 (got {}, {})",
                self.length, self.dt
            )));
        }
        if (self.length as f64) * self.dt < self.period_range.1 {
            return Err(Error::Config(format!(
                "duration {} s is shorter than the longest period {} s",
                self.length as f64 * self.dt,
                self.period_range.1
            )));
        }
        if let Some(p) = self.target_peak {
            if !(p > 0.0 && p.is_finite()) {
                return Err(Error::Config(format!("target peak {p} must be positive")));
            }
        }
        Ok(())
    }
}

/// `u(t) = sum_i a_i sin(2 pi t / T_i + phi_i)` sampled at `dt`.
pub fn gen_sine_mix(config: &SineMixConfig, seed: u64) -> Result<Vec<f64>> {
    config.validate()?;
    let mut rng = seed::rng(seed);
    let waves: Vec<(f64, f64, f64)> = (0..config.n_components)
        .map(|_| {
            let period = uniform(&mut rng, config.period_range);
            let amp = uniform(&mut rng, config.amplitude_range);
            let phase = rng.random_range(0.0..2.0 * PI);
            (amp, period, phase)
        })
        .collect();
    let mut u: Vec<f64> = (0..config.length)
        .map(|k| {
            let t = k as f64 * config.dt;
            waves
                .iter()
                .map(|&(a, period, phase)| a * (2.0 * PI * t / period + phase).sin())
                .sum()
        })
        .collect();
    if config.start_at_rest {
        let u0 = u[0];
        u.iter_mut().for_each(|v| *v -= u0);
    }
    if let Some(peak) = config.target_peak {
        let current = peak_abs(&u);
        if current > 0.0 {
            let scale = peak / current;
            u.iter_mut().for_each(|v| *v *= scale);
        }
    }
    Ok(u)
}

pub(crate) fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

pub fn peak_abs(values: &[f64]) -> f64 {
    values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}
