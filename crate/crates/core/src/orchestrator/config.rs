//! Run configuration: one TOML document covering data, architectures,
//! optimization and the iteration schedule.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::CaseStudyConfig;
use crate::error::{Error, IoContext, Result};
use crate::net::{DanTrArch, SurrogateArch};
use crate::train::{DanTrTrainConfig, TrainConfig};

/// Architecture of the final (Model-L) training.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FinalArch {
    /// Same layout as the iteration surrogate.
    #[default]
    SurrogateDefault,
    /// Any other recurrent layout, e.g. a wider network for the last step.
    Pluggable(SurrogateArch),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrameworkConfig {
    /// Independent initializations trained per iteration.
    pub n_inits: usize,
    /// PL iterations before each transfer iteration.
    pub pl_per_block: usize,
    /// Cap on the number of iterations before the final training, counting
    /// the direct one.
    pub max_iterations: usize,
    pub stop_epsilon: f64,
    pub stop_patience: usize,
    pub pseudo_count_per_iter: usize,
    pub final_arch: FinalArch,
    pub master_seed: u64,
    /// Train the final model on every pseudo snapshot instead of the latest.
    pub accumulate_pseudo: bool,
    /// Fraction of the latest pseudo set, ranked by teacher-student
    /// agreement, added to the transfer target set. `0` keeps D_t only.
    pub enlarge_target_fraction: f64,
}

impl Default for FrameworkConfig {
    fn default() -> Self {
        Self {
            n_inits: 3,
            pl_per_block: 2,
            max_iterations: 7,
            stop_epsilon: 0.02,
            stop_patience: 2,
            pseudo_count_per_iter: 500,
            final_arch: FinalArch::SurrogateDefault,
            master_seed: 0,
            accumulate_pseudo: false,
            enlarge_target_fraction: 0.0,
        }
    }
}

impl FrameworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_inits == 0 {
            return bad("framework.n_inits must be >= 1".into());
        }
        if self.pl_per_block == 0 {
            return bad("framework.pl_per_block must be >= 1: transfer iterations need a pseudo-labeled source".into());
        }
        if self.pl_per_block > 2 {
            log::warn!("pl_per_block = {}: PL gains usually fade after one or two rounds", self.pl_per_block);
        }
        if self.max_iterations == 0 {
            return bad("framework.max_iterations must be >= 1".into());
        }
        if self.pseudo_count_per_iter == 0 {
            return bad(
                "framework.pseudo_count_per_iter = 0 would make every PL iteration a repeat of direct training; \
                 set it to a positive count (500 at desk scale)"
                    .into(),
            );
        }
        if !(self.stop_epsilon >= 0.0) || self.stop_patience == 0 {
            return bad("framework.stop_epsilon must be >= 0 and stop_patience >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.enlarge_target_fraction) {
            return bad(format!(
                "framework.enlarge_target_fraction {} must lie in [0, 1]",
                self.enlarge_target_fraction
            ));
        }
        Ok(())
    }
}

/// Where the datasets come from: a `gen-data` directory, or generated on
/// the fly from `case_study`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub dir: Option<PathBuf>,
    pub case_study: CaseStudyConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub framework: FrameworkConfig,
    pub surrogate: SurrogateArch,
    pub dantr: DanTrArch,
    /// Optimization of PL iterations; also direct and final training unless
    /// overridden below.
    pub train: TrainConfig,
    pub train_direct: Option<TrainConfig>,
    pub train_final: Option<TrainConfig>,
    pub train_dantr: TrainConfig,
    pub transfer: DanTrTrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            framework: FrameworkConfig::default(),
            surrogate: SurrogateArch::default(),
            dantr: DanTrArch::default(),
            train: TrainConfig::default(),
            train_direct: None,
            train_final: None,
            train_dantr: TrainConfig::default(),
            transfer: DanTrTrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.framework.validate()?;
        self.surrogate.block()?;
        self.final_arch().block()?;
        let net = crate::net::DanTr::new(self.dantr.clone())?;
        for (name, cfg) in [
            ("train", Some(&self.train)),
            ("train_direct", self.train_direct.as_ref()),
            ("train_final", self.train_final.as_ref()),
            ("train_dantr", Some(&self.train_dantr)),
        ] {
            if let Some(c) = cfg {
                c.validate().map_err(|e| Error::Config(format!("[{name}] {e}")))?;
            }
        }
        self.transfer.mmd.validate()?;
        let n_head = net.head_block().layers().len();
        if self.transfer.mmd_enabled && self.transfer.mmd.layer_range.1 >= n_head {
            return Err(Error::Config(format!(
                "transfer.mmd.layer_range {:?} exceeds the {n_head} tailored layers",
                self.transfer.mmd.layer_range
            )));
        }
        if self.data.dir.is_none() {
            self.data.case_study.validate()?;
        }
        Ok(())
    }

    pub fn direct_train(&self) -> &TrainConfig {
        self.train_direct.as_ref().unwrap_or(&self.train)
    }

    pub fn final_train(&self) -> &TrainConfig {
        self.train_final.as_ref().unwrap_or(&self.train)
    }

    pub fn final_arch(&self) -> SurrogateArch {
        match &self.framework.final_arch {
            FinalArch::SurrogateDefault => self.surrogate.clone(),
            FinalArch::Pluggable(a) => a.clone(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }
}
