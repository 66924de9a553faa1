use std::cell::Cell;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::config::RunConfig;
use super::{argmin, mean, next_kind, relative_reduction, IterationKind, IterationRecord, RunRecord};
use crate::data::{ensure_normalized, normalize_dataset, read_dataset, write_dataset, Dataset, Role, Scale};
use crate::datagen::{build_case_study, CaseStudy};
use crate::error::{Error, IoContext, Result};
use crate::net::{load_checkpoint, save_checkpoint, Checkpoint, DanTr, Network, SurrogateArch};
use crate::seed::derive_seed;
use crate::train::{per_sample_mse, pseudo_label, train_dantr, train_supervised, MetricRecord, TrainConfig};

const PSEUDO_STREAM: u64 = 0x7073_6575_646f;

/// Normalized datasets a run works on.
#[derive(Clone, Debug)]
pub struct FrameworkData {
    pub target: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
    pub pool: Dataset,
}

impl FrameworkData {
    /// Normalizes the case-study splits with the bounds fitted at generation.
    pub fn from_case_study(cs: &CaseStudy) -> Result<Self> {
        Ok(Self {
            target: normalize_dataset(&cs.target, &cs.norm)?,
            validation: normalize_dataset(&cs.validation, &cs.norm)?,
            test: normalize_dataset(&cs.test, &cs.norm)?,
            pool: normalize_dataset(&cs.unlabeled, &cs.norm)?,
        })
    }

    /// Reads a `gen-data` directory (`target/`, `validation/`, `test/`,
    /// `unlabeled/`), normalizing physical datasets with their stored bounds.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let load = |name: &str| -> Result<Dataset> {
            let path = dir.join(name);
            ensure_normalized(read_dataset(&path)?).map_err(|e| match e {
                Error::InvalidDataset(msg) => Error::InvalidDataset(format!("{}: {msg}", path.display())),
                other => other,
            })
        };
        Ok(Self {
            target: load("target")?,
            validation: load("validation")?,
            test: load("test")?,
            pool: load("unlabeled")?,
        })
    }

    pub fn load(cfg: &super::DataConfig) -> Result<Self> {
        match &cfg.dir {
            Some(dir) => Self::from_dir(dir),
            None => Self::from_case_study(&build_case_study(&cfg.case_study)?),
        }
    }

    fn validate(&self) -> Result<()> {
        let sets = [&self.target, &self.validation, &self.test, &self.pool];
        if sets.iter().any(|d| d.scale != Scale::Normalized || d.norm != self.target.norm) {
            return Err(Error::InvalidDataset(
                "run datasets must all be normalized with the same bounds".into(),
            ));
        }
        for (name, d) in [("target", &self.target), ("validation", &self.validation), ("test", &self.test)] {
            if d.is_empty() || d.samples().iter().any(|s| !s.is_labeled()) {
                return Err(Error::InvalidDataset(format!("{name} set must be non-empty and labeled")));
            }
        }
        if self.pool.is_empty() {
            return Err(Error::EmptyDataset("unlabeled pool".into()));
        }
        Ok(())
    }
}

/// File names inside a run directory.
#[derive(Clone, Debug)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub const CONFIG: &'static str = "config-frozen.toml";
    pub const RECORDS: &'static str = "records.jsonl";
    pub const TENTATIVE: &'static str = "tentative.jsonl";
    pub const RUN_RECORD: &'static str = "run-record.json";
    pub const TARGET: &'static str = "snapshots/target";
    pub const VALIDATION: &'static str = "snapshots/validation";
    pub const TEST: &'static str = "snapshots/test";
    pub const POOL: &'static str = "snapshots/pool";

    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn tag(index: usize, tentative: bool) -> String {
        format!("iter{index:02}{}", if tentative { "t" } else { "" })
    }

    pub fn checkpoint(index: usize, init: usize, tentative: bool) -> String {
        format!("checkpoints/{}-init{init}.ckpt", Self::tag(index, tentative))
    }

    pub fn metrics(index: usize, init: usize, tentative: bool) -> String {
        format!("metrics/{}-init{init}.jsonl", Self::tag(index, tentative))
    }

    pub fn pseudo_snapshot(index: usize, tentative: bool) -> String {
        format!("snapshots/{}-pseudo", Self::tag(index, tentative))
    }

    pub fn derived_snapshot(index: usize, what: &str) -> String {
        format!("snapshots/{}-{what}", Self::tag(index, false))
    }
}

/// Writes a snapshot, or confirms an identical one is already there (a
/// resumed iteration regenerates the same data). Never rewrites.
fn write_snapshot_once(layout: &RunLayout, rel: &str, ds: &Dataset) -> Result<()> {
    let path = layout.resolve(rel);
    if path.join(crate::data::MANIFEST_FILE).exists() {
        if read_dataset(&path)? != *ds {
            return Err(Error::Protocol(format!("snapshot {rel} exists with different content")));
        }
        return Ok(());
    }
    write_dataset(ds, &path)
}

fn write_metrics(path: &Path, history: &[MetricRecord]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).at(dir)?;
    }
    let mut text = String::new();
    for r in history {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    fs::write(path, text).at(path)
}

fn append_line(path: &Path, rec: &IterationRecord) -> Result<()> {
    let mut line = serde_json::to_string(rec)?;
    line.push('\n');
    let mut f = OpenOptions::new().create(true).append(true).open(path).at(path)?;
    f.write_all(line.as_bytes()).at(path)?;
    f.sync_data().at(path)
}

/// Parses a line-delimited record file; a torn last line (interrupted
/// append) is dropped.
pub(crate) fn read_records(path: &Path) -> Result<Vec<IterationRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).at(path)?;
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        match serde_json::from_str(line) {
            Ok(r) => out.push(r),
            Err(e) if i + 1 == lines.len() && !text.ends_with('\n') => {
                log::warn!("dropping incomplete last record in {}: {e}", path.display());
            }
            Err(e) => {
                return Err(Error::Malformed {
                    path: path.to_path_buf(),
                    reason: format!("record {i}: {e}"),
                })
            }
        }
    }
    Ok(out)
}

/// Outcome of training `n_inits` models in one iteration.
struct Trained {
    seeds: Vec<u64>,
    val: Vec<f64>,
    student_val: Vec<f64>,
    checkpoints: Vec<String>,
}

/// A framework run bound to its directory. Iterations run one at a time
/// through [`FrameworkRun::step`]; every finished iteration is appended to
/// the record file before the next starts, so a run can be resumed.
pub struct FrameworkRun {
    layout: RunLayout,
    cfg: RunConfig,
    target: Dataset,
    validation: Dataset,
    pool: Dataset,
    test: Dataset,
    test_accesses: Cell<usize>,
    history: Vec<IterationRecord>,
}

impl FrameworkRun {
    /// Starts a new run in `dir`, which must not hold one already.
    pub fn create(dir: &Path, cfg: RunConfig, data: FrameworkData) -> Result<Self> {
        cfg.validate()?;
        data.validate()?;
        let layout = RunLayout::new(dir);
        let frozen = layout.resolve(RunLayout::CONFIG);
        if frozen.exists() {
            return Err(Error::Protocol(format!(
                "{} already holds a run; resume it instead",
                dir.display()
            )));
        }
        fs::create_dir_all(dir).at(dir)?;
        for (rel, ds) in [
            (RunLayout::TARGET, &data.target),
            (RunLayout::VALIDATION, &data.validation),
            (RunLayout::TEST, &data.test),
            (RunLayout::POOL, &data.pool),
        ] {
            write_snapshot_once(&layout, rel, ds)?;
        }
        fs::write(&frozen, cfg.to_toml()?).at(&frozen)?;
        let run = Self {
            layout,
            cfg,
            target: data.target,
            validation: data.validation,
            pool: data.pool,
            test: data.test,
            test_accesses: Cell::new(0),
            history: Vec::new(),
        };
        run.persist_run_record(None)?;
        Ok(run)
    }

    /// Reopens a run from its directory alone.
    pub fn resume(dir: &Path) -> Result<Self> {
        let layout = RunLayout::new(dir);
        let cfg = RunConfig::load(&layout.resolve(RunLayout::CONFIG))?;
        let history = read_records(&layout.resolve(RunLayout::RECORDS))?;
        for (i, r) in history.iter().enumerate() {
            if r.index != i || r.tentative {
                return Err(Error::Malformed {
                    path: layout.resolve(RunLayout::RECORDS),
                    reason: format!("record {i} has index {} (tentative {})", r.index, r.tentative),
                });
            }
        }
        // rewrite without any torn tail so later appends stay line-aligned
        let records = layout.resolve(RunLayout::RECORDS);
        let mut text = String::new();
        for r in &history {
            text.push_str(&serde_json::to_string(r)?);
            text.push('\n');
        }
        fs::write(&records, text).at(&records)?;
        let run = Self {
            target: read_dataset(&layout.resolve(RunLayout::TARGET))?,
            validation: read_dataset(&layout.resolve(RunLayout::VALIDATION))?,
            pool: read_dataset(&layout.resolve(RunLayout::POOL))?,
            test: read_dataset(&layout.resolve(RunLayout::TEST))?,
            test_accesses: Cell::new(0),
            layout,
            cfg,
            history,
        };
        log::info!("resumed run with {} finished iterations", run.history.len());
        Ok(run)
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &RunLayout {
        &self.layout
    }

    pub fn history(&self) -> &[IterationRecord] {
        &self.history
    }

    pub fn validation(&self) -> &Dataset {
        &self.validation
    }

    pub fn target(&self) -> &Dataset {
        &self.target
    }

    /// Number of test-set evaluations made by this process.
    pub fn test_accesses(&self) -> usize {
        self.test_accesses.get()
    }

    pub fn next_kind(&self) -> Option<IterationKind> {
        next_kind(&self.history, &self.cfg.framework)
    }

    pub fn is_complete(&self) -> bool {
        self.next_kind().is_none()
    }

    pub fn record(&self) -> RunRecord {
        let fin = self.history.last().filter(|r| r.kind == IterationKind::Final);
        RunRecord {
            master_seed: self.cfg.framework.master_seed,
            iterations: self.history.clone(),
            test_mse: fin.and_then(|r| r.test_mse),
            model_l: fin.map(|r| r.chosen_checkpoint.clone()),
            complete: fin.is_some(),
            error: None,
        }
    }

    fn persist_run_record(&self, error: Option<String>) -> Result<()> {
        let rec = RunRecord {
            error,
            ..self.record()
        };
        let path = self.layout.resolve(RunLayout::RUN_RECORD);
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_string_pretty(&rec)?).at(&tmp)?;
        fs::rename(&tmp, &path).at(&path)
    }

    /// Runs the next scheduled iteration; `None` once the run is complete.
    pub fn step(&mut self) -> Result<Option<&IterationRecord>> {
        let Some(kind) = self.next_kind() else {
            return Ok(None);
        };
        let index = self.history.len();
        log::info!("iteration {index}: {}", kind.label());
        let result = match kind {
            IterationKind::Direct => self.run_direct(),
            IterationKind::Pl => self.run_pl(false),
            IterationKind::Dantr => self.run_dantr(),
            IterationKind::Final => self.run_final(),
        };
        let rec = match result {
            Ok(r) => r,
            Err(e) => {
                self.persist_run_record(Some(format!("iteration {index} ({}): {e}", kind.label())))?;
                return Err(e);
            }
        };
        append_line(&self.layout.resolve(RunLayout::RECORDS), &rec)?;
        log::info!(
            "iteration {index} {}: avg val mse {:.4e} reduction {}",
            kind.label(),
            rec.avg_val_mse,
            rec.relative_reduction.map_or("-".into(), |r| format!("{:.2}%", 100.0 * r))
        );
        self.history.push(rec);
        self.persist_run_record(None)?;
        Ok(self.history.last())
    }

    /// Steps until the final training is recorded.
    pub fn run_to_end(&mut self) -> Result<RunRecord> {
        while self.step()?.is_some() {}
        Ok(self.record())
    }

    fn train_seed(&self, index: usize, init: usize) -> u64 {
        derive_seed(&[self.cfg.framework.master_seed, index as u64, init as u64])
    }

    fn pseudo_seed(&self, index: usize) -> u64 {
        derive_seed(&[self.cfg.framework.master_seed, index as u64, PSEUDO_STREAM])
    }

    fn train_surrogates(
        &self,
        index: usize,
        tentative: bool,
        arch: &SurrogateArch,
        tcfg: &TrainConfig,
        train: &Dataset,
    ) -> Result<Trained> {
        let block = arch.block()?;
        let (layout, val) = (&self.layout, &self.validation);
        let seeds: Vec<u64> = (0..self.cfg.framework.n_inits).map(|i| self.train_seed(index, i)).collect();
        let results = seeds
            .par_iter()
            .enumerate()
            .map(|(i, &seed)| -> Result<(f64, f64, String)> {
                let cfg = TrainConfig { seed, ..tcfg.clone() };
                let out = train_supervised(&block, train, val, &cfg, None)?;
                let (labeler, v) = out.labeler(&cfg);
                let is_teacher = out.teacher.as_ref().is_some_and(|t| std::ptr::eq(t, labeler));
                let mut ck = Checkpoint::from_network(labeler)
                    .with_meta("iteration", index)
                    .with_meta("init", i)
                    .with_meta("seed", seed)
                    .with_meta("val_mse", v)
                    .with_meta("weights", if is_teacher { "teacher" } else { "student" });
                if is_teacher {
                    ck = ck.with_array("student", out.student.params.clone());
                }
                let rel = RunLayout::checkpoint(index, i, tentative);
                save_checkpoint(&layout.resolve(&rel), &ck)?;
                write_metrics(&layout.resolve(&RunLayout::metrics(index, i, tentative)), &out.history)?;
                Ok((v, out.student_val_mse, rel))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Trained {
            seeds,
            val: results.iter().map(|r| r.0).collect(),
            student_val: results.iter().map(|r| r.1).collect(),
            checkpoints: results.into_iter().map(|r| r.2).collect(),
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn make_record(
        &self,
        index: usize,
        kind: IterationKind,
        t: Trained,
        parent: Option<String>,
        source: Option<String>,
        target: String,
        tentative: bool,
    ) -> IterationRecord {
        let avg = mean(&t.val);
        IterationRecord {
            index,
            kind,
            chosen_checkpoint: t.checkpoints[argmin(&t.val)].clone(),
            relative_reduction: self.history.last().map(|p| relative_reduction(p.avg_val_mse, avg)),
            seeds: t.seeds,
            per_seed_val_mse: t.val,
            student_val_mse: t.student_val,
            avg_val_mse: avg,
            checkpoints: t.checkpoints,
            parent_checkpoint: parent,
            source_dataset_ref: source,
            target_dataset_ref: target,
            test_mse: None,
            tentative,
        }
    }

    /// Loads the surrogate stored in a run checkpoint.
    pub fn load_model(&self, rel: &str) -> Result<Network> {
        load_checkpoint(&self.layout.resolve(rel), None)?.surrogate()
    }

    pub fn load_snapshot(&self, rel: &str) -> Result<Dataset> {
        read_dataset(&self.layout.resolve(rel))
    }

    fn last(&self) -> Result<&IterationRecord> {
        self.history
            .last()
            .ok_or_else(|| Error::Protocol("no finished iteration to build on".into()))
    }

    /// Step 1: `n_inits` surrogates trained on D_t alone.
    pub fn run_direct(&self) -> Result<IterationRecord> {
        if !self.history.is_empty() {
            return Err(Error::Protocol("direct training must be the first iteration".into()));
        }
        let t = self.train_surrogates(0, false, &self.cfg.surrogate, self.cfg.direct_train(), &self.target)?;
        Ok(self.make_record(0, IterationKind::Direct, t, None, None, RunLayout::TARGET.into(), false))
    }

    /// Pseudo-labels the pool with the latest chosen model and snapshots it.
    fn label_pool(&self, index: usize, tentative: bool) -> Result<(String, String, Dataset)> {
        let parent = self.last()?.chosen_checkpoint.clone();
        let labeler = self.load_model(&parent)?;
        let pseudo = pseudo_label(
            &labeler,
            &self.pool,
            self.cfg.framework.pseudo_count_per_iter,
            self.pseudo_seed(index),
        )?;
        let rel = RunLayout::pseudo_snapshot(index, tentative);
        write_snapshot_once(&self.layout, &rel, &pseudo)?;
        Ok((parent, rel, pseudo))
    }

    /// Step 2: train on D_f,i ∪ D_t where D_f,i is labeled by the latest
    /// chosen model. A tentative iteration is recorded separately and does
    /// not advance the schedule.
    pub fn run_pl(&self, tentative: bool) -> Result<IterationRecord> {
        let index = self.history.len();
        if self.last()?.kind == IterationKind::Final {
            return Err(Error::Protocol("the run is already complete".into()));
        }
        let (parent, rel, pseudo) = self.label_pool(index, tentative)?;
        let train = Dataset::union(&pseudo, &self.target)?;
        let t = self.train_surrogates(index, tentative, &self.cfg.surrogate, &self.cfg.train, &train)?;
        Ok(self.make_record(index, IterationKind::Pl, t, Some(parent), Some(rel), RunLayout::TARGET.into(), tentative))
    }

    /// Runs a tentative PL iteration from the current state and logs it to
    /// the tentative record file.
    pub fn tentative_pl(&self) -> Result<IterationRecord> {
        let rec = self.run_pl(true)?;
        append_line(&self.layout.resolve(RunLayout::TENTATIVE), &rec)?;
        Ok(rec)
    }

    /// Step 3: transfer training between the latest pseudo set and D_t;
    /// evaluated and selected through the target branch.
    pub fn run_dantr(&self) -> Result<IterationRecord> {
        let index = self.history.len();
        let latest_pl = self
            .history
            .iter()
            .rev()
            .find(|r| r.kind == IterationKind::Pl)
            .ok_or_else(|| Error::Protocol("a transfer iteration needs a preceding PL iteration".into()))?;
        let source_ref = latest_pl.source_dataset_ref.clone().expect("PL records carry their snapshot");
        let source = self.load_snapshot(&source_ref)?;
        let (target, target_ref) = self.transfer_target(index, latest_pl, &source)?;

        let net = DanTr::new(self.cfg.dantr.clone())?;
        let (layout, val, tcfg, dcfg) = (&self.layout, &self.validation, &self.cfg.train_dantr, &self.cfg.transfer);
        let mut parent = None;
        let mut init = None;
        if dcfg.warm_start {
            let rel = self.last()?.chosen_checkpoint.clone();
            match net.params_from_surrogate(&self.load_model(&rel)?) {
                Some(p) => {
                    init = Some(p);
                    parent = Some(rel);
                }
                None => log::info!("transfer layer stack differs from the surrogate; starting from a fresh initialization"),
            }
        }
        let seeds: Vec<u64> = (0..self.cfg.framework.n_inits).map(|i| self.train_seed(index, i)).collect();
        let results = seeds
            .par_iter()
            .enumerate()
            .map(|(i, &seed)| -> Result<(f64, f64, String)> {
                let cfg = TrainConfig { seed, ..tcfg.clone() };
                let out = train_dantr(&net, &source, &target, val, &cfg, dcfg, init.clone())?;
                let (_, v) = out.labeler(&net, &cfg)?;
                let bundle = match (&out.teacher, cfg.teacher_labels) {
                    (Some(t), true) => t,
                    _ => &out.params,
                };
                let ck = Checkpoint::from_dantr(&net, bundle)
                    .with_meta("iteration", index)
                    .with_meta("init", i)
                    .with_meta("seed", seed)
                    .with_meta("val_mse", v);
                let rel = RunLayout::checkpoint(index, i, false);
                save_checkpoint(&layout.resolve(&rel), &ck)?;
                write_metrics(&layout.resolve(&RunLayout::metrics(index, i, false)), &out.history)?;
                let trace = layout.resolve(&format!("metrics/{}-init{i}-trace.jsonl", RunLayout::tag(index, false)));
                let text: String = out
                    .trace
                    .iter()
                    .map(|s| serde_json::to_string(s).map(|l| l + "\n"))
                    .collect::<std::result::Result<_, _>>()?;
                fs::write(&trace, text).at(&trace)?;
                Ok((v, out.target_val_mse, rel))
            })
            .collect::<Result<Vec<_>>>()?;
        let t = Trained {
            seeds,
            val: results.iter().map(|r| r.0).collect(),
            student_val: results.iter().map(|r| r.1).collect(),
            checkpoints: results.into_iter().map(|r| r.2).collect(),
        };
        Ok(self.make_record(index, IterationKind::Dantr, t, parent, Some(source_ref), target_ref, false))
    }

    /// D_t, optionally enlarged with the pseudo samples on which the latest
    /// PL teacher and student agree best.
    fn transfer_target(&self, index: usize, latest_pl: &IterationRecord, source: &Dataset) -> Result<(Dataset, String)> {
        let q = self.cfg.framework.enlarge_target_fraction;
        if q == 0.0 {
            return Ok((self.target.clone(), RunLayout::TARGET.into()));
        }
        let ck = load_checkpoint(&self.layout.resolve(&latest_pl.chosen_checkpoint), None)?;
        let teacher = ck.surrogate()?;
        let student = ck.network(&teacher.block, "student").map_err(|_| {
            Error::Config("enlarge_target_fraction needs mean-teacher PL checkpoints".into())
        })?;
        // disagreement = MSE of the student against the teacher's outputs
        let inputs: Vec<&[f64]> = source.samples().iter().map(|s| s.input.as_slice()).collect();
        let reference = teacher.predict_series(&inputs, crate::train::PREDICT_BATCH)?;
        let relabeled = source
            .samples()
            .iter()
            .zip(reference)
            .map(|(s, y)| crate::data::TimeSeriesSample::pseudo_labeled(s.id.clone(), s.input.clone(), y))
            .collect::<Result<Vec<_>>>()?;
        let by_teacher = Dataset::new(Role::Combined, source.dt, relabeled)?.with_scale(source.scale, source.norm);
        let disagreement = per_sample_mse(&student, &by_teacher)?;
        let mut order: Vec<usize> = (0..source.len()).collect();
        order.sort_by(|&a, &b| disagreement[a].total_cmp(&disagreement[b]).then(a.cmp(&b)));
        let keep = ((q * source.len() as f64).ceil() as usize).min(source.len());
        let extra = source.select(&order[..keep]);
        let target = Dataset::union(&extra, &self.target)?;
        let rel = RunLayout::derived_snapshot(index, "target");
        write_snapshot_once(&self.layout, &rel, &target)?;
        Ok((target, rel))
    }

    /// Step 5: final models on D_last = (freshly labeled pseudo set, or all
    /// pseudo sets with `accumulate_pseudo`) ∪ D_t; Model-L is the best by
    /// validation MSE and is the only model ever scored on the test set.
    pub fn run_final(&self) -> Result<IterationRecord> {
        let index = self.history.len();
        if self.history.iter().any(|r| r.kind == IterationKind::Final) {
            return Err(Error::Protocol("final training already ran".into()));
        }
        let (parent, mut source_ref, mut pseudo) = self.label_pool(index, false)?;
        if self.cfg.framework.accumulate_pseudo {
            let mut merged: Vec<crate::data::TimeSeriesSample> = Vec::new();
            let refs = self
                .history
                .iter()
                .filter(|r| r.kind == IterationKind::Pl)
                .filter_map(|r| r.source_dataset_ref.clone());
            let mut snapshots = refs.map(|r| self.load_snapshot(&r)).collect::<Result<Vec<_>>>()?;
            snapshots.push(pseudo.clone());
            // later labels replace earlier ones for the same pool sample
            for ds in snapshots.into_iter().rev() {
                for s in ds.into_samples() {
                    if !merged.iter().any(|m| m.id == s.id) {
                        merged.push(s);
                    }
                }
            }
            pseudo = Dataset::new(Role::PseudoSource, self.pool.dt, merged)?.with_scale(self.pool.scale, self.pool.norm);
            source_ref = RunLayout::derived_snapshot(index, "accumulated");
            write_snapshot_once(&self.layout, &source_ref, &pseudo)?;
        }
        let train = Dataset::union(&pseudo, &self.target)?;
        let t = self.train_surrogates(index, false, &self.cfg.final_arch(), self.cfg.final_train(), &train)?;
        let mut rec = self.make_record(
            index,
            IterationKind::Final,
            t,
            Some(parent),
            Some(source_ref),
            RunLayout::TARGET.into(),
            false,
        );
        let model_l = self.load_model(&rec.chosen_checkpoint)?;
        rec.test_mse = Some(self.evaluate_test(&model_l)?);
        Ok(rec)
    }

    /// The only path to the test set; refuses a second use.
    fn evaluate_test(&self, net: &Network) -> Result<f64> {
        if self.test_accesses.get() > 0 {
            return Err(Error::Protocol("the test set was already used in this run".into()));
        }
        self.test_accesses.set(self.test_accesses.get() + 1);
        crate::train::evaluate_mse(net, &self.test)
    }
}

/// Runs the whole framework in `dir`, resuming when `dir` already holds a
/// run with the same configuration.
pub fn run_framework(dir: &Path, cfg: RunConfig, data: FrameworkData) -> Result<RunRecord> {
    let mut run = if dir.join(RunLayout::CONFIG).exists() {
        let run = FrameworkRun::resume(dir)?;
        if run.cfg != cfg {
            return Err(Error::Config(format!(
                "{} holds a run with a different configuration",
                dir.display()
            )));
        }
        run
    } else {
        FrameworkRun::create(dir, cfg, data)?
    };
    run.run_to_end()
}
