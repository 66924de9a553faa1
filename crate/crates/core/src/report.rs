//! Post-run analysis: per-iteration tables, reduction plots and prediction
//! overlays, all read from a run directory and written as files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Scale};
use crate::error::{Error, IoContext, Result};
use crate::net::load_checkpoint;
use crate::orchestrator::{relative_reduction, IterationKind, IterationRecord, RunLayout};
use crate::train::PREDICT_BATCH;

pub const SUMMARY_FILE: &str = "summary.csv";
pub const REDUCTION_PLOT: &str = "reduction.svg";

/// Average validation MSE and relative reduction of each iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReductionSeries {
    pub indices: Vec<usize>,
    pub kinds: Vec<IterationKind>,
    pub avg_val_mse: Vec<f64>,
    pub reductions: Vec<Option<f64>>,
}

impl ReductionSeries {
    /// Builds the series and checks every stored reduction against the one
    /// recomputed from the averages.
    pub fn from_records(records: &[IterationRecord]) -> Result<Self> {
        let mut prev: Option<f64> = None;
        for (i, r) in records.iter().enumerate() {
            let expected = prev.map(|p| relative_reduction(p, r.avg_val_mse));
            let consistent = match (expected, r.relative_reduction) {
                (None, None) => true,
                (Some(a), Some(b)) => (a - b).abs() <= 1e-12,
                _ => false,
            };
            if r.index != i || !consistent {
                return Err(Error::Protocol(format!(
                    "record {i} (index {}) stores reduction {:?}, averages give {expected:?}",
                    r.index, r.relative_reduction
                )));
            }
            prev = Some(r.avg_val_mse);
        }
        Ok(Self {
            indices: records.iter().map(|r| r.index).collect(),
            kinds: records.iter().map(|r| r.kind).collect(),
            avg_val_mse: records.iter().map(|r| r.avg_val_mse).collect(),
            reductions: records.iter().map(|r| r.relative_reduction).collect(),
        })
    }
}

fn read_run_records(run_dir: &Path) -> Result<Vec<IterationRecord>> {
    let path = run_dir.join(RunLayout::RECORDS);
    if !path.exists() {
        return Err(Error::Malformed {
            path,
            reason: "no iteration records; is this a run directory?".into(),
        });
    }
    crate::orchestrator::read_records(&path)
}

/// Comma-delimited table, one row per finished iteration, then a test line
/// once the final iteration exists. Numbers use the shortest exact form.
pub fn summary_table(run_dir: &Path) -> Result<String> {
    let records = read_run_records(run_dir)?;
    ReductionSeries::from_records(&records)?;
    let n_seeds = records.iter().map(|r| r.per_seed_val_mse.len()).max().unwrap_or(0);
    let mut out = String::from("iteration,kind");
    for s in 0..n_seeds {
        write!(out, ",val_mse_init{s}").unwrap();
    }
    out.push_str(",avg_val_mse,relative_reduction\n");
    for r in &records {
        write!(out, "{},{}", r.index, r.kind.label()).unwrap();
        for s in 0..n_seeds {
            match r.per_seed_val_mse.get(s) {
                Some(v) => write!(out, ",{v:e}").unwrap(),
                None => out.push(','),
            }
        }
        write!(out, ",{:e},", r.avg_val_mse).unwrap();
        if let Some(red) = r.relative_reduction {
            write!(out, "{red:e}").unwrap();
        }
        out.push('\n');
    }
    if let Some(fin) = records.iter().find(|r| r.kind == IterationKind::Final) {
        let test = fin.test_mse.ok_or_else(|| Error::Malformed {
            path: run_dir.join(RunLayout::RECORDS),
            reason: "final record lacks a test MSE".into(),
        })?;
        writeln!(out, "test_mse,{test:e},{}", fin.chosen_checkpoint).unwrap();
    }
    Ok(out)
}

/// Writes [`summary_table`] to `out_dir/summary.csv`.
pub fn summarize_run(run_dir: &Path, out_dir: &Path) -> Result<PathBuf> {
    let table = summary_table(run_dir)?;
    fs::create_dir_all(out_dir).at(out_dir)?;
    let path = out_dir.join(SUMMARY_FILE);
    fs::write(&path, table).at(&path)?;
    Ok(path)
}

fn plot_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    }
}

/// Bar chart of the relative reduction per iteration, in percent.
pub fn plot_reductions(series: &ReductionSeries, path: &Path) -> Result<()> {
    let points: Vec<(usize, f64, IterationKind)> = series
        .indices
        .iter()
        .zip(&series.reductions)
        .zip(&series.kinds)
        .filter_map(|((&i, r), &k)| r.map(|r| (i, 100.0 * r, k)))
        .collect();
    let lo = points.iter().map(|p| p.1).fold(0.0_f64, f64::min);
    let hi = points.iter().map(|p| p.1).fold(1.0_f64, f64::max);
    let pad = 0.1 * (hi - lo);
    let n = series.indices.len().max(2);
    let err = |e| plot_error(path, e);
    let root = SVGBackend::new(path, (800, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Relative reduction of validation MSE per iteration", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(0.5..(n as f64 - 0.5), (lo - pad)..(hi + pad))
        .map_err(err)?;
    chart
        .configure_mesh()
        .x_desc("iteration")
        .y_desc("reduction (%)")
        .x_labels(n)
        .x_label_formatter(&|x| format!("{}", x.round() as i64))
        .draw()
        .map_err(err)?;
    let colour = |k: IterationKind| match k {
        IterationKind::Pl => BLUE,
        IterationKind::Dantr => RED,
        _ => BLACK,
    };
    chart
        .draw_series(points.iter().map(|&(i, r, k)| {
            let x = i as f64;
            Rectangle::new([(x - 0.3, 0.0), (x + 0.3, r)], colour(k).filled())
        }))
        .map_err(err)?;
    chart
        .draw_series(points.iter().map(|&(i, r, k)| {
            Text::new(k.label().to_string(), (i as f64 - 0.25, r.max(0.0) + 0.03 * (hi - lo)), ("sans-serif", 12))
        }))
        .map_err(err)?;
    root.present().map_err(err)?;
    Ok(())
}

/// One prediction overlay written by [`plot_predictions`].
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionPlot {
    pub id: String,
    pub path: PathBuf,
    /// MSE in normalized units, the scale every other reported MSE uses.
    pub mse: f64,
}

/// Truth and prediction curves, in physical units when the dataset carries
/// its normalization bounds, one SVG file per requested sample.
pub fn plot_predictions(
    checkpoint: &Path,
    dataset: &Dataset,
    sample_ids: &[String],
    out_dir: &Path,
) -> Result<Vec<PredictionPlot>> {
    let samples = sample_ids
        .iter()
        .map(|id| {
            let s = dataset.get(id).ok_or_else(|| Error::UnknownSample(id.clone()))?;
            let y = s.output.as_ref().ok_or_else(|| Error::InvalidSample {
                id: id.clone(),
                reason: "needs a label to compare against".into(),
            })?;
            Ok((s, y))
        })
        .collect::<Result<Vec<_>>>()?;
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    let net = load_checkpoint(checkpoint, None)?.surrogate()?;
    fs::create_dir_all(out_dir).at(out_dir)?;
    let norm = dataset.norm;
    let (to_net_in, to_net_out): (Box<dyn Fn(f64) -> f64>, Box<dyn Fn(f64) -> f64>) = match (dataset.scale, norm) {
        (Scale::Physical, Some(p)) => (Box::new(move |v| p.normalize_input(v)), Box::new(move |v| p.normalize_output(v))),
        _ => (Box::new(|v| v), Box::new(|v| v)),
    };
    let to_plot = |v: f64| match (dataset.scale, norm) {
        (Scale::Normalized, Some(p)) => p.denormalize_output(v),
        _ => v,
    };
    let from_net = |v: f64| match norm {
        Some(p) => p.denormalize_output(v),
        None => v,
    };

    let inputs: Vec<Vec<f64>> = samples.iter().map(|(s, _)| s.input.iter().map(|&v| to_net_in(v)).collect()).collect();
    let refs: Vec<&[f64]> = inputs.iter().map(|v| v.as_slice()).collect();
    let preds = net.predict_series(&refs, PREDICT_BATCH)?;

    let mut out = Vec::with_capacity(samples.len());
    for ((s, y), pred) in samples.iter().zip(preds) {
        let truth_n: Vec<f64> = y.iter().map(|&v| to_net_out(v)).collect();
        let mse = truth_n.iter().zip(&pred).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / truth_n.len() as f64;
        let truth: Vec<f64> = y.iter().map(|&v| to_plot(v)).collect();
        let fitted: Vec<f64> = pred.iter().map(|&v| from_net(v)).collect();
        let file: String = s.id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect();
        let path = out_dir.join(format!("prediction-{file}.svg"));
        let caption = format!("{}  (MSE {mse:.3e}, normalized)", s.id);
        draw_overlay(&path, &caption, dataset.dt, &truth, &fitted, norm.is_some())?;
        out.push(PredictionPlot {
            id: s.id.clone(),
            path,
            mse,
        });
    }
    Ok(out)
}

fn draw_overlay(path: &Path, caption: &str, dt: f64, truth: &[f64], pred: &[f64], physical: bool) -> Result<()> {
    let err = |e| plot_error(path, e);
    let all = truth.iter().chain(pred).copied();
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    let pad = (0.05 * (hi - lo)).max(1e-9);
    let t_end = dt * (truth.len().max(2) - 1) as f64;
    let root = SVGBackend::new(path, (900, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(caption, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(70)
        .build_cartesian_2d(0.0..t_end, (lo - pad)..(hi + pad))
        .map_err(err)?;
    chart
        .configure_mesh()
        .x_desc("time (s)")
        .y_desc(if physical { "reaction force" } else { "reaction force (normalized)" })
        .draw()
        .map_err(err)?;
    let orange = RGBColor(255, 127, 14);
    let blue = RGBColor(31, 119, 180);
    chart
        .draw_series(LineSeries::new(truth.iter().enumerate().map(|(i, &v)| (i as f64 * dt, v)), blue.stroke_width(2)))
        .map_err(err)?
        .label("ground truth")
        .legend(move |(x, y)| PathElement::new([(x, y), (x + 20, y)], blue));
    chart
        .draw_series(LineSeries::new(pred.iter().enumerate().map(|(i, &v)| (i as f64 * dt, v)), orange.stroke_width(2)))
        .map_err(err)?
        .label("prediction")
        .legend(move |(x, y)| PathElement::new([(x, y), (x + 20, y)], orange));
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(err)?;
    root.present().map_err(err)?;
    Ok(())
}

/// Everything `report` produces for one run directory.
#[derive(Clone, Debug, Default)]
pub struct ReportFiles {
    pub summary: PathBuf,
    pub reduction_plot: Option<PathBuf>,
    pub predictions: Vec<PredictionPlot>,
}

/// Summary table, plus with `plots` the reduction chart and overlays of the
/// selected final model on the first `n_overlays` validation samples. The
/// test set is never read here.
pub fn report_run(run_dir: &Path, out_dir: &Path, plots: bool, n_overlays: usize) -> Result<ReportFiles> {
    let summary = summarize_run(run_dir, out_dir)?;
    let mut files = ReportFiles {
        summary,
        ..ReportFiles::default()
    };
    if !plots {
        return Ok(files);
    }
    let records = read_run_records(run_dir)?;
    let series = ReductionSeries::from_records(&records)?;
    let path = out_dir.join(REDUCTION_PLOT);
    plot_reductions(&series, &path)?;
    files.reduction_plot = Some(path);
    if let Some(last) = records.last() {
        let val = crate::data::read_dataset(&run_dir.join(RunLayout::VALIDATION))?;
        let ids: Vec<String> = val.samples().iter().take(n_overlays).map(|s| s.id.clone()).collect();
        files.predictions = plot_predictions(&run_dir.join(&last.chosen_checkpoint), &val, &ids, out_dir)?;
    }
    Ok(files)
}
