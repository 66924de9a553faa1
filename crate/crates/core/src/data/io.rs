//! Dataset directory format.
//!
//! ```text
//! <dir>/manifest.toml      role, scale, dt, count, normalization bounds, sample table
//! <dir>/series/00000.in    "t_index value" rows, one per time step
//! <dir>/series/00000.out   same layout, labeled samples only
//! ```
//!
//! Values are written in scientific notation with 17 significant digits,
//! which parses back to the identical `f64`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, NormalizationParams, Provenance, Role, Scale, TimeSeriesSample};
use crate::error::{Error, IoContext, Result};

pub const MANIFEST_FILE: &str = "manifest.toml";
const FORMAT_TAG: &str = "selftransfer-dataset/1";
const SERIES_DIR: &str = "series";

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    role: Role,
    scale: Scale,
    dt: f64,
    count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    norm: Option<NormalizationParams>,
    #[serde(default)]
    samples: Vec<SampleEntry>,
}

#[derive(Serialize, Deserialize)]
struct SampleEntry {
    id: String,
    provenance: Provenance,
    length: usize,
    input: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    output: Option<String>,
}

fn malformed(path: &Path, reason: impl Into<String>) -> Error {
    Error::Malformed {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn format_series(values: &[f64]) -> String {
    let mut out = String::with_capacity(values.len() * 28);
    for (i, v) in values.iter().enumerate() {
        let _ = writeln!(out, "{i} {v:.16e}");
    }
    out
}

fn parse_series(path: &Path, declared: usize) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).at(path)?;
    let mut values = Vec::with_capacity(declared);
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut cols = line.split_whitespace();
        let (Some(idx), Some(val), None) = (cols.next(), cols.next(), cols.next()) else {
            return Err(malformed(path, format!("line {}: expected two columns", line_no + 1)));
        };
        let idx: usize = idx
            .parse()
            .map_err(|_| malformed(path, format!("line {}: bad index {idx:?}", line_no + 1)))?;
        if idx != values.len() {
            return Err(malformed(
                path,
                format!("line {}: index {idx} out of sequence", line_no + 1),
            ));
        }
        let val: f64 = val
            .parse()
            .map_err(|_| malformed(path, format!("line {}: bad value {val:?}", line_no + 1)))?;
        values.push(val);
    }
    if values.len() != declared {
        return Err(Error::LengthMismatch {
            what: format!("rows in {}", path.display()),
            expected: declared,
            got: values.len(),
        });
    }
    Ok(values)
}

/// Writes `dataset` under `dir`, which must not already hold a dataset.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    dataset.validate()?;
    let manifest_path = dir.join(MANIFEST_FILE);
    if manifest_path.exists() {
        return Err(Error::Protocol(format!(
            "refusing to overwrite existing dataset at {}",
            dir.display()
        )));
    }
    let series_dir = dir.join(SERIES_DIR);
    fs::create_dir_all(&series_dir).at(&series_dir)?;

    let mut entries = Vec::with_capacity(dataset.len());
    for (i, s) in dataset.samples().iter().enumerate() {
        let input = format!("{SERIES_DIR}/{i:05}.in");
        fs::write(dir.join(&input), format_series(&s.input)).at(dir.join(&input))?;
        let output = match &s.output {
            Some(out) => {
                let name = format!("{SERIES_DIR}/{i:05}.out");
                fs::write(dir.join(&name), format_series(out)).at(dir.join(&name))?;
                Some(name)
            }
            None => None,
        };
        entries.push(SampleEntry {
            id: s.id.clone(),
            provenance: s.provenance,
            length: s.len(),
            input,
            output,
        });
    }
    let manifest = Manifest {
        format: FORMAT_TAG.to_string(),
        role: dataset.role,
        scale: dataset.scale,
        dt: dataset.dt,
        count: dataset.len(),
        norm: dataset.norm,
        samples: entries,
    };
    let text = toml::to_string(&manifest)
        .map_err(|e| malformed(&manifest_path, format!("serialize: {e}")))?;
    fs::write(&manifest_path, text).at(&manifest_path)
}

/// Reads a dataset written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).at(&manifest_path)?;
    let manifest: Manifest =
        toml::from_str(&text).map_err(|e| malformed(&manifest_path, e.to_string()))?;
    if manifest.format != FORMAT_TAG {
        return Err(malformed(
            &manifest_path,
            format!("unknown format tag {:?}", manifest.format),
        ));
    }
    if manifest.count != manifest.samples.len() {
        return Err(Error::LengthMismatch {
            what: format!("sample table in {}", manifest_path.display()),
            expected: manifest.count,
            got: manifest.samples.len(),
        });
    }
    let mut samples = Vec::with_capacity(manifest.count);
    for e in &manifest.samples {
        let input = parse_series(&dir.join(&e.input), e.length)?;
        let output = match &e.output {
            Some(name) => Some(parse_series(&dir.join(name), e.length)?),
            None => None,
        };
        let s = TimeSeriesSample {
            id: e.id.clone(),
            input,
            output,
            provenance: e.provenance,
        };
        s.validate()
            .map_err(|err| malformed(&manifest_path, err.to_string()))?;
        samples.push(s);
    }
    let ds = Dataset {
        role: manifest.role,
        dt: manifest.dt,
        scale: manifest.scale,
        norm: manifest.norm,
        samples,
    };
    ds.validate()
        .map_err(|err| malformed(&manifest_path, err.to_string()))?;
    Ok(ds)
}

/// Imports one record from a whitespace- or comma-delimited column file.
///
/// Lines that start with `#` or do not parse as numbers (headers) are skipped.
/// `column` selects the value column; `None` takes the last one.
pub fn import_columns(path: &Path, id: &str, column: Option<usize>) -> Result<TimeSeriesSample> {
    let text = fs::read_to_string(path).at(path)?;
    let mut values = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|c| !c.is_empty())
            .collect();
        let Ok(nums) = cols.iter().map(|c| c.parse::<f64>()).collect::<std::result::Result<Vec<_>, _>>()
        else {
            if values.is_empty() {
                continue;
            }
            return Err(malformed(path, format!("non-numeric row {line:?} after data")));
        };
        let pick = match column {
            Some(c) => *nums
                .get(c)
                .ok_or_else(|| malformed(path, format!("row {line:?} has no column {c}")))?,
            None => *nums.last().ok_or_else(|| malformed(path, "empty row"))?,
        };
        values.push(pick);
    }
    TimeSeriesSample::unlabeled(id, values).map_err(|e| malformed(path, e.to_string()))
}

/// Imports every regular file in `dir` (sorted by name) as an unlabeled pool.
pub fn import_directory(dir: &Path, dt: f64, column: Option<usize>) -> Result<Dataset> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .at(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    let samples = paths
        .iter()
        .map(|p| {
            let id = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| p.display().to_string());
            import_columns(p, &id, column)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(Role::UnlabeledPool, dt, samples)
}
