//! Shape files and stage bookkeeping.
//!
//! Shapes are recognised by extension and header:
//! - `*.grid`: grid image;
//! - `*.csv` with header `x,y` (or `x,y,z`): landmarks;
//! - `*.csv` with header `curve_x,curve_y`: polyline taken as is;
//! - any other two-column `*.csv`: curve graph `(t, y)`, normalised to the
//!   unit square.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use diffcal_core::io::{read_curve_csv, read_grid, read_table, write_grid, write_table, Table};
use diffcal_core::{CurveShape, LandmarkShape, PointCloud, Shape};

pub const BETAS_FILE: &str = "betas.csv";
const POINT_COLUMNS: [&str; 3] = ["x", "y", "z"];
const CURVE_COLUMNS: [&str; 2] = ["curve_x", "curve_y"];

fn has_ext(path: &Path, ext: &str) -> bool {
    path.extension().is_some_and(|e| e == ext)
}

pub fn read_shape(path: &Path) -> Result<Shape> {
    let shape = if has_ext(path, "grid") {
        Shape::Image(read_grid(path)?)
    } else if has_ext(path, "csv") {
        let table = read_table(path)?;
        let header: Vec<&str> = table.header.iter().map(String::as_str).collect();
        let rows = || table.rows.clone();
        if header == POINT_COLUMNS[..2] || header == POINT_COLUMNS {
            Shape::Landmarks(LandmarkShape::new(PointCloud::from_rows(&rows())?)?)
        } else if header == CURVE_COLUMNS {
            Shape::Curve(CurveShape::new(PointCloud::from_rows(&rows())?)?)
        } else {
            Shape::Curve(read_curve_csv(path)?)
        }
    } else {
        bail!("{}: unknown shape file type (expected .grid or .csv)", path.display());
    };
    Ok(shape)
}

/// Writes `shape` next to `stem` with the extension of its representation
/// and returns the path.
pub fn write_shape(dir: &Path, stem: &str, shape: &Shape) -> Result<PathBuf> {
    match shape {
        Shape::Image(img) => {
            let path = dir.join(format!("{stem}.grid"));
            write_grid(&path, img)?;
            Ok(path)
        }
        Shape::Landmarks(_) | Shape::Curve(_) => {
            let points = shape.points().expect("point shape");
            let header: Vec<String> = match shape {
                Shape::Curve(_) => CURVE_COLUMNS.iter().map(|s| s.to_string()).collect(),
                _ => POINT_COLUMNS[..points.dim()].iter().map(|s| s.to_string()).collect(),
            };
            if header.len() != points.dim() {
                bail!("cannot write {}-dimensional curves", points.dim());
            }
            let mut table = Table::new(header);
            table.rows = points.iter().map(<[f64]>::to_vec).collect();
            let path = dir.join(format!("{stem}.csv"));
            write_table(&path, &table)?;
            Ok(path)
        }
    }
}

/// Shape files of a simulation directory, sorted by name. The parameter
/// table `betas.csv` is not a shape.
pub fn list_shapes(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        let named_betas = path.file_name().is_some_and(|n| n == BETAS_FILE);
        if path.is_file() && !named_betas && (has_ext(&path, "grid") || has_ext(&path, "csv")) {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        bail!("{}: no shape files", dir.display());
    }
    Ok(files)
}

pub fn beta_header(p: usize) -> Vec<String> {
    (1..=p).map(|k| format!("beta_{k}")).collect()
}

/// Rows of `betas.csv` in `dir`, if present.
pub fn read_betas(dir: &Path) -> Result<Option<Vec<Vec<f64>>>> {
    let path = dir.join(BETAS_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let table = read_table(&path)?;
    if table.header != beta_header(table.header.len()) {
        bail!("{}: header must be beta_1..beta_p", path.display());
    }
    Ok(Some(table.rows))
}

pub fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| diffcal_core::Error::Format(format!("{}: {e}", path.display())).into())
}

#[derive(Serialize, Deserialize, PartialEq)]
struct Stamp {
    stage: String,
    fingerprint: String,
    outputs: Vec<String>,
}

/// Completion record of a stage in its output directory. A stage whose
/// stamp matches the current settings and inputs, and whose outputs all
/// exist, does not need to run again.
pub struct Stage {
    dir: PathBuf,
    name: &'static str,
    fingerprint: String,
}

impl Stage {
    pub fn new(name: &'static str, dir: &Path, settings: &impl Serialize, inputs: &[PathBuf]) -> Result<Self> {
        let mut h = Sha256::new();
        h.update(name.as_bytes());
        h.update(serde_json::to_vec(settings)?);
        for path in inputs {
            let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(&bytes);
        }
        let fingerprint = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
        Ok(Self { dir: dir.to_path_buf(), name, fingerprint })
    }

    fn stamp_path(&self) -> PathBuf {
        self.dir.join(format!(".diffcal-{}.json", self.name))
    }

    pub fn is_current(&self) -> bool {
        let Ok(stamp) = read_json::<Stamp>(&self.stamp_path()) else {
            return false;
        };
        stamp.stage == self.name
            && stamp.fingerprint == self.fingerprint
            && stamp.outputs.iter().all(|o| self.dir.join(o).exists())
    }

    /// Creates the output directory and drops any previous stamp.
    pub fn begin(&self) -> Result<()> {
        fs::create_dir_all(&self.dir).with_context(|| format!("creating {}", self.dir.display()))?;
        let stamp = self.stamp_path();
        if stamp.exists() {
            fs::remove_file(&stamp)?;
        }
        Ok(())
    }

    /// Records completion; `outputs` are paths relative to the stage
    /// directory.
    pub fn finish(&self, outputs: Vec<String>) -> Result<()> {
        let stamp = Stamp { stage: self.name.into(), fingerprint: self.fingerprint.clone(), outputs };
        write_json(&self.stamp_path(), &stamp)
    }
}
