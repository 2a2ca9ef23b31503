//! Plain-text artifacts: grid files and numeric CSV tables.
//!
//! A grid file starts with `# grid H W x0 y0 x1 y1` followed by `H` lines of
//! `W` whitespace-separated values, row 0 being the smallest `y`. Values are
//! written with 17 significant digits so a write/read round trip is exact.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::GridGeometry;
use crate::shapes::{CurveShape, GridImage};

fn format_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Format(format!("{}: {msg}", path.display()))
}

pub fn grid_to_string(image: &GridImage) -> String {
    let g = image.geometry();
    let mut out = format!("# grid {} {} {:.16e} {:.16e} {:.16e} {:.16e}\n", g.rows, g.cols, g.x0, g.y0, g.x1, g.y1);
    for row in image.values().chunks(g.cols) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

pub fn parse_grid(text: &str) -> std::result::Result<GridImage, String> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or("empty grid file")?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 8 || fields[0] != "#" || fields[1] != "grid" {
        return Err(format!("bad grid header {header:?}"));
    }
    let int = |s: &str| s.parse::<usize>().map_err(|e| format!("bad grid size {s:?}: {e}"));
    let real = |s: &str| s.parse::<f64>().map_err(|e| format!("bad number {s:?}: {e}"));
    let (rows, cols) = (int(fields[2])?, int(fields[3])?);
    let geometry =
        GridGeometry::new(rows, cols, real(fields[4])?, real(fields[5])?, real(fields[6])?, real(fields[7])?)
            .map_err(|e| e.to_string())?;
    let mut values = Vec::with_capacity(geometry.len());
    let mut count = 0;
    for line in lines {
        let row: Vec<f64> = line.split_whitespace().map(real).collect::<std::result::Result<_, _>>()?;
        if row.len() != cols {
            return Err(format!("row {count} has {} values, expected {cols}", row.len()));
        }
        values.extend(row);
        count += 1;
    }
    if count != rows {
        return Err(format!("found {count} rows, expected {rows}"));
    }
    GridImage::new(geometry, values).map_err(|e| e.to_string())
}

pub fn write_grid(path: &Path, image: &GridImage) -> Result<()> {
    fs::write(path, grid_to_string(image))?;
    Ok(())
}

pub fn read_grid(path: &Path) -> Result<GridImage> {
    let text = fs::read_to_string(path)?;
    parse_grid(&text).map_err(|e| format_err(path, e))
}

/// Numeric table with named columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(header: Vec<String>) -> Self {
        Self { header, rows: Vec::new() }
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[k]).collect())
    }
}

pub fn write_table(path: &Path, table: &Table) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| format_err(path, e))?;
    w.write_record(&table.header).map_err(|e| format_err(path, e))?;
    for row in &table.rows {
        w.write_record(row.iter().map(|v| format!("{v:e}"))).map_err(|e| format_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_table(path: &Path) -> Result<Table> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| format_err(path, e))?;
    let header: Vec<String> = r.headers().map_err(|e| format_err(path, e))?.iter().map(str::to_owned).collect();
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| format_err(path, e))?;
        let row = rec
            .iter()
            .map(|f| f.parse::<f64>().map_err(|e| format_err(path, format!("line {}: {f:?}: {e}", i + 2))))
            .collect::<Result<Vec<_>>>()?;
        if row.iter().any(|v| !v.is_finite()) {
            return Err(format_err(path, format!("line {}: non-finite value", i + 2)));
        }
        rows.push(row);
    }
    Ok(Table { header, rows })
}

/// Curve from a two-column `(t, y)` CSV with a header row, normalised to
/// the unit square.
pub fn read_curve_csv(path: &Path) -> Result<CurveShape> {
    let table = read_table(path)?;
    if table.header.len() != 2 {
        return Err(format_err(path, "curve CSV must have exactly two columns"));
    }
    let t: Vec<f64> = table.rows.iter().map(|r| r[0]).collect();
    let y: Vec<f64> = table.rows.iter().map(|r| r[1]).collect();
    CurveShape::from_graph(&t, &y)
}
