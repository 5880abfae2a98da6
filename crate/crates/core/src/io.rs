//! CSV formats for rasters, masks and measurement datasets.
//!
//! Raster: first line `H,W,cell_size,units`, then `H` lines of `W`
//! comma-separated reals (row-major). Masked field cells are written as `NaN`.
//! Mask: same layout with `0`/`1` entries and units `mask`.
//! Dataset: header `row,col,rss_dbw`, one measurement per line.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{make_grid, Dataset, FieldRaster, GridIndex, GridSpec, Measurement};

pub const DATASET_HEADER: &str = "row,col,rss_dbw";

fn header_line(spec: &GridSpec, units: &str) -> String {
    format!(
        "{},{},{},{}\n",
        spec.height(),
        spec.width(),
        spec.cell_size(),
        units
    )
}

/// Serializes a raster; cells outside the mask are written as `NaN`.
pub fn raster_to_csv(raster: &FieldRaster) -> String {
    let spec = raster.spec();
    let mut out = header_line(spec, raster.units());
    for row in 0..spec.height() {
        for col in 0..spec.width() {
            let k = row * spec.width() + col;
            if col > 0 {
                out.push(',');
            }
            let v = if raster.mask()[k] {
                raster.values()[k]
            } else {
                f64::NAN
            };
            write!(out, "{v}").unwrap();
        }
        out.push('\n');
    }
    out
}

/// Serializes the raster values verbatim, ignoring the mask (used for heights).
pub fn raster_values_to_csv(raster: &FieldRaster) -> String {
    let spec = raster.spec();
    let mut out = header_line(spec, raster.units());
    for row in raster.values().chunks(spec.width()) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn mask_to_csv(raster: &FieldRaster) -> String {
    let spec = raster.spec();
    let mut out = header_line(spec, "mask");
    for row in raster.mask().chunks(spec.width()) {
        let line: Vec<&str> = row.iter().map(|&m| if m { "1" } else { "0" }).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn dataset_to_csv(ds: &Dataset) -> String {
    let mut out = String::from(DATASET_HEADER);
    out.push('\n');
    for m in ds.measurements() {
        writeln!(out, "{},{},{}", m.position.row, m.position.col, m.rss).unwrap();
    }
    out
}

fn parse_err(path: &str, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_string(),
        line,
        message: message.into(),
    }
}

/// Parsed raster body: grid, units and the raw row-major values.
#[derive(Debug, Clone)]
pub struct RawRaster {
    pub spec: GridSpec,
    pub units: String,
    pub values: Vec<f64>,
}

pub fn parse_raster(text: &str, path: &str) -> Result<RawRaster> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let fields: Vec<&str> = header.split(',').map(str::trim).collect();
    if fields.len() != 4 {
        return Err(parse_err(path, 1, "expected header `H,W,cell_size,units`"));
    }
    let h: usize = fields[0]
        .parse()
        .map_err(|_| parse_err(path, 1, format!("bad height `{}`", fields[0])))?;
    let w: usize = fields[1]
        .parse()
        .map_err(|_| parse_err(path, 1, format!("bad width `{}`", fields[1])))?;
    let cell: f64 = fields[2]
        .parse()
        .map_err(|_| parse_err(path, 1, format!("bad cell size `{}`", fields[2])))?;
    let spec = make_grid(h, w, cell).map_err(|e| parse_err(path, 1, e.to_string()))?;

    let mut values = Vec::with_capacity(h * w);
    let mut rows = 0;
    for (i, line) in lines {
        let lineno = i + 1;
        rows += 1;
        if rows > h {
            return Err(parse_err(path, lineno, format!("more than {h} data rows")));
        }
        let before = values.len();
        for tok in line.split(',') {
            let v: f64 = tok
                .trim()
                .parse()
                .map_err(|_| parse_err(path, lineno, format!("bad number `{}`", tok.trim())))?;
            values.push(v);
        }
        if values.len() - before != w {
            return Err(parse_err(
                path,
                lineno,
                format!("expected {w} values, found {}", values.len() - before),
            ));
        }
    }
    if rows != h {
        return Err(parse_err(
            path,
            rows + 1,
            format!("expected {h} data rows, found {rows}"),
        ));
    }
    Ok(RawRaster {
        spec,
        units: fields[3].to_string(),
        values,
    })
}

/// Reads a field raster; non-finite cells are treated as masked.
pub fn read_field(path: &Path) -> Result<FieldRaster> {
    let name = path.display().to_string();
    let raw = parse_raster(&fs::read_to_string(path)?, &name)?;
    let mask = raw.values.iter().map(|v| v.is_finite()).collect();
    FieldRaster::new(raw.spec, raw.values, mask, &raw.units)
}

/// Reads a building-height raster; the mask is derived from the heights.
pub fn read_heights(path: &Path) -> Result<FieldRaster> {
    let name = path.display().to_string();
    let raw = parse_raster(&fs::read_to_string(path)?, &name)?;
    if let Some(k) = raw.values.iter().position(|v| !v.is_finite()) {
        return Err(parse_err(
            &name,
            2 + k / raw.spec.width(),
            "non-finite height",
        ));
    }
    FieldRaster::heights(raw.spec, raw.values)
}

pub fn read_mask(path: &Path) -> Result<Vec<bool>> {
    let name = path.display().to_string();
    let raw = parse_raster(&fs::read_to_string(path)?, &name)?;
    raw.values
        .iter()
        .enumerate()
        .map(|(k, &v)| match v {
            0.0 => Ok(false),
            1.0 => Ok(true),
            _ => Err(parse_err(
                &name,
                2 + k / raw.spec.width(),
                "mask entries must be 0 or 1",
            )),
        })
        .collect()
}

pub fn parse_measurements(text: &str, path: &str) -> Result<Vec<Measurement>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == DATASET_HEADER => {}
        _ => {
            return Err(parse_err(
                path,
                1,
                format!("expected header `{DATASET_HEADER}`"),
            ))
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 3 {
            return Err(parse_err(path, lineno, "expected `row,col,rss_dbw`"));
        }
        let row = f[0]
            .parse()
            .map_err(|_| parse_err(path, lineno, format!("bad row `{}`", f[0])))?;
        let col = f[1]
            .parse()
            .map_err(|_| parse_err(path, lineno, format!("bad col `{}`", f[1])))?;
        let rss = f[2]
            .parse()
            .map_err(|_| parse_err(path, lineno, format!("bad rss `{}`", f[2])))?;
        out.push(Measurement {
            position: GridIndex::new(row, col),
            rss,
        });
    }
    Ok(out)
}

pub fn read_dataset(path: &Path, heights: FieldRaster) -> Result<Dataset> {
    let name = path.display().to_string();
    let ms = parse_measurements(&fs::read_to_string(path)?, &name)?;
    Dataset::new(heights, ms, None)
}

/// Writes `contents` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::config("path", format!("`{}` has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}
