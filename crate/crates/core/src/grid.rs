//! The discrete H×W world, rasters over it and measurement datasets.
//!
//! Grid indices are `(row, col)` pairs. Continuous positions such as the
//! jammer location live in the same frame, measured in cells; `cell_size`
//! converts to meters.

use std::collections::HashSet;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    height: usize,
    width: usize,
    cell_size: f64,
}

impl GridSpec {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Meters per cell.
    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, p: GridIndex) -> bool {
        p.row < self.height && p.col < self.width
    }

    pub fn check(&self, p: GridIndex) -> Result<()> {
        if self.contains(p) {
            Ok(())
        } else {
            Err(Error::OutOfBounds {
                index: p,
                height: self.height,
                width: self.width,
            })
        }
    }

    /// Row-major flat offset. Caller guarantees `p` is in bounds.
    #[inline]
    pub fn offset(&self, p: GridIndex) -> usize {
        p.row * self.width + p.col
    }

    #[inline]
    pub fn index_of(&self, offset: usize) -> GridIndex {
        GridIndex::new(offset / self.width, offset % self.width)
    }

    pub fn indices(&self) -> impl Iterator<Item = GridIndex> + '_ {
        (0..self.len()).map(|k| self.index_of(k))
    }

    /// Euclidean distance in meters between a cell center and a continuous position.
    pub fn distance_m(&self, p: GridIndex, q: Position) -> f64 {
        let dr = p.row as f64 - q.row;
        let dc = p.col as f64 - q.col;
        dr.hypot(dc) * self.cell_size
    }
}

/// Builds a validated grid. Rejects dimensions below 2 and non-positive cell sizes.
pub fn make_grid(height: usize, width: usize, cell_size: f64) -> Result<GridSpec> {
    if height < 2 {
        return Err(Error::config(
            "height",
            format!("must be >= 2, got {height}"),
        ));
    }
    if width < 2 {
        return Err(Error::config("width", format!("must be >= 2, got {width}")));
    }
    if !(cell_size.is_finite() && cell_size > 0.0) {
        return Err(Error::config(
            "cell_size",
            format!("must be positive, got {cell_size}"),
        ));
    }
    Ok(GridSpec {
        height,
        width,
        cell_size,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GridIndex {
    pub row: usize,
    pub col: usize,
}

impl GridIndex {
    pub const fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }

    pub fn to_position(self) -> Position {
        Position::new(self.row as f64, self.col as f64)
    }
}

/// A continuous position in cell units.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Position {
    pub row: f64,
    pub col: f64,
}

impl Position {
    pub const fn new(row: f64, col: f64) -> Self {
        Self { row, col }
    }

    /// Nearest cell, or `None` when the position falls outside the grid.
    pub fn nearest_cell(self, spec: &GridSpec) -> Option<GridIndex> {
        let r = self.row.round();
        let c = self.col.round();
        if r < 0.0 || c < 0.0 || !r.is_finite() || !c.is_finite() {
            return None;
        }
        let p = GridIndex::new(r as usize, c as usize);
        spec.contains(p).then_some(p)
    }
}

/// A scalar field over the grid together with its validity mask.
///
/// `mask[k] == true` marks an outdoor cell. Masked-out cells may hold any
/// value; field rasters written by this crate store `NaN` there.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldRaster {
    spec: GridSpec,
    values: Vec<f64>,
    mask: Vec<bool>,
    units: String,
}

impl FieldRaster {
    pub fn new(spec: GridSpec, values: Vec<f64>, mask: Vec<bool>, units: &str) -> Result<Self> {
        for (what, len) in [("values", values.len()), ("mask", mask.len())] {
            if len != spec.len() {
                return Err(Error::ShapeMismatch {
                    expected: format!("{} {what} ({}x{})", spec.len(), spec.height, spec.width),
                    actual: len.to_string(),
                });
            }
        }
        Ok(Self {
            spec,
            values,
            mask,
            units: units.to_string(),
        })
    }

    pub fn constant(spec: GridSpec, value: f64, units: &str) -> Self {
        Self {
            spec,
            values: vec![value; spec.len()],
            mask: vec![true; spec.len()],
            units: units.to_string(),
        }
    }

    /// Building heights in meters; a cell is in-building iff its height is positive.
    pub fn heights(spec: GridSpec, values: Vec<f64>) -> Result<Self> {
        let mask = values.iter().map(|&h| h <= 0.0).collect();
        Self::new(spec, values, mask, "m")
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn units(&self) -> &str {
        &self.units
    }

    pub fn is_valid(&self, p: GridIndex) -> bool {
        self.spec.contains(p) && self.mask[self.spec.offset(p)]
    }

    /// Stored value regardless of the mask.
    pub fn get(&self, p: GridIndex) -> Result<f64> {
        self.spec.check(p)?;
        Ok(self.values[self.spec.offset(p)])
    }

    pub fn outdoor_cells(&self) -> Vec<GridIndex> {
        self.spec
            .indices()
            .filter(|&p| self.mask[self.spec.offset(p)])
            .collect()
    }

    pub fn outdoor_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Reads the raster at `p`, rejecting out-of-bounds and in-building cells.
pub fn raster_at(raster: &FieldRaster, p: GridIndex) -> Result<f64> {
    raster.spec.check(p)?;
    let k = raster.spec.offset(p);
    if !raster.mask[k] {
        return Err(Error::MaskedCell(p));
    }
    Ok(raster.values[k])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    pub position: GridIndex,
    /// Received signal strength in dBW.
    pub rss: f64,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    spec: GridSpec,
    heights: FieldRaster,
    measurements: Vec<Measurement>,
    noise_precision_true: Option<f64>,
}

impl Dataset {
    pub fn new(
        heights: FieldRaster,
        measurements: Vec<Measurement>,
        noise_precision_true: Option<f64>,
    ) -> Result<Self> {
        if measurements.is_empty() {
            return Err(Error::config(
                "measurements",
                "dataset needs at least one measurement",
            ));
        }
        if let Some(beta) = noise_precision_true {
            if !(beta > 0.0) {
                return Err(Error::config("noise_precision", "must be positive"));
            }
        }
        let spec = *heights.spec();
        let mut seen = HashSet::with_capacity(measurements.len());
        for m in &measurements {
            spec.check(m.position)?;
            if !heights.is_valid(m.position) {
                return Err(Error::MaskedCell(m.position));
            }
            if !seen.insert(m.position) {
                return Err(Error::DuplicatePosition(m.position));
            }
            if !m.rss.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("RSS at ({}, {})", m.position.row, m.position.col),
                });
            }
        }
        Ok(Self {
            spec,
            heights,
            measurements,
            noise_precision_true,
        })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn heights(&self) -> &FieldRaster {
        &self.heights
    }

    pub fn measurements(&self) -> &[Measurement] {
        &self.measurements
    }

    pub fn len(&self) -> usize {
        self.measurements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.measurements.is_empty()
    }

    /// Generating noise precision; only known for synthetic data and never read by inference.
    pub fn noise_precision_true(&self) -> Option<f64> {
        self.noise_precision_true
    }

    pub fn positions(&self) -> Vec<GridIndex> {
        self.measurements.iter().map(|m| m.position).collect()
    }

    /// First `n` measurements, sharing the same scene.
    pub fn truncated(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        Self::new(
            self.heights.clone(),
            self.measurements[..n].to_vec(),
            self.noise_precision_true,
        )
    }
}
