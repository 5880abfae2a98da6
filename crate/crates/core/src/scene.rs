//! Synthetic urban scenes: a Manhattan block layout, an analytic ground-truth
//! RSS field with shadowing and street-canyon structure, and noisy samples of it.
//!
//! The truth field at an outdoor cell `p` is
//!
//! ```text
//! P0 - 10 γ log10(d_m(p, jammer) + ε)
//!    - shadow_db_per_building · (#building cells on the line p ↔ jammer)
//!    + canyon_gain_db · [p shares the jammer's row or column with a clear line]
//! ```
//!
//! With no buildings and no canyon gain the field is exactly a path-loss field.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::experts::PATH_LOSS_EPSILON_M;
use crate::grid::{make_grid, Dataset, FieldRaster, GridIndex, GridSpec, Measurement, Position};

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub seed: u64,
    pub grid: GridSpec,
    pub n_blocks_x: usize,
    pub n_blocks_y: usize,
    /// Street width in cells.
    pub street_width: usize,
    /// Building heights are drawn uniformly from this range (meters).
    pub height_range: (f64, f64),
    pub jammer_true: Position,
    pub p0_true: f64,
    pub gamma_true: f64,
    pub shadow_db_per_building: f64,
    pub canyon_gain_db: f64,
    /// Precision of the additive measurement noise (dBW⁻²).
    pub noise_precision: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            grid: make_grid(32, 32, 31.25).expect("static grid"),
            n_blocks_x: 4,
            n_blocks_y: 4,
            street_width: 3,
            height_range: (10.0, 60.0),
            jammer_true: Position::new(16.0, 12.0),
            p0_true: 10.0,
            gamma_true: 3.0,
            shadow_db_per_building: 1.0,
            canyon_gain_db: 6.0,
            noise_precision: 0.25,
        }
    }
}

impl SceneConfig {
    /// Same grid and jammer, but no buildings, no canyon gain and (almost) no noise,
    /// so the truth field is exactly representable by the path-loss expert.
    pub fn open_field(&self) -> Self {
        Self {
            height_range: (0.0, 0.0),
            canyon_gain_db: 0.0,
            noise_precision: 1e12,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_blocks_x == 0 {
            return Err(Error::config("n_blocks_x", "must be positive"));
        }
        if self.n_blocks_y == 0 {
            return Err(Error::config("n_blocks_y", "must be positive"));
        }
        if self.street_width == 0 {
            return Err(Error::config("street_width", "must be positive"));
        }
        let (lo, hi) = self.height_range;
        if !(lo.is_finite() && hi.is_finite() && lo >= 0.0 && lo <= hi) {
            return Err(Error::config(
                "height_range",
                format!("need 0 <= min <= max, got ({lo}, {hi})"),
            ));
        }
        if !(self.gamma_true >= 1.0) {
            return Err(Error::config("gamma_true", "must be >= 1"));
        }
        if !(self.noise_precision > 0.0) {
            return Err(Error::config("noise_precision", "must be positive"));
        }
        if !(self.shadow_db_per_building > 0.0) {
            return Err(Error::config("shadow_db_per_building", "must be positive"));
        }
        if !(self.canyon_gain_db >= 0.0) {
            return Err(Error::config("canyon_gain_db", "must be nonnegative"));
        }
        if !self.p0_true.is_finite() {
            return Err(Error::config("p0_true", "must be finite"));
        }
        if self.jammer_true.nearest_cell(&self.grid).is_none() {
            return Err(Error::config("jammer_true", "outside the grid"));
        }
        Ok(())
    }
}

/// Cell ranges `[start, end)` of the blocks along one axis.
fn block_spans(
    extent: usize,
    n_blocks: usize,
    street: usize,
    field: &str,
) -> Result<Vec<(usize, usize)>> {
    let pitch = extent / n_blocks;
    if pitch <= street {
        return Err(Error::config(
            field,
            format!("block pitch {pitch} leaves no room for buildings with street width {street}"),
        ));
    }
    let lead = street.div_ceil(2);
    let trail = street / 2;
    Ok((0..n_blocks)
        .map(|k| (k * pitch + lead, (k + 1) * pitch - trail))
        .collect())
}

/// Manhattan-style heights: rectangular blocks separated by `street_width`
/// streets (half-width on the border), block heights uniform in `height_range`.
/// A zero height range gives an open field regardless of the block layout.
pub fn gen_buildings(cfg: &SceneConfig) -> Result<FieldRaster> {
    cfg.validate()?;
    let g = cfg.grid;
    if cfg.height_range.1 == 0.0 {
        return FieldRaster::heights(g, vec![0.0; g.len()]);
    }
    let rows = block_spans(g.height(), cfg.n_blocks_y, cfg.street_width, "n_blocks_y")?;
    let cols = block_spans(g.width(), cfg.n_blocks_x, cfg.street_width, "n_blocks_x")?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (lo, hi) = cfg.height_range;
    let mut values = vec![0.0; g.len()];
    for &(r0, r1) in &rows {
        for &(c0, c1) in &cols {
            let h = if hi > lo {
                rng.random_range(lo..hi)
            } else {
                lo
            };
            for r in r0..r1 {
                values[r * g.width() + c0..r * g.width() + c1].fill(h);
            }
        }
    }
    FieldRaster::heights(g, values)
}

/// Nearest-cell rounding of `num / den` (den > 0); exact half-way points yield both neighbours.
fn round_candidates(num: i64, den: i64) -> (i64, Option<i64>) {
    let q = num.div_euclid(den);
    let rem = num.rem_euclid(den);
    match (2 * rem).cmp(&den) {
        std::cmp::Ordering::Less => (q, None),
        std::cmp::Ordering::Greater => (q + 1, None),
        std::cmp::Ordering::Equal => (q, Some(q + 1)),
    }
}

/// Cells visited by the segment between two cell centers, endpoints included.
///
/// One cell is taken per step along the major axis; when the segment passes
/// exactly between two cells both are included. The result is invariant under
/// swapping the endpoints and under the symmetries of the square grid.
pub fn line_cells(a: GridIndex, b: GridIndex) -> Vec<GridIndex> {
    let (ar, ac) = (a.row as i64, a.col as i64);
    let (dr, dc) = (b.row as i64 - ar, b.col as i64 - ac);
    let n = dr.abs().max(dc.abs());
    if n == 0 {
        return vec![a];
    }
    let mut out = Vec::with_capacity(n as usize + 2);
    for i in 0..=n {
        let (r, r2) = round_candidates(ar * n + i * dr, n);
        let (c, c2) = round_candidates(ac * n + i * dc, n);
        for rr in std::iter::once(r).chain(r2) {
            for cc in std::iter::once(c).chain(c2) {
                out.push(GridIndex::new(rr as usize, cc as usize));
            }
        }
    }
    out
}

/// Number of in-building cells on the line of sight between `p` and `q`.
pub fn blocking_cells(heights: &FieldRaster, p: GridIndex, q: GridIndex) -> usize {
    let spec = heights.spec();
    line_cells(p, q)
        .into_iter()
        .filter(|&c| !heights.mask()[spec.offset(c)])
        .count()
}

/// Ground-truth RSS field (dBW). In-building cells are masked out.
pub fn gen_true_field(heights: &FieldRaster, cfg: &SceneConfig) -> Result<FieldRaster> {
    let spec = *heights.spec();
    let jammer = cfg
        .jammer_true
        .nearest_cell(&spec)
        .ok_or_else(|| Error::config("jammer_true", "outside the grid"))?;
    if !heights.is_valid(jammer) {
        return Err(Error::config(
            "jammer_true",
            "jammer lies inside a building",
        ));
    }
    let mut values = vec![f64::NAN; spec.len()];
    for p in spec.indices() {
        let k = spec.offset(p);
        if !heights.mask()[k] {
            continue;
        }
        let d = spec.distance_m(p, cfg.jammer_true);
        let blocked = blocking_cells(heights, p, jammer);
        let on_axis = p.row == jammer.row || p.col == jammer.col;
        let canyon = if on_axis && blocked == 0 {
            cfg.canyon_gain_db
        } else {
            0.0
        };
        values[k] = cfg.p0_true
            - 10.0 * cfg.gamma_true * (d + PATH_LOSS_EPSILON_M).log10()
            - cfg.shadow_db_per_building * blocked as f64
            + canyon;
    }
    FieldRaster::new(spec, values, heights.mask().to_vec(), "dBW")
}

/// Draws `n` distinct outdoor cells uniformly without replacement and adds
/// Gaussian noise of precision `cfg.noise_precision` to the field there.
pub fn sample_dataset(
    heights: &FieldRaster,
    field: &FieldRaster,
    cfg: &SceneConfig,
    n: usize,
    seed: u64,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::config("train_size", "must be positive"));
    }
    let cells = field.outdoor_cells();
    if n > cells.len() {
        return Err(Error::InsufficientCells {
            requested: n,
            available: cells.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = cfg.noise_precision.recip().sqrt();
    let picks = index::sample(&mut rng, cells.len(), n);
    let measurements = picks
        .into_iter()
        .map(|k| {
            let p = cells[k];
            let noise: f64 = rng.sample(StandardNormal);
            Measurement {
                position: p,
                rss: field.values()[field.spec().offset(p)] + sd * noise,
            }
        })
        .collect();
    Dataset::new(heights.clone(), measurements, Some(cfg.noise_precision))
}

/// Heights and truth field generated from one configuration.
#[derive(Debug, Clone)]
pub struct Scene {
    pub config: SceneConfig,
    pub heights: FieldRaster,
    pub true_field: FieldRaster,
}

impl Scene {
    pub fn generate(cfg: &SceneConfig) -> Result<Self> {
        let heights = gen_buildings(cfg)?;
        let true_field = gen_true_field(&heights, cfg)?;
        Ok(Self {
            config: cfg.clone(),
            heights,
            true_field,
        })
    }

    pub fn sample(&self, n: usize, seed: u64) -> Result<Dataset> {
        sample_dataset(&self.heights, &self.true_field, &self.config, n, seed)
    }
}
