//! Coarse analysis grid, fine-raster aggregation, and the covariate
//! transforms applied before model assembly: interface products, monthly
//! anomalies, square-root transform, and standardization.

use crate::error::{Error, Result};

/// Row-major cell index into the coarse grid (row 0 is the southern edge).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellId(pub usize);

/// Geometry of the coarse analysis grid (2 km cells in the default
/// configuration) plus the study-region membership mask.
#[derive(Debug, Clone)]
pub struct GridSpec {
    origin: (f64, f64),
    cell_size: f64,
    n_rows: usize,
    n_cols: usize,
    active: Vec<bool>,
    /// Rank of each active cell in CellId order; usize::MAX for inactive.
    active_rank: Vec<usize>,
    active_cells: Vec<CellId>,
}

impl GridSpec {
    pub fn new(
        origin: (f64, f64),
        cell_size: f64,
        n_rows: usize,
        n_cols: usize,
        active: Vec<bool>,
    ) -> Result<Self> {
        if !(cell_size > 0.0) || !cell_size.is_finite() {
            return Err(Error::config("grid: cell_size must be positive"));
        }
        if n_rows == 0 || n_cols == 0 {
            return Err(Error::config("grid: n_rows and n_cols must be >= 1"));
        }
        if active.len() != n_rows * n_cols {
            return Err(Error::config(format!(
                "grid: active mask has {} entries, expected {}",
                active.len(),
                n_rows * n_cols
            )));
        }
        if !active.iter().any(|&a| a) {
            return Err(Error::config("grid: no active cells"));
        }
        let mut active_rank = vec![usize::MAX; active.len()];
        let mut active_cells = Vec::new();
        for (i, &a) in active.iter().enumerate() {
            if a {
                active_rank[i] = active_cells.len();
                active_cells.push(CellId(i));
            }
        }
        Ok(GridSpec {
            origin,
            cell_size,
            n_rows,
            n_cols,
            active,
            active_rank,
            active_cells,
        })
    }

    /// Grid with every cell active.
    pub fn fully_active(
        origin: (f64, f64),
        cell_size: f64,
        n_rows: usize,
        n_cols: usize,
    ) -> Result<Self> {
        GridSpec::new(origin, cell_size, n_rows, n_cols, vec![true; n_rows * n_cols])
    }

    pub fn origin(&self) -> (f64, f64) {
        self.origin
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    /// Exposure constant per cell-month: cell area in km^2.
    pub fn cell_area(&self) -> f64 {
        self.cell_size * self.cell_size
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn n_cells(&self) -> usize {
        self.n_rows * self.n_cols
    }

    pub fn n_active(&self) -> usize {
        self.active_cells.len()
    }

    pub fn cell_id(&self, row: usize, col: usize) -> CellId {
        debug_assert!(row < self.n_rows && col < self.n_cols);
        CellId(row * self.n_cols + col)
    }

    pub fn row_col(&self, cell: CellId) -> (usize, usize) {
        (cell.0 / self.n_cols, cell.0 % self.n_cols)
    }

    pub fn is_active(&self, cell: CellId) -> bool {
        self.active[cell.0]
    }

    /// Rank of `cell` among active cells (CellId order), if active.
    pub fn active_rank(&self, cell: CellId) -> Option<usize> {
        match self.active_rank[cell.0] {
            usize::MAX => None,
            r => Some(r),
        }
    }

    pub fn active_cells(&self) -> &[CellId] {
        &self.active_cells
    }

    pub fn cell_center(&self, cell: CellId) -> (f64, f64) {
        let (row, col) = self.row_col(cell);
        (
            self.origin.0 + (col as f64 + 0.5) * self.cell_size,
            self.origin.1 + (row as f64 + 0.5) * self.cell_size,
        )
    }

    /// Centers of all active cells, in active-rank order.
    pub fn active_centers(&self) -> Vec<(f64, f64)> {
        self.active_cells.iter().map(|&c| self.cell_center(c)).collect()
    }

    /// Bounding box (xmin, ymin, xmax, ymax) of the full grid.
    pub fn extent(&self) -> (f64, f64, f64, f64) {
        (
            self.origin.0,
            self.origin.1,
            self.origin.0 + self.n_cols as f64 * self.cell_size,
            self.origin.1 + self.n_rows as f64 * self.cell_size,
        )
    }
}

/// Fine-resolution raster (0.2 km pixels in the default configuration),
/// row-major with row 0 at the southern edge.
#[derive(Debug, Clone)]
pub struct FineRaster {
    pub variable: String,
    pub origin: (f64, f64),
    pub resolution: f64,
    pub n_rows: usize,
    pub n_cols: usize,
    pub missing_code: f64,
    pub values: Vec<f64>,
}

impl FineRaster {
    pub fn new(
        variable: impl Into<String>,
        origin: (f64, f64),
        resolution: f64,
        n_rows: usize,
        n_cols: usize,
        missing_code: f64,
        values: Vec<f64>,
    ) -> Result<Self> {
        if !(resolution > 0.0) {
            return Err(Error::config("raster: resolution must be positive"));
        }
        if values.len() != n_rows * n_cols {
            return Err(Error::config(format!(
                "raster: {} values for a {}x{} raster",
                values.len(),
                n_rows,
                n_cols
            )));
        }
        Ok(FineRaster {
            variable: variable.into(),
            origin,
            resolution,
            n_rows,
            n_cols,
            missing_code,
            values,
        })
    }

    pub fn value(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.n_cols + col]
    }

    pub fn is_missing(&self, v: f64) -> bool {
        v.is_nan() || v == self.missing_code
    }

    /// Number of fine pixels per coarse cell edge, or a configuration
    /// error when the resolutions are incompatible.
    pub fn pixels_per_cell_edge(&self, grid: &GridSpec) -> Result<usize> {
        let ratio = grid.cell_size() / self.resolution;
        let rounded = ratio.round();
        if (ratio - rounded).abs() > 1e-9 * ratio.max(1.0) || rounded < 1.0 {
            return Err(Error::config(format!(
                "raster resolution {} does not divide cell size {} exactly",
                self.resolution,
                grid.cell_size()
            )));
        }
        Ok(rounded as usize)
    }

    fn check_covers(&self, grid: &GridSpec, ratio: usize) -> Result<()> {
        let tol = 1e-6 * self.resolution;
        if (self.origin.0 - grid.origin().0).abs() > tol
            || (self.origin.1 - grid.origin().1).abs() > tol
        {
            return Err(Error::config(
                "raster origin does not align with the grid origin",
            ));
        }
        if self.n_cols != grid.n_cols() * ratio || self.n_rows != grid.n_rows() * ratio {
            return Err(Error::config(format!(
                "raster is {}x{}, expected {}x{} to cover the grid",
                self.n_rows,
                self.n_cols,
                grid.n_rows() * ratio,
                grid.n_cols() * ratio
            )));
        }
        Ok(())
    }
}

/// Outcome of aggregating one fine raster to the coarse grid. Vectors are
/// in active-rank order; cells whose fine pixels were all missing carry
/// NaN and are listed for quality control.
#[derive(Debug, Clone)]
pub struct Aggregated {
    pub variable: String,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub n_pixels: Vec<usize>,
    pub all_missing: Vec<CellId>,
}

/// Mean and population standard deviation of the fine pixels inside each
/// active cell, missing-coded pixels excluded.
pub fn aggregate_mean_sd(raster: &FineRaster, grid: &GridSpec) -> Result<Aggregated> {
    let ratio = raster.pixels_per_cell_edge(grid)?;
    raster.check_covers(grid, ratio)?;

    let n_active = grid.n_active();
    let mut mean = vec![f64::NAN; n_active];
    let mut sd = vec![f64::NAN; n_active];
    let mut n_pixels = vec![0usize; n_active];
    let mut all_missing = Vec::new();

    for (rank, &cell) in grid.active_cells().iter().enumerate() {
        let (row, col) = grid.row_col(cell);
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let mut n = 0usize;
        for fr in (row * ratio)..((row + 1) * ratio) {
            for fc in (col * ratio)..((col + 1) * ratio) {
                let v = raster.value(fr, fc);
                if !raster.is_missing(v) {
                    sum += v;
                    sum_sq += v * v;
                    n += 1;
                }
            }
        }
        if n == 0 {
            all_missing.push(cell);
        } else {
            let m = sum / n as f64;
            mean[rank] = m;
            sd[rank] = (sum_sq / n as f64 - m * m).max(0.0).sqrt();
            n_pixels[rank] = n;
        }
    }

    Ok(Aggregated {
        variable: raster.variable.clone(),
        mean,
        sd,
        n_pixels,
        all_missing,
    })
}

/// Elementwise product of two per-cell covariates on their raw scales
/// (standardization, if any, is applied downstream like for any covariate).
pub fn interface_covariate(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::config(format!(
            "interface covariate: cell sets differ ({} vs {} cells)",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).collect())
}

/// Values defined on (active cell, month) pairs; index = cell_rank * n_months + (month - 1).
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTimeField {
    pub n_cells: usize,
    pub n_months: usize,
    pub values: Vec<f64>,
}

impl SpaceTimeField {
    pub fn new(n_cells: usize, n_months: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_cells * n_months {
            return Err(Error::config(format!(
                "space-time field: {} values for {} cells x {} months",
                values.len(),
                n_cells,
                n_months
            )));
        }
        Ok(SpaceTimeField {
            n_cells,
            n_months,
            values,
        })
    }

    pub fn constant(n_cells: usize, n_months: usize, value: f64) -> Self {
        SpaceTimeField {
            n_cells,
            n_months,
            values: vec![value; n_cells * n_months],
        }
    }

    pub fn get(&self, cell_rank: usize, month: usize) -> f64 {
        debug_assert!(month >= 1 && month <= self.n_months);
        self.values[cell_rank * self.n_months + (month - 1)]
    }

    pub fn set(&mut self, cell_rank: usize, month: usize, v: f64) {
        self.values[cell_rank * self.n_months + (month - 1)] = v;
    }
}

/// Calendar month (1-based) of a 1-based month index.
pub fn calendar_month(month_index: usize, months_per_year: usize) -> usize {
    (month_index - 1) % months_per_year + 1
}

/// Year index (0-based) of a 1-based month index.
pub fn year_index(month_index: usize, months_per_year: usize) -> usize {
    (month_index - 1) / months_per_year
}

/// Subtracts, for each calendar month, the mean over all cells and all
/// years of that calendar month. Returns the anomalies and the
/// `months_per_year` global means.
pub fn monthly_anomalies(
    field: &SpaceTimeField,
    months_per_year: usize,
) -> (SpaceTimeField, Vec<f64>) {
    let mut sums = vec![0.0f64; months_per_year];
    let mut counts = vec![0usize; months_per_year];
    for cell in 0..field.n_cells {
        for t in 1..=field.n_months {
            let m = calendar_month(t, months_per_year) - 1;
            sums[m] += field.get(cell, t);
            counts[m] += 1;
        }
    }
    let means: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c > 0 { s / c as f64 } else { f64::NAN })
        .collect();

    let mut out = field.clone();
    for cell in 0..field.n_cells {
        for t in 1..=field.n_months {
            let m = calendar_month(t, months_per_year) - 1;
            out.set(cell, t, field.get(cell, t) - means[m]);
        }
    }
    (out, means)
}

/// Elementwise square root; applied before anomaly computation for the
/// square-root precipitation covariate.
pub fn sqrt_transform(field: &SpaceTimeField) -> Result<SpaceTimeField> {
    let mut out = field.clone();
    for v in &mut out.values {
        if *v < 0.0 {
            return Err(Error::domain(format!(
                "sqrt transform: negative input {v}"
            )));
        }
        *v = v.sqrt();
    }
    Ok(out)
}

/// Centers and scales `values` in place to mean 0 and (population) standard
/// deviation 1; returns the (mean, sd) used. A constant input cannot be
/// standardized and is a configuration error.
pub fn standardize(values: &mut [f64]) -> Result<(f64, f64)> {
    let n = values.len();
    if n == 0 {
        return Err(Error::config("standardize: empty input"));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let sd = var.sqrt();
    if !(sd > 0.0) || !sd.is_finite() {
        return Err(Error::config(
            "standardize: covariate is constant or non-finite",
        ));
    }
    for v in values.iter_mut() {
        *v = (*v - mean) / sd;
    }
    Ok((mean, sd))
}
