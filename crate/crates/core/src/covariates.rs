//! Assembled covariate table: per-cell static covariates, per-(cell, month)
//! dynamic covariates, and the standardization bookkeeping shared by model
//! assembly and prediction.

use crate::error::{Error, Result};
use crate::grid::{standardize, SpaceTimeField};

pub const TIME_TREND_NAME: &str = "time_trend";

/// Standardization record for one covariate.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardization {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
}

/// Static (per active cell) and dynamic (per active cell and month)
/// covariates, standardized at assembly. The normalized time trend is a
/// dynamic covariate that keeps its [0, 1] scale.
#[derive(Debug, Clone)]
pub struct CovariateTable {
    n_cells: usize,
    n_months: usize,
    static_names: Vec<String>,
    static_values: Vec<Vec<f64>>,
    dynamic_names: Vec<String>,
    dynamic_values: Vec<SpaceTimeField>,
    standardization: Vec<Standardization>,
}

impl CovariateTable {
    pub fn builder(n_cells: usize, n_months: usize) -> CovariateTableBuilder {
        CovariateTableBuilder {
            n_cells,
            n_months,
            static_entries: Vec::new(),
            dynamic_entries: Vec::new(),
            include_time_trend: false,
        }
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn n_months(&self) -> usize {
        self.n_months
    }

    /// Number of covariate columns (statics then dynamics).
    pub fn n_covariates(&self) -> usize {
        self.static_names.len() + self.dynamic_names.len()
    }

    /// Covariate names in design-matrix column order.
    pub fn names(&self) -> Vec<String> {
        self.static_names
            .iter()
            .chain(self.dynamic_names.iter())
            .cloned()
            .collect()
    }

    pub fn static_names(&self) -> &[String] {
        &self.static_names
    }

    pub fn dynamic_names(&self) -> &[String] {
        &self.dynamic_names
    }

    pub fn static_values(&self, idx: usize) -> &[f64] {
        &self.static_values[idx]
    }

    pub fn dynamic_values(&self, idx: usize) -> &SpaceTimeField {
        &self.dynamic_values[idx]
    }

    pub fn standardization(&self) -> &[Standardization] {
        &self.standardization
    }

    /// Fills `out` with the covariate row of (cell_rank, month):
    /// statics first, then dynamics.
    pub fn fill_row(&self, cell_rank: usize, month: usize, out: &mut [f64]) {
        let ns = self.static_values.len();
        for (k, col) in self.static_values.iter().enumerate() {
            out[k] = col[cell_rank];
        }
        for (k, f) in self.dynamic_values.iter().enumerate() {
            out[ns + k] = f.get(cell_rank, month);
        }
    }

    pub fn row(&self, cell_rank: usize, month: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n_covariates()];
        self.fill_row(cell_rank, month, &mut out);
        out
    }
}

pub struct CovariateTableBuilder {
    n_cells: usize,
    n_months: usize,
    static_entries: Vec<(String, Vec<f64>)>,
    dynamic_entries: Vec<(String, SpaceTimeField, bool)>,
    include_time_trend: bool,
}

impl CovariateTableBuilder {
    pub fn static_covariate(mut self, name: impl Into<String>, values: Vec<f64>) -> Self {
        self.static_entries.push((name.into(), values));
        self
    }

    /// Dynamic covariate, standardized at build time.
    pub fn dynamic_covariate(mut self, name: impl Into<String>, field: SpaceTimeField) -> Self {
        self.dynamic_entries.push((name.into(), field, true));
        self
    }

    /// Dynamic covariate kept on its raw scale.
    pub fn dynamic_covariate_raw(mut self, name: impl Into<String>, field: SpaceTimeField) -> Self {
        self.dynamic_entries.push((name.into(), field, false));
        self
    }

    /// Adds the normalized time trend (t - t_min) / (t_max - t_min) as a
    /// raw-scale dynamic covariate.
    pub fn with_time_trend(mut self) -> Self {
        self.include_time_trend = true;
        self
    }

    pub fn build(self) -> Result<CovariateTable> {
        let mut static_names = Vec::new();
        let mut static_values = Vec::new();
        let mut standardization = Vec::new();

        let mut seen = std::collections::HashSet::new();
        for (name, mut values) in self.static_entries {
            if !seen.insert(name.clone()) {
                return Err(Error::config(format!("duplicate covariate name `{name}`")));
            }
            if values.len() != self.n_cells {
                return Err(Error::config(format!(
                    "static covariate `{name}` has {} values, expected {}",
                    values.len(),
                    self.n_cells
                )));
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::config(format!(
                    "static covariate `{name}` contains missing values; fix the QC list first"
                )));
            }
            let (mean, sd) = standardize(&mut values)
                .map_err(|e| Error::config(format!("covariate `{name}`: {e}")))?;
            standardization.push(Standardization {
                name: name.clone(),
                mean,
                sd,
            });
            static_names.push(name);
            static_values.push(values);
        }

        let mut dynamic_names = Vec::new();
        let mut dynamic_values = Vec::new();
        let mut dynamic_entries = self.dynamic_entries;
        if self.include_time_trend {
            let t_max = self.n_months as f64;
            let denom = if t_max > 1.0 { t_max - 1.0 } else { 1.0 };
            let mut f = SpaceTimeField::constant(self.n_cells, self.n_months, 0.0);
            for c in 0..self.n_cells {
                for t in 1..=self.n_months {
                    f.set(c, t, (t as f64 - 1.0) / denom);
                }
            }
            dynamic_entries.push((TIME_TREND_NAME.to_string(), f, false));
        }
        for (name, mut field, standardized) in dynamic_entries {
            if !seen.insert(name.clone()) {
                return Err(Error::config(format!("duplicate covariate name `{name}`")));
            }
            if field.n_cells != self.n_cells || field.n_months != self.n_months {
                return Err(Error::config(format!(
                    "dynamic covariate `{name}` is {}x{}, expected {}x{}",
                    field.n_cells, field.n_months, self.n_cells, self.n_months
                )));
            }
            if field.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::config(format!(
                    "dynamic covariate `{name}` contains missing values"
                )));
            }
            let (mean, sd) = if standardized {
                let (m, s) = standardize(&mut field.values)
                    .map_err(|e| Error::config(format!("covariate `{name}`: {e}")))?;
                (m, s)
            } else {
                (0.0, 1.0)
            };
            standardization.push(Standardization {
                name: name.clone(),
                mean,
                sd,
            });
            dynamic_names.push(name);
            dynamic_values.push(field);
        }

        if static_names.is_empty() && dynamic_names.is_empty() {
            return Err(Error::config("covariate table has no covariates"));
        }

        Ok(CovariateTable {
            n_cells: self.n_cells,
            n_months: self.n_months,
            static_names,
            static_values,
            dynamic_names,
            dynamic_values,
            standardization,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builds_and_standardizes() {
        let field = SpaceTimeField::new(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let table = CovariateTable::builder(3, 2)
            .static_covariate("elev", vec![10.0, 20.0, 40.0])
            .dynamic_covariate("tavg", field)
            .with_time_trend()
            .build()
            .unwrap();
        assert_eq!(table.n_covariates(), 3);
        assert_eq!(table.names(), vec!["elev", "tavg", TIME_TREND_NAME]);

        // Standardized columns have mean ~0.
        let sum: f64 = table.static_values(0).iter().sum();
        assert!(sum.abs() < 1e-10);

        // Time trend keeps its [0, 1] scale.
        let row_first = table.row(0, 1);
        let row_last = table.row(0, 2);
        assert_eq!(row_first[2], 0.0);
        assert_eq!(row_last[2], 1.0);
    }

    #[test]
    fn rejects_missing_values() {
        let r = CovariateTable::builder(2, 1)
            .static_covariate("bad", vec![1.0, f64::NAN])
            .build();
        assert!(r.is_err());
    }

    #[test]
    fn rejects_duplicate_names() {
        let r = CovariateTable::builder(2, 1)
            .static_covariate("x", vec![1.0, 2.0])
            .static_covariate("x", vec![2.0, 1.0])
            .build();
        assert!(r.is_err());
    }

    #[test]
    fn rejects_dimension_mismatch() {
        let r = CovariateTable::builder(3, 1)
            .static_covariate("x", vec![1.0, 2.0])
            .build();
        assert!(r.is_err());
    }
}
