//! The latent Gaussian count model: Poisson observations with exposure
//! offsets, fixed effects, a cyclic monthly random walk, and a space-time
//! random effect in four variants (none, shared, independent yearly, AR(1)
//! yearly). Includes the intra-year zero-count subsampling transform.

use nalgebra::DMatrix;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::covariates::CovariateTable;
use crate::error::{Error, Result};
use crate::grid::{calendar_month, year_index, CellId, GridSpec};
use crate::mesh::{projector, Mesh};
use crate::priors::PriorSpec;
use crate::sim::gmrf_factor;
use crate::sparse::{SparseMatrix, Triplets};
use crate::spde::{MaternHyper, SpdeOperators};

/// One response record: a count over one cell and one month, or an
/// aggregated zero over `n_months_aggregated` months of a cell-year.
#[derive(Debug, Clone, PartialEq)]
pub struct CountRecord {
    pub cell: CellId,
    /// 1-based month index; for aggregated records, the sampled month
    /// whose covariates the record carries.
    pub month_index: usize,
    pub count: u32,
    /// Exposure in km^2 * months: cell_area * n_months_aggregated.
    pub exposure: f64,
    pub n_months_aggregated: usize,
}

impl CountRecord {
    pub fn single(cell: CellId, month_index: usize, count: u32, cell_area: f64) -> Self {
        CountRecord {
            cell,
            month_index,
            count,
            exposure: cell_area,
            n_months_aggregated: 1,
        }
    }
}

/// Replaces, within each (cell, year), the k zero-count months by a single
/// record at a uniformly sampled month with exposure cell_area * k.
/// Positive counts pass through unchanged. Deterministic given the seed
/// (each cell-year draws from its own counter-based stream), so the result
/// does not depend on iteration or thread order.
pub fn subsample_zero_months(
    records: &[CountRecord],
    months_per_year: usize,
    seed: u64,
) -> Result<Vec<CountRecord>> {
    let mut seen = std::collections::HashSet::new();
    for r in records {
        if r.n_months_aggregated != 1 {
            return Err(Error::config(
                "subsampling expects unaggregated records (one per cell-month)",
            ));
        }
        if !seen.insert((r.cell, r.month_index)) {
            return Err(Error::config(format!(
                "duplicate record for cell {} month {}",
                r.cell.0, r.month_index
            )));
        }
    }

    // Group record indices by (cell, year).
    let mut groups: std::collections::BTreeMap<(CellId, usize), Vec<usize>> =
        std::collections::BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        let year = year_index(r.month_index, months_per_year);
        groups.entry((r.cell, year)).or_default().push(i);
    }

    let mut out = Vec::new();
    for ((cell, year), idxs) in groups {
        let mut zeros: Vec<usize> = idxs
            .iter()
            .cloned()
            .filter(|&i| records[i].count == 0)
            .collect();
        zeros.sort_by_key(|&i| records[i].month_index);
        for &i in &idxs {
            if records[i].count > 0 {
                out.push(records[i].clone());
            }
        }
        let k = zeros.len();
        if k > 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream((cell.0 as u64) << 16 | year as u64);
            let pick = zeros[rng.gen_range(0..k)];
            let r = &records[pick];
            out.push(CountRecord {
                cell,
                month_index: r.month_index,
                count: 0,
                exposure: r.exposure * k as f64,
                n_months_aggregated: k,
            });
        }
    }
    out.sort_by_key(|r| (r.cell, r.month_index));
    Ok(out)
}

/// Spatio-temporal structure of the random effect W(s, a(t)).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelVariant {
    /// W = 0: fixed and seasonal effects only.
    FixedOnly,
    /// One spatial field shared by all years.
    SharedSpatial,
    /// Independent spatial fields per year.
    IndependentYearly,
    /// Stationary AR(1) over years:
    /// W(s, a) = rho W(s, a-1) + sqrt(1 - rho^2) eps_a(s).
    Ar1Yearly,
}

impl ModelVariant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fixed_only" => Ok(ModelVariant::FixedOnly),
            "shared_spatial" => Ok(ModelVariant::SharedSpatial),
            "independent_yearly" => Ok(ModelVariant::IndependentYearly),
            "ar1_yearly" => Ok(ModelVariant::Ar1Yearly),
            other => Err(Error::config(format!(
                "unknown model variant `{other}` (expected fixed_only, shared_spatial, independent_yearly, ar1_yearly)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModelVariant::FixedOnly => "fixed_only",
            ModelVariant::SharedSpatial => "shared_spatial",
            ModelVariant::IndependentYearly => "independent_yearly",
            ModelVariant::Ar1Yearly => "ar1_yearly",
        }
    }

    pub fn has_spatial(&self) -> bool {
        !matches!(self, ModelVariant::FixedOnly)
    }

    pub fn has_rho(&self) -> bool {
        matches!(self, ModelVariant::Ar1Yearly)
    }
}

/// Natural-scale hyperparameters; which ones are active depends on the
/// variant and on whether the seasonal block is present.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperParams {
    pub range: f64,
    pub sd: f64,
    pub rho: f64,
    pub seasonal_prec: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            range: 30.0,
            sd: 1.0,
            rho: 0.0,
            seasonal_prec: 1.0,
        }
    }
}

/// Per-record observation term of the likelihood.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Obs {
    /// Poisson(N | exposure * exp(eta)); the stored log-likelihood term is
    /// N eta - E exp(eta) - ln(N!) (the constant N ln E is dropped).
    Poisson { n: f64, exposure: f64, log_fact: f64 },
    /// Gaussian pseudo-likelihood used by toy problems and verification.
    Gaussian { y: f64, prec: f64 },
}

impl Obs {
    pub fn log_lik(&self, eta: f64) -> f64 {
        match *self {
            Obs::Poisson {
                n,
                exposure,
                log_fact,
            } => n * eta - exposure * eta.exp() - log_fact,
            Obs::Gaussian { y, prec } => {
                -0.5 * prec * (y - eta) * (y - eta)
                    + 0.5 * (prec.ln() - (2.0 * std::f64::consts::PI).ln())
            }
        }
    }

    /// (d log_lik / d eta, -d^2 log_lik / d eta^2); the curvature is
    /// nonnegative for both families.
    pub fn grad_curv(&self, eta: f64) -> (f64, f64) {
        match *self {
            Obs::Poisson { n, exposure, .. } => {
                let mu = exposure * eta.exp();
                (n - mu, mu)
            }
            Obs::Gaussian { y, prec } => (prec * (y - eta), prec),
        }
    }
}

/// Sparse per-record design rows (CSR without the matrix wrapper).
#[derive(Debug, Clone)]
pub struct DesignRows {
    n_cols: usize,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
}

impl DesignRows {
    pub fn builder(n_cols: usize) -> DesignRowsBuilder {
        DesignRowsBuilder {
            n_cols,
            row_ptr: vec![0],
            cols: Vec::new(),
            vals: Vec::new(),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn row(&self, r: usize) -> (&[u32], &[f64]) {
        let (a, b) = (self.row_ptr[r], self.row_ptr[r + 1]);
        (&self.cols[a..b], &self.vals[a..b])
    }

    /// eta = D x.
    pub fn eta(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n_cols);
        (0..self.n_rows())
            .map(|r| {
                let (cols, vals) = self.row(r);
                cols.iter()
                    .zip(vals)
                    .map(|(&c, &v)| v * x[c as usize])
                    .sum()
            })
            .collect()
    }

    /// out += D' g.
    pub fn add_transpose_mul(&self, g: &[f64], out: &mut [f64]) {
        for r in 0..self.n_rows() {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                out[c as usize] += v * g[r];
            }
        }
    }
}

pub struct DesignRowsBuilder {
    n_cols: usize,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
}

impl DesignRowsBuilder {
    pub fn push_row(&mut self, entries: &[(u32, f64)]) {
        for &(c, v) in entries {
            debug_assert!((c as usize) < self.n_cols);
            self.cols.push(c);
            self.vals.push(v);
        }
        self.row_ptr.push(self.cols.len());
    }

    pub fn finish(self) -> DesignRows {
        DesignRows {
            n_cols: self.n_cols,
            row_ptr: self.row_ptr,
            cols: self.cols,
            vals: self.vals,
        }
    }
}

/// A fully specified latent Gaussian problem at fixed hyperparameters:
/// observations, design rows, and the latent prior precision. This is the
/// interface the Laplace engine consumes; toy problems build it directly.
pub struct LatentProblem<'a> {
    pub obs: &'a [Obs],
    pub rows: &'a DesignRows,
    pub q: SparseMatrix,
    pub q_log_det: f64,
}

/// Coordinate layout of the latent vector:
/// [fixed effects | seasonal basis coefficients | spatial fields].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatentLayout {
    pub n_fixed: usize,
    pub n_seasonal: usize,
    pub n_mesh: usize,
    pub n_fields: usize,
}

impl LatentLayout {
    pub fn total(&self) -> usize {
        self.n_fixed + self.n_seasonal + self.n_mesh * self.n_fields
    }

    pub fn seasonal_offset(&self) -> usize {
        self.n_fixed
    }

    pub fn spatial_offset(&self) -> usize {
        self.n_fixed + self.n_seasonal
    }

    pub fn field_offset(&self, year: usize) -> usize {
        self.spatial_offset() + year * self.n_mesh
    }
}

/// Assembled Bayesian regression model (the responses, design, priors, and
/// everything needed to evaluate likelihood and latent prior per theta).
pub struct LatentModel {
    obs: Vec<Obs>,
    rows: DesignRows,
    records: Vec<CountRecord>,
    layout: LatentLayout,
    variant: ModelVariant,
    priors: PriorSpec,
    months_per_year: usize,
    n_years: usize,
    fixed_names: Vec<String>,
    /// Orthonormal sum-to-zero basis S (m x (m-1)) and the scaled
    /// structure S' R* S of the cyclic RW1, when seasonal is present.
    seasonal_basis: Option<DMatrix<f64>>,
    seasonal_structure: Option<DMatrix<f64>>,
    seasonal_structure_log_det: f64,
    spde: Option<SpdeOperators>,
    /// Barycentric projector entries per active cell (node, weight).
    cell_projector: Vec<Vec<(usize, f64)>>,
}

impl LatentModel {
    /// Assembles the model from subsampled (or full) records, covariates,
    /// and the mesh (required unless `variant` is FixedOnly). The fixed
    /// design is [intercept, covariates...]; the seasonal block is a
    /// cyclic RW1 over `months_per_year` levels under a sum-to-zero
    /// constraint; the spatial block follows the variant.
    pub fn assemble(
        grid: &GridSpec,
        records: Vec<CountRecord>,
        covariates: &CovariateTable,
        mesh: Option<&Mesh>,
        variant: ModelVariant,
        priors: PriorSpec,
        months_per_year: usize,
        include_seasonal: bool,
    ) -> Result<LatentModel> {
        priors.validate()?;
        if covariates.n_cells() != grid.n_active() {
            return Err(Error::config(format!(
                "covariate table covers {} cells, grid has {} active",
                covariates.n_cells(),
                grid.n_active()
            )));
        }
        if records.is_empty() {
            return Err(Error::config("no count records"));
        }
        if months_per_year == 0 {
            return Err(Error::config("months_per_year must be positive"));
        }
        let n_months = covariates.n_months();
        let n_years = n_months.div_ceil(months_per_year);

        let (spde, cell_projector, n_mesh) = if variant.has_spatial() {
            let mesh = mesh.ok_or_else(|| {
                Error::config("spatial model variants require a mesh")
            })?;
            let a = projector(mesh, &grid.active_centers())?;
            let mut per_cell = Vec::with_capacity(grid.n_active());
            for i in 0..a.n_rows() {
                let (cols, vals) = a.row(i);
                per_cell.push(
                    cols.iter()
                        .zip(vals)
                        .map(|(&c, &v)| (c, v))
                        .collect::<Vec<_>>(),
                );
            }
            let ops = SpdeOperators::from_mesh(mesh)?;
            let n = ops.n();
            (Some(ops), per_cell, n)
        } else {
            (None, Vec::new(), 0)
        };

        let n_fields = match variant {
            ModelVariant::FixedOnly => 0,
            ModelVariant::SharedSpatial => 1,
            ModelVariant::IndependentYearly | ModelVariant::Ar1Yearly => n_years,
        };
        let n_fixed = 1 + covariates.n_covariates();
        let n_seasonal = if include_seasonal {
            if months_per_year < 3 {
                return Err(Error::config(
                    "a cyclic seasonal walk needs at least 3 levels",
                ));
            }
            months_per_year - 1
        } else {
            0
        };
        let layout = LatentLayout {
            n_fixed,
            n_seasonal,
            n_mesh,
            n_fields,
        };

        let (seasonal_basis, seasonal_structure, seasonal_structure_log_det) = if include_seasonal
        {
            let s = sum_to_zero_basis(months_per_year);
            let r_scaled = scaled_cyclic_rw1_structure(months_per_year);
            let strs = s.transpose() * &r_scaled * &s;
            let chol = strs.clone().cholesky().ok_or_else(|| {
                Error::numerical("seasonal structure matrix is not positive definite")
            })?;
            let log_det = 2.0
                * chol
                    .l()
                    .diagonal()
                    .iter()
                    .map(|v| v.ln())
                    .sum::<f64>();
            (Some(s), Some(strs), log_det)
        } else {
            (None, None, 0.0)
        };

        let mut fixed_names = vec!["intercept".to_string()];
        fixed_names.extend(covariates.names());

        // Observation terms and design rows.
        let mut obs = Vec::with_capacity(records.len());
        let mut builder = DesignRows::builder(layout.total());
        let mut cov_row = vec![0.0; covariates.n_covariates()];
        let mut entries: Vec<(u32, f64)> = Vec::with_capacity(n_fixed + n_seasonal + 3);
        for r in &records {
            if r.month_index < 1 || r.month_index > n_months {
                return Err(Error::config(format!(
                    "record month {} outside covariate range 1..={}",
                    r.month_index, n_months
                )));
            }
            let rank = grid.active_rank(r.cell).ok_or_else(|| {
                Error::config(format!("record cell {} is not active", r.cell.0))
            })?;
            if !(r.exposure > 0.0) {
                return Err(Error::config("record exposure must be positive"));
            }
            obs.push(Obs::Poisson {
                n: r.count as f64,
                exposure: r.exposure,
                log_fact: ln_factorial(r.count),
            });

            entries.clear();
            entries.push((0, 1.0));
            covariates.fill_row(rank, r.month_index, &mut cov_row);
            for (k, &v) in cov_row.iter().enumerate() {
                entries.push(((1 + k) as u32, v));
            }
            if let Some(s) = &seasonal_basis {
                let level = calendar_month(r.month_index, months_per_year) - 1;
                for j in 0..n_seasonal {
                    entries.push((
                        (layout.seasonal_offset() + j) as u32,
                        s[(level, j)],
                    ));
                }
            }
            if variant.has_spatial() {
                let field = match variant {
                    ModelVariant::SharedSpatial => 0,
                    _ => year_index(r.month_index, months_per_year),
                };
                let off = layout.field_offset(field);
                for &(node, w) in &cell_projector[rank] {
                    entries.push(((off + node) as u32, w));
                }
            }
            builder.push_row(&entries);
        }

        Ok(LatentModel {
            obs,
            rows: builder.finish(),
            records,
            layout,
            variant,
            priors,
            months_per_year,
            n_years,
            fixed_names,
            seasonal_basis,
            seasonal_structure,
            seasonal_structure_log_det,
            spde,
            cell_projector,
        })
    }

    pub fn layout(&self) -> LatentLayout {
        self.layout
    }

    pub fn variant(&self) -> ModelVariant {
        self.variant
    }

    pub fn priors(&self) -> &PriorSpec {
        &self.priors
    }

    pub fn records(&self) -> &[CountRecord] {
        &self.records
    }

    pub fn n_records(&self) -> usize {
        self.obs.len()
    }

    pub fn months_per_year(&self) -> usize {
        self.months_per_year
    }

    pub fn n_years(&self) -> usize {
        self.n_years
    }

    pub fn fixed_names(&self) -> &[String] {
        &self.fixed_names
    }

    pub fn obs(&self) -> &[Obs] {
        &self.obs
    }

    pub fn rows(&self) -> &DesignRows {
        &self.rows
    }

    pub fn has_seasonal(&self) -> bool {
        self.seasonal_basis.is_some()
    }

    pub fn seasonal_basis(&self) -> Option<&DMatrix<f64>> {
        self.seasonal_basis.as_ref()
    }

    /// Linear predictors eta = D x.
    pub fn linear_predictors(&self, x: &[f64]) -> Vec<f64> {
        self.rows.eta(x)
    }

    /// Poisson log likelihood sum_r [N eta - E exp(eta) - ln N!] with the
    /// record index of the first non-finite predictor on error.
    pub fn log_likelihood(&self, x: &[f64]) -> Result<f64> {
        let eta = self.linear_predictors(x);
        log_likelihood_eta(&self.obs, &eta)
    }

    /// Names of the active hyperparameters, in theta-vector order.
    pub fn theta_names(&self) -> Vec<&'static str> {
        let mut names = Vec::new();
        if self.variant.has_spatial() {
            names.push("range");
            names.push("sd");
        }
        if self.variant.has_rho() {
            names.push("rho");
        }
        if self.has_seasonal() {
            names.push("seasonal_prec");
        }
        names
    }

    pub fn theta_dim(&self) -> usize {
        self.theta_names().len()
    }

    /// Transformed hyperparameter vector: log range, log sd, atanh rho,
    /// log seasonal precision (active subset only).
    pub fn theta_to_vec(&self, h: &HyperParams) -> Vec<f64> {
        let mut v = Vec::new();
        if self.variant.has_spatial() {
            v.push(h.range.ln());
            v.push(h.sd.ln());
        }
        if self.variant.has_rho() {
            v.push(h.rho.atanh());
        }
        if self.has_seasonal() {
            v.push(h.seasonal_prec.ln());
        }
        v
    }

    pub fn theta_from_vec(&self, v: &[f64]) -> Result<HyperParams> {
        if v.len() != self.theta_dim() {
            return Err(Error::config(format!(
                "theta has {} entries, model needs {}",
                v.len(),
                self.theta_dim()
            )));
        }
        let mut h = HyperParams::default();
        let mut i = 0;
        if self.variant.has_spatial() {
            h.range = v[i].exp();
            h.sd = v[i + 1].exp();
            i += 2;
        }
        if self.variant.has_rho() {
            h.rho = v[i].tanh();
            i += 1;
        }
        if self.has_seasonal() {
            h.seasonal_prec = v[i].exp();
        }
        Ok(h)
    }

    /// Joint prior precision of the latent vector at theta, block-diagonal
    /// over fixed effects, the seasonal walk, and the spatial variant.
    pub fn build_prior_precision(&self, h: &HyperParams) -> Result<SparseMatrix> {
        if self.variant.has_rho() && !(h.rho.abs() < 1.0) {
            return Err(Error::domain(format!("|rho| must be < 1, got {}", h.rho)));
        }
        let mut blocks: Vec<SparseMatrix> = Vec::new();
        blocks.push(SparseMatrix::from_diag(&vec![
            self.priors.fixed_effect_precision;
            self.layout.n_fixed
        ]));
        if let Some(strs) = &self.seasonal_structure {
            if !(h.seasonal_prec > 0.0) {
                return Err(Error::domain("seasonal precision must be positive"));
            }
            let m = self.layout.n_seasonal;
            let mut t = Triplets::new(m, m);
            for i in 0..m {
                for j in 0..m {
                    let v = h.seasonal_prec * strs[(i, j)];
                    if v != 0.0 {
                        t.push(i, j, v);
                    }
                }
            }
            blocks.push(t.to_csr());
        }
        if self.variant.has_spatial() {
            let ops = self.spde.as_ref().expect("spatial variant carries operators");
            let q_s = ops.precision(&MaternHyper::new(h.range, h.sd)?)?;
            let q_w = match self.variant {
                ModelVariant::SharedSpatial => q_s,
                ModelVariant::IndependentYearly => {
                    SparseMatrix::identity(self.n_years).kron(&q_s)
                }
                ModelVariant::Ar1Yearly => ar1_precision(self.n_years, h.rho)?.kron(&q_s),
                ModelVariant::FixedOnly => unreachable!(),
            };
            blocks.push(q_w);
        }
        let refs: Vec<&SparseMatrix> = blocks.iter().collect();
        Ok(SparseMatrix::block_diag(&refs))
    }

    /// log det of the prior precision via the block structure (the
    /// Kronecker factors contribute analytically).
    pub fn prior_precision_log_det(&self, h: &HyperParams) -> Result<f64> {
        let mut acc = self.layout.n_fixed as f64 * self.priors.fixed_effect_precision.ln();
        if self.has_seasonal() {
            acc += self.layout.n_seasonal as f64 * h.seasonal_prec.ln()
                + self.seasonal_structure_log_det;
        }
        if self.variant.has_spatial() {
            let ops = self.spde.as_ref().unwrap();
            let q_s = ops.precision(&MaternHyper::new(h.range, h.sd)?)?;
            let ld_s = gmrf_factor(&q_s)?.log_det();
            let n_s = self.layout.n_mesh as f64;
            acc += match self.variant {
                ModelVariant::SharedSpatial => ld_s,
                ModelVariant::IndependentYearly => self.n_years as f64 * ld_s,
                ModelVariant::Ar1Yearly => {
                    // det(AR1 (x) Qs) = det(AR1)^n_s det(Qs)^n_years.
                    let ld_ar1 = -((self.n_years as f64 - 1.0) * (1.0 - h.rho * h.rho).ln());
                    n_s * ld_ar1 + self.n_years as f64 * ld_s
                }
                ModelVariant::FixedOnly => unreachable!(),
            };
        }
        Ok(acc)
    }

    /// Log prior density of the transformed hyperparameter vector,
    /// including the change-of-variable Jacobians. Out-of-domain values
    /// return -inf.
    pub fn log_prior_hyper(&self, theta: &[f64]) -> f64 {
        let Ok(h) = self.theta_from_vec(theta) else {
            return f64::NEG_INFINITY;
        };
        let mut acc = 0.0;
        let mut i = 0;
        if self.variant.has_spatial() {
            acc += self.priors.log_prior_range(h.range) + theta[i];
            acc += self.priors.log_prior_sd(h.sd) + theta[i + 1];
            i += 2;
        }
        if self.variant.has_rho() {
            acc += self.priors.log_prior_rho(h.rho) + (1.0 - h.rho * h.rho).ln();
            i += 1;
        }
        if self.has_seasonal() {
            // theta = ln kappa_f; sigma_f = exp(-theta/2),
            // |d sigma / d theta| = sigma_f / 2.
            let sd_f = (-theta[i] / 2.0).exp();
            acc += self.priors.log_prior_seasonal_sd(sd_f) + (sd_f / 2.0).ln();
        }
        acc
    }

    /// The latent problem at fixed theta, handed to the Laplace engine.
    pub fn problem(&self, h: &HyperParams) -> Result<LatentProblem<'_>> {
        Ok(LatentProblem {
            obs: &self.obs,
            rows: &self.rows,
            q: self.build_prior_precision(h)?,
            q_log_det: self.prior_precision_log_det(h)?,
        })
    }

    /// Design row of an arbitrary (cell rank, month) prediction target.
    pub fn target_row(
        &self,
        covariates: &CovariateTable,
        cell_rank: usize,
        month_index: usize,
    ) -> Result<Vec<(u32, f64)>> {
        if month_index < 1 || month_index > covariates.n_months() {
            return Err(Error::config(format!(
                "target month {month_index} outside covariate range"
            )));
        }
        let mut entries = Vec::with_capacity(self.layout.total().min(32));
        entries.push((0u32, 1.0));
        let mut cov_row = vec![0.0; covariates.n_covariates()];
        covariates.fill_row(cell_rank, month_index, &mut cov_row);
        for (k, &v) in cov_row.iter().enumerate() {
            entries.push(((1 + k) as u32, v));
        }
        if let Some(s) = &self.seasonal_basis {
            let level = calendar_month(month_index, self.months_per_year) - 1;
            for j in 0..self.layout.n_seasonal {
                entries.push(((self.layout.seasonal_offset() + j) as u32, s[(level, j)]));
            }
        }
        if self.variant.has_spatial() {
            let field = match self.variant {
                ModelVariant::SharedSpatial => 0,
                _ => year_index(month_index, self.months_per_year),
            };
            let off = self.layout.field_offset(field);
            for &(node, w) in &self.cell_projector[cell_rank] {
                entries.push(((off + node) as u32, w));
            }
        }
        Ok(entries)
    }
}

/// Log likelihood over explicit linear predictors; errors carry the first
/// offending record index.
pub fn log_likelihood_eta(obs: &[Obs], eta: &[f64]) -> Result<f64> {
    let mut acc = 0.0;
    for (r, (&e, o)) in eta.iter().zip(obs).enumerate() {
        if !e.is_finite() {
            return Err(Error::numerical(format!(
                "non-finite linear predictor at record {r}"
            )));
        }
        acc += o.log_lik(e);
    }
    Ok(acc)
}

/// ln(n!) by direct summation (counts are small integers).
pub fn ln_factorial(n: u32) -> f64 {
    (2..=n as u64).map(|k| (k as f64).ln()).sum()
}

/// Stationary AR(1) precision with unit marginal variance: tridiagonal
/// with diagonal (1, 1 + rho^2, ..., 1 + rho^2, 1) / (1 - rho^2) and
/// off-diagonal -rho / (1 - rho^2).
pub fn ar1_precision(n: usize, rho: f64) -> Result<SparseMatrix> {
    if !(rho.abs() < 1.0) {
        return Err(Error::domain(format!("|rho| must be < 1, got {rho}")));
    }
    if n == 0 {
        return Err(Error::config("ar1 precision needs at least one year"));
    }
    let s = 1.0 / (1.0 - rho * rho);
    let mut t = Triplets::new(n, n);
    for i in 0..n {
        let d = if n == 1 {
            1.0
        } else if i == 0 || i == n - 1 {
            s
        } else {
            (1.0 + rho * rho) * s
        };
        t.push(i, i, d);
        if i + 1 < n {
            t.push_sym(i, i + 1, -rho * s);
        }
    }
    Ok(t.to_csr())
}

/// Cyclic first-order random-walk structure matrix (diagonal 2,
/// neighbors -1, months m and 1 linked).
pub fn cyclic_rw1_structure(m: usize) -> DMatrix<f64> {
    let mut r = DMatrix::zeros(m, m);
    for i in 0..m {
        r[(i, i)] = 2.0;
        r[(i, (i + 1) % m)] -= 1.0;
        r[(i, (i + m - 1) % m)] -= 1.0;
    }
    r
}

/// Structure matrix scaled so the generalized marginal variance (geometric
/// mean of the marginal variances under the sum-to-zero constraint) is 1;
/// the precision parameter then matches the PC prior's variance scale.
pub fn scaled_cyclic_rw1_structure(m: usize) -> DMatrix<f64> {
    let r = cyclic_rw1_structure(m);
    let eig = nalgebra::SymmetricEigen::new(r.clone());
    // Generalized inverse diagonal; the null space (constant vector) is
    // dropped.
    let mut diag = vec![0.0f64; m];
    for k in 0..m {
        let lambda = eig.eigenvalues[k];
        if lambda > 1e-9 {
            for i in 0..m {
                diag[i] += eig.eigenvectors[(i, k)].powi(2) / lambda;
            }
        }
    }
    let log_gv = diag.iter().map(|d| d.ln()).sum::<f64>() / m as f64;
    r * log_gv.exp()
}

/// Orthonormal basis of the sum-to-zero subspace (Helmert columns):
/// f = S g has sum(f) = 0 exactly for every g.
pub fn sum_to_zero_basis(m: usize) -> DMatrix<f64> {
    let mut s = DMatrix::zeros(m, m - 1);
    for j in 1..m {
        let norm = (j as f64 * (j as f64 + 1.0)).sqrt();
        for i in 0..j {
            s[(i, j - 1)] = 1.0 / norm;
        }
        s[(j, j - 1)] = -(j as f64) / norm;
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn cell(i: usize) -> CellId {
        CellId(i)
    }

    fn records_for_cell_year(
        cell_id: usize,
        year: usize,
        counts: &[u32],
        months_per_year: usize,
    ) -> Vec<CountRecord> {
        counts
            .iter()
            .enumerate()
            .map(|(m, &n)| {
                CountRecord::single(cell(cell_id), year * months_per_year + m + 1, n, 4.0)
            })
            .collect()
    }

    #[test]
    fn all_zero_cell_year_collapses_to_one_record_with_exposure_48() {
        let recs = records_for_cell_year(0, 0, &[0; 12], 12);
        let out = subsample_zero_months(&recs, 12, 7).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].count, 0);
        assert_relative_eq!(out[0].exposure, 48.0);
        assert_eq!(out[0].n_months_aggregated, 12);
    }

    #[test]
    fn all_positive_cell_year_passes_through() {
        let recs = records_for_cell_year(0, 0, &[1; 12], 12);
        let out = subsample_zero_months(&recs, 12, 7).unwrap();
        assert_eq!(out.len(), 12);
        assert!(out.iter().all(|r| r.n_months_aggregated == 1));
        assert!(out.iter().all(|r| (r.exposure - 4.0).abs() < 1e-15));
    }

    #[test]
    fn subsampling_preserves_counts_and_exposure() {
        let mut recs = Vec::new();
        for c in 0..5 {
            for y in 0..3 {
                let counts: Vec<u32> = (0..12)
                    .map(|m| if (c + y + m) % 7 == 0 { 1 } else { 0 })
                    .collect();
                recs.extend(records_for_cell_year(c, y, &counts, 12));
            }
        }
        let out = subsample_zero_months(&recs, 12, 99).unwrap();
        let n_before: u32 = recs.iter().map(|r| r.count).sum();
        let n_after: u32 = out.iter().map(|r| r.count).sum();
        assert_eq!(n_before, n_after);
        let e_before: f64 = recs.iter().map(|r| r.exposure).sum();
        let e_after: f64 = out.iter().map(|r| r.exposure).sum();
        assert_eq!(e_before, e_after);
    }

    #[test]
    fn subsampling_is_deterministic_and_seed_sensitive() {
        let mut recs = Vec::new();
        for c in 0..20 {
            recs.extend(records_for_cell_year(c, 0, &[0; 12], 12));
        }
        let a = subsample_zero_months(&recs, 12, 1).unwrap();
        let b = subsample_zero_months(&recs, 12, 1).unwrap();
        let c = subsample_zero_months(&recs, 12, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(
            a.iter().map(|r| r.month_index).collect::<Vec<_>>(),
            c.iter().map(|r| r.month_index).collect::<Vec<_>>()
        );
    }

    #[test]
    fn partial_year_aggregates_over_available_months() {
        // 6 observed months, all zero -> one record with exposure 24.
        let recs = records_for_cell_year(0, 0, &[0; 6], 12);
        let out = subsample_zero_months(&recs, 12, 3).unwrap();
        assert_eq!(out.len(), 1);
        assert_relative_eq!(out[0].exposure, 24.0);
        assert!(out[0].month_index <= 6);
    }

    #[test]
    fn duplicate_records_rejected() {
        let mut recs = records_for_cell_year(0, 0, &[0; 3], 12);
        recs.push(recs[0].clone());
        assert!(subsample_zero_months(&recs, 12, 1).is_err());
    }

    #[test]
    fn poisson_loglik_examples() {
        let o = Obs::Poisson {
            n: 0.0,
            exposure: 4.0,
            log_fact: 0.0,
        };
        assert_relative_eq!(o.log_lik(0.0), -4.0);
        let o = Obs::Poisson {
            n: 1.0,
            exposure: 4.0,
            log_fact: ln_factorial(1),
        };
        assert_relative_eq!(o.log_lik(0.0), -4.0);
    }

    #[test]
    fn ln_factorial_matches_direct_products() {
        assert_eq!(ln_factorial(0), 0.0);
        assert_eq!(ln_factorial(1), 0.0);
        assert_relative_eq!(ln_factorial(5), (120.0f64).ln(), epsilon = 1e-12);
        assert_relative_eq!(ln_factorial(12), (479001600.0f64).ln(), epsilon = 1e-9);
    }

    #[test]
    fn ar1_interior_diagonal_matches_closed_form() {
        let q = ar1_precision(3, 0.5).unwrap();
        assert_relative_eq!(q.get(1, 1), 5.0 / 3.0, epsilon = 1e-14);
        assert_relative_eq!(q.get(0, 0), 1.0 / 0.75, epsilon = 1e-14);
        assert_relative_eq!(q.get(0, 1), -0.5 / 0.75, epsilon = 1e-14);
        assert!(ar1_precision(3, 1.0).is_err());
    }

    #[test]
    fn ar1_marginals_are_stationary() {
        // Unit marginal variance in every year, not just asymptotically.
        let n = 24;
        let q = ar1_precision(n, 0.89).unwrap();
        let cov = q.to_dense().try_inverse().unwrap();
        for i in 0..n {
            assert_relative_eq!(cov[(i, i)], 1.0, epsilon = 1e-10);
        }
        assert_relative_eq!(cov[(0, 1)], 0.89, epsilon = 1e-10);
    }

    #[test]
    fn sum_to_zero_basis_is_orthonormal_and_centered() {
        for m in [3usize, 4, 12] {
            let s = sum_to_zero_basis(m);
            let sts = s.transpose() * &s;
            for i in 0..m - 1 {
                for j in 0..m - 1 {
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert_relative_eq!(sts[(i, j)], expect, epsilon = 1e-12);
                }
            }
            // Columns orthogonal to the constant vector.
            for j in 0..m - 1 {
                let col_sum: f64 = (0..m).map(|i| s[(i, j)]).sum();
                assert!(col_sum.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scaled_rw1_has_unit_generalized_variance() {
        let m = 12;
        let r_scaled = scaled_cyclic_rw1_structure(m);
        // Recompute the generalized variance of the scaled structure: the
        // geometric mean of the pseudo-inverse diagonal must be 1.
        let eig = nalgebra::SymmetricEigen::new(r_scaled);
        let mut diag = vec![0.0f64; m];
        for k in 0..m {
            let l = eig.eigenvalues[k];
            if l > 1e-9 {
                for i in 0..m {
                    diag[i] += eig.eigenvectors[(i, k)].powi(2) / l;
                }
            }
        }
        let log_gv = diag.iter().map(|d| d.ln()).sum::<f64>() / m as f64;
        assert!(log_gv.abs() < 1e-10);
    }
}
