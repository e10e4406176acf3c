//! Space-time variograms for monthly station data: empirical estimation,
//! the separable and product-sum model families with exponential
//! components, and pair-count-weighted least-squares fitting.

use crate::error::{Error, Result};
use crate::optim::{nelder_mead, NelderMeadOptions};

/// Monthly series recorded at one weather station. `values[t-1]` holds the
/// observation for month index `t`; `None` marks a missing month.
#[derive(Debug, Clone)]
pub struct StationSeries {
    pub station_id: String,
    pub x_km: f64,
    pub y_km: f64,
    pub variable: String,
    pub values: Vec<Option<f64>>,
}

impl StationSeries {
    pub fn distance(&self, other: &StationSeries) -> f64 {
        ((self.x_km - other.x_km).powi(2) + (self.y_km - other.y_km).powi(2)).sqrt()
    }
}

/// Exponential variogram component. `sill` is the limiting value
/// (nugget included); gamma(0) = 0 by convention and the nugget applies at
/// any strictly positive lag:
/// gamma(d) = nugget + (sill - nugget) * (1 - exp(-d / range)) for d > 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExponentialComponent {
    pub sill: f64,
    pub range: f64,
    pub nugget: f64,
}

impl ExponentialComponent {
    pub fn new(sill: f64, range: f64, nugget: f64) -> Result<Self> {
        if !(sill > 0.0) || !(range > 0.0) || !(nugget >= 0.0) || nugget >= sill {
            return Err(Error::config(format!(
                "exponential component needs sill > 0, range > 0, 0 <= nugget < sill; got sill={sill}, range={range}, nugget={nugget}"
            )));
        }
        Ok(ExponentialComponent {
            sill,
            range,
            nugget,
        })
    }

    pub fn eval(&self, d: f64) -> f64 {
        if d <= 0.0 {
            0.0
        } else {
            self.nugget + (self.sill - self.nugget) * (1.0 - (-d / self.range).exp())
        }
    }
}

/// Parametric space-time variogram: either the product-sum family
/// gamma(h,u) = (k sill_t + 1) gamma_s(h) + (k sill_s + 1) gamma_t(u)
///              - k gamma_s(h) gamma_t(u),
/// or the separable family
/// gamma(h,u) = sill (gs(h) + gt(u) - gs(h) gt(u))
/// with standardized components of joint sill 1.
#[derive(Debug, Clone, PartialEq)]
pub enum VariogramModel {
    ProductSum {
        spatial: ExponentialComponent,
        temporal: ExponentialComponent,
        k: f64,
    },
    Separable {
        spatial: ExponentialComponent,
        temporal: ExponentialComponent,
        sill: f64,
    },
}

impl VariogramModel {
    pub fn product_sum(
        spatial: ExponentialComponent,
        temporal: ExponentialComponent,
        k: f64,
    ) -> Result<Self> {
        let k_max = 1.0 / spatial.sill.max(temporal.sill);
        if !(k > 0.0) || k > k_max {
            return Err(Error::config(format!(
                "product-sum k must lie in (0, 1/max(sill_s, sill_t)] = (0, {k_max}]; got {k}"
            )));
        }
        Ok(VariogramModel::ProductSum {
            spatial,
            temporal,
            k,
        })
    }

    pub fn separable(
        spatial: ExponentialComponent,
        temporal: ExponentialComponent,
        sill: f64,
    ) -> Result<Self> {
        for (c, what) in [(&spatial, "spatial"), (&temporal, "temporal")] {
            if (c.sill - 1.0).abs() > 1e-9 {
                return Err(Error::config(format!(
                    "separable model: {what} component must be standardized to sill 1, got {}",
                    c.sill
                )));
            }
        }
        if !(sill > 0.0) {
            return Err(Error::config("separable model: overall sill must be > 0"));
        }
        Ok(VariogramModel::Separable {
            spatial,
            temporal,
            sill,
        })
    }

    /// gamma(h, u); gamma(0, 0) = 0.
    pub fn eval(&self, h: f64, u: f64) -> f64 {
        match self {
            VariogramModel::ProductSum {
                spatial,
                temporal,
                k,
            } => {
                let gs = spatial.eval(h);
                let gt = temporal.eval(u);
                (k * temporal.sill + 1.0) * gs + (k * spatial.sill + 1.0) * gt - k * gs * gt
            }
            VariogramModel::Separable {
                spatial,
                temporal,
                sill,
            } => {
                let gs = spatial.eval(h);
                let gt = temporal.eval(u);
                sill * (gs + gt - gs * gt)
            }
        }
    }

    /// Limiting value gamma(inf, inf).
    pub fn total_sill(&self) -> f64 {
        match self {
            VariogramModel::ProductSum {
                spatial,
                temporal,
                k,
            } => spatial.sill + temporal.sill + k * spatial.sill * temporal.sill,
            VariogramModel::Separable { sill, .. } => *sill,
        }
    }

    /// Space-time covariance C(h, u) = gamma(inf, inf) - gamma(h, u).
    pub fn covariance(&self, h: f64, u: f64) -> f64 {
        self.total_sill() - self.eval(h, u)
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            VariogramModel::ProductSum { .. } => "product_sum",
            VariogramModel::Separable { .. } => "separable",
        }
    }
}

/// One cell of the empirical variogram table.
#[derive(Debug, Clone, Copy)]
pub struct VariogramBin {
    /// Mean spatial distance of the contributing pairs (km).
    pub h: f64,
    /// Absolute time lag (months).
    pub u: usize,
    /// Average of half squared differences.
    pub gamma: f64,
    pub n_pairs: usize,
}

#[derive(Debug, Clone)]
pub struct EmpiricalVariogram {
    pub bins: Vec<VariogramBin>,
}

impl EmpiricalVariogram {
    pub fn has_spatial_lags(&self) -> bool {
        self.bins.iter().any(|b| b.h > 0.0)
    }

    pub fn has_temporal_lags(&self) -> bool {
        self.bins.iter().any(|b| b.u > 0)
    }
}

/// Default spatial bin edges: 10 bins up to half the maximum station
/// distance (plus the exact h = 0 column handled separately).
pub fn default_space_edges(stations: &[StationSeries]) -> Vec<f64> {
    let mut max_d: f64 = 0.0;
    for i in 0..stations.len() {
        for j in (i + 1)..stations.len() {
            max_d = max_d.max(stations[i].distance(&stations[j]));
        }
    }
    let top = max_d / 2.0;
    (0..=10).map(|i| top * i as f64 / 10.0).collect()
}

/// Empirical space-time variogram
/// gamma_hat(h, u) = mean of (z_i - z_j)^2 / 2 over pairs whose spatial
/// distance falls in the given bin and whose absolute month lag is u.
/// Same-station pairs enter the exact h = 0 column; bins with no pairs are
/// omitted.
pub fn empirical_variogram(
    stations: &[StationSeries],
    space_edges: &[f64],
    max_time_lag: usize,
) -> Result<EmpiricalVariogram> {
    if stations.len() < 2 {
        return Err(Error::config(
            "variogram estimation needs at least 2 stations",
        ));
    }
    let n_months = stations[0].values.len();
    if n_months < 2 {
        return Err(Error::config("variogram estimation needs at least 2 months"));
    }
    if stations.iter().any(|s| s.values.len() != n_months) {
        return Err(Error::config("stations have differing month ranges"));
    }
    if stations
        .iter()
        .all(|s| s.values.iter().all(|v| v.is_none()))
    {
        return Err(Error::config("all observations are missing"));
    }
    if space_edges.len() < 2 {
        return Err(Error::config("need at least one spatial bin"));
    }
    for w in space_edges.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::config("spatial bin edges must be increasing"));
        }
    }
    // Distinct-location invariant.
    for i in 0..stations.len() {
        for j in (i + 1)..stations.len() {
            if stations[i].distance(&stations[j]) < 1e-9 {
                return Err(Error::config(format!(
                    "stations {} and {} share a location",
                    stations[i].station_id, stations[j].station_id
                )));
            }
        }
    }

    let n_space_bins = space_edges.len() - 1;
    // Index 0 is the exact h = 0 column; bins 1.. are the spatial bins.
    let n_rows = (n_space_bins + 1) * (max_time_lag + 1);
    let mut sums = vec![0.0f64; n_rows];
    let mut dsums = vec![0.0f64; n_rows];
    let mut counts = vec![0usize; n_rows];

    let spatial_bin = |h: f64| -> Option<usize> {
        if h == 0.0 {
            return Some(0);
        }
        for b in 0..n_space_bins {
            if h >= space_edges[b] && h < space_edges[b + 1] {
                return Some(b + 1);
            }
        }
        None
    };

    for i in 0..stations.len() {
        for j in i..stations.len() {
            let h = if i == j {
                0.0
            } else {
                stations[i].distance(&stations[j])
            };
            let Some(sb) = spatial_bin(h) else { continue };
            for t in 0..n_months {
                let Some(zi) = stations[i].values[t] else {
                    continue;
                };
                // Same station: only strictly later months (u > 0);
                // distinct stations: all month pairs once, u >= 0.
                let t2_start = if i == j { t + 1 } else { t.saturating_sub(max_time_lag) };
                let t2_end = (t + max_time_lag).min(n_months - 1);
                for t2 in t2_start..=t2_end {
                    if i == j && t2 == t {
                        continue;
                    }
                    if i != j && t2 < t {
                        // Counted once with (t, t2) swapped unless i == j.
                        continue;
                    }
                    let u = t2.abs_diff(t);
                    if u > max_time_lag {
                        continue;
                    }
                    let Some(zj) = stations[j].values[t2] else {
                        continue;
                    };
                    // For distinct stations the u > 0 lags come in both
                    // time orders; include the reversed order too.
                    let row = sb * (max_time_lag + 1) + u;
                    let d2 = 0.5 * (zi - zj) * (zi - zj);
                    sums[row] += d2;
                    dsums[row] += h;
                    counts[row] += 1;
                    if i != j && u > 0 {
                        if let Some(zj_back) = if t >= u { stations[j].values[t - u] } else { None }
                        {
                            let d2b = 0.5 * (zi - zj_back) * (zi - zj_back);
                            sums[row] += d2b;
                            dsums[row] += h;
                            counts[row] += 1;
                        }
                    }
                }
            }
        }
    }

    let mut bins = Vec::new();
    for sb in 0..=n_space_bins {
        for u in 0..=max_time_lag {
            let row = sb * (max_time_lag + 1) + u;
            if counts[row] > 0 && !(sb == 0 && u == 0) {
                bins.push(VariogramBin {
                    h: dsums[row] / counts[row] as f64,
                    u,
                    gamma: sums[row] / counts[row] as f64,
                    n_pairs: counts[row],
                });
            }
        }
    }
    if bins.is_empty() {
        return Err(Error::config("no pairs fell into any variogram bin"));
    }
    Ok(EmpiricalVariogram { bins })
}

/// Result of a variogram fit.
#[derive(Debug, Clone)]
pub struct FittedVariogram {
    pub model: VariogramModel,
    /// Pair-count-weighted squared error at the optimum.
    pub objective: f64,
    pub evals: usize,
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    (p / (1.0 - p)).ln()
}

fn inv_logit(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Upper bound on nugget / sill inside the fitter, keeping the nugget
/// strictly below the component sill.
const NUGGET_FRAC_MAX: f64 = 0.999;

/// Transformed parameter vector for unconstrained search.
/// Product-sum: [ln sill_s, ln range_s, logit nf_s, ln sill_t, ln range_t,
///               logit nf_t, logit kf] with nugget = nf * sill and
///               k = kf / max(sill_s, sill_t).
/// Separable:   [logit nugget_s, ln range_s, logit nugget_t, ln range_t,
///               ln sill].
fn model_to_params(model: &VariogramModel) -> Vec<f64> {
    match model {
        VariogramModel::ProductSum {
            spatial,
            temporal,
            k,
        } => {
            let kf = k * spatial.sill.max(temporal.sill);
            vec![
                spatial.sill.ln(),
                spatial.range.ln(),
                logit((spatial.nugget / (spatial.sill * NUGGET_FRAC_MAX)).max(1e-9)),
                temporal.sill.ln(),
                temporal.range.ln(),
                logit((temporal.nugget / (temporal.sill * NUGGET_FRAC_MAX)).max(1e-9)),
                logit(kf.clamp(1e-12, 1.0)),
            ]
        }
        VariogramModel::Separable {
            spatial,
            temporal,
            sill,
        } => vec![
            logit((spatial.nugget / NUGGET_FRAC_MAX).max(1e-9)),
            spatial.range.ln(),
            logit((temporal.nugget / NUGGET_FRAC_MAX).max(1e-9)),
            temporal.range.ln(),
            sill.ln(),
        ],
    }
}

fn params_to_model(kind: &VariogramModel, p: &[f64]) -> Result<VariogramModel> {
    match kind {
        VariogramModel::ProductSum { .. } => {
            let sill_s = p[0].exp();
            let sill_t = p[3].exp();
            let spatial = ExponentialComponent::new(
                sill_s,
                p[1].exp(),
                inv_logit(p[2]) * sill_s * NUGGET_FRAC_MAX,
            )?;
            let temporal = ExponentialComponent::new(
                sill_t,
                p[4].exp(),
                inv_logit(p[5]) * sill_t * NUGGET_FRAC_MAX,
            )?;
            let k = inv_logit(p[6]) / sill_s.max(sill_t);
            VariogramModel::product_sum(spatial, temporal, k)
        }
        VariogramModel::Separable { .. } => {
            let spatial =
                ExponentialComponent::new(1.0, p[1].exp(), inv_logit(p[0]) * NUGGET_FRAC_MAX)?;
            let temporal =
                ExponentialComponent::new(1.0, p[3].exp(), inv_logit(p[2]) * NUGGET_FRAC_MAX)?;
            VariogramModel::separable(spatial, temporal, p[4].exp())
        }
    }
}

/// Fit a variogram model to an empirical table by pair-count-weighted
/// least squares (box-constrained Nelder-Mead through smooth transforms,
/// restarted from 5 jittered initializations).
///
/// When the table carries no strictly positive time lags the temporal
/// component stays pinned at its initialization, and symmetrically for
/// space.
pub fn fit_variogram(
    empirical: &EmpiricalVariogram,
    init: &VariogramModel,
) -> Result<FittedVariogram> {
    if empirical.bins.is_empty() {
        return Err(Error::config("empirical variogram table is empty"));
    }
    let p0 = model_to_params(init);
    let n_params = p0.len();

    // Indices of parameters that the data can identify.
    let mut active: Vec<usize> = Vec::new();
    let (spatial_ids, temporal_ids, shared_ids): (Vec<usize>, Vec<usize>, Vec<usize>) = match init {
        VariogramModel::ProductSum { .. } => (vec![0, 1, 2], vec![3, 4, 5], vec![6]),
        VariogramModel::Separable { .. } => (vec![0, 1], vec![2, 3], vec![4]),
    };
    if empirical.has_spatial_lags() {
        active.extend(&spatial_ids);
    }
    if empirical.has_temporal_lags() {
        active.extend(&temporal_ids);
    }
    if empirical.has_spatial_lags() && empirical.has_temporal_lags() {
        active.extend(&shared_ids);
    } else if let VariogramModel::Separable { .. } = init {
        // The overall sill is identified by either margin.
        active.extend(&shared_ids);
    }
    active.sort_unstable();
    if active.is_empty() {
        return Err(Error::config("empirical table identifies no parameters"));
    }

    let objective = |sub: &[f64]| -> f64 {
        let mut p = p0.clone();
        for (slot, &idx) in active.iter().enumerate() {
            p[idx] = sub[slot];
        }
        let Ok(model) = params_to_model(init, &p) else {
            return f64::INFINITY;
        };
        let mut sse = 0.0;
        for b in &empirical.bins {
            let g = model.eval(b.h, b.u as f64);
            sse += b.n_pairs as f64 * (g - b.gamma) * (g - b.gamma);
        }
        sse
    };

    let sub0: Vec<f64> = active.iter().map(|&i| p0[i]).collect();
    let opts = NelderMeadOptions {
        initial_step: 0.4,
        tol_f: 1e-8,
        tol_x: 1e-10,
        max_evals: 60_000,
        restarts: 5,
        jitter_seed: 99,
        jitter_scale: 0.5,
    };
    let fit = nelder_mead(objective, &sub0, &opts)?;
    if !fit.converged {
        return Err(Error::NonConvergence {
            message: "variogram fit did not converge within the evaluation budget".to_string(),
            trace: vec![
                format!("best objective = {}", fit.f),
                format!("best transformed params = {:?}", fit.x),
                format!("evals = {}", fit.evals),
            ],
        });
    }
    let mut p = p0;
    for (slot, &idx) in active.iter().enumerate() {
        p[idx] = fit.x[slot];
    }
    let model = params_to_model(init, &p)?;
    let _ = n_params;
    Ok(FittedVariogram {
        model,
        objective: fit.f,
        evals: fit.evals,
    })
}
