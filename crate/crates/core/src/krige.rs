//! Ordinary spatio-temporal kriging of station data onto grid targets,
//! using the covariance form C(h, u) = gamma(inf, inf) - gamma(h, u) of a
//! fitted variogram model and a moving time window of stations.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::SpaceTimeField;
use crate::vario::{StationSeries, VariogramModel};

#[derive(Debug, Clone)]
pub struct KrigeOptions {
    /// Half-width of the time window: observations within
    /// `|t - target| <= time_window` months enter each kriging system.
    pub time_window: usize,
    /// Relative diagonal jitter applied once if the system is singular.
    pub jitter: f64,
}

impl Default for KrigeOptions {
    fn default() -> Self {
        KrigeOptions {
            time_window: 6,
            jitter: 1e-8,
        }
    }
}

/// Kriged predictions and kriging variances on (target point, month) pairs.
#[derive(Debug, Clone)]
pub struct KrigeResult {
    pub prediction: SpaceTimeField,
    pub variance: SpaceTimeField,
}

/// Weights and summaries of a single ordinary-kriging system; exposed for
/// verification against dense oracles.
#[derive(Debug, Clone)]
pub struct KrigeSingle {
    pub weights: Vec<f64>,
    pub lagrange: f64,
    pub prediction: f64,
    pub variance: f64,
}

struct Obs {
    x: f64,
    y: f64,
    t: usize,
    z: f64,
}

fn collect_window(
    stations: &[StationSeries],
    t_target: usize,
    window: usize,
    n_months: usize,
) -> Vec<Obs> {
    let lo = t_target.saturating_sub(window).max(1);
    let hi = (t_target + window).min(n_months);
    let mut obs = Vec::new();
    for s in stations {
        for t in lo..=hi {
            if let Some(z) = s.values[t - 1] {
                obs.push(Obs {
                    x: s.x_km,
                    y: s.y_km,
                    t,
                    z,
                });
            }
        }
    }
    obs
}

fn build_system(model: &VariogramModel, obs: &[Obs]) -> DMatrix<f64> {
    let n = obs.len();
    let mut a = DMatrix::zeros(n + 1, n + 1);
    for i in 0..n {
        for j in i..n {
            let h = ((obs[i].x - obs[j].x).powi(2) + (obs[i].y - obs[j].y).powi(2)).sqrt();
            let u = obs[i].t.abs_diff(obs[j].t) as f64;
            let c = model.covariance(h, u);
            a[(i, j)] = c;
            a[(j, i)] = c;
        }
        a[(i, n)] = 1.0;
        a[(n, i)] = 1.0;
    }
    a
}

fn rhs_for_target(model: &VariogramModel, obs: &[Obs], x: f64, y: f64, t: usize) -> DVector<f64> {
    let n = obs.len();
    let mut b = DVector::zeros(n + 1);
    for (i, o) in obs.iter().enumerate() {
        let h = ((o.x - x).powi(2) + (o.y - y).powi(2)).sqrt();
        let u = o.t.abs_diff(t) as f64;
        b[i] = model.covariance(h, u);
    }
    b[n] = 1.0;
    b
}

fn solve_month(
    model: &VariogramModel,
    obs: &[Obs],
    points: &[(f64, f64)],
    t: usize,
    opts: &KrigeOptions,
) -> Result<Vec<(f64, f64)>> {
    let n = obs.len();
    if n == 0 {
        return Err(Error::config(format!(
            "kriging target month {t} has no observations in its +/-{} month window",
            opts.time_window
        )));
    }
    let a = build_system(model, obs);
    let lu = a.clone().lu();
    let total_sill = model.total_sill();
    let solve = |lu: &nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
                 b: &DVector<f64>|
     -> Option<DVector<f64>> { lu.solve(b) };

    // Singular systems get one jittered retry before failing.
    let mut lu = lu;
    if !lu.is_invertible() {
        let mut aj = a;
        for i in 0..n {
            aj[(i, i)] += opts.jitter * total_sill;
        }
        lu = aj.lu();
        if !lu.is_invertible() {
            return Err(Error::numerical(format!(
                "kriging system for month {t} is singular even after jitter"
            )));
        }
    }

    let mut out = Vec::with_capacity(points.len());
    for &(x, y) in points {
        let b = rhs_for_target(model, obs, x, y, t);
        let w = solve(&lu, &b).ok_or_else(|| {
            Error::numerical(format!("kriging solve failed for month {t}"))
        })?;
        let mut pred = 0.0;
        let mut wc = 0.0;
        for (i, o) in obs.iter().enumerate() {
            pred += w[i] * o.z;
            wc += w[i] * b[i];
        }
        let variance = (total_sill - wc - w[n]).max(0.0);
        out.push((pred, variance));
    }
    Ok(out)
}

/// Ordinary kriging of every (point, month) target. Distinct months are
/// independent systems and run in parallel.
pub fn krige_field(
    model: &VariogramModel,
    stations: &[StationSeries],
    points: &[(f64, f64)],
    n_months: usize,
    opts: &KrigeOptions,
) -> Result<KrigeResult> {
    if stations.is_empty() {
        return Err(Error::config("kriging needs at least one station"));
    }
    if stations.iter().any(|s| s.values.len() < n_months) {
        return Err(Error::config(
            "station series are shorter than the requested month range",
        ));
    }
    let monthly: Result<Vec<Vec<(f64, f64)>>> = (1..=n_months)
        .into_par_iter()
        .map(|t| {
            let obs = collect_window(stations, t, opts.time_window, n_months);
            solve_month(model, &obs, points, t, opts)
        })
        .collect();
    let monthly = monthly?;

    let n_points = points.len();
    let mut prediction = SpaceTimeField::constant(n_points, n_months, f64::NAN);
    let mut variance = SpaceTimeField::constant(n_points, n_months, f64::NAN);
    for (t_idx, month_vals) in monthly.iter().enumerate() {
        for (p, &(pred, var)) in month_vals.iter().enumerate() {
            prediction.set(p, t_idx + 1, pred);
            variance.set(p, t_idx + 1, var);
        }
    }
    Ok(KrigeResult {
        prediction,
        variance,
    })
}

/// One-shot kriging of a single space-time target; builds and solves the
/// full system. Used by tests and the dense-oracle verification.
pub fn krige_single(
    model: &VariogramModel,
    stations: &[StationSeries],
    target: (f64, f64, usize),
    n_months: usize,
    opts: &KrigeOptions,
) -> Result<KrigeSingle> {
    let (x, y, t) = target;
    if t < 1 || t > n_months {
        return Err(Error::config(format!("target month {t} outside 1..={n_months}")));
    }
    let obs = collect_window(stations, t, opts.time_window, n_months);
    let n = obs.len();
    if n == 0 {
        return Err(Error::config(format!(
            "kriging target month {t} has no observations in its window"
        )));
    }
    let a = build_system(model, &obs);
    let b = rhs_for_target(model, &obs, x, y, t);
    let lu = a.lu();
    let w = lu
        .solve(&b)
        .ok_or_else(|| Error::numerical("singular kriging system".to_string()))?;
    let mut pred = 0.0;
    let mut wc = 0.0;
    for (i, o) in obs.iter().enumerate() {
        pred += w[i] * o.z;
        wc += w[i] * b[i];
    }
    Ok(KrigeSingle {
        weights: w.iter().take(n).cloned().collect(),
        lagrange: w[n],
        prediction: pred,
        variance: (model.total_sill() - wc - w[n]).max(0.0),
    })
}

/// Kriging of the square-root precipitation pipeline: values are kriged on
/// the square-root scale and predictions squared back, so the final field
/// is nonnegative by construction.
pub fn krige_sqrt_backtransform(
    model: &VariogramModel,
    sqrt_stations: &[StationSeries],
    points: &[(f64, f64)],
    n_months: usize,
    opts: &KrigeOptions,
) -> Result<KrigeResult> {
    let mut result = krige_field(model, sqrt_stations, points, n_months, opts)?;
    for v in &mut result.prediction.values {
        *v = *v * *v;
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vario::ExponentialComponent;
    use approx::assert_relative_eq;

    fn zero_nugget_model() -> VariogramModel {
        VariogramModel::product_sum(
            ExponentialComponent::new(3.0, 40.0, 0.0).unwrap(),
            ExponentialComponent::new(2.0, 4.0, 0.0).unwrap(),
            0.05,
        )
        .unwrap()
    }

    fn demo_stations(n_months: usize) -> Vec<StationSeries> {
        let coords = [
            (0.0, 0.0),
            (30.0, 5.0),
            (12.0, 28.0),
            (45.0, 40.0),
            (5.0, 45.0),
        ];
        coords
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| StationSeries {
                station_id: format!("s{i}"),
                x_km: x,
                y_km: y,
                variable: "TAVG".into(),
                values: (1..=n_months)
                    .map(|t| Some((x * 0.1 + y * 0.05 + t as f64 * 0.2).sin() + i as f64))
                    .collect(),
            })
            .collect()
    }

    #[test]
    fn exact_interpolation_at_station_month_with_zero_nugget() {
        let model = zero_nugget_model();
        let stations = demo_stations(12);
        let opts = KrigeOptions::default();
        let s0 = &stations[1];
        let t = 6;
        let single =
            krige_single(&model, &stations, (s0.x_km, s0.y_km, t), 12, &opts).unwrap();
        assert!(
            (single.prediction - s0.values[t - 1].unwrap()).abs() < 1e-8,
            "prediction {} vs observation {}",
            single.prediction,
            s0.values[t - 1].unwrap()
        );
        assert!(single.variance.abs() < 1e-8);
        let wsum: f64 = single.weights.iter().sum();
        assert!((wsum - 1.0).abs() < 1e-10);
    }

    #[test]
    fn constant_data_predicts_the_constant() {
        let model = zero_nugget_model();
        let c = 7.5;
        let stations: Vec<StationSeries> = demo_stations(8)
            .into_iter()
            .map(|mut s| {
                s.values = vec![Some(c); 8];
                s
            })
            .collect();
        let points = vec![(10.0, 10.0), (25.0, 30.0), (40.0, 3.0)];
        let res = krige_field(&model, &stations, &points, 8, &KrigeOptions::default()).unwrap();
        for v in &res.prediction.values {
            assert_relative_eq!(*v, c, epsilon = 1e-8);
        }
        for v in &res.variance.values {
            assert!(*v >= 0.0);
        }
    }

    #[test]
    fn weights_match_dense_oracle_on_1d_configuration() {
        // Small 1D configuration solved by a hand-coded Gaussian
        // elimination oracle.
        let model = zero_nugget_model();
        let stations: Vec<StationSeries> = (0..3)
            .map(|i| StationSeries {
                station_id: format!("s{i}"),
                x_km: i as f64 * 20.0,
                y_km: 0.0,
                variable: "v".into(),
                values: vec![Some(i as f64), Some(i as f64 + 1.0)],
            })
            .collect();
        let opts = KrigeOptions {
            time_window: 0,
            jitter: 1e-8,
        };
        let target = (10.0, 0.0, 1);
        let single = krige_single(&model, &stations, target, 2, &opts).unwrap();

        // Oracle: build the same bordered system and solve with partial
        // pivoting, independent of nalgebra.
        let n = 3;
        let mut a = vec![vec![0.0f64; n + 2]; n + 1];
        for i in 0..n {
            for j in 0..n {
                let h = (stations[i].x_km - stations[j].x_km).abs();
                a[i][j] = model.covariance(h, 0.0);
            }
            a[i][n] = 1.0;
            a[n][i] = 1.0;
            let h = (stations[i].x_km - target.0).abs();
            a[i][n + 1] = model.covariance(h, 0.0);
        }
        a[n][n + 1] = 1.0;
        // Gaussian elimination with partial pivoting on the augmented system.
        let m = n + 1;
        for col in 0..m {
            let piv = (col..m)
                .max_by(|&r1, &r2| a[r1][col].abs().partial_cmp(&a[r2][col].abs()).unwrap())
                .unwrap();
            a.swap(col, piv);
            for r in (col + 1)..m {
                let f = a[r][col] / a[col][col];
                for c in col..=m {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
        let mut w = vec![0.0f64; m];
        for r in (0..m).rev() {
            let mut acc = a[r][m];
            for c in (r + 1)..m {
                acc -= a[r][c] * w[c];
            }
            w[r] = acc / a[r][r];
        }

        for i in 0..n {
            assert_relative_eq!(single.weights[i], w[i], epsilon = 1e-10);
        }
        assert_relative_eq!(single.lagrange, w[n], epsilon = 1e-10);
    }

    #[test]
    fn missing_station_months_are_dropped() {
        let model = zero_nugget_model();
        let mut stations = demo_stations(6);
        stations[0].values[2] = None;
        let res = krige_field(
            &model,
            &stations,
            &[(20.0, 20.0)],
            6,
            &KrigeOptions::default(),
        )
        .unwrap();
        assert!(res.prediction.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn sqrt_backtransform_is_nonnegative() {
        let model = VariogramModel::separable(
            ExponentialComponent::new(1.0, 60.0, 0.562).unwrap(),
            ExponentialComponent::new(1.0, 5.33, 0.562).unwrap(),
            0.019,
        )
        .unwrap();
        // Square-root-scale values, some small.
        let stations: Vec<StationSeries> = demo_stations(6)
            .into_iter()
            .map(|mut s| {
                s.values = s
                    .values
                    .iter()
                    .map(|v| v.map(|x| (x * 0.1).abs().sqrt()))
                    .collect();
                s
            })
            .collect();
        let res = krige_sqrt_backtransform(
            &model,
            &stations,
            &[(10.0, 10.0), (50.0, 50.0)],
            6,
            &KrigeOptions::default(),
        )
        .unwrap();
        assert!(res.prediction.values.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn empty_window_is_an_error() {
        let model = zero_nugget_model();
        let stations: Vec<StationSeries> = demo_stations(4)
            .into_iter()
            .map(|mut s| {
                s.values = vec![None, None, Some(1.0), Some(2.0)];
                s
            })
            .collect();
        let opts = KrigeOptions {
            time_window: 0,
            jitter: 1e-8,
        };
        assert!(krige_field(&model, &stations, &[(1.0, 1.0)], 4, &opts).is_err());
    }
}
