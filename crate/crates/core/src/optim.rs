//! Derivative-free minimization used by the variogram fitter and the
//! hyperparameter search: Nelder-Mead simplex with jittered restarts.

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct NelderMeadOptions {
    /// Initial simplex edge length per coordinate (absolute).
    pub initial_step: f64,
    /// Stop when the simplex function-value spread falls below this.
    pub tol_f: f64,
    /// Stop when the simplex diameter falls below this.
    pub tol_x: f64,
    /// Maximum number of objective evaluations across all restarts.
    pub max_evals: usize,
    /// Number of restarts from jittered copies of the best point so far
    /// (0 means a single plain run).
    pub restarts: usize,
    /// Seed for the deterministic jitter stream.
    pub jitter_seed: u64,
    /// Relative jitter amplitude applied on restart.
    pub jitter_scale: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        NelderMeadOptions {
            initial_step: 0.5,
            tol_f: 1e-10,
            tol_x: 1e-10,
            max_evals: 2000,
            restarts: 2,
            jitter_seed: 17,
            jitter_scale: 0.3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MinimizeResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
    pub converged: bool,
}

/// Minimize `f` starting from `x0` with Nelder-Mead plus restarts.
///
/// Objective values that are not finite are treated as +inf, which lets
/// callers express box or validity constraints by returning `f64::INFINITY`
/// outside the feasible set.
pub fn nelder_mead<F>(f: F, x0: &[f64], opts: &NelderMeadOptions) -> Result<MinimizeResult>
where
    F: Fn(&[f64]) -> f64,
{
    if x0.is_empty() {
        return Err(Error::config("nelder_mead: empty parameter vector"));
    }
    let eval = |x: &[f64]| {
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };

    let mut evals = 0usize;
    let mut best_x = x0.to_vec();
    let mut best_f = eval(&best_x);
    evals += 1;
    let mut converged = false;

    // Small deterministic LCG for restart jitter; avoids threading an RNG
    // through every caller.
    let mut state = opts.jitter_seed.wrapping_mul(0x9E3779B97F4A7C15).max(1);
    let mut next_unit = move || {
        state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        ((state >> 33) as f64 / (1u64 << 31) as f64) - 1.0
    };

    for restart in 0..=opts.restarts {
        if evals >= opts.max_evals {
            break;
        }
        let mut start = best_x.clone();
        let step = if restart == 0 {
            opts.initial_step
        } else {
            for v in start.iter_mut() {
                *v += opts.jitter_scale * opts.initial_step * next_unit();
            }
            opts.initial_step * 0.5
        };
        let budget = opts.max_evals - evals;
        let (x, fx, used, conv) = simplex_run(&eval, &start, step, opts.tol_f, opts.tol_x, budget);
        evals += used;
        if fx < best_f {
            best_f = fx;
            best_x = x;
        }
        converged |= conv;
    }

    if !best_f.is_finite() {
        return Err(Error::NonConvergence {
            message: "nelder_mead: objective not finite anywhere it was evaluated".to_string(),
            trace: vec![format!("evals = {evals}")],
        });
    }
    Ok(MinimizeResult {
        x: best_x,
        f: best_f,
        evals,
        converged,
    })
}

fn simplex_run<F>(
    eval: &F,
    x0: &[f64],
    step: f64,
    tol_f: f64,
    tol_x: f64,
    budget: usize,
) -> (Vec<f64>, f64, usize, bool)
where
    F: Fn(&[f64]) -> f64,
{
    let n = x0.len();
    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);

    let mut used = 0usize;
    let mut pts: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    let mut fv: Vec<f64> = Vec::with_capacity(n + 1);
    pts.push(x0.to_vec());
    for i in 0..n {
        let mut p = x0.to_vec();
        p[i] += if p[i].abs() > 1.0 {
            step * p[i].abs()
        } else {
            step
        };
        pts.push(p);
    }
    for p in &pts {
        fv.push(eval(p));
        used += 1;
    }

    let mut converged = false;
    while used < budget {
        // Order the simplex.
        let mut idx: Vec<usize> = (0..=n).collect();
        idx.sort_by(|&a, &b| fv[a].partial_cmp(&fv[b]).unwrap_or(std::cmp::Ordering::Equal));
        let ordered_pts: Vec<Vec<f64>> = idx.iter().map(|&i| pts[i].clone()).collect();
        let ordered_fv: Vec<f64> = idx.iter().map(|&i| fv[i]).collect();
        pts = ordered_pts;
        fv = ordered_fv;

        let spread = fv[n] - fv[0];
        let diam = (0..n)
            .map(|j| {
                pts.iter()
                    .map(|p| (p[j] - pts[0][j]).abs())
                    .fold(0.0f64, f64::max)
            })
            .fold(0.0f64, f64::max);
        if (spread.is_finite() && spread < tol_f) || diam < tol_x {
            converged = true;
            break;
        }

        // Centroid of all but the worst vertex.
        let mut centroid = vec![0.0; n];
        for p in pts.iter().take(n) {
            for j in 0..n {
                centroid[j] += p[j] / n as f64;
            }
        }

        let reflect: Vec<f64> = (0..n)
            .map(|j| centroid[j] + alpha * (centroid[j] - pts[n][j]))
            .collect();
        let f_r = eval(&reflect);
        used += 1;

        if f_r < fv[0] {
            let expand: Vec<f64> = (0..n)
                .map(|j| centroid[j] + gamma * (reflect[j] - centroid[j]))
                .collect();
            let f_e = eval(&expand);
            used += 1;
            if f_e < f_r {
                pts[n] = expand;
                fv[n] = f_e;
            } else {
                pts[n] = reflect;
                fv[n] = f_r;
            }
        } else if f_r < fv[n - 1] {
            pts[n] = reflect;
            fv[n] = f_r;
        } else {
            let contract: Vec<f64> = if f_r < fv[n] {
                (0..n)
                    .map(|j| centroid[j] + rho * (reflect[j] - centroid[j]))
                    .collect()
            } else {
                (0..n)
                    .map(|j| centroid[j] + rho * (pts[n][j] - centroid[j]))
                    .collect()
            };
            let f_c = eval(&contract);
            used += 1;
            if f_c < fv[n].min(f_r) {
                pts[n] = contract;
                fv[n] = f_c;
            } else {
                // Shrink toward the best vertex.
                for i in 1..=n {
                    for j in 0..n {
                        pts[i][j] = pts[0][j] + sigma * (pts[i][j] - pts[0][j]);
                    }
                    fv[i] = eval(&pts[i]);
                    used += 1;
                }
            }
        }
    }

    let mut best = 0usize;
    for i in 1..=n {
        if fv[i] < fv[best] {
            best = i;
        }
    }
    (pts[best].clone(), fv[best], used, converged)
}
