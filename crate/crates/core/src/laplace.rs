//! Empirical-Bayes Laplace inference: Newton optimization of the latent
//! field at fixed hyperparameters, the Laplace-approximated log marginal
//! likelihood, derivative-free optimization over the hyperparameters, and
//! Gaussian-approximation posterior summaries.

use rayon::prelude::*;

use crate::covariates::CovariateTable;
use crate::error::{Error, Result};
use crate::model::{HyperParams, LatentModel, LatentProblem};
use crate::optim::{nelder_mead, NelderMeadOptions};
use crate::sparse::{rcm_with_dense_last, LdlFactor, LdlSymbolic, SparseMatrix, Triplets};

const Z_95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone)]
pub struct NewtonOptions {
    /// Convergence on the gradient max-norm.
    pub grad_tol: f64,
    /// Convergence on the step max-norm.
    pub step_tol: f64,
    pub max_iter: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions {
            grad_tol: 1e-6,
            step_tol: 1e-8,
            max_iter: 100,
        }
    }
}

/// Latent mode and curvature at fixed hyperparameters.
pub struct InnerMode {
    pub x: Vec<f64>,
    pub hessian: SparseMatrix,
    pub factor: LdlFactor,
    pub log_det_hessian: f64,
    pub iterations: usize,
    /// log likelihood + latent Gaussian prior quadratic form at the mode
    /// (without the prior normalizing constant).
    pub objective: f64,
}

/// Reusable machinery for assembling H = Q + D' W D on a fixed pattern:
/// dense (frequent) design columns are accumulated in dense buffers,
/// sparse-column cliques through precomputed slot lists.
pub struct HessianAssembler {
    pattern: SparseMatrix,
    q_slots: Vec<u32>,
    n_cols: usize,
    dense_cols: Vec<u32>,
    dense_rank: Vec<u32>,
    /// Slot of (dense_col[a], c) for every a, c; u32::MAX where absent.
    dense_slots: Vec<u32>,
    /// Slot of (c, dense_col[a]) for non-dense c.
    dense_slots_t: Vec<u32>,
    /// Per-row slots of the sparse-column products, in enumeration order:
    /// diagonal (i, i), then each pair (i, j), i < j, as (i,j) and (j,i).
    clique_slots: Vec<u32>,
    buffer: Vec<f64>,
    symbolic: LdlSymbolic,
}

const ABSENT: u32 = u32::MAX;

impl HessianAssembler {
    pub fn new(problem: &LatentProblem) -> Result<Self> {
        let rows = problem.rows;
        let q = &problem.q;
        let n = q.n_rows();
        if rows.n_cols() != n {
            return Err(Error::config(
                "design and prior precision dimensions differ",
            ));
        }

        // Columns present in at least a quarter of the rows are treated as
        // dense (fixed effects and seasonal coordinates in practice).
        let n_rows = rows.n_rows();
        let mut counts = vec![0usize; n];
        for r in 0..n_rows {
            let (cols, _) = rows.row(r);
            for &c in cols {
                counts[c as usize] += 1;
            }
        }
        let threshold = (n_rows / 4).max(1);
        let mut dense_cols: Vec<u32> = Vec::new();
        let mut dense_rank = vec![ABSENT; n];
        for c in 0..n {
            if counts[c] >= threshold {
                dense_rank[c] = dense_cols.len() as u32;
                dense_cols.push(c as u32);
            }
        }

        // Pattern: Q, dense-column cross terms, sparse cliques.
        let mut t = Triplets::with_capacity(n, n, q.nnz() + dense_cols.len() * n * 2);
        for (i, j, _) in q.iter() {
            t.push(i, j, 0.0);
        }
        let appearing: Vec<usize> = (0..n).filter(|&c| counts[c] > 0).collect();
        for &d in &dense_cols {
            for &c in &appearing {
                t.push(d as usize, c, 0.0);
                t.push(c, d as usize, 0.0);
            }
        }
        let mut sparse_in_row: Vec<u32> = Vec::new();
        for r in 0..n_rows {
            let (cols, _) = rows.row(r);
            sparse_in_row.clear();
            sparse_in_row.extend(cols.iter().filter(|&&c| dense_rank[c as usize] == ABSENT));
            for (a, &ci) in sparse_in_row.iter().enumerate() {
                t.push(ci as usize, ci as usize, 0.0);
                for &cj in sparse_in_row.iter().skip(a + 1) {
                    t.push(ci as usize, cj as usize, 0.0);
                    t.push(cj as usize, ci as usize, 0.0);
                }
            }
        }
        let pattern = t.to_csr();
        let slot = |i: usize, j: usize| -> u32 {
            pattern.position(i, j).map_or(ABSENT, |p| p as u32)
        };

        let mut q_slots = Vec::with_capacity(q.nnz());
        for (i, j, _) in q.iter() {
            let s = slot(i, j);
            debug_assert!(s != ABSENT);
            q_slots.push(s);
        }
        let d = dense_cols.len();
        let mut dense_slots = vec![ABSENT; d * n];
        let mut dense_slots_t = vec![ABSENT; d * n];
        for (a, &dc) in dense_cols.iter().enumerate() {
            for &c in &appearing {
                dense_slots[a * n + c] = slot(dc as usize, c);
                if dense_rank[c] == ABSENT {
                    dense_slots_t[a * n + c] = slot(c, dc as usize);
                }
            }
        }
        let mut clique_slots = Vec::new();
        for r in 0..n_rows {
            let (cols, _) = rows.row(r);
            sparse_in_row.clear();
            sparse_in_row.extend(cols.iter().filter(|&&c| dense_rank[c as usize] == ABSENT));
            for (a, &ci) in sparse_in_row.iter().enumerate() {
                clique_slots.push(slot(ci as usize, ci as usize));
                for &cj in sparse_in_row.iter().skip(a + 1) {
                    clique_slots.push(slot(ci as usize, cj as usize));
                    clique_slots.push(slot(cj as usize, ci as usize));
                }
            }
        }

        let perm = rcm_with_dense_last(&pattern, (n / 2).max(64));
        let symbolic = LdlSymbolic::new(&pattern, perm)?;

        Ok(HessianAssembler {
            pattern,
            q_slots,
            n_cols: n,
            dense_cols,
            dense_rank,
            dense_slots,
            dense_slots_t,
            clique_slots,
            buffer: vec![0.0; d * n],
            symbolic,
        })
    }

    /// H = Q + D' diag(w) D on the fixed pattern, then LDL' factorization.
    pub fn assemble_and_factor(
        &mut self,
        problem: &LatentProblem,
        w: &[f64],
    ) -> Result<(SparseMatrix, LdlFactor)> {
        let rows = problem.rows;
        let n = self.n_cols;
        let d = self.dense_cols.len();
        let vals_len = self.pattern.nnz();
        let mut h = self.pattern.clone();
        {
            let vals = h.values_mut();
            for v in vals.iter_mut() {
                *v = 0.0;
            }
            for (k, (_, _, qv)) in problem.q.iter().enumerate() {
                vals[self.q_slots[k] as usize] += qv;
            }
            self.buffer.iter_mut().for_each(|b| *b = 0.0);
            let mut clique_pos = 0usize;
            let mut dense_in_row: Vec<(usize, f64)> = Vec::with_capacity(d);
            let mut sparse_in_row: Vec<(usize, f64)> = Vec::with_capacity(4);
            for r in 0..rows.n_rows() {
                let wr = w[r];
                let (cols, rvals) = rows.row(r);
                dense_in_row.clear();
                sparse_in_row.clear();
                for (&c, &v) in cols.iter().zip(rvals) {
                    if self.dense_rank[c as usize] == ABSENT {
                        sparse_in_row.push((c as usize, v));
                    } else {
                        dense_in_row.push((self.dense_rank[c as usize] as usize, v));
                    }
                }
                // Dense rows of D' W D accumulate into the d x n buffer.
                for &(a, va) in &dense_in_row {
                    let wva = wr * va;
                    let row_buf = &mut self.buffer[a * n..(a + 1) * n];
                    for (&c, &vc) in cols.iter().zip(rvals) {
                        row_buf[c as usize] += wva * vc;
                    }
                }
                // Sparse-sparse cliques go straight to their slots.
                for (a, &(ci, vi)) in sparse_in_row.iter().enumerate() {
                    let _ = ci;
                    vals[self.clique_slots[clique_pos] as usize] += wr * vi * vi;
                    clique_pos += 1;
                    for &(_, vj) in sparse_in_row.iter().skip(a + 1) {
                        let prod = wr * vi * vj;
                        vals[self.clique_slots[clique_pos] as usize] += prod;
                        vals[self.clique_slots[clique_pos + 1] as usize] += prod;
                        clique_pos += 2;
                    }
                }
            }
            debug_assert_eq!(clique_pos, self.clique_slots.len());
            // Scatter the dense buffers.
            for a in 0..d {
                for c in 0..n {
                    let b = self.buffer[a * n + c];
                    if b != 0.0 {
                        let s = self.dense_slots[a * n + c];
                        if s != ABSENT {
                            vals[s as usize] += b;
                        }
                        let st = self.dense_slots_t[a * n + c];
                        if st != ABSENT {
                            vals[st as usize] += b;
                        }
                    }
                }
            }
            debug_assert_eq!(vals.len(), vals_len);
        }
        let factor = self.symbolic.factor(&h)?;
        Ok((h, factor))
    }
}

/// Newton optimization of the latent posterior at fixed theta.
///
/// Converges when the gradient max-norm falls below `grad_tol` or the step
/// below `step_tol`; backtracks by halving when a step does not improve
/// the objective. The returned Hessian and factor are evaluated at the
/// accepted mode.
pub fn inner_mode_with(
    problem: &LatentProblem,
    assembler: &mut HessianAssembler,
    opts: &NewtonOptions,
    x0: Option<&[f64]>,
) -> Result<InnerMode> {
    let n = problem.rows.n_cols();
    let mut x = match x0 {
        Some(x0) if x0.len() == n => x0.to_vec(),
        _ => vec![0.0; n],
    };
    let objective = |x: &[f64], eta: &[f64]| -> Result<f64> {
        let ll = crate::model::log_likelihood_eta(problem.obs, eta)?;
        Ok(ll - 0.5 * problem.q.quad_form(x))
    };

    let mut eta = problem.rows.eta(&x);
    let mut obj = objective(&x, &eta)?;
    let mut trace: Vec<String> = Vec::new();
    let mut w = vec![0.0; problem.obs.len()];
    let mut iterations = 0usize;

    loop {
        if iterations >= opts.max_iter {
            return Err(Error::NonConvergence {
                message: format!(
                    "inner Newton did not converge in {} iterations",
                    opts.max_iter
                ),
                trace,
            });
        }
        iterations += 1;

        // Gradient D' g - Q x and curvature weights.
        let mut grad = problem.q.matvec(&x);
        for v in &mut grad {
            *v = -*v;
        }
        let mut g = vec![0.0; problem.obs.len()];
        for (r, o) in problem.obs.iter().enumerate() {
            let (gr, wr) = o.grad_curv(eta[r]);
            g[r] = gr;
            w[r] = wr;
        }
        problem.rows.add_transpose_mul(&g, &mut grad);
        let grad_norm = grad.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if grad_norm < opts.grad_tol {
            break;
        }

        let (_, factor) = assembler.assemble_and_factor(problem, &w)?;
        let step = factor.solve(&grad);

        // Halving line search on objective decrease.
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let x_new: Vec<f64> = x.iter().zip(&step).map(|(a, s)| a + t * s).collect();
            let eta_new = problem.rows.eta(&x_new);
            match objective(&x_new, &eta_new) {
                Ok(obj_new) if obj_new >= obj - 1e-12 * obj.abs().max(1.0) => {
                    let step_norm = t * step.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                    trace.push(format!(
                        "iter {iterations}: grad {grad_norm:.3e}, step {step_norm:.3e}, objective {obj_new:.10e}"
                    ));
                    x = x_new;
                    eta = eta_new;
                    obj = obj_new;
                    accepted = true;
                    if step_norm < opts.step_tol {
                        return finish(problem, assembler, x, eta, obj, iterations, &mut w);
                    }
                    break;
                }
                _ => {
                    t *= 0.5;
                }
            }
        }
        if !accepted {
            return Err(Error::NonConvergence {
                message: "inner Newton line search failed to improve the objective".to_string(),
                trace,
            });
        }
    }
    finish(problem, assembler, x, eta, obj, iterations, &mut w)
}

fn finish(
    problem: &LatentProblem,
    assembler: &mut HessianAssembler,
    x: Vec<f64>,
    eta: Vec<f64>,
    obj: f64,
    iterations: usize,
    w: &mut [f64],
) -> Result<InnerMode> {
    // Curvature at the accepted mode.
    for (r, o) in problem.obs.iter().enumerate() {
        let (_, wr) = o.grad_curv(eta[r]);
        w[r] = wr;
    }
    let (hessian, factor) = assembler.assemble_and_factor(problem, w)?;
    let log_det_hessian = factor.log_det();
    Ok(InnerMode {
        x,
        hessian,
        factor,
        log_det_hessian,
        iterations,
        objective: obj,
    })
}

/// One-shot wrapper over [`inner_mode_with`].
pub fn inner_mode(model: &LatentModel, h: &HyperParams) -> Result<InnerMode> {
    let problem = model.problem(h)?;
    let mut assembler = HessianAssembler::new(&problem)?;
    inner_mode_with(&problem, &mut assembler, &NewtonOptions::default(), None)
}

/// Laplace-approximated log marginal likelihood
/// log pi(y | theta) ~= loglik(x*) - x*' Q x* / 2
///                      + (log det Q - log det H) / 2;
/// the (2 pi)^(n/2) factors of prior and approximation cancel.
pub fn log_marginal_laplace(problem: &LatentProblem, mode: &InnerMode) -> f64 {
    mode.objective + 0.5 * (problem.q_log_det - mode.log_det_hessian)
}

/// Convenience: inner mode + Laplace marginal at one theta.
pub fn log_marginal_at(model: &LatentModel, h: &HyperParams) -> Result<f64> {
    let problem = model.problem(h)?;
    let mut assembler = HessianAssembler::new(&problem)?;
    let mode = inner_mode_with(&problem, &mut assembler, &NewtonOptions::default(), None)?;
    Ok(log_marginal_laplace(&problem, &mode))
}

/// Unnormalized log posterior of theta: Laplace marginal + hyper prior.
pub fn log_posterior_at(model: &LatentModel, theta_vec: &[f64]) -> Result<f64> {
    let h = model.theta_from_vec(theta_vec)?;
    Ok(log_marginal_at(model, &h)? + model.log_prior_hyper(theta_vec))
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    /// Evaluation budget of the outer derivative-free search.
    pub budget: usize,
    pub restarts: usize,
    pub newton: NewtonOptions,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            budget: 400,
            restarts: 1,
            newton: NewtonOptions::default(),
            seed: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FixedEffectSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// 95% interval excludes zero.
    pub significant: bool,
}

#[derive(Debug, Clone)]
pub struct FitDiagnostics {
    pub outer_evals: usize,
    pub converged: bool,
    pub newton_iterations_final: usize,
    pub final_gradient_norm: f64,
}

/// Fit outputs: hyperparameter posterior mode with observed-information
/// standard errors, latent Gaussian-approximation summaries, fixed-effect
/// credible intervals, and the Laplace log marginal likelihood.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub theta: HyperParams,
    pub theta_names: Vec<&'static str>,
    /// Natural-scale posterior standard errors (delta method from the
    /// finite-difference Hessian in transformed space).
    pub theta_sd: Vec<f64>,
    pub theta_vec: Vec<f64>,
    pub latent_mean: Vec<f64>,
    pub latent_sd: Vec<f64>,
    pub fixed_effects: Vec<FixedEffectSummary>,
    pub log_marginal: f64,
    pub log_posterior: f64,
    pub diagnostics: FitDiagnostics,
}

/// Maximizes the Laplace marginal times the hyper prior over theta
/// (Nelder-Mead with restarts within the budget), then summarizes the
/// latent Gaussian approximation at the mode. A fit that exhausts the
/// budget is returned with `diagnostics.converged = false`.
pub fn fit(model: &LatentModel, theta_init: &HyperParams, opts: &FitOptions) -> Result<FitResult> {
    let theta0 = model.theta_to_vec(theta_init);
    let warm: std::cell::RefCell<Option<Vec<f64>>> = std::cell::RefCell::new(None);

    let problem0 = model.problem(theta_init)?;
    let assembler = std::cell::RefCell::new(HessianAssembler::new(&problem0)?);

    let objective = |theta: &[f64]| -> f64 {
        let Ok(h) = model.theta_from_vec(theta) else {
            return f64::INFINITY;
        };
        let lp = model.log_prior_hyper(theta);
        if !lp.is_finite() {
            return f64::INFINITY;
        }
        let Ok(problem) = model.problem(&h) else {
            return f64::INFINITY;
        };
        let x0 = warm.borrow().clone();
        let mode = match inner_mode_with(
            &problem,
            &mut assembler.borrow_mut(),
            &opts.newton,
            x0.as_deref(),
        ) {
            Ok(m) => m,
            Err(_) => return f64::INFINITY,
        };
        let lm = log_marginal_laplace(&problem, &mode);
        *warm.borrow_mut() = Some(mode.x);
        -(lm + lp)
    };

    let (theta_hat, outer_evals, converged) = if theta0.is_empty() {
        (theta0.clone(), 1, true)
    } else {
        let nm_opts = NelderMeadOptions {
            initial_step: 0.35,
            tol_f: 1e-6,
            tol_x: 1e-5,
            max_evals: opts.budget,
            restarts: opts.restarts,
            jitter_seed: opts.seed,
            jitter_scale: 0.4,
        };
        let r = nelder_mead(&objective, &theta0, &nm_opts)?;
        (r.x, r.evals, r.converged)
    };

    // Hyperparameter standard errors from a central finite-difference
    // Hessian of the negative log posterior at the mode.
    let theta_sd_vec = if theta_hat.is_empty() {
        Vec::new()
    } else {
        hyper_standard_errors(&objective, &theta_hat, model)
    };

    let h_hat = model.theta_from_vec(&theta_hat)?;
    let problem = model.problem(&h_hat)?;
    let x0 = warm.borrow().clone();
    let mode = inner_mode_with(
        &problem,
        &mut assembler.borrow_mut(),
        &opts.newton,
        x0.as_deref(),
    )?;
    let log_marginal = log_marginal_laplace(&problem, &mode);
    let log_post = log_marginal + model.log_prior_hyper(&theta_hat);

    // Latent marginal standard deviations from the Gaussian approximation.
    let n = mode.x.len();
    let latent_sd: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| mode.factor.inverse_diagonal_entry(i).max(0.0).sqrt())
        .collect();

    let layout = model.layout();
    let fixed_effects: Vec<FixedEffectSummary> = (0..layout.n_fixed)
        .map(|j| {
            let mean = mode.x[j];
            let sd = latent_sd[j];
            let (lo, hi) = (mean - Z_95 * sd, mean + Z_95 * sd);
            FixedEffectSummary {
                name: model.fixed_names()[j].clone(),
                mean,
                sd,
                ci_low: lo,
                ci_high: hi,
                significant: lo > 0.0 || hi < 0.0,
            }
        })
        .collect();

    // Final gradient norm for the diagnostics.
    let eta = model.rows().eta(&mode.x);
    let mut grad = problem.q.matvec(&mode.x);
    for v in &mut grad {
        *v = -*v;
    }
    let g: Vec<f64> = model
        .obs()
        .iter()
        .zip(&eta)
        .map(|(o, &e)| o.grad_curv(e).0)
        .collect();
    model.rows().add_transpose_mul(&g, &mut grad);
    let final_grad = grad.iter().fold(0.0f64, |m, v| m.max(v.abs()));

    Ok(FitResult {
        theta: h_hat,
        theta_names: model.theta_names(),
        theta_sd: theta_sd_vec,
        theta_vec: theta_hat,
        latent_mean: mode.x,
        latent_sd,
        fixed_effects,
        log_marginal,
        log_posterior: log_post,
        diagnostics: FitDiagnostics {
            outer_evals,
            converged,
            newton_iterations_final: mode.iterations,
            final_gradient_norm: final_grad,
        },
    })
}

/// Delta-method natural-scale standard errors from the transformed-space
/// finite-difference Hessian.
fn hyper_standard_errors(
    objective: &dyn Fn(&[f64]) -> f64,
    theta_hat: &[f64],
    model: &LatentModel,
) -> Vec<f64> {
    let d = theta_hat.len();
    let h_step = 1e-3;
    let mut hess = nalgebra::DMatrix::zeros(d, d);
    let f0 = objective(theta_hat);
    for i in 0..d {
        for j in i..d {
            let mut tpp = theta_hat.to_vec();
            let mut tpm = theta_hat.to_vec();
            let mut tmp = theta_hat.to_vec();
            let mut tmm = theta_hat.to_vec();
            let hi = h_step * theta_hat[i].abs().max(1.0);
            let hj = h_step * theta_hat[j].abs().max(1.0);
            if i == j {
                tpp[i] += hi;
                tmm[i] -= hi;
                let v = (objective(&tpp) - 2.0 * f0 + objective(&tmm)) / (hi * hi);
                hess[(i, i)] = v;
            } else {
                tpp[i] += hi;
                tpp[j] += hj;
                tpm[i] += hi;
                tpm[j] -= hj;
                tmp[i] -= hi;
                tmp[j] += hj;
                tmm[i] -= hi;
                tmm[j] -= hj;
                let v = (objective(&tpp) - objective(&tpm) - objective(&tmp) + objective(&tmm))
                    / (4.0 * hi * hj);
                hess[(i, j)] = v;
                hess[(j, i)] = v;
            }
        }
    }
    let cov = hess
        .try_inverse()
        .unwrap_or_else(|| nalgebra::DMatrix::from_diagonal_element(d, d, f64::NAN));
    let mut sds = Vec::with_capacity(d);
    let names = model.theta_names();
    let h_nat = model.theta_from_vec(theta_hat).expect("validated above");
    for (i, name) in names.iter().enumerate() {
        let sd_t = cov[(i, i)].max(0.0).sqrt();
        // d natural / d transformed at the mode.
        let jac = match *name {
            "range" => h_nat.range,
            "sd" => h_nat.sd,
            "rho" => 1.0 - h_nat.rho * h_nat.rho,
            "seasonal_prec" => h_nat.seasonal_prec,
            _ => 1.0,
        };
        sds.push(sd_t * jac);
    }
    sds
}

/// Gaussian posterior approximation at fixed theta, for predictions and
/// seasonal summaries.
pub struct PosteriorApprox<'m> {
    model: &'m LatentModel,
    pub theta: HyperParams,
    pub mode: Vec<f64>,
    factor: LdlFactor,
}

impl<'m> PosteriorApprox<'m> {
    pub fn at(model: &'m LatentModel, h: &HyperParams) -> Result<Self> {
        let problem = model.problem(h)?;
        let mut assembler = HessianAssembler::new(&problem)?;
        let mode = inner_mode_with(&problem, &mut assembler, &NewtonOptions::default(), None)?;
        Ok(PosteriorApprox {
            model,
            theta: *h,
            mode: mode.x,
            factor: mode.factor,
        })
    }

    /// Posterior mean and sd of the linear predictor (log intensity per
    /// km^2) at (cell rank, month) targets. Fails if any target month has
    /// no covariates, listing the offending targets.
    pub fn predict(
        &self,
        covariates: &CovariateTable,
        targets: &[(usize, usize)],
    ) -> Result<Vec<(f64, f64)>> {
        let missing: Vec<String> = targets
            .iter()
            .filter(|(cell, month)| {
                *month < 1 || *month > covariates.n_months() || *cell >= covariates.n_cells()
            })
            .map(|(cell, month)| format!("(cell {cell}, month {month})"))
            .collect();
        if !missing.is_empty() {
            return Err(Error::config(format!(
                "covariates missing for targets: {}",
                missing.join(", ")
            )));
        }
        let rows: Result<Vec<Vec<(u32, f64)>>> = targets
            .iter()
            .map(|&(cell, month)| self.model.target_row(covariates, cell, month))
            .collect();
        let rows = rows?;
        let n = self.mode.len();
        Ok(rows
            .into_par_iter()
            .map(|row| {
                let mean: f64 = row.iter().map(|&(c, v)| v * self.mode[c as usize]).sum();
                let mut rhs = vec![0.0; n];
                for &(c, v) in &row {
                    rhs[c as usize] = v;
                }
                let sol = self.factor.solve(&rhs);
                let var: f64 = row.iter().map(|&(c, v)| v * sol[c as usize]).sum();
                (mean, var.max(0.0).sqrt())
            })
            .collect())
    }

    /// Seasonal odds ratios exp(f(m) - f(reference)) with 95% bands from
    /// the joint Gaussian approximation of the seasonal block.
    pub fn seasonal_odds_ratio(&self, reference_month: usize) -> Result<Vec<SeasonalOddsRatio>> {
        let layout = self.model.layout();
        if layout.n_seasonal == 0 {
            return Err(Error::config(
                "model has no seasonal block; odds ratios undefined",
            ));
        }
        let m = self.model.months_per_year();
        if reference_month < 1 || reference_month > m {
            return Err(Error::config(format!(
                "reference month {reference_month} outside 1..={m}"
            )));
        }
        let s = self.model.seasonal_basis().expect("seasonal present");
        let off = layout.seasonal_offset();
        let k = layout.n_seasonal;

        // Joint covariance of the seasonal coordinates: k solves.
        let n = self.mode.len();
        let mut cov_g = nalgebra::DMatrix::zeros(k, k);
        for j in 0..k {
            let mut rhs = vec![0.0; n];
            rhs[off + j] = 1.0;
            let sol = self.factor.solve(&rhs);
            for i in 0..k {
                cov_g[(i, j)] = sol[off + i];
            }
        }
        let g_mean: Vec<f64> = (0..k).map(|j| self.mode[off + j]).collect();

        let mut out = Vec::with_capacity(m);
        for month in 1..=m {
            let mut contrast = vec![0.0; k];
            for j in 0..k {
                contrast[j] = s[(month - 1, j)] - s[(reference_month - 1, j)];
            }
            let diff: f64 = contrast.iter().zip(&g_mean).map(|(c, g)| c * g).sum();
            let mut var = 0.0;
            for i in 0..k {
                for j in 0..k {
                    var += contrast[i] * cov_g[(i, j)] * contrast[j];
                }
            }
            let sd = var.max(0.0).sqrt();
            out.push(SeasonalOddsRatio {
                month,
                ratio: diff.exp(),
                lower: (diff - Z_95 * sd).exp(),
                upper: (diff + Z_95 * sd).exp(),
            });
        }
        Ok(out)
    }

    /// Posterior mean of the seasonal effect on the month scale.
    pub fn seasonal_effect(&self) -> Result<Vec<f64>> {
        let layout = self.model.layout();
        if layout.n_seasonal == 0 {
            return Err(Error::config("model has no seasonal block"));
        }
        let s = self.model.seasonal_basis().expect("seasonal present");
        let off = layout.seasonal_offset();
        let m = self.model.months_per_year();
        Ok((0..m)
            .map(|level| {
                (0..layout.n_seasonal)
                    .map(|j| s[(level, j)] * self.mode[off + j])
                    .sum()
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SeasonalOddsRatio {
    pub month: usize,
    pub ratio: f64,
    pub lower: f64,
    pub upper: f64,
}
