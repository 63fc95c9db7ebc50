use std::fmt;
use std::str::FromStr;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};

use super::{
    armijo_step, build_diagonal_scaling, build_scaling, gradient, objective, project_box, ActiveSet, ArmijoOutcome,
    ControllerConfig, ControllerState, QuadraticModel, ScalingMatrix, VarLimits,
};
use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Pnm,
    Gp,
    Dsgp,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Pnm, Method::Dsgp, Method::Gp];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Pnm => "pnm",
            Method::Gp => "gp",
            Method::Dsgp => "dsgp",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pnm" => Ok(Method::Pnm),
            "gp" => Ok(Method::Gp),
            "dsgp" => Ok(Method::Dsgp),
            other => Err(Error::Config(format!("unknown controller '{other}' (expected pnm, gp or dsgp)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub objective: f64,
    pub alpha: f64,
    pub backtracks: usize,
    pub active: usize,
    /// ‖q(t+1) − q(t)‖∞.
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub method: Method,
    pub qg: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// The line search ran out of backtracks; the last iterate is returned.
    pub line_search_exhausted: bool,
    pub initial_objective: f64,
    pub objective: f64,
    pub history: Vec<IterationRecord>,
}

fn check_inputs<M: QuadraticModel + ?Sized>(
    model: &M,
    c: &DVector<f64>,
    v_ref: &DVector<f64>,
    limits: &VarLimits,
    cfg: &ControllerConfig,
    qg0: &DVector<f64>,
) -> Result<()> {
    cfg.validate()?;
    let m = model.dim();
    check_dim("c", m, c.len())?;
    check_dim("v_ref", m, v_ref.len())?;
    check_dim("limits", m, limits.dim())?;
    check_dim("qg0", m, qg0.len())?;
    if let Some(cd) = &cfg.c_diag {
        check_dim("C", m, cd.len())?;
    }
    Ok(())
}

/// One projected Newton iteration from `qg` on the model.
pub fn pnm_iteration<M: QuadraticModel + ?Sized>(
    model: &M,
    c: &DVector<f64>,
    v_ref: &DVector<f64>,
    limits: &VarLimits,
    cfg: &ControllerConfig,
    qg: &DVector<f64>,
) -> Result<(ControllerState, ArmijoOutcome)> {
    check_inputs(model, c, v_ref, limits, cfg, qg)?;
    let state = ControllerState::at(model, c, v_ref, limits, cfg, project_box(qg, limits), |a| {
        build_scaling(model.hessian(), a)
    })?;
    let out = armijo_step(model, c, v_ref, limits, cfg, &state)?;
    Ok((state, out))
}

fn scaled_solve<M: QuadraticModel + ?Sized>(
    method: Method,
    model: &M,
    c: &DVector<f64>,
    v_ref: &DVector<f64>,
    limits: &VarLimits,
    cfg: &ControllerConfig,
    qg0: &DVector<f64>,
    mut scaling: impl FnMut(&ActiveSet) -> Result<ScalingMatrix>,
    mut observer: impl FnMut(&ControllerState),
) -> Result<SolveReport> {
    check_inputs(model, c, v_ref, limits, cfg, qg0)?;
    let mut q = project_box(qg0, limits);
    let initial_objective = objective(model, &q, c, v_ref)?;
    let mut history = Vec::new();
    let mut exhausted = false;
    let mut converged = false;

    for _ in 0..cfg.max_iterations {
        let state = ControllerState::at(model, c, v_ref, limits, cfg, q.clone(), &mut scaling)?;
        observer(&state);
        let out = armijo_step(model, c, v_ref, limits, cfg, &state)?;
        let step = (&out.qg_next - &q).amax();
        history.push(IterationRecord {
            objective: out.objective_next,
            alpha: out.alpha,
            backtracks: out.backtracks,
            active: state.active.len(),
            step,
        });
        if !out.accepted {
            warn!("{method}: line search exhausted after {} iterations", history.len());
            exhausted = true;
            converged = true;
            break;
        }
        q = out.qg_next;
        if step < cfg.convergence_tol {
            converged = true;
            break;
        }
    }
    let obj = objective(model, &q, c, v_ref)?;
    debug!("{method}: {} iterations, objective {obj:.3e}", history.len());
    Ok(SolveReport {
        method,
        qg: q,
        iterations: history.len(),
        converged,
        line_search_exhausted: exhausted,
        initial_objective,
        objective: obj,
        history,
    })
}

pub fn pnm_solve<M: QuadraticModel + ?Sized>(
    model: &M,
    c: &DVector<f64>,
    v_ref: &DVector<f64>,
    limits: &VarLimits,
    cfg: &ControllerConfig,
    qg0: &DVector<f64>,
) -> Result<SolveReport> {
    pnm_solve_observed(model, c, v_ref, limits, cfg, qg0, |_| {})
}

/// [`pnm_solve`], calling `observer` with the state of every iteration.
pub fn pnm_solve_observed<M: QuadraticModel + ?Sized>(
    model: &M,
    c: &DVector<f64>,
    v_ref: &DVector<f64>,
    limits: &VarLimits,
    cfg: &ControllerConfig,
    qg0: &DVector<f64>,
    observer: impl FnMut(&ControllerState),
) -> Result<SolveReport> {
    let h = model.hessian();
    scaled_solve(Method::Pnm, model, c, v_ref, limits, cfg, qg0, |a| build_scaling(h, a), observer)
}

/// Diagonally scaled gradient projection: `D = diag(1/H_ii)` with the same line search.
pub fn dsgp_solve<M: QuadraticModel + ?Sized>(
    model: &M,
    c: &DVector<f64>,
    v_ref: &DVector<f64>,
    limits: &VarLimits,
    cfg: &ControllerConfig,
    qg0: &DVector<f64>,
) -> Result<SolveReport> {
    let d = build_diagonal_scaling(model.hessian())?;
    scaled_solve(Method::Dsgp, model, c, v_ref, limits, cfg, qg0, |_| Ok(d.clone()), |_| {})
}

/// Plain gradient projection `q ← [q − s ∇h]` with a fixed step.
pub fn gp_solve<M: QuadraticModel + ?Sized>(
    model: &M,
    c: &DVector<f64>,
    v_ref: &DVector<f64>,
    limits: &VarLimits,
    cfg: &ControllerConfig,
    qg0: &DVector<f64>,
) -> Result<SolveReport> {
    check_inputs(model, c, v_ref, limits, cfg, qg0)?;
    let s = match cfg.gp_step {
        Some(s) => s,
        None => 1.0 / largest_eigenvalue(model.hessian())?,
    };
    let mut q = project_box(qg0, limits);
    let initial_objective = objective(model, &q, c, v_ref)?;
    let mut history = Vec::new();
    let mut converged = false;
    for _ in 0..cfg.max_iterations {
        let v = model.sensitivity() * &q + c;
        let g = gradient(model, &v, v_ref)?;
        let next = project_box(&(&q - g * s), limits);
        let step = (&next - &q).amax();
        q = next;
        history.push(IterationRecord {
            objective: objective(model, &q, c, v_ref)?,
            alpha: s,
            backtracks: 0,
            active: 0,
            step,
        });
        if step < cfg.convergence_tol {
            converged = true;
            break;
        }
    }
    let obj = objective(model, &q, c, v_ref)?;
    if !converged {
        warn!("gp: no convergence in {} iterations", cfg.max_iterations);
    }
    Ok(SolveReport {
        method: Method::Gp,
        qg: q,
        iterations: history.len(),
        converged,
        line_search_exhausted: false,
        initial_objective,
        objective: obj,
        history,
    })
}

/// Largest eigenvalue of a symmetric positive semidefinite matrix by power iteration.
pub fn largest_eigenvalue(h: &DMatrix<f64>) -> Result<f64> {
    let n = h.nrows();
    if n == 0 {
        return Err(Error::dim("matrix", 1, 0));
    }
    let mut x = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..20_000 {
        let y = h * &x;
        let next = x.dot(&y);
        let norm = y.norm();
        if norm == 0.0 {
            return Err(Error::HessianNotPositiveDefinite);
        }
        x = y / norm;
        if (next - lambda).abs() <= 1e-13 * next.abs() {
            return Ok(next);
        }
        lambda = next;
    }
    Ok(lambda)
}
