use nalgebra::DVector;

use super::{
    compute_active_set, compute_w, gradient, objective, project_box, ActiveSet, ControllerConfig, QuadraticModel,
    ScalingMatrix, VarLimits,
};
use crate::error::Result;

/// Quantities formed at the start of one iteration.
#[derive(Debug, Clone)]
pub struct ControllerState {
    pub qg: DVector<f64>,
    pub gradient: DVector<f64>,
    pub w: DVector<f64>,
    pub active: ActiveSet,
    pub scaling: ScalingMatrix,
    /// `u = D g`.
    pub direction: DVector<f64>,
    pub objective: f64,
}

impl ControllerState {
    /// Evaluate `h`, `∇h`, `w`, `I` and `D` at `qg` on the model.
    pub fn at<M: QuadraticModel + ?Sized>(
        model: &M,
        c: &DVector<f64>,
        v_ref: &DVector<f64>,
        limits: &VarLimits,
        cfg: &ControllerConfig,
        qg: DVector<f64>,
        scaling: impl FnOnce(&ActiveSet) -> Result<ScalingMatrix>,
    ) -> Result<Self> {
        let obj = objective(model, &qg, c, v_ref)?;
        let v = model.sensitivity() * &qg + c;
        let g = gradient(model, &v, v_ref)?;
        Self::from_gradient(qg, g, obj, limits, cfg, scaling)
    }

    /// Same, with the gradient and objective supplied (e.g. from measurements).
    pub fn from_gradient(
        qg: DVector<f64>,
        g: DVector<f64>,
        objective: f64,
        limits: &VarLimits,
        cfg: &ControllerConfig,
        scaling: impl FnOnce(&ActiveSet) -> Result<ScalingMatrix>,
    ) -> Result<Self> {
        let w = compute_w(&qg, &g, cfg, limits);
        let active = compute_active_set(&qg, &g, &w, cfg, limits);
        let scaling = scaling(&active)?;
        let direction = scaling.apply(&g);
        Ok(ControllerState {
            qg,
            gradient: g,
            w,
            active,
            scaling,
            direction,
            objective,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmijoOutcome {
    /// Accepted iterate, or the unchanged input when no trial was accepted.
    pub qg_next: DVector<f64>,
    pub alpha: f64,
    /// Rejected trials before acceptance.
    pub backtracks: usize,
    pub accepted: bool,
    /// Objective at `qg_next` as seen by the evaluator.
    pub objective_next: f64,
}

/// Backtracking search along the projected arc `[q − β^τ u]`.
///
/// A trial is accepted when
/// `h(q) − h(q⁺) ≥ δ (β^τ Σ_{i∉I} g_i u_i + Σ_{i∈I} g_i (q_i − q⁺_i))`.
/// `eval` returns the objective at a trial point.
pub fn armijo_search(
    state: &ControllerState,
    limits: &VarLimits,
    cfg: &ControllerConfig,
    mut eval: impl FnMut(&DVector<f64>) -> Result<f64>,
) -> Result<ArmijoOutcome> {
    let q = &state.qg;
    let g = &state.gradient;
    let u = &state.direction;
    let free_slope: f64 = state.active.free_indices().iter().map(|&i| g[i] * u[i]).sum();
    let active = state.active.indices();

    for b in 0..=cfg.max_armijo_backtracks {
        let alpha = cfg.beta.powi((cfg.first_trial_exponent as usize + b) as i32);
        let trial = project_box(&(q - u * alpha), limits);
        let h_next = eval(&trial)?;
        let active_term: f64 = active.iter().map(|&i| g[i] * (q[i] - trial[i])).sum();
        if state.objective - h_next >= cfg.delta * (alpha * free_slope + active_term) {
            return Ok(ArmijoOutcome {
                qg_next: trial,
                alpha,
                backtracks: b,
                accepted: true,
                objective_next: h_next,
            });
        }
    }
    Ok(ArmijoOutcome {
        qg_next: q.clone(),
        alpha: 0.0,
        backtracks: cfg.max_armijo_backtracks + 1,
        accepted: false,
        objective_next: state.objective,
    })
}

/// Line search using the model objective.
pub fn armijo_step<M: QuadraticModel + ?Sized>(
    model: &M,
    c: &DVector<f64>,
    v_ref: &DVector<f64>,
    limits: &VarLimits,
    cfg: &ControllerConfig,
    state: &ControllerState,
) -> Result<ArmijoOutcome> {
    armijo_search(state, limits, cfg, |q| objective(model, q, c, v_ref))
}
