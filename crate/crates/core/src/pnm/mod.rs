//! Box-constrained minimization of `h(q) = ½‖M q + c − v_r‖²`.
//!
//! The projected Newton method scales the gradient with `D = E⁻¹`, where `E`
//! keeps the Hessian's principal block over the free indices and replaces the
//! rows/columns of the ε-active set `I` by `|H_ii|` on the diagonal. GP and
//! DSGP are provided as baselines.
//!
//! The gradient is `Mᵀ(v − v_r)`, the exact derivative of `h`; `M` is not
//! symmetric on unbalanced feeders.

mod scaling;
mod solvers;
mod step;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::netmodel::LinearSensitivityModel;

pub use scaling::{build_diagonal_scaling, build_scaling, ScalingMatrix};
pub use solvers::{
    dsgp_solve, gp_solve, largest_eigenvalue, pnm_iteration, pnm_solve, pnm_solve_observed, IterationRecord,
    Method, SolveReport,
};
pub use step::{armijo_search, armijo_step, ArmijoOutcome, ControllerState};

/// Sensitivity matrix and Hessian of a quadratic voltage objective.
pub trait QuadraticModel {
    fn sensitivity(&self) -> &DMatrix<f64>;
    fn hessian(&self) -> &DMatrix<f64>;

    fn dim(&self) -> usize {
        self.sensitivity().ncols()
    }
}

impl QuadraticModel for LinearSensitivityModel {
    fn sensitivity(&self) -> &DMatrix<f64> {
        &self.m_matrix
    }

    fn hessian(&self) -> &DMatrix<f64> {
        &self.hessian
    }
}

/// A quadratic model given directly by its sensitivity matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseQuadratic {
    sensitivity: DMatrix<f64>,
    hessian: DMatrix<f64>,
}

impl DenseQuadratic {
    pub fn new(sensitivity: DMatrix<f64>) -> Result<Self> {
        check_dim("sensitivity columns", sensitivity.nrows(), sensitivity.ncols())?;
        let hessian = sensitivity.tr_mul(&sensitivity);
        if hessian.clone().cholesky().is_none() {
            return Err(Error::HessianNotPositiveDefinite);
        }
        Ok(DenseQuadratic { sensitivity, hessian })
    }
}

impl QuadraticModel for DenseQuadratic {
    fn sensitivity(&self) -> &DMatrix<f64> {
        &self.sensitivity
    }

    fn hessian(&self) -> &DMatrix<f64> {
        &self.hessian
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerConfig {
    /// Cap on the active-set band width.
    pub epsilon: f64,
    /// Step shrink factor, in (0, 1).
    pub beta: f64,
    /// Sufficient-decrease constant, in (0, 0.5).
    pub delta: f64,
    /// Diagonal of `C` used when measuring distance to the bounds; `None` is the identity.
    pub c_diag: Option<Vec<f64>>,
    pub max_armijo_backtracks: usize,
    /// Stop once ‖q(t+1) − q(t)‖∞ falls below this.
    pub convergence_tol: f64,
    pub max_iterations: usize,
    /// Fixed GP step; `None` means `1/λ_max(H)`.
    pub gp_step: Option<f64>,
    /// Exponent of the first trial step `β^k`. The line search pre-increments
    /// its counter, so the first trial is `β¹`.
    pub first_trial_exponent: u32,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            epsilon: 1e-3,
            beta: 0.5,
            delta: 0.1,
            c_diag: None,
            max_armijo_backtracks: 50,
            convergence_tol: 1e-8,
            max_iterations: 200_000,
            gp_step: None,
            first_trial_exponent: 1,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return bad(format!("beta must lie in (0,1), got {}", self.beta));
        }
        if !(self.delta > 0.0 && self.delta < 0.5) {
            return bad(format!("delta must lie in (0,0.5), got {}", self.delta));
        }
        if !(self.convergence_tol > 0.0) {
            return bad("convergence_tol must be positive".into());
        }
        if let Some(c) = &self.c_diag {
            if c.iter().any(|&x| !(x > 0.0)) {
                return bad("C must be positive definite".into());
            }
        }
        if let Some(s) = self.gp_step {
            if !(s > 0.0) {
                return bad("gp_step must be positive".into());
            }
        }
        Ok(())
    }

    fn c_entry(&self, i: usize) -> f64 {
        self.c_diag.as_ref().map_or(1.0, |c| c[i])
    }
}

/// Box `[lower, upper]` on the DER VAr vector.
#[derive(Debug, Clone, PartialEq)]
pub struct VarLimits {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl VarLimits {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        check_dim("limits", lower.len(), upper.len())?;
        if let Some(i) = (0..lower.len()).find(|&i| !(lower[i] <= upper[i])) {
            return Err(Error::InvalidLimits(format!(
                "entry {i}: lower {} exceeds upper {}",
                lower[i], upper[i]
            )));
        }
        Ok(VarLimits { lower, upper })
    }

    /// `[-b, b]` element-wise.
    pub fn symmetric(bound: DVector<f64>) -> Result<Self> {
        VarLimits::new(-bound.clone(), bound)
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        x.len() == self.dim() && (0..x.len()).all(|i| self.lower[i] <= x[i] && x[i] <= self.upper[i])
    }
}

/// ε-active index set `I(t)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActiveSet {
    mask: Vec<bool>,
}

impl ActiveSet {
    pub fn empty(m: usize) -> Self {
        ActiveSet { mask: vec![false; m] }
    }

    pub fn from_indices(m: usize, idx: &[usize]) -> Self {
        let mut mask = vec![false; m];
        for &i in idx {
            mask[i] = true;
        }
        ActiveSet { mask }
    }

    pub fn contains(&self, i: usize) -> bool {
        self.mask[i]
    }

    pub fn len(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.mask.len()
    }

    pub fn indices(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| self.mask[i]).collect()
    }

    pub fn free_indices(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| !self.mask[i]).collect()
    }
}

/// `½‖M q + c − v_r‖²`.
pub fn objective<M: QuadraticModel + ?Sized>(
    model: &M,
    qg: &DVector<f64>,
    c: &DVector<f64>,
    v_ref: &DVector<f64>,
) -> Result<f64> {
    let m = model.dim();
    check_dim("qg", m, qg.len())?;
    check_dim("c", m, c.len())?;
    check_dim("v_ref", m, v_ref.len())?;
    let r = model.sensitivity() * qg + c - v_ref;
    Ok(0.5 * r.norm_squared())
}

/// `½‖v − v_r‖²` for an already evaluated voltage profile.
pub fn deviation_objective(v: &DVector<f64>, v_ref: &DVector<f64>) -> f64 {
    0.5 * (v - v_ref).norm_squared()
}

/// `Mᵀ(v − v_r)`.
pub fn gradient<M: QuadraticModel + ?Sized>(
    model: &M,
    v: &DVector<f64>,
    v_ref: &DVector<f64>,
) -> Result<DVector<f64>> {
    let m = model.dim();
    check_dim("v", m, v.len())?;
    check_dim("v_ref", m, v_ref.len())?;
    Ok(model.sensitivity().tr_mul(&(v - v_ref)))
}

pub fn project_box(x: &DVector<f64>, limits: &VarLimits) -> DVector<f64> {
    DVector::from_iterator(
        x.len(),
        x.iter()
            .zip(limits.lower.iter().zip(limits.upper.iter()))
            .map(|(&v, (&lo, &hi))| v.clamp(lo, hi)),
    )
}

/// `w = |q − [q − C ∇h]|`.
pub fn compute_w(
    qg: &DVector<f64>,
    gradient: &DVector<f64>,
    cfg: &ControllerConfig,
    limits: &VarLimits,
) -> DVector<f64> {
    DVector::from_fn(qg.len(), |i, _| {
        let trial = (qg[i] - cfg.c_entry(i) * gradient[i]).clamp(limits.lower[i], limits.upper[i]);
        (qg[i] - trial).abs()
    })
}

/// Indices within `min(ε, w_i)` of a bound whose gradient points outward.
pub fn compute_active_set(
    qg: &DVector<f64>,
    gradient: &DVector<f64>,
    w: &DVector<f64>,
    cfg: &ControllerConfig,
    limits: &VarLimits,
) -> ActiveSet {
    let mask = (0..qg.len())
        .map(|i| {
            let eps = cfg.epsilon.min(w[i]);
            let (lo, hi, q, g) = (limits.lower[i], limits.upper[i], qg[i], gradient[i]);
            (lo <= q && q <= lo + eps && g > 0.0) || (hi - eps <= q && q <= hi && g < 0.0)
        })
        .collect();
    ActiveSet { mask }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktReport {
    pub residual: f64,
    pub pass: bool,
}

/// Largest violation of the box first-order optimality conditions.
pub fn check_kkt(qg: &DVector<f64>, gradient: &DVector<f64>, limits: &VarLimits, tol: f64) -> KktReport {
    let residual = (0..qg.len())
        .map(|i| {
            let (q, g) = (qg[i], gradient[i]);
            let at_lower = q <= limits.lower[i];
            let at_upper = q >= limits.upper[i];
            match (at_lower, at_upper) {
                (true, true) => 0.0,
                (true, false) => (-g).max(0.0),
                (false, true) => g.max(0.0),
                (false, false) => g.abs(),
            }
        })
        .fold(0.0, f64::max);
    KktReport {
        residual,
        pass: residual <= tol,
    }
}
