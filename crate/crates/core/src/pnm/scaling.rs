use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::ActiveSet;
use crate::error::{check_dim, Error, Result};

/// Gradient scaling `D(t)`.
///
/// `Projected` keeps the free principal block `B` of `H` factorized, so
/// `D g` is a Cholesky solve on the free indices and a division by `|H_ii|`
/// on the active ones. `D` is never formed unless asked for.
#[derive(Debug, Clone)]
pub enum ScalingMatrix {
    Projected {
        free: Vec<usize>,
        block: Option<Cholesky<f64, Dyn>>,
        active_diag: Vec<(usize, f64)>,
        dim: usize,
    },
    Diagonal(DVector<f64>),
}

impl ScalingMatrix {
    pub fn dim(&self) -> usize {
        match self {
            ScalingMatrix::Projected { dim, .. } => *dim,
            ScalingMatrix::Diagonal(d) => d.len(),
        }
    }

    /// `u = D g`.
    pub fn apply(&self, g: &DVector<f64>) -> DVector<f64> {
        match self {
            ScalingMatrix::Projected {
                free,
                block,
                active_diag,
                dim,
            } => {
                let mut u = DVector::zeros(*dim);
                if let Some(chol) = block {
                    let rhs = DVector::from_iterator(free.len(), free.iter().map(|&i| g[i]));
                    let y = chol.solve(&rhs);
                    for (k, &i) in free.iter().enumerate() {
                        u[i] = y[k];
                    }
                }
                for &(i, d) in active_diag {
                    u[i] = d * g[i];
                }
                u
            }
            ScalingMatrix::Diagonal(d) => g.component_mul(d),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            ScalingMatrix::Projected {
                free,
                block,
                active_diag,
                dim,
            } => {
                let mut d = DMatrix::zeros(*dim, *dim);
                if let Some(chol) = block {
                    let inv = chol.inverse();
                    for (a, &i) in free.iter().enumerate() {
                        for (b, &j) in free.iter().enumerate() {
                            d[(i, j)] = inv[(a, b)];
                        }
                    }
                }
                for &(i, v) in active_diag {
                    d[(i, i)] = v;
                }
                d
            }
            ScalingMatrix::Diagonal(v) => DMatrix::from_diagonal(v),
        }
    }
}

/// `D = E⁻¹` with `E` built from `H` and the active set.
pub fn build_scaling(hessian: &DMatrix<f64>, active: &ActiveSet) -> Result<ScalingMatrix> {
    let m = hessian.nrows();
    check_dim("active set", m, active.dim())?;
    let free = active.free_indices();
    let block = if free.is_empty() {
        None
    } else {
        let b = hessian.select_rows(&free).select_columns(&free);
        Some(Cholesky::new(b).ok_or_else(|| Error::Internal("free Hessian block is not positive definite".into()))?)
    };
    let active_diag = active
        .indices()
        .into_iter()
        .map(|i| {
            let h = hessian[(i, i)].abs();
            if h > 0.0 {
                Ok((i, 1.0 / h))
            } else {
                Err(Error::Internal(format!("zero Hessian diagonal at {i}")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScalingMatrix::Projected {
        free,
        block,
        active_diag,
        dim: m,
    })
}

/// `D = diag(1/H_ii)`, the DSGP scaling.
pub fn build_diagonal_scaling(hessian: &DMatrix<f64>) -> Result<ScalingMatrix> {
    let d = hessian.diagonal();
    if d.iter().any(|&x| !(x > 0.0)) {
        return Err(Error::HessianNotPositiveDefinite);
    }
    Ok(ScalingMatrix::Diagonal(d.map(|x| 1.0 / x)))
}
