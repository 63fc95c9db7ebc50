//! Static solver comparison on a single loading condition.

use nalgebra::DVector;
use serde::Serialize;

use crate::error::Result;
use crate::linflow::OperatingPoint;
use crate::netmodel::{build_linear_model, LinearSensitivityModel, NetworkModel};
use crate::plant::{solve_nonlinear, PlantConfig};
use crate::pnm::{deviation_objective, dsgp_solve, gp_solve, pnm_solve, ControllerConfig, Method, SolveReport, VarLimits};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StaticLoading {
    /// Load per phase node.
    pub load_p: f64,
    pub load_q: f64,
    /// Real output per phase node of every DER bus.
    pub pv: f64,
    pub head_voltage: f64,
}

impl Default for StaticLoading {
    fn default() -> Self {
        StaticLoading {
            load_p: 0.06,
            load_q: 0.03,
            pv: 0.2,
            head_voltage: 1.0,
        }
    }
}

/// A feeder with one fixed operating point and the data every solver needs.
#[derive(Debug, Clone)]
pub struct StaticInstance {
    pub net: NetworkModel,
    pub model: LinearSensitivityModel,
    pub point: OperatingPoint,
    pub c: DVector<f64>,
    pub v_ref: DVector<f64>,
    /// `±capacity` at DER nodes, pinned to zero elsewhere.
    pub limits: VarLimits,
}

impl StaticInstance {
    pub fn new(net: NetworkModel, loading: &StaticLoading) -> Result<Self> {
        let model = build_linear_model(&net)?;
        let m = net.dim();
        let cap = net.der_capacity();
        let p = DVector::from_fn(m, |k, _| loading.load_p - if cap[k] > 0.0 { loading.pv } else { 0.0 });
        let point = OperatingPoint::new(
            DVector::from_element(net.root_dim(), loading.head_voltage.powi(2)),
            p,
            DVector::from_element(m, loading.load_q),
        )?;
        let c = point.offset(&model)?;
        let limits = VarLimits::symmetric(cap)?;
        Ok(StaticInstance {
            net,
            model,
            point,
            c,
            v_ref: DVector::from_element(m, 1.0),
            limits,
        })
    }

    pub fn dim(&self) -> usize {
        self.net.dim()
    }

    pub fn solve(&self, method: Method, cfg: &ControllerConfig) -> Result<SolveReport> {
        let q0 = DVector::zeros(self.dim());
        let f = match method {
            Method::Pnm => pnm_solve,
            Method::Gp => gp_solve,
            Method::Dsgp => dsgp_solve,
        };
        f(&self.model, &self.c, &self.v_ref, &self.limits, cfg, &q0)
    }

    /// `½‖|V|² − v_r‖²` on the nonlinear plant with `qg` applied.
    pub fn plant_objective(&self, qg: &DVector<f64>) -> Result<f64> {
        let sol = solve_nonlinear(&self.net, &self.point, qg, &PlantConfig::default())?;
        Ok(deviation_objective(&sol.squared_magnitudes, &self.v_ref))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub controller: String,
    pub iterations: usize,
    pub converged: bool,
    pub objective: f64,
    pub plant_objective: f64,
}

/// Run PNM, DSGP and GP from `q = 0` on the same instance.
pub fn compare_solvers(inst: &StaticInstance, cfg: &ControllerConfig) -> Result<Vec<BenchRow>> {
    Method::ALL
        .iter()
        .map(|&method| {
            let rep = inst.solve(method, cfg)?;
            Ok(BenchRow {
                controller: method.to_string(),
                iterations: rep.iterations,
                converged: rep.converged,
                objective: rep.objective,
                plant_objective: inst.plant_objective(&rep.qg)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generate::{generate_feeder, FeederOptions};

    #[test]
    fn ordering_on_a_generated_feeder() {
        let doc = generate_feeder(&FeederOptions {
            buses: 25,
            seed: 4,
            ..Default::default()
        })
        .unwrap();
        let inst = StaticInstance::new(NetworkModel::from_document(&doc).unwrap(), &StaticLoading::default()).unwrap();
        let cfg = ControllerConfig {
            convergence_tol: 1e-6,
            ..Default::default()
        };
        let rows = compare_solvers(&inst, &cfg).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|r| r.converged));
        assert!(rows[0].iterations < rows[1].iterations && rows[1].iterations < rows[2].iterations, "{rows:?}");
    }
}
