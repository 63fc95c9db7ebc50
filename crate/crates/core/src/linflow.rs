//! Evaluation of the linearized multiphase power-flow model.

use nalgebra::DVector;

use crate::error::{check_dim, Error, Result};
use crate::netmodel::{LinearSensitivityModel, NetworkModel};

/// Known operating data entering the offset `c(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatingPoint {
    /// Squared head voltages (n_0).
    pub v0: DVector<f64>,
    /// Net real consumption per phase node (m).
    pub p: DVector<f64>,
    /// Reactive consumption excluding DERs (m).
    pub qc: DVector<f64>,
}

impl OperatingPoint {
    pub fn new(v0: DVector<f64>, p: DVector<f64>, qc: DVector<f64>) -> Result<Self> {
        check_dim("operating point qc", p.len(), qc.len())?;
        if v0.iter().chain(p.iter()).chain(qc.iter()).any(|x| !x.is_finite()) {
            return Err(Error::Scenario("operating point has non-finite entries".into()));
        }
        if v0.iter().any(|&x| x <= 0.0) {
            return Err(Error::Scenario("head voltage must be positive".into()));
        }
        Ok(OperatingPoint { v0, p, qc })
    }

    /// Flat 1.0 pu head, no load.
    pub fn no_load(n0: usize, m: usize) -> Self {
        OperatingPoint {
            v0: DVector::from_element(n0, 1.0),
            p: DVector::zeros(m),
            qc: DVector::zeros(m),
        }
    }

    pub fn offset(&self, model: &LinearSensitivityModel) -> Result<DVector<f64>> {
        crate::netmodel::compute_c(model, &self.v0, &self.p, &self.qc)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoltageProfile {
    /// Squared magnitudes, per-unit².
    pub v: DVector<f64>,
}

impl VoltageProfile {
    pub fn magnitudes(&self) -> DVector<f64> {
        self.v.map(|x| x.max(0.0).sqrt())
    }
}

/// `v = M q^g + c`.
pub fn predict_voltages(
    model: &LinearSensitivityModel,
    qg: &DVector<f64>,
    c: &DVector<f64>,
) -> Result<VoltageProfile> {
    check_dim("qg", model.dim(), qg.len())?;
    check_dim("c", model.dim(), c.len())?;
    Ok(VoltageProfile {
        v: &model.m_matrix * qg + c,
    })
}

/// Segment flows in segment-phase order (which coincides with phase-node order).
#[derive(Debug, Clone, PartialEq)]
pub struct BranchFlows {
    pub real: DVector<f64>,
    pub reactive: DVector<f64>,
}

/// `P = -A⁻¹ p`, `Q = -A⁻¹ q` for net consumptions `p`, `q`.
pub fn branch_flows(
    model: &LinearSensitivityModel,
    p: &DVector<f64>,
    q: &DVector<f64>,
) -> Result<BranchFlows> {
    check_dim("p", model.dim(), p.len())?;
    check_dim("q", model.dim(), q.len())?;
    Ok(BranchFlows {
        real: -model.factor.solve(p)?,
        reactive: -model.factor.solve(q)?,
    })
}

/// Per-segment voltage-drop recursion `v_j = v_i - 2(R̃ P + X̃ Q)`, walked
/// from the head outwards. Independent of `M`; used to cross-check it.
pub fn voltages_from_flows(
    net: &NetworkModel,
    model: &LinearSensitivityModel,
    v0: &DVector<f64>,
    flows: &BranchFlows,
) -> Result<VoltageProfile> {
    let m = net.dim();
    check_dim("v0", net.root_dim(), v0.len())?;
    check_dim("P", m, flows.real.len())?;
    let drop = (model.dr.mul_vec(&flows.real) + model.dx.mul_vec(&flows.reactive)) * 2.0;
    let mut v = DVector::zeros(m);
    for &k in net.topo_order() {
        let upstream = match net.parent(k) {
            Ok(p) => v[p],
            Err(r) => v0[r],
        };
        v[k] = upstream - drop[k];
    }
    Ok(VoltageProfile { v })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::{build_linear_model, parse_network};
    use approx::assert_abs_diff_eq;

    fn two_bus() -> LinearSensitivityModel {
        let net = parse_network(
            r#"{"base_voltage_v":4160,"base_power_va":1e5,
                "buses":[{"id":0,"phases":"a"},{"id":1,"phases":"a"}],
                "segments":[{"from":0,"to":1,"phases":"a","z_pu":[[0.0,0.1]]}]}"#,
        )
        .unwrap();
        build_linear_model(&net).unwrap()
    }

    #[test]
    fn zero_injection_gives_offset() {
        let model = two_bus();
        let c = DVector::from_element(1, 1.0);
        let v = predict_voltages(&model, &DVector::zeros(1), &c).unwrap();
        assert_eq!(v.v, c);
    }

    #[test]
    fn two_bus_prediction() {
        let model = two_bus();
        let v = predict_voltages(&model, &DVector::from_element(1, 0.5), &DVector::from_element(1, 1.0)).unwrap();
        assert_abs_diff_eq!(v.v[0], 1.1, epsilon = 1e-15);
    }

    #[test]
    fn chain_flows_are_downstream_sums() {
        let net = parse_network(
            r#"{"base_voltage_v":4160,"base_power_va":1e5,
                "buses":[{"id":0,"phases":"a"},{"id":1,"phases":"a"},{"id":2,"phases":"a"}],
                "segments":[{"from":0,"to":1,"phases":"a","z_pu":[[0.01,0.1]]},
                            {"from":1,"to":2,"phases":"a","z_pu":[[0.01,0.1]]}]}"#,
        )
        .unwrap();
        let model = build_linear_model(&net).unwrap();
        let f = branch_flows(&model, &DVector::from_vec(vec![1.0, 1.0]), &DVector::zeros(2)).unwrap();
        assert_eq!(f.real.as_slice(), &[2.0, 1.0]);
        let zero = branch_flows(&model, &DVector::zeros(2), &DVector::zeros(2)).unwrap();
        assert_eq!(zero.real, DVector::zeros(2));
    }

    #[test]
    fn dimension_errors() {
        let model = two_bus();
        assert!(predict_voltages(&model, &DVector::zeros(2), &DVector::zeros(1)).is_err());
        assert!(branch_flows(&model, &DVector::zeros(1), &DVector::zeros(3)).is_err());
    }
}
