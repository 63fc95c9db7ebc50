//! Nonlinear multiphase power flow used as the physical plant.
//!
//! Backward/forward sweep on the radial tree with constant-power loads:
//! the backward pass accumulates branch currents leaf-to-root from the load
//! currents `conj(s / V)`, the forward pass updates voltages root-to-leaf
//! through `V_j = V_i - Z_ij I_ij`.

use nalgebra::{DVector, Dyn, Matrix, VecStorage, U1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{check_dim, Error, Result};
use crate::linflow::OperatingPoint;
use crate::netmodel::{Complex64, NetworkModel};

pub type CVector = Matrix<Complex64, Dyn, U1, VecStorage<Complex64, Dyn, U1>>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantConfig {
    /// Stop when max |ΔV| between sweeps falls below this (pu).
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for PlantConfig {
    fn default() -> Self {
        PlantConfig {
            tolerance: 1e-8,
            max_iterations: 200,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlantSolution {
    pub complex_voltages: CVector,
    pub squared_magnitudes: DVector<f64>,
    pub iterations: usize,
    /// max |ΔV| of the final sweep.
    pub residual: f64,
    /// max |ΔV| for every sweep, in order.
    pub residual_history: Vec<f64>,
}

/// Slack phasors `sqrt(v0_r)·a_φ` for each head phase.
pub fn slack_phasors(net: &NetworkModel, v0: &DVector<f64>) -> Vec<Complex64> {
    net.root_phases()
        .iter()
        .zip(v0.iter())
        .map(|(p, &v)| p.rotation() * v.sqrt())
        .collect()
}

/// Solve the plant for net consumption `p + j(qc - qg)` at every phase node.
pub fn solve_nonlinear(
    net: &NetworkModel,
    point: &OperatingPoint,
    qg: &DVector<f64>,
    cfg: &PlantConfig,
) -> Result<PlantSolution> {
    let m = net.dim();
    check_dim("v0", net.root_dim(), point.v0.len())?;
    check_dim("p", m, point.p.len())?;
    check_dim("qc", m, point.qc.len())?;
    check_dim("qg", m, qg.len())?;
    if point.v0.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Scenario("head voltage must be positive".into()));
    }

    let slack = slack_phasors(net, &point.v0);
    let load: Vec<Complex64> = (0..m)
        .map(|k| Complex64::new(point.p[k], point.qc[k] - qg[k]))
        .collect();

    let mut v = CVector::from_fn(m, |k, _| {
        let phase = net.phase_nodes[k].phase;
        let r = net.root_phases().position(phase).expect("phases nest under the head");
        slack[r]
    });
    let mut current = CVector::zeros(m);
    let mut history = Vec::new();

    for iter in 1..=cfg.max_iterations {
        // backward: branch current = own load current + children's branch currents
        current.fill(Complex64::new(0.0, 0.0));
        for &k in net.topo_order().iter().rev() {
            if v[k].norm() < 1e-9 {
                return Err(Error::VoltageCollapse(k));
            }
            current[k] += (load[k] / v[k]).conj();
            if let Ok(p) = net.parent(k) {
                let c = current[k];
                current[p] += c;
            }
        }

        // forward: one segment block at a time, parents first
        let mut delta: f64 = 0.0;
        let mut next = v.clone();
        let mut done = vec![false; net.segments.len()];
        for &k in net.topo_order() {
            let si = net.segment_of(k);
            if done[si] {
                continue;
            }
            done[si] = true;
            let seg = &net.segments[si];
            let off = net.segment_offset(si);
            let n = seg.phases.len();
            let drop = &seg.impedance * current.rows(off, n);
            for i in 0..n {
                let up = match net.parent(off + i) {
                    Ok(p) => next[p],
                    Err(r) => slack[r],
                };
                next[off + i] = up - drop[i];
            }
        }
        for k in 0..m {
            delta = delta.max((next[k] - v[k]).norm());
        }
        v = next;
        if !delta.is_finite() {
            return Err(Error::NonConvergence {
                iterations: iter,
                residual: delta,
            });
        }
        history.push(delta);
        if delta < cfg.tolerance {
            let squared_magnitudes = DVector::from_iterator(m, v.iter().map(|z| z.norm_sqr()));
            return Ok(PlantSolution {
                complex_voltages: v,
                squared_magnitudes,
                iterations: iter,
                residual: delta,
                residual_history: history,
            });
        }
    }
    Err(Error::NonConvergence {
        iterations: cfg.max_iterations,
        residual: history.last().copied().unwrap_or(f64::NAN),
    })
}

/// Seeded additive Gaussian noise on squared-voltage measurements.
#[derive(Debug, Clone)]
pub struct MeasurementNoise {
    std: f64,
    rng: ChaCha8Rng,
}

impl MeasurementNoise {
    pub fn new(std: f64, seed: u64) -> Result<Self> {
        if !(std >= 0.0 && std.is_finite()) {
            return Err(Error::Config(format!("noise std must be >= 0, got {std}")));
        }
        Ok(MeasurementNoise {
            std,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn none() -> Self {
        MeasurementNoise {
            std: 0.0,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn std(&self) -> f64 {
        self.std
    }

    /// `v` plus one noise draw per entry.
    pub fn corrupt(&mut self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = v.clone();
        if self.std > 0.0 {
            let dist = Normal::new(0.0, self.std).expect("std validated");
            for x in out.iter_mut() {
                *x += dist.sample(&mut self.rng);
            }
        }
        out
    }
}

/// `|V|²` per phase node, plus measurement noise when configured.
pub fn measure_squared_voltages(sol: &PlantSolution, noise: &mut MeasurementNoise) -> DVector<f64> {
    noise.corrupt(&sol.squared_magnitudes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::parse_network;
    use approx::assert_abs_diff_eq;

    fn two_bus(r: f64, x: f64) -> NetworkModel {
        parse_network(&format!(
            r#"{{"base_voltage_v":4160,"base_power_va":1e5,
                "buses":[{{"id":0,"phases":"a"}},{{"id":1,"phases":"a"}}],
                "segments":[{{"from":0,"to":1,"phases":"a","z_pu":[[{r},{x}]]}}]}}"#
        ))
        .unwrap()
    }

    fn single(v0: f64, p: f64, q: f64) -> OperatingPoint {
        OperatingPoint::new(
            DVector::from_element(1, v0),
            DVector::from_element(1, p),
            DVector::from_element(1, q),
        )
        .unwrap()
    }

    #[test]
    fn no_load_returns_slack_in_one_sweep() {
        let net = parse_network(
            r#"{"base_voltage_v":4160,"base_power_va":1e5,
                "buses":[{"id":0,"phases":"abc"},{"id":1,"phases":"abc"},{"id":2,"phases":"c"}],
                "segments":[{"from":0,"to":1,"phases":"abc","z_pu":[[0.01,0.1],[0,0.03],[0,0.03],[0,0.03],[0.01,0.1],[0,0.03],[0,0.03],[0,0.03],[0.01,0.1]]},
                            {"from":1,"to":2,"phases":"c","z_pu":[[0.01,0.1]]}]}"#,
        )
        .unwrap();
        let point = OperatingPoint::no_load(3, 4);
        let sol = solve_nonlinear(&net, &point, &DVector::zeros(4), &PlantConfig::default()).unwrap();
        assert_eq!(sol.iterations, 1);
        let slack = slack_phasors(&net, &point.v0);
        for (k, n) in net.phase_nodes.iter().enumerate() {
            assert_abs_diff_eq!((sol.complex_voltages[k] - slack[n.phase.index()]).norm(), 0.0, epsilon = 1e-15);
        }
        let v = measure_squared_voltages(&sol, &mut MeasurementNoise::none());
        for x in v.iter() {
            assert_abs_diff_eq!(*x, 1.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn two_bus_light_load_near_linear() {
        let net = two_bus(0.0, 0.1);
        let sol = solve_nonlinear(&net, &single(1.0, 0.1, 0.0), &DVector::zeros(1), &PlantConfig::default()).unwrap();
        let v = sol.squared_magnitudes[0];
        // linear prediction with R = 0, Q = 0 is exactly 1
        assert!((v - 1.0).abs() <= 2e-3);
        assert!(v < 1.0);
    }

    #[test]
    fn two_bus_matches_closed_form() {
        // |V1|⁴ - (v0 - 2(rP + xQ))|V1|² + |z|²|s|² = 0, take the high-voltage root
        for &(r, x, p, q) in &[(0.02, 0.1, 0.3, 0.1), (0.05, 0.05, 0.5, -0.2), (0.0, 0.2, 0.1, 0.4)] {
            let net = two_bus(r, x);
            let sol = solve_nonlinear(
                &net,
                &single(1.0, p, q),
                &DVector::zeros(1),
                &PlantConfig { tolerance: 1e-14, max_iterations: 500 },
            )
            .unwrap();
            let b = 1.0 - 2.0 * (r * p + x * q);
            let zz = (r * r + x * x) * (p * p + q * q);
            let v1 = (b + (b * b - 4.0 * zz).sqrt()) / 2.0;
            assert_abs_diff_eq!(sol.squared_magnitudes[0], v1, epsilon = 1e-10);
        }
    }

    #[test]
    fn heavy_load_fails_to_converge() {
        let net = two_bus(0.1, 0.5);
        let res = solve_nonlinear(&net, &single(1.0, 5.0, 5.0), &DVector::zeros(1), &PlantConfig::default());
        assert!(matches!(res, Err(Error::NonConvergence { .. }) | Err(Error::VoltageCollapse(_))));
    }

    #[test]
    fn noise_is_seeded_and_unbiased() {
        let net = two_bus(0.01, 0.1);
        let sol = solve_nonlinear(&net, &single(1.0, 0.1, 0.05), &DVector::zeros(1), &PlantConfig::default()).unwrap();
        let clean = sol.squared_magnitudes[0];
        let mut a = MeasurementNoise::new(0.0, 7).unwrap();
        assert_eq!(measure_squared_voltages(&sol, &mut a)[0], clean);

        let sigma = 0.01;
        let mut n1 = MeasurementNoise::new(sigma, 42).unwrap();
        let mut n2 = MeasurementNoise::new(sigma, 42).unwrap();
        let draws: Vec<f64> = (0..10_000).map(|_| measure_squared_voltages(&sol, &mut n1)[0]).collect();
        let again: Vec<f64> = (0..10_000).map(|_| measure_squared_voltages(&sol, &mut n2)[0]).collect();
        assert_eq!(draws, again);
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!((mean - clean).abs() <= 5.0 * sigma / 100.0);
        assert!(MeasurementNoise::new(-1.0, 0).is_err());
    }
}
